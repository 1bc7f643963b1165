//! Bilinear resize (half-pixel centres, "align corners = false") and its
//! adjoint.

use super::{Image, Tensor};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn axis_taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<Tap<T>> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Tap {
                lo,
                hi,
                frac: T::c(src - lo as f64),
            }
        })
        .collect()
}

/// Output height and width for scale `s`.
pub fn scaled_dims(height: usize, width: usize, s: f64) -> Result<(usize, usize)> {
    if !(s > 0.0 && s <= 4.0) {
        return Err(dim_err!("resize scale {s} outside (0, 4]"));
    }
    let h = (s * height as f64).round() as usize;
    let w = (s * width as f64).round() as usize;
    if h == 0 || w == 0 {
        return Err(dim_err!(
            "resize of {height}x{width} by {s} degenerates to {h}x{w}"
        ));
    }
    Ok((h, w))
}

/// Resizes by scale factor `s`; `s == 1` returns an exact copy.
pub fn resize<T: Scalar>(img: &Image<T>, s: f64) -> Result<Image<T>> {
    let (h, w) = scaled_dims(img.height, img.width, s)?;
    resize_to(img, h, w)
}

pub fn resize_to<T: Scalar>(img: &Image<T>, out_h: usize, out_w: usize) -> Result<Image<T>> {
    if out_h == 0 || out_w == 0 || img.height == 0 || img.width == 0 {
        return Err(dim_err!(
            "degenerate resize {}x{} -> {out_h}x{out_w}",
            img.height,
            img.width
        ));
    }
    if (out_h, out_w) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let ys = axis_taps::<T>(img.height, out_h);
    let xs = axis_taps::<T>(img.width, out_w);
    let one = T::one();
    let mut out = Image::zeros(img.channels, out_h, out_w);
    for c in 0..img.channels {
        for (oy, ty) in ys.iter().enumerate() {
            for (ox, tx) in xs.iter().enumerate() {
                let top = img.at(c, ty.lo, tx.lo) * (one - tx.frac) + img.at(c, ty.lo, tx.hi) * tx.frac;
                let bot = img.at(c, ty.hi, tx.lo) * (one - tx.frac) + img.at(c, ty.hi, tx.hi) * tx.frac;
                out.data[(c * out_h + oy) * out_w + ox] = top * (one - ty.frac) + bot * ty.frac;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`resize_to`]: maps a gradient on the resized image back onto
/// an `in_h × in_w` input.
pub fn resize_to_vjp<T: Scalar>(grad_out: &Image<T>, in_h: usize, in_w: usize) -> Result<Image<T>> {
    if in_h == 0 || in_w == 0 {
        return Err(dim_err!("degenerate resize input {in_h}x{in_w}"));
    }
    if (grad_out.height, grad_out.width) == (in_h, in_w) {
        return Ok(grad_out.clone());
    }
    let (out_h, out_w) = (grad_out.height, grad_out.width);
    let ys = axis_taps::<T>(in_h, out_h);
    let xs = axis_taps::<T>(in_w, out_w);
    let one = T::one();
    let mut g = Image::zeros(grad_out.channels, in_h, in_w);
    for c in 0..grad_out.channels {
        for (oy, ty) in ys.iter().enumerate() {
            for (ox, tx) in xs.iter().enumerate() {
                let go = grad_out.at(c, oy, ox);
                let gt = go * (one - ty.frac);
                let gb = go * ty.frac;
                let base = c * in_h;
                g.data[(base + ty.lo) * in_w + tx.lo] += gt * (one - tx.frac);
                g.data[(base + ty.lo) * in_w + tx.hi] += gt * tx.frac;
                g.data[(base + ty.hi) * in_w + tx.lo] += gb * (one - tx.frac);
                g.data[(base + ty.hi) * in_w + tx.hi] += gb * tx.frac;
            }
        }
    }
    Ok(g)
}

/// Resizes every image of a `B×C×H×W` batch.
pub fn resize_batch<T: Scalar>(batch: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
    let (b, c, h, w) = super::image_dims(batch)?;
    let (oh, ow) = scaled_dims(h, w, s)?;
    let mut data = Vec::with_capacity(b * c * oh * ow);
    for i in 0..b {
        let img = Image::from_batch(batch, i)?;
        data.extend(resize_to(&img, oh, ow)?.data);
    }
    Tensor::new(vec![b, c, oh, ow], data)
}
