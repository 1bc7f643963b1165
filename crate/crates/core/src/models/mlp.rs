use rand::Rng;

use crate::error::{dim_err, Result};
use crate::numkit::{dot, RngStream, Tensor};
use crate::scalar::Scalar;

/// Affine layer `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    /// Glorot-uniform weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, stream: RngStream) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let mut rng = stream.rng();
        let data = (0..inputs * outputs)
            .map(|_| T::c(rng.random_range(-bound..bound)))
            .collect();
        Self {
            weight: Tensor::new(vec![outputs, inputs], data).expect("sized buffer"),
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![outputs, inputs]),
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        self.weight
            .rows()
            .zip(&self.bias)
            .map(|(row, &b)| b + dot(row, x))
            .collect()
    }

    /// `Wᵀ g`
    pub fn backward_input(&self, grad_out: &[T]) -> Vec<T> {
        let mut g = vec![T::zero(); self.inputs()];
        for (row, &go) in self.weight.rows().zip(grad_out) {
            if go != T::zero() {
                for (gi, &w) in g.iter_mut().zip(row) {
                    *gi += go * w;
                }
            }
        }
        g
    }

    /// Adds `g xᵀ` and `g` into this layer interpreted as a gradient buffer.
    pub fn accumulate(&mut self, x: &[T], grad_out: &[T]) {
        for (j, &go) in grad_out.iter().enumerate() {
            self.bias[j] += go;
            for (w, &xi) in self.weight.row_mut(j).iter_mut().zip(x) {
                *w += go * xi;
            }
        }
    }

    /// `self -= lr * grad`
    pub fn sgd_step(&mut self, grad: &Dense<T>, lr: T) {
        for (w, &g) in self.weight.data_mut().iter_mut().zip(grad.weight.data()) {
            *w -= lr * g;
        }
        for (b, &g) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

/// Stack of dense layers with `tanh` between them; the last layer is linear
/// unless `tanh_output` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
    pub tanh_output: bool,
}

/// Per-layer inputs and the final output of one forward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace<T> {
    inputs: Vec<Vec<T>>,
    pub output: Vec<T>,
}

impl<T: Scalar> Mlp<T> {
    /// `widths = [in, h1, ..., out]`.
    pub fn init(widths: &[usize], tanh_output: bool, stream: RngStream) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(dim_err!("MLP widths {widths:?} need >= 2 positive entries"));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::init(w[0], w[1], stream.child(i as u64)))
            .collect();
        Ok(Self {
            layers,
            tanh_output,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::outputs)
    }

    fn activates(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.tanh_output
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if self.activates(i) {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        h
    }

    pub fn forward_trace(&self, x: &[T]) -> MlpTrace<T> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = layer.forward(&h);
            if self.activates(i) {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(h);
            h = next;
        }
        MlpTrace { inputs, output: h }
    }

    /// Backpropagates `grad_out` through a traced pass, returning the input
    /// gradient and, when `grads` is given, accumulating parameter gradients.
    pub fn backward(&self, trace: &MlpTrace<T>, grad_out: &[T], mut grads: Option<&mut Mlp<T>>) -> Vec<T> {
        let mut g = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            if self.activates(i) {
                let y: &[T] = if i + 1 < self.layers.len() {
                    &trace.inputs[i + 1]
                } else {
                    &trace.output
                };
                for (gi, &yi) in g.iter_mut().zip(y) {
                    *gi *= T::one() - yi * yi;
                }
            }
            if let Some(acc) = grads.as_deref_mut() {
                acc.layers[i].accumulate(&trace.inputs[i], &g);
            }
            g = self.layers[i].backward_input(&g);
        }
        g
    }

    /// Zero-valued gradient buffer of the same architecture.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs(), l.outputs()))
                .collect(),
            tanh_output: self.tanh_output,
        }
    }

    pub fn sgd_step(&mut self, grad: &Mlp<T>, lr: T) {
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            l.sgd_step(g, lr);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    /// Names and tensors for checkpointing: `{prefix}.{i}.weight` / `.bias`.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), l.weight.clone()));
            out.push((format!("{prefix}.{i}.bias"), Tensor::from_vec(l.bias.clone())));
        }
        out
    }
}

/// `z / ‖z‖₂` (zero stays zero).
pub fn normalize<T: Scalar>(z: &[T]) -> Vec<T> {
    let mut y = z.to_vec();
    crate::numkit::l2_normalize(&mut y);
    y
}

/// Backward of [`normalize`]: `(g − y (y·g)) / ‖z‖`.
pub fn normalize_backward<T: Scalar>(z: &[T], grad_y: &[T]) -> Vec<T> {
    let n = crate::numkit::lp_norm(z, crate::numkit::Norm::L2);
    if n == T::zero() {
        return vec![T::zero(); z.len()];
    }
    let y: Vec<T> = z.iter().map(|&v| v / n).collect();
    let yg = dot(&y, grad_y);
    grad_y
        .iter()
        .zip(&y)
        .map(|(&g, &yi)| (g - yi * yg) / n)
        .collect()
}
