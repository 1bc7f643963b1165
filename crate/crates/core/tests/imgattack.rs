use fgakit::guidance::{class_mean_guidance, GuidanceSet, GuidanceSource};
use fgakit::imgattack::*;
use fgakit::losses::{loss_gui, Guidance, Objective};
use fgakit::models::{forward_image, train_itc, ImageEncoder, ImageEncoderSpec, ImageModel, TextEncoder, TextEncoderSpec, TrainSpec};
use fgakit::numkit::{dot, lp_norm, softmax, Image, Norm, RngStream, Tensor};
use fgakit::synthdata::{gen_dataset, SynthSpec};
use fgakit::{Error, Result};
use proptest::prelude::*;
use rand::Rng;

/// `E(x) = A·x` on images of one fixed size.
struct Linear {
    a: Tensor<f64>,
}

impl Linear {
    fn random(dim: usize, pixels: usize, seed: u64) -> Self {
        let mut rng = RngStream::new(seed, 99).rng();
        let data = (0..dim * pixels).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self {
            a: Tensor::new(vec![dim, pixels], data).unwrap(),
        }
    }
}

impl ImageModel<f64> for Linear {
    fn embed(&self, _: usize, image: &Image<f64>) -> Result<Vec<f64>> {
        Ok(self.a.rows().map(|r| dot(r, &image.data)).collect())
    }

    fn embed_vjp(&self, _: usize, image: &Image<f64>, grad: &[f64]) -> Result<Image<f64>> {
        let mut out = vec![0.0; image.len()];
        for (r, &g) in self.a.rows().zip(grad) {
            for (o, &a) in out.iter_mut().zip(r) {
                *o += g * a;
            }
        }
        Ok(image.with_data(out))
    }
}

fn random_images(b: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = RngStream::new(seed, 7).rng();
    let data = (0..b * c * h * w).map(|_| rng.random::<f64>()).collect();
    Tensor::new(vec![b, c, h, w], data).unwrap()
}

fn one_hot_rows(m: usize, d: usize) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|k| (0..d).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn deltas(adv: &Tensor<f64>, clean: &Tensor<f64>, n: usize) -> Vec<Vec<f64>> {
    adv.data()
        .chunks(n)
        .zip(clean.data().chunks(n))
        .map(|(a, c)| a.iter().zip(c).map(|(x, y)| x - y).collect())
        .collect()
}

/// Nearest point of the ε-ball to `x` by exhaustive grid search, refined
/// coarse to fine (the objective is convex, so refinement around the best
/// coarse point cannot miss the minimizer). Final resolution 1e-3.
fn brute_force_projection(x: &[f64], eps: f64, norm: Norm) -> Vec<f64> {
    let d = x.len();
    let mut center = vec![0.0; d];
    let mut half = eps;
    for res in [2e-2, 2e-3, 1e-3] {
        let axes: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                let lo = (center[i] - half).max(-eps);
                let hi = (center[i] + half).min(eps);
                let n = ((hi - lo) / res).round() as usize;
                (0..=n).map(|k| lo + k as f64 * res).collect()
            })
            .collect();
        let mut best = (f64::INFINITY, center.clone());
        let mut idx = vec![0usize; d];
        loop {
            let p: Vec<f64> = idx.iter().enumerate().map(|(i, &k)| axes[i][k]).collect();
            if lp_norm(&p, norm) <= eps + 1e-12 {
                let dist: f64 = p.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
                if dist < best.0 {
                    best = (dist, p);
                }
            }
            let mut i = 0;
            while i < d {
                idx[i] += 1;
                if idx[i] < axes[i].len() {
                    break;
                }
                idx[i] = 0;
                i += 1;
            }
            if i == d {
                break;
            }
        }
        center = best.1;
        half = 4.0 * res;
    }
    center
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

#[test]
fn projection_matches_grid_search() {
    let mut rng = RngStream::new(3, 0).rng();
    for case in 0..30 {
        let d = 1 + case % 3;
        let eps = rng.random_range(0.1..1.0);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        for norm in [Norm::L1, Norm::L2, Norm::Linf] {
            let p = project(&x, eps, norm);
            let oracle = brute_force_projection(&x, eps, norm);
            assert!(lp_norm(&p, norm) <= eps + 1e-9);
            assert!(sq_dist(&p, &x) <= sq_dist(&oracle, &x) + 1e-12, "{norm:?} {x:?} {eps}");
            // Strong convexity: |p - o|² <= d(o) - d(p) when p is the
            // exact minimizer, and the grid optimum is close in value.
            let slack = sq_dist(&oracle, &x) - sq_dist(&p, &x);
            assert!(sq_dist(&p, &oracle) <= slack + 1e-12, "{norm:?} {x:?} {eps}");
            assert!(slack <= 1e-2, "{norm:?} {x:?} {eps}: {p:?} vs {oracle:?}");
        }
    }
}

#[test]
fn steepest_direction_beats_random_unit_directions() {
    let mut rng = RngStream::new(4, 0).rng();
    for _ in 0..20 {
        let d = rng.random_range(1..=4);
        let g: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for norm in [Norm::L2, Norm::Linf] {
            let best = dot(&g, &steepest_dir(&g, norm, 90.0).unwrap());
            for _ in 0..2000 {
                let r: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = lp_norm(&r, norm);
                let u: Vec<f64> = r.iter().map(|v| v / n).collect();
                assert!(best >= dot(&g, &u) - 1e-12);
            }
        }
    }
}

#[test]
fn l1_direction_is_unit_norm_on_the_sparsity_pattern() {
    let g = [0.4f64, -0.05, 0.9, -0.7, 0.01];
    let d = steepest_dir(&g, Norm::L1, 60.0).unwrap();
    assert!((lp_norm(&d, Norm::L1) - 1.0).abs() < 1e-15);
    let kept: Vec<usize> = (0..5).filter(|&i| d[i] != 0.0).collect();
    assert_eq!(kept, vec![0, 2, 3]);
    assert!(d.iter().zip(&g).all(|(a, b)| *a == 0.0 || a.signum() == b.signum()));
}

proptest! {
    #[test]
    fn projection_is_idempotent_and_inside(
        x in prop::collection::vec(-3.0f64..3.0, 1..12),
        eps in 0.0f64..2.0,
        which in 0usize..3,
    ) {
        let norm = [Norm::L1, Norm::L2, Norm::Linf][which];
        let p = project(&x, eps, norm);
        prop_assert!(lp_norm(&p, norm) <= eps + 1e-9);
        let pp = project(&p, eps, norm);
        for (a, b) in p.iter().zip(&pp) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        if lp_norm(&x, norm) <= eps {
            prop_assert_eq!(&p, &x);
        }
    }

    #[test]
    fn momentum_output_has_unit_mean_abs_on_first_call(g in prop::collection::vec(-5.0f64..5.0, 1..10)) {
        let mut state = MomentumState::new(g.len());
        let out = momentum_transform(&g, &mut state, 1.0);
        let mean = lp_norm(&g, Norm::L1) / g.len() as f64;
        if mean > 0.0 {
            prop_assert!((lp_norm(&out, Norm::L1) / g.len() as f64 - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(&state.g_m, &out);
    }
}

#[test]
fn zero_budget_is_exact_identity() {
    let model = Linear::random(3, 12, 1);
    let images = random_images(4, 3, 2, 2, 1);
    let w = one_hot_rows(3, 3);
    let set = GuidanceSet::new(w, vec![vec![0], vec![1], vec![2], vec![0]], GuidanceSource::ClassMean).unwrap();
    for norm in [Norm::L1, Norm::L2, Norm::Linf] {
        let cfg = AttackConfig {
            norm,
            epsilon: 0.0,
            random_start: true,
            momentum: true,
            ..Default::default()
        };
        let (adv, traces) = fga(&model, &images, &set, &cfg, None).unwrap();
        assert_eq!(adv, images);
        assert!(traces.iter().all(|t| t.linf == 0.0 && t.iterations == 10));
    }
}

#[test]
fn single_linf_step_is_fgsm() {
    let model = Linear::random(3, 12, 2);
    let images = random_images(3, 3, 2, 2, 2);
    let w = one_hot_rows(3, 3);
    let labels = vec![vec![0], vec![1], vec![2]];
    let objective = Guidance {
        w: &w,
        labels: &labels,
        temperature: 1.0,
    };
    let eps = 4.0 / 255.0;
    let cfg = AttackConfig {
        epsilon: eps,
        steps: 1,
        alpha: Some(eps),
        ..Default::default()
    };
    let (adv, _) = pgd_attack(&model, &images, &objective, &cfg).unwrap();
    for i in 0..3 {
        let v = Image::from_batch(&images, i).unwrap();
        let (_, g) = gradient(&model, i, &v, &objective, None).unwrap();
        let fgsm: Vec<f64> = v
            .data
            .iter()
            .zip(&g.data)
            .map(|(&p, &gi)| (p + eps * gi.signum() * f64::from(gi != 0.0)).clamp(0.0, 1.0))
            .collect();
        assert_eq!(Image::from_batch(&adv, i).unwrap().data, fgsm);
    }
}

#[test]
fn more_steps_reach_a_higher_loss_on_a_linear_encoder() {
    let model = Linear::random(4, 27, 5);
    let images = random_images(6, 3, 3, 3, 5);
    let w = one_hot_rows(4, 4);
    let labels: Vec<Vec<usize>> = (0..6).map(|i| vec![i % 4]).collect();
    let objective = Guidance {
        w: &w,
        labels: &labels,
        temperature: 1.0,
    };
    let run = |steps| {
        let cfg = AttackConfig {
            epsilon: 8.0 / 255.0,
            steps,
            alpha: Some(1.0 / 255.0),
            ..Default::default()
        };
        pgd_attack(&model, &images, &objective, &cfg).unwrap().1
    };
    let (one, ten) = (run(1), run(10));
    for (a, b) in one.iter().zip(&ten) {
        assert!(b.final_loss >= a.final_loss, "{} < {}", b.final_loss, a.final_loss);
        assert_eq!(b.losses.len(), 10);
    }
}

#[test]
fn guided_dot_product_drops_with_orthonormal_guides() {
    let model = Linear::random(2, 12, 6);
    let images = random_images(5, 3, 2, 2, 6);
    let w = one_hot_rows(2, 2);
    let labels: Vec<Vec<usize>> = (0..5).map(|i| vec![i % 2]).collect();
    let set = GuidanceSet::new(w.clone(), labels.clone(), GuidanceSource::ClassMean).unwrap();
    let (adv, _) = fga(&model, &images, &set, &AttackConfig::default(), None).unwrap();
    for (i, own) in labels.iter().enumerate() {
        let y = own[0];
        let before = dot(&model.embed(i, &Image::from_batch(&images, i).unwrap()).unwrap(), w.row(y));
        let after = dot(&model.embed(i, &Image::from_batch(&adv, i).unwrap()).unwrap(), w.row(y));
        assert!(after < before);
    }
}

#[test]
fn budget_and_box_hold_under_random_configurations() {
    let mut rng = RngStream::new(8, 0).rng();
    for run in 0..400u64 {
        let (c, h, w) = (rng.random_range(1..=3), rng.random_range(2..=4), rng.random_range(2..=4));
        let n = c * h * w;
        let model = Linear::random(3, n, run);
        let images = random_images(2, c, h, w, run);
        let norm = [Norm::L1, Norm::L2, Norm::Linf][rng.random_range(0..3)];
        let cfg = AttackConfig {
            norm,
            epsilon: rng.random_range(0.0..0.5),
            steps: rng.random_range(1..=6),
            alpha: Some(rng.random_range(0.01..0.5)),
            momentum: rng.random(),
            momentum_mu: rng.random_range(0.0..2.0),
            q_percentile: rng.random_range(0.0..100.0),
            random_start: rng.random(),
            seed: run,
            ..Default::default()
        };
        let set = GuidanceSet::new(one_hot_rows(3, 3), vec![vec![0], vec![2]], GuidanceSource::ClassMean).unwrap();
        let (adv, traces) = fga(&model, &images, &set, &cfg, None).unwrap();
        assert!(adv.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        for (d, t) in deltas(&adv, &images, n).iter().zip(&traces) {
            assert!(lp_norm(d, norm) <= cfg.epsilon + 1e-6, "run {run}: {norm:?} {}", lp_norm(d, norm));
            assert_eq!(t.norm(norm), lp_norm(d, norm));
        }
    }
}

#[test]
fn l1_defaults_respect_the_budget() {
    let model = Linear::random(3, 48, 9);
    let images = random_images(3, 3, 4, 4, 9);
    let set = GuidanceSet::new(one_hot_rows(3, 3), vec![vec![0], vec![1], vec![2]], GuidanceSource::ClassMean).unwrap();
    let (adv, traces) = fga(&model, &images, &set, &AttackConfig::l1(), None).unwrap();
    for (d, t) in deltas(&adv, &images, 48).iter().zip(&traces) {
        assert!(lp_norm(d, Norm::L1) <= 1.0 + 1e-6);
        assert_eq!(t.iterations, 20);
    }
}

fn small_encoder(seed: u64) -> ImageEncoder<f64> {
    let spec = ImageEncoderSpec {
        channels: 1,
        height: 4,
        width: 4,
        hidden: vec![8],
        embed_dim: 3,
        normalize: true,
    };
    ImageEncoder::new(&spec, RngStream::new(seed, 1)).unwrap()
}

#[test]
fn scale_augmented_gradient_matches_finite_differences() {
    let enc = small_encoder(10);
    let w = one_hot_rows(3, 3);
    let labels = vec![vec![1]];
    let objective = Guidance {
        w: &w,
        labels: &labels,
        temperature: 1.0,
    };
    let x = Image::from_batch(&random_images(1, 1, 4, 4, 10), 0).unwrap();
    let scales = DEFAULT_SCALES.to_vec();
    let (_, g) = gradient(&enc, 0, &x, &objective, Some(&scales)).unwrap();
    let h = 1e-5;
    let fd: Vec<f64> = (0..x.len())
        .map(|j| {
            let mut p = x.clone();
            let mut m = x.clone();
            p.data[j] += h;
            m.data[j] -= h;
            let fp = gradient(&enc, 0, &p, &objective, Some(&scales)).unwrap().0;
            let fm = gradient(&enc, 0, &m, &objective, Some(&scales)).unwrap().0;
            (fp - fm) / (2.0 * h)
        })
        .collect();
    let err = sq_dist(&g.data, &fd).sqrt() / lp_norm(&fd, Norm::L2);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn identity_scales_reduce_to_the_plain_loss() {
    let enc = small_encoder(11);
    let w = one_hot_rows(3, 3);
    let labels = vec![vec![2]];
    let objective = Guidance {
        w: &w,
        labels: &labels,
        temperature: 1.0,
    };
    let x = Image::from_batch(&random_images(1, 1, 4, 4, 11), 0).unwrap();
    let plain = gradient(&enc, 0, &x, &objective, None).unwrap();
    let one = gradient(&enc, 0, &x, &objective, Some(&[1.0])).unwrap();
    assert_eq!(plain, one);
    let two = gradient(&enc, 0, &x, &objective, Some(&[1.0, 1.0])).unwrap();
    assert_eq!(two.0, 2.0 * plain.0);
    let base = loss_gui(&enc.embed_image(&x).unwrap(), &w, &[2]).unwrap().value;
    assert_eq!(plain.0, base);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let enc: ImageEncoder<f32> = ImageEncoder::new(&ImageEncoderSpec::default(), RngStream::new(12, 1)).unwrap();
    let images = random_images(12, 3, 16, 16, 12).cast::<f32>();
    let emb = forward_image(&enc, &images).unwrap();
    let w = Tensor::from_rows(&emb.rows().take(4).map(<[f32]>::to_vec).collect::<Vec<_>>()).unwrap();
    let set = GuidanceSet::new(w, (0..12).map(|i| vec![i % 4]).collect(), GuidanceSource::ClassMean).unwrap();
    let cfg = AttackConfig {
        momentum: true,
        random_start: true,
        scales: Some(DEFAULT_SCALES.to_vec()),
        seed: 5,
        ..Default::default()
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| fga(&enc, &images, &set, &cfg, None).unwrap())
    };
    let (a, ta) = run(1);
    let (b, tb) = run(4);
    assert_eq!(a.data(), b.data());
    assert_eq!(ta, tb);
}

#[test]
fn random_start_depends_on_seed_only() {
    let model = Linear::random(3, 12, 13);
    let images = random_images(2, 3, 2, 2, 13);
    let set = GuidanceSet::new(one_hot_rows(3, 3), vec![vec![0], vec![1]], GuidanceSource::ClassMean).unwrap();
    let cfg = |seed| AttackConfig {
        random_start: true,
        steps: 1,
        alpha: Some(0.1 / 255.0),
        seed,
        ..Default::default()
    };
    let a = fga(&model, &images, &set, &cfg(1), None).unwrap().0;
    let b = fga(&model, &images, &set, &cfg(1), None).unwrap().0;
    let c = fga(&model, &images, &set, &cfg(2), None).unwrap().0;
    assert_eq!(a, b);
    assert_ne!(a, c);
}

struct Broken;

impl ImageModel<f64> for Broken {
    fn embed(&self, _: usize, _: &Image<f64>) -> Result<Vec<f64>> {
        Ok(vec![f64::NAN, 0.0])
    }

    fn embed_vjp(&self, _: usize, image: &Image<f64>, _: &[f64]) -> Result<Image<f64>> {
        Ok(image.clone())
    }
}

#[test]
fn non_finite_objective_reports_the_iteration() {
    let images = random_images(1, 1, 2, 2, 14);
    let set = GuidanceSet::new(one_hot_rows(2, 2), vec![vec![0]], GuidanceSource::ClassMean).unwrap();
    let err = fga(&Broken, &images, &set, &AttackConfig::default(), None).unwrap_err();
    assert!(matches!(err, Error::Attack { iteration: 0, .. }), "{err}");
}

#[test]
fn invalid_inputs_are_rejected() {
    let model = Linear::random(2, 4, 15);
    let set = GuidanceSet::new(one_hot_rows(2, 2), vec![vec![0]], GuidanceSource::ClassMean).unwrap();
    let mut images = random_images(1, 1, 2, 2, 15);
    images.data_mut()[0] = 1.5;
    assert!(matches!(fga(&model, &images, &set, &AttackConfig::default(), None), Err(Error::Config(_))));
    let bad = AttackConfig {
        steps: 0,
        ..Default::default()
    };
    assert!(matches!(fga(&model, &random_images(1, 1, 2, 2, 15), &set, &bad, None), Err(Error::Config(_))));
}

#[test]
fn patch_leaves_unmasked_pixels_bit_identical() {
    let model = Linear::random(3, 3 * 8 * 8, 16);
    let images = random_images(3, 3, 8, 8, 16);
    let w = one_hot_rows(3, 3);
    let targets = [0, 1, 2];
    let (adv, traces, masks) = fga_targeted_patch(&model, &images, &w, &targets, &PatchConfig::default()).unwrap();
    for i in 0..3 {
        let v = Image::from_batch(&images, i).unwrap();
        let a = Image::from_batch(&adv, i).unwrap();
        for (j, (&p, &q)) in v.data.iter().zip(&a.data).enumerate() {
            if masks[i].mask[j % 64] == 0 {
                assert_eq!(p.to_bits(), q.to_bits());
            } else {
                assert!((0.0..=1.0).contains(&q));
            }
        }
        assert_eq!(masks[i].square.unwrap().2, 1);
        assert_eq!(traces[i].iterations, 100);
        assert!(traces[i].final_loss >= traces[i].losses[0]);
    }
}

#[test]
fn empty_mask_returns_the_input_and_full_mask_acts_everywhere() {
    let model = Linear::random(2, 16, 17);
    let images = random_images(1, 1, 4, 4, 17);
    let w = one_hot_rows(2, 2);
    let labels = vec![vec![0]];
    let objective = Guidance {
        w: &w,
        labels: &labels,
        temperature: 1.0,
    };
    let empty = PatchSpec::from_mask(4, 4, vec![0; 16]).unwrap();
    let (adv, _) = patch_attack(&model, &images, &objective, &[empty], &PatchConfig::default()).unwrap();
    assert_eq!(adv, images);

    let full = PatchSpec::from_mask(4, 4, vec![1; 16]).unwrap();
    let cfg = PatchConfig {
        steps: 300,
        ..Default::default()
    };
    let (adv, _) = patch_attack(&model, &images, &objective, &[full], &cfg).unwrap();
    let (_, g) = gradient(&model, 0, &Image::from_batch(&images, 0).unwrap(), &objective, None).unwrap();
    // A linear model's guidance gradient keeps its sign pattern far enough
    // out that every pixel saturates at the bound the sign points to.
    for (&p, &gi) in adv.data().iter().zip(&g.data) {
        assert!((0.0..=1.0).contains(&p));
        if gi.abs() > 1e-9 {
            assert!(p == 0.0 || p == 1.0);
        }
    }
}

#[test]
fn patch_config_mismatches_are_errors() {
    let model = Linear::random(2, 16, 18);
    let images = random_images(1, 1, 4, 4, 18);
    let w = one_hot_rows(2, 2);
    let labels = vec![vec![0]];
    let objective = Guidance {
        w: &w,
        labels: &labels,
        temperature: 1.0,
    };
    let wrong = PatchSpec::square(5, 5, 0, 0, 2).unwrap();
    assert!(patch_attack(&model, &images, &objective, &[wrong], &PatchConfig::default()).is_err());
    assert!(patch_attack(&model, &images, &objective, &[], &PatchConfig::default()).is_err());
}

/// Trains a small contrastive pair on a synthetic set for the convergence
/// properties below.
fn trained() -> (ImageEncoder<f64>, fgakit::PairedDataset64) {
    let spec = SynthSpec {
        classes: 5,
        per_class: 24,
        height: 8,
        width: 8,
        noise_sigma: 0.05,
        ..Default::default()
    };
    let data = gen_dataset(&spec, None, RngStream::new(20, 0)).unwrap();
    let ispec = ImageEncoderSpec {
        height: 8,
        width: 8,
        hidden: vec![32],
        embed_dim: 16,
        ..Default::default()
    };
    let mut img = ImageEncoder::new(&ispec, RngStream::new(20, 1)).unwrap();
    img.fit_standardization(&data.images).unwrap();
    let tspec = TextEncoderSpec {
        vocab_size: data.vocab.len(),
        embed_dim: 16,
        ..Default::default()
    };
    let txt = TextEncoder::new(&tspec, RngStream::new(20, 2)).unwrap();
    let train = TrainSpec {
        epochs: 40,
        ..Default::default()
    };
    let (img, _, _) = train_itc(img, txt, &data, &train, RngStream::new(20, 3)).unwrap();
    (img, data)
}

#[test]
fn attacks_on_a_trained_model_raise_the_loss_and_leave_the_guided_rows() {
    let (img, data) = trained();
    let set = class_mean_guidance(&img, &data).unwrap();
    let cfg = AttackConfig {
        epsilon: 32.0 / 255.0,
        steps: 100,
        ..Default::default()
    };
    let (adv, traces) = fga(&img, &data.images, &set, &cfg, None).unwrap();
    let raised = traces.iter().filter(|t| t.final_loss >= t.losses[0]).count();
    assert!(raised as f64 >= 0.95 * traces.len() as f64, "{raised}/{}", traces.len());

    let emb = forward_image(&img, &adv).unwrap();
    let objective = Guidance {
        w: &set.w,
        labels: &set.labels,
        temperature: 1.0,
    };
    let mut moved = 0;
    for (i, e) in emb.rows().enumerate() {
        let logits: Vec<f64> = set.w.rows().map(|r| dot(e, r)).collect();
        let p = softmax(&logits).unwrap();
        let guided: f64 = set.labels[i].iter().map(|&y| p[y]).sum();
        let top_other = (0..p.len()).filter(|k| !set.labels[i].contains(k)).map(|k| p[k]).fold(0.0, f64::max);
        moved += usize::from(guided < top_other);
        assert!(objective.value_grad(i, e).is_ok());
    }
    assert!(moved as f64 >= 0.9 * emb.outer() as f64, "{moved}/{}", emb.outer());
}
