#![allow(dead_code)]

pub mod metric_oracles;

use adafgrad_core::losses::LossWeights;
use adafgrad_core::model::{init_params, ModelDims, ModelParams, SlideFeatures};
use adafgrad_core::objective::{step_loss, Replay, TermSwitches};
use adafgrad_core::prototypes::PrototypeBuffer;
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_slide(rng: &mut ChaCha8Rng, n_r: usize, k: usize, d_vis: usize, global_class: usize) -> SlideFeatures {
    let regions = Array2::from_shape_fn((n_r, d_vis), |_| rng.random_range(-1.0f32..1.0));
    let patches = Array3::from_shape_fn((n_r, k * k, d_vis), |_| rng.random_range(-1.0f32..1.0));
    SlideFeatures::new(format!("slide{}", rng.random::<u32>()), 0, global_class, global_class, regions, patches)
        .unwrap()
}

pub fn unit(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0));
    let norm = v.dot(&v).sqrt();
    v / norm
}

/// Initialized params with every bias perturbed away from zero.
pub fn random_params(rng: &mut ChaCha8Rng, dims: ModelDims) -> ModelParams {
    let mut p = init_params(dims, rng.random()).unwrap();
    p.patch_proj.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    p.region_proj.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    p.region_mlp.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    p.head.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    p
}

pub fn random_prototypes(rng: &mut ChaCha8Rng, c_total: usize, n_neg: usize, c_text: usize) -> PrototypeBuffer {
    let mut b = PrototypeBuffer::new();
    let cls = (0..c_total).map(|i| (i, unit(rng, c_text))).collect();
    let neg = (0..n_neg).map(|_| unit(rng, c_text)).collect();
    b.accumulate_task(cls, neg).unwrap();
    b
}

/// A full-objective micro instance: current slide plus one replayed slide
/// with a stored gradient.
pub struct MicroInstance {
    pub params: ModelParams,
    pub protos: PrototypeBuffer,
    pub weights: LossWeights,
    pub current: SlideFeatures,
    pub replay: SlideFeatures,
    pub stored_grad: Array1<f64>,
}

impl MicroInstance {
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let dims = ModelDims {
            d_vis: 3,
            d_model: r.random_range(2..=3),
            d_attn: 2,
            c_text: 3,
            c_total: r.random_range(2..=4),
        };
        let params = random_params(&mut r, dims);
        let protos = random_prototypes(&mut r, dims.c_total, 2, dims.c_text);
        let cur_class = r.random_range(0..dims.c_total);
        let rep_class = r.random_range(0..dims.c_total);
        let n_r1 = r.random_range(1..=4);
        let n_r2 = r.random_range(1..=4);
        let k = r.random_range(1..=2);
        let current = random_slide(&mut r, n_r1, k, dims.d_vis, cur_class);
        let replay = random_slide(&mut r, n_r2, k, dims.d_vis, rep_class);
        let stored_grad = Array1::from_shape_fn(dims.d_model, |_| r.random_range(-1.0..1.0));
        let weights = LossWeights {
            ce: 1.0,
            alpha: r.random_range(0.1..1.0),
            beta: r.random_range(0.1..1.0),
            gamma: r.random_range(0.1..1.0),
            lambda_ppgd: r.random_range(0.1..1.0),
            tau_sim: r.random_range(0.5..2.0),
            include_positive_in_denominator: r.random(),
            ppgd_cosine_normalize: r.random(),
        };
        MicroInstance {
            params,
            protos,
            weights,
            current,
            replay,
            stored_grad,
        }
    }

    pub fn replays(&self) -> [Replay<'_>; 1] {
        [Replay {
            slide: &self.replay,
            stored_grad: &self.stored_grad,
        }]
    }

    pub fn total(&self, params: &ModelParams, switches: TermSwitches) -> f64 {
        step_loss(params, &self.protos, &self.weights, switches, &self.current, &self.replays())
            .unwrap()
            .total
    }
}

pub const ALL_TERMS: TermSwitches = TermSwitches {
    ovla: true,
    replay_ce: true,
    ppgd: true,
};

/// Central finite differences of `f` at every coordinate of `params`.
pub fn finite_difference(params: &ModelParams, step: f64, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let base = params.to_flat();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut x = base.clone();
    for i in 0..base.len() {
        x[i] = base[i] + step;
        probe.set_flat(&x).unwrap();
        let up = f(&probe);
        x[i] = base[i] - step;
        probe.set_flat(&x).unwrap();
        let down = f(&probe);
        x[i] = base[i];
        out.push((up - down) / (2.0 * step));
    }
    out
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps entries that are zero
/// up to rounding from dominating.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
