mod common;

use adafgrad_core::losses::{
    cross_entropy, infonce, infonce_with_grad, ppgd, ppgd_with_grad, self_similarity, self_similarity_with_grad,
    LossWeights,
};
use adafgrad_core::prototypes::PrototypeBuffer;
use common::*;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;

fn unit_rows(r: &mut rand_chacha::ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n, d));
    for i in 0..n {
        m.row_mut(i).assign(&unit(r, d));
    }
    m
}

fn infonce_oracle(gz: &Array2<f64>, b: &PrototypeBuffer, target: usize, w: &LossWeights) -> f64 {
    let f = |i: usize, p: &Array1<f64>| {
        let mut dot = 0.0;
        for c in 0..p.len() {
            dot += gz[[i, c]] * p[c];
        }
        (w.tau_sim * dot).exp()
    };
    let mut total = 0.0;
    for i in 0..gz.nrows() {
        let mut denom = 0.0;
        let mut numer = 0.0;
        for (k, p) in &b.cls {
            if *k == target {
                numer = f(i, p);
                if w.include_positive_in_denominator {
                    denom += f(i, p);
                }
            } else {
                denom += f(i, p);
            }
        }
        for (_, p) in &b.neg {
            denom += f(i, p);
        }
        total += -(numer / denom).ln();
    }
    total / gz.nrows() as f64
}

#[test]
fn infonce_matches_enumeration_oracle() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let b = random_prototypes(&mut r, 3, 2, 5);
        let gz = unit_rows(&mut r, 4, 5);
        for flag in [false, true] {
            let w = LossWeights {
                tau_sim: r.random_range(0.1..5.0),
                include_positive_in_denominator: flag,
                ..Default::default()
            };
            let target = r.random_range(0..3);
            let got = infonce(gz.view(), &b, target, &w).unwrap();
            let want = infonce_oracle(&gz, &b, target, &w);
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn infonce_decreases_as_target_score_rises() {
    let mut r = rng(4);
    // Prototypes on orthogonal axes so raising the target score leaves the others fixed.
    let mut b = PrototypeBuffer::new();
    let e = |i: usize| Array1::from_shape_fn(6, |c| if c == i { 1.0 } else { 0.0 });
    b.accumulate_task(vec![(0, e(0)), (1, e(1)), (2, e(2))], vec![e(3), e(4)]).unwrap();
    let w = LossWeights::default();
    for _ in 0..100 {
        let mut gz = Array2::from_shape_fn((3, 6), |_| r.random_range(-1.0..1.0));
        let target = r.random_range(0..3);
        let mut prev = infonce(gz.view(), &b, target, &w).unwrap();
        for _ in 0..5 {
            gz.column_mut(target).mapv_inplace(|v| v + 0.1);
            let next = infonce(gz.view(), &b, target, &w).unwrap();
            assert!(next < prev);
            prev = next;
        }
    }
}

#[test]
fn self_similarity_matches_elementwise_oracle() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let z = Array2::from_shape_fn((3, 4), |_| r.random_range(-1.0..1.0));
        let gz = Array2::from_shape_fn((3, 5), |_| r.random_range(-1.0..1.0));
        let mut want = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                let gg: f64 = (0..5).map(|c| gz[[a, c]] * gz[[b, c]]).sum();
                let zz: f64 = (0..4).map(|c| z[[a, c]] * z[[b, c]]).sum();
                want += (gg - zz) * (gg - zz);
            }
        }
        let got = self_similarity(z.view(), gz.view()).unwrap();
        assert!((got - want).abs() <= 1e-12);
    }
}

#[test]
fn matched_grams_give_zero() {
    let mut r = rng(2);
    let z = Array2::from_shape_fn((4, 3), |_| r.random_range(-1.0..1.0));
    // gz = [z | 0] has the same Gram matrix.
    let gz = Array2::from_shape_fn((4, 5), |(i, c)| if c < 3 { z[[i, c]] } else { 0.0 });
    assert!(self_similarity(z.view(), gz.view()).unwrap().abs() <= 1e-12);
}

fn rotation(theta: f64) -> Array2<f64> {
    let (s, c) = theta.sin_cos();
    ndarray::arr2(&[[c, -s], [s, c]])
}

fn fd_check_loss(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, analytic: &Array2<f64>) {
    let h = 1e-6;
    for idx in ndarray::indices(x.dim()) {
        let mut up = x.clone();
        let mut down = x.clone();
        up[idx] += h;
        down[idx] -= h;
        let fd = (f(&up) - f(&down)) / (2.0 * h);
        assert!(relative_error(analytic[idx], fd, 1e-4) <= 1e-5, "{} vs {fd}", analytic[idx]);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let b = random_prototypes(&mut r, 3, 2, 4);
        let gz = Array2::from_shape_fn((3, 4), |_| r.random_range(-1.0..1.0));
        let z = Array2::from_shape_fn((3, 2), |_| r.random_range(-1.0..1.0));
        let w = LossWeights {
            tau_sim: 2.0,
            include_positive_in_denominator: seed % 2 == 0,
            ..Default::default()
        };
        let (_, g) = infonce_with_grad(gz.view(), &b, 1, &w).unwrap();
        fd_check_loss(|x| infonce(x.view(), &b, 1, &w).unwrap(), &gz, &g);

        let (_, dz, dgz) = self_similarity_with_grad(z.view(), gz.view()).unwrap();
        fd_check_loss(|x| self_similarity(x.view(), gz.view()).unwrap(), &z, &dz);
        fd_check_loss(|x| self_similarity(z.view(), x.view()).unwrap(), &gz, &dgz);

        for cosine in [true, false] {
            let w = LossWeights {
                ppgd_cosine_normalize: cosine,
                ..Default::default()
            };
            let old = Array1::from_shape_fn(3, |_| r.random_range(-1.0..1.0));
            let new = Array2::from_shape_fn((1, 3), |_| r.random_range(-1.0..1.0));
            let (_, g) = ppgd_with_grad(old.view(), new.row(0), &w).unwrap();
            let g = g.insert_axis(ndarray::Axis(0));
            fd_check_loss(|x| ppgd(old.view(), x.row(0), &w).unwrap(), &new, &g);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cross_entropy_is_nonnegative(logits in prop::collection::vec(-20.0f64..20.0, 2..8), t in 0usize..8) {
        let t = t % logits.len();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let probs = Array1::from_iter(e.iter().map(|v| v / s));
        let ce = cross_entropy(probs.view(), t).unwrap();
        prop_assert!(ce >= 0.0);
        prop_assert!((ce + probs[t].ln()).abs() <= 1e-12);
    }

    #[test]
    fn cosine_ppgd_is_bounded(a in prop::collection::vec(-5.0f64..5.0, 4), b in prop::collection::vec(-5.0f64..5.0, 4), s in 0.01f64..10.0) {
        let a = Array1::from(a);
        let b = Array1::from(b);
        prop_assume!(a.dot(&a) > 1e-6 && b.dot(&b) > 1e-6);
        let w = LossWeights::default();
        let v = ppgd(a.view(), b.view(), &w).unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&v));
        let collinear = ppgd(a.view(), (&a * s).view(), &w).unwrap();
        prop_assert!(collinear.abs() <= 1e-12);
    }

    #[test]
    fn self_similarity_is_rotation_invariant(seed in any::<u64>(), theta in 0.0f64..6.3) {
        let mut r = rng(seed);
        let z = Array2::from_shape_fn((2, 2), |_| r.random_range(-1.0..1.0));
        let gz = Array2::from_shape_fn((2, 3), |_| r.random_range(-1.0..1.0));
        let base = self_similarity(z.view(), gz.view()).unwrap();
        prop_assert!(base >= 0.0);
        let rotated = z.dot(&rotation(theta));
        let v = self_similarity(rotated.view(), gz.view()).unwrap();
        prop_assert!((v - base).abs() <= 1e-12 * base.max(1.0));
    }
}
