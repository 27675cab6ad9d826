//! Objective terms. Each term has a value function and a `*_with_grad`
//! variant returning the gradient with respect to its trace inputs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prototypes::PrototypeBuffer;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight on the current slide's cross-entropy.
    pub ce: f64,
    /// InfoNCE weight inside the adaptation term.
    pub alpha: f64,
    /// Gram-matching weight inside the adaptation term.
    pub beta: f64,
    /// Replay cross-entropy weight.
    pub gamma: f64,
    /// Gradient-distillation weight.
    pub lambda_ppgd: f64,
    /// Temperature multiplying prototype similarities in InfoNCE.
    pub tau_sim: f64,
    /// Add the positive score to the InfoNCE denominator (standard InfoNCE).
    pub include_positive_in_denominator: bool,
    /// Compare unit-normalized gradients in the distillation term.
    pub ppgd_cosine_normalize: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ce: 1.0,
            alpha: 0.01,
            beta: 0.001,
            gamma: 0.2,
            lambda_ppgd: 0.1,
            tau_sim: 1.0,
            include_positive_in_denominator: false,
            ppgd_cosine_normalize: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_sim > 0.0 && self.tau_sim.is_finite()) {
            return Err(Error::Config(format!("tau_sim must be > 0, got {}", self.tau_sim)));
        }
        let weights = [
            ("ce", self.ce),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda_ppgd", self.lambda_ppgd),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

fn check_target(target: usize, len: usize) -> Result<()> {
    if target >= len {
        return Err(Error::IndexOutOfRange { index: target, len });
    }
    Ok(())
}

/// `-log(probs[target])`
pub fn cross_entropy(probs: ArrayView1<f64>, target: usize) -> Result<f64> {
    check_target(target, probs.len())?;
    Ok(-probs[target].ln())
}

/// Cross-entropy on softmax outputs and its gradient w.r.t. the logits
/// (`probs - onehot`).
pub fn cross_entropy_with_grad(probs: ArrayView1<f64>, target: usize) -> Result<(f64, Array1<f64>)> {
    let loss = cross_entropy(probs, target)?;
    let mut grad = probs.to_owned();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Region-averaged InfoNCE of aligned region features against the prototype
/// buffer. The positive is the target's class prototype; contrast terms are
/// every other class prototype and every negative prototype (plus the
/// positive itself when `include_positive_in_denominator` is set).
pub fn infonce(
    aligned_gz: ArrayView2<f64>,
    buffer: &PrototypeBuffer,
    target: usize,
    w: &LossWeights,
) -> Result<f64> {
    infonce_impl(aligned_gz, buffer, target, w, false).map(|(l, _)| l)
}

pub fn infonce_with_grad(
    aligned_gz: ArrayView2<f64>,
    buffer: &PrototypeBuffer,
    target: usize,
    w: &LossWeights,
) -> Result<(f64, Array2<f64>)> {
    infonce_impl(aligned_gz, buffer, target, w, true)
        .map(|(l, g)| (l, g.expect("gradient requested")))
}

fn infonce_impl(
    gz: ArrayView2<f64>,
    buffer: &PrototypeBuffer,
    target: usize,
    w: &LossWeights,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    let positive = buffer.class_prototype(target).ok_or_else(|| {
        Error::Loss(format!(
            "target class {target} has no prototype (buffer holds {})",
            buffer.n_classes()
        ))
    })?;
    if positive.len() != gz.ncols() {
        return Err(Error::Dimension(format!(
            "aligned features have width {}, prototypes {}",
            gz.ncols(),
            positive.len()
        )));
    }
    let contrast: Vec<&Array1<f64>> = buffer
        .cls
        .iter()
        .filter(|(k, _)| *k != target || w.include_positive_in_denominator)
        .chain(buffer.neg.iter())
        .map(|(_, v)| v)
        .collect();
    if contrast.is_empty() {
        return Err(Error::Loss(
            "InfoNCE denominator is empty: no other classes and no negative prototypes".into(),
        ));
    }
    let n_r = gz.nrows();
    if n_r == 0 {
        return Err(Error::Dimension("no regions".into()));
    }
    let tau = w.tau_sim;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Array2::<f64>::zeros(gz.raw_dim()));
    let mut scores = vec![0.0; contrast.len()];
    for (i, row) in gz.rows().into_iter().enumerate() {
        let pos = tau * row.dot(positive);
        for (s, p) in scores.iter_mut().zip(&contrast) {
            *s = tau * row.dot(*p);
        }
        let lse = log_sum_exp(&scores);
        total += lse - pos;
        if let Some(g) = grad.as_mut() {
            let mut gi = g.row_mut(i);
            gi.scaled_add(-tau / n_r as f64, positive);
            for (s, p) in scores.iter().zip(&contrast) {
                let weight = (s - lse).exp();
                gi.scaled_add(tau * weight / n_r as f64, *p);
            }
        }
    }
    Ok((total / n_r as f64, grad))
}

fn check_rows(z: &ArrayView2<f64>, gz: &ArrayView2<f64>) -> Result<()> {
    if z.nrows() != gz.nrows() {
        return Err(Error::Dimension(format!(
            "self-similarity needs equal row counts, got {} and {}",
            z.nrows(),
            gz.nrows()
        )));
    }
    Ok(())
}

/// `|| gz gz^T - z z^T ||_F^2` over the `N_r x N_r` region Gram matrices.
pub fn self_similarity(z: ArrayView2<f64>, gz: ArrayView2<f64>) -> Result<f64> {
    check_rows(&z, &gz)?;
    let diff = gz.dot(&gz.t()) - z.dot(&z.t());
    Ok(diff.iter().map(|d| d * d).sum())
}

/// Value plus gradients `(d/dz, d/dgz)`.
pub fn self_similarity_with_grad(
    z: ArrayView2<f64>,
    gz: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_rows(&z, &gz)?;
    let diff = gz.dot(&gz.t()) - z.dot(&z.t());
    let value = diff.iter().map(|d| d * d).sum();
    let d_gz = diff.dot(&gz) * 4.0;
    let d_z = diff.dot(&z) * -4.0;
    Ok((value, d_z, d_gz))
}

pub fn ovla(infonce_val: f64, sim_val: f64, w: &LossWeights) -> f64 {
    w.alpha * infonce_val + w.beta * sim_val
}

fn ppgd_impl(g_old: ArrayView1<f64>, g_new: ArrayView1<f64>, w: &LossWeights) -> Result<(f64, Array1<f64>)> {
    if g_old.len() != g_new.len() {
        return Err(Error::Dimension(format!(
            "gradient lengths differ: {} vs {}",
            g_old.len(),
            g_new.len()
        )));
    }
    if !w.ppgd_cosine_normalize {
        return Ok((1.0 - g_old.dot(&g_new), g_old.mapv(|v| -v)));
    }
    let n_old = g_old.dot(&g_old).sqrt();
    let n_new = g_new.dot(&g_new).sqrt();
    if n_old == 0.0 || n_new == 0.0 {
        return Err(Error::DegenerateGradient(
            "zero gradient vector cannot be cosine-normalized".into(),
        ));
    }
    let old_hat = &g_old / n_old;
    let new_hat = &g_new / n_new;
    let cos = old_hat.dot(&new_hat);
    let grad = (&new_hat * cos - &old_hat) / n_new;
    Ok((1.0 - cos, grad))
}

/// `1 - g_old . g_new`, on unit vectors unless cosine normalization is off.
pub fn ppgd(g_old: ArrayView1<f64>, g_new: ArrayView1<f64>, w: &LossWeights) -> Result<f64> {
    ppgd_impl(g_old, g_new, w).map(|(v, _)| v)
}

/// Value plus gradient w.r.t. `g_new`.
pub fn ppgd_with_grad(
    g_old: ArrayView1<f64>,
    g_new: ArrayView1<f64>,
    w: &LossWeights,
) -> Result<(f64, Array1<f64>)> {
    ppgd_impl(g_old, g_new, w)
}

/// `ce_weight * ce + ovla + gamma * replay_ce + lambda_ppgd * ppgd`
pub fn total_objective(ce: f64, ovla: f64, replay_ce: f64, ppgd_val: f64, w: &LossWeights) -> f64 {
    w.ce * ce + ovla + w.gamma * replay_ce + w.lambda_ppgd * ppgd_val
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2};

    fn two_proto_buffer() -> PrototypeBuffer {
        let mut b = PrototypeBuffer::new();
        b.accumulate_task(vec![(0, arr1(&[1.0, 0.0]))], vec![arr1(&[0.0, 1.0])])
            .unwrap();
        b
    }

    fn w_tau(tau: f64) -> LossWeights {
        LossWeights {
            tau_sim: tau,
            ..LossWeights::default()
        }
    }

    #[test]
    fn ce_uniform_and_certain() {
        let p = arr1(&[0.25; 4]);
        assert_abs_diff_eq!(cross_entropy(p.view(), 2).unwrap(), 4f64.ln(), epsilon = 1e-15);
        let p = arr1(&[0.0, 1.0]);
        assert_eq!(cross_entropy(p.view(), 1).unwrap(), 0.0);
        assert!(cross_entropy(p.view(), 2).is_err());
    }

    #[test]
    fn infonce_closed_forms() {
        let gz = arr2(&[[1.0, 0.0]]);
        let b = two_proto_buffer();
        let v = infonce(gz.view(), &b, 0, &w_tau(0.1)).unwrap();
        assert_abs_diff_eq!(v, -0.1, epsilon = 1e-12);

        let w = LossWeights {
            include_positive_in_denominator: true,
            ..w_tau(0.1)
        };
        let v = infonce(gz.view(), &b, 0, &w).unwrap();
        assert_abs_diff_eq!(v, 0.644396660073571, epsilon = 1e-12);
    }

    #[test]
    fn infonce_errors() {
        let gz = arr2(&[[1.0, 0.0]]);
        let b = two_proto_buffer();
        assert!(matches!(infonce(gz.view(), &b, 1, &w_tau(1.0)), Err(Error::Loss(_))));

        let mut lonely = PrototypeBuffer::new();
        lonely.accumulate_task(vec![(0, arr1(&[1.0, 0.0]))], vec![]).unwrap();
        assert!(matches!(infonce(gz.view(), &lonely, 0, &w_tau(1.0)), Err(Error::Loss(_))));
        let w = LossWeights {
            include_positive_in_denominator: true,
            ..w_tau(1.0)
        };
        assert!(infonce(gz.view(), &lonely, 0, &w).is_ok());
    }

    #[test]
    fn self_similarity_hand_case() {
        let z = arr2(&[[3.0]]);
        let gz = arr2(&[[1.0, 2.0]]);
        assert_eq!(self_similarity(z.view(), gz.view()).unwrap(), 16.0);
        assert!(self_similarity(arr2(&[[1.0], [2.0]]).view(), gz.view()).is_err());
    }

    #[test]
    fn self_similarity_zero_for_matched_grams() {
        // Rows of gz are rows of z padded with zeros: identical Gram matrices.
        let z = arr2(&[[0.3, -0.4], [1.0, 0.5], [0.0, 2.0]]);
        let gz = arr2(&[[0.3, -0.4, 0.0], [1.0, 0.5, 0.0], [0.0, 2.0, 0.0]]);
        assert_abs_diff_eq!(self_similarity(z.view(), gz.view()).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn ovla_weights() {
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(ovla(2.0, 4.0, &zero), 0.0);
        assert_abs_diff_eq!(ovla(2.0, 4.0, &LossWeights::default()), 0.024, epsilon = 1e-15);
        let scaled = LossWeights {
            alpha: 0.03,
            beta: 0.003,
            ..LossWeights::default()
        };
        assert_abs_diff_eq!(
            ovla(2.0, 4.0, &scaled),
            3.0 * ovla(2.0, 4.0, &LossWeights::default()),
            epsilon = 1e-15
        );
    }

    #[test]
    fn ppgd_bounds() {
        let w = LossWeights::default();
        let e1 = arr1(&[1.0, 0.0]);
        let e2 = arr1(&[0.0, 1.0]);
        assert_eq!(ppgd(e1.view(), e1.view(), &w).unwrap(), 0.0);
        assert_eq!(ppgd(e1.view(), e2.view(), &w).unwrap(), 1.0);
        assert_eq!(ppgd(e1.view(), (-&e1).view(), &w).unwrap(), 2.0);
        assert!(matches!(
            ppgd(e1.view(), arr1(&[0.0, 0.0]).view(), &w),
            Err(Error::DegenerateGradient(_))
        ));
        assert!(ppgd(e1.view(), arr1(&[1.0]).view(), &w).is_err());
    }

    #[test]
    fn ppgd_raw_mode() {
        let w = LossWeights {
            ppgd_cosine_normalize: false,
            ..LossWeights::default()
        };
        let v = ppgd(arr1(&[1.0, 2.0]).view(), arr1(&[3.0, -1.0]).view(), &w).unwrap();
        assert_eq!(v, 0.0);
        // zero vectors are fine without normalization
        assert_eq!(ppgd(arr1(&[0.0]).view(), arr1(&[0.0]).view(), &w).unwrap(), 1.0);
    }

    #[test]
    fn total_objective_defaults() {
        let w = LossWeights::default();
        assert_abs_diff_eq!(total_objective(1.0, 0.1, 0.5, 0.4, &w), 1.24, epsilon = 1e-15);
        let no_replay = LossWeights {
            gamma: 0.0,
            lambda_ppgd: 0.0,
            ..w
        };
        assert_eq!(total_objective(1.0, 0.1, 0.5, 0.4, &no_replay), 1.1);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(w_tau(0.0).validate().is_err());
        let neg = LossWeights {
            gamma: -1.0,
            ..LossWeights::default()
        };
        assert!(neg.validate().is_err());
    }
}
