#![allow(dead_code)]

//! Brute-force metric oracles shared by the metric tests and the acceptance suite.

use adafgrad_core::metrics::AccMatrix;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 1000;

// Oracles use 1-based task indices t = 1..=N exactly as the metrics are defined.

pub fn a(m: &AccMatrix, t: usize, i: usize) -> f64 {
    m.acc[t - 1][i - 1]
}

pub fn macc_oracle(m: &AccMatrix) -> f64 {
    let n = m.acc.len();
    let mut outer = 0.0;
    for t in 1..=n {
        let mut inner = 0.0;
        for i in 1..=t {
            inner += a(m, t, i);
        }
        outer += inner / t as f64;
    }
    outer / n as f64
}

pub fn bwt_oracle(m: &AccMatrix) -> f64 {
    let n = m.acc.len();
    let mut s = 0.0;
    for t in 1..n {
        s += a(m, n, t) - a(m, t, t);
    }
    s / (n - 1) as f64
}

pub fn fwt_oracle(m: &AccMatrix) -> f64 {
    let n = m.acc.len();
    let mut s = 0.0;
    for t in 2..=n {
        // acc[t-1][t] lives in the lookahead vector at position t-2.
        s += m.lookahead[t - 2] - m.rand[t - 1];
    }
    s / (n - 1) as f64
}

pub fn fgt_oracle(m: &AccMatrix) -> f64 {
    let n = m.acc.len();
    let mut s = 0.0;
    for t in 1..=n {
        let mut best = f64::NEG_INFINITY;
        for d in t..=n {
            best = best.max(a(m, d, t));
        }
        s += best - a(m, n, t);
    }
    s / n as f64
}

pub fn random_matrix(r: &mut ChaCha8Rng) -> AccMatrix {
    let n = r.random_range(2..=8);
    let cell = |r: &mut ChaCha8Rng| {
        if r.random_bool(0.3) {
            r.random_range(0..=10) as f64 / 10.0
        } else {
            r.random::<f64>()
        }
    };
    AccMatrix {
        acc: (0..n).map(|t| (0..=t).map(|_| cell(r)).collect()).collect(),
        rand: (0..n).map(|_| cell(r)).collect(),
        lookahead: (0..n - 1).map(|_| cell(r)).collect(),
        task_class_counts: (0..n).map(|_| r.random_range(1..4)).collect(),
    }
}

pub fn random_counts(r: &mut ChaCha8Rng) -> Vec<usize> {
    (0..r.random_range(1..=5)).map(|_| r.random_range(1..=4)).collect()
}

/// Logits drawn from a small grid so ties are common.
pub fn random_logits(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-3..=3) as f64 * 0.5)
}

pub fn first_max(row: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

pub fn pair_auc(scores: &[f64], pos: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if pos[i] && !pos[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

pub fn macro_auc_oracle(scores: &Array2<f64>, truth: &[usize]) -> Option<f64> {
    let aucs: Vec<f64> = (0..scores.ncols())
        .filter_map(|c| {
            let col: Vec<f64> = scores.column(c).to_vec();
            let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            pair_auc(&col, &pos)
        })
        .collect();
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

