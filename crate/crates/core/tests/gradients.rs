mod common;

use adafgrad_core::losses::LossWeights;
use adafgrad_core::model::{forward, logit_head_gradient};
use adafgrad_core::objective::{step_objective, TermSwitches};
use common::*;

const FD_STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-4;

fn max_error(inst: &MicroInstance, switches: TermSwitches) -> f64 {
    let out = step_objective(
        &inst.params,
        &inst.protos,
        &inst.weights,
        switches,
        &inst.current,
        &inst.replays(),
    )
    .unwrap();
    let analytic = out.grads.to_flat();
    let numeric = finite_difference(&inst.params, FD_STEP, |p| inst.total(p, switches));
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n, FLOOR))
        .fold(0.0, f64::max)
}

#[test]
fn every_term_alone_matches_finite_differences() {
    let only = |ovla, replay_ce, ppgd| TermSwitches { ovla, replay_ce, ppgd };
    for seed in 0..10 {
        let inst = MicroInstance::random(seed);
        for sw in [only(false, false, false), only(true, false, false), only(false, true, false), only(false, false, true)] {
            let e = max_error(&inst, sw);
            assert!(e <= 1e-5, "seed {seed} {sw:?}: max rel error {e:e}");
        }
    }
}

#[test]
fn zero_weights_give_zero_gradient() {
    let mut inst = MicroInstance::random(3);
    inst.weights = LossWeights {
        ce: 0.0,
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        lambda_ppgd: 0.0,
        ..inst.weights
    };
    let out = step_objective(&inst.params, &inst.protos, &inst.weights, ALL_TERMS, &inst.current, &inst.replays())
        .unwrap();
    assert!(out.grads.to_flat().iter().all(|&g| g == 0.0));
}

#[test]
fn doubling_ce_weight_doubles_ce_gradient() {
    let mut inst = MicroInstance::random(5);
    let ce_only = TermSwitches::default();
    let g1 = step_objective(&inst.params, &inst.protos, &inst.weights, ce_only, &inst.current, &[])
        .unwrap()
        .grads
        .to_flat();
    inst.weights.ce *= 2.0;
    let g2 = step_objective(&inst.params, &inst.protos, &inst.weights, ce_only, &inst.current, &[])
        .unwrap()
        .grads
        .to_flat();
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn head_gradient_matches_finite_difference_of_the_logit() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let inst = MicroInstance::random(seed);
        let trace = forward(&inst.params, &inst.current).unwrap();
        let j = inst.current.global_class;
        let col = logit_head_gradient(&trace, j).unwrap();
        let c_total = inst.params.dims.c_total;
        for m in 0..inst.params.dims.d_model {
            for c in 0..c_total {
                let logit_at = |delta: f64| {
                    let mut p = inst.params.clone();
                    p.head.weight[[m, c]] += delta;
                    forward(&p, &inst.current).unwrap().logits[j]
                };
                let fd = (logit_at(FD_STEP) - logit_at(-FD_STEP)) / (2.0 * FD_STEP);
                if c == j {
                    assert!(relative_error(col[m], fd, 1e-8) <= 1e-6, "seed {seed}");
                } else {
                    assert_eq!(logit_at(r.random_range(0.1..1.0)), logit_at(0.0));
                }
            }
        }
    }
}

use rand::Rng;
