//! The per-step training objective: cross-entropy on the current slide,
//! the adaptation term on its region features, and for every replayed
//! slide a replay cross-entropy and the gradient-distillation term.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{
    cross_entropy_with_grad, infonce_with_grad, ovla, ppgd_with_grad, self_similarity_with_grad, total_objective,
    LossWeights,
};
use crate::model::{backward, forward, ForwardTrace, ModelParams, ParamGrads, SlideFeatures, TraceGrad};
use crate::prototypes::PrototypeBuffer;

/// Which optional terms a method trains with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermSwitches {
    pub ovla: bool,
    pub replay_ce: bool,
    pub ppgd: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub infonce: f64,
    pub sim: f64,
    pub ovla: f64,
    pub replay_ce: f64,
    pub ppgd: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// First non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("ce", self.ce),
            ("infonce", self.infonce),
            ("sim", self.sim),
            ("replay_ce", self.replay_ce),
            ("ppgd", self.ppgd),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// A slide drawn from the rehearsal buffer with its stored head-gradient.
#[derive(Clone, Copy, Debug)]
pub struct Replay<'a> {
    pub slide: &'a SlideFeatures,
    pub stored_grad: &'a Array1<f64>,
}

pub struct StepOutput {
    pub losses: LossBreakdown,
    pub grads: ParamGrads,
    pub current_trace: ForwardTrace,
}

/// Loss terms and the exact parameter gradient of their weighted sum.
pub fn step_objective(
    params: &ModelParams,
    protos: &PrototypeBuffer,
    w: &LossWeights,
    switches: TermSwitches,
    current: &SlideFeatures,
    replays: &[Replay<'_>],
) -> Result<StepOutput> {
    evaluate(params, protos, w, switches, current, replays, true)
        .map(|(losses, grads, current_trace)| StepOutput {
            losses,
            grads: grads.expect("gradient requested"),
            current_trace,
        })
}

/// Loss terms only; the same computation as [`step_objective`] without the
/// backward pass.
pub fn step_loss(
    params: &ModelParams,
    protos: &PrototypeBuffer,
    w: &LossWeights,
    switches: TermSwitches,
    current: &SlideFeatures,
    replays: &[Replay<'_>],
) -> Result<LossBreakdown> {
    evaluate(params, protos, w, switches, current, replays, false).map(|(l, _, _)| l)
}

fn evaluate(
    params: &ModelParams,
    protos: &PrototypeBuffer,
    w: &LossWeights,
    switches: TermSwitches,
    current: &SlideFeatures,
    replays: &[Replay<'_>],
    want_grad: bool,
) -> Result<(LossBreakdown, Option<ParamGrads>, ForwardTrace)> {
    let mut grads = want_grad.then(|| params.zeros_like());
    let mut losses = LossBreakdown::default();

    let trace = forward(params, current)?;
    let mut seed = TraceGrad::zeros(&trace);
    let (ce, d_logits) = cross_entropy_with_grad(trace.probs.view(), current.global_class)?;
    losses.ce = ce;
    seed.logits = d_logits * w.ce;

    if switches.ovla {
        let (nce, d_gz) = infonce_with_grad(trace.aligned_gz.view(), protos, current.global_class, w)?;
        let (sim, d_z_sim, d_gz_sim) =
            self_similarity_with_grad(trace.region_features_z.view(), trace.aligned_gz.view())?;
        losses.infonce = nce;
        losses.sim = sim;
        losses.ovla = ovla(nce, sim, w);
        seed.aligned_gz = d_gz * w.alpha + d_gz_sim * w.beta;
        seed.region_features_z = d_z_sim * w.beta;
    }
    if let Some(g) = grads.as_mut() {
        backward(params, &trace, current, &seed, g)?;
    }

    let use_replay = !replays.is_empty() && (switches.replay_ce || switches.ppgd);
    if use_replay {
        let scale = 1.0 / replays.len() as f64;
        for r in replays {
            let rt = forward(params, r.slide)?;
            let mut rseed = TraceGrad::zeros(&rt);
            if switches.replay_ce {
                let (rce, d_logits) = cross_entropy_with_grad(rt.probs.view(), r.slide.global_class)?;
                losses.replay_ce += scale * rce;
                rseed.logits = d_logits * (w.gamma * scale);
            }
            if switches.ppgd {
                // d logit_j / d head[:, j] is the slide embedding.
                let (pg, d_h) = ppgd_with_grad(r.stored_grad.view(), rt.slide_embedding.view(), w)?;
                losses.ppgd += scale * pg;
                rseed.slide_embedding = d_h * (w.lambda_ppgd * scale);
            }
            if let Some(g) = grads.as_mut() {
                backward(params, &rt, r.slide, &rseed, g)?;
            }
        }
    }
    let replay_w = LossWeights {
        gamma: if switches.replay_ce { w.gamma } else { 0.0 },
        lambda_ppgd: if switches.ppgd { w.lambda_ppgd } else { 0.0 },
        ..*w
    };
    losses.total = total_objective(losses.ce, losses.ovla, losses.replay_ce, losses.ppgd, &replay_w);
    Ok((losses, grads, trace))
}
