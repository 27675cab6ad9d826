//! What a finished run writes to disk: the JSON report, the loss log and
//! the parameter checkpoint.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Manifest;
use crate::engine::{MetricSet, Method, RunConfig, RunOutcome, StepLog, TaskStats};
use crate::error::{Error, Result};
use crate::metrics::AccMatrix;
use crate::model::{ModelDims, ModelParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    /// The effective configuration, defaults filled in.
    pub config: RunConfig,
    pub dims: ModelDims,
    pub task_names: Vec<String>,
    pub task_class_counts: Vec<usize>,
    /// `None` for joint training.
    pub acc_matrix: Option<AccMatrix>,
    pub rand: Vec<f64>,
    pub metrics: MetricSet,
    pub final_task_accuracy: Vec<f64>,
    pub target_confidence: Vec<Vec<f64>>,
    pub task_stats: Vec<TaskStats>,
    pub params_checksum: String,
    pub wall_clock_secs: f64,
    pub loss_log: Vec<StepLog>,
}

impl RunReport {
    pub fn new(cfg: &RunConfig, manifest: &Manifest, outcome: &RunOutcome, wall_clock_secs: f64) -> Self {
        RunReport {
            method: outcome.method,
            seed: cfg.seed,
            config: RunConfig {
                epochs: Some(cfg.epochs_per_task()),
                ..cfg.clone()
            },
            dims: outcome.params.dims,
            task_names: manifest.file.tasks.iter().map(|t| t.name.clone()).collect(),
            task_class_counts: manifest.class_counts(),
            acc_matrix: outcome.acc_matrix.clone(),
            rand: outcome.rand.clone(),
            metrics: outcome.metrics.clone(),
            final_task_accuracy: outcome.final_task_accuracy.clone(),
            target_confidence: outcome.target_confidence.clone(),
            task_stats: outcome.task_stats.clone(),
            params_checksum: outcome.params.checksum(),
            wall_clock_secs,
            loss_log: outcome.log.clone(),
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.task_class_counts.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

pub const LOSS_LOG_HEADER: &str = "task,epoch,step,slide_id,ce,infonce,sim,ovla,replay_ce,ppgd,total";

pub fn loss_log_csv(log: &[StepLog]) -> String {
    let mut out = String::from(LOSS_LOG_HEADER);
    out.push('\n');
    for s in log {
        let l = &s.losses;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            s.task, s.epoch, s.step, s.slide_id, l.ce, l.infonce, l.sim, l.ovla, l.replay_ce, l.ppgd, l.total
        );
    }
    out
}

/// JSON checkpoint; floats round-trip exactly.
pub fn save_params(params: &ModelParams, path: &Path) -> Result<()> {
    let json = serde_json::to_string(params)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let p: ModelParams = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    p.dims.validate()?;
    if !shapes_match(&p, &ModelParams::zeros(p.dims)) || !p.is_finite() {
        return Err(Error::format(path, "checkpoint tensors do not match its dims or are not finite"));
    }
    Ok(p)
}

fn shapes_match(a: &ModelParams, b: &ModelParams) -> bool {
    let lin = |x: &crate::model::Linear, y: &crate::model::Linear| {
        x.weight.dim() == y.weight.dim() && x.bias.dim() == y.bias.dim()
    };
    let att = |x: &crate::model::GatedAttention, y: &crate::model::GatedAttention| {
        x.v.dim() == y.v.dim() && x.u.dim() == y.u.dim() && x.w.dim() == y.w.dim()
    };
    lin(&a.patch_proj, &b.patch_proj)
        && att(&a.patch_attn, &b.patch_attn)
        && lin(&a.region_proj, &b.region_proj)
        && lin(&a.region_mlp, &b.region_mlp)
        && att(&a.slide_attn, &b.slide_attn)
        && a.align_g.dim() == b.align_g.dim()
        && lin(&a.head, &b.head)
}
