//! Task-sequential training loop, evaluation protocol and the baseline
//! runners (fine-tuning, joint training, replay-only).

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffer::RehearsalBuffer;
use crate::data::{Manifest, Split};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::{
    backward_transfer, class_il_accuracy, forgetting, forward_transfer, macro_auc, masked_accuracy, mean_accuracy,
    AccMatrix, TaskMaskRanges,
};
use crate::model::{forward, init_params, logit_head_gradient, ModelDims, ModelParams, SlideFeatures};
use crate::objective::{step_objective, LossBreakdown, Replay, TermSwitches};
use crate::optim::{AdamConfig, OptimizerState};
use crate::prototypes::PrototypeBuffer;

/// Offset mixed into the run seed for the training stream (shuffles,
/// reservoir decisions, replay draws) so it differs from the init stream.
const TRAIN_STREAM: u64 = 0x5e_ed0f_7a5c;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Cross-entropy, adaptation term, replay cross-entropy and gradient distillation.
    Adafgrad,
    /// Sequential cross-entropy only.
    Finetune,
    /// One training phase over the union of all tasks.
    Joint,
    /// Cross-entropy plus replay cross-entropy.
    Er,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Adafgrad, Method::Finetune, Method::Joint, Method::Er];

    pub fn name(self) -> &'static str {
        match self {
            Method::Adafgrad => "adafgrad",
            Method::Finetune => "finetune",
            Method::Joint => "joint",
            Method::Er => "er",
        }
    }

    pub fn switches(self) -> TermSwitches {
        match self {
            Method::Adafgrad => TermSwitches {
                ovla: true,
                replay_ce: true,
                ppgd: true,
            },
            Method::Er => TermSwitches {
                ovla: false,
                replay_ce: true,
                ppgd: false,
            },
            Method::Finetune | Method::Joint => TermSwitches::default(),
        }
    }

    pub fn uses_buffer(self) -> bool {
        matches!(self, Method::Adafgrad | Method::Er)
    }

    /// Two epochs for the replay methods, ten for the bounds.
    pub fn default_epochs(self) -> usize {
        match self {
            Method::Adafgrad | Method::Er => 2,
            Method::Finetune | Method::Joint => 10,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelWidths {
    pub d_model: usize,
    pub d_attn: usize,
}

impl Default for ModelWidths {
    fn default() -> Self {
        ModelWidths {
            d_model: 16,
            d_attn: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub loss: LossWeights,
    pub learning_rate: f64,
    /// Epochs per task; `None` picks the method's default.
    pub epochs: Option<usize>,
    pub buffer_capacity: usize,
    pub replay_draws_per_step: usize,
    pub seed: u64,
    pub method: Method,
    pub model: ModelWidths,
    pub optimizer: AdamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            loss: LossWeights::default(),
            learning_rate: 5e-4,
            epochs: None,
            buffer_capacity: 10,
            replay_draws_per_step: 1,
            seed: 0,
            method: Method::Adafgrad,
            model: ModelWidths::default(),
            optimizer: AdamConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn epochs_per_task(&self) -> usize {
        self.epochs.unwrap_or_else(|| self.method.default_epochs())
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs_per_task() == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.method.uses_buffer() && (self.buffer_capacity == 0 || self.replay_draws_per_step == 0) {
            return Err(Error::Config(
                "buffer_capacity and replay_draws_per_step must be >= 1 for replay methods".into(),
            ));
        }
        if self.model.d_model == 0 || self.model.d_attn == 0 {
            return Err(Error::Config("model widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn model_dims(&self, manifest: &Manifest) -> ModelDims {
        let f = manifest.dims();
        ModelDims {
            d_vis: f.d_vis,
            d_model: self.model.d_model,
            d_attn: self.model.d_attn,
            c_text: f.c_text,
            c_total: manifest.c_total(),
        }
    }
}

/// One optimizer step in the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub task: usize,
    pub epoch: usize,
    pub step: usize,
    pub slide_id: String,
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub steps: usize,
    pub buffer_writes: usize,
    pub replays: usize,
    pub train_accuracy_last_epoch: f64,
}

/// Mutable training state carried across tasks.
pub struct Learner {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub buffer: Option<RehearsalBuffer>,
    pub prototypes: PrototypeBuffer,
    pub rng: ChaCha8Rng,
    pub log: Vec<StepLog>,
}

impl Learner {
    pub fn new(cfg: &RunConfig, dims: ModelDims) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(dims, cfg.seed)?;
        let optimizer = OptimizerState::new(&params, cfg.optimizer);
        let buffer = if cfg.method.uses_buffer() {
            Some(RehearsalBuffer::new(cfg.buffer_capacity)?)
        } else {
            None
        };
        Ok(Learner {
            params,
            optimizer,
            buffer,
            prototypes: PrototypeBuffer::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_STREAM),
            log: Vec::new(),
        })
    }

    /// Trains on one task's slides for the configured number of epochs.
    /// Each step draws replays from the buffer as it stood before the step,
    /// takes one Adam step on the combined objective, and offers the slide
    /// (with its target-logit head-gradient) to the buffer.
    pub fn train_task(&mut self, task: usize, slides: &[SlideFeatures], cfg: &RunConfig) -> Result<TaskStats> {
        let c_total = self.params.dims.c_total;
        if let Some(s) = slides.iter().find(|s| s.global_class >= c_total) {
            return Err(Error::Config(format!(
                "slide {} has global class {} outside the declared {c_total} classes",
                s.slide_id, s.global_class
            )));
        }
        let switches = cfg.method.switches();
        let epochs = cfg.epochs_per_task();
        let mut stats = TaskStats::default();
        let mut order: Vec<usize> = (0..slides.len()).collect();
        for epoch in 0..epochs {
            order.shuffle(&mut self.rng);
            let mut correct = 0;
            for (step, &idx) in order.iter().enumerate() {
                let slide = &slides[idx];
                let out = {
                    let replays: Vec<Replay<'_>> = match &self.buffer {
                        Some(b) if !b.is_empty() && (switches.replay_ce || switches.ppgd) => (0..cfg
                            .replay_draws_per_step)
                            .map(|_| {
                                b.sample_replay(&mut self.rng).map(|item| Replay {
                                    slide: &item.slide,
                                    stored_grad: &item.stored_grad,
                                })
                            })
                            .collect::<Result<_>>()?,
                        _ => Vec::new(),
                    };
                    stats.replays += replays.len();
                    step_objective(&self.params, &self.prototypes, &cfg.loss, switches, slide, &replays)?
                };
                if let Some(term) = out.losses.non_finite_term() {
                    return Err(Error::NonFiniteLoss {
                        slide_id: slide.slide_id.clone(),
                        term,
                    });
                }
                if out.current_trace.predicted_class() == slide.global_class {
                    correct += 1;
                }
                if let Some(b) = self.buffer.as_mut() {
                    let grad = logit_head_gradient(&out.current_trace, slide.global_class)?;
                    b.conditional_add(slide.clone(), grad, &mut self.rng)?;
                    stats.buffer_writes += 1;
                }
                self.optimizer.step(&mut self.params, &out.grads, cfg.learning_rate)?;
                if !self.params.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        slide_id: slide.slide_id.clone(),
                        term: "parameter update",
                    });
                }
                stats.steps += 1;
                self.log.push(StepLog {
                    task,
                    epoch,
                    step,
                    slide_id: slide.slide_id.clone(),
                    losses: out.losses,
                });
            }
            if !slides.is_empty() {
                stats.train_accuracy_last_epoch = correct as f64 / slides.len() as f64;
            }
        }
        Ok(stats)
    }
}

/// Model outputs on a set of slides.
#[derive(Clone, Debug)]
pub struct SplitEval {
    /// `[n x C_total]`
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    pub embeddings: Array2<f64>,
    pub global_class: Vec<usize>,
    pub class_in_task: Vec<usize>,
    pub task_index: Vec<usize>,
}

pub fn evaluate_split(params: &ModelParams, slides: &[SlideFeatures]) -> Result<SplitEval> {
    let traces = slides
        .par_iter()
        .map(|s| forward(params, s))
        .collect::<Result<Vec<_>>>()?;
    let dims = params.dims;
    let n = slides.len();
    let mut logits = Array2::zeros((n, dims.c_total));
    let mut probs = Array2::zeros((n, dims.c_total));
    let mut embeddings = Array2::zeros((n, dims.d_model));
    for (i, t) in traces.iter().enumerate() {
        logits.row_mut(i).assign(&t.logits);
        probs.row_mut(i).assign(&t.probs);
        embeddings.row_mut(i).assign(&t.slide_embedding);
    }
    Ok(SplitEval {
        logits,
        probs,
        embeddings,
        global_class: slides.iter().map(|s| s.global_class).collect(),
        class_in_task: slides.iter().map(|s| s.class_in_task).collect(),
        task_index: slides.iter().map(|s| s.task_index).collect(),
    })
}

/// CLASS-IL accuracy on one split.
pub fn task_accuracy(params: &ModelParams, slides: &[SlideFeatures]) -> Result<f64> {
    let e = evaluate_split(params, slides)?;
    class_il_accuracy(e.logits.view(), &e.global_class)
}

/// CLASS-IL accuracy of a model (normally the freshly initialized one) on
/// every task's test split.
pub fn evaluate_random_baseline(params: &ModelParams, test_splits: &[Vec<SlideFeatures>]) -> Result<Vec<f64>> {
    test_splits.iter().map(|s| task_accuracy(params, s)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub acc: f64,
    pub masked_acc: f64,
    pub auc: f64,
    /// Sequence metrics; absent for joint training, which has no sequence.
    pub macc: Option<f64>,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub fgt: Option<f64>,
}

impl MetricSet {
    pub fn all_finite(&self) -> bool {
        [self.acc, self.masked_acc, self.auc]
            .into_iter()
            .chain([self.macc, self.bwt, self.fwt, self.fgt].into_iter().flatten())
            .all(f64::is_finite)
    }
}

/// Everything a run produces besides the loss log.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub method: Method,
    pub acc_matrix: Option<AccMatrix>,
    pub rand: Vec<f64>,
    /// Accuracy on each task after the last training phase.
    pub final_task_accuracy: Vec<f64>,
    pub metrics: MetricSet,
    /// Per task, the probability assigned to the true class of every test slide.
    pub target_confidence: Vec<Vec<f64>>,
    pub task_stats: Vec<TaskStats>,
    pub params: ModelParams,
    pub buffer: Option<RehearsalBuffer>,
    pub log: Vec<StepLog>,
}

struct TaskData {
    train: Vec<SlideFeatures>,
    test: Vec<SlideFeatures>,
}

fn load_tasks(manifest: &Manifest) -> Result<Vec<TaskData>> {
    (0..manifest.n_tasks())
        .map(|t| {
            Ok(TaskData {
                train: manifest.load_split(t, Split::Train)?,
                test: manifest.load_split(t, Split::Test)?,
            })
        })
        .collect()
}

/// Final CLASS-IL / TASK-IL metrics on all test splits. AUC is the macro
/// one-vs-rest AUC within each task's classes (probabilities as scores),
/// averaged over tasks.
/// (acc, masked_acc, auc, per-task accuracy, per-task target confidences).
type FinalMetrics = (f64, f64, f64, Vec<f64>, Vec<Vec<f64>>);

fn final_metrics(params: &ModelParams, tasks: &[TaskData], ranges: &TaskMaskRanges) -> Result<FinalMetrics> {
    let all: Vec<SlideFeatures> = tasks.iter().flat_map(|t| t.test.iter().cloned()).collect();
    let e = evaluate_split(params, &all)?;
    let acc = class_il_accuracy(e.logits.view(), &e.global_class)?;
    let masked = masked_accuracy(e.logits.view(), &e.global_class, &e.task_index, ranges)?;

    let mut aucs = Vec::new();
    let mut per_task_acc = Vec::new();
    let mut confidence = Vec::new();
    let mut row = 0;
    for (t, task) in tasks.iter().enumerate() {
        let n = task.test.len();
        let (s, end) = ranges.ranges[t];
        let rows = e.probs.slice(ndarray::s![row..row + n, ..]);
        let truth = &e.class_in_task[row..row + n];
        match macro_auc(rows.slice(ndarray::s![.., s..end]), truth) {
            Ok(a) => aucs.push(a),
            Err(err) => log::warn!("task {t}: {err}"),
        }
        per_task_acc.push(class_il_accuracy(
            e.logits.slice(ndarray::s![row..row + n, ..]),
            &e.global_class[row..row + n],
        )?);
        confidence.push(
            (row..row + n)
                .map(|i| e.probs[[i, e.global_class[i]]])
                .collect(),
        );
        row += n;
    }
    if aucs.is_empty() {
        return Err(Error::Metric("AUC undefined on every task".into()));
    }
    let auc = aucs.iter().sum::<f64>() / aucs.len() as f64;
    Ok((acc, masked, auc, per_task_acc, confidence))
}

/// Runs a whole method over the manifest's task sequence.
///
/// Sequential methods record, after training task `t`, the accuracy on
/// every task `i <= t` and on task `t + 1` (for forward transfer). Joint
/// training trains once on the union and evaluates once.
pub fn run_sequence(cfg: &RunConfig, manifest: &Manifest) -> Result<RunOutcome> {
    cfg.validate()?;
    let dims = cfg.model_dims(manifest);
    let tasks = load_tasks(manifest)?;
    for (t, task) in tasks.iter().enumerate() {
        if task.train.is_empty() || task.test.is_empty() {
            return Err(Error::Manifest(format!("task {t} needs non-empty train and test splits")));
        }
    }
    let task_protos = manifest.load_task_prototypes()?;
    let ranges = manifest.mask_ranges();
    let mut learner = Learner::new(cfg, dims)?;

    let tests: Vec<Vec<SlideFeatures>> = tasks.iter().map(|t| t.test.clone()).collect();
    let rand = evaluate_random_baseline(&learner.params, &tests)?;

    let mut task_stats = Vec::new();
    let acc_matrix = if cfg.method == Method::Joint {
        for p in task_protos {
            p.accumulate_into(&mut learner.prototypes)?;
        }
        let union: Vec<SlideFeatures> = tasks.iter().flat_map(|t| t.train.iter().cloned()).collect();
        task_stats.push(learner.train_task(0, &union, cfg)?);
        None
    } else {
        let n = tasks.len();
        let mut acc = Vec::with_capacity(n);
        let mut lookahead = Vec::with_capacity(n.saturating_sub(1));
        for (t, (task, protos)) in tasks.iter().zip(task_protos).enumerate() {
            protos.accumulate_into(&mut learner.prototypes)?;
            let stats = learner.train_task(t, &task.train, cfg)?;
            log::info!(
                "{}: task {t} done ({} steps, train acc {:.3})",
                cfg.method.name(),
                stats.steps,
                stats.train_accuracy_last_epoch
            );
            task_stats.push(stats);
            acc.push(
                tasks[..=t]
                    .iter()
                    .map(|ti| task_accuracy(&learner.params, &ti.test))
                    .collect::<Result<Vec<_>>>()?,
            );
            if t + 1 < n {
                lookahead.push(task_accuracy(&learner.params, &tasks[t + 1].test)?);
            }
        }
        Some(AccMatrix {
            acc,
            rand: rand.clone(),
            lookahead,
            task_class_counts: manifest.class_counts(),
        })
    };

    let (acc, masked_acc, auc, final_task_accuracy, target_confidence) =
        final_metrics(&learner.params, &tasks, &ranges)?;
    let seq = |f: fn(&AccMatrix) -> Result<f64>| -> Option<f64> {
        acc_matrix.as_ref().and_then(|m| f(m).ok())
    };
    let metrics = MetricSet {
        acc,
        masked_acc,
        auc,
        macc: seq(mean_accuracy),
        bwt: seq(backward_transfer),
        fwt: seq(forward_transfer),
        fgt: seq(forgetting),
    };
    Ok(RunOutcome {
        method: cfg.method,
        acc_matrix,
        rand,
        final_task_accuracy,
        metrics,
        target_confidence,
        task_stats,
        params: learner.params,
        buffer: learner.buffer,
        log: learner.log,
    })
}

/// Slide embeddings of the final model, one row per slide.
pub fn slide_embeddings(params: &ModelParams, slides: &[SlideFeatures]) -> Result<Vec<Array1<f64>>> {
    slides
        .par_iter()
        .map(|s| forward(params, s).map(|t| t.slide_embedding))
        .collect()
}
