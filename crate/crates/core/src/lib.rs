//! Lifelong learning over a sequence of bag-of-features classification tasks.
//!
//! Slides arrive task by task as bags of region and patch features. A small
//! two-level gated-attention aggregator produces region features and a slide
//! embedding; a pre-allocated linear head classifies over every class of the
//! whole sequence. Training combines cross-entropy with
//!
//! * an online vision-language adaptation term that pulls aligned region
//!   features towards text-derived class prototypes (contrastive) and
//!   matches the region Gram matrices before and after alignment, and
//! * replay from a reservoir-sampled rehearsal buffer, with a distillation
//!   term that keeps the current head-gradient of a replayed slide's target
//!   logit close to the one stored when the slide entered the buffer.
//!
//! The [`metrics`] module implements the class-incremental and
//! task-incremental evaluation suite (ACC, masked ACC, macro AUC, mACC, BWT,
//! FWT, FGT).

pub mod buffer;
pub mod data;
pub mod engine;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod prototypes;
pub mod report;

pub use error::{Error, Result};
