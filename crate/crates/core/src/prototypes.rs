//! Text-derived class and negative prototypes and the append-only prototype
//! buffer they accumulate into, one task at a time.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Phrasing variants per class template.
pub const PHRASINGS_PER_TEMPLATE: usize = 4;
/// Base sentence templates per class or negative concept.
pub const BASE_TEMPLATES: usize = 22;
/// Negative concepts per task when the manifest does not name them.
pub const DEFAULT_NEGATIVES_PER_TASK: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Class,
    Negative,
}

/// Text-encoder output for one templated sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEmbedding {
    pub vector: Array1<f64>,
    pub kind: EmbeddingKind,
    pub owner: String,
    pub template_id: usize,
}

fn mean_prototype(embeddings: &[SentenceEmbedding], kind: EmbeddingKind) -> Result<Array1<f64>> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Prototype("cannot build a prototype from zero embeddings".into()))?;
    let dim = first.vector.len();
    let mut sum = Array1::<f64>::zeros(dim);
    for e in embeddings {
        if e.kind != kind {
            return Err(Error::Prototype(format!(
                "expected {kind:?} embeddings, got {:?} (template {})",
                e.kind, e.template_id
            )));
        }
        if e.owner != first.owner {
            return Err(Error::Prototype(format!(
                "mixed owners: {:?} and {:?}",
                first.owner, e.owner
            )));
        }
        if e.vector.len() != dim {
            return Err(Error::Dimension(format!(
                "embedding width {} differs from {dim}",
                e.vector.len()
            )));
        }
        if !e.vector.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding of {}", e.owner)));
        }
        sum += &e.vector;
    }
    Ok(sum / embeddings.len() as f64)
}

/// Mean over the `4T` sentence embeddings of one class.
pub fn build_class_prototype(embeddings: &[SentenceEmbedding]) -> Result<Array1<f64>> {
    mean_prototype(embeddings, EmbeddingKind::Class)
}

/// Mean over the `T` sentence embeddings of one negative concept.
pub fn build_negative_prototype(embeddings: &[SentenceEmbedding]) -> Result<Array1<f64>> {
    mean_prototype(embeddings, EmbeddingKind::Negative)
}

/// Accumulated prototypes. `cls[i].0 == i` always holds, so the class list
/// lines up with the columns of the classification head.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBuffer {
    pub cls: Vec<(usize, Array1<f64>)>,
    pub neg: Vec<(usize, Array1<f64>)>,
}

impl PrototypeBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_classes(&self) -> usize {
        self.cls.len()
    }

    pub fn n_negatives(&self) -> usize {
        self.neg.len()
    }

    /// Width of the stored vectors, if any are stored.
    pub fn c_text(&self) -> Option<usize> {
        self.cls
            .first()
            .or(self.neg.first())
            .map(|(_, v)| v.len())
    }

    pub fn class_prototype(&self, global_class: usize) -> Option<&Array1<f64>> {
        self.cls.get(global_class).map(|(_, v)| v)
    }

    /// Appends one task's prototypes. Class indices must continue the
    /// existing sequence exactly; negatives get the next free concept ids.
    pub fn accumulate_task(
        &mut self,
        cls_protos: Vec<(usize, Array1<f64>)>,
        neg_protos: Vec<Array1<f64>>,
    ) -> Result<()> {
        let width = self.c_text();
        for (expected, (idx, v)) in (self.cls.len()..).zip(&cls_protos) {
            if *idx != expected {
                return Err(Error::Prototype(format!(
                    "class prototype index {idx} breaks contiguity (expected {expected})"
                )));
            }
            check_width(width.or(cls_protos.first().map(|(_, v)| v.len())), v)?;
        }
        let width = width
            .or(cls_protos.first().map(|(_, v)| v.len()))
            .or(neg_protos.first().map(|v| v.len()));
        for v in &neg_protos {
            check_width(width, v)?;
        }
        self.cls.extend(cls_protos);
        let base = self.neg.len();
        self.neg
            .extend(neg_protos.into_iter().enumerate().map(|(i, v)| (base + i, v)));
        Ok(())
    }
}

fn check_width(width: Option<usize>, v: &Array1<f64>) -> Result<()> {
    if let Some(w) = width {
        if v.len() != w {
            return Err(Error::Dimension(format!(
                "prototype width {} differs from buffer width {w}",
                v.len()
            )));
        }
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("prototype vector".into()));
    }
    Ok(())
}

/// Scales `v` to unit L2 norm.
pub fn l2_normalize(v: &Array1<f64>) -> Result<Array1<f64>> {
    let n = v.dot(v).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Prototype("cannot normalize a zero or non-finite prototype".into()));
    }
    Ok(v / n)
}
