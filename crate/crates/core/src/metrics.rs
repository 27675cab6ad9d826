//! Class-incremental (CLASS-IL) and task-incremental (TASK-IL) evaluation.
//!
//! Per-sample metrics work on logit or score rows; sequence metrics work on
//! the accuracy matrix `acc[t][i]`, the accuracy on task `i` after training
//! through task `t` (0-based here, `i <= t`).

use std::fmt::Write as _;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::argmax;

/// Head column range `[start, end)` owned by each task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMaskRanges {
    pub ranges: Vec<(usize, usize)>,
}

impl TaskMaskRanges {
    pub fn from_class_counts(counts: &[usize]) -> Self {
        let mut start = 0;
        let ranges = counts
            .iter()
            .map(|&c| {
                let r = (start, start + c);
                start += c;
                r
            })
            .collect();
        TaskMaskRanges { ranges }
    }

    pub fn c_total(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.1)
    }

    /// Task owning a global class index.
    pub fn task_of(&self, global_class: usize) -> Option<usize> {
        self.ranges
            .iter()
            .position(|&(s, e)| (s..e).contains(&global_class))
    }
}

fn check_rows(n_rows: usize, n_labels: usize) -> Result<()> {
    if n_rows == 0 {
        return Err(Error::Metric("no samples".into()));
    }
    if n_rows != n_labels {
        return Err(Error::Metric(format!(
            "{n_rows} score rows but {n_labels} labels"
        )));
    }
    Ok(())
}

/// Fraction of rows whose argmax over all columns (lowest index on ties)
/// equals the true global class.
pub fn class_il_accuracy(logits: ArrayView2<f64>, truth: &[usize]) -> Result<f64> {
    check_rows(logits.nrows(), truth.len())?;
    let correct = logits
        .rows()
        .into_iter()
        .zip(truth)
        .filter(|(row, &y)| argmax(*row) == y)
        .count();
    Ok(correct as f64 / truth.len() as f64)
}

/// Accuracy with the argmax restricted to the true task's column range.
pub fn masked_accuracy(
    logits: ArrayView2<f64>,
    truth: &[usize],
    task_ids: &[usize],
    ranges: &TaskMaskRanges,
) -> Result<f64> {
    check_rows(logits.nrows(), truth.len())?;
    check_rows(logits.nrows(), task_ids.len())?;
    if ranges.c_total() != logits.ncols() {
        return Err(Error::Metric(format!(
            "mask ranges cover {} columns, logits have {}",
            ranges.c_total(),
            logits.ncols()
        )));
    }
    let mut correct = 0;
    for ((row, &y), &t) in logits.rows().into_iter().zip(truth).zip(task_ids) {
        let &(s, e) = ranges
            .ranges
            .get(t)
            .ok_or(Error::IndexOutOfRange { index: t, len: ranges.ranges.len() })?;
        let pred = s + argmax(row.slice(ndarray::s![s..e]));
        if pred == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / truth.len() as f64)
}

/// One-vs-rest AUC of `scores` for the positives marked in `is_positive`,
/// via the Mann-Whitney rank statistic with average ranks for ties.
/// `None` when either class is empty.
pub fn binary_auc(scores: ArrayView1<f64>, is_positive: &[bool]) -> Option<f64> {
    let n_pos = is_positive.iter().filter(|&&p| p).count();
    let n_neg = is_positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg_rank = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg_rank * order[i..=j].iter().filter(|&&k| is_positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean one-vs-rest AUC over the columns of `scores` (one per class of the
/// dataset). Classes without positives or without negatives are skipped.
pub fn macro_auc(scores: ArrayView2<f64>, truth: &[usize]) -> Result<f64> {
    check_rows(scores.nrows(), truth.len())?;
    if let Some(&bad) = truth.iter().find(|&&y| y >= scores.ncols()) {
        return Err(Error::IndexOutOfRange { index: bad, len: scores.ncols() });
    }
    let mut aucs = Vec::with_capacity(scores.ncols());
    for c in 0..scores.ncols() {
        let positives: Vec<bool> = truth.iter().map(|&y| y == c).collect();
        match binary_auc(scores.column(c), &positives) {
            Some(a) => aucs.push(a),
            None => log::warn!("AUC for class {c} skipped: needs both positives and negatives"),
        }
    }
    if aucs.is_empty() {
        return Err(Error::Metric("AUC undefined: every class was skipped".into()));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Lower-triangular accuracy matrix plus the extra cells the transfer
/// metrics need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccMatrix {
    /// `acc[t]` has `t + 1` entries.
    pub acc: Vec<Vec<f64>>,
    /// Accuracy of the untrained model on each task.
    pub rand: Vec<f64>,
    /// `lookahead[t]`: accuracy on task `t + 1` after training through task `t`.
    pub lookahead: Vec<f64>,
    pub task_class_counts: Vec<usize>,
}

impl AccMatrix {
    pub fn n_tasks(&self) -> usize {
        self.task_class_counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_tasks();
        if n == 0 {
            return Err(Error::Metric("accuracy matrix has no tasks".into()));
        }
        if self.acc.len() != n || self.rand.len() != n || self.lookahead.len() != n - 1 {
            return Err(Error::Metric(format!(
                "accuracy matrix shape mismatch: {} rows, {} rand cells, {} lookahead cells for {n} tasks",
                self.acc.len(),
                self.rand.len(),
                self.lookahead.len()
            )));
        }
        for (t, row) in self.acc.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(Error::Metric(format!("row {t} has {} cells, expected {}", row.len(), t + 1)));
            }
        }
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !self.acc.iter().flatten().chain(&self.rand).chain(&self.lookahead).all(in_unit) {
            return Err(Error::Metric("accuracy cells must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Final row: accuracy on every task after the whole sequence.
    pub fn final_row(&self) -> &[f64] {
        self.acc.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// CSV with a header, one row per training stage (upper triangle left
    /// blank), then `#`-prefixed rows for the random baseline, the lookahead
    /// cells (in the column of the task they score) and the class counts.
    pub fn to_csv(&self) -> String {
        let n = self.n_tasks();
        let mut out = String::from("trained_through");
        for i in 0..n {
            write!(out, ",task_{i}").unwrap();
        }
        out.push('\n');
        for (t, row) in self.acc.iter().enumerate() {
            write!(out, "{t}").unwrap();
            for i in 0..n {
                out.push(',');
                if let Some(v) = row.get(i) {
                    write!(out, "{v}").unwrap();
                }
            }
            out.push('\n');
        }
        out.push_str("# rand");
        for v in &self.rand {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
        out.push_str("# lookahead,");
        for v in &self.lookahead {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
        out.push_str("# class_counts");
        for c in &self.task_class_counts {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Metric(format!("accuracy CSV: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let n = header.split(',').count() - 1;
        let parse = |s: &str| -> Result<f64> { s.trim().parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}"))) };
        let mut acc = Vec::new();
        let mut rand = Vec::new();
        let mut lookahead = Vec::new();
        let mut counts = Vec::new();
        for line in lines {
            let mut cells = line.split(',');
            let tag = cells.next().unwrap_or_default();
            let cells: Vec<&str> = cells.collect();
            match tag {
                "# rand" => rand = cells.iter().map(|c| parse(c)).collect::<Result<_>>()?,
                "# lookahead" => {
                    lookahead = cells.iter().skip(1).map(|c| parse(c)).collect::<Result<_>>()?
                }
                "# class_counts" => {
                    counts = cells
                        .iter()
                        .map(|c| c.trim().parse::<usize>().map_err(|e| bad(e.to_string())))
                        .collect::<Result<_>>()?
                }
                _ => acc.push(
                    cells
                        .iter()
                        .filter(|c| !c.is_empty())
                        .map(|c| parse(c))
                        .collect::<Result<Vec<f64>>>()?,
                ),
            }
        }
        let m = AccMatrix {
            acc,
            rand,
            lookahead,
            task_class_counts: counts,
        };
        if m.n_tasks() != n {
            return Err(bad(format!("header names {n} tasks, class counts {}", m.n_tasks())));
        }
        m.validate()?;
        Ok(m)
    }
}

fn need_two(m: &AccMatrix, what: &str) -> Result<usize> {
    m.validate()?;
    let n = m.n_tasks();
    if n < 2 {
        return Err(Error::Metric(format!("{what} needs at least two tasks")));
    }
    Ok(n)
}

/// Average over stages of the mean accuracy on the tasks seen so far.
pub fn mean_accuracy(m: &AccMatrix) -> Result<f64> {
    m.validate()?;
    let n = m.n_tasks();
    let total: f64 = m
        .acc
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .sum();
    Ok(total / n as f64)
}

/// Mean change of each earlier task's accuracy from just after it was
/// learned to the end of the sequence.
pub fn backward_transfer(m: &AccMatrix) -> Result<f64> {
    let n = need_two(m, "BWT")?;
    let last = &m.acc[n - 1];
    let total: f64 = (0..n - 1).map(|t| last[t] - m.acc[t][t]).sum();
    Ok(total / (n - 1) as f64)
}

/// Mean gain over the random baseline on each task before training on it.
pub fn forward_transfer(m: &AccMatrix) -> Result<f64> {
    let n = need_two(m, "FWT")?;
    let total: f64 = (1..n).map(|t| m.lookahead[t - 1] - m.rand[t]).sum();
    Ok(total / (n - 1) as f64)
}

/// Mean drop from each task's best accuracy to its final accuracy.
pub fn forgetting(m: &AccMatrix) -> Result<f64> {
    m.validate()?;
    let n = m.n_tasks();
    let last = &m.acc[n - 1];
    let total: f64 = (0..n)
        .map(|t| {
            let best = (t..n).map(|d| m.acc[d][t]).fold(f64::NEG_INFINITY, f64::max);
            best - last[t]
        })
        .sum();
    Ok(total / n as f64)
}
