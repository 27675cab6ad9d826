//! JSON manifest declaring the whole task sequence up front.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::format::{read_prototypes, read_slide_features, SlideLabels};
use crate::error::{Error, Result};
use crate::metrics::TaskMaskRanges;
use crate::model::SlideFeatures;
use crate::prototypes::{l2_normalize, PrototypeBuffer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub d_vis: usize,
    pub k: usize,
    pub c_text: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub task_index: usize,
    pub class_in_task: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub name: String,
    pub classes: Vec<String>,
    /// Negative concepts introduced with this task, in prototype-file order.
    #[serde(default)]
    pub negatives: Vec<String>,
    pub slides: Vec<SlideEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub dims: FeatureDims,
    pub prototypes: PathBuf,
    pub tasks: Vec<TaskEntry>,
}

/// A validated manifest with paths resolved against its directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub file: ManifestFile,
    pub base_dir: PathBuf,
}

/// One task's prototypes, unit-normalized and labelled with global classes.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskPrototypes {
    pub cls: Vec<(usize, Array1<f64>)>,
    pub neg: Vec<Array1<f64>>,
}

impl TaskPrototypes {
    pub fn accumulate_into(self, buffer: &mut PrototypeBuffer) -> Result<()> {
        buffer.accumulate_task(self.cls, self.neg)
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let m = Manifest { file, base_dir };
    m.validate()?;
    Ok(m)
}

impl Manifest {
    pub fn from_file(file: ManifestFile, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Manifest {
            file,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.file;
        let mut problems = Vec::new();
        if f.tasks.is_empty() {
            problems.push("manifest declares no tasks".to_string());
        }
        if f.dims.d_vis == 0 || f.dims.k == 0 || f.dims.c_text == 0 {
            problems.push(format!("dims must all be >= 1, got {:?}", f.dims));
        }
        if !self.resolve(&f.prototypes).is_file() {
            problems.push(format!("prototype file {} not found", f.prototypes.display()));
        }

        let mut ids = HashSet::new();
        let mut splits_by_path: BTreeMap<&Path, HashSet<Split>> = BTreeMap::new();
        for (t, task) in f.tasks.iter().enumerate() {
            if task.classes.is_empty() {
                problems.push(format!("task {t} ({}) has no classes", task.name));
            }
            for s in &task.slides {
                if !ids.insert(s.id.as_str()) {
                    problems.push(format!("duplicate slide id {}", s.id));
                }
                if s.task_index != t {
                    problems.push(format!(
                        "slide {} is listed under task {t} but declares task_index {}",
                        s.id, s.task_index
                    ));
                }
                if s.class_in_task >= task.classes.len() {
                    problems.push(format!(
                        "slide {} has class_in_task {} but task {t} has {} classes",
                        s.id,
                        s.class_in_task,
                        task.classes.len()
                    ));
                }
                if !self.resolve(&s.path).is_file() {
                    problems.push(format!("slide {}: file {} not found", s.id, s.path.display()));
                }
                splits_by_path.entry(s.path.as_path()).or_default().insert(s.split);
            }
        }
        let overlapping: Vec<String> = splits_by_path
            .iter()
            .filter(|(_, splits)| splits.len() > 1)
            .map(|(p, _)| p.display().to_string())
            .collect();
        if !overlapping.is_empty() {
            problems.push(format!("splits overlap on {}", overlapping.join(", ")));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Manifest(problems.join("; ")))
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn n_tasks(&self) -> usize {
        self.file.tasks.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.file.tasks.iter().map(|t| t.classes.len()).collect()
    }

    pub fn c_total(&self) -> usize {
        self.class_counts().iter().sum()
    }

    pub fn dims(&self) -> FeatureDims {
        self.file.dims
    }

    /// Global index of the first class of `task`.
    pub fn class_offset(&self, task: usize) -> usize {
        self.class_counts()[..task].iter().sum()
    }

    pub fn mask_ranges(&self) -> TaskMaskRanges {
        TaskMaskRanges::from_class_counts(&self.class_counts())
    }

    pub fn entries(&self, task: usize, split: Split) -> impl Iterator<Item = &SlideEntry> {
        self.file.tasks[task].slides.iter().filter(move |s| s.split == split)
    }

    pub fn load_slide(&self, entry: &SlideEntry) -> Result<SlideFeatures> {
        let labels = SlideLabels {
            slide_id: entry.id.clone(),
            task_index: entry.task_index,
            class_in_task: entry.class_in_task,
            global_class: self.class_offset(entry.task_index) + entry.class_in_task,
        };
        let s = read_slide_features(&self.resolve(&entry.path), labels)?;
        let dims = self.file.dims;
        if s.d_vis() != dims.d_vis || s.k() != dims.k {
            return Err(Error::Manifest(format!(
                "slide {} has d_vis={}, k={}; manifest declares d_vis={}, k={}",
                entry.id,
                s.d_vis(),
                s.k(),
                dims.d_vis,
                dims.k
            )));
        }
        Ok(s)
    }

    pub fn load_split(&self, task: usize, split: Split) -> Result<Vec<SlideFeatures>> {
        self.entries(task, split).map(|e| self.load_slide(e)).collect()
    }

    /// Reads the prototype file and slices it per task. Vectors are
    /// L2-normalized here.
    pub fn load_task_prototypes(&self) -> Result<Vec<TaskPrototypes>> {
        let path = self.resolve(&self.file.prototypes);
        let raw = read_prototypes(&path)?;
        let n_neg: usize = self.file.tasks.iter().map(|t| t.negatives.len()).sum();
        if raw.c_text != self.file.dims.c_text || raw.cls.len() != self.c_total() || raw.neg.len() != n_neg {
            return Err(Error::Manifest(format!(
                "prototype file holds {} class / {} negative vectors of width {}; manifest expects {} / {} of width {}",
                raw.cls.len(),
                raw.neg.len(),
                raw.c_text,
                self.c_total(),
                n_neg,
                self.file.dims.c_text
            )));
        }
        let to_unit = |v: &Array1<f32>| l2_normalize(&v.mapv(f64::from));
        let mut cls_iter = raw.cls.iter().enumerate();
        let mut neg_iter = raw.neg.iter();
        self.file
            .tasks
            .iter()
            .map(|task| {
                let cls = cls_iter
                    .by_ref()
                    .take(task.classes.len())
                    .map(|(g, v)| Ok((g, to_unit(v)?)))
                    .collect::<Result<Vec<_>>>()?;
                let neg = neg_iter
                    .by_ref()
                    .take(task.negatives.len())
                    .map(to_unit)
                    .collect::<Result<Vec<_>>>()?;
                Ok(TaskPrototypes { cls, neg })
            })
            .collect()
    }

    /// Number of slides per (task, split).
    pub fn split_counts(&self) -> HashMap<(usize, Split), usize> {
        let mut out = HashMap::new();
        for (t, task) in self.file.tasks.iter().enumerate() {
            for s in &task.slides {
                *out.entry((t, s.split)).or_insert(0) += 1;
            }
        }
        out
    }
}
