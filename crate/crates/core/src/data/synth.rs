//! Synthetic task sequences shaped like a multi-organ subtyping benchmark.
//!
//! Every class gets a unit mean direction in feature space, with a minimum
//! pairwise angle across the whole sequence. Region features scatter around
//! the class mean and patch features around their region. Text-side class
//! prototypes are the class means pushed through a fixed random linear map,
//! perturbed once per templated sentence and mean-pooled; negative
//! prototypes come from random concept vectors treated the same way.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::format::{write_prototypes, write_slide_features, PrototypeFile};
use super::manifest::{FeatureDims, Manifest, ManifestFile, SlideEntry, Split, TaskEntry};
use crate::error::{Error, Result};
use crate::model::SlideFeatures;
use crate::prototypes::{
    build_class_prototype, build_negative_prototype, EmbeddingKind, SentenceEmbedding, BASE_TEMPLATES,
    DEFAULT_NEGATIVES_PER_TASK, PHRASINGS_PER_TEMPLATE,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PROTOTYPE_FILE: &str = "prototypes.wsp";

const MAX_DRAWS_PER_CLASS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub class_counts: Vec<usize>,
    pub slides_per_class: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    pub k: usize,
    pub d_vis: usize,
    pub c_text: usize,
    /// Minimum angle between any two class means, in degrees.
    pub min_separation_deg: f64,
    /// Per-coordinate standard deviation of region features around the class mean.
    pub region_noise: f64,
    /// Per-coordinate standard deviation of patch features around their region.
    pub patch_noise: f64,
    /// Per-coordinate standard deviation of each sentence embedding.
    pub template_noise: f64,
    pub negatives_per_task: usize,
    pub templates: usize,
    pub phrasings_per_template: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            class_counts: vec![2, 3, 2, 2, 2, 2],
            slides_per_class: 30,
            min_regions: 4,
            max_regions: 16,
            k: 2,
            d_vis: 32,
            c_text: 24,
            min_separation_deg: 60.0,
            region_noise: 0.3,
            patch_noise: 0.1,
            template_noise: 0.05,
            negatives_per_task: DEFAULT_NEGATIVES_PER_TASK,
            templates: BASE_TEMPLATES,
            phrasings_per_template: PHRASINGS_PER_TEMPLATE,
            train_fraction: 0.8,
            val_fraction: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.class_counts.is_empty() || self.class_counts.contains(&0) {
            return bad(format!("class_counts must be non-empty and positive: {:?}", self.class_counts));
        }
        if self.slides_per_class == 0 || self.k == 0 || self.d_vis == 0 || self.c_text == 0 {
            return bad("slides_per_class, k, d_vis and c_text must be >= 1".into());
        }
        if self.templates == 0 || self.phrasings_per_template == 0 {
            return bad("templates and phrasings_per_template must be >= 1".into());
        }
        if self.min_regions == 0 || self.min_regions > self.max_regions {
            return bad(format!(
                "region range [{}, {}] is empty",
                self.min_regions, self.max_regions
            ));
        }
        if !(0.0..180.0).contains(&self.min_separation_deg) {
            return bad(format!("min_separation_deg {} outside [0, 180)", self.min_separation_deg));
        }
        for (name, v) in [
            ("region_noise", self.region_noise),
            ("patch_noise", self.patch_noise),
            ("template_noise", self.template_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        let (tr, va) = (self.train_fraction, self.val_fraction);
        if !(tr > 0.0 && va >= 0.0 && tr + va <= 1.0) {
            return bad(format!("split fractions train={tr}, val={va} are invalid"));
        }
        Ok(())
    }

    pub fn c_total(&self) -> usize {
        self.class_counts.iter().sum()
    }
}

pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal))
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    loop {
        let v = gaussian_vec(rng, n);
        let norm = v.dot(&v).sqrt();
        if norm > 1e-9 {
            return v / norm;
        }
    }
}

/// Unit class means whose pairwise angles all reach `min_deg`.
pub fn separated_means(rng: &mut ChaCha8Rng, count: usize, dim: usize, min_deg: f64) -> Result<Vec<Array1<f64>>> {
    let max_cos = min_deg.to_radians().cos();
    let mut means: Vec<Array1<f64>> = Vec::with_capacity(count);
    for c in 0..count {
        let mut accepted = None;
        for _ in 0..MAX_DRAWS_PER_CLASS {
            let v = unit_vec(rng, dim);
            if means.iter().all(|m| m.dot(&v) <= max_cos + 1e-12) {
                accepted = Some(v);
                break;
            }
        }
        match accepted {
            Some(v) => means.push(v),
            None => {
                return Err(Error::Config(format!(
                    "could not place class {c} of {count} at >= {min_deg} degrees from the others in {dim} dimensions"
                )))
            }
        }
    }
    Ok(means)
}

fn sentence_embeddings(
    rng: &mut ChaCha8Rng,
    base: &Array1<f64>,
    n: usize,
    noise: f64,
    kind: EmbeddingKind,
    owner: &str,
) -> Vec<SentenceEmbedding> {
    (0..n)
        .map(|template_id| SentenceEmbedding {
            vector: base + &(gaussian_vec(rng, base.len()) * noise),
            kind,
            owner: owner.to_string(),
            template_id,
        })
        .collect()
}

fn to_f32(v: &Array1<f64>) -> Array1<f32> {
    v.mapv(|x| x as f32)
}

/// Generates the dataset under `out_dir` (created if missing) and returns
/// the validated manifest.
pub fn synth_sequence(spec: &SyntheticSpec, seed: u64, out_dir: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c_total = spec.c_total();
    let means = separated_means(&mut rng, c_total, spec.d_vis, spec.min_separation_deg)?;

    let text_map = Array2::from_shape_fn((spec.d_vis, spec.c_text), |_| {
        rng.sample::<f64, _>(StandardNormal) / (spec.d_vis as f64).sqrt()
    });

    let class_sentences = spec.templates * spec.phrasings_per_template;
    let mut cls_protos = Vec::with_capacity(c_total);
    for (g, mu) in means.iter().enumerate() {
        let base = mu.dot(&text_map);
        let sentences = sentence_embeddings(
            &mut rng,
            &base,
            class_sentences,
            spec.template_noise,
            EmbeddingKind::Class,
            &format!("class_{g}"),
        );
        cls_protos.push(to_f32(&build_class_prototype(&sentences)?));
    }
    let mut neg_protos = Vec::new();
    for t in 0..spec.class_counts.len() {
        for n in 0..spec.negatives_per_task {
            let concept = unit_vec(&mut rng, spec.c_text);
            let sentences = sentence_embeddings(
                &mut rng,
                &concept,
                spec.templates,
                spec.template_noise,
                EmbeddingKind::Negative,
                &format!("t{t}_neg{n}"),
            );
            neg_protos.push(to_f32(&build_negative_prototype(&sentences)?));
        }
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_prototypes(
        &PrototypeFile {
            c_text: spec.c_text,
            cls: cls_protos,
            neg: neg_protos,
        },
        &out_dir.join(PROTOTYPE_FILE),
    )?;

    let kk = spec.k * spec.k;
    let n = spec.slides_per_class;
    let n_train = ((n as f64) * spec.train_fraction).round() as usize;
    let n_val = (((n as f64) * spec.val_fraction).round() as usize).min(n - n_train.min(n));
    let mut tasks = Vec::with_capacity(spec.class_counts.len());
    let mut offset = 0;
    for (t, &count) in spec.class_counts.iter().enumerate() {
        let dir_name = format!("task_{t}");
        let task_dir = out_dir.join(&dir_name);
        fs::create_dir_all(&task_dir).map_err(|e| Error::io(&task_dir, e))?;
        let mut slides = Vec::with_capacity(count * n);
        for c in 0..count {
            let mu = &means[offset + c];
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for (rank, &i) in order.iter().enumerate() {
                let split = if rank < n_train {
                    Split::Train
                } else if rank < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
                let id = format!("t{t}_c{c}_s{i:03}");
                let n_r = rng.random_range(spec.min_regions..=spec.max_regions);
                let mut regions = Array2::<f64>::zeros((n_r, spec.d_vis));
                let mut patches = Array3::<f32>::zeros((n_r, kk, spec.d_vis));
                for r in 0..n_r {
                    let region = mu + &(gaussian_vec(&mut rng, spec.d_vis) * spec.region_noise);
                    for j in 0..kk {
                        let patch = &region + &(gaussian_vec(&mut rng, spec.d_vis) * spec.patch_noise);
                        patches
                            .slice_mut(ndarray::s![r, j, ..])
                            .assign(&to_f32(&patch));
                    }
                    regions.row_mut(r).assign(&region);
                }
                let slide = SlideFeatures::new(
                    id.clone(),
                    t,
                    c,
                    offset + c,
                    regions.mapv(|x| x as f32),
                    patches,
                )?;
                let rel = PathBuf::from(&dir_name).join(format!("{id}.wsf"));
                write_slide_features(&slide, &out_dir.join(&rel))?;
                slides.push((i, c, SlideEntry {
                    id,
                    path: rel,
                    task_index: t,
                    class_in_task: c,
                    split,
                }));
            }
        }
        slides.sort_by_key(|(i, c, _)| (*c, *i));
        tasks.push(TaskEntry {
            name: dir_name,
            classes: (0..count).map(|c| format!("t{t}_class{c}")).collect(),
            negatives: (0..spec.negatives_per_task).map(|k| format!("t{t}_neg{k}")).collect(),
            slides: slides.into_iter().map(|(_, _, e)| e).collect(),
        });
        offset += count;
    }

    let file = ManifestFile {
        dims: FeatureDims {
            d_vis: spec.d_vis,
            k: spec.k,
            c_text: spec.c_text,
        },
        prototypes: PathBuf::from(PROTOTYPE_FILE),
        tasks,
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&file)?;
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    let manifest = Manifest::from_file(file, out_dir)?;
    Ok(SynthOutput {
        manifest_path,
        manifest,
    })
}
