//! Two-level gated-attention aggregator, alignment map and linear head.
//!
//! Per region `i` with patch features `x_j` (`k*k` of them) and region
//! feature `r_i`:
//!
//! ```text
//! u_j     = tanh(x_j Wp + bp)
//! a       = softmax_j( w . (tanh(u_j V) * sigmoid(u_j U)) )
//! token_i = sum_j a_j u_j + tanh(r_i Wr + br)
//! z_i     = tanh(token_i Wm + bm)
//! ```
//!
//! The slide embedding `h` is a second gated-attention pool over `{z_i}`,
//! `logits = h H + b`, and the aligned region features are the rows of
//! `z G` normalized to unit length. Weights are stored `[fan_in x fan_out]`
//! and applied to row vectors.
//!
//! Gradients are derived by hand for exactly this architecture; see
//! [`backward`].

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Row norms below this are treated as zero when normalizing aligned features.
const NORM_FLOOR: f64 = 1e-12;

/// One slide: a bag of region features plus a `k*k` grid of patch features
/// per region. Features are stored at file precision (`f32`).
#[derive(Clone, Debug, PartialEq)]
pub struct SlideFeatures {
    pub slide_id: String,
    pub task_index: usize,
    pub class_in_task: usize,
    pub global_class: usize,
    /// `[N_r x d_vis]`
    pub regions: Array2<f32>,
    /// `[N_r x k*k x d_vis]`
    pub patches: Array3<f32>,
}

impl SlideFeatures {
    pub fn new(
        slide_id: impl Into<String>,
        task_index: usize,
        class_in_task: usize,
        global_class: usize,
        regions: Array2<f32>,
        patches: Array3<f32>,
    ) -> Result<Self> {
        let s = SlideFeatures {
            slide_id: slide_id.into(),
            task_index,
            class_in_task,
            global_class,
            regions,
            patches,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn n_regions(&self) -> usize {
        self.regions.nrows()
    }

    pub fn d_vis(&self) -> usize {
        self.regions.ncols()
    }

    pub fn patches_per_region(&self) -> usize {
        self.patches.shape()[1]
    }

    /// Side length `k` of the patch grid.
    pub fn k(&self) -> usize {
        let kk = self.patches_per_region();
        let k = (kk as f64).sqrt().round() as usize;
        debug_assert_eq!(k * k, kk);
        k
    }

    pub fn validate(&self) -> Result<()> {
        let (nr, dv) = self.regions.dim();
        let (pnr, kk, pdv) = self.patches.dim();
        if nr == 0 || dv == 0 || kk == 0 {
            return Err(Error::Dimension(format!(
                "slide {}: N_r, k and d_vis must be >= 1 (got N_r={nr}, k*k={kk}, d_vis={dv})",
                self.slide_id
            )));
        }
        let k = (kk as f64).sqrt().round() as usize;
        if k * k != kk {
            return Err(Error::Dimension(format!(
                "slide {}: {kk} patches per region is not a square grid",
                self.slide_id
            )));
        }
        if pnr != nr || pdv != dv {
            return Err(Error::Dimension(format!(
                "slide {}: patch block {:?} does not match regions [{nr} x {dv}]",
                self.slide_id,
                self.patches.dim()
            )));
        }
        if !self.regions.iter().chain(self.patches.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("slide {}", self.slide_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_vis: usize,
    pub d_model: usize,
    pub d_attn: usize,
    pub c_text: usize,
    pub c_total: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_vis", self.d_vis),
            ("d_model", self.d_model),
            ("d_attn", self.d_attn),
            ("c_text", self.c_text),
            ("c_total", self.c_total),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Dimension(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[fan_in x fan_out]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

/// Gated attention scorer: `score(x) = w . (tanh(x V) * sigmoid(x U))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatedAttention {
    pub v: Array2<f64>,
    pub u: Array2<f64>,
    pub w: Array1<f64>,
}

impl GatedAttention {
    fn zeros(d_in: usize, d_attn: usize) -> Self {
        GatedAttention {
            v: Array2::zeros((d_in, d_attn)),
            u: Array2::zeros((d_in, d_attn)),
            w: Array1::zeros(d_attn),
        }
    }
}

/// The unified model: aggregator, alignment network `g` and classification
/// head. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub patch_proj: Linear,
    pub patch_attn: GatedAttention,
    pub region_proj: Linear,
    pub region_mlp: Linear,
    pub slide_attn: GatedAttention,
    /// `[d_model x C_text]`
    pub align_g: Array2<f64>,
    /// `[d_model x C_total]` plus bias `[C_total]`
    pub head: Linear,
}

pub type ParamGrads = ModelParams;

fn uniform_fill(rng: &mut ChaCha8Rng, a: &mut Array2<f64>) {
    let scale = 1.0 / (a.nrows() as f64).sqrt();
    a.mapv_inplace(|_| rng.random_range(-scale..scale));
}

fn uniform_fill_vec(rng: &mut ChaCha8Rng, a: &mut Array1<f64>, fan_in: usize) {
    let scale = 1.0 / (fan_in as f64).sqrt();
    a.mapv_inplace(|_| rng.random_range(-scale..scale));
}

/// Deterministic initialization: weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
/// biases zero.
pub fn init_params(dims: ModelDims, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::zeros(dims);
    uniform_fill(&mut rng, &mut p.patch_proj.weight);
    uniform_fill(&mut rng, &mut p.patch_attn.v);
    uniform_fill(&mut rng, &mut p.patch_attn.u);
    uniform_fill_vec(&mut rng, &mut p.patch_attn.w, dims.d_attn);
    uniform_fill(&mut rng, &mut p.region_proj.weight);
    uniform_fill(&mut rng, &mut p.region_mlp.weight);
    uniform_fill(&mut rng, &mut p.slide_attn.v);
    uniform_fill(&mut rng, &mut p.slide_attn.u);
    uniform_fill_vec(&mut rng, &mut p.slide_attn.w, dims.d_attn);
    uniform_fill(&mut rng, &mut p.align_g);
    uniform_fill(&mut rng, &mut p.head.weight);
    Ok(p)
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let ModelDims {
            d_vis,
            d_model,
            d_attn,
            c_text,
            c_total,
        } = dims;
        ModelParams {
            dims,
            patch_proj: Linear::zeros(d_vis, d_model),
            patch_attn: GatedAttention::zeros(d_model, d_attn),
            region_proj: Linear::zeros(d_vis, d_model),
            region_mlp: Linear::zeros(d_model, d_model),
            slide_attn: GatedAttention::zeros(d_model, d_attn),
            align_g: Array2::zeros((d_model, c_text)),
            head: Linear::zeros(d_model, c_total),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims)
    }

    /// Every tensor as a flat slice, in a fixed order.
    pub fn tensors(&self) -> [&[f64]; 15] {
        [
            slice(self.patch_proj.weight.as_slice()),
            slice(self.patch_proj.bias.as_slice()),
            slice(self.patch_attn.v.as_slice()),
            slice(self.patch_attn.u.as_slice()),
            slice(self.patch_attn.w.as_slice()),
            slice(self.region_proj.weight.as_slice()),
            slice(self.region_proj.bias.as_slice()),
            slice(self.region_mlp.weight.as_slice()),
            slice(self.region_mlp.bias.as_slice()),
            slice(self.slide_attn.v.as_slice()),
            slice(self.slide_attn.u.as_slice()),
            slice(self.slide_attn.w.as_slice()),
            slice(self.align_g.as_slice()),
            slice(self.head.weight.as_slice()),
            slice(self.head.bias.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 15] {
        [
            slice_mut(self.patch_proj.weight.as_slice_mut()),
            slice_mut(self.patch_proj.bias.as_slice_mut()),
            slice_mut(self.patch_attn.v.as_slice_mut()),
            slice_mut(self.patch_attn.u.as_slice_mut()),
            slice_mut(self.patch_attn.w.as_slice_mut()),
            slice_mut(self.region_proj.weight.as_slice_mut()),
            slice_mut(self.region_proj.bias.as_slice_mut()),
            slice_mut(self.region_mlp.weight.as_slice_mut()),
            slice_mut(self.region_mlp.bias.as_slice_mut()),
            slice_mut(self.slide_attn.v.as_slice_mut()),
            slice_mut(self.slide_attn.u.as_slice_mut()),
            slice_mut(self.slide_attn.w.as_slice_mut()),
            slice_mut(self.align_g.as_slice_mut()),
            slice_mut(self.head.weight.as_slice_mut()),
            slice_mut(self.head.bias.as_slice_mut()),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    /// SHA-256 over the little-endian bytes of every tensor, in
    /// [`tensors`](Self::tensors) order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for t in self.tensors() {
            for v in t {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn slice<T>(s: Option<&[T]>) -> &[T] {
    s.expect("parameter tensors are always in standard layout")
}

fn slice_mut<T>(s: Option<&mut [T]>) -> &mut [T] {
    s.expect("parameter tensors are always in standard layout")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(x: ArrayView1<f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = x.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

/// Cached intermediates of one gated-attention pool.
#[derive(Clone, Debug)]
struct AttnCache {
    tanh_branch: Array2<f64>,
    gate: Array2<f64>,
    weights: Array1<f64>,
}

fn gated_attention_forward(attn: &GatedAttention, x: &ArrayView2<f64>) -> AttnCache {
    let tanh_branch = x.dot(&attn.v).mapv(f64::tanh);
    let gate = x.dot(&attn.u).mapv(sigmoid);
    let scores = (&tanh_branch * &gate).dot(&attn.w);
    let weights = softmax(scores.view());
    AttnCache {
        tanh_branch,
        gate,
        weights,
    }
}

/// Backpropagates `d_weights` (gradient w.r.t. the attention weights) into
/// the scorer parameters; returns the gradient w.r.t. the inputs `x`.
fn gated_attention_backward(
    attn: &GatedAttention,
    x: &ArrayView2<f64>,
    cache: &AttnCache,
    d_weights: &Array1<f64>,
    grads: &mut GatedAttention,
) -> Array2<f64> {
    let a = &cache.weights;
    let mean = a.dot(d_weights);
    let d_scores = a * &(d_weights - mean);
    let product = &cache.tanh_branch * &cache.gate;
    grads.w += &product.t().dot(&d_scores);

    let d_scores_col = d_scores.insert_axis(Axis(1));
    let w_row = attn.w.view().insert_axis(Axis(0));
    let d_pre_tanh = &d_scores_col * &w_row * &cache.gate * cache.tanh_branch.mapv(|t| 1.0 - t * t);
    let d_pre_gate = &d_scores_col * &w_row * &cache.tanh_branch * cache.gate.mapv(|s| s * (1.0 - s));

    grads.v += &x.t().dot(&d_pre_tanh);
    grads.u += &x.t().dot(&d_pre_gate);
    d_pre_tanh.dot(&attn.v.t()) + d_pre_gate.dot(&attn.u.t())
}

#[derive(Clone, Debug)]
struct RegionCache {
    patch_tokens: Array2<f64>,
    attn: AttnCache,
}

/// Activations of one forward pass. The public fields are the quantities
/// the objective terms consume; the rest is cached for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub patch_attention: Vec<Array1<f64>>,
    /// `[N_r x d_model]`
    pub region_features_z: Array2<f64>,
    /// `[N_r x C_text]`, unit rows
    pub aligned_gz: Array2<f64>,
    pub slide_attention: Array1<f64>,
    pub slide_embedding: Array1<f64>,
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
    dims: ModelDims,
    regions: Vec<RegionCache>,
    region_branch: Array2<f64>,
    tokens: Array2<f64>,
    slide_cache: AttnCache,
    aligned_norms: Array1<f64>,
}

impl ForwardTrace {
    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn n_regions(&self) -> usize {
        self.region_features_z.nrows()
    }

    pub fn predicted_class(&self) -> usize {
        argmax(self.logits.view())
    }
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(x: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn check_slide(params: &ModelParams, s: &SlideFeatures) -> Result<()> {
    s.validate()?;
    if s.d_vis() != params.dims.d_vis {
        return Err(Error::Dimension(format!(
            "slide {} has d_vis={}, model expects {}",
            s.slide_id,
            s.d_vis(),
            params.dims.d_vis
        )));
    }
    Ok(())
}

pub fn forward(params: &ModelParams, s: &SlideFeatures) -> Result<ForwardTrace> {
    check_slide(params, s)?;
    let n_r = s.n_regions();

    let mut regions = Vec::with_capacity(n_r);
    let mut pooled = Array2::<f64>::zeros((n_r, params.dims.d_model));
    for i in 0..n_r {
        let x = s.patches.index_axis(Axis(0), i).mapv(f64::from);
        let patch_tokens = params.patch_proj.apply(&x.view()).mapv(f64::tanh);
        let attn = gated_attention_forward(&params.patch_attn, &patch_tokens.view());
        pooled.row_mut(i).assign(&attn.weights.dot(&patch_tokens));
        regions.push(RegionCache { patch_tokens, attn });
    }

    let r = s.regions.mapv(f64::from);
    let region_branch = params.region_proj.apply(&r.view()).mapv(f64::tanh);
    let tokens = pooled + &region_branch;
    let z = params.region_mlp.apply(&tokens.view()).mapv(f64::tanh);

    let slide_cache = gated_attention_forward(&params.slide_attn, &z.view());
    let h = slide_cache.weights.dot(&z);
    let logits = h.dot(&params.head.weight) + &params.head.bias;
    let probs = softmax(logits.view());

    let raw_aligned = z.dot(&params.align_g);
    let aligned_norms = raw_aligned
        .rows()
        .into_iter()
        .map(|row| row.dot(&row).sqrt().max(NORM_FLOOR))
        .collect::<Array1<f64>>();
    let aligned_gz = &raw_aligned / &aligned_norms.view().insert_axis(Axis(1));

    Ok(ForwardTrace {
        patch_attention: regions.iter().map(|c| c.attn.weights.clone()).collect(),
        region_features_z: z,
        aligned_gz,
        slide_attention: slide_cache.weights.clone(),
        slide_embedding: h,
        logits,
        probs,
        dims: params.dims,
        regions,
        region_branch,
        tokens,
        slide_cache,
        aligned_norms,
    })
}

/// Gradient of a scalar objective with respect to the outputs of a
/// [`ForwardTrace`]. Each field is added on top of what flows back from the
/// later ones (`logits` into `slide_embedding`, `aligned_gz` into
/// `region_features_z`).
#[derive(Clone, Debug)]
pub struct TraceGrad {
    pub logits: Array1<f64>,
    pub slide_embedding: Array1<f64>,
    pub aligned_gz: Array2<f64>,
    pub region_features_z: Array2<f64>,
}

impl TraceGrad {
    pub fn zeros(trace: &ForwardTrace) -> Self {
        let n_r = trace.n_regions();
        TraceGrad {
            logits: Array1::zeros(trace.dims.c_total),
            slide_embedding: Array1::zeros(trace.dims.d_model),
            aligned_gz: Array2::zeros((n_r, trace.dims.c_text)),
            region_features_z: Array2::zeros((n_r, trace.dims.d_model)),
        }
    }
}

/// Accumulates into `grads` the parameter gradient of the objective whose
/// output gradient is `seed`.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    s: &SlideFeatures,
    seed: &TraceGrad,
    grads: &mut ParamGrads,
) -> Result<()> {
    if trace.dims != params.dims || grads.dims != params.dims {
        return Err(Error::Dimension(
            "trace or gradient buffer was produced for different model dims".into(),
        ));
    }
    if trace.n_regions() != s.n_regions() || trace.regions[0].patch_tokens.nrows() != s.patches_per_region() {
        return Err(Error::Dimension(format!(
            "trace does not belong to slide {}",
            s.slide_id
        )));
    }
    let z = &trace.region_features_z;
    let h = &trace.slide_embedding;

    // Head.
    grads.head.weight += &outer(h.view(), seed.logits.view());
    grads.head.bias += &seed.logits;
    let d_h = params.head.weight.dot(&seed.logits) + &seed.slide_embedding;

    // Alignment map with row normalization.
    let gz = &trace.aligned_gz;
    let radial = (&seed.aligned_gz * gz).sum_axis(Axis(1)).insert_axis(Axis(1));
    let d_raw = (&seed.aligned_gz - gz * &radial) / trace.aligned_norms.view().insert_axis(Axis(1));
    grads.align_g += &z.t().dot(&d_raw);
    let mut d_z = d_raw.dot(&params.align_g.t()) + &seed.region_features_z;

    // Slide-level attention pool.
    let beta = &trace.slide_cache.weights;
    d_z += &outer(beta.view(), d_h.view());
    let d_beta = z.dot(&d_h);
    d_z += &gated_attention_backward(
        &params.slide_attn,
        &z.view(),
        &trace.slide_cache,
        &d_beta,
        &mut grads.slide_attn,
    );

    // Region MLP.
    let d_pre_z = &d_z * &z.mapv(|v| 1.0 - v * v);
    grads.region_mlp.weight += &trace.tokens.t().dot(&d_pre_z);
    grads.region_mlp.bias += &d_pre_z.sum_axis(Axis(0));
    let d_tokens = d_pre_z.dot(&params.region_mlp.weight.t());

    // Region projection branch.
    let q = &trace.region_branch;
    let d_pre_q = &d_tokens * &q.mapv(|v| 1.0 - v * v);
    let r = s.regions.mapv(f64::from);
    grads.region_proj.weight += &r.t().dot(&d_pre_q);
    grads.region_proj.bias += &d_pre_q.sum_axis(Axis(0));

    // Patch branch, region by region.
    for (i, cache) in trace.regions.iter().enumerate() {
        let d_pooled = d_tokens.row(i);
        let u = &cache.patch_tokens;
        let a = &cache.attn.weights;
        let mut d_u = outer(a.view(), d_pooled);
        let d_a = u.dot(&d_pooled);
        d_u += &gated_attention_backward(
            &params.patch_attn,
            &u.view(),
            &cache.attn,
            &d_a,
            &mut grads.patch_attn,
        );
        let d_pre_u = &d_u * &u.mapv(|v| 1.0 - v * v);
        let x = s.patches.index_axis(Axis(0), i).mapv(f64::from);
        grads.patch_proj.weight += &x.t().dot(&d_pre_u);
        grads.patch_proj.bias += &d_pre_u.sum_axis(Axis(0));
    }
    Ok(())
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    &a2 * &b2
}

/// Derivative of the pre-softmax logit `class_index` with respect to the head
/// weights, restricted to column `class_index`. Because the head is linear,
/// this is the slide embedding; every other column is identically zero.
pub fn logit_head_gradient(trace: &ForwardTrace, class_index: usize) -> Result<Array1<f64>> {
    if class_index >= trace.dims.c_total {
        return Err(Error::IndexOutOfRange {
            index: class_index,
            len: trace.dims.c_total,
        });
    }
    Ok(trace.slide_embedding.clone())
}
