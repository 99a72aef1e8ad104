//! Target-class conditioning: prompt construction, text encoding, and the
//! purifier that refines a 512-d text embedding into a 16-d representation.
//!
//! The text encoder is pluggable. The bundled stub derives a deterministic
//! unit-norm Gaussian vector from the prompt string, which keeps the whole
//! conditioning path testable without any external model; a real
//! vision-language encoder can be dropped in behind [`TextEncoder`].

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{
    leaky_relu, leaky_relu_backward, Initializer, Linear, Param, ParamRefMut, Tensor2,
};
use crate::rng;

/// Width of the raw text embedding fed to the purifier and cross-attention.
pub const TEXT_EMBED_DIM: usize = 512;
/// Width of the purified embedding used for channel-wise fusion.
pub const PURIFIED_DIM: usize = 16;
/// Prompt template applied to class names unless overridden.
pub const DEFAULT_PROMPT_TEMPLATE: &str = "a photo of a {class}";

const CLASS_PLACEHOLDER: &str = "{class}";

/// A target class together with its rendered prompt and text embedding.
#[derive(Debug, Clone)]
pub struct TextCondition {
    pub class_name: String,
    pub prompt: String,
    /// Raw embedding, length [`TEXT_EMBED_DIM`].
    pub embedding: Array1<f64>,
}

/// Substitute `class_name` into the single `{class}` placeholder of `template`.
pub fn build_prompt(class_name: &str, template: &str) -> Result<String> {
    if class_name.is_empty() {
        return Err(Error::Argument("class name must be nonempty".into()));
    }
    let occurrences = template.matches(CLASS_PLACEHOLDER).count();
    if occurrences != 1 {
        return Err(Error::Argument(format!(
            "prompt template must contain `{CLASS_PLACEHOLDER}` exactly once, found {occurrences}"
        )));
    }
    Ok(template.replace(CLASS_PLACEHOLDER, class_name))
}

/// Abstract text encoder producing 512-d embeddings.
pub trait TextEncoder: Send + Sync {
    fn encode(&self, prompt: &str) -> Result<Array1<f64>>;
    fn name(&self) -> &str;
}

/// Deterministic stand-in encoder: seeded-hash Gaussian vector, l2-normalized.
#[derive(Debug, Clone)]
pub struct StubTextEncoder {
    seed: u64,
}

impl StubTextEncoder {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl TextEncoder for StubTextEncoder {
    fn encode(&self, prompt: &str) -> Result<Array1<f64>> {
        let mut stream = rng::stream(self.seed, prompt, 0);
        let mut v = Array1::from_shape_simple_fn(TEXT_EMBED_DIM, || {
            stream.sample::<f64, _>(StandardNormal)
        });
        let norm = v.dot(&v).sqrt();
        if norm < 1e-12 {
            return Err(Error::Encoder("degenerate stub embedding".into()));
        }
        v /= norm;
        Ok(v)
    }

    fn name(&self) -> &str {
        "stub"
    }
}

/// Encoder backed by a JSON table `{prompt: [512 floats]}`, e.g. embeddings
/// exported from a real vision-language model.
#[derive(Debug, Clone)]
pub struct TableTextEncoder {
    table: std::collections::BTreeMap<String, Vec<f64>>,
    source: String,
}

impl TableTextEncoder {
    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let table: std::collections::BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)
            .map_err(|e| Error::Encoder(format!("bad embedding table {}: {e}", path.display())))?;
        for (prompt, v) in &table {
            if v.len() != TEXT_EMBED_DIM {
                return Err(Error::Encoder(format!(
                    "embedding for {prompt:?} has length {}, expected {TEXT_EMBED_DIM}",
                    v.len()
                )));
            }
        }
        Ok(Self {
            table,
            source: path.display().to_string(),
        })
    }
}

impl TextEncoder for TableTextEncoder {
    fn encode(&self, prompt: &str) -> Result<Array1<f64>> {
        self.table
            .get(prompt)
            .map(|v| Array1::from_vec(v.clone()))
            .ok_or_else(|| {
                Error::Encoder(format!("prompt {prompt:?} not present in {}", self.source))
            })
    }

    fn name(&self) -> &str {
        "table"
    }
}

/// Build the [`TextCondition`] for one class name.
pub fn make_condition(
    class_name: &str,
    template: &str,
    encoder: &dyn TextEncoder,
) -> Result<TextCondition> {
    let prompt = build_prompt(class_name, template)?;
    let embedding = encoder.encode(&prompt)?;
    if embedding.len() != TEXT_EMBED_DIM {
        return Err(Error::Encoder(format!(
            "encoder `{}` returned {} dims, expected {TEXT_EMBED_DIM}",
            encoder.name(),
            embedding.len()
        )));
    }
    Ok(TextCondition {
        class_name: class_name.to_string(),
        prompt,
        embedding,
    })
}

/// One-hot conditioning used by the label-conditioned ablation: the standard
/// basis vector for `index`, zero-padded to the 512-d embedding width.
pub fn one_hot_condition(
    class_name: &str,
    index: usize,
    num_classes: usize,
) -> Result<TextCondition> {
    if num_classes > TEXT_EMBED_DIM {
        return Err(Error::Argument(format!(
            "one-hot conditioning supports at most {TEXT_EMBED_DIM} classes, got {num_classes}"
        )));
    }
    if index >= num_classes {
        return Err(Error::Argument(format!(
            "class index {index} out of range for {num_classes} classes"
        )));
    }
    let mut embedding = Array1::zeros(TEXT_EMBED_DIM);
    embedding[index] = 1.0;
    Ok(TextCondition {
        class_name: class_name.to_string(),
        prompt: class_name.to_string(),
        embedding,
    })
}

/// Power-iteration state for one spectrally normalized weight.
#[derive(Debug, Clone)]
pub struct SpectralState {
    /// Output-side vector, length = weight columns.
    pub u: Array1<f64>,
    /// Input-side vector, length = weight rows.
    pub v: Array1<f64>,
}

impl SpectralState {
    pub fn new(in_f: usize, out_f: usize, init: &mut Initializer) -> Self {
        Self {
            u: init.unit_vector(out_f),
            v: init.unit_vector(in_f),
        }
    }
}

const SIGMA_DEGENERATE: f64 = 1e-12;

/// Divide `weight` by the power-iteration estimate of its top singular value,
/// updating the iteration state. A zero weight matrix is returned unchanged
/// (the estimate is treated as 1).
pub fn spectral_normalize(
    weight: &Array2<f64>,
    state: &mut SpectralState,
    iters: usize,
) -> Result<Array2<f64>> {
    if iters < 1 {
        return Err(Error::Argument("spectral_normalize requires iters >= 1".into()));
    }
    for _ in 0..iters {
        let wv = weight.dot(&state.u);
        let n = wv.dot(&wv).sqrt();
        if n <= SIGMA_DEGENERATE {
            return Ok(weight.clone());
        }
        state.v = wv / n;
        let wu = weight.t().dot(&state.v);
        let n = wu.dot(&wu).sqrt();
        if n <= SIGMA_DEGENERATE {
            return Ok(weight.clone());
        }
        state.u = wu / n;
    }
    let sigma = sigma_estimate(weight, state);
    if sigma <= SIGMA_DEGENERATE {
        return Ok(weight.clone());
    }
    Ok(weight / sigma)
}

/// Top-singular-value estimate from the current state, without updating it.
pub fn sigma_estimate(weight: &Array2<f64>, state: &SpectralState) -> f64 {
    state.v.dot(&weight.dot(&state.u))
}

/// Purified embedding, one 16-d row per batch element.
#[derive(Debug, Clone)]
pub struct PurifiedEmbedding {
    pub values: Tensor2,
}

impl PurifiedEmbedding {
    pub fn new(values: Tensor2) -> Result<Self> {
        if values.ncols() != PURIFIED_DIM {
            return Err(Error::Shape(format!(
                "purified embedding must have width {PURIFIED_DIM}, got {}",
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("purified embedding contains non-finite values".into()));
        }
        Ok(Self { values })
    }
}

/// One purifier block: affine layer with a spectrally normalized weight.
#[derive(Debug, Clone)]
pub struct PurifierBlock {
    pub linear: Linear,
    pub sn: SpectralState,
}

/// The purifier: a chain of (spectrally normalized affine, leaky-ReLU) blocks
/// reducing 512 -> ... -> 16.
#[derive(Debug, Clone)]
pub struct PurifierParams {
    pub blocks: Vec<PurifierBlock>,
    pub leaky_slope: f64,
}

/// Default block widths.
pub const PURIFIER_WIDTHS: [usize; 4] = [TEXT_EMBED_DIM, 128, 32, PURIFIED_DIM];

pub struct PurifyCache {
    // per block: input, pre-activation, normalized weight, sigma, (u, v) snapshot
    steps: Vec<BlockCache>,
}

struct BlockCache {
    x: Tensor2,
    z: Tensor2,
    w_bar: Array2<f64>,
    sigma: f64,
    u: Array1<f64>,
    v: Array1<f64>,
}

impl PurifierParams {
    pub fn new(widths: &[usize], leaky_slope: f64, init: &mut Initializer) -> Self {
        let mut blocks = Vec::new();
        for win in widths.windows(2) {
            let (i, o) = (win[0], win[1]);
            blocks.push(PurifierBlock {
                linear: Linear {
                    weight: Param::new(init.kaiming_linear(i, o, leaky_slope)),
                    bias: Param::new(Array1::zeros(o)),
                },
                sn: SpectralState::new(i, o, init),
            });
        }
        Self {
            blocks,
            leaky_slope,
        }
    }

    pub fn default_arch(init: &mut Initializer) -> Self {
        Self::new(&PURIFIER_WIDTHS, 0.2, init)
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].linear.weight.value.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.blocks.last().unwrap().linear.weight.value.ncols()
    }

    fn check_input(&self, e: &Tensor2) -> Result<()> {
        if e.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "purifier expects input width {}, got {}",
                self.input_dim(),
                e.ncols()
            )));
        }
        Ok(())
    }

    /// Training-mode forward: one power iteration per block, caching for
    /// [`PurifierParams::backward`].
    pub fn forward_train(&mut self, e: &Tensor2) -> Result<(Tensor2, PurifyCache)> {
        self.check_input(e)?;
        let slope = self.leaky_slope;
        let mut x = e.clone();
        let mut steps = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let w_bar = spectral_normalize(&block.linear.weight.value, &mut block.sn, 1)?;
            let sigma = sigma_estimate(&block.linear.weight.value, &block.sn);
            let z = x.dot(&w_bar) + &block.linear.bias.value;
            let y = leaky_relu(&z, slope);
            steps.push(BlockCache {
                x,
                z,
                w_bar,
                sigma,
                u: block.sn.u.clone(),
                v: block.sn.v.clone(),
            });
            x = y;
        }
        Ok((x, PurifyCache { steps }))
    }

    /// Frozen forward: the stored power-iteration state supplies sigma.
    pub fn forward_eval(&self, e: &Tensor2) -> Result<Tensor2> {
        self.check_input(e)?;
        let mut x = e.clone();
        for block in &self.blocks {
            let w = &block.linear.weight.value;
            let sigma = sigma_estimate(w, &block.sn);
            let w_bar = if sigma.abs() <= SIGMA_DEGENERATE {
                w.clone()
            } else {
                w / sigma
            };
            let z = x.dot(&w_bar) + &block.linear.bias.value;
            x = leaky_relu(&z, self.leaky_slope);
        }
        Ok(x)
    }

    /// Accumulates parameter gradients; returns the input gradient.
    ///
    /// Sigma is differentiated as `v^T W u` with the iteration vectors held
    /// fixed, matching the frozen forward the cache was built from.
    pub fn backward(&mut self, cache: &PurifyCache, dy: &Tensor2) -> Tensor2 {
        let slope = self.leaky_slope;
        let mut grad = dy.clone();
        for (block, step) in self.blocks.iter_mut().zip(cache.steps.iter()).rev() {
            let dz = leaky_relu_backward(&step.z, &grad, slope);
            let d_wbar = step.x.t().dot(&dz);
            block.linear.bias.grad += &dz.sum_axis(ndarray::Axis(0));
            if step.sigma.abs() > SIGMA_DEGENERATE {
                let inner = (&d_wbar * &block.linear.weight.value).sum();
                let coef = inner / (step.sigma * step.sigma);
                let mut dw = d_wbar.clone() / step.sigma;
                for (i, vi) in step.v.iter().enumerate() {
                    for (j, uj) in step.u.iter().enumerate() {
                        dw[(i, j)] -= coef * vi * uj;
                    }
                }
                block.linear.weight.grad += &dw;
            } else {
                block.linear.weight.grad += &d_wbar;
            }
            grad = dz.dot(&step.w_bar.t());
        }
        grad
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.linear.weight.len() + b.linear.bias.len())
            .sum()
    }

    pub(crate) fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRefMut<'a>>) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            out.push(block.linear.weight.as_ref_mut(format!("{prefix}.block{i}.weight")));
            out.push(block.linear.bias.as_ref_mut(format!("{prefix}.block{i}.bias")));
        }
    }

    pub(crate) fn named_tensors<'a>(
        &'a self,
        prefix: &str,
        out: &mut Vec<(String, ndarray::ArrayViewD<'a, f64>)>,
    ) {
        for (i, block) in self.blocks.iter().enumerate() {
            out.push((
                format!("{prefix}.block{i}.weight"),
                block.linear.weight.value.view().into_dyn(),
            ));
            out.push((
                format!("{prefix}.block{i}.bias"),
                block.linear.bias.value.view().into_dyn(),
            ));
            out.push((format!("{prefix}.block{i}.sn_u"), block.sn.u.view().into_dyn()));
            out.push((format!("{prefix}.block{i}.sn_v"), block.sn.v.view().into_dyn()));
        }
    }

    pub(crate) fn named_tensors_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ndarray::ArrayViewMutD<'a, f64>)>,
    ) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            out.push((
                format!("{prefix}.block{i}.weight"),
                block.linear.weight.value.view_mut().into_dyn(),
            ));
            out.push((
                format!("{prefix}.block{i}.bias"),
                block.linear.bias.value.view_mut().into_dyn(),
            ));
            out.push((
                format!("{prefix}.block{i}.sn_u"),
                block.sn.u.view_mut().into_dyn(),
            ));
            out.push((
                format!("{prefix}.block{i}.sn_v"),
                block.sn.v.view_mut().into_dyn(),
            ));
        }
    }
}

/// Refine raw embeddings `(B, 512)` into purified `(B, 16)` rows.
///
/// This is the frozen (evaluation) path; training uses
/// [`PurifierParams::forward_train`] so power iteration can advance.
pub fn purify(e: &Tensor2, params: &PurifierParams) -> Result<PurifiedEmbedding> {
    PurifiedEmbedding::new(params.forward_eval(e)?)
}

/// Stack condition embeddings into the `(B, 512)` matrix consumed by the
/// generator.
pub fn stack_embeddings(conditions: &[&TextCondition]) -> Result<Tensor2> {
    if conditions.is_empty() {
        return Err(Error::Argument("need at least one condition".into()));
    }
    let mut out = Array2::<f64>::zeros((conditions.len(), TEXT_EMBED_DIM));
    for (i, c) in conditions.iter().enumerate() {
        if c.embedding.len() != TEXT_EMBED_DIM {
            return Err(Error::Shape(format!(
                "condition {:?} has embedding length {}",
                c.class_name,
                c.embedding.len()
            )));
        }
        out.row_mut(i).assign(&c.embedding);
    }
    Ok(out)
}
