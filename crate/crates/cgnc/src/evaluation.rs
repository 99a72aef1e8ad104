//! Targeted-transferability evaluation: black-box victims, preprocessing
//! defenses, attack success rates, ablation variants, and report emission.
//!
//! Victims are consumed through the forward-only [`Classifier`] interface, so
//! no gradient ever flows to them. Defenses are applied to the adversarial
//! image only (the attacker does not adapt).

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::classifier::{argmax, Classifier};
use crate::conditioning::TextEncoder;
use crate::data::{Dataset, ImageBatch};
use crate::error::{Error, Result};
use crate::generator::{
    generate, make_adversarial, ConditionMode, GeneratorHyper, GeneratorState, PerturbationBatch,
};
use crate::nn::Tensor4;
use crate::training::{Checkpoint, TargetClassSet};

/// Input-preprocessing defense applied to adversarial images before the
/// victim sees them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DefenseSpec {
    None,
    Gaussian {
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    Median {
        #[serde(default = "default_kernel")]
        kernel: usize,
    },
    Average {
        #[serde(default = "default_kernel")]
        kernel: usize,
    },
    Jpeg { quality: u8 },
}

fn default_kernel() -> usize {
    3
}

fn default_sigma() -> f64 {
    1.0
}

impl DefenseSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DefenseSpec::None => Ok(()),
            DefenseSpec::Gaussian { kernel, sigma } => {
                check_kernel(*kernel)?;
                if !(*sigma > 0.0) {
                    return Err(Error::Argument("gaussian sigma must be positive".into()));
                }
                Ok(())
            }
            DefenseSpec::Median { kernel } | DefenseSpec::Average { kernel } => check_kernel(*kernel),
            DefenseSpec::Jpeg { quality } => {
                if !(1..=100).contains(quality) {
                    return Err(Error::Argument(format!(
                        "jpeg quality {quality} must lie in [1, 100]"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn kind_label(&self) -> &'static str {
        match self {
            DefenseSpec::None => "none",
            DefenseSpec::Gaussian { .. } => "gaussian",
            DefenseSpec::Median { .. } => "median",
            DefenseSpec::Average { .. } => "average",
            DefenseSpec::Jpeg { .. } => "jpeg",
        }
    }

    pub fn params_label(&self) -> String {
        match self {
            DefenseSpec::None => String::new(),
            DefenseSpec::Gaussian { kernel, sigma } => format!("k={kernel},sigma={sigma}"),
            DefenseSpec::Median { kernel } | DefenseSpec::Average { kernel } => {
                format!("k={kernel}")
            }
            DefenseSpec::Jpeg { quality } => format!("Q={quality}"),
        }
    }

    pub fn apply(&self, x: &ImageBatch) -> Result<ImageBatch> {
        let pixels = match self {
            DefenseSpec::None => x.pixels.clone(),
            DefenseSpec::Gaussian { kernel, sigma } => gaussian_smooth_pixels(&x.pixels, *kernel, *sigma)?,
            DefenseSpec::Median { kernel } => median_smooth_pixels(&x.pixels, *kernel)?,
            DefenseSpec::Average { kernel } => average_smooth_pixels(&x.pixels, *kernel)?,
            DefenseSpec::Jpeg { quality } => jpeg_roundtrip_pixels(&x.pixels, *quality)?,
        };
        ImageBatch::new(pixels, x.ids.clone(), x.domain_tag.clone())
    }
}

fn check_kernel(k: usize) -> Result<()> {
    if k < 3 || k % 2 == 0 {
        return Err(Error::Argument(format!("kernel size {k} must be odd and >= 3")));
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Result<Vec<f64>> {
    check_kernel(k)?;
    if !(sigma > 0.0) {
        return Err(Error::Argument("sigma must be positive".into()));
    }
    let r = (k / 2) as f64;
    let mut w: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    Ok(w)
}

/// Reflect-101 index mirroring.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // for kernel radii well below the image size one round suffices
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i.clamp(0, n - 1) as usize
}

fn separable_filter(x: &Tensor4, taps: &[f64]) -> Tensor4 {
    let (b, c, h, w) = x.dim();
    let r = taps.len() / 2;
    let mut tmp = Tensor4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for (t, &wt) in taps.iter().enumerate() {
                        let jj = reflect(j as isize + t as isize - r as isize, w);
                        acc += wt * x[(bi, ci, i, jj)];
                    }
                    tmp[(bi, ci, i, j)] = acc;
                }
            }
        }
    }
    let mut out = Tensor4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for (t, &wt) in taps.iter().enumerate() {
                        let ii = reflect(i as isize + t as isize - r as isize, h);
                        acc += wt * tmp[(bi, ci, ii, j)];
                    }
                    out[(bi, ci, i, j)] = acc.clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

fn gaussian_smooth_pixels(x: &Tensor4, k: usize, sigma: f64) -> Result<Tensor4> {
    Ok(separable_filter(x, &gaussian_kernel(k, sigma)?))
}

fn average_smooth_pixels(x: &Tensor4, k: usize) -> Result<Tensor4> {
    check_kernel(k)?;
    let taps = vec![1.0 / k as f64; k];
    Ok(separable_filter(x, &taps))
}

fn median_smooth_pixels(x: &Tensor4, k: usize) -> Result<Tensor4> {
    check_kernel(k)?;
    let (b, c, h, w) = x.dim();
    let r = (k / 2) as isize;
    let mut out = Tensor4::zeros((b, c, h, w));
    let mut window = Vec::with_capacity(k * k);
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    window.clear();
                    for di in -r..=r {
                        for dj in -r..=r {
                            let ii = reflect(i as isize + di, h);
                            let jj = reflect(j as isize + dj, w);
                            window.push(x[(bi, ci, ii, jj)]);
                        }
                    }
                    window.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    out[(bi, ci, i, j)] = window[window.len() / 2];
                }
            }
        }
    }
    Ok(out)
}

/// Gaussian smoothing defense.
pub fn gaussian_smooth(x: &ImageBatch, k: usize, sigma: f64) -> Result<ImageBatch> {
    DefenseSpec::Gaussian { kernel: k, sigma }.apply(x)
}

/// Median smoothing defense.
pub fn median_smooth(x: &ImageBatch, k: usize) -> Result<ImageBatch> {
    DefenseSpec::Median { kernel: k }.apply(x)
}

/// Box-average smoothing defense.
pub fn average_smooth(x: &ImageBatch, k: usize) -> Result<ImageBatch> {
    DefenseSpec::Average { kernel: k }.apply(x)
}

/// Encode to baseline JPEG at quality `q` and decode back.
pub fn jpeg_roundtrip(x: &ImageBatch, q: u8) -> Result<ImageBatch> {
    DefenseSpec::Jpeg { quality: q }.apply(x)
}

fn jpeg_roundtrip_pixels(x: &Tensor4, q: u8) -> Result<Tensor4> {
    if !(1..=100).contains(&q) {
        return Err(Error::Argument(format!("jpeg quality {q} must lie in [1, 100]")));
    }
    let (b, c, h, w) = x.dim();
    let mut out = Tensor4::zeros((b, c, h, w));
    for bi in 0..b {
        let mut encoded = Vec::new();
        let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut encoded, q);
        let color = if c == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        let mut bytes = Vec::with_capacity(h * w * c);
        for i in 0..h {
            for j in 0..w {
                for ci in 0..c {
                    bytes.push(to_u8(x[(bi, ci, i, j)]));
                }
            }
        }
        enc.encode(&bytes, w as u32, h as u32, color)
            .map_err(|e| Error::Defense(format!("jpeg encode failed: {e}")))?;
        let decoded = image::load_from_memory(&encoded)
            .map_err(|e| Error::Defense(format!("jpeg decode failed: {e}")))?;
        if c == 1 {
            let gray = decoded.to_luma8();
            for (px, py, p) in gray.enumerate_pixels() {
                out[(bi, 0, py as usize, px as usize)] = f64::from(p.0[0]) / 255.0;
            }
        } else {
            let rgb = decoded.to_rgb8();
            for (px, py, p) in rgb.enumerate_pixels() {
                for ci in 0..3 {
                    out[(bi, ci, py as usize, px as usize)] = f64::from(p.0[ci]) / 255.0;
                }
            }
        }
    }
    Ok(out)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Peak signal-to-noise ratio in dB for unit-range images.
pub fn psnr(a: &Tensor4, b: &Tensor4) -> f64 {
    let mse = (a - b).mapv(|v| v * v).mean().unwrap_or(0.0);
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Result of counting targeted hits on one batch.
#[derive(Debug, Clone, Copy)]
pub struct SuccessCount {
    pub n: usize,
    pub successes: usize,
    pub asr: f64,
}

/// Fraction of images the victim classifies as `target` (argmax ties resolve
/// to the lowest index and are logged).
pub fn attack_success_rate(
    x_adv: &ImageBatch,
    victim: &dyn Classifier,
    target: usize,
) -> Result<SuccessCount> {
    if target >= victim.num_classes() {
        return Err(Error::Argument(format!(
            "target index {target} out of range for victim `{}`",
            victim.name()
        )));
    }
    let logits = victim.forward(&x_adv.pixels)?;
    let mut successes = 0;
    for row in logits.rows() {
        let slice = row.as_slice().unwrap();
        let pred = argmax(slice);
        let ties = slice.iter().filter(|&&v| v == slice[pred]).count();
        if ties > 1 {
            log::warn!(
                "argmax tie ({ties} classes) on victim `{}`; choosing lowest index",
                victim.name()
            );
        }
        if pred == target {
            successes += 1;
        }
    }
    let n = x_adv.len();
    Ok(SuccessCount {
        n,
        successes,
        asr: successes as f64 / n as f64,
    })
}

/// One (victim, target, defense) cell of the evaluation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackRow {
    pub surrogate: String,
    pub victim: String,
    pub target_class: String,
    pub defense: String,
    pub defense_params: String,
    pub n_samples: usize,
    pub n_success: usize,
    pub asr: f64,
    pub white_box: bool,
}

/// Per-victim mean ASR over targets (the headline aggregation).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VictimSummary {
    pub victim: String,
    pub defense: String,
    pub defense_params: String,
    pub mean_asr: f64,
    pub white_box: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackReport {
    pub rows: Vec<AttackRow>,
    pub summary: Vec<VictimSummary>,
    pub failures: Vec<String>,
    pub config_digest: String,
    pub timestamp: String,
}

impl AttackReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Load(format!("report serialization: {e}")))?;
        crate::checkpoint::atomic_write(path, text.as_bytes())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Load(format!("{}: bad report: {e}", path.display())))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "surrogate",
            "victim",
            "target_class",
            "defense",
            "params",
            "n",
            "successes",
            "asr",
        ])
        .map_err(|e| Error::Load(format!("csv write: {e}")))?;
        for r in &self.rows {
            w.write_record([
                r.surrogate.as_str(),
                r.victim.as_str(),
                r.target_class.as_str(),
                r.defense.as_str(),
                r.defense_params.as_str(),
                &r.n_samples.to_string(),
                &r.n_success.to_string(),
                &format!("{:.6}", r.asr),
            ])
            .map_err(|e| Error::Load(format!("csv write: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Load(format!("csv write: {e}")))?;
        crate::checkpoint::atomic_write(path, &bytes)
    }

    /// Human-readable per-victim mean table.
    pub fn render_summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:<20} {:>10}\n",
            "victim", "defense", "mean ASR"
        ));
        for s in &self.summary {
            let defense = if s.defense_params.is_empty() {
                s.defense.clone()
            } else {
                format!("{}({})", s.defense, s.defense_params)
            };
            let marker = if s.white_box { "*" } else { "" };
            out.push_str(&format!(
                "{:<24} {:<20} {:>9.4}{}\n",
                s.victim, defense, s.mean_asr, marker
            ));
        }
        if !self.failures.is_empty() {
            out.push_str("failures:\n");
            for f in &self.failures {
                out.push_str(&format!("  {f}\n"));
            }
        }
        out
    }
}

/// Evaluation knobs.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub image_size: usize,
    pub batch_size: usize,
    /// Budget override; defaults to the checkpoint's training epsilon.
    pub epsilon: Option<f64>,
    /// Cap on evaluation images; defaults to the whole set.
    pub max_samples: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            image_size: 32,
            batch_size: 32,
            epsilon: None,
            max_samples: None,
        }
    }
}

/// Run the full (target x victim x defense) grid and assemble a report.
pub fn evaluate(
    ckpt: &Checkpoint,
    victims: &[&dyn Classifier],
    eval_set: &Dataset,
    targets: &TargetClassSet,
    defenses: &[DefenseSpec],
    encoder: &dyn TextEncoder,
    opts: &EvalOptions,
) -> Result<AttackReport> {
    if victims.is_empty() {
        return Err(Error::Argument("no victims configured".into()));
    }
    if eval_set.is_empty() {
        return Err(Error::Argument("evaluation dataset is empty".into()));
    }
    let defenses: Vec<DefenseSpec> = if defenses.is_empty() {
        vec![DefenseSpec::None]
    } else {
        defenses.to_vec()
    };
    for d in &defenses {
        d.validate()?;
    }
    let epsilon = opts.epsilon.unwrap_or(ckpt.train_config.epsilon);

    // resolve every (victim, class) pair up front: label-space mismatches
    // abort before any compute
    let mut victim_targets: Vec<Vec<usize>> = Vec::new();
    for v in victims {
        let mapped = targets
            .entries()
            .iter()
            .map(|t| v.class_index(&t.name))
            .collect::<Result<Vec<_>>>()?;
        victim_targets.push(mapped);
    }

    let n = eval_set.len().min(opts.max_samples.unwrap_or(usize::MAX));
    let indices: Vec<usize> = (0..n).collect();
    let mut successes = vec![vec![vec![0usize; defenses.len()]; targets.len()]; victims.len()];
    let mut counted = vec![vec![vec![0usize; defenses.len()]; targets.len()]; victims.len()];
    let mut failed: Vec<Option<String>> = vec![None; victims.len()];

    for (ti, target) in targets.entries().iter().enumerate() {
        let cond = ckpt.condition_for(&target.name, encoder)?;
        for chunk in indices.chunks(opts.batch_size) {
            let batch = eval_set.load_batch(chunk, (opts.image_size, opts.image_size))?;
            let p = generate(&batch, &cond, epsilon, &ckpt.state)?;
            let x_adv = make_adversarial(&batch, &p)?;
            for (di, defense) in defenses.iter().enumerate() {
                let defended = defense.apply(&x_adv)?;
                for (vi, victim) in victims.iter().enumerate() {
                    if failed[vi].is_some() {
                        continue;
                    }
                    match attack_success_rate(&defended, *victim, victim_targets[vi][ti]) {
                        Ok(count) => {
                            successes[vi][ti][di] += count.successes;
                            counted[vi][ti][di] += count.n;
                        }
                        Err(e) => {
                            failed[vi] = Some(format!("victim `{}`: {e}", victim.name()));
                        }
                    }
                }
            }
        }
    }

    let digest = {
        let desc = serde_json::json!({
            "surrogate": ckpt.surrogate_name,
            "victims": victims.iter().map(|v| v.name()).collect::<Vec<_>>(),
            "targets": targets.names(),
            "defenses": defenses,
            "epsilon": epsilon,
            "eval_domain": eval_set.domain_tag(),
            "n_samples": n,
            "checkpoint_seed": ckpt.seed,
        });
        let mut h = sha2::Sha256::new();
        h.update(desc.to_string().as_bytes());
        format!("{:x}", h.finalize())
    };

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (vi, victim) in victims.iter().enumerate() {
        let white_box = victim.name() == ckpt.surrogate_name;
        for (di, defense) in defenses.iter().enumerate() {
            let mut mean = 0.0;
            let mut have_all = true;
            for (ti, target) in targets.entries().iter().enumerate() {
                let n_samples = counted[vi][ti][di];
                if n_samples == 0 {
                    have_all = false;
                    continue;
                }
                let n_success = successes[vi][ti][di];
                let asr = n_success as f64 / n_samples as f64;
                mean += asr;
                rows.push(AttackRow {
                    surrogate: ckpt.surrogate_name.clone(),
                    victim: victim.name().to_string(),
                    target_class: target.name.clone(),
                    defense: defense.kind_label().to_string(),
                    defense_params: defense.params_label(),
                    n_samples,
                    n_success,
                    asr,
                    white_box,
                });
            }
            if have_all {
                summary.push(VictimSummary {
                    victim: victim.name().to_string(),
                    defense: defense.kind_label().to_string(),
                    defense_params: defense.params_label(),
                    mean_asr: mean / targets.len() as f64,
                    white_box,
                });
            }
        }
    }
    Ok(AttackReport {
        rows,
        summary,
        failures: failed.into_iter().flatten().collect(),
        config_digest: digest,
        timestamp: chrono::Utc::now().to_rfc3339(),
    })
}

/// Architecture ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Full,
    NoCrossAttention,
    OneHotCondition,
    NoPurifier,
    NoFusion,
}

impl std::str::FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(VariantKind::Full),
            "no_cross_attention" => Ok(VariantKind::NoCrossAttention),
            "one_hot_condition" => Ok(VariantKind::OneHotCondition),
            "no_purifier" => Ok(VariantKind::NoPurifier),
            "no_fusion" => Ok(VariantKind::NoFusion),
            other => Err(Error::Argument(format!("unknown variant kind {other:?}"))),
        }
    }
}

/// Hyperparameters with the named component ablated.
pub fn variant_hyper(kind: VariantKind, base: &GeneratorHyper) -> GeneratorHyper {
    let mut hyper = base.clone();
    match kind {
        VariantKind::Full => {}
        VariantKind::NoCrossAttention => hyper.cross_attention_count = 0,
        VariantKind::OneHotCondition => hyper.condition_mode = ConditionMode::OneHot,
        VariantKind::NoPurifier => hyper.use_purifier = false,
        VariantKind::NoFusion => hyper.use_fusion = false,
    }
    hyper
}

/// Construct a generator with the named component ablated.
pub fn build_variant(
    kind: VariantKind,
    base: &GeneratorHyper,
    seed: u64,
) -> Result<GeneratorState> {
    GeneratorState::new(variant_hyper(kind, base), seed)
}

/// Write a PNG grid: one row per sample, panels `[scaled perturbation |
/// adversarial image]`. Perturbations map to pixels via `(delta/eps + 1) / 2`.
pub fn visualize(p: &PerturbationBatch, x: &ImageBatch, path: &Path) -> Result<()> {
    if p.delta.dim() != x.pixels.dim() {
        return Err(Error::Shape(format!(
            "perturbation {:?} vs images {:?}",
            p.delta.dim(),
            x.pixels.dim()
        )));
    }
    let adv = make_adversarial(x, p)?;
    let (b, c, h, w) = x.pixels.dim();
    let mut grid = Array3::<f64>::zeros((c, b * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let scaled = if p.epsilon > 0.0 {
                        (p.delta[(bi, ci, i, j)] / p.epsilon + 1.0) / 2.0
                    } else {
                        0.5
                    };
                    grid[(ci, bi * h + i, j)] = scaled;
                    grid[(ci, bi * h + i, w + j)] = adv.pixels[(bi, ci, i, j)];
                }
            }
        }
    }
    save_png(&grid, path)
}

/// Write one CHW image in `[0,1]` as a PNG.
pub fn save_png(img: &Array3<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    let io_err = |e: image::ImageError| Error::Image(format!("{}: {e}", path.display()));
    if c == 1 {
        let mut buf = image::GrayImage::new(w as u32, h as u32);
        for (px, py, pix) in buf.enumerate_pixels_mut() {
            *pix = image::Luma([to_u8(img[(0, py as usize, px as usize)])]);
        }
        buf.save(path).map_err(io_err)
    } else if c == 3 {
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (px, py, pix) in buf.enumerate_pixels_mut() {
            let (y, x) = (py as usize, px as usize);
            *pix = image::Rgb([
                to_u8(img[(0, y, x)]),
                to_u8(img[(1, y, x)]),
                to_u8(img[(2, y, x)]),
            ]);
        }
        buf.save(path).map_err(io_err)
    } else {
        Err(Error::Image(format!("cannot write {c}-channel image")))
    }
}

/// Decode one PNG/JPEG into a CHW `[0,1]` array.
pub fn load_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for (px, py, p) in img.enumerate_pixels() {
        for ci in 0..3 {
            out[(ci, py as usize, px as usize)] = f64::from(p.0[ci]) / 255.0;
        }
    }
    Ok(out)
}
