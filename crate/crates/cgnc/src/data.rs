//! Image data pipeline: directory datasets, the synthetic shapes dataset used
//! for desk-scale training, batching, and augmentation.
//!
//! Pixels are `f64` in `[0, 1]` everywhere; 8-bit conversion happens only at
//! file I/O. All randomness is derived per (seed, image index), so results do
//! not depend on evaluation order.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor4;
use crate::rng;

/// A batch of images `(B, N, H, W)` with per-image identifiers.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: Tensor4,
    pub ids: Vec<String>,
    pub domain_tag: String,
}

impl ImageBatch {
    pub fn new(pixels: Tensor4, ids: Vec<String>, domain_tag: impl Into<String>) -> Result<Self> {
        let (b, n, h, w) = pixels.dim();
        if b < 1 {
            return Err(Error::Shape("batch must contain at least one image".into()));
        }
        if n != 1 && n != 3 {
            return Err(Error::Shape(format!("channel count must be 1 or 3, got {n}")));
        }
        if h < 8 || w < 8 {
            return Err(Error::Shape(format!("images must be at least 8x8, got {h}x{w}")));
        }
        if ids.len() != b {
            return Err(Error::Shape(format!("{} ids for {b} images", ids.len())));
        }
        if pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Shape("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            pixels,
            ids,
            domain_tag: domain_tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which half of a dataset a spec refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Eval,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// Source description for a dataset: an image directory laid out one
/// subdirectory per class, or a fully seeded synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Directory {
        root: PathBuf,
        #[serde(default)]
        split: Split,
    },
    SyntheticShapes {
        num_classes: usize,
        samples_per_class: usize,
        image_size: usize,
        seed: u64,
        #[serde(default)]
        split: Split,
    },
}

const SHAPE_NAMES: [&str; 4] = ["circle", "square", "triangle", "cross"];
const COLOR_NAMES: [&str; 4] = ["red", "green", "blue", "yellow"];
// Per-channel deltas added over the background inside the shape. Amplitudes
// are kept low so class margins sit near a realistic perturbation budget:
// clean classifiers still separate the classes easily, but they are not
// artificially robust the way saturated color patches would make them.
const COLOR_DELTAS: [[f64; 3]; 4] = [
    [0.085, -0.04, -0.04],
    [-0.04, 0.085, -0.04],
    [-0.04, -0.04, 0.09],
    [0.07, 0.065, -0.045],
];

/// Maximum class count for the synthetic dataset (shape x color grid).
pub const MAX_SYNTHETIC_CLASSES: usize = SHAPE_NAMES.len() * COLOR_NAMES.len();

enum Items {
    Synthetic {
        num_classes: usize,
        per_class: usize,
        size: usize,
        seed: u64,
        split: Split,
    },
    Files(Vec<(PathBuf, usize)>),
}

/// An opened dataset: lengths, labels and class names are known, images are
/// materialized on demand.
pub struct Dataset {
    items: Items,
    class_names: Vec<String>,
    domain_tag: String,
}

impl Dataset {
    pub fn open(spec: &DatasetSpec) -> Result<Self> {
        match spec {
            DatasetSpec::SyntheticShapes {
                num_classes,
                samples_per_class,
                image_size,
                seed,
                split,
            } => {
                if *num_classes < 2 {
                    return Err(Error::Argument(
                        "synthetic dataset needs at least 2 classes".into(),
                    ));
                }
                if *num_classes > MAX_SYNTHETIC_CLASSES {
                    return Err(Error::Argument(format!(
                        "synthetic dataset supports at most {MAX_SYNTHETIC_CLASSES} classes \
                         (shape x color combinations), got {num_classes}"
                    )));
                }
                if *samples_per_class == 0 {
                    return Err(Error::Argument("samples_per_class must be positive".into()));
                }
                if *image_size < 8 {
                    return Err(Error::Argument("image_size must be at least 8".into()));
                }
                let class_names = (0..*num_classes).map(synthetic_class_name).collect();
                Ok(Self {
                    items: Items::Synthetic {
                        num_classes: *num_classes,
                        per_class: *samples_per_class,
                        size: *image_size,
                        seed: *seed,
                        split: *split,
                    },
                    class_names,
                    domain_tag: format!("synthetic-shapes:{}", split.tag()),
                })
            }
            DatasetSpec::Directory { root, split } => {
                let mut class_names = Vec::new();
                let mut files = Vec::new();
                let entries = std::fs::read_dir(root)
                    .map_err(|e| Error::io(root.display().to_string(), e))?;
                let mut dirs: Vec<PathBuf> = entries
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.is_dir())
                    .collect();
                dirs.sort();
                for (label, dir) in dirs.iter().enumerate() {
                    class_names.push(
                        dir.file_name()
                            .map(|n| n.to_string_lossy().into_owned())
                            .unwrap_or_else(|| label.to_string()),
                    );
                    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                        .map_err(|e| Error::io(dir.display().to_string(), e))?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| {
                            matches!(
                                p.extension().and_then(|e| e.to_str()).map(str::to_lowercase),
                                Some(ref ext) if ext == "png" || ext == "jpg" || ext == "jpeg"
                            )
                        })
                        .collect();
                    paths.sort();
                    files.extend(paths.into_iter().map(|p| (p, label)));
                }
                if files.is_empty() {
                    return Err(Error::Argument(format!(
                        "no PNG/JPEG files under {}",
                        root.display()
                    )));
                }
                Ok(Self {
                    items: Items::Files(files),
                    class_names,
                    domain_tag: format!("directory:{}:{}", root.display(), split.tag()),
                })
            }
        }
    }

    pub fn len(&self) -> usize {
        match &self.items {
            Items::Synthetic {
                num_classes,
                per_class,
                ..
            } => num_classes * per_class,
            Items::Files(files) => files.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn domain_tag(&self) -> &str {
        &self.domain_tag
    }

    /// Ground-truth class index of one item.
    pub fn label(&self, index: usize) -> Result<usize> {
        self.check_index(index)?;
        match &self.items {
            Items::Synthetic { per_class, .. } => Ok(index / per_class),
            Items::Files(files) => Ok(files[index].1),
        }
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.len() {
            return Err(Error::Argument(format!(
                "index {index} out of range for dataset of {}",
                self.len()
            )));
        }
        Ok(())
    }

    fn load_one(&self, index: usize, size: (usize, usize)) -> Result<(Array3<f64>, String)> {
        self.check_index(index)?;
        match &self.items {
            Items::Synthetic {
                num_classes: _,
                per_class,
                size: native,
                seed,
                split,
            } => {
                let class = index / per_class;
                let img = render_shape(class, *seed, *split, index, *native);
                let img = if (*native, *native) == size {
                    img
                } else {
                    resize_bilinear(img.view(), size.0, size.1)
                };
                Ok((img, format!("synthetic-{}-{index}", split.tag())))
            }
            Items::Files(files) => {
                let (path, _) = &files[index];
                let img = decode_image(path, size)?;
                Ok((img, path.display().to_string()))
            }
        }
    }

    /// Load the given items, resized to `size`, as one batch.
    pub fn load_batch(&self, indices: &[usize], size: (usize, usize)) -> Result<ImageBatch> {
        if indices.is_empty() {
            return Err(Error::Argument("index list must be nonempty".into()));
        }
        if size.0 < 8 || size.1 < 8 {
            return Err(Error::Argument("target size must be at least 8x8".into()));
        }
        let mut pixels = Array4::zeros((indices.len(), 3, size.0, size.1));
        let mut ids = Vec::with_capacity(indices.len());
        for (slot, &index) in indices.iter().enumerate() {
            let (img, id) = self.load_one(index, size)?;
            pixels.index_axis_mut(Axis(0), slot).assign(&img);
            ids.push(id);
        }
        ImageBatch::new(pixels, ids, self.domain_tag.clone())
    }
}

/// Open a synthetic-shapes dataset (argument-checked constructor).
pub fn synth_toy_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::SyntheticShapes { .. } => Dataset::open(spec),
        DatasetSpec::Directory { .. } => Err(Error::Argument(
            "synth_toy_dataset requires a synthetic-shapes spec".into(),
        )),
    }
}

/// Load selected items of a dataset as one batch resized to `size`.
pub fn load_image_batch(
    spec: &DatasetSpec,
    indices: &[usize],
    size: (usize, usize),
) -> Result<ImageBatch> {
    Dataset::open(spec)?.load_batch(indices, size)
}

/// Class name for synthetic class `index`: colors vary slowest.
pub fn synthetic_class_name(index: usize) -> String {
    let shape = SHAPE_NAMES[index % SHAPE_NAMES.len()];
    let color = COLOR_NAMES[(index / SHAPE_NAMES.len()) % COLOR_NAMES.len()];
    format!("{color} {shape}")
}

fn render_shape(class: usize, seed: u64, split: Split, index: usize, size: usize) -> Array3<f64> {
    let purpose = format!("synth-{}", split.tag());
    let mut rng = rng::stream(seed, &purpose, index as u64);
    let shape = class % SHAPE_NAMES.len();
    let color = COLOR_DELTAS[(class / SHAPE_NAMES.len()) % COLOR_NAMES.len()];

    let s = size as f64;
    let bg_base = 0.5 + rng.gen_range(-0.04..0.04);
    let bg_tint: [f64; 3] = [
        rng.gen_range(-0.02..0.02),
        rng.gen_range(-0.02..0.02),
        rng.gen_range(-0.02..0.02),
    ];
    let cx = s / 2.0 + rng.gen_range(-s / 8.0..s / 8.0);
    let cy = s / 2.0 + rng.gen_range(-s / 8.0..s / 8.0);
    let half = s * rng.gen_range(0.30..0.40);
    let jitter = rng.gen_range(-0.02..0.02);
    let fg: Vec<f64> = color.iter().map(|c| c + jitter).collect();

    let mut img = Array3::zeros((3, size, size));
    for i in 0..size {
        for j in 0..size {
            let noise = rng.gen_range(-0.02..0.02);
            // local coordinates relative to the shape center
            let dy = i as f64 + 0.5 - cy;
            let dx = j as f64 + 0.5 - cx;
            let dist = shape_distance(shape, dx, dy, half);
            let coverage = (dist + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                let bg = bg_base + bg_tint[c] + noise;
                let v = bg + coverage * fg[c];
                img[(c, i, j)] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Signed distance-ish field, positive inside the shape; good enough for a
/// one-pixel anti-aliased edge.
fn shape_distance(shape: usize, dx: f64, dy: f64, half: f64) -> f64 {
    match shape {
        // circle
        0 => half - (dx * dx + dy * dy).sqrt(),
        // square
        1 => (half - dx.abs()).min(half - dy.abs()),
        // upward triangle through (0,-h), (-h,h), (h,h)
        2 => {
            let d_bottom = half - dy;
            // edges from apex to the two base corners
            let d_right = line_side(dx, dy, 0.0, -half, half, half);
            let d_left = line_side(dx, dy, -half, half, 0.0, -half);
            d_bottom.min(d_right).min(d_left)
        }
        // cross: union of a horizontal and a vertical bar
        _ => {
            let bar = half * 0.34;
            let horizontal = (half - dx.abs()).min(bar - dy.abs());
            let vertical = (bar - dx.abs()).min(half - dy.abs());
            horizontal.max(vertical)
        }
    }
}

/// Signed distance from point to the line through (x1,y1)-(x2,y2); positive on
/// the left of the direction of travel.
fn line_side(px: f64, py: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> f64 {
    let (ex, ey) = (x2 - x1, y2 - y1);
    let len = (ex * ex + ey * ey).sqrt();
    ((px - x1) * ey - (py - y1) * ex) / len
}

fn decode_image(path: &Path, size: (usize, usize)) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let img = if (img.height() as usize, img.width() as usize) == size {
        img
    } else {
        image::imageops::resize(
            &img,
            size.1 as u32,
            size.0 as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    let mut out = Array3::zeros((3, size.0, size.1));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = f64::from(p.0[c]) / 255.0;
        }
    }
    Ok(out)
}

/// Bilinear resize of one image, `align_corners=false` convention.
pub(crate) fn resize_bilinear(src: ArrayView3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let mut out = Array3::zeros((c, out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ci in 0..c {
                let v00 = src[(ci, y0, x0)];
                let v01 = src[(ci, y0, x1)];
                let v10 = src[(ci, y1, x0)];
                let v11 = src[(ci, y1, x1)];
                out[(ci, oy, ox)] = v00 * (1.0 - wy) * (1.0 - wx)
                    + v01 * (1.0 - wy) * wx
                    + v10 * wy * (1.0 - wx)
                    + v11 * wy * wx;
            }
        }
    }
    out
}

/// Knobs for [`augment_with`]; [`augment`] uses the defaults.
#[derive(Debug, Clone)]
pub struct AugmentOptions {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_min: 0.8,
            scale_max: 1.0,
        }
    }
}

/// Per-image random horizontal flip then random resized crop back to the
/// original size. Deterministic for a fixed seed.
pub fn augment(batch: &ImageBatch, seed: u64) -> Result<ImageBatch> {
    augment_with(batch, seed, &AugmentOptions::default())
}

pub fn augment_with(batch: &ImageBatch, seed: u64, opts: &AugmentOptions) -> Result<ImageBatch> {
    if !(0.0..=1.0).contains(&opts.flip_prob) {
        return Err(Error::Argument("flip_prob must lie in [0, 1]".into()));
    }
    if !(opts.scale_min > 0.0 && opts.scale_min <= opts.scale_max && opts.scale_max <= 1.0) {
        return Err(Error::Argument(
            "scale interval must satisfy 0 < min <= max <= 1".into(),
        ));
    }
    let (b, _, h, w) = batch.pixels.dim();
    let mut out = batch.pixels.clone();
    for bi in 0..b {
        let mut rng = rng::stream(seed, "augment", bi as u64);
        let flip = rng.gen::<f64>() < opts.flip_prob;
        let scale = if opts.scale_min == opts.scale_max {
            opts.scale_min
        } else {
            rng.gen_range(opts.scale_min..opts.scale_max)
        };
        let side_h = ((h as f64 * scale).round() as usize).clamp(1, h);
        let side_w = ((w as f64 * scale).round() as usize).clamp(1, w);
        let top = if side_h < h { rng.gen_range(0..=h - side_h) } else { 0 };
        let left = if side_w < w { rng.gen_range(0..=w - side_w) } else { 0 };

        let mut img = batch.pixels.index_axis(Axis(0), bi).to_owned();
        if flip {
            img.invert_axis(Axis(2));
        }
        let crop = img
            .slice(ndarray::s![.., top..top + side_h, left..left + side_w])
            .to_owned();
        let resized = resize_bilinear(crop.view(), h, w);
        out.index_axis_mut(Axis(0), bi).assign(&resized);
    }
    ImageBatch::new(out, batch.ids.clone(), batch.domain_tag.clone())
}

/// Elementwise clamp to the valid pixel range `[0, 1]`.
pub fn clamp_valid(x: &Tensor4) -> Tensor4 {
    x.mapv(|v| v.clamp(0.0, 1.0))
}
