//! Classifier interfaces and the small trainable CNN used as surrogate and
//! victim at desk scale.
//!
//! [`Classifier`] is forward-only; evaluation consumes nothing else, so the
//! black-box contract holds by construction. [`SurrogateModel`] adds input
//! gradients for white-box generator training and never exposes parameter
//! updates.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, Adam, Conv2d, ConvCache, Initializer, Linear, Tensor2, Tensor4};
use crate::rng;

/// Forward-only classifier (the victim interface).
pub trait Classifier: Send + Sync {
    fn name(&self) -> &str;
    fn label_names(&self) -> &[String];
    fn forward(&self, x: &Tensor4) -> Result<Tensor2>;

    fn num_classes(&self) -> usize {
        self.label_names().len()
    }

    /// Resolve a class name to a logit index.
    fn class_index(&self, class_name: &str) -> Result<usize> {
        self.label_names()
            .iter()
            .position(|n| n == class_name)
            .ok_or_else(|| {
                Error::Mapping(format!(
                    "class {class_name:?} not in label space of classifier `{}`",
                    self.name()
                ))
            })
    }
}

/// White-box classifier: differentiable with respect to its input. Parameter
/// gradients are never computed through this interface, keeping the surrogate
/// frozen during generator training.
pub trait SurrogateModel: Classifier {
    fn forward_traced(&self, x: &Tensor4) -> Result<(Tensor2, SurrogateTrace)>;
    fn input_gradient(&self, trace: &SurrogateTrace, dlogits: &Tensor2) -> Tensor4;
}

/// Opaque activations saved by [`SurrogateModel::forward_traced`].
pub struct SurrogateTrace {
    pre_relu: Vec<Tensor4>,
    input_dims: Vec<(usize, usize)>,
    feature_dims: (usize, usize, usize),
}

impl SurrogateTrace {
    #[cfg(test)]
    pub(crate) fn empty() -> Self {
        Self {
            pre_relu: Vec::new(),
            input_dims: Vec::new(),
            feature_dims: (0, 0, 0),
        }
    }
}

/// Architecture/training knobs for [`ToyCnn::fit`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCnnConfig {
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ToyCnnConfig {
    fn default() -> Self {
        Self {
            widths: vec![24, 48, 96],
            epochs: 16,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Three stride-2 conv+ReLU stages, flattened into one dense layer.
pub struct ToyCnn {
    name: String,
    label_names: Vec<String>,
    convs: Vec<Conv2d>,
    fc: Linear,
    in_channels: usize,
    input_size: usize,
    widths: Vec<usize>,
    seed: u64,
}

impl ToyCnn {
    pub fn new(
        name: impl Into<String>,
        label_names: Vec<String>,
        in_channels: usize,
        input_size: usize,
        widths: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if label_names.len() < 2 {
            return Err(Error::Argument("classifier needs at least 2 classes".into()));
        }
        if widths.is_empty() {
            return Err(Error::Argument("need at least one conv stage".into()));
        }
        let down = 1usize << widths.len();
        if input_size < down || input_size % down != 0 {
            return Err(Error::Argument(format!(
                "input size {input_size} must be a multiple of the downsampling factor {down}"
            )));
        }
        let mut init = Initializer::new(rng::stream(seed, "toycnn-init", 0));
        let mut convs = Vec::new();
        let mut prev = in_channels;
        for &w in widths {
            convs.push(Conv2d::new(prev, w, 3, 2, 1, &mut init));
            prev = w;
        }
        let spatial = input_size / down;
        let fc = Linear::new(prev * spatial * spatial, label_names.len(), &mut init);
        Ok(Self {
            name: name.into(),
            label_names,
            convs,
            fc,
            in_channels,
            input_size,
            widths: widths.to_vec(),
            seed,
        })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn forward_impl(&self, x: &Tensor4, trace: bool) -> Result<(Tensor2, Option<SurrogateTrace>)> {
        let mut pre_relu = Vec::new();
        let mut input_dims = Vec::new();
        let mut h = x.clone();
        for conv in &self.convs {
            let (_, _, ih, iw) = h.dim();
            let t = conv.forward_eval(&h)?;
            if trace {
                input_dims.push((ih, iw));
                pre_relu.push(t.clone());
            }
            h = relu(&t);
        }
        let (_, c, hh, ww) = h.dim();
        let flat = flatten(&h);
        let logits = self.fc.forward_eval(&flat);
        let tr = trace.then_some(SurrogateTrace {
            pre_relu,
            input_dims,
            feature_dims: (c, hh, ww),
        });
        Ok((logits, tr))
    }

    /// Fraction of `indices` classified into their ground-truth class.
    pub fn accuracy(&self, dataset: &Dataset, size: usize, indices: &[usize]) -> Result<f64> {
        let mut correct = 0usize;
        for chunk in indices.chunks(64) {
            let batch = dataset.load_batch(chunk, (size, size))?;
            let logits = self.forward(&batch.pixels)?;
            for (row, &idx) in logits.rows().into_iter().zip(chunk) {
                let pred = argmax(row.as_slice().unwrap());
                if pred == dataset.label(idx)? {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / indices.len() as f64)
    }

    /// Train a fresh CNN on a labeled dataset (cross-entropy, Adam).
    pub fn fit(
        name: impl Into<String>,
        dataset: &Dataset,
        image_size: usize,
        cfg: &ToyCnnConfig,
    ) -> Result<Self> {
        let mut model = Self::new(
            name,
            dataset.class_names().to_vec(),
            3,
            image_size,
            &cfg.widths,
            cfg.seed,
        )?;
        let mut opt = Adam::new(cfg.learning_rate, 0.9, 0.999);
        let n = dataset.len();
        for epoch in 0..cfg.epochs {
            let order = shuffled_indices(n, cfg.seed, "toycnn-order", epoch as u64);
            for chunk in order.chunks(cfg.batch_size) {
                let batch = dataset.load_batch(chunk, (image_size, image_size))?;
                let labels: Vec<usize> = chunk
                    .iter()
                    .map(|&i| dataset.label(i))
                    .collect::<Result<_>>()?;
                model.train_batch(&batch.pixels, &labels, &mut opt)?;
            }
        }
        Ok(model)
    }

    fn train_batch(&mut self, x: &Tensor4, labels: &[usize], opt: &mut Adam) -> Result<f64> {
        // traced forward keeping conv caches for the parameter backward
        let mut caches: Vec<ConvCache> = Vec::new();
        let mut pre_relu = Vec::new();
        let mut h = x.clone();
        for conv in &self.convs {
            let (t, cache) = conv.forward(&h)?;
            caches.push(cache);
            pre_relu.push(t.clone());
            h = relu(&t);
        }
        let (_, c, hh, ww) = h.dim();
        let flat = flatten(&h);
        let (logits, fc_cache) = self.fc.forward(&flat);
        let (loss, dlogits) = crate::training::cross_entropy_with_grad(&logits, labels)?;

        for conv in self.convs.iter_mut() {
            conv.weight.zero_grad();
            conv.bias.zero_grad();
        }
        self.fc.weight.zero_grad();
        self.fc.bias.zero_grad();

        let dflat = self.fc.backward(&fc_cache, &dlogits);
        let mut grad = unflatten(&dflat, c, hh, ww);
        for (i, conv) in self.convs.iter_mut().enumerate().rev() {
            let dpre = relu_backward(&pre_relu[i], &grad);
            grad = conv.backward(&caches[i], &dpre);
        }

        let mut params = Vec::new();
        for (i, conv) in self.convs.iter_mut().enumerate() {
            params.push(conv.weight.as_ref_mut(format!("conv{i}.weight")));
            params.push(conv.bias.as_ref_mut(format!("conv{i}.bias")));
        }
        params.push(self.fc.weight.as_ref_mut("fc.weight"));
        params.push(self.fc.bias.as_ref_mut("fc.bias"));
        opt.step(params);
        Ok(loss)
    }

    pub fn named_tensors(&self) -> Vec<(String, ndarray::ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), conv.weight.value.view().into_dyn()));
            out.push((format!("conv{i}.bias"), conv.bias.value.view().into_dyn()));
        }
        out.push(("fc.weight".into(), self.fc.weight.value.view().into_dyn()));
        out.push(("fc.bias".into(), self.fc.bias.value.view().into_dyn()));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, ndarray::ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, conv) in self.convs.iter_mut().enumerate() {
            out.push((
                format!("conv{i}.weight"),
                conv.weight.value.view_mut().into_dyn(),
            ));
            out.push((format!("conv{i}.bias"), conv.bias.value.view_mut().into_dyn()));
        }
        out.push(("fc.weight".into(), self.fc.weight.value.view_mut().into_dyn()));
        out.push(("fc.bias".into(), self.fc.bias.value.view_mut().into_dyn()));
        out
    }
}

impl Classifier for ToyCnn {
    fn name(&self) -> &str {
        &self.name
    }

    fn label_names(&self) -> &[String] {
        &self.label_names
    }

    fn forward(&self, x: &Tensor4) -> Result<Tensor2> {
        Ok(self.forward_impl(x, false)?.0)
    }
}

impl SurrogateModel for ToyCnn {
    fn forward_traced(&self, x: &Tensor4) -> Result<(Tensor2, SurrogateTrace)> {
        let (logits, trace) = self.forward_impl(x, true)?;
        Ok((logits, trace.expect("trace requested")))
    }

    fn input_gradient(&self, trace: &SurrogateTrace, dlogits: &Tensor2) -> Tensor4 {
        let dflat = dlogits.dot(&self.fc.weight.value.t());
        let (c, hh, ww) = trace.feature_dims;
        let mut grad = unflatten(&dflat, c, hh, ww);
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let dpre = relu_backward(&trace.pre_relu[i], &grad);
            grad = conv.input_gradient(&dpre, trace.input_dims[i]);
        }
        grad
    }
}

fn flatten(h: &Tensor4) -> Array2<f64> {
    let (b, c, hh, ww) = h.dim();
    let mut out = Array2::zeros((b, c * hh * ww));
    for bi in 0..b {
        let mut k = 0;
        for ci in 0..c {
            for i in 0..hh {
                for j in 0..ww {
                    out[(bi, k)] = h[(bi, ci, i, j)];
                    k += 1;
                }
            }
        }
    }
    out
}

fn unflatten(flat: &Array2<f64>, c: usize, hh: usize, ww: usize) -> Tensor4 {
    let b = flat.nrows();
    let mut out = Tensor4::zeros((b, c, hh, ww));
    for bi in 0..b {
        let mut k = 0;
        for ci in 0..c {
            for i in 0..hh {
                for j in 0..ww {
                    out[(bi, ci, i, j)] = flat[(bi, k)];
                    k += 1;
                }
            }
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    name: String,
    label_names: Vec<String>,
    in_channels: usize,
    input_size: usize,
    widths: Vec<usize>,
    seed: u64,
}

/// Serialize a toy classifier to the single-file archive format.
pub fn save_classifier(model: &ToyCnn, path: &std::path::Path) -> Result<()> {
    let meta = ClassifierMeta {
        name: model.name.clone(),
        label_names: model.label_names.clone(),
        in_channels: model.in_channels,
        input_size: model.input_size,
        widths: model.widths.clone(),
        seed: model.seed,
    };
    let metadata = serde_json::to_value(&meta)
        .map_err(|e| Error::Load(format!("cannot serialize classifier metadata: {e}")))?;
    crate::checkpoint::save_archive(path, "classifier", &metadata, &model.named_tensors())
}

pub fn load_classifier(path: &std::path::Path) -> Result<ToyCnn> {
    let archive = crate::checkpoint::load_archive(path)?;
    if archive.kind != "classifier" {
        return Err(Error::Load(format!(
            "{}: expected a classifier archive, found kind {:?}",
            path.display(),
            archive.kind
        )));
    }
    let meta: ClassifierMeta = serde_json::from_value(archive.metadata.clone())
        .map_err(|e| Error::Load(format!("{}: bad metadata: {e}", path.display())))?;
    let mut model = ToyCnn::new(
        meta.name,
        meta.label_names,
        meta.in_channels,
        meta.input_size,
        &meta.widths,
        meta.seed,
    )?;
    crate::checkpoint::restore_tensors(&archive, model.named_tensors_mut(), "classifier")?;
    Ok(model)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    // ties resolve to the lowest index
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn shuffled_indices(n: usize, seed: u64, purpose: &str, index: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, purpose, index));
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetSpec, Split};

    fn shapes_dataset(per_class: usize, split: Split) -> Dataset {
        Dataset::open(&DatasetSpec::SyntheticShapes {
            num_classes: 8,
            samples_per_class: per_class,
            image_size: 32,
            seed: 42,
            split,
        })
        .unwrap()
    }

    #[test]
    fn toy_cnn_separates_the_shapes_dataset() {
        // trains the surrogate fixture and doubles as the dataset
        // separability oracle
        let train = shapes_dataset(300, Split::Train);
        let eval = shapes_dataset(40, Split::Eval);
        let cfg = ToyCnnConfig {
            seed: 7,
            ..ToyCnnConfig::default()
        };
        let model = ToyCnn::fit("surrogate", &train, 32, &cfg).unwrap();
        let indices: Vec<usize> = (0..eval.len()).collect();
        let acc = model.accuracy(&eval, 32, &indices).unwrap();
        assert!(acc >= 0.95, "eval accuracy {acc}");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let model = ToyCnn::new(
            "m",
            vec!["a".into(), "b".into(), "c".into()],
            3,
            8,
            &[4, 8],
            3,
        )
        .unwrap();
        let x = Tensor4::from_shape_fn((2, 3, 8, 8), |(b, c, i, j)| {
            0.5 + 0.3 * ((b * 7 + c * 3 + i * 5 + j) as f64 * 0.29).sin()
        });
        let (logits, trace) = model.forward_traced(&x).unwrap();
        let dlogits = logits.mapv(|v| (v * 2.0).cos());
        let dx = model.input_gradient(&trace, &dlogits);

        let h = 1e-6;
        let mut xp = x.clone();
        let mut worst: f64 = 0.0;
        for idx in ndarray::indices(x.raw_dim()) {
            let orig = xp[idx];
            xp[idx] = orig + h;
            let lp = (&model.forward(&xp).unwrap() * &dlogits).sum();
            xp[idx] = orig - h;
            let lm = (&model.forward(&xp).unwrap() * &dlogits).sum();
            xp[idx] = orig;
            let num = (lp - lm) / (2.0 * h);
            worst = worst.max((num - dx[idx]).abs());
        }
        assert!(worst < 1e-7, "worst abs err {worst}");
    }

    #[test]
    fn classifier_archive_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let model = ToyCnn::new(
            "victim",
            vec!["a".into(), "b".into(), "c".into()],
            3,
            16,
            &[4, 8],
            42,
        )
        .unwrap();
        let path = dir.path().join("m.clf");
        save_classifier(&model, &path).unwrap();
        let loaded = load_classifier(&path).unwrap();
        assert_eq!(loaded.name(), "victim");
        assert_eq!(loaded.label_names(), model.label_names());
        let x = Tensor4::from_shape_fn((2, 3, 16, 16), |(b, c, i, j)| {
            ((b + c + i + j) as f64 * 0.13).sin().abs()
        });
        assert_eq!(
            model.forward(&x).unwrap(),
            loaded.forward(&x).unwrap()
        );
    }

    #[test]
    fn class_index_resolves_names() {
        let model = ToyCnn::new("m", vec!["cat".into(), "dog".into()], 3, 8, &[4], 0).unwrap();
        assert_eq!(model.class_index("dog").unwrap(), 1);
        assert!(matches!(
            model.class_index("bird"),
            Err(Error::Mapping(_))
        ));
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
    }
}
