//! Run configuration: one JSON document, strictly validated before any work
//! starts. Unknown keys are rejected and every field is checked against the
//! owning module's preconditions. A single root seed is expanded per purpose;
//! per-section seeds are derived, never configured.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cgnc::classifier::{load_classifier, Classifier, ToyCnn, ToyCnnConfig};
use cgnc::conditioning::{StubTextEncoder, TableTextEncoder, TextEncoder, TEXT_EMBED_DIM};
use cgnc::data::{Dataset, DatasetSpec};
use cgnc::error::Error as CoreError;
use cgnc::evaluation::{variant_hyper, DefenseSpec, VariantKind};
use cgnc::generator::GeneratorHyper;
use cgnc::rng::derive_seed;
use cgnc::training::{FinetuneConfig, TrainConfig};

/// Exit-code-2 error: bad configuration or arguments.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub type ConfigResult<T> = Result<T, ConfigError>;

fn cfg_err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    #[serde(default)]
    pub conditioning: ConditioningSection,
    #[serde(default)]
    pub generator: GeneratorSection,
    pub train: TrainSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub eval: Option<EvalSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub image_size: usize,
    pub train: DatasetSpec,
    #[serde(default)]
    pub eval: Option<DatasetSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditioningSection {
    pub prompt_template: String,
    /// `stub` or `plugin:<path to JSON prompt->embedding table>`.
    pub text_encoder: String,
    pub attention_tokens: usize,
}

impl Default for ConditioningSection {
    fn default() -> Self {
        Self {
            prompt_template: cgnc::conditioning::DEFAULT_PROMPT_TEMPLATE.to_string(),
            text_encoder: "stub".to_string(),
            attention_tokens: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub base_width: usize,
    pub res_blocks: usize,
    pub cross_attention_count: usize,
    /// Defaults to `base_width` when omitted.
    pub attention_dim: Option<usize>,
    pub variant: String,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            base_width: 32,
            res_blocks: 6,
            cross_attention_count: 2,
            attention_dim: None,
            variant: "full".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default)]
    pub target_classes: Vec<String>,
    #[serde(default = "default_true")]
    pub use_augmented_branch: bool,
    pub surrogate: ClassifierSpec,
}

fn default_epsilon() -> f64 {
    16.0 / 255.0
}

fn default_beta1() -> f64 {
    0.5
}

fn default_beta2() -> f64 {
    0.999
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub mask_ratio: f64,
    pub patch_size: usize,
    pub learning_rate: f64,
    pub batch_size: Option<usize>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            epochs: 5,
            mask_ratio: 0.2,
            patch_size: 8,
            learning_rate: 2e-4,
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub victims: Vec<ClassifierSpec>,
    #[serde(default = "default_defenses")]
    pub defenses: Vec<DefenseSpec>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Subset of the checkpoint's class set; defaults to all of it.
    #[serde(default)]
    pub targets: Option<Vec<String>>,
    /// Cap on evaluation images; defaults to the whole eval split.
    #[serde(default)]
    pub n_samples: Option<usize>,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
}

fn default_defenses() -> Vec<DefenseSpec> {
    vec![DefenseSpec::None]
}

fn default_eval_batch() -> usize {
    32
}

/// A classifier either trained on the configured dataset or loaded from an
/// archive; exactly one source must be given.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub name: String,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub train: Option<ClassifierTrainSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainSpec {
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainSpec {
    fn default() -> Self {
        let d = ToyCnnConfig::default();
        Self {
            widths: d.widths,
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> ConfigResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| cfg_err(format!("invalid config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Check every field against the owning module's preconditions.
    pub fn validate(&self) -> ConfigResult<()> {
        if self.data.image_size < 8 {
            return Err(cfg_err("data.image_size must be at least 8"));
        }
        if self.data.image_size % 4 != 0 {
            return Err(cfg_err(
                "data.image_size must be divisible by the generator downsampling factor 4",
            ));
        }
        validate_dataset(&self.data.train, "data.train")?;
        if let Some(eval) = &self.data.eval {
            validate_dataset(eval, "data.eval")?;
        }

        cgnc::conditioning::build_prompt("probe", &self.conditioning.prompt_template)
            .map_err(|e| cfg_err(format!("conditioning.prompt_template: {e}")))?;
        if self.conditioning.attention_tokens == 0
            || TEXT_EMBED_DIM % self.conditioning.attention_tokens != 0
        {
            return Err(cfg_err(format!(
                "conditioning.attention_tokens must divide {TEXT_EMBED_DIM}"
            )));
        }
        if self.conditioning.text_encoder != "stub"
            && !self.conditioning.text_encoder.starts_with("plugin:")
        {
            return Err(cfg_err(
                "conditioning.text_encoder must be `stub` or `plugin:<path>`",
            ));
        }

        self.generator_hyper()?
            .validate()
            .map_err(|e| cfg_err(format!("generator: {e}")))?;

        self.train_config()
            .validate()
            .map_err(|e| cfg_err(format!("train: {e}")))?;
        validate_classifier_spec(&self.train.surrogate, "train.surrogate")?;

        self.finetune_config()
            .validate()
            .map_err(|e| cfg_err(format!("finetune: {e}")))?;

        if let Some(eval) = &self.eval {
            for (i, v) in eval.victims.iter().enumerate() {
                validate_classifier_spec(v, &format!("eval.victims[{i}]"))?;
            }
            for (i, d) in eval.defenses.iter().enumerate() {
                d.validate()
                    .map_err(|e| cfg_err(format!("eval.defenses[{i}]: {e}")))?;
            }
            if let Some(eps) = eval.epsilon {
                if !(eps >= 0.0 && eps <= 1.0) {
                    return Err(cfg_err("eval.epsilon must lie in [0, 1]"));
                }
            }
            if eval.batch_size == 0 {
                return Err(cfg_err("eval.batch_size must be positive"));
            }
        }
        Ok(())
    }

    pub fn variant_kind(&self) -> ConfigResult<VariantKind> {
        self.generator
            .variant
            .parse()
            .map_err(|e| cfg_err(format!("generator.variant: {e}")))
    }

    /// Assemble the architecture from the generator + conditioning sections.
    pub fn generator_hyper(&self) -> ConfigResult<GeneratorHyper> {
        let base = GeneratorHyper {
            in_channels: 3,
            base_width: self.generator.base_width,
            res_blocks: self.generator.res_blocks,
            cross_attention_count: self.generator.cross_attention_count,
            attention_dim: self.generator.attention_dim.unwrap_or(self.generator.base_width),
            attention_tokens: self.conditioning.attention_tokens,
            epsilon: self.train.epsilon,
            ..GeneratorHyper::default()
        };
        Ok(variant_hyper(self.variant_kind()?, &base))
    }

    /// Library train config; the seed is derived from the root seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            epsilon: self.train.epsilon,
            adam_beta1: self.train.adam_beta1,
            adam_beta2: self.train.adam_beta2,
            target_classes: self.train.target_classes.clone(),
            // the root seed: training streams namespace themselves by purpose
            seed: self.seed,
            use_augmented_branch: self.train.use_augmented_branch,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.finetune.epochs,
            mask_ratio: self.finetune.mask_ratio,
            patch_size: self.finetune.patch_size,
            learning_rate: self.finetune.learning_rate,
            batch_size: self.finetune.batch_size,
            seed: derive_seed(self.seed, "finetune", 0),
        }
    }

    /// Instantiate the configured text encoder.
    pub fn text_encoder(&self) -> ConfigResult<Box<dyn TextEncoder>> {
        make_encoder(&self.conditioning.text_encoder, self.seed)
    }
}

/// Resolve an encoder selector string (also recorded in checkpoints).
pub fn make_encoder(selector: &str, root_seed: u64) -> ConfigResult<Box<dyn TextEncoder>> {
    if selector == "stub" {
        Ok(Box::new(StubTextEncoder::new(derive_seed(
            root_seed,
            "text-encoder",
            0,
        ))))
    } else if let Some(path) = selector.strip_prefix("plugin:") {
        let enc = TableTextEncoder::from_path(Path::new(path))
            .map_err(|e| cfg_err(format!("text encoder plugin: {e}")))?;
        Ok(Box::new(enc))
    } else {
        Err(cfg_err(format!(
            "unknown text encoder selector {selector:?} (expected `stub` or `plugin:<path>`)"
        )))
    }
}

fn validate_dataset(spec: &DatasetSpec, field: &str) -> ConfigResult<()> {
    if let DatasetSpec::SyntheticShapes {
        num_classes,
        samples_per_class,
        image_size,
        ..
    } = spec
    {
        if *num_classes < 2 || *num_classes > cgnc::data::MAX_SYNTHETIC_CLASSES {
            return Err(cfg_err(format!(
                "{field}.num_classes must lie in [2, {}]",
                cgnc::data::MAX_SYNTHETIC_CLASSES
            )));
        }
        if *samples_per_class == 0 {
            return Err(cfg_err(format!("{field}.samples_per_class must be positive")));
        }
        if *image_size < 8 {
            return Err(cfg_err(format!("{field}.image_size must be at least 8")));
        }
    }
    Ok(())
}

fn validate_classifier_spec(spec: &ClassifierSpec, field: &str) -> ConfigResult<()> {
    if spec.name.is_empty() {
        return Err(cfg_err(format!("{field}.name must be nonempty")));
    }
    match (&spec.checkpoint, &spec.train) {
        (Some(_), Some(_)) => Err(cfg_err(format!(
            "{field}: give either `checkpoint` or `train`, not both"
        ))),
        (None, None) => Err(cfg_err(format!(
            "{field}: needs a `checkpoint` path or a `train` spec"
        ))),
        (None, Some(t)) => {
            if t.widths.is_empty() {
                return Err(cfg_err(format!("{field}.train.widths must be nonempty")));
            }
            if t.epochs == 0 || t.batch_size == 0 {
                return Err(cfg_err(format!(
                    "{field}.train.epochs and batch_size must be positive"
                )));
            }
            if !(t.learning_rate > 0.0) {
                return Err(cfg_err(format!("{field}.train.learning_rate must be positive")));
            }
            Ok(())
        }
        (Some(_), None) => Ok(()),
    }
}

/// Build (or load) a classifier per its spec; trained classifiers are fit on
/// the given dataset.
pub fn build_classifier(
    spec: &ClassifierSpec,
    dataset: &Dataset,
    image_size: usize,
) -> Result<ToyCnn, CoreError> {
    match (&spec.checkpoint, &spec.train) {
        (Some(path), _) => {
            let model = load_classifier(path)?;
            if model.name() != spec.name {
                log::warn!(
                    "classifier at {} is named {:?}, config calls it {:?}",
                    path.display(),
                    model.name(),
                    spec.name
                );
            }
            Ok(model)
        }
        (None, Some(t)) => {
            let cfg = ToyCnnConfig {
                widths: t.widths.clone(),
                epochs: t.epochs,
                batch_size: t.batch_size,
                learning_rate: t.learning_rate,
                seed: t.seed,
            };
            ToyCnn::fit(spec.name.clone(), dataset, image_size, &cfg)
        }
        (None, None) => Err(CoreError::Config(format!(
            "classifier {:?} has no source",
            spec.name
        ))),
    }
}
