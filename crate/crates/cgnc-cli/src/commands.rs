//! Subcommand implementations. Errors split into configuration problems
//! (exit 2) and runtime failures (exit 1).

use std::path::{Path, PathBuf};

use ndarray::Array4;

use cgnc::classifier::{save_classifier, Classifier, ToyCnn};
use cgnc::data::{Dataset, ImageBatch};
use cgnc::error::Error as CoreError;
use cgnc::evaluation::{evaluate, load_png, save_png, visualize, AttackReport, EvalOptions};
use cgnc::generator::{generate, make_adversarial};
use cgnc::training::{
    load_checkpoint, save_checkpoint, MetricsLog, TargetClass, TargetClassSet, TrainSession,
    TrainSinks,
};

use crate::config::{build_classifier, make_encoder, ConfigError, RunConfig};

/// Command failure with its exit code semantics.
#[derive(Debug)]
pub enum CmdError {
    /// Invalid configuration or arguments (exit 2).
    Config(String),
    /// Runtime failure (exit 1).
    Runtime(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Config(_) => 2,
            CmdError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CmdError::Config(m) | CmdError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        CmdError::Config(e.0)
    }
}

impl From<CoreError> for CmdError {
    fn from(e: CoreError) -> Self {
        CmdError::Runtime(e.to_string())
    }
}

pub type CmdResult<T> = Result<T, CmdError>;

pub struct TrainArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub epochs: Option<usize>,
}

pub struct FinetuneArgs {
    pub config: PathBuf,
    pub class: String,
    pub checkpoint: Option<PathBuf>,
    pub mask_ratio: Option<f64>,
    pub patch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

pub struct AttackArgs {
    pub checkpoint: PathBuf,
    pub target: String,
    pub epsilon: Option<f64>,
    pub output_dir: PathBuf,
    pub images: Vec<PathBuf>,
}

pub struct EvaluateArgs {
    pub config: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

pub struct ReportArgs {
    pub report: PathBuf,
    pub csv: Option<PathBuf>,
}

pub struct VisualizeArgs {
    pub checkpoint: PathBuf,
    pub target: String,
    pub epsilon: Option<f64>,
    pub output: PathBuf,
    pub images: Vec<PathBuf>,
}

fn load_config(path: &Path, seed: Option<u64>, output_dir: Option<&PathBuf>) -> CmdResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(dir) = output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_output_dir(dir: &Path) -> CmdResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CmdError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_resolved_config(cfg: &RunConfig) -> CmdResult<()> {
    let path = cfg.output_dir.join("config.resolved.json");
    let text = serde_json::to_string_pretty(cfg)
        .map_err(|e| CmdError::Runtime(format!("config snapshot: {e}")))?;
    cgnc::checkpoint::atomic_write(&path, text.as_bytes()).map_err(CmdError::from)
}

/// Build (and persist, when freshly trained) the surrogate classifier.
fn surrogate_for(cfg: &RunConfig, dataset: &Dataset, persist: bool) -> CmdResult<ToyCnn> {
    let cached = cfg.output_dir.join("surrogate.clf");
    if cfg.train.surrogate.checkpoint.is_none() && cached.is_file() {
        if let Ok(model) = cgnc::classifier::load_classifier(&cached) {
            return Ok(model);
        }
    }
    let model = build_classifier(&cfg.train.surrogate, dataset, cfg.data.image_size)?;
    if persist && cfg.train.surrogate.checkpoint.is_none() {
        save_classifier(&model, &cached)?;
    }
    Ok(model)
}

pub fn cmd_train(args: TrainArgs) -> CmdResult<()> {
    let mut cfg = load_config(&args.config, args.seed, args.output_dir.as_ref())?;
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
        cfg.validate()?;
    }
    ensure_output_dir(&cfg.output_dir)?;
    write_resolved_config(&cfg)?;

    let dataset = Dataset::open(&cfg.data.train)?;
    let surrogate = surrogate_for(&cfg, &dataset, true)?;
    // resolve targets now so a bad class name is a config error, not a
    // mid-training failure
    let names: Vec<String> = if cfg.train.target_classes.is_empty() {
        dataset.class_names().to_vec()
    } else {
        cfg.train.target_classes.clone()
    };
    TargetClassSet::resolve(&names, &surrogate)
        .map_err(|e| CmdError::Config(format!("train.target_classes: {e}")))?;

    let encoder = cfg.text_encoder()?;
    let session = TrainSession {
        dataset: &dataset,
        surrogate: &surrogate,
        encoder: encoder.as_ref(),
        encoder_label: cfg.conditioning.text_encoder.clone(),
        prompt_template: cfg.conditioning.prompt_template.clone(),
        hyper: cfg.generator_hyper()?,
        config: cfg.train_config(),
        image_size: cfg.data.image_size,
    };
    let mut metrics = MetricsLog::create(&cfg.output_dir.join("metrics.jsonl"))?;
    let mut sinks = TrainSinks {
        metrics: Some(&mut metrics),
        checkpoint_dir: Some(&cfg.output_dir),
    };
    let ckpt = session.train(&mut sinks)?;
    let path = cfg.output_dir.join("checkpoint.cgnc");
    save_checkpoint(&ckpt, &path)?;
    println!(
        "trained {} classes for {} epochs; checkpoint at {}",
        ckpt.classes.len(),
        cfg.train.epochs,
        path.display()
    );
    Ok(())
}

fn class_slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_alphanumeric() { c } else { '-' })
        .collect()
}

pub fn cmd_finetune(args: FinetuneArgs) -> CmdResult<()> {
    let mut cfg = load_config(&args.config, args.seed, args.output_dir.as_ref())?;
    if let Some(v) = args.mask_ratio {
        cfg.finetune.mask_ratio = v;
    }
    if let Some(v) = args.patch_size {
        cfg.finetune.patch_size = v;
    }
    if let Some(v) = args.epochs {
        cfg.finetune.epochs = v;
    }
    cfg.validate()?;
    ensure_output_dir(&cfg.output_dir)?;

    let ckpt_path = args
        .checkpoint
        .unwrap_or_else(|| cfg.output_dir.join("checkpoint.cgnc"));
    let base = load_checkpoint(&ckpt_path)?;
    if base.classes.position(&args.class).is_none() {
        return Err(CmdError::Config(format!(
            "unknown class {:?}; available classes: {}",
            args.class,
            base.classes.names().join(", ")
        )));
    }

    let dataset = Dataset::open(&cfg.data.train)?;
    let surrogate = surrogate_for(&cfg, &dataset, false)?;
    let encoder = make_encoder(&base.text_encoder, base.seed)?;
    let session = TrainSession {
        dataset: &dataset,
        surrogate: &surrogate,
        encoder: encoder.as_ref(),
        encoder_label: base.text_encoder.clone(),
        prompt_template: base.prompt_template.clone(),
        hyper: base.state.hyper.clone(),
        config: base.train_config.clone(),
        image_size: cfg.data.image_size,
    };
    let slug = class_slug(&args.class);
    let mut metrics = MetricsLog::create(&cfg.output_dir.join(format!("metrics_finetune_{slug}.jsonl")))?;
    let mut sinks = TrainSinks {
        metrics: Some(&mut metrics),
        checkpoint_dir: None,
    };
    let ft = cfg.finetune_config();
    let tuned = session.masked_finetune(&base, &args.class, &ft, &mut sinks)?;
    let path = cfg.output_dir.join(format!("checkpoint_{slug}.cgnc"));
    save_checkpoint(&tuned, &path)?;
    println!(
        "fine-tuned on {:?} (mask_ratio {}, patch {}, {} epochs); checkpoint at {}",
        args.class,
        ft.mask_ratio,
        ft.patch_size,
        ft.epochs,
        path.display()
    );
    Ok(())
}

fn load_image_file(path: &Path) -> CmdResult<ImageBatch> {
    let img = load_png(path).map_err(|e| CmdError::Runtime(e.to_string()))?;
    let (c, h, w) = img.dim();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(CmdError::Runtime(format!(
            "{}: image size {h}x{w} must be divisible by 4",
            path.display()
        )));
    }
    let mut pixels = Array4::zeros((1, c, h, w));
    pixels.index_axis_mut(ndarray::Axis(0), 0).assign(&img);
    ImageBatch::new(pixels, vec![path.display().to_string()], "cli")
        .map_err(|e| CmdError::Runtime(e.to_string()))
}

pub fn cmd_attack(args: AttackArgs) -> CmdResult<()> {
    if args.images.is_empty() {
        return Err(CmdError::Config("no input images given".into()));
    }
    let ckpt = load_checkpoint(&args.checkpoint)?;
    if ckpt.classes.position(&args.target).is_none() {
        return Err(CmdError::Config(format!(
            "unknown target {:?}; available classes: {}",
            args.target,
            ckpt.classes.names().join(", ")
        )));
    }
    let encoder = make_encoder(&ckpt.text_encoder, ckpt.seed)?;
    let cond = ckpt.condition_for(&args.target, encoder.as_ref())?;
    let epsilon = args.epsilon.unwrap_or(ckpt.train_config.epsilon);
    if epsilon < 0.0 {
        return Err(CmdError::Config("epsilon must be >= 0".into()));
    }
    ensure_output_dir(&args.output_dir)?;

    for path in &args.images {
        let batch = load_image_file(path)?;
        let p = generate(&batch, &cond, epsilon, &ckpt.state)?;
        let adv = make_adversarial(&batch, &p)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let adv_path = args.output_dir.join(format!("{stem}.adv.png"));
        save_png(&adv.pixels.index_axis(ndarray::Axis(0), 0).to_owned(), &adv_path)?;
        let viz_path = args.output_dir.join(format!("{stem}.viz.png"));
        visualize(&p, &batch, &viz_path)?;
        println!(
            "{}: max|delta| = {:.6} (budget {:.6}); wrote {} and {}",
            path.display(),
            p.max_abs(),
            epsilon,
            adv_path.display(),
            viz_path.display()
        );
    }
    println!("no classifier was queried; generation needs only the checkpoint");
    Ok(())
}

pub fn cmd_evaluate(args: EvaluateArgs) -> CmdResult<()> {
    let cfg = load_config(&args.config, args.seed, args.output_dir.as_ref())?;
    let eval_section = cfg
        .eval
        .as_ref()
        .ok_or_else(|| CmdError::Config("config has no `eval` section".into()))?;
    if eval_section.victims.is_empty() {
        return Err(CmdError::Config("eval.victims is empty".into()));
    }
    let eval_spec = cfg
        .data
        .eval
        .as_ref()
        .ok_or_else(|| CmdError::Config("config has no `data.eval` dataset".into()))?;
    ensure_output_dir(&cfg.output_dir)?;

    let ckpt_path = args
        .checkpoint
        .unwrap_or_else(|| cfg.output_dir.join("checkpoint.cgnc"));
    let ckpt = load_checkpoint(&ckpt_path)?;

    let targets = match &eval_section.targets {
        None => ckpt.classes.clone(),
        Some(names) => {
            let entries = names
                .iter()
                .map(|n| {
                    ckpt.classes
                        .position(n)
                        .map(|p| ckpt.classes.get(p).clone())
                        .ok_or_else(|| {
                            CmdError::Config(format!(
                                "eval target {n:?} not in checkpoint classes: {}",
                                ckpt.classes.names().join(", ")
                            ))
                        })
                })
                .collect::<CmdResult<Vec<TargetClass>>>()?;
            TargetClassSet::new(entries).map_err(|e| CmdError::Config(e.to_string()))?
        }
    };

    let train_set = Dataset::open(&cfg.data.train)?;
    let eval_set = Dataset::open(eval_spec)?;
    let mut victims: Vec<ToyCnn> = Vec::new();
    for spec in &eval_section.victims {
        let model = build_classifier(spec, &train_set, cfg.data.image_size).map_err(|e| {
            CmdError::Runtime(format!("victim `{}` construction failed: {e}", spec.name))
        })?;
        victims.push(model);
    }
    let victim_refs: Vec<&dyn Classifier> = victims.iter().map(|v| v as &dyn Classifier).collect();

    let encoder = make_encoder(&ckpt.text_encoder, ckpt.seed)?;
    let report = evaluate(
        &ckpt,
        &victim_refs,
        &eval_set,
        &targets,
        &eval_section.defenses,
        encoder.as_ref(),
        &EvalOptions {
            image_size: cfg.data.image_size,
            batch_size: eval_section.batch_size,
            epsilon: eval_section.epsilon,
            max_samples: eval_section.n_samples,
        },
    )?;
    let json_path = cfg.output_dir.join("report.json");
    let csv_path = cfg.output_dir.join("report.csv");
    report.write_json(&json_path)?;
    report.write_csv(&csv_path)?;
    print!("{}", report.render_summary());
    println!("report written to {} and {}", json_path.display(), csv_path.display());
    Ok(())
}

pub fn cmd_report(args: ReportArgs) -> CmdResult<()> {
    let report = AttackReport::read_json(&args.report)?;
    print!("{}", report.render_summary());
    if let Some(csv) = &args.csv {
        report.write_csv(csv)?;
        println!("csv written to {}", csv.display());
    }
    Ok(())
}

pub fn cmd_visualize(args: VisualizeArgs) -> CmdResult<()> {
    if args.images.is_empty() {
        return Err(CmdError::Config("no input images given".into()));
    }
    let ckpt = load_checkpoint(&args.checkpoint)?;
    if ckpt.classes.position(&args.target).is_none() {
        return Err(CmdError::Config(format!(
            "unknown target {:?}; available classes: {}",
            args.target,
            ckpt.classes.names().join(", ")
        )));
    }
    let encoder = make_encoder(&ckpt.text_encoder, ckpt.seed)?;
    let cond = ckpt.condition_for(&args.target, encoder.as_ref())?;
    let epsilon = args.epsilon.unwrap_or(ckpt.train_config.epsilon);

    // all images in one grid; they must share a size
    let mut batches = Vec::new();
    for path in &args.images {
        batches.push(load_image_file(path)?);
    }
    let dims = batches[0].pixels.dim();
    if batches.iter().any(|b| b.pixels.dim() != dims) {
        return Err(CmdError::Config(
            "all images in one visualization grid must share a size".into(),
        ));
    }
    let mut pixels = Array4::zeros((batches.len(), dims.1, dims.2, dims.3));
    let mut ids = Vec::new();
    for (i, b) in batches.iter().enumerate() {
        pixels
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&b.pixels.index_axis(ndarray::Axis(0), 0));
        ids.push(b.ids[0].clone());
    }
    let batch = ImageBatch::new(pixels, ids, "cli").map_err(|e| CmdError::Runtime(e.to_string()))?;
    let p = generate(&batch, &cond, epsilon, &ckpt.state)?;
    visualize(&p, &batch, &args.output)?;
    println!("visualization grid written to {}", args.output.display());
    Ok(())
}
