//! The `flarecast` command line: flag and config-file resolution, and one
//! function per subcommand.
//!
//! Options can also come from a `key = value` file passed with `--config`;
//! keys are long flag names without the dashes. Flags win over the file,
//! and `--out` falls back to `$FLARECAST_OUT`, then `flarecast-out`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};

use crate::attribution::{
    explain as explain_method, render_map, BaselineSet, ExplainOptions, Method, RenderMode,
    DEFAULT_BASELINE_COUNT,
};
use crate::autodiff::Tensor;
use crate::data::labeling::timestamp_from_stem;
use crate::data::synth::{CATALOG_FILE, MANIFEST_FILE};
use crate::data::{
    fold_split, label_samples, load_image, load_manifest, save_manifest, synth_with, Catalog,
    DatasetSummary, Example, Label, LabeledSample, Partition, SynthOptions, NEUTRAL_GRAY,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    self, location_report, save_csv, verify_tables, write_location_csv, FoldEvaluation,
    SkillReport, DEFAULT_THRESHOLD,
};
use crate::model::{load_model, FlareModel, ModelConfig};
use crate::training::{run_fold, Precision, TrainConfig};

pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_OUT: &str = "flarecast-out";
pub const OUT_ENV: &str = "FLARECAST_OUT";
pub const DEFAULT_IG_STEPS: usize = 128;

const MODELS_DIR: &str = "models";
const METRICS_DIR: &str = "metrics";
const EVALUATION_DIR: &str = "evaluation";
const EXPLAIN_DIR: &str = "explain";

#[derive(Parser, Debug)]
#[command(
    name = "flarecast",
    version,
    about = "Full-disk solar flare prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Write a synthetic magnetogram dataset, catalog and manifest.
    Synth,
    /// Label a directory of images against a flare catalog.
    Label,
    /// Report per-partition counts and write one manifest per partition.
    Partition,
    /// Train one model per held-out partition.
    Train,
    /// Score trained models on their held-out partitions.
    Evaluate,
    /// Write attribution maps for one sample.
    Explain,
    /// Recompute the published skill scores from their confusion matrices.
    VerifyTables,
}

#[derive(clap::Args, Debug, Default)]
struct Flags {
    /// key = value file with defaults for any flag below
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [env: FLARECAST_OUT]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Flare catalog CSV [default: <out>/catalog.csv]
    #[arg(long, global = true)]
    catalog: Option<PathBuf>,
    /// Image directory to label
    #[arg(long, global = true)]
    images: Option<PathBuf>,
    /// Sample manifest [default: <out>/manifest.csv]
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Model directory, or a directory of fold-N models [default: <out>/models]
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// paper or desk
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of synthetic samples
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    flare_rate: Option<f64>,
    /// Side of synthetic images in pixels
    #[arg(long, global = true)]
    size: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// f64 or f32
    #[arg(long, global = true)]
    precision: Option<String>,
    /// FL probability at or above which a sample is predicted FL
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Held-out partition 1-4 [default: all for train/evaluate, 1 for explain]
    #[arg(long, global = true)]
    fold: Option<u8>,
    /// Comma-separated subset of guided-gradcam, deepshap, ig
    #[arg(long, global = true)]
    method: Option<String>,
    /// Integrated-gradients steps
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Deep SHAP baseline count
    #[arg(long, global = true)]
    baselines: Option<usize>,
    /// zero, gray, or an image path
    #[arg(long, global = true)]
    ig_baseline: Option<String>,
    /// Manifest row to explain [default: first FL sample of the fold]
    #[arg(long, global = true)]
    sample: Option<usize>,
    /// Image to explain instead of a manifest row
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// FL or NF
    #[arg(long, global = true)]
    target: Option<String>,
    /// Upper bound on worker threads
    #[arg(long, global = true)]
    threads: Option<usize>,
}

const CONFIG_KEYS: &[&str] = &[
    "out",
    "catalog",
    "images",
    "manifest",
    "model",
    "preset",
    "seed",
    "n",
    "flare-rate",
    "size",
    "epochs",
    "batch",
    "lr",
    "precision",
    "threshold",
    "fold",
    "method",
    "steps",
    "baselines",
    "ig-baseline",
    "sample",
    "input",
    "target",
    "threads",
];

#[derive(Debug, Clone, PartialEq)]
pub enum IgBaseline {
    Zero,
    Gray,
    Image(PathBuf),
}

/// Fully resolved options for one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub out: PathBuf,
    pub catalog: PathBuf,
    pub images: Option<PathBuf>,
    pub manifest: PathBuf,
    pub model: PathBuf,
    pub preset: String,
    pub seed: u64,
    pub n: usize,
    pub flare_rate: f64,
    pub size: usize,
    pub train: TrainConfig,
    pub threshold: f64,
    pub fold: Option<Partition>,
    pub methods: Vec<Method>,
    pub steps: usize,
    pub baselines: usize,
    pub ig_baseline: IgBaseline,
    pub sample: Option<usize>,
    pub input: Option<PathBuf>,
    pub target: Label,
    pub threads: usize,
}

/// Parses a `key = value` file. Blank lines and `#` comments are skipped.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Cli(format!(
                "config line {}: expected key = value",
                i + 1
            )));
        };
        let key = k.trim().replace('_', "-");
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(Error::Cli(format!(
                "config line {}: unknown key {key:?}",
                i + 1
            )));
        }
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Cli(format!(
                "config line {}: duplicate key {key:?}",
                i + 1
            )));
        }
    }
    Ok(map)
}

struct Layers {
    file: BTreeMap<String, String>,
}

impl Layers {
    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.file
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Cli(format!("config {key} = {v:?}: {e}")))
            })
            .transpose()
    }
}

fn absolute(p: PathBuf) -> Result<PathBuf> {
    std::path::absolute(&p).map_err(|e| Error::io(p, e))
}

fn parse_methods(s: &str) -> Result<Vec<Method>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let m: Method = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::Cli("--method lists no methods".into()));
    }
    Ok(out)
}

impl RunConfig {
    fn resolve(command: Command, flags: Flags, env_out: Option<PathBuf>) -> Result<RunConfig> {
        let file = match &flags.config {
            Some(p) => parse_config_file(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => BTreeMap::new(),
        };
        let l = Layers { file };
        let out = absolute(
            l.get(flags.out, "out")?
                .or(env_out)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
        )?;
        let path_or = |flag: Option<PathBuf>, key: &str, default: &str| -> Result<PathBuf> {
            absolute(l.get(flag, key)?.unwrap_or_else(|| out.join(default)))
        };
        let catalog = path_or(flags.catalog, "catalog", CATALOG_FILE)?;
        let manifest = path_or(flags.manifest, "manifest", MANIFEST_FILE)?;
        let model = path_or(flags.model, "model", MODELS_DIR)?;
        let images = l.get(flags.images, "images")?.map(absolute).transpose()?;
        let input = l.get(flags.input, "input")?.map(absolute).transpose()?;

        let preset = l
            .get(flags.preset, "preset")?
            .unwrap_or_else(|| "desk".into());
        ModelConfig::preset(&preset)?;
        let seed = l.get(flags.seed, "seed")?.unwrap_or(DEFAULT_SEED);
        let defaults = TrainConfig::default();
        let precision: Precision = match l.get(flags.precision, "precision")? {
            Some(s) => s.parse::<Precision>()?,
            None => Precision::default(),
        };
        let train = TrainConfig {
            epochs: l.get(flags.epochs, "epochs")?.unwrap_or(defaults.epochs),
            batch_size: l.get(flags.batch, "batch")?.unwrap_or(defaults.batch_size),
            initial_lr: l.get(flags.lr, "lr")?.unwrap_or(defaults.initial_lr),
            lr_decay: defaults.lr_decay,
            seed,
            precision,
        };
        train.validate()?;
        let threshold = l
            .get(flags.threshold, "threshold")?
            .unwrap_or(DEFAULT_THRESHOLD);
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Cli(format!(
                "threshold {threshold} is outside [0, 1]"
            )));
        }
        let fold = l.get(flags.fold, "fold")?.map(Partition::new).transpose()?;
        let methods = match l.get(flags.method, "method")? {
            Some(s) => parse_methods(&s)?,
            None => vec![
                Method::GuidedGradCam,
                Method::DeepShap,
                Method::IntegratedGradients,
            ],
        };
        let ig_baseline = match l.get(flags.ig_baseline, "ig-baseline")?.as_deref() {
            None | Some("zero") => IgBaseline::Zero,
            Some("gray") | Some("grey") => IgBaseline::Gray,
            Some(path) => IgBaseline::Image(absolute(PathBuf::from(path))?),
        };
        let target: Label = match l.get(flags.target, "target")? {
            Some(s) => s.parse()?,
            None => Label::FL,
        };
        let threads = match l.get(flags.threads, "threads")? {
            Some(0) => return Err(Error::Cli("--threads must be at least 1".into())),
            Some(t) => t,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        let cfg = RunConfig {
            command,
            out,
            catalog,
            images,
            manifest,
            model,
            preset,
            seed,
            n: l.get(flags.n, "n")?.unwrap_or(7000),
            flare_rate: l.get(flags.flare_rate, "flare-rate")?.unwrap_or(1.0 / 7.0),
            size: l.get(flags.size, "size")?.unwrap_or(64),
            train,
            threshold,
            fold,
            methods,
            steps: l.get(flags.steps, "steps")?.unwrap_or(DEFAULT_IG_STEPS),
            baselines: l
                .get(flags.baselines, "baselines")?
                .unwrap_or(DEFAULT_BASELINE_COUNT),
            ig_baseline,
            sample: l.get(flags.sample, "sample")?,
            input,
            target,
            threads,
        };
        if cfg.steps == 0 || cfg.baselines == 0 || cfg.size == 0 {
            return Err(Error::Cli(
                "--steps, --baselines and --size must be positive".into(),
            ));
        }
        Ok(cfg)
    }

    /// Parses `argv` (program name first) without consulting the
    /// environment.
    pub fn from_args<I, T>(argv: I) -> Result<RunConfig>
    where
        I: IntoIterator<Item = T>,
        T: Into<OsString> + Clone,
    {
        let cli = Cli::try_parse_from(argv).map_err(|e| Error::Cli(e.to_string()))?;
        Self::resolve(cli.command, cli.flags, None)
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig::preset(&self.preset).expect("preset checked when resolved")
    }

    fn folds(&self) -> Vec<Partition> {
        self.fold.map_or(Partition::ALL.to_vec(), |f| vec![f])
    }
}

/// Parses `argv`, runs the subcommand, and returns the process exit code:
/// 0 on success, 1 on failure, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let env_out = std::env::var_os(OUT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from);
    let result = RunConfig::resolve(cli.command, cli.flags, env_out).and_then(|cfg| execute(&cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Runs an already resolved configuration.
pub fn execute(cfg: &RunConfig) -> Result<()> {
    log::debug!("{cfg:?}");
    match cfg.command {
        Command::Synth => synth(cfg),
        Command::Label => label(cfg),
        Command::Partition => partition(cfg),
        Command::Train => train(cfg),
        Command::Evaluate => evaluate(cfg),
        Command::Explain => explain(cfg),
        Command::VerifyTables => verify(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let opts = SynthOptions {
        image_size: cfg.size,
        ..SynthOptions::new(cfg.n, cfg.flare_rate, cfg.seed)
    };
    let data = synth_with(&opts)?;
    create_dir(&cfg.out)?;
    let samples = data.write(&cfg.out)?;
    println!(
        "wrote {} images and {} catalog events to {}",
        samples.len(),
        data.events.len(),
        cfg.out.display()
    );
    println!("{}", DatasetSummary::of(&samples, 0));
    Ok(())
}

fn label(cfg: &RunConfig) -> Result<()> {
    let dir = cfg
        .images
        .as_ref()
        .ok_or_else(|| Error::Cli("label needs --images".into()))?;
    let catalog = Catalog::load(&cfg.catalog)?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    files.retain(|p| {
        p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm"))
    });
    files.sort();
    let mut stamped = Vec::new();
    for f in files {
        match timestamp_from_stem(&f) {
            Some(t) => stamped.push((t, f)),
            None => log::warn!("skipping {}: no timestamp in file name", f.display()),
        }
    }
    stamped.sort();
    if let Some(w) = stamped.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Data(format!(
            "{} and {} share a timestamp",
            w[0].1.display(),
            w[1].1.display()
        )));
    }
    let timestamps: Vec<_> = stamped.iter().map(|s| s.0).collect();
    let paths: BTreeMap<_, _> = stamped.iter().cloned().collect();
    let manifest_path = cfg.out.join(MANIFEST_FILE);
    let samples = label_samples(&timestamps, &catalog.events, |t| {
        relative_to(&cfg.out, &paths[t])
    })?;
    create_dir(&cfg.out)?;
    save_manifest(&samples, &manifest_path)?;
    println!(
        "labeled {} images into {}",
        samples.len(),
        manifest_path.display()
    );
    println!("{}", DatasetSummary::of(&samples, catalog.skipped_rows));
    Ok(())
}

/// `path` relative to `dir` when it lies inside it, so that manifests under
/// the output directory do not depend on where that directory is.
fn relative_to(dir: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(dir)
        .map_or(path.to_path_buf(), Path::to_path_buf)
}

fn partition(cfg: &RunConfig) -> Result<()> {
    let samples = load_manifest(&cfg.manifest)?;
    let summary = DatasetSummary::of(&samples, 0);
    create_dir(&cfg.out)?;
    let counts = cfg.out.join("partitions.csv");
    save_csv(&counts, |mut w| {
        use std::io::Write;
        let io = |e| Error::io(&counts, e);
        writeln!(w, "partition,nf,fl").map_err(io)?;
        for (i, c) in summary.counts.iter().enumerate() {
            writeln!(w, "{},{},{}", i + 1, c[0], c[1]).map_err(io)?;
        }
        w.flush().map_err(io)
    })?;
    for p in Partition::ALL {
        let part: Vec<LabeledSample> = samples
            .iter()
            .filter(|s| s.partition == p)
            .map(|s| LabeledSample {
                image_path: relative_to(&cfg.out, &s.image_path),
                ..s.clone()
            })
            .collect();
        save_manifest(&part, &cfg.out.join(format!("partition-{p}.csv")))?;
    }
    println!("{summary}");
    Ok(())
}

fn load_images(samples: &[LabeledSample], size: usize) -> Result<Vec<Tensor>> {
    samples
        .iter()
        .map(|s| load_image(&s.image_path, size))
        .collect()
}

fn fold_dir(root: &Path, fold: Partition) -> PathBuf {
    root.join(format!("fold-{fold}"))
}

fn train(cfg: &RunConfig) -> Result<()> {
    let model_config = cfg.model_config();
    let samples = load_manifest(&cfg.manifest)?;
    let events = Catalog::load(&cfg.catalog)?.events;
    let images = load_images(&samples, model_config.input_size)?;
    create_dir(&cfg.out.join(METRICS_DIR))?;
    for fold in cfg.folds() {
        let run = run_fold(
            &model_config,
            &samples,
            &images,
            &events,
            fold,
            &cfg.train,
            cfg.threshold,
            |_, _| Ok(()),
        )?;
        let dir = fold_dir(&cfg.model, fold);
        run.model.save(&dir)?;
        run.log
            .save_csv(&cfg.out.join(METRICS_DIR).join(format!("fold-{fold}.csv")))?;
        let cm = run.evaluation.matrix;
        println!(
            "fold {fold}: final loss {:.4}, held-out {cm}, model in {}",
            run.log.final_loss().unwrap_or(f64::NAN),
            dir.display()
        );
    }
    Ok(())
}

fn evaluate(cfg: &RunConfig) -> Result<()> {
    let samples = load_manifest(&cfg.manifest)?;
    let events = Catalog::load(&cfg.catalog)?.events;
    let folds: Vec<Partition> = match cfg.fold {
        Some(f) => vec![f],
        None => Partition::ALL
            .into_iter()
            .filter(|&f| fold_dir(&cfg.model, f).is_dir())
            .collect(),
    };
    if folds.is_empty() {
        return Err(Error::Cli(format!(
            "no fold-N models under {}",
            cfg.model.display()
        )));
    }
    let mut evals: Vec<FoldEvaluation> = Vec::new();
    for fold in folds {
        let model = load_model(&fold_dir(&cfg.model, fold))?;
        let (_, test_idx) = fold_split(&samples, fold);
        let test: Vec<LabeledSample> = test_idx.iter().map(|&i| samples[i].clone()).collect();
        let images = load_images(&test, model.config.input_size)?;
        let refs: Vec<&Tensor> = images.iter().collect();
        evals.push(evaluation::evaluate(
            format!("Fold-{fold}"),
            &model.graph,
            &test,
            &refs,
            cfg.threshold,
            &events,
        )?);
    }
    let report = SkillReport::from_folds(&evals)?;
    let dir = cfg.out.join(EVALUATION_DIR);
    create_dir(&dir)?;
    save_csv(&dir.join("folds.csv"), |w| report.write_folds_csv(w))?;
    save_csv(&dir.join("groups.csv"), |w| report.write_groups_csv(w))?;
    let predictions: Vec<_> = evals.iter().flat_map(|e| e.predictions.clone()).collect();
    let rows = location_report(&predictions);
    save_csv(&dir.join("locations.csv"), |w| write_location_csv(&rows, w))?;
    println!("{report}");
    Ok(())
}

/// Model for `fold`: `--model` itself when it holds a model, otherwise its
/// `fold-N` subdirectory.
fn explain_model(cfg: &RunConfig, fold: Partition) -> Result<FlareModel> {
    match load_model(&cfg.model) {
        Ok(m) => Ok(m),
        Err(_) if cfg.model.join(format!("fold-{fold}")).is_dir() => {
            load_model(&fold_dir(&cfg.model, fold))
        }
        Err(e) => Err(e),
    }
}

fn explain(cfg: &RunConfig) -> Result<()> {
    let fold = cfg.fold.unwrap_or(Partition::ALL[0]);
    let model = explain_model(cfg, fold)?;
    let size = model.config.input_size;
    let needs_manifest = cfg.input.is_none() || cfg.methods.contains(&Method::DeepShap);
    let samples = if needs_manifest {
        load_manifest(&cfg.manifest)?
    } else {
        Vec::new()
    };
    let (image, stem) = match (&cfg.input, cfg.sample) {
        (Some(path), _) => (
            load_image(path, size)?,
            path.file_stem()
                .map_or("input".into(), |s| s.to_string_lossy().into_owned()),
        ),
        (None, sample) => {
            let i = match sample {
                Some(i) if i < samples.len() => i,
                Some(i) => {
                    return Err(Error::Cli(format!(
                        "--sample {i} is out of range for {} manifest rows",
                        samples.len()
                    )))
                }
                None => default_sample(&samples, fold)?,
            };
            let s = &samples[i];
            (
                load_image(&s.image_path, size)?,
                s.image_path
                    .file_stem()
                    .map_or(format!("sample-{i}"), |x| x.to_string_lossy().into_owned()),
            )
        }
    };
    let input = Tensor::stack(&[&image])?;
    let ig_baseline = match &cfg.ig_baseline {
        IgBaseline::Zero => Tensor::zeros(input.shape()),
        IgBaseline::Gray => Tensor::full(input.shape(), NEUTRAL_GRAY),
        IgBaseline::Image(p) => Tensor::stack(&[&load_image(p, size)?])?,
    };
    let baselines = if cfg.methods.contains(&Method::DeepShap) {
        let (train_idx, _) = fold_split(&samples, fold);
        let nf = train_idx
            .into_iter()
            .filter(|&i| samples[i].label == Label::NF)
            .map(|i| {
                Ok(Example {
                    image: load_image(&samples[i].image_path, size)?,
                    label: Label::NF,
                    origin: i,
                    augmentation: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        BaselineSet::sample_nf(&nf, cfg.baselines, cfg.seed)?
    } else {
        BaselineSet::constant(input.shape(), 0.0)
    };
    let opts = ExplainOptions {
        steps: cfg.steps,
        ig_baseline: &ig_baseline,
        baselines: &baselines,
    };
    let dir = cfg.out.join(EXPLAIN_DIR).join(&stem);
    create_dir(&dir)?;
    for &method in &cfg.methods {
        let map = explain_method(method, &model.graph, &input, cfg.target, &opts)?;
        let base = dir.join(method.name());
        map.save(&base.with_extension("fxt"))?;
        for (mode, suffix) in [
            (RenderMode::Heatmap, "heatmap"),
            (RenderMode::Overlay, "overlay"),
        ] {
            let png = dir.join(format!("{}_{suffix}.png", method.name()));
            render_map(&map.values, image.data(), &png, mode)?;
        }
        let gap = map.metadata.relative_gap.map_or(String::new(), |g| {
            format!(", relative completeness gap {g:.3e}")
        });
        println!("{method}: {}{gap}", base.with_extension("fxt").display());
    }
    Ok(())
}

/// First FL sample of the held-out partition, else its first sample.
fn default_sample(samples: &[LabeledSample], fold: Partition) -> Result<usize> {
    let (_, test) = fold_split(samples, fold);
    test.iter()
        .copied()
        .find(|&i| samples[i].label == Label::FL)
        .or(test.first().copied())
        .ok_or_else(|| Error::Cli(format!("partition {fold} has no samples to explain")))
}

fn verify() -> Result<()> {
    let checks = verify_tables()?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!(
        "{} of {} checks passed",
        checks.len() - failed,
        checks.len()
    );
    if failed > 0 {
        return Err(Error::Evaluation(format!("{failed} table checks failed")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(args: &[&str]) -> Result<RunConfig> {
        RunConfig::from_args(std::iter::once("flarecast").chain(args.iter().copied()))
    }

    #[test]
    fn defaults_are_fixed() {
        let c = cfg(&["train", "--out", "/tmp/x"]).unwrap();
        assert_eq!(c.seed, DEFAULT_SEED);
        assert_eq!(c.train.seed, DEFAULT_SEED);
        assert_eq!(c.preset, "desk");
        assert_eq!(c.catalog, Path::new("/tmp/x/catalog.csv"));
        assert_eq!(c.model, Path::new("/tmp/x/models"));
        assert_eq!(c.ig_baseline, IgBaseline::Zero);
        assert_eq!(c.threshold, DEFAULT_THRESHOLD);
        assert_eq!(c.methods.len(), 3);
    }

    #[test]
    fn paths_are_absolute() {
        let c = cfg(&["synth", "--out", "rel/dir"]).unwrap();
        assert!(c.out.is_absolute() && c.manifest.is_absolute());
    }

    #[test]
    fn flags_after_subcommand() {
        let c = cfg(&[
            "explain",
            "--method",
            "ig,deepshap",
            "--steps",
            "16",
            "--fold",
            "3",
        ])
        .unwrap();
        assert_eq!(
            c.methods,
            vec![Method::IntegratedGradients, Method::DeepShap]
        );
        assert_eq!(c.steps, 16);
        assert_eq!(c.fold, Some(Partition::new(3).unwrap()));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(cfg(&["fly"]).is_err());
        assert!(cfg(&["train", "--bogus", "1"]).is_err());
        assert!(cfg(&["train", "--preset", "huge"]).is_err());
        assert!(cfg(&["train", "--fold", "5"]).is_err());
        assert!(cfg(&["train", "--threshold", "1.5"]).is_err());
        assert!(cfg(&["explain", "--method", "lime"]).is_err());
        assert!(cfg(&["train", "--threads", "0"]).is_err());
        assert!(cfg(&["train", "--epochs", "0"]).is_err());
    }

    #[test]
    fn config_file_under_flags() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(
            &file,
            "# comment\nepochs = 3\nflare_rate=0.25\nseed = 11\n\n",
        )
        .unwrap();
        let f = file.to_str().unwrap();
        let c = cfg(&["train", "--config", f, "--seed", "5"]).unwrap();
        assert_eq!((c.train.epochs, c.flare_rate, c.seed), (3, 0.25, 5));
        fs::write(&file, "epoch = 3\n").unwrap();
        assert!(cfg(&["train", "--config", f]).is_err());
        fs::write(&file, "epochs = three\n").unwrap();
        assert!(cfg(&["train", "--config", f]).is_err());
    }

    #[test]
    fn config_parser_rejects_garbage() {
        assert!(parse_config_file("epochs 3").is_err());
        assert!(parse_config_file("epochs=1\nepochs=2").is_err());
        assert_eq!(parse_config_file("").unwrap().len(), 0);
    }

    #[test]
    fn run_exit_codes() {
        assert_eq!(run(["flarecast", "verify-tables"]), 0);
        assert_eq!(run(["flarecast", "nope"]), 2);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["flarecast", "partition", "--out", out]), 1);
    }
}
