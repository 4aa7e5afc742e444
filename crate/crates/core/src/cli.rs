//! Command-line front end: `synth`, `ingest`, `train`, `evaluate`,
//! `gradcam` and `report`.
//!
//! Settings resolve as flags, then the `--config` file, then (for
//! `evaluate` and `report`) the run directory's `run.cfg`, then built-in
//! defaults.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::data::{
    compute_class_weights, ingest_kermany_layout, stratified_split, synthesize_dataset, ClassCounts, ClassLabel,
    DatasetIndex, LoadedSplit, Split, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::explain::{explain, triptych, ClassSelection, GradCamConfig, DEFAULT_OPACITY};
use crate::metrics::{seed_report, Report, SeedReport};
use crate::model::{load_checkpoint, load_checkpoint_expecting, Model, ModelConfig, TAP_FINAL_FEATURE_MAP};
use crate::train::{evaluate, run_two_phase, PhaseConfig, TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_SEEDS};
use crate::{data, fsutil, imaging};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Resolved settings written into every run directory.
pub const RUN_CONFIG_FILE: &str = "run.cfg";
/// Default output of `ingest`, relative to the dataset root.
pub const SPLIT_INDEX_FILE: &str = "split.tsv";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const SEED_REPORT_FILE: &str = "report.json";

#[derive(Parser, Debug)]
#[command(name = "cbamnet", version, about = "CBAM dense classifier: data, training, evaluation and Grad-CAM")]
struct Cli {
    /// Plain `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic three-class corpus.
    Synth(SynthArgs),
    /// Index a dataset tree and persist the train/val/test assignment.
    Ingest(IngestArgs),
    /// Two-phase training for one or more seeds.
    Train(TrainArgs),
    /// Evaluate trained seeds on the test split and write reports.
    Evaluate(RunArgs),
    /// Render Grad-CAM triptychs for images.
    Gradcam(GradcamArgs),
    /// Aggregate per-seed reports, evaluating seeds that have none.
    Report(RunArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Index file to write; defaults to `split.tsv` in the dataset root.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Split index from `ingest`; without it the split is recomputed.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    phase1_epochs: Option<usize>,
    #[arg(long)]
    phase2_epochs: Option<usize>,
    #[arg(long)]
    lr1: Option<f64>,
    #[arg(long)]
    lr2: Option<f64>,
    #[arg(long)]
    unfreeze_last_n: Option<usize>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Comma-separated subset of the run's seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Dataset root, when it moved since training.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcamArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    tap: Option<String>,
    /// Class to explain (name or index); the predicted class by default.
    #[arg(long)]
    class: Option<String>,
    #[arg(long)]
    opacity: Option<f64>,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

/// Every setting the tool understands, each optional until resolved.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub preset: Option<String>,
    pub seeds: Option<Vec<u64>>,
    pub seed: Option<u64>,
    pub per_class: Option<usize>,
    pub side: Option<usize>,
    pub train_fraction: Option<f64>,
    pub split_seed: Option<u64>,
    pub phase1_epochs: Option<usize>,
    pub phase2_epochs: Option<usize>,
    pub lr1: Option<f64>,
    pub lr2: Option<f64>,
    pub unfreeze_last_n: Option<usize>,
    pub batch_size: Option<usize>,
    pub tap: Option<String>,
    pub class: Option<usize>,
    pub opacity: Option<f64>,
}

pub const SETTING_KEYS: [&str; 20] = [
    "data",
    "out",
    "index",
    "checkpoint",
    "preset",
    "seeds",
    "seed",
    "per_class",
    "side",
    "train_fraction",
    "split_seed",
    "phase1_epochs",
    "phase2_epochs",
    "lr1",
    "lr2",
    "unfreeze_last_n",
    "batch_size",
    "tap",
    "class",
    "opacity",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("cannot parse `{value}` for `{key}`")))
}

pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = text
        .split(',')
        .map(|s| parse_value("seeds", s.trim()))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("no seeds given".into()));
    }
    Ok(seeds)
}

/// A class name (`normal`, `bacterial`, `viral`) or index.
pub fn parse_class(text: &str) -> Result<usize> {
    if let Some(l) = ClassLabel::parse(text) {
        return Ok(l.index());
    }
    let c: usize = parse_value("class", text)?;
    ClassLabel::from_index(c)
        .map(ClassLabel::index)
        .map_err(|_| Error::InvalidArgument(format!("class {c} out of range (0..{})", ClassLabel::COUNT)))
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || Some(PathBuf::from(value));
        match key {
            "data" => self.data = path(),
            "out" => self.out = path(),
            "index" => self.index = path(),
            "checkpoint" => self.checkpoint = path(),
            "preset" => self.preset = Some(value.to_owned()),
            "seeds" => self.seeds = Some(parse_seeds(value)?),
            "seed" => self.seed = Some(parse_value(key, value)?),
            "per_class" => self.per_class = Some(parse_value(key, value)?),
            "side" => self.side = Some(parse_value(key, value)?),
            "train_fraction" => self.train_fraction = Some(parse_value(key, value)?),
            "split_seed" => self.split_seed = Some(parse_value(key, value)?),
            "phase1_epochs" => self.phase1_epochs = Some(parse_value(key, value)?),
            "phase2_epochs" => self.phase2_epochs = Some(parse_value(key, value)?),
            "lr1" => self.lr1 = Some(parse_value(key, value)?),
            "lr2" => self.lr2 = Some(parse_value(key, value)?),
            "unfreeze_last_n" => self.unfreeze_last_n = Some(parse_value(key, value)?),
            "batch_size" => self.batch_size = Some(parse_value(key, value)?),
            "tap" => self.tap = Some(value.to_owned()),
            "class" => self.class = Some(parse_class(value)?),
            "opacity" => self.opacity = Some(parse_value(key, value)?),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown configuration key `{other}` (known: {})",
                    SETTING_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut s = Settings::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("{}:{}: expected `key = value`, got `{raw}`", origin.display(), n + 1))
            })?;
            s.set(k.trim(), v.trim())
                .map_err(|e| Error::InvalidArgument(format!("{}:{}: {e}", origin.display(), n + 1)))?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fsutil::read_to_string(path)?, path)
    }

    /// Fills every unset field from `lower`.
    pub fn or(self, lower: Settings) -> Settings {
        Settings {
            data: self.data.or(lower.data),
            out: self.out.or(lower.out),
            index: self.index.or(lower.index),
            checkpoint: self.checkpoint.or(lower.checkpoint),
            preset: self.preset.or(lower.preset),
            seeds: self.seeds.or(lower.seeds),
            seed: self.seed.or(lower.seed),
            per_class: self.per_class.or(lower.per_class),
            side: self.side.or(lower.side),
            train_fraction: self.train_fraction.or(lower.train_fraction),
            split_seed: self.split_seed.or(lower.split_seed),
            phase1_epochs: self.phase1_epochs.or(lower.phase1_epochs),
            phase2_epochs: self.phase2_epochs.or(lower.phase2_epochs),
            lr1: self.lr1.or(lower.lr1),
            lr2: self.lr2.or(lower.lr2),
            unfreeze_last_n: self.unfreeze_last_n.or(lower.unfreeze_last_n),
            batch_size: self.batch_size.or(lower.batch_size),
            tap: self.tap.or(lower.tap),
            class: self.class.or(lower.class),
            opacity: self.opacity.or(lower.opacity),
        }
    }

    fn require_path(value: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        value
            .clone()
            .ok_or_else(|| Error::InvalidArgument(format!("`{key}` is required (flag --{key} or config key)")))
    }

    pub fn train_fraction(&self) -> f64 {
        self.train_fraction.unwrap_or(0.8)
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(0)
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| DEFAULT_SEEDS.to_vec())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut c = ModelConfig::preset(self.preset.as_deref().unwrap_or("dense-tiny"))?;
        if let Some(side) = self.side {
            c.backbone.input_side = side;
        }
        c.backbone.plan()?;
        Ok(c)
    }

    /// Training protocol for `model`, budgets and rates overridden where set.
    pub fn train_config(&self, model: &Model) -> TrainConfig {
        let mut t = TrainConfig::for_model(model);
        let mut p1 = PhaseConfig::phase1();
        let mut p2 = PhaseConfig::phase2(model);
        p1.epochs = self.phase1_epochs.unwrap_or(p1.epochs);
        p1.lr = self.lr1.unwrap_or(p1.lr);
        p2.epochs = self.phase2_epochs.unwrap_or(p2.epochs);
        p2.lr = self.lr2.unwrap_or(p2.lr);
        p2.unfreeze_last_n = self.unfreeze_last_n.unwrap_or(p2.unfreeze_last_n);
        t.phases = vec![p1, p2];
        t.batch_size = self.batch_size.unwrap_or(DEFAULT_BATCH_SIZE);
        t
    }

    /// Settings text as written to `run.cfg`, keys in canonical order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out += &format!("{k} = {v}\n");
            }
        };
        let p = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string());
        put("data", p(&self.data));
        put("out", p(&self.out));
        put("index", p(&self.index));
        put("checkpoint", p(&self.checkpoint));
        put("preset", self.preset.clone());
        put(
            "seeds",
            self.seeds
                .as_ref()
                .map(|s| s.iter().map(u64::to_string).collect::<Vec<_>>().join(",")),
        );
        put("seed", self.seed.map(|v| v.to_string()));
        put("per_class", self.per_class.map(|v| v.to_string()));
        put("side", self.side.map(|v| v.to_string()));
        put("train_fraction", self.train_fraction.map(|v| format!("{v:?}")));
        put("split_seed", self.split_seed.map(|v| v.to_string()));
        put("phase1_epochs", self.phase1_epochs.map(|v| v.to_string()));
        put("phase2_epochs", self.phase2_epochs.map(|v| v.to_string()));
        put("lr1", self.lr1.map(|v| format!("{v:?}")));
        put("lr2", self.lr2.map(|v| format!("{v:?}")));
        put("unfreeze_last_n", self.unfreeze_last_n.map(|v| v.to_string()));
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("tap", self.tap.clone());
        put("class", self.class.map(|v| v.to_string()));
        put("opacity", self.opacity.map(|v| format!("{v:?}")));
        out
    }
}

/// SHA-256 over the model fields, the resolved protocol and the split
/// settings; paths are left out so relocated runs keep their digest.
pub fn config_digest(model: &ModelConfig, train: &TrainConfig, settings: &Settings) -> String {
    let mut text = String::new();
    for (k, v) in model.to_fields() {
        text += &format!("{k}={v}\n");
    }
    for p in &train.phases {
        text += &format!("phase{}={},{:?},{}\n", p.phase, p.epochs, p.lr, p.unfreeze_last_n);
    }
    text += &format!(
        "batch_size={}\ntrain_fraction={:?}\nsplit_seed={}\nseeds={:?}\n",
        train.batch_size,
        settings.train_fraction(),
        settings.split_seed(),
        settings.seeds()
    );
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Shape { .. }
        | Error::LabelOutOfRange { .. }
        | Error::Data(_)
        | Error::Image { .. }
        | Error::Checkpoint(_) => EXIT_DATA,
        Error::TrainingFault { .. } => EXIT_TRAINING,
        Error::SeedRun { source, .. } => exit_code(source),
        Error::Io { .. } => EXIT_IO,
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("cbamnet: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    match cli.command {
        Command::Synth(a) => {
            let flags = Settings {
                out: a.out,
                per_class: a.per_class,
                side: a.side,
                seed: a.seed,
                train_fraction: a.train_fraction,
                ..Settings::default()
            };
            cmd_synth(&flags.or(file))
        }
        Command::Ingest(a) => {
            let flags = Settings {
                data: a.data,
                index: a.out,
                train_fraction: a.train_fraction,
                split_seed: a.split_seed,
                ..Settings::default()
            };
            cmd_ingest(&flags.or(file))
        }
        Command::Train(a) => {
            let flags = Settings {
                data: a.data,
                out: a.out,
                index: a.index,
                preset: a.preset,
                seeds: a.seeds.as_deref().map(parse_seeds).transpose()?,
                phase1_epochs: a.phase1_epochs,
                phase2_epochs: a.phase2_epochs,
                lr1: a.lr1,
                lr2: a.lr2,
                unfreeze_last_n: a.unfreeze_last_n,
                side: a.side,
                batch_size: a.batch_size,
                train_fraction: a.train_fraction,
                split_seed: a.split_seed,
                ..Settings::default()
            };
            cmd_train(&flags.or(file))
        }
        Command::Evaluate(a) => {
            let (s, run) = run_settings(a, file)?;
            cmd_evaluate(&s, &run, true)
        }
        Command::Report(a) => {
            let (s, run) = run_settings(a, file)?;
            cmd_evaluate(&s, &run, false)
        }
        Command::Gradcam(a) => {
            let flags = Settings {
                checkpoint: a.checkpoint,
                out: a.out,
                tap: a.tap,
                class: a.class.as_deref().map(parse_class).transpose()?,
                opacity: a.opacity,
                ..Settings::default()
            };
            cmd_gradcam(&flags.or(file), &a.images)
        }
    }
}

fn run_settings(a: RunArgs, file: Settings) -> Result<(Settings, PathBuf)> {
    let saved = Settings::load(&a.run.join(RUN_CONFIG_FILE))?;
    let flags = Settings {
        data: a.data,
        seeds: a.seeds.as_deref().map(parse_seeds).transpose()?,
        ..Settings::default()
    };
    Ok((flags.or(file).or(saved), a.run))
}

fn cmd_synth(s: &Settings) -> Result<()> {
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        per_class: s.per_class.unwrap_or(d.per_class),
        side: s.side.unwrap_or(d.side),
        train_fraction: s.train_fraction.unwrap_or(d.train_fraction),
        seed: s.seed.unwrap_or(d.seed),
    };
    let root = Settings::require_path(&s.out, "out")?;
    let index = synthesize_dataset(&spec, &root)?;
    println!(
        "wrote {} images ({} train, {} test) to {}",
        index.records.len(),
        index.counts(Split::Train).total(),
        index.counts(Split::Test).total(),
        root.display()
    );
    Ok(())
}

/// Ingests `root` and divides its training records into train and
/// validation folds.
pub fn build_split_index(root: &Path, train_fraction: f64, split_seed: u64) -> Result<DatasetIndex> {
    let ingested = ingest_kermany_layout(root)?;
    let (train, val) = stratified_split(&ingested.split(Split::Train), train_fraction, split_seed)?;
    let mut records = train;
    records.extend(val);
    records.extend(ingested.split(Split::Test));
    Ok(DatasetIndex { records })
}

fn dataset_index(s: &Settings) -> Result<(PathBuf, DatasetIndex)> {
    let root = Settings::require_path(&s.data, "data")?;
    let index = match &s.index {
        Some(p) => DatasetIndex::read_sidecar(&root, p)?,
        None => build_split_index(&root, s.train_fraction(), s.split_seed())?,
    };
    Ok((root, index))
}

fn cmd_ingest(s: &Settings) -> Result<()> {
    let root = Settings::require_path(&s.data, "data")?;
    let index = build_split_index(&root, s.train_fraction(), s.split_seed())?;
    let out = s.index.clone().unwrap_or_else(|| root.join(SPLIT_INDEX_FILE));
    index.write_sidecar(&root, &out)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let c = index.counts(split);
        println!("{:<5} {:>6} (normal {}, bacterial {}, viral {})", split.name(), c.total(), c.0[0], c.0[1], c.0[2]);
    }
    println!("index written to {}", out.display());
    Ok(())
}

pub fn seed_dir(run: &Path, seed: u64) -> PathBuf {
    run.join(format!("seed-{seed}"))
}

fn cmd_train(s: &Settings) -> Result<()> {
    let out = Settings::require_path(&s.out, "out")?;
    let model_config = s.model_config()?;
    let (root, index) = dataset_index(s)?;
    let side = model_config.backbone.input_side;
    let train_records = index.split(Split::Train);
    let train = LoadedSplit::load(&train_records, side)?;
    let val = LoadedSplit::load(&index.split(Split::Val), side)?;
    let weights = compute_class_weights(&ClassCounts::of(&train_records))?;
    fsutil::create_dir_all(&out)?;
    let resolved = Settings {
        data: Some(root),
        out: Some(out.clone()),
        preset: Some(model_config.preset.clone()),
        seeds: Some(s.seeds()),
        train_fraction: Some(s.train_fraction()),
        split_seed: Some(s.split_seed()),
        ..s.clone()
    };
    fsutil::write_atomic(&out.join(RUN_CONFIG_FILE), resolved.to_text().as_bytes())?;
    crate::train::run_multi_seed(&s.seeds(), |seed| {
        let model = Model::build(&model_config, seed)?;
        let config = s.train_config(&model);
        let dir = seed_dir(&out, seed);
        fsutil::create_dir_all(&dir)?;
        let outcome = run_two_phase(model, &train, &val, &weights, &config, seed, Some(&dir.join(CHECKPOINT_FILE)))?;
        outcome.history.write_csv(&dir.join(HISTORY_FILE))?;
        let m = &outcome.best_meta;
        println!(
            "seed {seed}: {} epochs, best val accuracy {:.4} (phase {}, epoch {})",
            outcome.history.epochs.len(),
            m.val_accuracy,
            m.phase,
            m.epoch
        );
        Ok(())
    })?;
    Ok(())
}

/// `evaluate` re-scores every selected seed; `report` reuses per-seed
/// reports already on disk. Either way the test split is read at most once.
fn cmd_evaluate(s: &Settings, run: &Path, rescore: bool) -> Result<()> {
    let model_config = s.model_config()?;
    let seeds = s.seeds();
    let mut test: Option<LoadedSplit> = None;
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let dir = seed_dir(run, seed);
        let saved = dir.join(SEED_REPORT_FILE);
        if !rescore && saved.is_file() {
            let r: SeedReport = serde_json::from_str(&fsutil::read_to_string(&saved)?)
                .map_err(|e| Error::Data(format!("{}: unreadable seed report: {e}", saved.display())))?;
            runs.push(r);
            continue;
        }
        let (model, _) = load_checkpoint_expecting(&dir.join(CHECKPOINT_FILE), &model_config)?;
        if test.is_none() {
            let (_, index) = dataset_index(s)?;
            test = Some(LoadedSplit::load(&index.split(Split::Test), model_config.backbone.input_side)?);
        }
        let data = test.as_ref().expect("loaded above");
        let batch = s.batch_size.unwrap_or(DEFAULT_BATCH_SIZE);
        let eval = evaluate(&model, data, None, batch)?;
        let r = seed_report(seed, &eval.probabilities, &data.labels, eval.loss)?;
        let text = serde_json::to_string_pretty(&r).expect("seed report serializes") + "\n";
        fsutil::write_atomic(&saved, text.as_bytes())?;
        println!("seed {seed}: test accuracy {:.4}", r.metrics.accuracy);
        runs.push(r);
    }
    let probe = Model::build(&model_config, 0)?;
    let digest = config_digest(&model_config, &s.train_config(&probe), s);
    let report = Report::new(digest, runs)?;
    report.emit(run)?;
    print!("{}", report.to_text());
    Ok(())
}

/// `{stem}_pred-{predicted}_cam-{explained}.png`.
pub fn gradcam_file_name(stem: &str, predicted: &str, explained: &str) -> String {
    format!("{stem}_pred-{predicted}_cam-{explained}.png")
}

fn cmd_gradcam(s: &Settings, images: &[PathBuf]) -> Result<()> {
    let ckpt = Settings::require_path(&s.checkpoint, "checkpoint")?;
    let out = Settings::require_path(&s.out, "out")?;
    let (model, _) = load_checkpoint(&ckpt)?;
    let config = GradCamConfig {
        tap: s.tap.clone().unwrap_or_else(|| TAP_FINAL_FEATURE_MAP.into()),
        class: s.class.map_or(ClassSelection::Predicted, ClassSelection::Explicit),
        output_side: None,
        opacity: s.opacity.unwrap_or(DEFAULT_OPACITY),
    };
    fsutil::create_dir_all(&out)?;
    let side = model.config().backbone.input_side;
    for path in images {
        let image = data::load_image(path, side)?;
        let e = explain(&model, &image, &config)?;
        let stem = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        let name = |c: usize| ClassLabel::from_index(c).map_or("?", ClassLabel::name);
        let target = out.join(gradcam_file_name(&stem, name(e.predicted), name(e.class)));
        imaging::write_png(&target, &triptych(&e))?;
        println!(
            "{}: predicted {} ({:.3}), explained {} -> {}",
            path.display(),
            name(e.predicted),
            e.probabilities[e.predicted],
            name(e.class),
            target.display()
        );
    }
    Ok(())
}
