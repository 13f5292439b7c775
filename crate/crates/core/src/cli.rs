//! Command-line driver. Exit codes: 0 success, 2 usage or configuration
//! error, 3 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_population, load_split, save_split, GeneratorConfig, TEST_FILE, TRAIN_FILE};
use crate::experiments::{
    mean_by_variant, run_ablation, run_backbone_sweep, run_label_ratio_sweep, run_length_bins,
    run_single, run_transductive, ExperimentConfig, LengthBinReport, RunRecord,
};
use crate::metrics::pca;
use crate::model::{load_checkpoint, save_checkpoint, BackboneKind, ModelConfig};
use crate::objectives::Ablation;
use crate::report::{
    config_hash, embed_histories, loss_curve_svg, pca_svg, run_dir, summary_table, unix_seconds,
    write_atomic, write_embeddings_csv, write_length_bins_csv, write_loss_curves_csv,
    write_metrics_csv, write_pca_csv, RunManifest, CONFIG_SNAPSHOT_FILE,
};
use crate::train::{evaluate, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(format!("numerical failure: {e}"))
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Usage(format!("{}: {e}", path.display()))
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Contents of a `--config` file. Every section is optional.
///
/// ```toml
/// seeds = [1, 2, 3, 4, 5]
/// ratios = [0.0, 0.01, 0.05]
///
/// [generator]
/// n_borrowers = 4000
///
/// [model]
/// backbone = "transformer"
///
/// [train]
/// epochs = 15
/// [train.weights]
/// gamma = 0.01
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub ratios: Vec<f64>,
}

impl Default for FileConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            generator: GeneratorConfig::default(),
            model: e.model,
            train: e.train,
            seeds: e.seeds,
            ratios: e.ratios,
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config file {}: {e}", path.display())))
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model.clone(),
            train: self.train.clone(),
            seeds: self.seeds.clone(),
            ratios: self.ratios.clone(),
        }
    }

    fn validate(&self) -> CliResult<()> {
        let usage = |e: String| CliError::Usage(e);
        self.generator.validate().map_err(|e| usage(e.to_string()))?;
        self.model.validate().map_err(|e| usage(e.to_string()))?;
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(usage("seeds must not be empty".into()));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(0.0..=0.5).contains(*r)) {
            return Err(usage(format!("ratio {r} outside [0, 0.5]")));
        }
        Ok(())
    }
}

/// Everything that determines a run's results; hashed to name the run
/// directory and recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub data: Option<PathBuf>,
    /// Digest of the dataset files, so a changed dataset gets a new run directory.
    pub data_digest: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub split: Option<String>,
    pub config: FileConfig,
}

#[derive(Debug, Parser)]
#[command(name = "loanscreen", version, about = "Inclusive loan screening with contrastive learning and domain adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic selective-labels dataset.
    Generate(GenerateArgs),
    /// Train one model and evaluate it on the test period.
    Train(RunArgs),
    /// Evaluate a saved checkpoint on the test period.
    Evaluate(EvaluateArgs),
    /// Train all four objective variants for every seed.
    Ablate(RunArgs),
    /// Cross the four sequence backbones with the four objective variants.
    Backbones(RunArgs),
    /// Compare training with and without unlabeled test loans in the auxiliary objectives.
    Transductive(RunArgs),
    /// Sweep the ratio of test loans whose labels are revealed before training.
    Sweep(SweepArgs),
    /// Export fused features and their principal components.
    Embed(EmbedArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Config file; only its [generator] section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Re-generate with the generator settings recorded in a manifest.
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
    /// Output directory for train.jsonl, test.jsonl and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Borrowers in train and test together.
    #[arg(long)]
    pub n_borrowers: Option<usize>,
    /// Weight of the socioeconomic bonus in the historical screener.
    #[arg(long)]
    pub bias_strength: Option<f64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct RunArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Re-run with the configuration recorded in a manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Root under which the run directory is created.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Training seed for single runs.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated seeds for multi-seed commands.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Borrowers per labeled batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam step size.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Sequence encoder: transformer, rnn, lstm or gru.
    #[arg(long)]
    pub backbone: Option<BackboneKind>,
    /// Ramp rate of the domain-loss weight.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Drop the contrastive term.
    #[arg(long)]
    pub no_cl: bool,
    /// Drop the domain term.
    #[arg(long)]
    pub no_da: bool,
    /// Add unlabeled test loans to the contrastive and domain pools.
    #[arg(long)]
    pub transductive: bool,
    /// Skip the SVG plots.
    #[arg(long)]
    pub no_svg: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated labeled-test ratios, each in [0, 0.5].
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// checkpoint.json written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// checkpoint.json written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Which split to export: train or test.
    #[arg(long)]
    pub split: Option<String>,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Backbones(a) => cmd_backbones(&a),
        Command::Transductive(a) => cmd_transductive(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Embed(a) => cmd_embed(&a),
    }
}

fn cmd_generate(a: &GenerateArgs) -> CliResult<()> {
    let started = unix_seconds();
    let mut cfg = match &a.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    if let Some(m) = &a.manifest {
        let manifest = RunManifest::read(m)
            .map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", m.display())))?;
        if manifest.command != "generate" {
            return Err(CliError::Usage(format!(
                "manifest {} records command `{}`, not `generate`",
                m.display(),
                manifest.command
            )));
        }
        cfg.generator = serde_json::from_value(manifest.config)
            .map_err(|e| CliError::Usage(format!("manifest {}: {e}", m.display())))?;
    }
    if let Some(s) = a.seed {
        cfg.generator.seed = s;
    }
    if let Some(n) = a.n_borrowers {
        cfg.generator.n_borrowers = n;
    }
    if let Some(b) = a.bias_strength {
        cfg.generator.bias_strength = b;
    }
    cfg.generator
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let split = generate_population(&cfg.generator).map_err(|e| CliError::Usage(e.to_string()))?;
    save_split(&a.out, &split).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut metrics = BTreeMap::new();
    metrics.insert("train_borrowers".into(), split.train.len() as f64);
    metrics.insert("test_borrowers".into(), split.test.len() as f64);
    metrics.insert("train_loans".into(), split.train_loans() as f64);
    metrics.insert("test_loans".into(), split.test_loans() as f64);
    metrics.insert("train_approval_rate".into(), split.train_approval_rate());
    println!(
        "generated {} train / {} test borrowers ({} / {} loans), approval rate {:.4}",
        split.train.len(),
        split.test.len(),
        split.train_loans(),
        split.test_loans(),
        split.train_approval_rate()
    );
    let manifest = RunManifest {
        command: "generate".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: config_hash(&cfg.generator),
        config: serde_json::to_value(&cfg.generator).expect("serializable"),
        seeds: vec![cfg.generator.seed],
        started_at: started,
        finished_at: unix_seconds(),
        outputs: vec![TRAIN_FILE.into(), TEST_FILE.into()],
        metrics,
    };
    manifest.write(&a.out).map_err(io_err(&a.out))
}

/// Base config from manifest, file or defaults, with flags applied on top.
fn resolve(a: &RunArgs, command: &str) -> CliResult<ResolvedRun> {
    let mut resolved = if let Some(m) = &a.manifest {
        let manifest = RunManifest::read(m)
            .map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", m.display())))?;
        if manifest.command != command {
            return Err(CliError::Usage(format!(
                "manifest {} records command `{}`, not `{command}`",
                m.display(),
                manifest.command
            )));
        }
        serde_json::from_value::<ResolvedRun>(manifest.config)
            .map_err(|e| CliError::Usage(format!("manifest {}: {e}", m.display())))?
    } else {
        ResolvedRun {
            data: None,
            data_digest: None,
            checkpoint: None,
            split: None,
            config: match &a.config {
                Some(p) => FileConfig::load(p)?,
                None => FileConfig::default(),
            },
        }
    };
    if a.manifest.is_some() {
        if let Some(p) = &a.config {
            let file = FileConfig::load(p)?;
            resolved.config = file;
        }
    }
    if let Some(d) = &a.data {
        resolved.data = Some(d.clone());
    }
    let c = &mut resolved.config;
    if let Some(s) = a.seed {
        c.train.seed = s;
    }
    if let Some(s) = &a.seeds {
        c.seeds = s.clone();
    }
    if let Some(e) = a.epochs {
        c.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        c.train.batch_size = b;
    }
    if let Some(lr) = a.learning_rate {
        c.train.adam.learning_rate = lr;
    }
    if let Some(b) = a.backbone {
        c.model.backbone = b;
    }
    if let Some(g) = a.gamma {
        c.train.weights.gamma = g;
    }
    if a.no_cl {
        c.train.use_cl = false;
    }
    if a.no_da {
        c.train.use_da = false;
    }
    if a.transductive {
        c.train.transductive = true;
    }
    c.validate()?;
    Ok(resolved)
}

fn dataset_digest(dir: &Path) -> CliResult<String> {
    let mut h = Sha256::new();
    for f in [TRAIN_FILE, TEST_FILE] {
        let p = dir.join(f);
        let bytes = fs::read(&p).map_err(|e| CliError::Usage(format!("dataset file {}: {e}", p.display())))?;
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize())[..16].to_string())
}

struct Loaded {
    resolved: ResolvedRun,
    split: crate::data::DatasetSplit,
    dir: PathBuf,
    started: u64,
}

fn load(a: &RunArgs, command: &str) -> CliResult<Loaded> {
    let started = unix_seconds();
    let mut resolved = resolve(a, command)?;
    let data = resolved
        .data
        .clone()
        .ok_or_else(|| CliError::Usage("missing --data (dataset directory)".into()))?;
    resolved.data_digest = Some(dataset_digest(&data)?);
    let split = load_split(&data).map_err(|e| CliError::Usage(e.to_string()))?;
    let dir = run_dir(&a.out, command, &config_hash(&resolved));
    Ok(Loaded {
        resolved,
        split,
        dir,
        started,
    })
}

fn finish(
    l: &Loaded,
    command: &str,
    seeds: Vec<u64>,
    mut outputs: Vec<String>,
    metrics: BTreeMap<String, f64>,
) -> CliResult<()> {
    let toml_text = toml::to_string(&l.resolved.config)
        .map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))?;
    let snapshot = l.dir.join(CONFIG_SNAPSHOT_FILE);
    write_atomic(&snapshot, toml_text.as_bytes()).map_err(io_err(&snapshot))?;
    outputs.push(CONFIG_SNAPSHOT_FILE.into());
    let manifest = RunManifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: config_hash(&l.resolved),
        config: serde_json::to_value(&l.resolved).expect("serializable"),
        seeds,
        started_at: l.started,
        finished_at: unix_seconds(),
        outputs,
        metrics,
    };
    manifest.write(&l.dir).map_err(io_err(&l.dir))?;
    println!("run directory: {}", l.dir.display());
    Ok(())
}

fn record_metrics(prefix: &str, r: &RunRecord, m: &mut BTreeMap<String, f64>) {
    m.insert(format!("{prefix}auc"), r.report.auc);
    m.insert(format!("{prefix}profit"), r.report.profit);
    m.insert(format!("{prefix}total_profit"), r.total_profit);
    m.insert(format!("{prefix}approved"), r.report.approved as f64);
    m.insert(format!("{prefix}approved_ses_index"), r.report.approved_ses_index);
    m.insert(format!("{prefix}alignment"), r.report.alignment);
    m.insert(format!("{prefix}uniformity"), r.report.uniformity);
}

fn variant_means(records: &[RunRecord], m: &mut BTreeMap<String, f64>) {
    for a in Ablation::ALL {
        let v = a.label();
        if !records.iter().any(|r| r.variant == v) {
            continue;
        }
        m.insert(format!("{v}.auc"), mean_by_variant(records, v, |r| r.report.auc));
        m.insert(format!("{v}.profit"), mean_by_variant(records, v, |r| r.report.profit));
        m.insert(
            format!("{v}.approved_ses_index"),
            mean_by_variant(records, v, |r| r.report.approved_ses_index),
        );
        m.insert(format!("{v}.uniformity"), mean_by_variant(records, v, |r| r.report.uniformity));
        m.insert(format!("{v}.alignment"), mean_by_variant(records, v, |r| r.report.alignment));
    }
}

fn write_metrics(l: &Loaded, records: &[RunRecord], outputs: &mut Vec<String>) -> CliResult<()> {
    let p = l.dir.join("metrics.csv");
    write_metrics_csv(&p, records).map_err(io_err(&p))?;
    outputs.push("metrics.csv".into());
    Ok(())
}

fn cmd_train(a: &RunArgs) -> CliResult<()> {
    let l = load(a, "train")?;
    let cfg = &l.resolved.config;
    let run = run_single(&l.split, &cfg.model, &cfg.train)?;
    let r = &run.record;
    println!(
        "{} seed {}: auc {:.4} profit {:.2} approved {}/{} steps {}",
        r.variant, r.seed, r.report.auc, r.report.profit, r.report.approved, r.report.evaluated, r.steps
    );
    let mut outputs = Vec::new();
    write_metrics(&l, std::slice::from_ref(r), &mut outputs)?;
    let curves = vec![(r.variant.clone(), r.seed, run.outcome.curves.clone())];
    write_curves(&l, &curves, a.no_svg, &mut outputs)?;
    let ckpt = l.dir.join("checkpoint.json");
    save_checkpoint(&ckpt, &run.outcome.model, &run.outcome.stats).map_err(|e| CliError::Usage(e.to_string()))?;
    outputs.push("checkpoint.json".into());
    let mut metrics = BTreeMap::new();
    record_metrics("", r, &mut metrics);
    finish(&l, "train", vec![cfg.train.seed], outputs, metrics)
}

fn write_curves(
    l: &Loaded,
    curves: &[(String, u64, Vec<crate::train::EpochLosses>)],
    no_svg: bool,
    outputs: &mut Vec<String>,
) -> CliResult<()> {
    let p = l.dir.join("loss_curves.csv");
    write_loss_curves_csv(&p, curves).map_err(io_err(&p))?;
    outputs.push("loss_curves.csv".into());
    if !no_svg {
        let p = l.dir.join("loss_curves.svg");
        write_atomic(&p, loss_curve_svg(curves).as_bytes()).map_err(io_err(&p))?;
        outputs.push("loss_curves.svg".into());
    }
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let mut run_args = a.run.clone();
    run_args.out = a.run.out.clone();
    let mut l = load(&run_args, "evaluate")?;
    if let Some(c) = &a.checkpoint {
        l.resolved.checkpoint = Some(c.clone());
    }
    let ckpt = l
        .resolved
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Usage("missing --checkpoint".into()))?;
    let (model, stats) = load_checkpoint(&ckpt).map_err(|e| CliError::Usage(format!("{}: {e}", ckpt.display())))?;
    let cfg = &l.resolved.config;
    let ev = evaluate(&model, &stats, &l.split.test, None, &cfg.train)?;
    let record = RunRecord {
        variant: cfg.train.ablation().label().to_string(),
        backbone: model.config().backbone,
        seed: cfg.train.seed,
        ratio: 0.0,
        transductive: cfg.train.transductive,
        total_profit: ev.report.profit,
        report: ev.report,
        steps: 0,
    };
    println!(
        "auc {:.4} profit {:.2} approved {}/{}",
        record.report.auc, record.report.profit, record.report.approved, record.report.evaluated
    );
    // the checkpoint path is part of what was evaluated, so rehash with it
    l.dir = run_dir(&a.run.out, "evaluate", &config_hash(&l.resolved));
    let mut outputs = Vec::new();
    write_metrics(&l, std::slice::from_ref(&record), &mut outputs)?;
    let mut metrics = BTreeMap::new();
    record_metrics("", &record, &mut metrics);
    finish(&l, "evaluate", vec![cfg.train.seed], outputs, metrics)
}

fn length_bin_rows(
    ablation: &[crate::experiments::RunOutput],
    seeds: &[u64],
) -> Vec<(u64, LengthBinReport)> {
    let find = |v: &str, s: u64| {
        ablation
            .iter()
            .find(|r| r.record.variant == v && r.record.seed == s)
    };
    seeds
        .iter()
        .filter_map(|&s| {
            let ours = find("ours", s)?;
            let neither = find("neither", s)?;
            Some((s, run_length_bins(&ours.evaluation, &neither.evaluation)))
        })
        .collect()
}

fn cmd_ablate(a: &RunArgs) -> CliResult<()> {
    let l = load(a, "ablate")?;
    let cfg = &l.resolved.config;
    let runs = run_ablation(&l.split, &cfg.model, &cfg.train, &cfg.seeds)?;
    let records: Vec<RunRecord> = runs.iter().map(|r| r.record.clone()).collect();
    print!("{}", summary_table(&records));
    let mut outputs = Vec::new();
    write_metrics(&l, &records, &mut outputs)?;
    let p = l.dir.join("ablation.csv");
    write_ablation_summary(&p, &records).map_err(io_err(&p))?;
    outputs.push("ablation.csv".into());
    let curves: Vec<_> = runs
        .iter()
        .map(|r| (r.record.variant.clone(), r.record.seed, r.outcome.curves.clone()))
        .collect();
    write_curves(&l, &curves, a.no_svg, &mut outputs)?;
    let bins = length_bin_rows(&runs, &cfg.seeds);
    let mut metrics = BTreeMap::new();
    variant_means(&records, &mut metrics);
    if !bins.is_empty() {
        for (seed, report) in &bins {
            let p = l.dir.join(format!("length_bins_seed{seed}.csv"));
            write_length_bins_csv(&p, report).map_err(io_err(&p))?;
            outputs.push(format!("length_bins_seed{seed}.csv"));
        }
        let slope = bins.iter().map(|(_, r)| r.slope).sum::<f64>() / bins.len() as f64;
        metrics.insert("length_bins.mean_slope".into(), slope);
    }
    finish(&l, "ablate", cfg.seeds.clone(), outputs, metrics)
}

pub const ABLATION_HEADER: [&str; 9] = [
    "variant",
    "seeds",
    "auc",
    "profit",
    "living_city_dpi",
    "monthly_income_level",
    "approved_ses_index",
    "alignment",
    "uniformity",
];

/// Seed means, one row per objective variant.
pub fn write_ablation_summary(path: &Path, records: &[RunRecord]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ABLATION_HEADER)?;
    for a in Ablation::ALL {
        let v = a.label();
        let n = records.iter().filter(|r| r.variant == v).count();
        if n == 0 {
            continue;
        }
        let m = |f: &dyn Fn(&RunRecord) -> f64| mean_by_variant(records, v, f).to_string();
        w.write_record([
            v.to_string(),
            n.to_string(),
            m(&|r| r.report.auc),
            m(&|r| r.report.profit),
            m(&|r| r.report.inclusion.living_city_dpi),
            m(&|r| r.report.inclusion.monthly_income_level),
            m(&|r| r.report.approved_ses_index),
            m(&|r| r.report.alignment),
            m(&|r| r.report.uniformity),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    write_atomic(path, &bytes)
}

fn cmd_backbones(a: &RunArgs) -> CliResult<()> {
    let l = load(a, "backbones")?;
    let cfg = &l.resolved.config;
    let records = run_backbone_sweep(&l.split, &cfg.model, &cfg.train, &cfg.seeds)?;
    print!("{}", summary_table(&records));
    let mut outputs = Vec::new();
    write_metrics(&l, &records, &mut outputs)?;
    let mut metrics = BTreeMap::new();
    for b in BackboneKind::ALL {
        let sub: Vec<RunRecord> = records.iter().filter(|r| r.backbone == b).cloned().collect();
        let mut m = BTreeMap::new();
        variant_means(&sub, &mut m);
        metrics.extend(m.into_iter().map(|(k, v)| (format!("{b}.{k}"), v)));
    }
    finish(&l, "backbones", cfg.seeds.clone(), outputs, metrics)
}

fn cmd_transductive(a: &RunArgs) -> CliResult<()> {
    let l = load(a, "transductive")?;
    let cfg = &l.resolved.config;
    let records = run_transductive(&l.split, &cfg.model, &cfg.train, &cfg.seeds)?;
    print!("{}", summary_table(&records));
    let mut outputs = Vec::new();
    write_metrics(&l, &records, &mut outputs)?;
    let mut metrics = BTreeMap::new();
    for t in [false, true] {
        let sub: Vec<&RunRecord> = records.iter().filter(|r| r.transductive == t).collect();
        let n = sub.len().max(1) as f64;
        let key = if t { "transductive" } else { "base" };
        metrics.insert(format!("{key}.auc"), sub.iter().map(|r| r.report.auc).sum::<f64>() / n);
        metrics.insert(format!("{key}.profit"), sub.iter().map(|r| r.report.profit).sum::<f64>() / n);
    }
    finish(&l, "transductive", cfg.seeds.clone(), outputs, metrics)
}

fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let mut run_args = a.run.clone();
    run_args.out = a.run.out.clone();
    let started_cfg = resolve(&run_args, "sweep");
    // ratios are part of the config, so apply the flag before hashing
    let ratios = match (&a.ratios, started_cfg) {
        (Some(r), _) => r.clone(),
        (None, Ok(c)) => c.config.ratios,
        (None, Err(e)) => return Err(e),
    };
    if let Some(r) = ratios.iter().find(|r| !(0.0..=0.5).contains(*r)) {
        return Err(CliError::Usage(format!("ratio {r} outside [0, 0.5]")));
    }
    let mut l = load(&run_args, "sweep")?;
    l.resolved.config.ratios = ratios.clone();
    l.dir = run_dir(&a.run.out, "sweep", &config_hash(&l.resolved));
    let cfg = &l.resolved.config;
    let records = run_label_ratio_sweep(&l.split, &cfg.model, &cfg.train, &ratios, &cfg.seeds)?;
    print!("{}", summary_table(&records));
    let mut outputs = Vec::new();
    write_metrics(&l, &records, &mut outputs)?;
    let mut metrics = BTreeMap::new();
    for &ratio in &ratios {
        let sub: Vec<&RunRecord> = records.iter().filter(|r| r.ratio == ratio).collect();
        let n = sub.len().max(1) as f64;
        metrics.insert(format!("ratio{ratio}.auc"), sub.iter().map(|r| r.report.auc).sum::<f64>() / n);
        metrics.insert(
            format!("ratio{ratio}.total_profit"),
            sub.iter().map(|r| r.total_profit).sum::<f64>() / n,
        );
    }
    finish(&l, "sweep", cfg.seeds.clone(), outputs, metrics)
}

fn cmd_embed(a: &EmbedArgs) -> CliResult<()> {
    let mut l = load(&a.run, "embed")?;
    if let Some(c) = &a.checkpoint {
        l.resolved.checkpoint = Some(c.clone());
    }
    if let Some(s) = &a.split {
        l.resolved.split = Some(s.clone());
    }
    let ckpt = l
        .resolved
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Usage("missing --checkpoint".into()))?;
    let split_name = l.resolved.split.clone().unwrap_or_else(|| "train".into());
    let histories = match split_name.as_str() {
        "train" => &l.split.train,
        "test" => &l.split.test,
        other => return Err(CliError::Usage(format!("unknown split `{other}`, expected train or test"))),
    };
    let (model, stats) = load_checkpoint(&ckpt).map_err(|e| CliError::Usage(format!("{}: {e}", ckpt.display())))?;
    if model.config() != &l.resolved.config.model && (a.run.config.is_some() || a.run.manifest.is_some()) {
        return Err(CliError::Usage(format!(
            "checkpoint {} was trained with a different model config",
            ckpt.display()
        )));
    }
    let rows = embed_histories(&model, &stats, histories)?;
    let points: Vec<Vec<f64>> = rows.iter().map(|r| r.features.clone()).collect();
    let p = pca(&points, 2).map_err(|e| CliError::Usage(e.to_string()))?;
    l.dir = run_dir(&a.run.out, "embed", &config_hash(&l.resolved));
    let mut outputs = Vec::new();
    let ep = l.dir.join("embeddings.csv");
    write_embeddings_csv(&ep, &rows).map_err(io_err(&ep))?;
    outputs.push("embeddings.csv".into());
    let pp = l.dir.join("pca.csv");
    write_pca_csv(&pp, &rows, &p).map_err(io_err(&pp))?;
    outputs.push("pca.csv".into());
    if !a.run.no_svg {
        let sp = l.dir.join("pca.svg");
        write_atomic(&sp, pca_svg(&rows, &p).as_bytes()).map_err(io_err(&sp))?;
        outputs.push("pca.svg".into());
    }
    println!(
        "embedded {} loans; explained variance {:.4} / {:.4}",
        rows.len(),
        p.explained_variance_ratio[0],
        p.explained_variance_ratio.get(1).copied().unwrap_or(0.0)
    );
    let mut metrics = BTreeMap::new();
    metrics.insert("loans".into(), rows.len() as f64);
    metrics.insert("pc1_variance_ratio".into(), p.explained_variance_ratio[0]);
    finish(&l, "embed", vec![], outputs, metrics)
}
