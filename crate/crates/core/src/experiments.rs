//! Experiment runners: ablation grid, backbone sweep, transductive runs,
//! labeled-test-ratio sweep and the per-length breakdown.

use serde::{Deserialize, Serialize};

use crate::data::{reveal_test_labels, BorrowerHistory, DatasetSplit};
use crate::metrics::{self, loan_profit, LENGTH_BINS};
use crate::model::{BackboneKind, ModelConfig};
use crate::objectives::Ablation;
use crate::rng::{derive_seed, stream_id};
use crate::train::{evaluate, train, Evaluation, MetricsReport, Result, TrainConfig, TrainOutcome};

/// Everything an experiment needs besides the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training seeds; every directional comparison averages over them.
    pub seeds: Vec<u64>,
    /// Labeled-test ratios for the sweep.
    pub ratios: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![1, 2, 3, 4, 5],
            ratios: vec![0.0, 0.01, 0.05, 0.1, 0.2, 0.5],
        }
    }
}

/// One trained and evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub backbone: BackboneKind,
    pub seed: u64,
    pub ratio: f64,
    pub transductive: bool,
    pub report: MetricsReport,
    /// Model profit plus the realized profit of randomly approved loans.
    pub total_profit: f64,
    pub steps: u64,
}

/// A finished run with its model and per-loan evaluation.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub outcome: TrainOutcome,
    pub evaluation: Evaluation,
}

/// Trains on the split's training borrowers and evaluates on all test loans.
pub fn run_single(split: &DatasetSplit, model: &ModelConfig, cfg: &TrainConfig) -> Result<RunOutput> {
    let outcome = train(&split.train, &split.test, model, cfg)?;
    let evaluation = evaluate(&outcome.model, &outcome.stats, &split.test, None, cfg)?;
    Ok(RunOutput {
        record: RunRecord {
            variant: cfg.ablation().label().to_string(),
            backbone: model.backbone,
            seed: cfg.seed,
            ratio: 0.0,
            transductive: cfg.transductive,
            total_profit: evaluation.report.profit,
            report: evaluation.report.clone(),
            steps: outcome.steps,
        },
        outcome,
        evaluation,
    })
}

fn seeded_cfg(base: &TrainConfig, seed: u64, ablation: Ablation) -> TrainConfig {
    TrainConfig {
        seed,
        ..base.clone()
    }
    .with_ablation(ablation)
}

/// The four objective variants for every seed, variant-major.
pub fn run_ablation(
    split: &DatasetSplit,
    model: &ModelConfig,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<RunOutput>> {
    let mut out = Vec::with_capacity(4 * seeds.len());
    for ablation in Ablation::ALL {
        for &seed in seeds {
            out.push(run_single(split, model, &seeded_cfg(base, seed, ablation))?);
        }
    }
    Ok(out)
}

/// All four backbones crossed with all four variants.
pub fn run_backbone_sweep(
    split: &DatasetSplit,
    model: &ModelConfig,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for backbone in BackboneKind::ALL {
        let m = ModelConfig {
            backbone,
            ..model.clone()
        };
        for run in run_ablation(split, &m, base, seeds)? {
            out.push(run.record);
        }
    }
    Ok(out)
}

/// The base configuration with and without test loans in the contrastive
/// and domain pools, per seed.
pub fn run_transductive(
    split: &DatasetSplit,
    model: &ModelConfig,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for transductive in [false, true] {
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                transductive,
                ..base.clone()
            };
            out.push(run_single(split, model, &cfg)?.record);
        }
    }
    Ok(out)
}

/// Reveals `ratio` of the test loans, retrains with them labeled, and
/// evaluates on the loans that remain.
pub fn run_label_ratio(
    split: &DatasetSplit,
    model: &ModelConfig,
    cfg: &TrainConfig,
    ratio: f64,
) -> Result<RunRecord> {
    let revealed = reveal_test_labels(split, ratio, derive_seed(cfg.seed, stream_id("reveal")))?;
    let outcome = train(&revealed.train, &revealed.test, model, cfg)?;
    let evaluation = evaluate(
        &outcome.model,
        &outcome.stats,
        &revealed.test,
        Some(&revealed.evaluate),
        cfg,
    )?;
    let random_profit: f64 = revealed.revealed.iter().map(history_profit).sum();
    Ok(RunRecord {
        variant: cfg.ablation().label().to_string(),
        backbone: model.backbone,
        seed: cfg.seed,
        ratio,
        transductive: cfg.transductive,
        total_profit: evaluation.report.profit + random_profit,
        report: evaluation.report,
        steps: outcome.steps,
    })
}

fn history_profit(h: &BorrowerHistory) -> f64 {
    h.applications
        .iter()
        .zip(&h.labels)
        .map(|(a, &y)| loan_profit(a, y))
        .sum()
}

/// Ratio-major sweep over `ratios` and `seeds`.
pub fn run_label_ratio_sweep(
    split: &DatasetSplit,
    model: &ModelConfig,
    base: &TrainConfig,
    ratios: &[f64],
    seeds: &[u64],
) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for &ratio in ratios {
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                ..base.clone()
            };
            out.push(run_label_ratio(split, model, &cfg, ratio)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinDelta {
    pub bin: String,
    pub loans: usize,
    pub auc_ours: f64,
    pub auc_vanilla: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBinReport {
    pub bins: Vec<BinDelta>,
    /// Least-squares slope of the deltas against the bin index.
    pub slope: f64,
    /// Bins left out because they were empty or single-class.
    pub skipped: Vec<String>,
}

/// Per-length-group AUC difference between two evaluations of the same
/// test loans.
pub fn run_length_bins(ours: &Evaluation, vanilla: &Evaluation) -> LengthBinReport {
    let mut bins = Vec::new();
    let mut skipped = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for b in 0..LENGTH_BINS.len() {
        let idx: Vec<usize> = (0..ours.bins.len()).filter(|&k| ours.bins[k] == b).collect();
        let labels: Vec<i8> = idx.iter().map(|&k| ours.labels[k]).collect();
        let a: Vec<f64> = idx.iter().map(|&k| ours.scores[k]).collect();
        let v: Vec<f64> = idx.iter().map(|&k| vanilla.scores[k]).collect();
        match (metrics::auc(&a, &labels), metrics::auc(&v, &labels)) {
            (Ok(auc_ours), Ok(auc_vanilla)) => {
                xs.push(b as f64);
                ys.push(auc_ours - auc_vanilla);
                bins.push(BinDelta {
                    bin: metrics::length_bin_label(b),
                    loans: idx.len(),
                    auc_ours,
                    auc_vanilla,
                    delta: auc_ours - auc_vanilla,
                });
            }
            _ => skipped.push(metrics::length_bin_label(b)),
        }
    }
    LengthBinReport {
        bins,
        slope: metrics::least_squares_slope(&xs, &ys),
        skipped,
    }
}

/// Mean of `field` over the records whose variant is `variant`.
pub fn mean_by_variant(records: &[RunRecord], variant: &str, field: impl Fn(&RunRecord) -> f64) -> f64 {
    let vals: Vec<f64> = records
        .iter()
        .filter(|r| r.variant == variant)
        .map(field)
        .collect();
    vals.iter().sum::<f64>() / vals.len().max(1) as f64
}
