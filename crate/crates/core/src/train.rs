//! Mini-batch training with the three objectives, and evaluation of a
//! trained model on a fully labeled test period.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{build_batch, BorrowerHistory, DataError, FeatureStats, UNLABELED};
use crate::metrics::{self, InclusionReport, MetricError};
use crate::model::{Mode, Model, ModelConfig, ModelError};
use crate::objectives::{contrastive_loss, domain_loss, label_loss, total_loss, Ablation, LossWeights};
use crate::rng::{derive_seed, seeded, stream_id};
use crate::tensor::{Adam, AdamConfig, Graph, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid training config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("training set has no labeled loans")]
    NoLabeledLoans,
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: u64, loss: f64 },
}

impl TrainError {
    /// Whether the failure is numerical rather than a bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, TrainError::NonFinite { .. })
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Borrowers per mini-batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub use_cl: bool,
    pub use_da: bool,
    /// Add the test borrowers' loans to the contrastive and domain pools.
    pub transductive: bool,
    pub seed: u64,
    pub weights: LossWeights,
    /// Approve when the predicted repayment probability reaches this value.
    pub approval_threshold: f64,
    /// Number of test loans used for the alignment and uniformity diagnostics.
    pub diagnostic_loans: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 15,
            adam: AdamConfig::default(),
            use_cl: true,
            use_da: true,
            transductive: false,
            seed: 1,
            weights: LossWeights::default(),
            approval_threshold: 0.5,
            diagnostic_loans: 1000,
        }
    }
}

impl TrainConfig {
    pub fn ablation(&self) -> Ablation {
        Ablation {
            use_cl: self.use_cl,
            use_da: self.use_da,
        }
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.use_cl = a.use_cl;
        self.use_da = a.use_da;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| {
            Err(TrainError::Config {
                field,
                reason: reason.into(),
            })
        };
        if self.batch_size == 0 || (self.use_cl && self.batch_size < 2) {
            return bad("batch_size", "must be at least 2 when contrastive learning is on");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if !(self.adam.learning_rate > 0.0) {
            return bad("adam.learning_rate", "must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("adam", "betas must lie in [0, 1)");
        }
        if !(self.weights.tau > 0.0) {
            return bad("weights.tau", "must be positive");
        }
        if !(self.weights.gamma >= 0.0) {
            return bad("weights.gamma", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.approval_threshold) {
            return bad("approval_threshold", "must lie in [0, 1]");
        }
        if self.diagnostic_loans < 2 {
            return bad("diagnostic_loans", "must be at least 2");
        }
        Ok(())
    }
}

/// Mean losses over one epoch's steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub total: f64,
    pub label: f64,
    pub contrastive: f64,
    pub domain: f64,
    /// Domain-loss weight at the epoch's last step.
    pub w_d: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub stats: FeatureStats,
    pub curves: Vec<EpochLosses>,
    pub steps: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct StepLosses {
    total: f64,
    label: f64,
    contrastive: f64,
    domain: f64,
}

/// Trains a fresh model. `extra` holds test borrowers; they are used only
/// when `cfg.transductive` is set, and then only for the contrastive and
/// domain objectives, never for the label loss.
pub fn train(
    train_set: &[BorrowerHistory],
    extra: &[BorrowerHistory],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.iter().all(|h| h.labeled_count() == 0) {
        return Err(TrainError::NoLabeledLoans);
    }
    let stats = FeatureStats::from_train(train_set);
    let mut model = Model::new(model_cfg.clone(), derive_seed(cfg.seed, stream_id("init")))?;
    let mut adam = Adam::new(cfg.adam, model.params());
    let mut shuffle_rng = seeded(derive_seed(cfg.seed, stream_id("shuffle")));
    let extra: &[BorrowerHistory] = if cfg.transductive { extra } else { &[] };

    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut extra_order: Vec<usize> = (0..extra.len()).collect();
        extra_order.shuffle(&mut shuffle_rng);
        let n_batches = order.len().div_ceil(cfg.batch_size);
        let mut sums = StepLosses::default();
        for b in 0..n_batches {
            let mut members: Vec<&BorrowerHistory> = order
                [b * cfg.batch_size..((b + 1) * cfg.batch_size).min(order.len())]
                .iter()
                .map(|&i| &train_set[i])
                .collect();
            let supervised = members.len();
            let lo = b * extra_order.len() / n_batches;
            let hi = (b + 1) * extra_order.len() / n_batches;
            members.extend(extra_order[lo..hi].iter().map(|&i| &extra[i]));
            let losses = train_step(&mut model, &mut adam, &members, supervised, &stats, cfg, step)?;
            sums.total += losses.total;
            sums.label += losses.label;
            sums.contrastive += losses.contrastive;
            sums.domain += losses.domain;
            step += 1;
        }
        let k = n_batches as f64;
        curves.push(EpochLosses {
            epoch,
            total: sums.total / k,
            label: sums.label / k,
            contrastive: sums.contrastive / k,
            domain: sums.domain / k,
            w_d: cfg.weights.w_d(step - 1),
        });
    }
    Ok(TrainOutcome {
        model,
        stats,
        curves,
        steps: step,
    })
}

/// One optimizer step. Members past `supervised` contribute no labels and
/// count as the unlabeled domain.
fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    members: &[&BorrowerHistory],
    supervised: usize,
    stats: &FeatureStats,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepLosses> {
    let max_len = model.config().max_sequence_length;
    let batch = build_batch(members, max_len, stats)?;
    let layout = batch.layout();
    let owners = layout.row_owner();
    let mut labels = batch.packed(&batch.labels);
    let mut domain = batch.packed(&batch.domain);
    for (r, &b) in owners.iter().enumerate() {
        if b >= supervised {
            labels[r] = UNLABELED;
            domain[r] = 0;
        }
    }
    let step_seed = derive_seed(derive_seed(cfg.seed, stream_id("dropout")), step);
    let ablation = cfg.ablation();

    let mut g = Graph::new();
    let params = model.bind(&mut g);
    let out = model.forward(&mut g, &params, &batch, Mode::Train { seed: derive_seed(step_seed, 1) })?;
    let l_y = label_loss(&mut g, out.label_logits, &labels)?;
    let l_d = if ablation.use_da {
        Some(domain_loss(&mut g, out.domain_logits, &domain)?)
    } else {
        None
    };

    let mut l_cl = None;
    if ablation.use_cl {
        let pool: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] == UNLABELED).collect();
        if pool.len() >= 2 {
            // second view: re-encode only the borrowers that own pool loans
            let positions = layout.row_position();
            let mut sub_of = vec![usize::MAX; members.len()];
            let mut sub_members = Vec::new();
            for &r in &pool {
                let b = owners[r];
                if sub_of[b] == usize::MAX {
                    sub_of[b] = sub_members.len();
                    sub_members.push(members[b]);
                }
            }
            let sub_batch = build_batch(&sub_members, max_len, stats)?;
            let sub_layout = sub_batch.layout();
            let out2 = model.forward(
                &mut g,
                &params,
                &sub_batch,
                Mode::Train {
                    seed: derive_seed(step_seed, 2),
                },
            )?;
            let rows2: Vec<usize> = pool
                .iter()
                .map(|&r| sub_layout.offset(sub_of[owners[r]]) + positions[r])
                .collect();
            let view1 = g.gather_rows(out.features, &pool)?;
            let view2 = g.gather_rows(out2.features, &rows2)?;
            l_cl = Some(contrastive_loss(&mut g, view1, view2, cfg.weights.tau)?);
        }
    }

    let total = total_loss(&mut g, l_y, l_cl, l_d, &cfg.weights, step, ablation)?;
    let value = g.value(total).item();
    if !value.is_finite() {
        return Err(TrainError::NonFinite { step, loss: value });
    }
    g.backward(total)?;
    let grads: Vec<Vec<f64>> = params.all.iter().map(|&v| g.grad_or_zeros(v)).collect();
    adam.step(model.params_mut(), &grads)?;
    Ok(StepLosses {
        total: value,
        label: g.value(l_y).item(),
        contrastive: l_cl.map_or(0.0, |v| g.value(v).item()),
        domain: l_d.map_or(0.0, |v| g.value(v).item()),
    })
}

/// Views of a history that together score every loan: histories longer
/// than `max_len` are cut into windows ending at each late loan.
fn scoring_views(h: &BorrowerHistory, max_len: usize) -> Vec<(BorrowerHistory, usize, usize)> {
    if h.len() <= max_len {
        return vec![(h.clone(), 0, 0)];
    }
    let mut views = vec![(window(h, 0, max_len), 0, 0)];
    for end in max_len + 1..=h.len() {
        views.push((window(h, end - max_len, end), end - max_len, max_len - 1));
    }
    views
}

fn window(h: &BorrowerHistory, start: usize, end: usize) -> BorrowerHistory {
    BorrowerHistory {
        borrower_id: h.borrower_id,
        demographics: h.demographics.clone(),
        applications: h.applications[start..end].to_vec(),
        repayments: h.repayments[start..end].to_vec(),
        labels: h.labels[start..end].to_vec(),
        observed: h.observed[start..end].to_vec(),
        latent_creditworthiness: h.latent_creditworthiness,
    }
}

const SCORING_CHUNK: usize = 512;

/// Evaluation-mode repayment probability and fused feature of every loan,
/// grouped per borrower in input order.
pub fn score_histories(
    model: &Model,
    stats: &FeatureStats,
    histories: &[BorrowerHistory],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>)> {
    let max_len = model.config().max_sequence_length;
    let mut scores: Vec<Vec<f64>> = histories.iter().map(|h| vec![0.0; h.len()]).collect();
    let mut features: Vec<Vec<Vec<f64>>> = histories.iter().map(|h| vec![Vec::new(); h.len()]).collect();
    // (borrower, view history, offset into the original, first position to keep)
    let mut views = Vec::new();
    for (i, h) in histories.iter().enumerate() {
        for (v, offset, keep_from) in scoring_views(h, max_len) {
            views.push((i, v, offset, keep_from));
        }
    }
    for chunk in views.chunks(SCORING_CHUNK) {
        let refs: Vec<&BorrowerHistory> = chunk.iter().map(|(_, v, _, _)| v).collect();
        let batch = build_batch(&refs, max_len, stats)?;
        let (s, f) = model.predict(&batch)?;
        let layout = batch.layout();
        for (k, (i, _, offset, keep_from)) in chunk.iter().enumerate() {
            for p in *keep_from..layout.len_of(k) {
                let row = layout.offset(k) + p;
                scores[*i][offset + p] = s[row];
                features[*i][offset + p] = f[row].clone();
            }
        }
    }
    Ok((scores, features))
}

/// Test AUC inside one sequence-length group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinAuc {
    pub bin: String,
    pub loans: usize,
    /// `None` when the group is empty or holds a single class.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    /// Realized profit of the model-approved evaluated loans.
    pub profit: f64,
    pub evaluated: usize,
    pub approved: usize,
    pub inclusion: InclusionReport,
    /// Mean socioeconomic index of the borrowers behind approved loans.
    pub approved_ses_index: f64,
    pub alignment: f64,
    pub uniformity: f64,
    pub length_bins: Vec<BinAuc>,
}

/// Per-loan evaluation results alongside the summary.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Scores, labels and length bins of the evaluated loans, in order.
    pub scores: Vec<f64>,
    pub labels: Vec<i8>,
    pub bins: Vec<usize>,
}

/// Scores the test borrowers and computes every metric. `mask`, when
/// given, selects which loans are evaluated.
pub fn evaluate(
    model: &Model,
    stats: &FeatureStats,
    test: &[BorrowerHistory],
    mask: Option<&[Vec<bool>]>,
    cfg: &TrainConfig,
) -> Result<Evaluation> {
    let (scores_by, features_by) = score_histories(model, stats, test)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut bins = Vec::new();
    let mut loans = Vec::new();
    let mut owners = Vec::new();
    let mut features = Vec::new();
    let mut diag_rows: Vec<(usize, usize)> = Vec::new();
    for (i, h) in test.iter().enumerate() {
        for t in 0..h.len() {
            if mask.is_some_and(|m| !m[i][t]) {
                continue;
            }
            if h.labels[t] == UNLABELED {
                return Err(TrainError::Data(DataError::Invalid(format!(
                    "test borrower {} has an unlabeled loan",
                    h.borrower_id
                ))));
            }
            scores.push(scores_by[i][t]);
            labels.push(h.labels[t]);
            bins.push(metrics::length_bin(h.len()));
            loans.push((&h.applications[t], h.labels[t]));
            owners.push(h);
            if features.len() < cfg.diagnostic_loans {
                features.push(features_by[i][t].clone());
                diag_rows.push((i, t));
            }
        }
    }
    let auc = metrics::auc(&scores, &labels)?;
    let decisions: Vec<bool> = scores.iter().map(|&s| s >= cfg.approval_threshold).collect();
    let profit = metrics::profit(&decisions, &loans)?;
    let approved = decisions.iter().filter(|&&d| d).count();
    let inclusion = match metrics::inclusion_report(&decisions, &owners) {
        Ok(r) => r,
        Err(MetricError::NoApprovals) => InclusionReport {
            living_city_dpi: f64::NAN,
            monthly_income_level: f64::NAN,
            education_level: f64::NAN,
            homeownership: f64::NAN,
            approved: 0,
        },
        Err(e) => return Err(e.into()),
    };
    let approved_ses_index = if approved == 0 {
        f64::NAN
    } else {
        decisions
            .iter()
            .zip(&owners)
            .filter(|(d, _)| **d)
            .map(|(_, h)| crate::data::socioeconomic_index(&h.demographics))
            .sum::<f64>()
            / approved as f64
    };
    let alignment = diagnostic_alignment(model, stats, test, &diag_rows, cfg.seed)?;
    let uniformity = metrics::uniformity(&features)?;
    let length_bins = (0..metrics::LENGTH_BINS.len())
        .map(|b| {
            let idx: Vec<usize> = (0..bins.len()).filter(|&k| bins[k] == b).collect();
            let s: Vec<f64> = idx.iter().map(|&k| scores[k]).collect();
            let y: Vec<i8> = idx.iter().map(|&k| labels[k]).collect();
            BinAuc {
                bin: metrics::length_bin_label(b),
                loans: idx.len(),
                auc: metrics::auc(&s, &y).ok(),
            }
        })
        .collect();
    Ok(Evaluation {
        report: MetricsReport {
            auc,
            profit,
            evaluated: scores.len(),
            approved,
            inclusion,
            approved_ses_index,
            alignment,
            uniformity,
            length_bins,
        },
        scores,
        labels,
        bins,
    })
}

/// Alignment between two dropout views of the listed test loans.
fn diagnostic_alignment(
    model: &Model,
    stats: &FeatureStats,
    test: &[BorrowerHistory],
    rows: &[(usize, usize)],
    seed: u64,
) -> Result<f64> {
    let max_len = model.config().max_sequence_length;
    let mut members: Vec<usize> = rows.iter().map(|&(i, _)| i).collect();
    members.dedup();
    // only the most recent max_len loans are visible to the views
    let picked: Vec<BorrowerHistory> = members
        .iter()
        .map(|&i| {
            let h = &test[i];
            let start = h.len().saturating_sub(max_len);
            window(h, start, h.len())
        })
        .collect();
    let refs: Vec<&BorrowerHistory> = picked.iter().collect();
    let batch = build_batch(&refs, max_len, stats)?;
    let layout = batch.layout();
    let mut slot = vec![usize::MAX; test.len()];
    for (k, &i) in members.iter().enumerate() {
        slot[i] = k;
    }
    let packed_rows: Vec<usize> = rows
        .iter()
        .filter_map(|&(i, t)| {
            let k = slot[i];
            let start = test[i].len().saturating_sub(max_len);
            (t >= start).then(|| layout.offset(k) + t - start)
        })
        .collect();
    let diag_seed = derive_seed(seed, stream_id("diagnostics"));
    let mut views = Vec::with_capacity(2);
    for v in 1..=2u64 {
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let out = model.forward(&mut g, &p, &batch, Mode::Train { seed: derive_seed(diag_seed, v) })?;
        let fv = g.value(out.features);
        views.push(packed_rows.iter().map(|&r| fv.row(r).to_vec()).collect::<Vec<_>>());
    }
    Ok(metrics::alignment(&views[0], &views[1])?)
}
