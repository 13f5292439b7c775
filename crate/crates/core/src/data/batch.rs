use serde::{Deserialize, Serialize};

use super::{BorrowerHistory, DataError, Result, UNLABELED};
use crate::tensor::{SeqLayout, Tensor};

/// Width of the per-loan input: three application and three repayment features.
pub const SEQUENCE_WIDTH: usize = 6;
pub const DEMOGRAPHIC_WIDTH: usize = 6;

/// Overdue days are capped here and rescaled to [0, 1] before standardizing.
pub const OVERDUE_CAP_DAYS: f64 = 180.0;

/// Standardization statistics, computed from the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub sequence_mean: [f64; SEQUENCE_WIDTH],
    pub sequence_std: [f64; SEQUENCE_WIDTH],
    pub demographic_mean: [f64; DEMOGRAPHIC_WIDTH],
    pub demographic_std: [f64; DEMOGRAPHIC_WIDTH],
}

fn raw_sequence_row(h: &BorrowerHistory, t: usize) -> [f64; SEQUENCE_WIDTH] {
    let a = &h.applications[t];
    let r = &h.repayments[t];
    [
        a.amount,
        a.annual_interest_rate,
        f64::from(a.term_months),
        r.overdue_days.min(OVERDUE_CAP_DAYS) / OVERDUE_CAP_DAYS,
        r.positive_attitude_proportion,
        r.assisted_proportion,
    ]
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for v in values {
        n += 1;
        sum += v;
        sq += v * v;
    }
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

impl FeatureStats {
    /// Application features use every loan; repayment features use only
    /// loans whose repayment record is observed, so unobserved records stay
    /// exactly zero after standardization.
    pub fn from_train(train: &[BorrowerHistory]) -> Self {
        let mut sequence_mean = [0.0; SEQUENCE_WIDTH];
        let mut sequence_std = [1.0; SEQUENCE_WIDTH];
        for j in 0..SEQUENCE_WIDTH {
            let values = train.iter().flat_map(|h| {
                (0..h.len())
                    .filter(move |&t| j < 3 || h.observed[t] == 1)
                    .map(move |t| raw_sequence_row(h, t)[j])
            });
            let (m, s) = mean_std(values);
            sequence_mean[j] = m;
            sequence_std[j] = s;
        }
        let mut demographic_mean = [0.0; DEMOGRAPHIC_WIDTH];
        let mut demographic_std = [1.0; DEMOGRAPHIC_WIDTH];
        for j in 0..DEMOGRAPHIC_WIDTH {
            let (m, s) = mean_std(train.iter().map(|h| h.demographics.to_array()[j]));
            demographic_mean[j] = m;
            demographic_std[j] = s;
        }
        Self {
            sequence_mean,
            sequence_std,
            demographic_mean,
            demographic_std,
        }
    }

    pub fn standardize_sequence(&self, h: &BorrowerHistory, t: usize) -> [f64; SEQUENCE_WIDTH] {
        let raw = raw_sequence_row(h, t);
        let mut out = [0.0; SEQUENCE_WIDTH];
        for j in 0..SEQUENCE_WIDTH {
            out[j] = if j >= 3 && h.observed[t] == 0 {
                0.0
            } else {
                (raw[j] - self.sequence_mean[j]) / self.sequence_std[j]
            };
        }
        out
    }

    pub fn standardize_demographics(&self, h: &BorrowerHistory) -> [f64; DEMOGRAPHIC_WIDTH] {
        let raw = h.demographics.to_array();
        let mut out = [0.0; DEMOGRAPHIC_WIDTH];
        for j in 0..DEMOGRAPHIC_WIDTH {
            out[j] = (raw[j] - self.demographic_mean[j]) / self.demographic_std[j];
        }
        out
    }
}

/// Right-padded mini-batch. Per-position arrays are `batch x max_len`
/// row-major; padded slots have `mask == false`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub max_len: usize,
    /// `batch x max_len x 6` standardized loan features.
    pub sequences: Vec<f64>,
    /// Observability flag `S` per position.
    pub observed: Vec<f64>,
    /// `batch x 6` standardized demographics.
    pub demographics: Vec<f64>,
    pub labels: Vec<i8>,
    /// 1 for the labeled (approved) domain, 0 for the unlabeled domain.
    pub domain: Vec<u8>,
    pub mask: Vec<bool>,
    pub positions: Vec<usize>,
    pub lengths: Vec<usize>,
    /// Whether older loans were dropped to fit `max_len`.
    pub truncated: Vec<bool>,
    pub borrower_ids: Vec<u64>,
    /// Index into the source history of each kept position.
    pub source_positions: Vec<usize>,
}

/// Pads and standardizes `histories`. Sequences longer than `max_len` keep
/// their most recent `max_len` loans.
pub fn build_batch(histories: &[&BorrowerHistory], max_len: usize, stats: &FeatureStats) -> Result<Batch> {
    if histories.is_empty() {
        return Err(DataError::EmptyBatch);
    }
    if max_len == 0 {
        return Err(DataError::Invalid("max_len must be positive".into()));
    }
    let b = histories.len();
    let lengths: Vec<usize> = histories.iter().map(|h| h.len().min(max_len)).collect();
    let width = lengths.iter().copied().max().unwrap_or(1).max(1);
    let slots = b * width;
    let mut batch = Batch {
        batch_size: b,
        max_len: width,
        sequences: vec![0.0; slots * SEQUENCE_WIDTH],
        observed: vec![0.0; slots],
        demographics: Vec::with_capacity(b * DEMOGRAPHIC_WIDTH),
        labels: vec![UNLABELED; slots],
        domain: vec![0; slots],
        mask: vec![false; slots],
        positions: vec![0; slots],
        lengths: lengths.clone(),
        truncated: histories.iter().map(|h| h.len() > max_len).collect(),
        borrower_ids: histories.iter().map(|h| h.borrower_id).collect(),
        source_positions: vec![0; slots],
    };
    for (i, h) in histories.iter().enumerate() {
        if h.is_empty() {
            return Err(DataError::Invalid(format!(
                "borrower {} has no applications",
                h.borrower_id
            )));
        }
        let start = h.len() - lengths[i];
        for p in 0..lengths[i] {
            let t = start + p;
            let slot = i * width + p;
            batch.sequences[slot * SEQUENCE_WIDTH..(slot + 1) * SEQUENCE_WIDTH]
                .copy_from_slice(&stats.standardize_sequence(h, t));
            batch.observed[slot] = f64::from(h.observed[t]);
            batch.labels[slot] = h.labels[t];
            batch.domain[slot] = u8::from(h.labels[t] != UNLABELED);
            batch.mask[slot] = true;
            batch.positions[slot] = p;
            batch.source_positions[slot] = t;
        }
        batch
            .demographics
            .extend_from_slice(&stats.standardize_demographics(h));
    }
    Ok(batch)
}

impl Batch {
    pub fn layout(&self) -> SeqLayout {
        SeqLayout::new(self.lengths.clone())
    }

    pub fn num_loans(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Padded slot of every packed row, in packed order.
    pub fn packed_slots(&self) -> Vec<usize> {
        (0..self.batch_size)
            .flat_map(|b| (0..self.lengths[b]).map(move |p| b * self.max_len + p))
            .collect()
    }

    /// `[N, 6]` loan features with padding removed.
    pub fn packed_sequences(&self) -> Tensor {
        let slots = self.packed_slots();
        let mut data = Vec::with_capacity(slots.len() * SEQUENCE_WIDTH);
        for s in &slots {
            data.extend_from_slice(&self.sequences[s * SEQUENCE_WIDTH..(s + 1) * SEQUENCE_WIDTH]);
        }
        Tensor::new(vec![slots.len(), SEQUENCE_WIDTH], data).expect("non-empty batch")
    }

    pub fn packed<T: Copy>(&self, per_slot: &[T]) -> Vec<T> {
        self.packed_slots().into_iter().map(|s| per_slot[s]).collect()
    }

    pub fn demographics_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.batch_size, DEMOGRAPHIC_WIDTH],
            self.demographics.clone(),
        )
        .expect("non-empty batch")
    }
}
