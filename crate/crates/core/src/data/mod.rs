//! Synthetic selective-labels loan population.
//!
//! A borrower applies for one or more loans in sequence. In the training
//! split a historical screener approves some applications; only approved
//! loans reveal a default label and, on the following application, a
//! repayment record. The test split mimics an approve-everything period, so
//! every test loan is labeled.

mod batch;
mod generator;
mod io;
mod reveal;

pub use batch::{build_batch, Batch, FeatureStats, DEMOGRAPHIC_WIDTH, SEQUENCE_WIDTH};
pub use generator::{
    default_probability, generate_population, historical_screen, materialize, sample_latent_population,
    socioeconomic_index, GeneratorConfig, LatentBorrower, ScreenDraws,
};
pub use io::{load_split, read_generator_config, read_jsonl, save_split, write_jsonl, CONFIG_FILE, TEST_FILE, TRAIN_FILE};
pub use reveal::{reveal_test_labels, RevealedSplit};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Label of a loan that was not approved and whose outcome is unknown.
pub const UNLABELED: i8 = -1;
/// Approved and defaulted.
pub const DEFAULTED: i8 = 0;
/// Approved and repaid.
pub const REPAID: i8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicVector {
    /// Disposable personal income per capita of the living city.
    pub living_city_dpi: f64,
    /// Ordinal 1..=7.
    pub monthly_income_level: f64,
    /// Ordinal 1..=5.
    pub education_level: f64,
    /// 0 or 1.
    pub homeownership: f64,
    pub covariate_a: f64,
    pub covariate_b: f64,
}

impl DemographicVector {
    pub fn to_array(&self) -> [f64; DEMOGRAPHIC_WIDTH] {
        [
            self.living_city_dpi.ln(),
            self.monthly_income_level,
            self.education_level,
            self.homeownership,
            self.covariate_a,
            self.covariate_b,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoanApplication {
    pub amount: f64,
    pub annual_interest_rate: f64,
    pub term_months: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RepaymentRecord {
    pub overdue_days: f64,
    pub positive_attitude_proportion: f64,
    pub assisted_proportion: f64,
}

impl RepaymentRecord {
    pub fn is_zero(&self) -> bool {
        self.overdue_days == 0.0
            && self.positive_attitude_proportion == 0.0
            && self.assisted_proportion == 0.0
    }
}

/// One applicant's demographics and aligned loan sequences.
///
/// `repayments[t]` describes the loan at `t - 1` and is populated only when
/// that loan was approved, which is exactly when `observed[t] == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BorrowerHistory {
    pub borrower_id: u64,
    pub demographics: DemographicVector,
    pub applications: Vec<LoanApplication>,
    pub repayments: Vec<RepaymentRecord>,
    pub labels: Vec<i8>,
    pub observed: Vec<u8>,
    /// Generator ground truth; never fed to a model.
    pub latent_creditworthiness: f64,
}

impl BorrowerHistory {
    pub fn len(&self) -> usize {
        self.applications.len()
    }

    pub fn is_empty(&self) -> bool {
        self.applications.is_empty()
    }

    /// Checks the sequence-coupling invariants.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let t = self.applications.len();
        if t == 0 {
            return Err("empty history".into());
        }
        if self.repayments.len() != t || self.labels.len() != t || self.observed.len() != t {
            return Err("sequence lengths differ".into());
        }
        for i in 0..t {
            let expected = u8::from(i > 0 && self.labels[i - 1] != UNLABELED);
            if self.observed[i] != expected {
                return Err(format!("observability flag wrong at position {i}"));
            }
            if self.observed[i] == 0 && !self.repayments[i].is_zero() {
                return Err(format!("unobserved repayment is non-zero at position {i}"));
            }
            if !(-1..=1).contains(&self.labels[i]) {
                return Err(format!("label out of range at position {i}"));
            }
            let a = &self.applications[i];
            if !(a.amount > 0.0 && a.annual_interest_rate > 0.0 && a.annual_interest_rate < 1.0) {
                return Err(format!("invalid application at position {i}"));
            }
            if !(3..=8).contains(&a.term_months) {
                return Err(format!("term out of range at position {i}"));
            }
            let r = &self.repayments[i];
            if r.overdue_days < 0.0
                || !(0.0..=1.0).contains(&r.positive_attitude_proportion)
                || !(0.0..=1.0).contains(&r.assisted_proportion)
            {
                return Err(format!("repayment record out of range at position {i}"));
            }
        }
        Ok(())
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&y| y != UNLABELED).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<BorrowerHistory>,
    pub test: Vec<BorrowerHistory>,
    pub config: GeneratorConfig,
}

impl DatasetSplit {
    pub fn train_loans(&self) -> usize {
        self.train.iter().map(BorrowerHistory::len).sum()
    }

    pub fn test_loans(&self) -> usize {
        self.test.iter().map(BorrowerHistory::len).sum()
    }

    /// Fraction of training applications that were approved.
    pub fn train_approval_rate(&self) -> f64 {
        let labeled: usize = self.train.iter().map(BorrowerHistory::labeled_count).sum();
        labeled as f64 / self.train_loans().max(1) as f64
    }
}
