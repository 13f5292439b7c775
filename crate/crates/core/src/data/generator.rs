use rand::Rng as _;
use rand_distr::{Distribution, Exp, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    BorrowerHistory, DataError, DatasetSplit, DemographicVector, LoanApplication, RepaymentRecord,
    Result, DEFAULTED, REPAID, UNLABELED,
};
use crate::rng::{derive_seed, seeded, Rng};

/// Knobs of the synthetic population. Defaults follow the published
/// platform aggregates (approval rate, repeat-applicant share, mean
/// applications per repeat applicant, 3 to 8 month terms).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_borrowers: usize,
    pub repeat_applicant_fraction: f64,
    pub mean_repeat_applications: f64,
    pub max_applications: usize,
    pub target_approval_rate: f64,
    /// Weight of the socioeconomic bonus in the historical screener.
    pub bias_strength: f64,
    /// Probability of flipping a recorded outcome.
    pub label_noise: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_borrowers: 4000,
            repeat_applicant_fraction: 0.3837,
            mean_repeat_applications: 4.21,
            max_applications: 30,
            target_approval_rate: 0.4368,
            bias_strength: 1.5,
            label_noise: 0.0,
            test_fraction: 0.2,
            seed: 20_230_601,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: &str| {
            Err(DataError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if self.n_borrowers < 2 {
            return bad("n_borrowers", "must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.repeat_applicant_fraction) {
            return bad("repeat_applicant_fraction", "must lie in [0, 1]");
        }
        if !(self.mean_repeat_applications >= 2.0) {
            return bad("mean_repeat_applications", "must be at least 2");
        }
        if self.max_applications < 2 {
            return bad("max_applications", "must be at least 2");
        }
        if !(self.target_approval_rate > 0.0 && self.target_approval_rate < 1.0) {
            return bad("target_approval_rate", "must lie in (0, 1)");
        }
        if !(self.bias_strength >= 0.0 && self.bias_strength.is_finite()) {
            return bad("bias_strength", "must be a finite value >= 0");
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad("label_noise", "must lie in [0, 0.5)");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction", "must lie in (0, 1)");
        }
        let n_test = self.n_test();
        if n_test == 0 || n_test == self.n_borrowers {
            return bad("test_fraction", "leaves an empty train or test split");
        }
        Ok(())
    }

    pub fn n_test(&self) -> usize {
        (self.n_borrowers as f64 * self.test_fraction).round() as usize
    }
}

// Structural constants of the data-generating process.
const MEAN_AMOUNT: f64 = 450.0;
const BASE_DEFAULT_LOGIT: f64 = -3.5;
const CREDIT_DEFAULT_SLOPE: f64 = 1.5;
/// Share of creditworthiness visible through `covariate_a`.
const CREDIT_COVARIATE_LOADING: f64 = 0.6;
/// Socioeconomic effect on repayment above and below the population mean:
/// protective for the well-off, flat for the rest.
const SES_SLOPE_HIGH: f64 = 0.6;
const SES_SLOPE_LOW: f64 = 0.0;
const AMOUNT_DEFAULT_SLOPE: f64 = 0.5;
const TERM_DEFAULT_SLOPE: f64 = 0.15;
const CREDIT_DRIFT_SD: f64 = 0.35;
// High-risk segment: over-borrowing applicants concentrated among the
// well-off. They shift `covariate_b` and the requested amount and default
// far more often. The historical screener does not see membership.
const RISKY_BASE_RATE: f64 = 0.15;
const RISKY_SES_TILT: f64 = 2.5;
const RISKY_MAX_RATE: f64 = 0.9;
const RISKY_SIGNAL: f64 = 1.5;
const RISKY_LOGIT_SHIFT: f64 = 6.0;
const SCREEN_PROXY_WEIGHT: f64 = 1.0;
const SCREEN_PROXY_NOISE: f64 = 1.0;
const SCREEN_REPAYMENT_WEIGHT: f64 = 0.8;
const SCREEN_EVALUATOR_NOISE: f64 = 0.5;

/// Per-application randomness consumed by the historical screener.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenDraws {
    pub proxy_noise: f64,
    pub evaluator_noise: f64,
}

/// Full generator state for one borrower, including what would have been
/// observed had every application been approved.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBorrower {
    pub borrower_id: u64,
    pub demographics: DemographicVector,
    /// Latent socioeconomic status driving the demographic fields.
    pub socioeconomic_latent: f64,
    /// Composite index built from the observed demographics.
    pub socioeconomic_index: f64,
    pub creditworthiness: f64,
    pub applications: Vec<LoanApplication>,
    /// Probability that each loan defaults if issued.
    pub default_probability: Vec<f64>,
    /// Recorded outcome of each loan if issued (`REPAID` / `DEFAULTED`).
    pub outcomes: Vec<i8>,
    /// Repayment behavior of each loan if issued.
    pub behavior: Vec<RepaymentRecord>,
    pub screen: Vec<ScreenDraws>,
    /// Member of the high-risk segment.
    pub risky: bool,
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Socioeconomic index from observed demographics, roughly unit scale.
pub fn socioeconomic_index(d: &DemographicVector) -> f64 {
    0.25 * ((d.living_city_dpi / 40_000.0).ln() / 0.2)
        + 0.25 * ((d.monthly_income_level - 3.4) / 1.4)
        + 0.25 * ((d.education_level - 2.3) / 0.9)
        + 0.25 * ((d.homeownership - 0.17) / 0.38)
}

/// Ground-truth default probability of an issued loan.
pub fn default_probability(
    creditworthiness: f64,
    socioeconomic_latent: f64,
    app: &LoanApplication,
) -> f64 {
    let ses = if socioeconomic_latent > 0.0 {
        SES_SLOPE_HIGH * socioeconomic_latent
    } else {
        SES_SLOPE_LOW * socioeconomic_latent
    };
    sigmoid(
        BASE_DEFAULT_LOGIT - CREDIT_DEFAULT_SLOPE * creditworthiness - ses
            + AMOUNT_DEFAULT_SLOPE * (app.amount / MEAN_AMOUNT).ln()
            + TERM_DEFAULT_SLOPE * (f64::from(app.term_months) - 5.5),
    )
}

fn repayment_quality(r: &RepaymentRecord) -> f64 {
    (r.positive_attitude_proportion - 0.65) / 0.2 - (r.assisted_proportion - 0.25) / 0.15
}

fn sample_borrower(cfg: &GeneratorConfig, index: usize) -> LatentBorrower {
    let mut rng = seeded(derive_seed(cfg.seed, index as u64));
    let u = normal(&mut rng);
    let income = (3.4 + 1.25 * u + 0.5 * normal(&mut rng)).round().clamp(1.0, 7.0);
    let education = (2.3 + 0.7 * u + 0.6 * normal(&mut rng)).round().clamp(1.0, 5.0);
    let homeownership = if rng.random::<f64>() < sigmoid(-1.9 + 0.8 * u) {
        1.0
    } else {
        0.0
    };
    let dpi = 40_000.0 * (0.18 * u + 0.08 * normal(&mut rng)).exp();
    let covariate_a = normal(&mut rng);
    // tilted so the segment's latent status averages RISKY_SES_TILT
    let risky_rate = RISKY_BASE_RATE * (RISKY_SES_TILT * u - 0.5 * RISKY_SES_TILT * RISKY_SES_TILT).exp();
    let risky = rng.random::<f64>() < risky_rate.min(RISKY_MAX_RATE);
    let risk_signal = if risky { RISKY_SIGNAL } else { 0.0 };
    let covariate_b = normal(&mut rng) + risk_signal;
    let demographics = DemographicVector {
        living_city_dpi: dpi,
        monthly_income_level: income,
        education_level: education,
        homeownership,
        covariate_a,
        covariate_b,
    };
    let loading = CREDIT_COVARIATE_LOADING;
    let creditworthiness = loading * covariate_a + (1.0 - loading * loading).sqrt() * normal(&mut rng);

    let len = if rng.random::<f64>() < cfg.repeat_applicant_fraction {
        let p = 1.0 / (cfg.mean_repeat_applications - 1.0);
        let extra = Geometric::new(p).expect("valid geometric").sample(&mut rng) as usize;
        (2 + extra).min(cfg.max_applications)
    } else {
        1
    };

    let overdue_tail = Exp::new(1.0 / 40.0).expect("valid rate");
    let mut applications = Vec::with_capacity(len);
    let mut default_probability_seq = Vec::with_capacity(len);
    let mut outcomes = Vec::with_capacity(len);
    let mut behavior = Vec::with_capacity(len);
    let mut screen = Vec::with_capacity(len);
    for _ in 0..len {
        let app = LoanApplication {
            amount: MEAN_AMOUNT * (0.08 * (income - 3.4) + 0.3 * normal(&mut rng) + 0.4 * risk_signal).exp(),
            annual_interest_rate: (0.18 + 0.015 * normal(&mut rng)).clamp(0.08, 0.3),
            term_months: rng.random_range(3..=8),
        };
        let credit_now = creditworthiness + CREDIT_DRIFT_SD * normal(&mut rng);
        let mut p_default = default_probability(credit_now, u, &app);
        if risky {
            p_default = sigmoid((p_default / (1.0 - p_default)).ln() + RISKY_LOGIT_SHIFT);
        }
        let defaulted = rng.random::<f64>() < p_default;
        let flipped = rng.random::<f64>() < cfg.label_noise;
        let outcome = if defaulted != flipped { DEFAULTED } else { REPAID };
        let overdue_days = if defaulted {
            (90.0_f64 + overdue_tail.sample(&mut rng)).min(180.0)
        } else {
            let mean = 6.0 * (-0.7 * credit_now).exp();
            Exp::new(1.0 / mean)
                .expect("positive mean")
                .sample(&mut rng)
                .min(89.0)
        };
        let attitude = sigmoid(0.8 + 0.9 * credit_now + 0.5 * normal(&mut rng))
            * if defaulted { 0.6 } else { 1.0 };
        let assisted = sigmoid(-1.4 - 0.6 * credit_now + 0.5 * normal(&mut rng));
        behavior.push(RepaymentRecord {
            overdue_days,
            positive_attitude_proportion: attitude,
            assisted_proportion: assisted,
        });
        screen.push(ScreenDraws {
            proxy_noise: SCREEN_PROXY_NOISE * normal(&mut rng),
            evaluator_noise: SCREEN_EVALUATOR_NOISE * normal(&mut rng),
        });
        applications.push(app);
        default_probability_seq.push(p_default);
        outcomes.push(outcome);
    }

    LatentBorrower {
        borrower_id: index as u64,
        socioeconomic_index: socioeconomic_index(&demographics),
        demographics,
        socioeconomic_latent: u,
        creditworthiness,
        applications,
        default_probability: default_probability_seq,
        outcomes,
        behavior,
        screen,
        risky,
    }
}

/// Replays the historical screener over one borrower's applications.
///
/// The approval score combines a noisy creditworthiness proxy, a
/// socioeconomic bonus scaled by `bias_strength`, and the quality of the
/// previous loan's repayment when that loan was issued.
pub fn historical_screen(borrower: &LatentBorrower, threshold: f64, bias_strength: f64) -> Vec<bool> {
    let mut approved = Vec::with_capacity(borrower.applications.len());
    for t in 0..borrower.applications.len() {
        let draws = borrower.screen[t];
        let mut score = SCREEN_PROXY_WEIGHT * (borrower.creditworthiness + draws.proxy_noise)
            + bias_strength * borrower.socioeconomic_index
            + draws.evaluator_noise;
        if t > 0 && approved[t - 1] {
            score += SCREEN_REPAYMENT_WEIGHT * repayment_quality(&borrower.behavior[t - 1]);
        }
        approved.push(score >= threshold);
    }
    approved
}

/// Observable history given the approval decision of every application.
pub fn materialize(borrower: &LatentBorrower, approved: &[bool]) -> BorrowerHistory {
    let n = borrower.applications.len();
    let mut labels = Vec::with_capacity(n);
    let mut observed = Vec::with_capacity(n);
    let mut repayments = Vec::with_capacity(n);
    for t in 0..n {
        labels.push(if approved[t] {
            borrower.outcomes[t]
        } else {
            UNLABELED
        });
        let seen = t > 0 && approved[t - 1];
        observed.push(u8::from(seen));
        repayments.push(if seen {
            borrower.behavior[t - 1].clone()
        } else {
            RepaymentRecord::default()
        });
    }
    BorrowerHistory {
        borrower_id: borrower.borrower_id,
        demographics: borrower.demographics.clone(),
        applications: borrower.applications.clone(),
        repayments,
        labels,
        observed,
        latent_creditworthiness: borrower.creditworthiness,
    }
}

fn approval_rate(borrowers: &[LatentBorrower], threshold: f64, bias: f64) -> (usize, usize) {
    let mut approved = 0;
    let mut total = 0;
    for b in borrowers {
        let a = historical_screen(b, threshold, bias);
        approved += a.iter().filter(|&&x| x).count();
        total += a.len();
    }
    (approved, total)
}

/// Threshold whose realized approval rate on `borrowers` matches `target`.
pub fn calibrate_threshold(borrowers: &[LatentBorrower], target: f64, bias: f64) -> f64 {
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let (a, n) = approval_rate(borrowers, mid, bias);
        if (a as f64 / n as f64) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut threshold = 0.5 * (lo + hi);
    let (a, n) = approval_rate(borrowers, threshold, bias);
    if a == 0 {
        threshold = lo;
    } else if a == n {
        threshold = hi;
    }
    threshold
}

/// Population latent states for `cfg`, in borrower-id order.
pub fn sample_latent_population(cfg: &GeneratorConfig) -> Result<Vec<LatentBorrower>> {
    cfg.validate()?;
    Ok((0..cfg.n_borrowers).map(|i| sample_borrower(cfg, i)).collect())
}

/// Generates the train/test split. A pure function of `cfg`.
pub fn generate_population(cfg: &GeneratorConfig) -> Result<DatasetSplit> {
    let latent = sample_latent_population(cfg)?;
    let n_test = cfg.n_test();
    let (test_latent, train_latent) = latent.split_at(n_test);
    let threshold = calibrate_threshold(train_latent, cfg.target_approval_rate, cfg.bias_strength);
    let mut train: Vec<BorrowerHistory> = train_latent
        .iter()
        .map(|b| materialize(b, &historical_screen(b, threshold, cfg.bias_strength)))
        .collect();
    ensure_both_domains(&mut train, train_latent);
    let test = test_latent
        .iter()
        .map(|b| materialize(b, &vec![true; b.applications.len()]))
        .collect();
    Ok(DatasetSplit {
        train,
        test,
        config: cfg.clone(),
    })
}

/// Degenerate calibrations can leave one domain empty; flip the first
/// application of one borrower so both labeled and unlabeled loans exist.
fn ensure_both_domains(train: &mut [BorrowerHistory], latent: &[LatentBorrower]) {
    let labeled: usize = train.iter().map(BorrowerHistory::labeled_count).sum();
    let total: usize = train.iter().map(BorrowerHistory::len).sum();
    if labeled > 0 && labeled < total {
        return;
    }
    let approve_first = labeled == 0;
    let idx = 0;
    let n = latent[idx].applications.len();
    let mut approvals = vec![!approve_first; n];
    approvals[0] = approve_first;
    train[idx] = materialize(&latent[idx], &approvals);
}
