//! Evaluation metrics and embedding diagnostics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BorrowerHistory, LoanApplication, DEFAULTED, REPAID};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("AUC needs both classes among the labels")]
    SingleClass,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("label must be 0 or 1, got {0}")]
    Label(i8),
    #[error("no approved loans")]
    NoApprovals,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("covariance rank is below {0}")]
    RankDeficient(usize),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Mann-Whitney AUC: probability that a repaid loan (label 1) scores above a
/// defaulted one, ties counting one half. Uses average ranks.
pub fn auc(scores: &[f64], labels: &[i8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length(scores.len(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y != DEFAULTED && y != REPAID) {
        return Err(MetricError::Label(bad));
    }
    let n_pos = labels.iter().filter(|&&y| y == REPAID).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps tied averages integral
    let mut rank2_sum_pos: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1, average (i + j + 2) / 2
        let avg2 = (i + j + 2) as u128;
        for &k in &idx[i..=j] {
            if labels[k] == REPAID {
                rank2_sum_pos += avg2;
            }
        }
        i = j + 1;
    }
    let np = n_pos as u128;
    let u2 = rank2_sum_pos - np * (np + 1);
    Ok(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Realized profit of one issued loan: interest `amount * rate * term / 12`
/// when repaid, the full principal lost when defaulted.
pub fn loan_profit(app: &LoanApplication, label: i8) -> f64 {
    if label == DEFAULTED {
        -app.amount
    } else {
        app.amount * app.annual_interest_rate * f64::from(app.term_months) / 12.0
    }
}

/// Sum of realized profit over approved loans.
pub fn profit(decisions: &[bool], loans: &[(&LoanApplication, i8)]) -> Result<f64> {
    if decisions.len() != loans.len() {
        return Err(MetricError::Length(decisions.len(), loans.len()));
    }
    Ok(decisions
        .iter()
        .zip(loans)
        .filter(|(d, _)| **d)
        .map(|(_, (a, y))| loan_profit(a, *y))
        .sum())
}

/// Mean demographics of the borrowers behind approved loans.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InclusionReport {
    pub living_city_dpi: f64,
    pub monthly_income_level: f64,
    pub education_level: f64,
    pub homeownership: f64,
    pub approved: usize,
}

/// Averages over approved loans; `owners[k]` is the borrower of loan `k`.
pub fn inclusion_report(
    decisions: &[bool],
    owners: &[&BorrowerHistory],
) -> Result<InclusionReport> {
    if decisions.len() != owners.len() {
        return Err(MetricError::Length(decisions.len(), owners.len()));
    }
    let mut sums = [0.0; 4];
    let mut n = 0usize;
    for (_, h) in decisions.iter().zip(owners).filter(|(d, _)| **d) {
        let d = &h.demographics;
        sums[0] += d.living_city_dpi;
        sums[1] += d.monthly_income_level;
        sums[2] += d.education_level;
        sums[3] += d.homeownership;
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::NoApprovals);
    }
    let k = n as f64;
    Ok(InclusionReport {
        living_city_dpi: sums[0] / k,
        monthly_income_level: sums[1] / k,
        education_level: sums[2] / k,
        homeownership: sums[3] / k,
        approved: n,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean squared distance between paired embeddings.
pub fn alignment(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricError::Length(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::TooFewPoints { needed: 1, got: 0 });
    }
    Ok(a.iter().zip(b).map(|(x, y)| sq_dist(x, y)).sum::<f64>() / a.len() as f64)
}

/// Mean of `exp(-2 ‖x - y‖²)` over unordered pairs of distinct points.
pub fn uniformity(points: &[Vec<f64>]) -> Result<f64> {
    let n = points.len();
    if n < 2 {
        return Err(MetricError::TooFewPoints { needed: 2, got: n });
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += (-2.0 * sq_dist(&points[i], &points[j])).exp();
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with matching column vectors.
pub fn symmetric_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k][i]).collect())
        .collect();
    (values, vectors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// One row of `k` coordinates per input point.
    pub coordinates: Vec<Vec<f64>>,
    /// Share of total variance carried by each kept component.
    pub explained_variance_ratio: Vec<f64>,
    pub components: Vec<Vec<f64>>,
}

/// Projects onto the top `k` principal axes. Each axis is signed so that its
/// largest-magnitude coordinate is positive.
pub fn pca(points: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = points.len();
    if n < k.max(2) {
        return Err(MetricError::TooFewPoints {
            needed: k.max(2),
            got: n,
        });
    }
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / n as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for p in points {
        for i in 0..d {
            let di = p[i] - mean[i];
            for j in i..d {
                cov[i][j] += di * (p[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= (n - 1) as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let (values, mut vectors) = symmetric_eigen(&cov);
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    if k > d || total <= 0.0 {
        return Err(MetricError::RankDeficient(k));
    }
    vectors.truncate(k);
    for vec in vectors.iter_mut() {
        let big = vec
            .iter()
            .copied()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if big < 0.0 {
            vec.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let coordinates = points
        .iter()
        .map(|p| {
            vectors
                .iter()
                .map(|v| v.iter().zip(p.iter().zip(&mean)).map(|(a, (x, m))| a * (x - m)).sum())
                .collect()
        })
        .collect();
    let explained_variance_ratio = values[..k].iter().map(|v| v.max(0.0) / total).collect();
    Ok(Pca {
        coordinates,
        explained_variance_ratio,
        components: vectors,
    })
}

/// Sequence-length groups: `{1}, {2-3}, {4-6}, {7-10}, {>10}`.
pub const LENGTH_BINS: [(usize, usize); 5] = [(1, 1), (2, 3), (4, 6), (7, 10), (11, usize::MAX)];

pub fn length_bin(len: usize) -> usize {
    LENGTH_BINS
        .iter()
        .position(|&(lo, hi)| len >= lo && len <= hi)
        .unwrap_or(0)
}

pub fn length_bin_label(bin: usize) -> String {
    match LENGTH_BINS[bin] {
        (lo, hi) if lo == hi => format!("{lo}"),
        (lo, usize::MAX) => format!(">{}", lo - 1),
        (lo, hi) => format!("{lo}-{hi}"),
    }
}

/// Ordinary least-squares slope of `y` on `x`; zero when `x` is constant.
pub fn least_squares_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}
