//! Training objectives: masked label cross-entropy, the dropout-pair
//! contrastive loss with in-batch negatives, the domain classification loss
//! and the ramp for its weight.

use serde::{Deserialize, Serialize};

use crate::data::UNLABELED;
use crate::tensor::{Graph, Result, TensorError, Var};

/// Tolerance on `‖f‖ = 1` for contrastive inputs.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_y: f64,
    pub w_cl: f64,
    pub wd_max: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_y: 1.0,
            w_cl: 0.1,
            wd_max: 0.1,
            gamma: 0.001,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    pub fn w_d(&self, step: u64) -> f64 {
        wd_schedule(step, self.gamma, self.wd_max)
    }
}

/// `wd_max * (2 / (1 + exp(-gamma * p)) - 1)`.
pub fn wd_schedule(step: u64, gamma: f64, wd_max: f64) -> f64 {
    wd_max * (2.0 / (1.0 + (-gamma * step as f64).exp()) - 1.0)
}

/// Which auxiliary objectives are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    pub use_cl: bool,
    pub use_da: bool,
}

impl Ablation {
    pub const OURS: Self = Self {
        use_cl: true,
        use_da: true,
    };
    pub const NO_CL: Self = Self {
        use_cl: false,
        use_da: true,
    };
    pub const NO_DA: Self = Self {
        use_cl: true,
        use_da: false,
    };
    pub const NEITHER: Self = Self {
        use_cl: false,
        use_da: false,
    };
    pub const ALL: [Self; 4] = [Self::OURS, Self::NO_CL, Self::NO_DA, Self::NEITHER];

    pub fn label(self) -> &'static str {
        match (self.use_cl, self.use_da) {
            (true, true) => "ours",
            (false, true) => "no-CL",
            (true, false) => "no-DA",
            (false, false) => "neither",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.label().eq_ignore_ascii_case(s))
    }
}

/// Mean cross-entropy over loans with a known outcome; `0` with no gradient
/// when there are none.
pub fn label_loss(g: &mut Graph, logits: Var, labels: &[i8]) -> Result<Var> {
    let targets: Vec<usize> = labels.iter().map(|&y| y.max(0) as usize).collect();
    let weights: Vec<f64> = labels
        .iter()
        .map(|&y| if y == UNLABELED { 0.0 } else { 1.0 })
        .collect();
    g.cross_entropy(logits, &targets, &weights)
}

/// Mean cross-entropy of the domain classifier over every loan. Tag 1 is
/// the labeled domain.
pub fn domain_loss(g: &mut Graph, logits: Var, tags: &[u8]) -> Result<Var> {
    let targets: Vec<usize> = tags.iter().map(|&t| usize::from(t)).collect();
    g.cross_entropy(logits, &targets, &vec![1.0; tags.len()])
}

fn check_unit_rows(g: &Graph, v: Var) -> Result<()> {
    let t = g.value(v);
    for r in 0..t.rows() {
        let n = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(TensorError::Invalid(format!(
                "contrastive input row {r} has norm {n}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Contrastive loss over `M` positive pairs `(z[i], z2[i])`.
///
/// For every anchor the denominator runs over the other `M - 1` vectors of
/// its own view and all `M` vectors of the other view, positive included;
/// the result is averaged over all `2M` anchors.
pub fn contrastive_loss(g: &mut Graph, z: Var, z2: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(TensorError::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let m = g.value(z).rows();
    if g.value(z2).shape() != g.value(z).shape() {
        return Err(TensorError::Shape {
            op: "contrastive_loss",
            left: g.value(z).shape().to_vec(),
            right: g.value(z2).shape().to_vec(),
        });
    }
    check_unit_rows(g, z)?;
    check_unit_rows(g, z2)?;
    let all = g.concat_rows(&[z, z2])?;
    let all_t = g.transpose(all);
    let sim = g.matmul(all, all_t)?;
    let logits = g.scale(sim, 1.0 / tau);
    let n = 2 * m;
    let allowed: Vec<bool> = (0..n * n).map(|k| k / n != k % n).collect();
    let log_probs = g.log_softmax_masked(logits, &allowed)?;
    let positives: Vec<(usize, usize)> = (0..m)
        .map(|i| (i, i + m))
        .chain((0..m).map(|i| (i + m, i)))
        .collect();
    let picked = g.pick(log_probs, &positives)?;
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

/// `w_y L_y + w_CL L_CL + w_d(p) L_d`, leaving out switched-off terms.
pub fn total_loss(
    g: &mut Graph,
    l_y: Var,
    l_cl: Option<Var>,
    l_d: Option<Var>,
    weights: &LossWeights,
    step: u64,
    ablation: Ablation,
) -> Result<Var> {
    let mut total = g.scale(l_y, weights.w_y);
    if let (true, Some(l)) = (ablation.use_cl, l_cl) {
        let t = g.scale(l, weights.w_cl);
        total = g.add(total, t)?;
    }
    if let (true, Some(l)) = (ablation.use_da, l_d) {
        let t = g.scale(l, weights.w_d(step));
        total = g.add(total, t)?;
    }
    Ok(total)
}
