//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever evaluates the forward pass, so it is
//! independent of every backward rule it checks.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Graph, Result, Tensor, Var};
use crate::rng::seeded;

/// Gaussian tensor with the given standard deviation.
pub fn random_tensor(shape: &[usize], seed: u64, std: f64) -> Tensor {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape is consistent")
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

/// `|a - b| / max(|a|, |b|)` over whole vectors; falls back to the absolute
/// difference when both norms are below `1e-10`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-10 {
        diff
    } else {
        diff / denom
    }
}

impl GradCheck {
    pub fn errors(&self) -> Vec<f64> {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| relative_error(a, n))
            .collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.errors().into_iter().fold(0.0, f64::max)
    }

    /// Compares the analytic gradient against `scale` times the numeric one.
    pub fn max_rel_error_scaled(&self, scale: f64) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| {
                let scaled: Vec<f64> = n.iter().map(|x| x * scale).collect();
                relative_error(a, &scaled)
            })
            .fold(0.0, f64::max)
    }
}

/// Builds the graph from fresh leaves for every evaluation. `f` must return
/// a scalar node.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[i].len()];
        for (j, slot) in grad.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        numeric.push(grad);
    }
    Ok(GradCheck { analytic, numeric })
}
