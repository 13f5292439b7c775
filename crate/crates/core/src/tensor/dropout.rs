use rand::Rng;

use super::{Result, TensorError};
use crate::rng::seeded;

/// A materialized inverted-dropout mask.
///
/// Entries are exactly `0` or `1 / keep_prob`, so applying the mask during
/// training keeps the expected activation unchanged and evaluation mode can
/// skip the mask entirely.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    keep_prob: f64,
    seed: u64,
    shape: Vec<usize>,
    mask: Vec<f64>,
}

impl DropoutMask {
    pub fn new(seed: u64, shape: &[usize], keep_prob: f64) -> Result<Self> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(TensorError::Invalid(format!(
                "keep probability {keep_prob} outside (0, 1]"
            )));
        }
        let n: usize = shape.iter().product();
        let scale = 1.0 / keep_prob;
        let mask = if keep_prob == 1.0 {
            vec![1.0; n]
        } else {
            let mut rng = seeded(seed);
            (0..n)
                .map(|_| {
                    if rng.random::<f64>() < keep_prob {
                        scale
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        Ok(Self {
            keep_prob,
            seed,
            shape: shape.to_vec(),
            mask,
        })
    }

    /// Builds a mask from explicit keep flags.
    pub fn from_keep(shape: &[usize], keep: &[bool], keep_prob: f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        if keep.len() != n {
            return Err(TensorError::Shape {
                op: "DropoutMask::from_keep",
                left: shape.to_vec(),
                right: vec![keep.len()],
            });
        }
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(TensorError::Invalid(format!(
                "keep probability {keep_prob} outside (0, 1]"
            )));
        }
        let scale = 1.0 / keep_prob;
        Ok(Self {
            keep_prob,
            seed: 0,
            shape: shape.to_vec(),
            mask: keep.iter().map(|&k| if k { scale } else { 0.0 }).collect(),
        })
    }

    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.mask
    }
}
