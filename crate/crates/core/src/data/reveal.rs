use rand::seq::SliceRandom;

use super::{BorrowerHistory, DataError, DatasetSplit, Result};
use crate::rng::seeded;

/// A split after a random slice of the test period was approved and its
/// labels moved into training.
#[derive(Debug, Clone, PartialEq)]
pub struct RevealedSplit {
    /// Original training borrowers followed by the revealed histories.
    pub train: Vec<BorrowerHistory>,
    /// Test borrowers that still have at least one loan under evaluation.
    pub test: Vec<BorrowerHistory>,
    /// Per test borrower, whether each loan still counts for evaluation.
    pub evaluate: Vec<Vec<bool>>,
    /// The loans that were revealed, as (prefixes of) test histories.
    pub revealed: Vec<BorrowerHistory>,
    pub moved_loans: usize,
}

impl RevealedSplit {
    pub fn remaining_loans(&self) -> usize {
        self.evaluate.iter().flatten().filter(|&&e| e).count()
    }
}

/// Reveals `round(ratio * test_loans)` test loans, chosen by shuffling test
/// borrowers with `seed`. Whole borrowers are moved while they fit; if the
/// target is still not met, the earliest loans of one more borrower make up
/// the difference and that borrower's later loans stay under evaluation.
pub fn reveal_test_labels(split: &DatasetSplit, ratio: f64, seed: u64) -> Result<RevealedSplit> {
    if !(0.0..=0.5).contains(&ratio) {
        return Err(DataError::Invalid(format!(
            "reveal ratio must lie in [0, 0.5], got {ratio}"
        )));
    }
    let total = split.test_loans();
    let target = (ratio * total as f64).round() as usize;
    let mut order: Vec<usize> = (0..split.test.len()).collect();
    order.shuffle(&mut seeded(seed));

    let mut moved = 0usize;
    let mut whole = vec![false; split.test.len()];
    for &i in &order {
        if moved == target {
            break;
        }
        let len = split.test[i].len();
        if moved + len <= target {
            whole[i] = true;
            moved += len;
        }
    }
    let mut partial: Option<(usize, usize)> = None;
    if moved < target {
        let i = order
            .iter()
            .copied()
            .find(|&i| !whole[i])
            .ok_or_else(|| DataError::Invalid("not enough test loans to reveal".into()))?;
        partial = Some((i, target - moved));
        moved = target;
    }

    let mut train = split.train.clone();
    let mut revealed = Vec::new();
    let mut test = Vec::new();
    let mut evaluate = Vec::new();
    // keep the original test order for everything that remains
    for (i, h) in split.test.iter().enumerate() {
        if whole[i] {
            revealed.push(h.clone());
            continue;
        }
        match partial {
            Some((p, r)) if p == i => {
                revealed.push(prefix(h, r));
                test.push(h.clone());
                evaluate.push((0..h.len()).map(|t| t >= r).collect());
            }
            _ => {
                test.push(h.clone());
                evaluate.push(vec![true; h.len()]);
            }
        }
    }
    // revealed histories join training in shuffled order
    let mut by_order: Vec<(usize, BorrowerHistory)> = Vec::with_capacity(revealed.len());
    for h in revealed {
        let rank = order
            .iter()
            .position(|&i| split.test[i].borrower_id == h.borrower_id)
            .unwrap_or(usize::MAX);
        by_order.push((rank, h));
    }
    by_order.sort_by_key(|(rank, _)| *rank);
    let revealed: Vec<BorrowerHistory> = by_order.into_iter().map(|(_, h)| h).collect();
    train.extend(revealed.iter().cloned());

    Ok(RevealedSplit {
        train,
        test,
        evaluate,
        revealed,
        moved_loans: moved,
    })
}

fn prefix(h: &BorrowerHistory, len: usize) -> BorrowerHistory {
    BorrowerHistory {
        borrower_id: h.borrower_id,
        demographics: h.demographics.clone(),
        applications: h.applications[..len].to_vec(),
        repayments: h.repayments[..len].to_vec(),
        labels: h.labels[..len].to_vec(),
        observed: h.observed[..len].to_vec(),
        latent_creditworthiness: h.latent_creditworthiness,
    }
}
