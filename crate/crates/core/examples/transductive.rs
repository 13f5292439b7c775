//! Adds the unlabeled test loans to the contrastive and domain pools and
//! compares against the inductive run.

use loanscreen::data::{generate_population, GeneratorConfig};
use loanscreen::experiments::run_transductive;
use loanscreen::model::ModelConfig;
use loanscreen::train::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let split = generate_population(&GeneratorConfig {
        n_borrowers: 800,
        ..GeneratorConfig::default()
    })?;
    let base = TrainConfig::default();
    for r in run_transductive(&split, &ModelConfig::default(), &base, &[1, 2])? {
        println!(
            "seed {}  transductive {:<5}  auc {:.4}  profit {:.1}",
            r.seed, r.transductive, r.report.auc, r.report.profit
        );
    }
    Ok(())
}
