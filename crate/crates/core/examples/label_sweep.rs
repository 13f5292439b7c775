//! Randomly approves a share of the test loans, retrains with their labels
//! and scores the rest. Total profit includes the randomly approved loans.

use loanscreen::data::{generate_population, GeneratorConfig};
use loanscreen::experiments::run_label_ratio_sweep;
use loanscreen::model::ModelConfig;
use loanscreen::train::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let split = generate_population(&GeneratorConfig {
        n_borrowers: 800,
        ..GeneratorConfig::default()
    })?;
    let base = TrainConfig::default();
    let ratios = [0.0, 0.05, 0.2];
    for r in run_label_ratio_sweep(&split, &ModelConfig::default(), &base, &ratios, &[1])? {
        println!(
            "ratio {:<4}  evaluated {:>4}  auc {:.4}  total profit {:.1}",
            r.ratio, r.report.evaluated, r.report.auc, r.total_profit
        );
    }
    Ok(())
}
