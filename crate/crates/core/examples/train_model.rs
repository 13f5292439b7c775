//! Trains the full model once on a small population and prints the
//! evaluation report.

use loanscreen::data::{generate_population, GeneratorConfig};
use loanscreen::experiments::run_single;
use loanscreen::model::ModelConfig;
use loanscreen::train::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let split = generate_population(&GeneratorConfig {
        n_borrowers: 800,
        ..GeneratorConfig::default()
    })?;
    let cfg = TrainConfig::default();
    let out = run_single(&split, &ModelConfig::default(), &cfg)?;
    for e in &out.outcome.curves {
        println!(
            "epoch {:>2}  label {:.4}  contrastive {:.4}  domain {:.4}",
            e.epoch, e.label, e.contrastive, e.domain
        );
    }
    let r = &out.record.report;
    println!("auc {:.4}  profit {:.1}  approved {}/{}", r.auc, r.profit, r.approved, r.evaluated);
    println!("alignment {:.4}  uniformity {:.4}", r.alignment, r.uniformity);
    Ok(())
}
