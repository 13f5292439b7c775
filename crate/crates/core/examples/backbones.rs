//! The same objective on every sequence encoder.

use loanscreen::data::{generate_population, GeneratorConfig};
use loanscreen::experiments::run_single;
use loanscreen::model::{BackboneKind, ModelConfig};
use loanscreen::train::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let split = generate_population(&GeneratorConfig {
        n_borrowers: 600,
        ..GeneratorConfig::default()
    })?;
    let cfg = TrainConfig::default();
    for backbone in BackboneKind::ALL {
        let model = ModelConfig {
            backbone,
            ..ModelConfig::default()
        };
        let r = run_single(&split, &model, &cfg)?.record;
        println!("{:<12} auc {:.4}  profit {:.1}", backbone.to_string(), r.report.auc, r.report.profit);
    }
    Ok(())
}
