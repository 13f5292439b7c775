//! Four-way ablation over two seeds, summarized per variant.

use loanscreen::data::{generate_population, GeneratorConfig};
use loanscreen::experiments::run_ablation;
use loanscreen::model::ModelConfig;
use loanscreen::report::summary_table;
use loanscreen::train::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let split = generate_population(&GeneratorConfig {
        n_borrowers: 800,
        ..GeneratorConfig::default()
    })?;
    let base = TrainConfig::default();
    let runs = run_ablation(&split, &ModelConfig::default(), &base, &[1, 2])?;
    let records: Vec<_> = runs.into_iter().map(|r| r.record).collect();
    print!("{}", summary_table(&records));
    Ok(())
}
