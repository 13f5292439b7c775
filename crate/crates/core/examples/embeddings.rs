//! Fused features of a trained model projected onto two principal
//! components, with per-domain centroids.

use loanscreen::data::{generate_population, GeneratorConfig};
use loanscreen::experiments::run_single;
use loanscreen::metrics::pca;
use loanscreen::model::ModelConfig;
use loanscreen::report::embed_histories;
use loanscreen::train::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let split = generate_population(&GeneratorConfig {
        n_borrowers: 500,
        ..GeneratorConfig::default()
    })?;
    let cfg = TrainConfig::default();
    let out = run_single(&split, &ModelConfig::default(), &cfg)?;
    let rows = embed_histories(&out.outcome.model, &out.outcome.stats, &split.train)?;
    let points: Vec<Vec<f64>> = rows.iter().map(|r| r.features.clone()).collect();
    let p = pca(&points, 2)?;
    println!(
        "{} loans, explained variance {:.3} {:.3}",
        rows.len(),
        p.explained_variance_ratio[0],
        p.explained_variance_ratio[1]
    );
    for domain in [1u8, 0] {
        let idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].domain == domain).collect();
        let n = idx.len().max(1) as f64;
        let c1 = idx.iter().map(|&i| p.coordinates[i][0]).sum::<f64>() / n;
        let c2 = idx.iter().map(|&i| p.coordinates[i][1]).sum::<f64>() / n;
        let name = if domain == 1 { "labeled" } else { "unlabeled" };
        println!("{name:<9} {:>5} loans, centroid ({c1:+.3}, {c2:+.3})", idx.len());
    }
    Ok(())
}
