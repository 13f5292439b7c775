//! Generates a synthetic population, writes it to a temp directory and
//! prints how the historical screener skewed the labeled pool.

use loanscreen::data::{generate_population, load_split, save_split, GeneratorConfig, UNLABELED};

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = GeneratorConfig {
        n_borrowers: 1000,
        ..GeneratorConfig::default()
    };
    let split = generate_population(&cfg)?;
    println!(
        "train {} borrowers / {} loans, test {} borrowers / {} loans",
        split.train.len(),
        split.train_loans(),
        split.test.len(),
        split.test_loans()
    );
    println!("historical approval rate {:.4}", split.train_approval_rate());

    let (mut approved, mut rejected) = (Vec::new(), Vec::new());
    for h in &split.train {
        for &y in &h.labels {
            let dpi = h.demographics.living_city_dpi;
            if y == UNLABELED {
                rejected.push(dpi);
            } else {
                approved.push(dpi);
            }
        }
    }
    println!("mean dpi approved {:.0}, rejected {:.0}", mean(&approved), mean(&rejected));

    let dir = tempfile::tempdir()?;
    save_split(dir.path(), &split)?;
    let back = load_split(dir.path())?;
    assert_eq!(back.train, split.train);
    println!("round trip through {} ok", dir.path().display());
    Ok(())
}
