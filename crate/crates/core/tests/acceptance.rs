//! Prints one PASS/FAIL line per acceptance criterion. Runs the full
//! five-seed grids on the default split, so expect a few minutes.
//!
//! Exits non-zero on any failure only when `ACCEPTANCE_STRICT` is set.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use loanscreen::data::{build_batch, generate_population, FeatureStats, GeneratorConfig};
use loanscreen::experiments::{mean_by_variant, run_ablation, run_label_ratio_sweep, run_transductive, RunRecord};
use loanscreen::metrics::{alignment, auc, uniformity};
use loanscreen::model::{BackboneKind, Mode, Model, ModelConfig};
use loanscreen::objectives::LossWeights;
use loanscreen::report::RunManifest;
use loanscreen::tensor::Graph;
use loanscreen::train::TrainConfig;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst_op = 0.0f64;
    for seed in 0..5 {
        for (_, e) in common::op_gradient_errors(seed) {
            worst_op = worst_op.max(e);
        }
    }
    let worst_e2e = BackboneKind::ALL
        .into_iter()
        .map(common::end_to_end_error)
        .fold(0.0f64, f64::max);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst_op <= 1e-4 && worst_e2e <= 1e-3 && secs < 60.0,
        format!("max op rel err {worst_op:.2e}, end-to-end {worst_e2e:.2e}, {secs:.1}s"),
    )
}

fn grl() -> Outcome {
    let ok = [0.0, 0.5, 1.0].into_iter().all(common::grl_contract);
    verdict(ok, "lambda in {0, 0.5, 1}")
}

fn contrastive() -> Outcome {
    let mut worst = 0.0f64;
    let mut single_zero = true;
    for m in [1, 2, 4] {
        for seed in 0..10 {
            let z = common::random_unit_rows(m, 6, seed);
            let z2 = common::random_unit_rows(m, 6, seed + 100);
            let got = common::contrastive_impl(&z, &z2, 0.1);
            worst = worst.max((got - common::contrastive_brute_force(&z, &z2, 0.1)).abs());
            single_zero &= m != 1 || got == 0.0;
        }
    }
    verdict(worst <= 1e-10 && single_zero, format!("max abs diff {worst:.2e}, M=1 exact zero: {single_zero}"))
}

fn schedule() -> Outcome {
    let w = LossWeights::default();
    let mut monotone = true;
    let mut bounded = true;
    let mut prev = 0.0;
    for p in 0..100_000u64 {
        let v = w.w_d(p);
        monotone &= v >= prev;
        bounded &= v <= 0.1;
        prev = v;
    }
    let at_1000 = w.w_d(1000);
    let ok = w.w_d(0) == 0.0
        && (at_1000 - 0.1 * 0.5f64.tanh()).abs() <= 1e-9
        && monotone
        && bounded
        && (w.w_d(u64::MAX) - 0.1).abs() < 1e-15;
    verdict(ok, format!("w_d(1000) = {at_1000:.12}, limit {}", w.w_d(u64::MAX)))
}

fn auc_oracle() -> Outcome {
    let mismatches = (0..100)
        .filter(|&seed| {
            let (s, l) = common::auc_instance(seed);
            auc(&s, &l).unwrap() != common::auc_brute_force(&s, &l)
        })
        .count();
    verdict(mismatches == 0, format!("{mismatches} of 100 instances differ"))
}

fn field_mean(records: &[RunRecord], variant: &str, f: fn(&RunRecord) -> f64) -> f64 {
    mean_by_variant(records, variant, f)
}

fn directional(records: &[RunRecord], secs: f64) -> Outcome {
    let auc_of = |v| field_mean(records, v, |r| r.report.auc);
    let profit_of = |v| field_mean(records, v, |r| r.report.profit);
    let gain = auc_of("ours") - auc_of("neither");
    let ok = gain >= 0.01 && profit_of("ours") > profit_of("neither") && secs < 900.0;
    verdict(
        ok,
        format!(
            "AUC ours {:.4} no-CL {:.4} no-DA {:.4} neither {:.4} (gain {gain:.4}); profit ours {:.0} neither {:.0}; grid {secs:.0}s",
            auc_of("ours"),
            auc_of("no-CL"),
            auc_of("no-DA"),
            auc_of("neither"),
            profit_of("ours"),
            profit_of("neither"),
        ),
    )
}

fn inclusion(records: &[RunRecord], sixth: bool) -> Outcome {
    let income = |v| field_mean(records, v, |r| r.report.inclusion.monthly_income_level);
    let dpi = |v| field_mean(records, v, |r| r.report.inclusion.living_city_dpi);
    let ok = sixth && income("ours") < income("neither") && dpi("ours") < dpi("neither");
    verdict(
        ok,
        format!(
            "approved income ours {:.4} neither {:.4}; dpi ours {:.4} neither {:.4}",
            income("ours"),
            income("neither"),
            dpi("ours"),
            dpi("neither")
        ),
    )
}

fn invariants() -> Outcome {
    let mut leaks = 0.0f64;
    let mut reach = f64::INFINITY;
    for kind in BackboneKind::ALL {
        let (l, r) = common::future_leak(kind);
        leaks = leaks.max(l.abs());
        reach = reach.min(r);
    }
    let split = generate_population(&GeneratorConfig {
        n_borrowers: 200,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let stats = FeatureStats::from_train(&split.train);
    let members: Vec<_> = split.train.iter().take(40).collect();
    let batch = build_batch(&members, 32, &stats).unwrap();
    let mut worst = 0.0f64;
    for kind in BackboneKind::ALL {
        let model = Model::new(
            ModelConfig {
                backbone: kind,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        for mode in [Mode::Eval, Mode::Train { seed: 3 }] {
            let mut g = Graph::new();
            let p = model.bind(&mut g);
            let out = model.forward(&mut g, &p, &batch, mode).unwrap();
            let f = g.value(out.features);
            for r in 0..f.rows() {
                let n = f.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                worst = worst.max((n - 1.0).abs());
            }
        }
    }
    verdict(
        leaks == 0.0 && reach > 0.0 && worst <= 1e-9,
        format!("max future gradient {leaks:e}, max |norm - 1| {worst:.2e}"),
    )
}

fn semi_supervised(transductive: &[RunRecord], sweep: &[RunRecord]) -> Outcome {
    let mean = |rs: &[RunRecord], keep: &dyn Fn(&RunRecord) -> bool| {
        let v: Vec<f64> = rs.iter().filter(|r| keep(r)).map(|r| r.report.auc).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let base = mean(transductive, &|r| !r.transductive);
    let trans = mean(transductive, &|r| r.transductive);
    let zero = mean(sweep, &|r| r.ratio == 0.0);
    let one = mean(sweep, &|r| r.ratio == 0.01);
    verdict(
        trans >= base && one > zero,
        format!("AUC base {base:.4} transductive {trans:.4}; revealed 0% {zero:.4} 1% {one:.4}"),
    )
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_loanscreen"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn run_dir(stdout: &str) -> PathBuf {
    let line = stdout.lines().find(|l| l.starts_with("run directory: ")).unwrap();
    PathBuf::from(line.trim_start_matches("run directory: "))
}

fn same_metrics(a: &Path, b: &Path) -> Result<(), String> {
    let ma = RunManifest::read(&a.join("manifest.json")).map_err(|e| e.to_string())?;
    let mb = RunManifest::read(&b.join("manifest.json")).map_err(|e| e.to_string())?;
    let bits = |m: &RunManifest| m.metrics.iter().map(|(k, v)| (k.clone(), v.to_bits())).collect::<Vec<_>>();
    if bits(&ma) != bits(&mb) {
        return Err(format!("{} metrics differ", ma.command));
    }
    for f in &ma.outputs {
        if f.ends_with(".csv") && fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok() {
            return Err(format!("{} {f} differs", ma.command));
        }
    }
    Ok(())
}

fn determinism() -> Result<usize, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (data, data2, first, second) = (p("data"), p("data2"), p("first"), p("second"));
    cli(&["generate", "--out", &data, "--n-borrowers", "200", "--seed", "11"])?;
    cli(&["generate", "--manifest", &format!("{data}/manifest.json"), "--out", &data2])?;
    same_metrics(Path::new(&data), Path::new(&data2))?;
    for f in ["train.jsonl", "test.jsonl"] {
        if fs::read(Path::new(&data).join(f)).ok() != fs::read(Path::new(&data2).join(f)).ok() {
            return Err(format!("generate {f} differs"));
        }
    }
    let fast = ["--epochs", "1", "--batch-size", "64", "--seeds", "1,2"];
    let mut checked = 1;
    let mut ckpt = String::new();
    for cmd in ["train", "ablate", "backbones", "transductive", "sweep", "evaluate", "embed"] {
        let mut args = vec![cmd, "--data", &data, "--out", &first];
        match cmd {
            "evaluate" | "embed" => args.extend(["--checkpoint", ckpt.as_str()]),
            "sweep" => args.extend(fast.iter().copied().chain(["--ratios", "0,0.05"])),
            _ => args.extend(fast),
        }
        let a = run_dir(&cli(&args)?);
        let manifest = a.join("manifest.json");
        let b = run_dir(&cli(&[cmd, "--manifest", manifest.to_str().unwrap(), "--out", &second])?);
        same_metrics(&a, &b)?;
        if cmd == "train" {
            ckpt = a.join("checkpoint.json").to_str().unwrap().to_string();
        }
        checked += 1;
    }
    Ok(checked)
}

fn diagnostics(records: &[RunRecord]) -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let a = common::random_unit_rows(40, 8, seed);
        let b = common::random_unit_rows(40, 8, seed + 50);
        worst = worst
            .max((alignment(&a, &b).unwrap() - common::alignment_oracle(&a, &b)).abs())
            .max((uniformity(&a).unwrap() - common::uniformity_oracle(&a)).abs());
    }
    let cl: Vec<f64> = records
        .iter()
        .filter(|r| r.variant == "ours" || r.variant == "no-DA")
        .map(|r| r.report.uniformity)
        .collect();
    let cl = cl.iter().sum::<f64>() / cl.len() as f64;
    let vanilla = field_mean(records, "neither", |r| r.report.uniformity);
    verdict(
        worst <= 1e-10 && cl < vanilla,
        format!("max oracle diff {worst:.2e}; uniformity with CL {cl:.4}, vanilla {vanilla:.4}"),
    )
}

fn main() {
    let mut results = Vec::new();
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("{} criterion {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push(o.pass);
    };
    report(1, "gradient correctness", gradients());
    report(2, "reversal layer", grl());
    report(3, "contrastive oracle", contrastive());
    report(4, "domain weight schedule", schedule());
    report(5, "AUC oracle", auc_oracle());

    let split = generate_population(&GeneratorConfig::default()).unwrap();
    let model = ModelConfig::default();
    let base = TrainConfig::default();
    let start = Instant::now();
    let grid: Vec<RunRecord> = run_ablation(&split, &model, &base, &SEEDS)
        .unwrap()
        .into_iter()
        .map(|r| r.record)
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let sixth = directional(&grid, secs);
    let sixth_pass = sixth.pass;
    report(6, "accuracy and profit direction", sixth);
    report(7, "inclusion direction", inclusion(&grid, sixth_pass));
    report(8, "causality and unit norm", invariants());

    let transductive = run_transductive(&split, &model, &base, &SEEDS).unwrap();
    let sweep = run_label_ratio_sweep(&split, &model, &base, &[0.0, 0.01], &SEEDS).unwrap();
    report(9, "transductive and revealed labels", semi_supervised(&transductive, &sweep));
    report(
        10,
        "manifest re-runs",
        match determinism() {
            Ok(n) => verdict(true, format!("{n} commands reproduced bit-exactly")),
            Err(e) => verdict(false, e),
        },
    );
    report(11, "alignment and uniformity", diagnostics(&grid));

    let failed = results.iter().filter(|p| !**p).count();
    println!("{} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
