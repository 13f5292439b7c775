use loanscreen::data::{
    generate_population, load_split, reveal_test_labels, save_split, BorrowerHistory, DatasetSplit, GeneratorConfig,
    TEST_FILE, TRAIN_FILE, UNLABELED,
};
use proptest::prelude::*;

fn config(seed: u64, bias: f64) -> GeneratorConfig {
    GeneratorConfig {
        seed,
        bias_strength: bias,
        ..GeneratorConfig::default()
    }
}

/// Per-loan demographic values split by whether the loan was approved.
fn by_domain(split: &DatasetSplit, field: fn(&BorrowerHistory) -> f64) -> (Vec<f64>, Vec<f64>) {
    by_domain_upto(split, field, usize::MAX)
}

fn by_domain_upto(split: &DatasetSplit, field: fn(&BorrowerHistory) -> f64, upto: usize) -> (Vec<f64>, Vec<f64>) {
    let (mut approved, mut rejected) = (Vec::new(), Vec::new());
    for h in &split.train {
        for &y in h.labels.iter().take(upto) {
            if y == UNLABELED {
                rejected.push(field(h));
            } else {
                approved.push(field(h));
            }
        }
    }
    (approved, rejected)
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
}

const FIELDS: [(&str, fn(&BorrowerHistory) -> f64); 4] = [
    ("dpi", |h| h.demographics.living_city_dpi),
    ("income", |h| h.demographics.monthly_income_level),
    ("education", |h| h.demographics.education_level),
    ("homeownership", |h| h.demographics.homeownership),
];

// Later decisions also weigh repayment of the previous loan, which carries
// any link between demographics and default, so only first applications
// isolate the screener itself.
#[test]
fn unbiased_screener_shows_no_demographic_gap() {
    for (name, field) in FIELDS {
        let (mut a, mut r) = (Vec::new(), Vec::new());
        for seed in 0..10 {
            let split = generate_population(&config(seed, 0.0)).unwrap();
            let (x, y) = by_domain_upto(&split, field, 1);
            a.extend(x);
            r.extend(y);
        }
        let ((ma, va), (mr, vr)) = (mean_var(&a), mean_var(&r));
        let se = (va / a.len() as f64 + vr / r.len() as f64).sqrt();
        assert!((ma - mr).abs() < 2.0 * se, "{name}: gap {} vs se {se}", ma - mr);
    }
}

#[test]
fn biased_screener_favors_income() {
    let split = generate_population(&GeneratorConfig::default()).unwrap();
    let (a, r) = by_domain(&split, FIELDS[1].1);
    assert!(mean_var(&a).0 > mean_var(&r).0);
}

#[test]
fn dpi_gap_grows_with_bias() {
    let mut prev = f64::NEG_INFINITY;
    for bias in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let gap = (0..5)
            .map(|seed| {
                let split = generate_population(&config(seed, bias)).unwrap();
                let (a, r) = by_domain(&split, FIELDS[0].1);
                mean_var(&a).0 - mean_var(&r).0
            })
            .sum::<f64>()
            / 5.0;
        assert!(gap > prev, "bias {bias}: gap {gap} after {prev}");
        prev = gap;
    }
}

#[test]
fn default_split_matches_platform_aggregates() {
    let split = generate_population(&GeneratorConfig::default()).unwrap();
    assert_eq!(split.train.len() + split.test.len(), 4000);
    assert!((split.train_approval_rate() - 0.4368).abs() <= 0.03);
    let all: Vec<&BorrowerHistory> = split.train.iter().chain(&split.test).collect();
    let repeat = all.iter().filter(|h| h.len() > 1).count() as f64 / all.len() as f64;
    assert!((repeat - 0.3837).abs() < 0.03, "repeat share {repeat}");
    assert!(split.test.iter().all(|h| h.labels.iter().all(|&y| y != UNLABELED)));
    let labels: Vec<i8> = split.train.iter().flat_map(|h| h.labels.clone()).collect();
    assert!(labels.contains(&UNLABELED) && labels.iter().any(|&y| y != UNLABELED));
    for h in all {
        h.validate().unwrap();
        for (t, (app, rep)) in h.applications.iter().zip(&h.repayments).enumerate() {
            assert!((3..=8).contains(&app.term_months) && app.amount > 0.0);
            assert!(rep.overdue_days <= 180.0);
            assert_eq!(h.observed[t] == 1, t > 0 && h.labels[t - 1] != UNLABELED);
            if h.observed[t] == 0 {
                assert!(rep.is_zero());
            }
        }
    }
}

#[test]
fn saved_datasets_are_byte_identical_and_round_trip() {
    let cfg = GeneratorConfig {
        n_borrowers: 300,
        ..GeneratorConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    save_split(&a, &generate_population(&cfg).unwrap()).unwrap();
    save_split(&b, &generate_population(&cfg).unwrap()).unwrap();
    for f in [TRAIN_FILE, TEST_FILE] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    assert_eq!(load_split(&a).unwrap(), generate_population(&cfg).unwrap());
}

#[test]
fn revealing_moves_the_requested_loans() {
    let split = generate_population(&GeneratorConfig {
        n_borrowers: 500,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let none = reveal_test_labels(&split, 0.0, 1).unwrap();
    assert_eq!(none.moved_loans, 0);
    assert_eq!(none.test, split.test);
    let total = split.test_loans();
    let r = reveal_test_labels(&split, 0.1, 1).unwrap();
    assert_eq!(r.moved_loans, (0.1 * total as f64).round() as usize);
    assert_eq!(r.moved_loans + r.remaining_loans(), total);
    assert_eq!(r.train.len(), split.train.len() + r.revealed.len());
    assert!(reveal_test_labels(&split, 0.6, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn generation_is_pure_and_well_formed(seed in 0u64..10_000, bias in 0.0f64..3.0, n in 20usize..200) {
        let cfg = GeneratorConfig { n_borrowers: n, seed, bias_strength: bias, ..GeneratorConfig::default() };
        let a = generate_population(&cfg).unwrap();
        prop_assert_eq!(&a, &generate_population(&cfg).unwrap());
        prop_assert_eq!(a.train.len() + a.test.len(), n);
        for h in a.train.iter().chain(&a.test) {
            prop_assert!(h.validate().is_ok());
        }
    }
}
