//! Run artifacts: content-addressed run directories, the manifest, CSV
//! tables and small SVG plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BorrowerHistory, FeatureStats, UNLABELED};
use crate::experiments::{LengthBinReport, RunRecord};
use crate::metrics::Pca;
use crate::model::Model;
use crate::train::{score_histories, EpochLosses, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_SNAPSHOT_FILE: &str = "config.toml";

/// Short hex digest of a serializable configuration.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("configuration serializes");
    hex::encode(Sha256::digest(&bytes))[..16].to_string()
}

/// `<root>/<command>-<hash>`.
pub fn run_dir(root: &Path, command: &str, hash: &str) -> PathBuf {
    root.join(format!("{command}-{hash}"))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

pub fn unix_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    /// Resolved configuration, including the dataset location.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub started_at: u64,
    pub finished_at: u64,
    /// Files written by the run, relative to the run directory.
    pub outputs: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(io::Error::other)?;
        write_atomic(&dir.join(MANIFEST_FILE), &json)
    }

    pub fn read(path: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> io::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| io::Error::other(e.to_string()))
}

pub const METRICS_HEADER: [&str; 18] = [
    "variant",
    "backbone",
    "seed",
    "ratio",
    "transductive",
    "auc",
    "profit",
    "total_profit",
    "evaluated",
    "approved",
    "living_city_dpi",
    "monthly_income_level",
    "education_level",
    "homeownership",
    "approved_ses_index",
    "alignment",
    "uniformity",
    "steps",
];

/// One row per trained model.
pub fn write_metrics_csv(path: &Path, records: &[RunRecord]) -> io::Result<()> {
    let rows = records.iter().map(|r| {
        let m = &r.report;
        vec![
            r.variant.clone(),
            r.backbone.to_string(),
            r.seed.to_string(),
            r.ratio.to_string(),
            r.transductive.to_string(),
            m.auc.to_string(),
            m.profit.to_string(),
            r.total_profit.to_string(),
            m.evaluated.to_string(),
            m.approved.to_string(),
            m.inclusion.living_city_dpi.to_string(),
            m.inclusion.monthly_income_level.to_string(),
            m.inclusion.education_level.to_string(),
            m.inclusion.homeownership.to_string(),
            m.approved_ses_index.to_string(),
            m.alignment.to_string(),
            m.uniformity.to_string(),
            r.steps.to_string(),
        ]
    });
    write_atomic(path, &csv_bytes(&METRICS_HEADER, rows)?)
}

pub const LENGTH_BINS_HEADER: [&str; 5] = ["bin", "loans", "auc_ours", "auc_vanilla", "delta"];

pub fn write_length_bins_csv(path: &Path, report: &LengthBinReport) -> io::Result<()> {
    let rows = report.bins.iter().map(|b| {
        vec![
            b.bin.clone(),
            b.loans.to_string(),
            b.auc_ours.to_string(),
            b.auc_vanilla.to_string(),
            b.delta.to_string(),
        ]
    });
    write_atomic(path, &csv_bytes(&LENGTH_BINS_HEADER, rows)?)
}

pub const LOSS_CURVES_HEADER: [&str; 8] =
    ["variant", "seed", "epoch", "total", "label", "contrastive", "domain", "w_d"];

/// Per-epoch mean losses of several runs.
pub fn write_loss_curves_csv(path: &Path, runs: &[(String, u64, Vec<EpochLosses>)]) -> io::Result<()> {
    let rows = runs.iter().flat_map(|(variant, seed, curve)| {
        curve.iter().map(move |e| {
            vec![
                variant.clone(),
                seed.to_string(),
                e.epoch.to_string(),
                e.total.to_string(),
                e.label.to_string(),
                e.contrastive.to_string(),
                e.domain.to_string(),
                e.w_d.to_string(),
            ]
        })
    });
    write_atomic(path, &csv_bytes(&LOSS_CURVES_HEADER, rows)?)
}

/// Fused feature of one loan with its tags.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub id: usize,
    pub borrower_id: u64,
    pub position: usize,
    pub label: i8,
    /// 1 for loans with a known outcome, 0 otherwise.
    pub domain: u8,
    pub features: Vec<f64>,
}

impl EmbeddingRow {
    pub fn class(&self) -> &'static str {
        match self.label {
            UNLABELED => "unapproved",
            0 => "default",
            _ => "non-default",
        }
    }
}

/// Evaluation-mode features of every loan in `histories`.
pub fn embed_histories(
    model: &Model,
    stats: &FeatureStats,
    histories: &[BorrowerHistory],
) -> Result<Vec<EmbeddingRow>> {
    let (_, features) = score_histories(model, stats, histories)?;
    let mut rows = Vec::new();
    for (h, f) in histories.iter().zip(features) {
        for (t, feat) in f.into_iter().enumerate() {
            rows.push(EmbeddingRow {
                id: rows.len(),
                borrower_id: h.borrower_id,
                position: t,
                label: h.labels[t],
                domain: u8::from(h.labels[t] != UNLABELED),
                features: feat,
            });
        }
    }
    Ok(rows)
}

pub fn write_embeddings_csv(path: &Path, rows: &[EmbeddingRow]) -> io::Result<()> {
    let dim = rows.first().map_or(0, |r| r.features.len());
    let mut header: Vec<String> = ["id", "borrower_id", "position", "label", "domain", "class"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..dim).map(|k| format!("f{k}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let body = rows.iter().map(|r| {
        let mut v = vec![
            r.id.to_string(),
            r.borrower_id.to_string(),
            r.position.to_string(),
            r.label.to_string(),
            r.domain.to_string(),
            r.class().to_string(),
        ];
        v.extend(r.features.iter().map(|x| x.to_string()));
        v
    });
    write_atomic(path, &csv_bytes(&header_refs, body)?)
}

pub const PCA_HEADER: [&str; 5] = ["id", "pc1", "pc2", "label", "domain"];

pub fn write_pca_csv(path: &Path, rows: &[EmbeddingRow], pca: &Pca) -> io::Result<()> {
    let body = rows.iter().zip(&pca.coordinates).map(|(r, c)| {
        vec![
            r.id.to_string(),
            c[0].to_string(),
            c.get(1).copied().unwrap_or(0.0).to_string(),
            r.label.to_string(),
            r.domain.to_string(),
        ]
    });
    write_atomic(path, &csv_bytes(&PCA_HEADER, body)?)
}

const SVG_SIZE: f64 = 480.0;
const SVG_MARGIN: f64 = 40.0;

fn class_color(class: &str) -> &'static str {
    match class {
        "default" => "#d62728",
        "non-default" => "#2ca02c",
        _ => "#7f7f7f",
    }
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() || hi - lo < 1e-12 {
        (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0)
    } else {
        (lo, hi)
    }
}

fn scale(v: f64, (lo, hi): (f64, f64), flip: bool) -> f64 {
    let t = (v - lo) / (hi - lo);
    let t = if flip { 1.0 - t } else { t };
    SVG_MARGIN + t * (SVG_SIZE - 2.0 * SVG_MARGIN)
}

/// Scatter of the first two principal coordinates, colored by outcome.
pub fn pca_svg(rows: &[EmbeddingRow], pca: &Pca) -> String {
    let xr = extent(pca.coordinates.iter().map(|c| c[0]));
    let yr = extent(pca.coordinates.iter().map(|c| c.get(1).copied().unwrap_or(0.0)));
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_SIZE}\" height=\"{SVG_SIZE}\">\n"
    );
    // unapproved first so labeled points stay visible on top
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by_key(|&i| rows[i].domain);
    for i in order {
        let c = &pca.coordinates[i];
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.5\" fill=\"{}\" fill-opacity=\"0.6\"/>",
            scale(c[0], xr, false),
            scale(c.get(1).copied().unwrap_or(0.0), yr, true),
            class_color(rows[i].class())
        );
    }
    for (k, class) in ["non-default", "default", "unapproved"].iter().enumerate() {
        let y = 16.0 + 14.0 * k as f64;
        let _ = writeln!(
            s,
            "<circle cx=\"12\" cy=\"{:.0}\" r=\"4\" fill=\"{}\"/><text x=\"20\" y=\"{:.0}\" font-size=\"11\">{}</text>",
            y - 4.0,
            class_color(class),
            y,
            class
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Total training loss per epoch, one polyline per run.
pub fn loss_curve_svg(runs: &[(String, u64, Vec<EpochLosses>)]) -> String {
    const PALETTE: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];
    let xr = extent(runs.iter().flat_map(|(_, _, c)| c.iter().map(|e| e.epoch as f64)));
    let yr = extent(runs.iter().flat_map(|(_, _, c)| c.iter().map(|e| e.total)));
    let mut variants: Vec<&str> = Vec::new();
    for (v, _, _) in runs {
        if !variants.contains(&v.as_str()) {
            variants.push(v);
        }
    }
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_SIZE}\" height=\"{SVG_SIZE}\">\n"
    );
    for (variant, _, curve) in runs {
        let color = PALETTE[variants.iter().position(|v| v == variant).unwrap_or(0) % PALETTE.len()];
        let pts: Vec<String> = curve
            .iter()
            .map(|e| format!("{:.2},{:.2}", scale(e.epoch as f64, xr, false), scale(e.total, yr, true)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.2\" points=\"{}\"/>",
            pts.join(" ")
        );
    }
    for (k, v) in variants.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{:.0}\" y=\"{:.0}\" font-size=\"11\" fill=\"{}\">{}</text>",
            SVG_SIZE - 90.0,
            16.0 + 14.0 * k as f64,
            PALETTE[k % PALETTE.len()],
            v
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Plain-text table of per-group means over seeds, grouped by every
/// field except the seed.
pub fn summary_table(records: &[RunRecord]) -> String {
    let mut groups: Vec<(String, Vec<&RunRecord>)> = Vec::new();
    for r in records {
        let key = format!(
            "{:<8} {:<11} {:<6} {:<5}",
            r.variant,
            r.backbone.to_string(),
            r.ratio,
            if r.transductive { "yes" } else { "no" }
        );
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let mut s = format!(
        "{:<8} {:<11} {:<6} {:<5} {:>5} {:>17} {:>22} {:>9}\n",
        "variant", "backbone", "ratio", "trans", "seeds", "auc", "total profit", "ses"
    );
    for (key, rs) in groups {
        let (auc, auc_sd) = mean_std(&rs.iter().map(|r| r.report.auc).collect::<Vec<_>>());
        let (p, p_sd) = mean_std(&rs.iter().map(|r| r.total_profit).collect::<Vec<_>>());
        let (ses, _) = mean_std(&rs.iter().map(|r| r.report.approved_ses_index).collect::<Vec<_>>());
        let _ = writeln!(
            s,
            "{key} {:>5} {:>8.4} ± {:<6.4} {:>11.0} ± {:<8.0} {:>9.4}",
            rs.len(),
            auc,
            auc_sd,
            p,
            p_sd,
            ses
        );
    }
    s
}
