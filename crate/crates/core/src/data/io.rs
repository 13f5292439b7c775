//! On-disk layout of a dataset directory:
//!
//! ```text
//! <dir>/train.jsonl     one BorrowerHistory JSON object per line
//! <dir>/test.jsonl
//! <dir>/generator.toml  the GeneratorConfig used to draw the split
//! ```
//!
//! Floats are written with shortest round-trip formatting, so a load after a
//! save reproduces every value bit for bit.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{BorrowerHistory, DataError, DatasetSplit, GeneratorConfig, Result};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const CONFIG_FILE: &str = "generator.toml";

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| DataError::Invalid(e.to_string()))?;
        out.write_all(line.as_bytes()).map_err(|e| io_err(path, e))?;
        out.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn save_split(dir: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_jsonl(&dir.join(TRAIN_FILE), &split.train)?;
    write_jsonl(&dir.join(TEST_FILE), &split.test)?;
    let cfg_path = dir.join(CONFIG_FILE);
    let text = toml::to_string(&split.config).map_err(|e| DataError::Invalid(e.to_string()))?;
    fs::write(&cfg_path, text).map_err(|e| io_err(&cfg_path, e))
}

/// Loads a split and re-checks the sequence invariants of every borrower.
pub fn load_split(dir: &Path) -> Result<DatasetSplit> {
    let cfg_path = dir.join(CONFIG_FILE);
    let config = read_generator_config(&cfg_path)?;
    let train: Vec<BorrowerHistory> = read_jsonl(&dir.join(TRAIN_FILE))?;
    let test: Vec<BorrowerHistory> = read_jsonl(&dir.join(TEST_FILE))?;
    for (name, rows) in [(TRAIN_FILE, &train), (TEST_FILE, &test)] {
        for (i, h) in rows.iter().enumerate() {
            h.validate().map_err(|message| DataError::Parse {
                path: dir.join(name).display().to_string(),
                line: i + 1,
                message,
            })?;
        }
    }
    Ok(DatasetSplit {
        train,
        test,
        config,
    })
}

pub fn read_generator_config(path: &Path) -> Result<GeneratorConfig> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let cfg: GeneratorConfig = toml::from_str(&text).map_err(|e| DataError::Parse {
        path: path.display().to_string(),
        line: e
            .span()
            .map(|s| text[..s.start].lines().count().max(1))
            .unwrap_or(0),
        message: e.message().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_population;

    fn small_split() -> DatasetSplit {
        let cfg = GeneratorConfig {
            n_borrowers: 100,
            ..GeneratorConfig::default()
        };
        generate_population(&cfg).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let split = small_split();
        let dir = tempfile::tempdir().unwrap();
        save_split(dir.path(), &split).unwrap();
        let back = load_split(dir.path()).unwrap();
        assert_eq!(back, split);
        for (a, b) in split.train.iter().zip(&back.train) {
            for (x, y) in a.applications.iter().zip(&b.applications) {
                assert_eq!(x.amount.to_bits(), y.amount.to_bits());
            }
            assert_eq!(
                a.demographics.living_city_dpi.to_bits(),
                b.demographics.living_city_dpi.to_bits()
            );
        }
    }

    #[test]
    fn missing_field_names_field_and_line() {
        let split = small_split();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        write_jsonl(&path, &split.train[..2]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut v: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
        v.as_object_mut().unwrap().remove("labels");
        lines[1] = v.to_string();
        fs::write(&path, lines.join("\n")).unwrap();
        let err = read_jsonl::<BorrowerHistory>(&path).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, DataError::Parse { line: 2, .. }), "{msg}");
        assert!(msg.contains("labels"), "{msg}");
    }

    #[test]
    fn malformed_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"a\":1}\nnot json\n").unwrap();
        let err = read_jsonl::<serde_json::Value>(&path).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }));
    }
}
