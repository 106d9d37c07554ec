//! Per-round / per-epoch metrics in CSV or JSON.
//!
//! Both formats carry the same five fields in the same order, with floats
//! printed to six decimal places.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const CSV_HEADER: [&str; 5] = ["experiment", "round", "accuracy", "loss", "wall_ms"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment: String,
    /// Federated runs: the round that produced the model (from 0).
    /// Baselines: epochs completed, with 0 for the untrained model.
    pub round: u32,
    /// Fraction in [0, 1].
    pub accuracy: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    /// `.json` selects JSON; anything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no metrics records to write")]
    Empty,
    #[error("writing {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub fn to_csv(records: &[MetricsRecord]) -> Result<String, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(CSV_HEADER)?;
    for r in records {
        writer.write_record([
            r.experiment.clone(),
            r.round.to_string(),
            format!("{:.6}", r.accuracy),
            format!("{:.6}", r.loss),
            r.wall_ms.to_string(),
        ])?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn to_json(records: &[MetricsRecord]) -> Result<String, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut out = String::from("[\n");
    for (i, r) in records.iter().enumerate() {
        let experiment = serde_json::to_string(&r.experiment).expect("strings serialize");
        let _ = write!(
            out,
            "  {{\"experiment\": {experiment}, \"round\": {}, \"accuracy\": {:.6}, \"loss\": {:.6}, \"wall_ms\": {}}}",
            r.round, r.accuracy, r.loss, r.wall_ms
        );
        out.push_str(if i + 1 < records.len() { ",\n" } else { "\n" });
    }
    out.push_str("]\n");
    Ok(out)
}

pub fn emit_metrics(
    records: &[MetricsRecord],
    path: &Path,
    format: Format,
) -> Result<(), MetricsError> {
    let text = match format {
        Format::Csv => to_csv(records)?,
        Format::Json => to_json(records)?,
    };
    std::fs::write(path, text).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRecord>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(n: u32) -> Vec<MetricsRecord> {
        (0..n)
            .map(|i| MetricsRecord {
                experiment: "federated-c20-e5".into(),
                round: i,
                accuracy: 0.1 + f64::from(i) * 0.0805,
                loss: 2.3 / f64::from(i + 1),
                wall_ms: 1000 + u64::from(i),
            })
            .collect()
    }

    #[test]
    fn csv_shape() {
        let text = to_csv(&records(10)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 11);
        assert_eq!(lines[0], "experiment,round,accuracy,loss,wall_ms");
        assert_eq!(lines[1], "federated-c20-e5,0,0.100000,2.300000,1000");
    }

    #[test]
    fn six_decimals() {
        let mut r = records(1);
        r[0].accuracy = 0.9055;
        assert!(to_csv(&r).unwrap().contains(",0.905500,"));
        assert!(to_json(&r).unwrap().contains("\"accuracy\": 0.905500,"));
    }

    #[test]
    fn round_trips_within_print_precision() {
        let original = records(10);
        let from_csv = parse_csv(&to_csv(&original).unwrap()).unwrap();
        let from_json: Vec<MetricsRecord> =
            serde_json::from_str(&to_json(&original).unwrap()).unwrap();
        for parsed in [from_csv, from_json] {
            assert_eq!(parsed.len(), original.len());
            for (a, b) in parsed.iter().zip(&original) {
                assert_eq!(
                    (&a.experiment, a.round, a.wall_ms),
                    (&b.experiment, b.round, b.wall_ms)
                );
                assert!((a.accuracy - b.accuracy).abs() <= 1e-6);
                assert!((a.loss - b.loss).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn json_key_order() {
        let text = to_json(&records(1)).unwrap();
        let keys: Vec<usize> = CSV_HEADER
            .iter()
            .map(|k| text.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn empty_and_unwritable() {
        assert!(matches!(to_csv(&[]), Err(MetricsError::Empty)));
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("missing").join("m.csv");
        assert!(matches!(
            emit_metrics(&records(2), &bad, Format::Csv),
            Err(MetricsError::Io { .. })
        ));
        let good = dir.path().join("m.json");
        emit_metrics(&records(2), &good, Format::from_path(&good)).unwrap();
        assert!(std::fs::read_to_string(good).unwrap().starts_with('['));
    }
}
