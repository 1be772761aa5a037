//! Result rows, the results CSV and seed aggregation.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Scores;

pub const CSV_HEADER: &str = "experiment,config_hash,split,mode,epoch,oa,iou,f1,prec,rec,params,macs,wall_s";

/// One evaluation of one trained model. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    /// `<suite>/<cell>/seed<k>`.
    pub experiment: String,
    pub config_hash: String,
    pub split: String,
    pub mode: String,
    pub epoch: usize,
    pub oa: f64,
    pub iou: f64,
    pub f1: f64,
    pub prec: f64,
    pub rec: f64,
    pub params: u64,
    pub macs: u64,
    pub wall_s: f64,
}

impl ResultRow {
    pub fn scores(&self) -> Scores {
        Scores {
            oa: self.oa,
            iou: self.iou,
            f1: self.f1,
            prec: self.prec,
            rec: self.rec,
        }
    }

    pub fn set_scores(&mut self, s: Scores) {
        self.oa = s.oa;
        self.iou = s.iou;
        self.f1 = s.f1;
        self.prec = s.prec;
        self.rec = s.rec;
    }

    /// Experiment id without its trailing `/seed<k>` component.
    pub fn cell(&self) -> &str {
        match self.experiment.rsplit_once('/') {
            Some((head, tail)) if tail.starts_with("seed") => head,
            _ => &self.experiment,
        }
    }
}

pub fn experiment_id(suite: &str, cell: &str, seed: u64) -> String {
    format!("{suite}/{cell}/seed{seed}")
}

fn encode(rows: &[ResultRow], header: bool) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(format!("csv encode: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv encode: {e}")))
}

pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut bytes = encode(rows, false)?;
    bytes.splice(0..0, format!("{CSV_HEADER}\n").into_bytes());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Appends rows to a results CSV in one write, creating it with a header if needed.
pub fn append_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut bytes = encode(rows, false)?;
    if fresh {
        bytes.splice(0..0, format!("{CSV_HEADER}\n").into_bytes());
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let format_err = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if text.lines().next() != Some(CSV_HEADER) {
        return Err(format_err("missing or unexpected header".into()));
    }
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(|e| format_err(e.to_string())))
        .collect()
}

/// Serializes appends from concurrent suite cells.
#[derive(Debug)]
pub struct ResultsWriter {
    path: Option<std::path::PathBuf>,
    rows: Mutex<Vec<ResultRow>>,
}

impl ResultsWriter {
    /// Keeps rows in memory and, with a path, also appends them to that CSV.
    pub fn new(path: Option<&Path>) -> Self {
        Self {
            path: path.map(Path::to_path_buf),
            rows: Mutex::new(Vec::new()),
        }
    }

    pub fn push(&self, rows: &[ResultRow]) -> Result<()> {
        let mut held = self.rows.lock().expect("results lock");
        if let Some(p) = &self.path {
            append_csv(p, rows)?;
        }
        held.extend_from_slice(rows);
        Ok(())
    }

    pub fn rows(&self) -> Vec<ResultRow> {
        self.rows.lock().expect("results lock").clone()
    }
}

/// Seed-averaged scores of one (cell, split, mode) group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub cell: String,
    pub split: String,
    pub mode: String,
    pub runs: usize,
    pub mean: Scores,
    pub iou: Vec<f64>,
    pub params: u64,
    pub macs: u64,
}

/// Averages rows over seeds. Every row's hash must equal the hash recorded
/// for its experiment in `expected`; anything else is rejected.
pub fn aggregate(rows: &[ResultRow], expected: &BTreeMap<String, String>) -> Result<Vec<CellSummary>> {
    let mut groups: BTreeMap<(String, String, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        match expected.get(&r.experiment) {
            Some(h) if *h == r.config_hash => {}
            Some(h) => {
                return Err(Error::Config(format!(
                    "row for {} carries config hash {}, expected {h}",
                    r.experiment, r.config_hash
                )))
            }
            None => {
                return Err(Error::Config(format!(
                    "row for {} has no recorded config hash",
                    r.experiment
                )))
            }
        }
        groups
            .entry((r.cell().to_string(), r.split.clone(), r.mode.clone()))
            .or_default()
            .push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((cell, split, mode), rs)| {
            let n = rs.len() as f64;
            let avg = |f: fn(&ResultRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            CellSummary {
                cell,
                split,
                mode,
                runs: rs.len(),
                mean: Scores {
                    oa: avg(|r| r.oa),
                    iou: avg(|r| r.iou),
                    f1: avg(|r| r.f1),
                    prec: avg(|r| r.prec),
                    rec: avg(|r| r.rec),
                },
                iou: rs.iter().map(|r| r.iou).collect(),
                params: rs[0].params,
                macs: rs[0].macs,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(exp: &str, hash: &str, iou: f64) -> ResultRow {
        ResultRow {
            experiment: exp.into(),
            config_hash: hash.into(),
            split: "test".into(),
            mode: "siamese".into(),
            epoch: 3,
            oa: 0.9,
            iou,
            f1: 0.5,
            prec: 0.25,
            rec: 1.0 / 3.0,
            params: 10,
            macs: 20,
            wall_s: 1.5,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rows = vec![row("s/a/seed0", "abc", 0.1 + 0.2), row("s/a/seed1", "abd", 1e-17)];
        write_csv(&p, &rows).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().next(), Some(CSV_HEADER));
        assert_eq!(read_csv(&p).unwrap(), rows);
    }

    #[test]
    fn append_writes_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        append_csv(&p, &[row("s/a/seed0", "h", 0.5)]).unwrap();
        append_csv(&p, &[row("s/a/seed1", "h", 0.7)]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.matches("experiment,").count(), 1);
        assert_eq!(read_csv(&p).unwrap().len(), 2);
    }

    #[test]
    fn aggregation_averages_seeds_and_checks_hashes() {
        let rows = vec![row("s/a/seed0", "h0", 0.5), row("s/a/seed1", "h1", 0.7)];
        let mut expected = BTreeMap::new();
        expected.insert("s/a/seed0".to_string(), "h0".to_string());
        expected.insert("s/a/seed1".to_string(), "h1".to_string());
        let agg = aggregate(&rows, &expected).unwrap();
        assert_eq!(agg.len(), 1);
        assert_eq!(agg[0].cell, "s/a");
        assert_eq!(agg[0].runs, 2);
        assert!((agg[0].mean.iou - 0.6).abs() < 1e-15);

        expected.insert("s/a/seed1".to_string(), "other".to_string());
        assert!(aggregate(&rows, &expected).is_err());
        expected.remove("s/a/seed1");
        assert!(aggregate(&rows, &expected).is_err());
    }

    #[test]
    fn bad_header_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_csv(&p), Err(Error::Format { .. })));
    }
}
