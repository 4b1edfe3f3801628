//! Append-only metrics stream: one self-delimiting JSON record per line.
//! The stream is replayable; the per-layer risk chain and best-epoch
//! selection can be reconstructed from it exactly.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::ProbeReport;
use crate::prune::PruneRecord;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub run_id: String,
    pub layer: usize,
    /// 0 is the evaluation of the initial parameters; training epochs are 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerSummaryRecord {
    pub run_id: String,
    pub layer: usize,
    pub best_epoch: usize,
    pub train_risk: f64,
    pub train_acc: f64,
    pub test_top1: f64,
    pub test_top5: f64,
    /// Whether this layer was warm-started from the identity candidate.
    pub identity_candidate: bool,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    Epoch(EpochRecord),
    LayerSummary(LayerSummaryRecord),
    Probe(ProbeReport),
    Prune(PruneRecord),
}

/// Buffered append-only writer enforcing monotone `(layer, epoch)` order
/// for epoch records.
pub struct MetricsWriter {
    out: Box<dyn Write + Send>,
    last_epoch_key: Option<(usize, usize)>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path)?;
        Ok(Self {
            out: Box::new(std::io::BufWriter::new(file)),
            last_epoch_key: None,
        })
    }

    /// Open for appending, creating the file if needed.
    pub fn append_to(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(Self {
            out: Box::new(std::io::BufWriter::new(file)),
            last_epoch_key: None,
        })
    }

    /// Writer that drops every record (for library callers without a run dir).
    pub fn sink() -> Self {
        Self {
            out: Box::new(std::io::sink()),
            last_epoch_key: None,
        }
    }

    pub fn append(&mut self, record: &Record) -> Result<()> {
        if let Record::Epoch(e) = record {
            let key = (e.layer, e.epoch);
            if let Some(last) = self.last_epoch_key {
                assert!(
                    key > last,
                    "metrics stream must be (layer, epoch)-monotone: {key:?} after {last:?}"
                );
            }
            self.last_epoch_key = Some(key);
        }
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Io(std::io::Error::new(std::io::ErrorKind::Other, e)))?;
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Parse a metrics file back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("metrics line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

/// Reconstruct, per layer, the minimum train loss over the recorded
/// trajectory (for replay-based verification of best-along-trajectory).
pub fn min_trajectory_risk(records: &[Record], layer: usize) -> Option<f64> {
    records
        .iter()
        .filter_map(|r| match r {
            Record::Epoch(e) if e.layer == layer => Some(e.train_loss),
            _ => None,
        })
        .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.min(v))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn epoch(layer: usize, epoch: usize, loss: f64) -> Record {
        Record::Epoch(EpochRecord {
            run_id: "t".into(),
            layer,
            epoch,
            train_loss: loss,
            train_acc: 0.0,
            test_acc: 0.0,
            lr: 0.1,
            wall_time_s: 0.0,
        })
    }

    #[test]
    fn roundtrip_and_min_risk_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.append(&epoch(0, 0, 2.3)).unwrap();
        w.append(&epoch(0, 1, 1.9)).unwrap();
        w.append(&epoch(0, 2, 2.0)).unwrap();
        w.append(&epoch(1, 0, 1.9)).unwrap();
        w.flush().unwrap();
        let records = read_metrics(&path).unwrap();
        assert_eq!(records.len(), 4);
        assert_eq!(min_trajectory_risk(&records, 0), Some(1.9));
        assert_eq!(min_trajectory_risk(&records, 1), Some(1.9));
        assert_eq!(min_trajectory_risk(&records, 2), None);
    }

    #[test]
    #[should_panic(expected = "monotone")]
    fn non_monotone_epoch_order_is_rejected() {
        let mut w = MetricsWriter::sink();
        w.append(&epoch(1, 0, 1.0)).unwrap();
        w.append(&epoch(0, 0, 1.0)).unwrap();
    }
}
