//! Line-delimited metrics and the run manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::EpochRecord;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct Line<'a> {
    schema_version: u32,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

/// Serializes one epoch as a single JSON line (no trailing newline).
pub fn record_line(r: &EpochRecord) -> Result<String> {
    serde_json::to_string(&Line {
        schema_version: SCHEMA_VERSION,
        record: r,
    })
    .map_err(|e| Error::Io(e.to_string()))
}

/// Appends epoch records to `metrics.jsonl` and wall-clock times to a
/// separate timings file, keeping the metrics stream reproducible.
pub struct MetricsSink {
    metrics: BufWriter<File>,
    timings: Option<BufWriter<File>>,
}

impl MetricsSink {
    pub fn create(metrics: &Path, timings: Option<&Path>) -> Result<Self> {
        let open = |p: &Path| File::create(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())));
        Ok(Self {
            metrics: BufWriter::new(open(metrics)?),
            timings: timings.map(open).transpose()?.map(BufWriter::new),
        })
    }

    pub fn write(&mut self, r: &EpochRecord) -> Result<()> {
        writeln!(self.metrics, "{}", record_line(r)?)?;
        self.metrics.flush()?;
        if let Some(t) = &mut self.timings {
            writeln!(t, "{{\"epoch\":{},\"wall_time_s\":{}}}", r.epoch, r.wall_time)?;
            t.flush()?;
        }
        Ok(())
    }
}

/// Reads a metrics file back as JSON values.
pub fn read_metrics(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                row: i + 1,
                col: e.column(),
                msg: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config: String,
    pub started_unix_s: u64,
    pub dataset_fingerprint: String,
    pub dataset_rows: usize,
    pub outputs: Vec<String>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::variational::ElboBreakdown;

    fn rec(epoch: usize) -> EpochRecord {
        EpochRecord {
            epoch,
            train_metric: 0.5,
            train_nll: 0.7,
            val_metric: 0.25,
            val_nll: 0.1,
            test_metric: 1.0,
            ks: vec![3, 4],
            lambdas: vec![1.0, 2.5],
            param_count: 44,
            elbo: ElboBreakdown::default(),
            resized: false,
            grad_norm: 0.3,
            wall_time: 1.5,
        }
    }

    #[test]
    fn line_has_schema_and_no_wall_time() {
        let l = record_line(&rec(3)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&l).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["epoch"], 3);
        assert!(v.get("wall_time").is_none());
        assert!(!l.contains('\n'));
    }

    #[test]
    fn sink_writes_one_line_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let (m, t) = (dir.path().join("m.jsonl"), dir.path().join("t.jsonl"));
        let mut s = MetricsSink::create(&m, Some(&t)).unwrap();
        for e in 0..4 {
            s.write(&rec(e)).unwrap();
        }
        drop(s);
        assert_eq!(read_metrics(&m).unwrap().len(), 4);
        assert_eq!(std::fs::read_to_string(&t).unwrap().lines().count(), 4);
    }
}
