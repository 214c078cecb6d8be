//! Newline-delimited JSON metrics.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
    pub metric: String,
    pub value: f64,
    /// Seconds since the writer opened; absent unless requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

/// Append-only metrics sink.
pub struct MetricsWriter {
    out: BufWriter<File>,
    run_id: String,
    clock: Option<Instant>,
}

impl MetricsWriter {
    /// Opens `path` for appending; `wall_time` stamps each record.
    pub fn open(path: &Path, run_id: &str, wall_time: bool) -> std::io::Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(f), run_id: run_id.to_string(), clock: wall_time.then(Instant::now) })
    }

    fn write(&mut self, step: Option<u64>, position: Option<usize>, metric: &str, value: f64) -> std::io::Result<()> {
        let rec = MetricsRecord {
            run_id: self.run_id.clone(),
            step,
            position,
            metric: metric.to_string(),
            value,
            wall_time: self.clock.map(|c| c.elapsed().as_secs_f64()),
        };
        let line = serde_json::to_string(&rec).map_err(std::io::Error::other)?;
        writeln!(self.out, "{line}")
    }

    pub fn step(&mut self, step: u64, metric: &str, value: f64) -> std::io::Result<()> {
        self.write(Some(step), None, metric, value)
    }

    pub fn position(&mut self, position: usize, metric: &str, value: f64) -> std::io::Result<()> {
        self.write(None, Some(position), metric, value)
    }

    pub fn scalar(&mut self, metric: &str, value: f64) -> std::io::Result<()> {
        self.write(None, None, metric, value)
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

pub fn read_metrics(path: &Path) -> std::io::Result<Vec<MetricsRecord>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// `(step or position, value)` pairs of one metric, in file order.
pub fn series(records: &[MetricsRecord], metric: &str) -> Vec<(u64, f64)> {
    records
        .iter()
        .filter(|r| r.metric == metric)
        .map(|r| (r.step.or(r.position.map(|p| p as u64)).unwrap_or(0), r.value))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let values = [0.1f64, 1.0 / 3.0, 2.5e-17, 12345.678901234567];
        {
            let mut w = MetricsWriter::open(&path, "r", false).unwrap();
            for (i, &v) in values.iter().enumerate() {
                w.step(i as u64, "loss", v).unwrap();
                w.position(i, "nll", -v).unwrap();
            }
        }
        // appending keeps earlier records
        MetricsWriter::open(&path, "r", false).unwrap().scalar("acc", 0.5).unwrap();
        let recs = read_metrics(&path).unwrap();
        assert_eq!(recs.len(), 9);
        let loss: Vec<f64> = series(&recs, "loss").into_iter().map(|(_, v)| v).collect();
        assert_eq!(loss, values);
        assert_eq!(series(&recs, "nll")[3], (3, -values[3]));
        assert!(recs.iter().all(|r| r.wall_time.is_none()));
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("wall_time"));
    }

    #[test]
    fn wall_time_when_requested() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        MetricsWriter::open(&path, "r", true).unwrap().step(0, "loss", 1.0).unwrap();
        assert!(read_metrics(&path).unwrap()[0].wall_time.is_some());
    }
}
