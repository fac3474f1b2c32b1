//! Metric records as JSON lines, plus CSV export for curves.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json on line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("step {step} for `{experiment}` precedes step {last}")]
    StepOrder { experiment: String, step: u64, last: u64 },
    #[error("config hash {found} on line {line} differs from {expected}")]
    HashMismatch { line: usize, expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub experiment: String,
    pub step: u64,
    pub metric: String,
    /// `None` when the metric is undefined for the data.
    pub value: Option<f64>,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
}

/// Append-only writer enforcing one config hash and non-decreasing steps
/// per experiment.
#[derive(Debug)]
pub struct MetricSink<W: Write> {
    writer: W,
    config_hash: String,
    last_step: BTreeMap<String, u64>,
    written: usize,
}

impl MetricSink<Vec<u8>> {
    pub fn memory(config_hash: &str) -> Self {
        Self::new(Vec::new(), config_hash)
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        parse_records(&self.writer[..]).expect("sink output is valid")
    }
}

impl<W: Write> MetricSink<W> {
    pub fn new(writer: W, config_hash: &str) -> Self {
        Self {
            writer,
            config_hash: config_hash.to_string(),
            last_step: BTreeMap::new(),
            written: 0,
        }
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn written(&self) -> usize {
        self.written
    }

    pub fn record(&mut self, experiment: &str, step: u64, metric: &str, value: Option<f64>) -> Result<(), MetricsError> {
        self.write(experiment, step, metric, value, None)
    }

    pub fn record_detail(
        &mut self,
        experiment: &str,
        step: u64,
        metric: &str,
        value: Option<f64>,
        detail: serde_json::Value,
    ) -> Result<(), MetricsError> {
        self.write(experiment, step, metric, value, Some(detail))
    }

    fn write(
        &mut self,
        experiment: &str,
        step: u64,
        metric: &str,
        value: Option<f64>,
        detail: Option<serde_json::Value>,
    ) -> Result<(), MetricsError> {
        if let Some(&last) = self.last_step.get(experiment) {
            if step < last {
                return Err(MetricsError::StepOrder {
                    experiment: experiment.to_string(),
                    step,
                    last,
                });
            }
        }
        self.last_step.insert(experiment.to_string(), step);
        let rec = MetricRecord {
            experiment: experiment.to_string(),
            step,
            metric: metric.to_string(),
            value: value.filter(|v| v.is_finite()),
            config_hash: self.config_hash.clone(),
            detail,
        };
        serde_json::to_writer(&mut self.writer, &rec).map_err(|e| MetricsError::Json { line: self.written + 1, source: e })?;
        self.writer.write_all(b"\n")?;
        self.written += 1;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), MetricsError> {
        self.writer.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.writer
    }
}

/// Parses JSON lines, rejecting a file that mixes config hashes.
pub fn parse_records(input: impl BufRead) -> Result<Vec<MetricRecord>, MetricsError> {
    let mut out: Vec<MetricRecord> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricRecord = serde_json::from_str(&line).map_err(|source| MetricsError::Json { line: i + 1, source })?;
        if let Some(first) = out.first() {
            if first.config_hash != rec.config_hash {
                return Err(MetricsError::HashMismatch {
                    line: i + 1,
                    expected: first.config_hash.clone(),
                    found: rec.config_hash,
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>, MetricsError> {
    let f = std::fs::File::open(path)?;
    parse_records(std::io::BufReader::new(f))
}

/// Writes records in long form: `experiment,step,metric,value`.
pub fn write_csv(records: &[MetricRecord], writer: impl Write) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["experiment", "step", "metric", "value"])?;
    for r in records {
        let value = r.value.map(|v| format!("{v:?}")).unwrap_or_default();
        w.write_record([r.experiment.as_str(), &r.step.to_string(), r.metric.as_str(), &value])?;
    }
    w.flush()?;
    Ok(())
}

/// `(step, value)` pairs of one metric, skipping undefined values.
pub fn series(records: &[MetricRecord], metric: &str) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter(|r| r.metric == metric)
        .filter_map(|r| r.value.map(|v| (r.step as f64, v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip() {
        let mut sink = MetricSink::memory("abc");
        sink.record("e", 0, "mse", Some(0.5)).unwrap();
        sink.record("e", 3, "cosine", None).unwrap();
        sink.record_detail("e", 3, "event", Some(1.0), serde_json::json!({"k": [1, 2]})).unwrap();
        let recs = sink.records();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].value, Some(0.5));
        assert_eq!(recs[1].value, None);
        assert!(recs.iter().all(|r| r.config_hash == "abc"));
        assert_eq!(series(&recs, "mse"), vec![(0.0, 0.5)]);
    }

    #[test]
    fn steps_must_not_go_back() {
        let mut sink = MetricSink::memory("h");
        sink.record("a", 5, "m", Some(1.0)).unwrap();
        sink.record("b", 1, "m", Some(1.0)).unwrap();
        assert!(matches!(sink.record("a", 4, "m", Some(1.0)), Err(MetricsError::StepOrder { .. })));
    }

    #[test]
    fn non_finite_values_become_null() {
        let mut sink = MetricSink::memory("h");
        sink.record("a", 0, "m", Some(f64::NAN)).unwrap();
        assert_eq!(sink.records()[0].value, None);
    }

    #[test]
    fn mixed_hashes_are_rejected() {
        let mut a = MetricSink::memory("one");
        a.record("e", 0, "m", Some(1.0)).unwrap();
        let mut b = MetricSink::memory("two");
        b.record("e", 1, "m", Some(1.0)).unwrap();
        let mut bytes = a.into_inner();
        bytes.extend(b.into_inner());
        assert!(matches!(parse_records(&bytes[..]), Err(MetricsError::HashMismatch { line: 2, .. })));
    }

    #[test]
    fn csv_is_long_form() {
        let mut sink = MetricSink::memory("h");
        sink.record("e", 2, "mse", Some(0.25)).unwrap();
        let mut out = Vec::new();
        write_csv(&sink.records(), &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "experiment,step,metric,value\ne,2,mse,0.25\n");
    }
}
