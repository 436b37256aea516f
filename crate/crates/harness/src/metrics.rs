//! Per-step training metrics, one JSON object per line.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepMetrics {
    pub step: usize,
    pub correct_ratio: f64,
    /// Mean token entropy of the student along its own rollouts, in nats.
    pub mean_entropy: f64,
    pub mean_response_length: f64,
    pub mean_raw_return: f64,
    /// Over kept trajectories only.
    pub mean_calibrated_return: f64,
    /// Fraction of groups with margin below target before calibration.
    pub margin_violation_rate: f64,
    /// Same fraction after calibration.
    pub calibrated_violation_rate: f64,
    pub masked_fraction: f64,
}

pub fn round12(x: f64) -> f64 {
    let r = (x * 1e12).round() / 1e12;
    // avoid writing -0.0
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

impl StepMetrics {
    pub fn rounded(&self) -> Self {
        Self {
            step: self.step,
            correct_ratio: round12(self.correct_ratio),
            mean_entropy: round12(self.mean_entropy),
            mean_response_length: round12(self.mean_response_length),
            mean_raw_return: round12(self.mean_raw_return),
            mean_calibrated_return: round12(self.mean_calibrated_return),
            margin_violation_rate: round12(self.margin_violation_rate),
            calibrated_violation_rate: round12(self.calibrated_violation_rate),
            masked_fraction: round12(self.masked_fraction),
        }
    }

    pub fn is_valid(&self) -> bool {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        [
            self.correct_ratio,
            self.mean_entropy,
            self.mean_response_length,
            self.mean_raw_return,
            self.mean_calibrated_return,
            self.margin_violation_rate,
            self.calibrated_violation_rate,
            self.masked_fraction,
        ]
        .iter()
        .all(|x| x.is_finite())
            && unit(self.correct_ratio)
            && unit(self.margin_violation_rate)
            && unit(self.calibrated_violation_rate)
            && unit(self.masked_fraction)
            && self.mean_entropy >= 0.0
    }
}

/// Buffers whole lines and writes them every `flush_interval` records.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
    pending: String,
    pending_lines: usize,
    flush_interval: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path, flush_interval: usize) -> Result<Self> {
        let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            pending: String::new(),
            pending_lines: 0,
            flush_interval: flush_interval.max(1),
        })
    }

    pub fn append(&mut self, metrics: &StepMetrics) -> Result<()> {
        self.pending
            .push_str(&serde_json::to_string(&metrics.rounded()).expect("metrics serialize"));
        self.pending.push('\n');
        self.pending_lines += 1;
        if self.pending_lines >= self.flush_interval {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        self.file
            .write_all(self.pending.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| HarnessError::io(&self.path, e))?;
        self.pending.clear();
        self.pending_lines = 0;
        Ok(())
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

pub fn parse_metrics(text: &str) -> Result<Vec<StepMetrics>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| HarnessError::Config(format!("metrics line {}: {e}", i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_absorbs_tiny_perturbations() {
        assert_eq!(round12(0.1 + 1e-15), round12(0.1));
        assert_eq!(round12(-1e-14), 0.0);
        assert!(round12(-1e-14).is_sign_positive());
    }

    #[test]
    fn writer_flushes_complete_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&path, 2).unwrap();
        let m = StepMetrics {
            step: 0,
            correct_ratio: 0.5,
            mean_entropy: 1.0,
            mean_response_length: 3.0,
            mean_raw_return: -0.2,
            mean_calibrated_return: -0.1,
            margin_violation_rate: 0.25,
            calibrated_violation_rate: 0.0,
            masked_fraction: 0.0,
        };
        w.append(&m).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
        w.append(&StepMetrics { step: 1, ..m.clone() }).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(parse_metrics(&text).unwrap().len(), 2);
        w.append(&StepMetrics { step: 2, ..m }).unwrap();
        drop(w);
        assert_eq!(
            parse_metrics(&std::fs::read_to_string(&path).unwrap()).unwrap().len(),
            3
        );
    }
}
