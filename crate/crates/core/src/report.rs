//! Run reports: a versioned JSON summary plus a per-epoch CSV table.
//!
//! Two artifacts with different contracts. The CSV is byte-deterministic
//! for a given configuration and seed so runs can be diffed directly; the
//! wall-clock column prints as 0.000 unless timing is explicitly enabled.
//! The JSON report always carries real timings and is therefore volatile
//! across machines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bumped whenever the JSON layout changes shape.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One row of training telemetry, collected at the end of an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: u32,
    /// Mean adapted training loss over the epoch's batches.
    pub train_loss: f64,
    /// Mean (adapted - base) loss gap; zero when adaptation is disabled.
    pub loss_gap: f64,
    /// Test accuracy in [0, 1]; `None` when evaluation was skipped.
    pub test_acc: Option<f64>,
    /// Learning rate in effect at the first batch of the epoch.
    pub lr: f64,
    /// Cumulative forward passes at the end of the epoch.
    pub fwd: u64,
    /// Cumulative backward passes at the end of the epoch.
    pub bwd: u64,
    /// Cumulative adaptation cache hits at the end of the epoch.
    pub cache_hits: u64,
    pub seconds: f64,
}

/// Summary of a completed training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    /// Flat key=value echo of the effective configuration.
    pub config: BTreeMap<String, String>,
    /// Hash of the canonical configuration rendering, for quick comparison.
    pub config_hash: String,
    pub dataset_checksum: String,
    pub epochs: Vec<EpochRow>,
    pub final_train_loss: f64,
    pub final_test_acc: f64,
    pub total_forward_evals: u64,
    pub total_backward_evals: u64,
    pub total_cache_hits: u64,
    /// Real elapsed time; varies run to run even at fixed seeds.
    pub wall_seconds: f64,
    pub model_checksum: String,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format {
                path: "report".into(),
                offset: 0,
                detail: e.to_string(),
            })
    }
}

pub const CSV_HEADER: &str = "epoch,train_loss,loss_gap,test_acc,lr,fwd,bwd,cache_hits,seconds";

/// Render epoch rows as CSV. With `timing` off every row prints 0.000
/// seconds so two runs of the same configuration produce identical bytes.
pub fn render_csv(rows: &[EpochRow], timing: bool) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let secs = if timing { r.seconds } else { 0.0 };
        let acc = match r.test_acc {
            Some(a) => format!("{a:.6}"),
            None => "NaN".to_string(),
        };
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{:.6},{},{},{},{:.3}",
            r.epoch, r.train_loss, r.loss_gap, acc, r.lr, r.fwd, r.bwd, r.cache_hits, secs
        );
    }
    out
}

/// Write `bytes` to `path` atomically: write a sibling temp file, then
/// rename over the destination so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: u32) -> EpochRow {
        EpochRow {
            epoch,
            train_loss: 1.234567891,
            loss_gap: 0.25,
            test_acc: Some(0.875),
            lr: 0.05,
            fwd: 100,
            bwd: 10,
            cache_hits: 7,
            seconds: 3.14159,
        }
    }

    #[test]
    fn csv_is_deterministic_without_timing() {
        let rows = vec![row(0), row(1)];
        let a = render_csv(&rows, false);
        let b = render_csv(&rows, false);
        assert_eq!(a, b);
        assert!(a.starts_with(CSV_HEADER));
        for line in a.lines().skip(1) {
            assert!(line.ends_with(",0.000"), "timing leaked into: {line}");
        }
    }

    #[test]
    fn csv_with_timing_carries_seconds() {
        let text = render_csv(&[row(0)], true);
        assert!(text.lines().nth(1).unwrap().ends_with(",3.142"));
    }

    #[test]
    fn csv_rounds_to_fixed_precision() {
        let text = render_csv(&[row(0)], false);
        let line = text.lines().nth(1).unwrap();
        assert_eq!(
            line,
            "0,1.234568,0.250000,0.875000,0.050000,100,10,7,0.000"
        );
    }

    #[test]
    fn skipped_evaluations_render_as_nan() {
        let mut r = row(2);
        r.test_acc = None;
        let text = render_csv(&[r.clone()], false);
        assert_eq!(text.lines().nth(1).unwrap(), "2,1.234568,0.250000,NaN,0.050000,100,10,7,0.000");
        let json = serde_json::to_string(&r).unwrap();
        let back: EpochRow = serde_json::from_str(&json).unwrap();
        assert_eq!(back.test_acc, None);
    }

    #[test]
    fn report_json_round_trips() {
        let report = RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            config: [("train.epochs".to_string(), "4".to_string())]
                .into_iter()
                .collect(),
            config_hash: "00ff".into(),
            dataset_checksum: "abcd".into(),
            epochs: vec![row(0)],
            final_train_loss: 0.5,
            final_test_acc: 0.9,
            total_forward_evals: 1000,
            total_backward_evals: 100,
            total_cache_hits: 50,
            wall_seconds: 1.5,
            model_checksum: "ef01".into(),
        };
        let text = report.to_json().unwrap();
        let back: RunReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.epochs, report.epochs);
        assert_eq!(back.config, report.config);
        assert_eq!(back.total_forward_evals, 1000);
    }

    #[test]
    fn write_atomic_replaces_and_creates_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/out.txt");
        write_atomic(&path, b"first").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"first");
        write_atomic(&path, b"second").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"second");
        assert!(!path.with_extension("txt.tmp").exists());
    }
}
