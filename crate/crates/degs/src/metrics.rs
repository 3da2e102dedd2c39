//! Per-iteration metrics CSV.

use std::path::Path;

use degs_core::train::IterationRecord;

use crate::error::{DegsError, Result};
use crate::fsutil::write_atomic;

pub const HEADER: [&str; 9] = ["iteration", "total_loss", "l1", "dssim", "jaw", "psnr", "ssim", "splat_count", "wall_ms"];

/// Collects rows in memory and writes the file atomically at the end.
pub struct MetricsLog {
    writer: csv::Writer<Vec<u8>>,
}

fn opt(v: Option<f64>) -> String {
    // `Display` for f64 is the shortest exact form and prints `inf` for the
    // identical-image PSNR sentinel.
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsLog {
    pub fn new() -> Self {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(HEADER).expect("in-memory write");
        MetricsLog { writer }
    }

    /// `wall_ms` is milliseconds since the stage started, or `None` to write
    /// 0 for byte-reproducible logs.
    pub fn push(&mut self, r: &IterationRecord, wall_ms: Option<u128>) {
        let l = &r.loss;
        self.writer
            .write_record([
                r.iteration.to_string(),
                l.total.to_string(),
                l.l1.to_string(),
                l.dssim.to_string(),
                l.jaw.to_string(),
                opt(r.psnr),
                opt(r.ssim),
                r.splat_count.to_string(),
                wall_ms.unwrap_or(0).to_string(),
            ])
            .expect("in-memory write");
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.writer.into_inner().map_err(|e| e.into_error()).expect("in-memory flush")
    }

    pub fn save(self, path: &Path) -> Result<()> {
        write_atomic(path, &self.into_bytes())
    }
}

impl Default for MetricsLog {
    fn default() -> Self {
        Self::new()
    }
}

/// Parsed row, used by tests and the determinism checks.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub total_loss: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub splat_count: usize,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| DegsError::format(path, e.to_string()))?;
    let bad = |e: String| DegsError::format(path, e);
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| rec.get(i).unwrap_or("").to_string();
        let float = |i: usize| -> Result<Option<f64>> {
            let s = num(i);
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| bad(format!("column {}: {e}", HEADER[i])))
            }
        };
        rows.push(MetricsRow {
            iteration: num(0).parse().map_err(|e| bad(format!("iteration: {e}")))?,
            total_loss: float(1)?.ok_or_else(|| bad("empty total_loss".into()))?,
            psnr: float(5)?,
            ssim: float(6)?,
            splat_count: num(7).parse().map_err(|e| bad(format!("splat_count: {e}")))?,
        });
    }
    Ok(rows)
}
