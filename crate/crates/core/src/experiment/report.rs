//! Report rows and their CSV / JSON serialization.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One aggregated result: a scenario point evaluated by one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub snr_db: f64,
    pub n_users: usize,
    pub granularity: usize,
    pub error_var: f64,
    /// Per-user stream counts joined by `-`, or `mixed` for random patterns.
    pub streams: String,
    pub active_users: usize,
    /// Pruning round (0 = unpruned); empty outside the pruning scenario.
    pub pruned: Option<usize>,
    pub method: String,
    pub mean_wsr: f64,
    pub stderr: f64,
    /// `mean_wsr` over the mean WSR of WMMSE designed on the true channels.
    pub ratio: Option<f64>,
    /// Mean (median in the timing scenario) wall time per realization.
    pub time_ms: Option<f64>,
    pub flops: Option<u64>,
}

pub const CSV_HEADER: [&str; 14] = [
    "scenario",
    "snr_db",
    "n_users",
    "granularity",
    "error_var",
    "streams",
    "active_users",
    "pruned",
    "method",
    "mean_wsr",
    "stderr",
    "ratio",
    "time_ms",
    "flops",
];

/// Writes rows as CSV. An empty slice yields the header line only.
pub fn write_csv<W: Write>(w: W, rows: &[ReportRow]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<ReportRow>> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize().map(|row| Ok(row?)).collect()
}

/// Writes `<stem>.csv` and the `<stem>.json` sidecar holding `meta`.
pub fn write_report(path: &Path, rows: &[ReportRow], meta: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let csv_path = path.with_extension("csv");
    write_csv(std::fs::File::create(&csv_path)?, rows)?;
    let mut sidecar = meta.clone();
    sidecar["rows"] = serde_json::to_value(rows)?;
    std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}
