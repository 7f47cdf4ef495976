//! The transformation-loss tables: LCP (ideal) against MIMO WMMSE on case 2,
//! over SNR at K = 10 and over the user count at 0 dB, with the threshold
//! checks applied to their ratios.

use super::{ExperimentSpec, Method, ReportRow, Scenario};
use crate::model::SystemConfig;

pub const SNR_GRID: [f64; 5] = [-5.0, 0.0, 5.0, 10.0, 15.0];
pub const USER_GRID: [usize; 5] = [8, 10, 12, 14, 16];
/// Reference WMMSE sum rate at 0 dB, K = 10, checked loosely.
pub const REFERENCE_WSR: f64 = 44.325;

/// The SNR table and the user table.
pub fn table3_specs(n_realizations: usize, seed: u64) -> [ExperimentSpec; 2] {
    let methods = vec![Method::Wmmse, Method::LcpIdeal];
    let mut snr = ExperimentSpec::new("table3_snr", Scenario::Table3Snr, SystemConfig::case2(10), n_realizations, seed, methods.clone());
    snr.snr_db = SNR_GRID.to_vec();
    let mut users = ExperimentSpec::new("table3_users", Scenario::Table3Users, SystemConfig::case2(10), n_realizations, seed, methods);
    users.users = USER_GRID.to_vec();
    [snr, users]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn lcp_row<'a>(rows: &'a [ReportRow], scenario: &str, f: impl Fn(&ReportRow) -> bool) -> Option<&'a ReportRow> {
    rows.iter().find(|r| r.scenario == scenario && r.method == "lcp_ideal" && f(r))
}

fn in_band(r: Option<f64>) -> bool {
    r.is_some_and(|r| (0.965..=1.0).contains(&r))
}

fn fmt(r: Option<f64>) -> String {
    r.map_or("missing".into(), |r| format!("{r:.4}"))
}

/// Ratio band at 0 dB, the SNR trend and the user band. Rows for missing
/// grid points fail their check.
pub fn check_table3(rows: &[ReportRow]) -> Vec<Check> {
    let at_snr = |s: f64| lcp_row(rows, "table3_snr", |r| (r.snr_db - s).abs() < 1e-9);
    let r0 = at_snr(0.0).and_then(|r| r.ratio);
    let wsr0 = rows
        .iter()
        .find(|r| r.scenario == "table3_snr" && r.method == "wmmse" && r.snr_db.abs() < 1e-9)
        .map(|r| r.mean_wsr);
    let (lo, hi) = (at_snr(-5.0).and_then(|r| r.ratio), at_snr(10.0).and_then(|r| r.ratio));
    let users: Vec<(usize, Option<f64>)> =
        [8, 12, 16].iter().map(|&k| (k, lcp_row(rows, "table3_users", |r| r.n_users == k).and_then(|r| r.ratio))).collect();
    vec![
        Check {
            name: "ratio_snr0",
            passed: in_band(r0),
            detail: format!(
                "ratio {} in [0.965, 1.0]; wmmse wsr {} (soft: {:.3} +-10%, {})",
                fmt(r0),
                fmt(wsr0),
                REFERENCE_WSR,
                if wsr0.is_some_and(|w| (w / REFERENCE_WSR - 1.0).abs() <= 0.1) { "within" } else { "outside" }
            ),
        },
        Check {
            name: "snr_trend",
            passed: matches!((lo, hi), (Some(lo), Some(hi)) if lo >= hi - 0.005 && hi >= 0.955),
            detail: format!("ratio(-5 dB) {} >= ratio(+10 dB) {} - 0.005, ratio(+10 dB) >= 0.955", fmt(lo), fmt(hi)),
        },
        Check {
            name: "user_trend",
            passed: users.iter().all(|&(_, r)| in_band(r)),
            detail: users.iter().map(|(k, r)| format!("K={k}: {}", fmt(*r))).collect::<Vec<_>>().join(", "),
        },
    ]
}
