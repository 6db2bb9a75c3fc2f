//! CTMC-versus-limit convergence tables.

use std::fmt;

use serde::Serialize;

use crate::config::Probe;
use crate::ensemble::EnsembleStats;
use crate::stats::{ks_sorted, mean_var};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub time: f64,
    pub var: String,
    pub size: f64,
    pub ks: f64,
    /// CTMC mean minus limit mean.
    pub mean_diff: f64,
    pub n_ctmc: usize,
    pub n_limit: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeVerdict {
    pub probe: Probe,
    /// Largest tolerated KS increase between consecutive sizes.
    pub allowance: f64,
    pub monotone: bool,
    /// KS distance at the largest size.
    pub final_ks: f64,
    pub ks_max: f64,
    pub pass: bool,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub rows: Vec<ReportRow>,
    pub verdicts: Vec<ProbeVerdict>,
}

impl ConvergenceReport {
    pub fn passed(&self) -> bool {
        !self.verdicts.is_empty() && self.verdicts.iter().all(|v| v.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }
}

impl fmt::Display for ConvergenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.verdicts {
            writeln!(
                f,
                "{} {}: final KS {:.4} (max {}), allowance {:.4}, {}",
                if v.pass { "PASS" } else { "FAIL" },
                v.probe.label(),
                v.final_ks,
                v.ks_max,
                v.allowance,
                v.reason
            )?;
        }
        write!(f, "verdict: {}", if self.passed() { "pass" } else { "fail" })
    }
}

/// Compares the CTMC ensembles (any order) with the limit ensemble at every
/// probe. A probe passes when its KS distance is non-increasing in `N` up
/// to `2/sqrt(reps)` and ends at most `ks_max` at the largest size.
pub fn convergence_report(ctmc: &[EnsembleStats], limit: &EnsembleStats, probes: &[Probe], ks_max: f64) -> ConvergenceReport {
    let mut ladder: Vec<&EnsembleStats> = ctmc.iter().collect();
    ladder.sort_by(|a, b| a.size.unwrap_or(0.0).total_cmp(&b.size.unwrap_or(0.0)));
    let mut rows = Vec::new();
    let mut verdicts = Vec::new();
    for p in probes {
        let lim = limit.probe(p).map(|s| s.sample.as_slice()).unwrap_or(&[]);
        let mut ks = Vec::new();
        let mut min_n = usize::MAX;
        let mut missing = lim.is_empty() || ladder.is_empty();
        for s in &ladder {
            let xs = s.probe(p).map(|s| s.sample.as_slice()).unwrap_or(&[]);
            if xs.is_empty() || lim.is_empty() {
                missing = true;
                continue;
            }
            let d = ks_sorted(xs, lim);
            ks.push(d);
            min_n = min_n.min(xs.len());
            rows.push(ReportRow {
                time: p.time,
                var: p.var.clone(),
                size: s.size.unwrap_or(f64::NAN),
                ks: d,
                mean_diff: mean_var(xs).0 - mean_var(lim).0,
                n_ctmc: xs.len(),
                n_limit: lim.len(),
            });
        }
        let allowance = if min_n == usize::MAX { f64::NAN } else { 2.0 / (min_n as f64).sqrt() };
        let monotone = ks.windows(2).all(|w| w[1] <= w[0] + allowance);
        let final_ks = ks.last().copied().unwrap_or(f64::NAN);
        let small = final_ks <= ks_max;
        let reason = if missing {
            "missing samples".to_string()
        } else if !monotone {
            "KS increases with N beyond the allowance".to_string()
        } else if !small {
            "KS stays above the threshold".to_string()
        } else {
            "KS non-increasing and small".to_string()
        };
        verdicts.push(ProbeVerdict {
            probe: p.clone(),
            allowance,
            monotone,
            final_ks,
            ks_max,
            pass: !missing && monotone && small,
            reason,
        });
    }
    ConvergenceReport { rows, verdicts }
}
