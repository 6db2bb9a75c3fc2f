//! Output files of an ensemble run. Schemas are documented in
//! `docs/formats.md`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::ensemble::EnsembleStats;
use crate::report::ConvergenceReport;
use crate::stats::Ecdf;

#[derive(Serialize)]
struct MeanRow<'a> {
    time: f64,
    var: &'a str,
    mean: f64,
    variance: f64,
}

#[derive(Serialize)]
struct CdfRow<'a> {
    time: f64,
    var: &'a str,
    value: f64,
    cdf: f64,
}

#[derive(Serialize)]
struct FiringRow<'a> {
    transition: &'a str,
    bin_lo: f64,
    bin_hi: f64,
    count: u64,
}

#[derive(Serialize)]
struct OccupancyRow<'a> {
    var: &'a str,
    value: f64,
    fraction: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>, header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the `<label>_*.csv` tables and `<label>_diagnostics.jsonl` for
/// one ensemble. Returns the files written.
pub fn write_stats(dir: &Path, s: &EnsembleStats) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let file = |suffix: &str| dir.join(format!("{}_{suffix}", s.label));
    let mut written = Vec::new();

    let p = file("means.csv");
    let rows = s.grid.iter().enumerate().flat_map(|(g, &time)| {
        s.variables.iter().enumerate().map(move |(v, var)| MeanRow { time, var, mean: s.mean[g][v], variance: s.variance[g][v] })
    });
    write_csv(&p, rows, &["time", "var", "mean", "variance"])?;
    written.push(p);

    let p = file("cdf.csv");
    let mut rows = Vec::new();
    for ps in &s.probes {
        if let Ok(e) = Ecdf::new(&ps.sample) {
            for (value, cdf) in e.steps() {
                rows.push(CdfRow { time: ps.probe.time, var: &ps.probe.var, value, cdf });
            }
        }
    }
    write_csv(&p, rows, &["time", "var", "value", "cdf"])?;
    written.push(p);

    let p = file("firings.csv");
    let rows = s.histograms.iter().flat_map(|(name, h)| {
        h.counts.iter().enumerate().map(move |(k, &count)| {
            let (bin_lo, bin_hi) = h.edges(k);
            FiringRow { transition: name, bin_lo, bin_hi, count }
        })
    });
    write_csv(&p, rows, &["transition", "bin_lo", "bin_hi", "count"])?;
    written.push(p);

    let p = file("occupancy.csv");
    let rows = s.occupancy.iter().flat_map(|(var, fr)| fr.iter().map(move |&(value, fraction)| OccupancyRow { var, value, fraction }));
    write_csv(&p, rows, &["var", "value", "fraction"])?;
    written.push(p);

    let p = file("diagnostics.jsonl");
    let mut f = fs::File::create(&p).with_context(|| format!("cannot write {}", p.display()))?;
    for d in &s.diagnostics {
        serde_json::to_writer(&mut f, d)?;
        f.write_all(b"\n")?;
    }
    written.push(p);
    Ok(written)
}

/// Writes `report.csv` and `verdict.txt`.
pub fn write_report(dir: &Path, r: &ConvergenceReport) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let csv = dir.join("report.csv");
    fs::write(&csv, r.to_csv()).with_context(|| format!("cannot write {}", csv.display()))?;
    let txt = dir.join("verdict.txt");
    fs::write(&txt, format!("{r}\n")).with_context(|| format!("cannot write {}", txt.display()))?;
    Ok(vec![csv, txt])
}

/// One-line summary of an ensemble for the terminal.
pub fn summary(s: &EnsembleStats) -> String {
    let mut out = format!("{}: {} replicates completed, {} failed, {} events", s.label, s.completed, s.failures.len(), s.events);
    for ps in &s.probes {
        if !ps.sample.is_empty() {
            let m = ps.sample.iter().sum::<f64>() / ps.sample.len() as f64;
            out.push_str(&format!("; mean {} = {m:.6}", ps.probe.label()));
        }
    }
    out
}
