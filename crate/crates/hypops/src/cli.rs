//! The `hypops` command line.
//!
//! Exit codes: 0 success, 1 model or configuration error, 2 simulation
//! error in at least one replicate, 3 failed convergence verdict under
//! `--assert-converges`, 64 usage error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hypops_core::model::NormMode;
use hypops_core::parser::SourceModel;
use hypops_core::rng::stream;
use hypops_core::scaling::{DEFAULT_SAMPLES, DEFAULT_SIZES};
use hypops_core::{build_tdsha, check_scalings, pretty_print, Program};

use crate::config::{override_classes, ExperimentConfig, Mode, Probe, Tolerances};
use crate::ensemble::{run_ensemble, EnsembleStats, RunSpec, Target};
use crate::output::{summary, write_report, write_stats};
use crate::report::convergence_report;

pub const EXIT_OK: i32 = 0;
pub const EXIT_MODEL: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERDICT: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

#[derive(Parser, Debug)]
#[command(name = "hypops", version, about = "Simulate population models and their hybrid limits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse and validate a model, then print it in canonical form.
    Parse { file: PathBuf },
    /// Report how each action's rate scales with the system size.
    Check {
        file: PathBuf,
        /// Sizes to evaluate (default 1e2 1e3 1e4 1e5).
        #[arg(long, num_args = 1..)]
        sizes: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// CTMC ensemble at one system size.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        size: f64,
    },
    /// Ensemble of the limit PDMP.
    Pdmp {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Solve the deterministic fluid limit.
    Fluid {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the CTMC size ladder and the limit from a configuration file and
    /// write a convergence report.
    Compare {
        config: PathBuf,
        /// Named preset from the configuration (e.g. `desk`, `paper`).
        #[arg(long)]
        preset: Option<String>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        reps: Option<usize>,
        /// Exit with status 3 when the verdict fails.
        #[arg(long)]
        assert_converges: bool,
    },
    /// Print the hybrid automaton built from a model.
    DumpTdsha {
        file: PathBuf,
        /// Normalize at this size instead of taking the limit.
        #[arg(long)]
        size: Option<f64>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    file: PathBuf,
    #[arg(long)]
    horizon: f64,
    /// Observation step (the horizon is always observed).
    #[arg(long)]
    grid: Option<f64>,
    /// Distribution probe `VAR@TIME`; repeatable.
    #[arg(long = "probe", value_parser = parse_probe)]
    probes: Vec<Probe>,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Transition whose firing times are histogrammed; repeatable.
    #[arg(long)]
    track: Vec<String>,
    /// Output directory for the CSV tables.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run even when the scaling check fails.
    #[arg(long)]
    force: bool,
}

fn parse_probe(s: &str) -> Result<Probe, String> {
    let (var, time) = s.split_once('@').ok_or_else(|| format!("expected VAR@TIME, got `{s}`"))?;
    let time = time.trim().parse::<f64>().map_err(|e| format!("bad probe time in `{s}`: {e}"))?;
    Ok(Probe { time, var: var.trim().into() })
}

/// A failure with its exit code.
struct Failure {
    code: i32,
    message: String,
}

fn model_err(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_MODEL, message: message.into() }
}

fn runtime_err(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_RUNTIME, message: message.into() }
}

fn load_model(path: &Path) -> Result<Program, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| model_err(format!("{}: cannot read: {e}", path.display())))?;
    let mut src = SourceModel::new(&path.display().to_string(), &text);
    src.parse().ok_or_else(|| model_err(src.render_diagnostics().trim_end().to_string()))
}

fn scaling_gate(p: &Program, seed: u64, force: bool, err: &mut dyn Write) -> Result<(), Failure> {
    let report = check_scalings(p, &DEFAULT_SIZES, DEFAULT_SAMPLES, &mut stream(seed, u32::MAX, 0));
    if report.passed() {
        return Ok(());
    }
    if force {
        let _ = writeln!(err, "warning: scaling check failed; continuing because of --force");
        return Ok(());
    }
    Err(model_err(format!("{report}scaling check failed (use --force to run anyway)")))
}

fn finish(stats: &EnsembleStats, out: Option<&Path>, o: &mut dyn Write) -> Result<(), Failure> {
    let _ = writeln!(o, "{}", summary(stats));
    if let Some(dir) = out {
        write_stats(dir, stats).map_err(|e| runtime_err(format!("{e:#}")))?;
    }
    if let Some((k, e)) = stats.failures.first() {
        return Err(runtime_err(format!("{} of {} replicates failed; first (replicate {k}): {e}", stats.failures.len(), stats.diagnostics.len())));
    }
    Ok(())
}

fn run_spec(a: &RunArgs) -> Result<RunSpec, Failure> {
    let cfg_like = ExperimentConfig {
        model: a.file.clone(),
        mode: Mode::Ctmc,
        sizes: Vec::new(),
        horizon: a.horizon,
        grid: a.grid.map(crate::config::Grid::Step).unwrap_or_default(),
        probes: a.probes.clone(),
        reps: a.reps,
        seed: a.seed,
        out_dir: PathBuf::new(),
        tolerances: Tolerances::default(),
        assert_converges: false,
        force: a.force,
        track: a.track.clone(),
        classes: Default::default(),
        presets: Default::default(),
    };
    cfg_like.validate().map_err(|e| model_err(e.to_string()))?;
    Ok(spec_from(&cfg_like))
}

fn spec_from(c: &ExperimentConfig) -> RunSpec {
    RunSpec {
        horizon: c.horizon,
        grid: c.grid_times(),
        probes: c.probes.clone(),
        reps: c.reps,
        seed: c.seed,
        track: c.track.clone(),
        tolerances: c.tolerances.clone(),
    }
}

fn ensemble(t: &Target, spec: &RunSpec) -> Result<EnsembleStats, Failure> {
    run_ensemble(t, spec).map_err(|e| model_err(e.to_string()))
}

fn single(a: &RunArgs, make: impl FnOnce(&Program) -> Result<Target, crate::RunError>, o: &mut dyn Write, e: &mut dyn Write) -> Result<(), Failure> {
    let p = load_model(&a.file)?;
    let spec = run_spec(a)?;
    scaling_gate(&p, a.seed, a.force, e)?;
    let t = make(&p).map_err(|e| model_err(e.to_string()))?;
    let stats = ensemble(&t, &spec)?;
    finish(&stats, a.out.as_deref(), o)
}

fn compare(
    path: &Path,
    preset: Option<&str>,
    out: Option<PathBuf>,
    reps: Option<usize>,
    assert_flag: bool,
    o: &mut dyn Write,
    e: &mut dyn Write,
) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| model_err(e.to_string()))?;
    if let Some(name) = preset {
        cfg.apply_preset(name).map_err(|e| model_err(e.to_string()))?;
    }
    if let Some(dir) = out {
        cfg.out_dir = dir;
    }
    if let Some(r) = reps {
        cfg.reps = r;
    }
    cfg.assert_converges |= assert_flag;
    cfg.validate().map_err(|e| model_err(e.to_string()))?;
    let mut p = load_model(&cfg.model)?;
    override_classes(&mut p, &cfg.classes).map_err(|e| model_err(e.to_string()))?;
    scaling_gate(&p, cfg.seed, cfg.force, e)?;
    let spec = spec_from(&cfg);

    let mut ladder = Vec::new();
    for &n in &cfg.sizes {
        let t = Target::ctmc(&p, n).map_err(|e| model_err(e.to_string()))?;
        let s = ensemble(&t, &spec)?;
        let _ = writeln!(o, "{}", summary(&s));
        write_stats(&cfg.out_dir, &s).map_err(|e| runtime_err(format!("{e:#}")))?;
        ladder.push(s);
    }
    let limit = match cfg.mode {
        Mode::Ctmc => None,
        Mode::Pdmp => Some(Target::pdmp(&p)),
        Mode::Fluid => Some(Target::fluid(&p)),
    };
    let mut failed: usize = ladder.iter().map(|s| s.failures.len()).sum();
    if let Some(t) = limit {
        let t = t.map_err(|e| model_err(e.to_string()))?;
        let s = ensemble(&t, &spec)?;
        let _ = writeln!(o, "{}", summary(&s));
        write_stats(&cfg.out_dir, &s).map_err(|e| runtime_err(format!("{e:#}")))?;
        failed += s.failures.len();
        if !ladder.is_empty() {
            let report = convergence_report(&ladder, &s, &cfg.probes, cfg.tolerances.ks_max());
            write_report(&cfg.out_dir, &report).map_err(|e| runtime_err(format!("{e:#}")))?;
            let _ = writeln!(o, "{report}");
            if failed > 0 {
                return Err(runtime_err(format!("{failed} replicates failed; see the diagnostics files")));
            }
            if cfg.assert_converges && !report.passed() {
                return Err(Failure { code: EXIT_VERDICT, message: "convergence verdict failed".into() });
            }
        }
    }
    if failed > 0 {
        return Err(runtime_err(format!("{failed} replicates failed; see the diagnostics files")));
    }
    Ok(())
}

fn dispatch(cli: Cli, o: &mut dyn Write, e: &mut dyn Write) -> Result<(), Failure> {
    match cli.command {
        Command::Parse { file } => {
            let p = load_model(&file)?;
            let _ = write!(o, "{}", pretty_print(&p));
            Ok(())
        }
        Command::Check { file, sizes, samples, seed, csv } => {
            let p = load_model(&file)?;
            let sizes = if sizes.is_empty() { DEFAULT_SIZES.to_vec() } else { sizes };
            let report = check_scalings(&p, &sizes, samples, &mut stream(seed, u32::MAX, 0));
            let _ = write!(o, "{report}");
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv()).map_err(|e| runtime_err(format!("{}: {e}", path.display())))?;
            }
            if report.passed() {
                Ok(())
            } else {
                Err(model_err("scaling check failed"))
            }
        }
        Command::Simulate { run, size } => {
            if !(size > 0.0) {
                return Err(model_err(format!("size must be positive, got {size}")));
            }
            single(&run, |p| Target::ctmc(p, size), o, e)
        }
        Command::Pdmp { run } => single(&run, Target::pdmp, o, e),
        Command::Fluid { run } => single(&run, Target::fluid, o, e),
        Command::Compare { config, preset, out, reps, assert_converges } => {
            compare(&config, preset.as_deref(), out, reps, assert_converges, o, e)
        }
        Command::DumpTdsha { file, size } => {
            let p = load_model(&file)?;
            let mode = size.map_or(NormMode::Limit, NormMode::AtSize);
            let t = build_tdsha(&p, mode).map_err(|e| model_err(e.to_string()))?;
            let _ = write!(o, "{t}");
            Ok(())
        }
    }
}

/// Runs the command line with explicit output streams; returns the exit
/// code.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
            } else {
                let _ = write!(out, "{}", e.render());
            }
            return code;
        }
    };
    match dispatch(cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_syntax() {
        assert_eq!(parse_probe("Xr@500").unwrap(), Probe { time: 500.0, var: "Xr".into() });
        assert!(parse_probe("Xr").is_err());
        assert!(parse_probe("Xr@soon").is_err());
    }

    #[test]
    fn usage_errors() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run_with(["hypops", "frobnicate"], &mut o, &mut e), EXIT_USAGE);
        assert!(!e.is_empty());
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run_with(["hypops", "--help"], &mut o, &mut e), EXIT_OK);
        assert!(String::from_utf8(o).unwrap().contains("dump-tdsha"));
    }
}
