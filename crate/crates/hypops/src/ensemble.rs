//! Replicate ensembles of the CTMC, the limit PDMP and the fluid ODE,
//! reduced to [`EnsembleStats`].
//!
//! Replicate `k` of a CTMC run at size `N` draws from the stream
//! `(seed, N, k)`; limit runs use experiment id 0. Results are therefore the
//! same whatever the worker count and whichever ladder a size appears in.

use std::collections::BTreeMap;

use hypops_core::ctmc::Observer;
use hypops_core::model::{normalize_state, NormMode, VarKind};
use hypops_core::pdmp::JumpKind;
use hypops_core::rng::SeedId;
use hypops_core::tdsha::TdshaError;
use hypops_core::{assemble_pdmp, build_tdsha, CtmcError, CtmcModel, CtmcOptions, EventKind, PdmpError, PdmpModel, PdmpOptions, Program};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{Probe, Tolerances};
use crate::stats::{mean_var, sorted, Histogram};

/// Bins of the firing-time histograms.
pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, Error)]
pub enum RunError {
    #[error(transparent)]
    Ctmc(#[from] CtmcError),
    #[error(transparent)]
    Pdmp(#[from] PdmpError),
    #[error(transparent)]
    Tdsha(#[from] TdshaError),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("unknown transition `{0}`")]
    UnknownTransition(String),
    #[error("the fluid limit needs a model without stochastic jumps (found `{0}`)")]
    NotFluid(String),
}

/// A compiled model ready for replicate runs.
pub enum Target {
    Ctmc { model: CtmcModel, size: f64 },
    Pdmp(PdmpModel),
    /// Deterministic limit: one replicate.
    Fluid(PdmpModel),
}

impl Target {
    pub fn ctmc(p: &Program, size: f64) -> Result<Target, RunError> {
        Ok(Target::Ctmc { model: CtmcModel::new(p, Some(size))?, size })
    }

    pub fn pdmp(p: &Program) -> Result<Target, RunError> {
        Ok(Target::Pdmp(assemble_pdmp(&build_tdsha(p, NormMode::Limit)?)?))
    }

    pub fn fluid(p: &Program) -> Result<Target, RunError> {
        let m = assemble_pdmp(&build_tdsha(p, NormMode::Limit)?)?;
        if let Some(j) = m.tdsha.ts.first() {
            return Err(RunError::NotFluid(j.name.clone()));
        }
        Ok(Target::Fluid(m))
    }

    pub fn label(&self) -> String {
        match self {
            Target::Ctmc { size, .. } => format!("ctmc_N{size}"),
            Target::Pdmp(_) => "pdmp".into(),
            Target::Fluid(_) => "fluid".into(),
        }
    }

    pub fn size(&self) -> Option<f64> {
        match self {
            Target::Ctmc { size, .. } => Some(*size),
            _ => None,
        }
    }

    fn program(&self) -> &Program {
        match self {
            Target::Ctmc { model, .. } => &model.program,
            Target::Pdmp(m) | Target::Fluid(m) => &m.tdsha.program,
        }
    }

    pub fn variables(&self) -> Vec<String> {
        self.program().variables.iter().map(|v| v.name.clone()).collect()
    }

    /// Which variables are reported as occupancy fractions.
    fn discrete_mask(&self) -> Vec<bool> {
        self.program().variables.iter().map(|v| v.kind != VarKind::Continuous).collect()
    }

    fn experiment(&self) -> u32 {
        match self {
            Target::Ctmc { size, .. } => *size as u32,
            _ => 0,
        }
    }

    fn transition_names(&self) -> Vec<String> {
        match self {
            Target::Ctmc { model, .. } => model.program.actions().map(|(_, a)| a.name.clone()).collect(),
            Target::Pdmp(m) | Target::Fluid(m) => m.stochastic_names().chain(m.instantaneous_names()).map(String::from).collect(),
        }
    }
}

/// Shape of an ensemble run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub horizon: f64,
    /// Sorted observation times within `[0, horizon]`.
    pub grid: Vec<f64>,
    pub probes: Vec<Probe>,
    pub reps: usize,
    pub seed: u64,
    /// Transitions whose firing times are collected.
    pub track: Vec<String>,
    pub tolerances: Tolerances,
}

impl RunSpec {
    pub fn new(horizon: f64, reps: usize, seed: u64) -> RunSpec {
        RunSpec {
            horizon,
            grid: vec![horizon],
            probes: Vec::new(),
            reps,
            seed,
            track: Vec::new(),
            tolerances: Tolerances::default(),
        }
    }
}

/// Per-replicate diagnostics, written as JSON lines.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateDiag {
    pub replicate: u32,
    pub seed_root: u64,
    pub seed_experiment: u32,
    pub events: u64,
    pub clamped_rates: u64,
    pub slides: usize,
    pub tangential_events: usize,
    pub surface_contacts: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    pub index: u32,
    /// Normalized states at the grid times.
    pub observations: Vec<Vec<f64>>,
    /// `(tracked transition, time)` for every firing of a tracked transition.
    pub firings: Vec<(usize, f64)>,
    pub diag: ReplicateDiag,
}

struct Firings<'a> {
    map: &'a [Option<usize>],
    out: Vec<(usize, f64)>,
}

impl Observer for Firings<'_> {
    fn event(&mut self, time: f64, action: usize, _kind: EventKind, _state: &[f64]) {
        if let Some(k) = self.map[action] {
            self.out.push((k, time));
        }
    }
}

/// Worker pool honouring `HYPOPS_THREADS`.
pub fn pool() -> rayon::ThreadPool {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("HYPOPS_THREADS").ok().and_then(|s| s.parse::<usize>().ok()).filter(|&n| n > 0) {
        b = b.num_threads(n);
    }
    b.build().expect("thread pool")
}

fn track_map(t: &Target, track: &[String]) -> Result<Vec<Option<usize>>, RunError> {
    let names = t.transition_names();
    if let Some(x) = track.iter().find(|x| !names.contains(x)) {
        return Err(RunError::UnknownTransition(x.clone()));
    }
    Ok(names.iter().map(|n| track.iter().position(|x| x == n)).collect())
}

/// Runs one replicate.
pub fn run_replicate(t: &Target, spec: &RunSpec, map: &[Option<usize>], index: u32) -> Result<Replicate, (ReplicateDiag, RunError)> {
    let seed = SeedId::new(spec.seed, t.experiment(), index);
    let mut rng = seed.rng();
    let mut diag = ReplicateDiag {
        replicate: index,
        seed_root: seed.root,
        seed_experiment: seed.experiment,
        events: 0,
        clamped_rates: 0,
        slides: 0,
        tangential_events: 0,
        surface_contacts: 0,
        error: None,
    };
    let fail = |mut d: ReplicateDiag, e: RunError| {
        d.error = Some(e.to_string());
        (d, e)
    };
    match t {
        Target::Ctmc { model, size } => {
            let mut opts = CtmcOptions::new(spec.horizon);
            opts.grid = spec.grid.clone();
            let mut obs = Firings { map, out: Vec::new() };
            let tr = match model.simulate(&opts, &mut rng, &mut obs) {
                Ok(tr) => tr,
                Err(e) => return Err(fail(diag, e.into())),
            };
            diag.events = tr.n_events;
            diag.clamped_rates = tr.clamped_rates;
            let observations = tr.observations.iter().map(|s| normalize_state(&model.program, *size, s)).collect();
            Ok(Replicate { index, observations, firings: obs.out, diag })
        }
        Target::Pdmp(m) | Target::Fluid(m) => {
            let mut opts = PdmpOptions::new(spec.horizon);
            spec.tolerances.apply(&mut opts);
            opts.grid = spec.grid.clone();
            opts.record_jumps = map.iter().any(Option::is_some);
            let tr = match m.simulate(&opts, &mut rng) {
                Ok(tr) => tr,
                Err(e) => return Err(fail(diag, e.into())),
            };
            diag.events = tr.n_jumps;
            diag.slides = tr.slides.len();
            diag.tangential_events = tr.diagnostics.boundary.iter().filter(|b| b.tangential).count();
            diag.surface_contacts = tr.diagnostics.surface_contacts;
            let ns = m.stoch_count();
            let firings = tr
                .jumps
                .iter()
                .filter_map(|j| {
                    let k = match j.kind {
                        JumpKind::Stochastic => j.transition as usize,
                        JumpKind::Boundary => ns + j.transition as usize,
                    };
                    map[k].map(|x| (x, j.time))
                })
                .collect();
            Ok(Replicate { index, observations: tr.observations, firings, diag })
        }
    }
}

/// Runs `spec.reps` replicates (one for the fluid limit) in parallel and
/// returns them in replicate order.
pub fn run_replicates(t: &Target, spec: &RunSpec) -> Result<Vec<Result<Replicate, (ReplicateDiag, RunError)>>, RunError> {
    let map = track_map(t, &spec.track)?;
    let reps = if matches!(t, Target::Fluid(_)) { 1 } else { spec.reps };
    Ok(pool().install(|| (0..reps as u32).into_par_iter().map(|k| run_replicate(t, spec, &map, k)).collect()))
}

/// Distribution of one variable at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSample {
    pub probe: Probe,
    /// Sorted values over the completed replicates.
    pub sample: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub label: String,
    pub size: Option<f64>,
    pub variables: Vec<String>,
    pub grid: Vec<f64>,
    /// Per grid time, per variable.
    pub mean: Vec<Vec<f64>>,
    pub variance: Vec<Vec<f64>>,
    pub probes: Vec<ProbeSample>,
    /// Firing times of each tracked transition, pooled over replicates.
    pub firings: BTreeMap<String, Vec<f64>>,
    pub histograms: BTreeMap<String, Histogram>,
    /// For discrete variables: value -> fraction of (replicate, grid time)
    /// pairs at that value.
    pub occupancy: BTreeMap<String, Vec<(f64, f64)>>,
    pub completed: usize,
    pub failures: Vec<(u32, String)>,
    pub diagnostics: Vec<ReplicateDiag>,
    pub events: u64,
}

impl EnsembleStats {
    pub fn probe(&self, p: &Probe) -> Option<&ProbeSample> {
        self.probes.iter().find(|s| &s.probe == p)
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v == name)
    }
}

/// Runs an ensemble and reduces it in replicate order.
pub fn run_ensemble(t: &Target, spec: &RunSpec) -> Result<EnsembleStats, RunError> {
    let vars = t.variables();
    for p in &spec.probes {
        if !vars.contains(&p.var) {
            return Err(RunError::UnknownVariable(p.var.clone()));
        }
    }
    let reps = run_replicates(t, spec)?;
    Ok(aggregate(t, spec, reps))
}

fn aggregate(t: &Target, spec: &RunSpec, reps: Vec<Result<Replicate, (ReplicateDiag, RunError)>>) -> EnsembleStats {
    let vars = t.variables();
    let discrete = t.discrete_mask();
    let nv = vars.len();
    let ng = spec.grid.len();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    let mut diagnostics = Vec::new();
    for r in reps {
        match r {
            Ok(r) => {
                diagnostics.push(r.diag.clone());
                ok.push(r);
            }
            Err((d, e)) => {
                failures.push((d.replicate, e.to_string()));
                diagnostics.push(d);
            }
        }
    }
    let mut mean = vec![vec![f64::NAN; nv]; ng];
    let mut variance = vec![vec![f64::NAN; nv]; ng];
    if !ok.is_empty() {
        for g in 0..ng {
            for v in 0..nv {
                let xs: Vec<f64> = ok.iter().map(|r| r.observations[g][v]).collect();
                (mean[g][v], variance[g][v]) = mean_var(&xs);
            }
        }
    }
    let probes = spec
        .probes
        .iter()
        .map(|p| {
            let g = spec.grid.iter().position(|&x| x == p.time);
            let v = vars.iter().position(|x| x == &p.var);
            let xs: Vec<f64> = match (g, v) {
                (Some(g), Some(v)) => ok.iter().map(|r| r.observations[g][v]).collect(),
                _ => Vec::new(),
            };
            ProbeSample { probe: p.clone(), sample: sorted(&xs) }
        })
        .collect();
    let mut firings: BTreeMap<String, Vec<f64>> = spec.track.iter().map(|n| (n.clone(), Vec::new())).collect();
    for r in &ok {
        for &(k, time) in &r.firings {
            firings.get_mut(&spec.track[k]).expect("tracked").push(time);
        }
    }
    let histograms = firings.iter().map(|(n, xs)| (n.clone(), Histogram::new(0.0, spec.horizon, HISTOGRAM_BINS, xs))).collect();
    let mut occupancy = BTreeMap::new();
    for v in (0..nv).filter(|&v| discrete[v]) {
        let xs: Vec<f64> = ok.iter().flat_map(|r| r.observations.iter().map(move |o| o[v])).collect();
        let total = xs.len() as f64;
        let mut fr: Vec<(f64, f64)> = Vec::new();
        for x in sorted(&xs) {
            match fr.last_mut() {
                Some(last) if last.0 == x => last.1 += 1.0,
                _ => fr.push((x, 1.0)),
            }
        }
        fr.iter_mut().for_each(|e| e.1 /= total);
        occupancy.insert(vars[v].clone(), fr);
    }
    let events = diagnostics.iter().map(|d| d.events).sum();
    EnsembleStats {
        label: t.label(),
        size: t.size(),
        variables: vars,
        grid: spec.grid.clone(),
        mean,
        variance,
        probes,
        firings,
        histograms,
        occupancy,
        completed: ok.len(),
        failures,
        diagnostics,
        events,
    }
}
