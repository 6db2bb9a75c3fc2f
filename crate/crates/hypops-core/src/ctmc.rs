//! Exact stochastic simulation (SSA) of population programs.
//!
//! Stochastic actions race with exponential clocks. After every firing,
//! enabled instantaneous actions are resolved at the same instant by weight.
//! Timed instantaneous actions (`time >= h0 && g`) are scheduled directly:
//! the state is constant between jumps, so the activation time is `h0`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::exec::{resolver, CReset};
use crate::expr::{exp1, CExpr, CGuard, Ctx, EvalError, Guard};
use crate::model::{flatten, split_timed_guard, validate, ActionKind, ModelErrors, Program};
use crate::rng::SeedId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CtmcError {
    #[error(transparent)]
    Model(#[from] ModelErrors),
    #[error("{context}: {source}")]
    Eval { context: String, source: EvalError },
    #[error("action `{action}` at t = {time} left `{var}` = {value} outside its {domain} domain")]
    DomainViolation { action: String, time: f64, var: String, value: f64, domain: &'static str },
    #[error("more than {limit} instantaneous firings at t = {time} (last: `{action}`)")]
    ChainLimitExceeded { time: f64, limit: usize, action: String },
    #[error("zero total weight among enabled instantaneous actions at t = {time}")]
    ZeroTotalWeight { time: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Stochastic,
    Instantaneous,
    /// An instantaneous action activated by its `time >= h0` conjunct.
    Timed,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Stochastic => "stochastic",
            EventKind::Instantaneous => "instantaneous",
            EventKind::Timed => "timed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtmcState {
    pub vals: Vec<f64>,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub action: u32,
    pub kind: EventKind,
    /// Position within the instantaneous chain at this instant (0 for
    /// stochastic firings).
    pub chain: u32,
    /// Post-values of the updated variables.
    pub changes: Vec<(u32, f64)>,
    /// Full pre-state, in dense mode only.
    pub pre: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Record {
    /// Keep no events (observers and grids still work).
    #[default]
    Off,
    /// Keep events with the changed values only.
    Changes,
    /// Keep events with full pre-states.
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtmcOptions {
    pub horizon: f64,
    /// Maximum number of instantaneous firings at one instant.
    pub max_chain: usize,
    pub record: Record,
    /// Sorted observation times; the state at each is recorded.
    pub grid: Vec<f64>,
    /// Ends the run as soon as this guard holds.
    pub stop: Option<Guard>,
    pub max_events: u64,
}

impl CtmcOptions {
    pub fn new(horizon: f64) -> CtmcOptions {
        CtmcOptions { horizon, max_chain: 1, record: Record::Off, grid: Vec::new(), stop: None, max_events: u64::MAX }
    }
}

/// Streaming access to a run. `state` is the state after every firing at
/// that instant.
pub trait Observer {
    fn event(&mut self, _time: f64, _action: usize, _kind: EventKind, _state: &[f64]) {}
}

impl Observer for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub initial: Vec<f64>,
    pub events: Vec<EventRecord>,
    pub horizon: f64,
    pub final_state: CtmcState,
    /// States at the option grid times.
    pub observations: Vec<Vec<f64>>,
    pub n_events: u64,
    /// Rate evaluations that came out negative and were clamped to 0.
    pub clamped_rates: u64,
    /// Time at which the stop guard held, if it did.
    pub stopped_at: Option<f64>,
    pub seed: Option<SeedId>,
}

impl Trajectory {
    /// State at time `t` rebuilt from the recorded events.
    pub fn state_at(&self, t: f64) -> Vec<f64> {
        let mut s = self.initial.clone();
        for e in self.events.iter().take_while(|e| e.time <= t) {
            for &(i, v) in &e.changes {
                s[i as usize] = v;
            }
        }
        s
    }
}

#[derive(Debug, Clone)]
struct CAction {
    name: String,
    guard: CGuard,
    intensity: CExpr,
    /// For timed instantaneous actions: threshold and the remaining guard.
    timed: Option<(CExpr, CGuard)>,
    instantaneous: bool,
    reset: CReset,
}

/// A flattened, validated program compiled for simulation.
#[derive(Debug, Clone)]
pub struct CtmcModel {
    pub program: Program,
    pub size: Option<f64>,
    actions: Vec<CAction>,
    stochastic: Vec<usize>,
    instantaneous: Vec<usize>,
    /// For each action, the stochastic actions whose rate or guard reads a
    /// variable it updates.
    deps: Vec<Vec<usize>>,
    nlocals: usize,
}

fn eval_err(context: &str) -> impl Fn(EvalError) -> CtmcError + '_ {
    move |source| CtmcError::Eval { context: context.into(), source }
}

impl CtmcModel {
    /// Flattens, validates and compiles `p`. `size` binds `N`, falling back
    /// to the program's declared size.
    pub fn new(p: &Program, size: Option<f64>) -> Result<CtmcModel, CtmcError> {
        let program = flatten(p);
        validate(&program)?;
        let size = size.or(program.size);
        let r = resolver(&program);
        let mut actions = Vec::new();
        let mut next_id = 0;
        for (_, a) in program.actions() {
            let ctx = format!("action `{}`", a.name);
            let e = eval_err(&ctx);
            let guard = CGuard::compile(&a.guard, &r, &mut next_id).map_err(&e)?;
            let intensity = CExpr::compile(a.intensity(), &r).map_err(&e)?;
            let timed = match split_timed_guard(&a.guard) {
                Ok(Some((h0, g1))) if a.is_instantaneous() => Some((
                    CExpr::compile(&h0, &r).map_err(&e)?,
                    CGuard::compile(&g1, &r, &mut next_id).map_err(&e)?,
                )),
                _ => None,
            };
            let reset = CReset::compile(&program, &a.reset).map_err(&e)?;
            actions.push(CAction {
                name: a.name.clone(),
                guard,
                intensity,
                timed,
                instantaneous: matches!(a.kind, ActionKind::Instantaneous { .. }),
                reset,
            });
        }
        let stochastic: Vec<usize> = (0..actions.len()).filter(|&i| !actions[i].instantaneous).collect();
        let instantaneous: Vec<usize> = (0..actions.len()).filter(|&i| actions[i].instantaneous).collect();
        let nv = program.variables.len();
        let reads: Vec<Vec<bool>> = actions
            .iter()
            .map(|a| {
                let mut r = alloc::vec![false; nv];
                let mut mark = |i: usize| {
                    if i < nv {
                        r[i] = true
                    }
                };
                a.guard.for_each_slot(&mut mark);
                a.intensity.for_each_slot(&mut mark);
                r
            })
            .collect();
        let deps = actions
            .iter()
            .map(|a| stochastic.iter().copied().filter(|&j| a.reset.targets().any(|t| reads[j][t])).collect())
            .collect();
        let nlocals = actions.iter().map(|a| a.reset.locals.len()).max().unwrap_or(0);
        drop(r);
        Ok(CtmcModel { program, size, actions, stochastic, instantaneous, deps, nlocals })
    }

    pub fn action_name(&self, i: usize) -> &str {
        &self.actions[i].name
    }

    pub fn action_index(&self, name: &str) -> Option<usize> {
        self.actions.iter().position(|a| a.name == name)
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.program.var_index(name)
    }

    pub fn initial_state(&self) -> Result<CtmcState, CtmcError> {
        let vals = self.program.initial_state(self.size).map_err(|e| CtmcError::Eval {
            context: "initial state".into(),
            source: match e {
                crate::model::ModelError::Eval { source, .. } => source,
                other => EvalError::InvalidParameter(format!("{other}")),
            },
        })?;
        Ok(CtmcState { vals, time: 0.0 })
    }

    fn ctx<'a>(&self, vals: &'a [f64], time: f64) -> Ctx<'a> {
        Ctx { vals, time, size: self.size }
    }

    fn rate(&self, i: usize, vals: &[f64], clamped: &mut u64) -> Result<f64, CtmcError> {
        let a = &self.actions[i];
        let c = self.ctx(vals, 0.0);
        let on = a.guard.holds(&c).map_err(eval_err(&a.name))?;
        if !on {
            return Ok(0.0);
        }
        let r = a.intensity.eval(&c).map_err(eval_err(&a.name))?;
        if r < 0.0 {
            *clamped += 1;
            return Ok(0.0);
        }
        Ok(r)
    }

    /// Stochastic actions with a true guard and positive rate.
    pub fn enabled_stochastic(&self, s: &CtmcState) -> Result<Vec<(usize, f64)>, CtmcError> {
        let mut clamped = 0;
        let mut out = Vec::new();
        for &i in &self.stochastic {
            let r = self.rate(i, &s.vals, &mut clamped)?;
            if r > 0.0 {
                out.push((i, r));
            }
        }
        Ok(out)
    }

    fn inst_enabled(&self, i: usize, vals: &[f64], time: f64) -> Result<bool, CtmcError> {
        let a = &self.actions[i];
        let c = self.ctx(vals, time);
        let e = eval_err(&a.name);
        match &a.timed {
            Some((h0, g1)) => Ok(time >= h0.eval(&c).map_err(&e)? && g1.holds(&c).map_err(&e)?),
            None => a.guard.holds(&c).map_err(e),
        }
    }

    /// Earliest activation of a timed action from a non-vanishing state.
    pub fn next_timed_activation(&self, s: &CtmcState) -> Result<Option<f64>, CtmcError> {
        let mut best: Option<f64> = None;
        for &i in &self.instantaneous {
            let a = &self.actions[i];
            if let Some((h0, g1)) = &a.timed {
                let c = self.ctx(&s.vals, s.time);
                let e = eval_err(&a.name);
                if g1.holds(&c).map_err(&e)? {
                    let t = h0.eval(&c).map_err(&e)?.max(s.time);
                    best = Some(best.map_or(t, |b: f64| b.min(t)));
                }
            }
        }
        Ok(best)
    }

    fn fire<R: Rng + ?Sized>(
        &self,
        i: usize,
        vals: &mut Vec<f64>,
        time: f64,
        rng: &mut R,
        scratch: &mut Vec<(usize, f64)>,
    ) -> Result<(), CtmcError> {
        let nv = self.program.variables.len();
        let a = &self.actions[i];
        a.reset.apply(vals, nv, time, self.size, rng, scratch).map_err(eval_err(&a.name))?;
        for &(idx, v) in scratch.iter() {
            let d = self.program.variables[idx].domain;
            if !d.contains(v) {
                return Err(CtmcError::DomainViolation {
                    action: a.name.clone(),
                    time,
                    var: self.program.variables[idx].name.clone(),
                    value: v,
                    domain: d.keyword(),
                });
            }
        }
        Ok(())
    }

    /// Fires enabled instantaneous actions at the current instant, chosen by
    /// weight, until none is enabled.
    pub fn resolve_instantaneous<R: Rng + ?Sized>(
        &self,
        s: &mut CtmcState,
        rng: &mut R,
        max_chain: usize,
    ) -> Result<Vec<EventRecord>, CtmcError> {
        let mut vals = s.vals.clone();
        vals.resize(self.program.variables.len() + self.nlocals, 0.0);
        let mut out = Vec::new();
        let mut scratch = Vec::new();
        let mut en = Vec::new();
        let mut fired = Vec::new();
        self.resolve(&mut vals, s.time, rng, max_chain, false, &mut en, &mut scratch, &mut fired)?;
        for (i, kind, chain, sc, _) in fired {
            out.push(EventRecord {
                time: s.time,
                action: i as u32,
                kind,
                chain,
                changes: sc.iter().map(|&(j, v)| (j as u32, v)).collect(),
                pre: None,
            });
        }
        vals.truncate(self.program.variables.len());
        s.vals = vals;
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn resolve<R: Rng + ?Sized>(
        &self,
        vals: &mut Vec<f64>,
        time: f64,
        rng: &mut R,
        max_chain: usize,
        dense: bool,
        enabled: &mut Vec<(usize, f64)>,
        scratch: &mut Vec<(usize, f64)>,
        fired: &mut Vec<Pending>,
    ) -> Result<u32, CtmcError> {
        let mut chain = 0u32;
        loop {
            enabled.clear();
            let mut total = 0.0;
            for &i in &self.instantaneous {
                if self.inst_enabled(i, vals, time)? {
                    let a = &self.actions[i];
                    let w = a.intensity.eval(&self.ctx(vals, time)).map_err(eval_err(&a.name))?.max(0.0);
                    total += w;
                    enabled.push((i, w));
                }
            }
            if enabled.is_empty() {
                return Ok(chain);
            }
            if chain as usize >= max_chain {
                return Err(CtmcError::ChainLimitExceeded {
                    time,
                    limit: max_chain,
                    action: self.actions[enabled[0].0].name.clone(),
                });
            }
            if !(total > 0.0) {
                return Err(CtmcError::ZeroTotalWeight { time });
            }
            let i = pick(enabled, total, rng);
            let kind = if self.actions[i].timed.is_some() { EventKind::Timed } else { EventKind::Instantaneous };
            let pre = dense.then(|| vals[..self.program.variables.len()].to_vec());
            self.fire(i, vals, time, rng, scratch)?;
            fired.push((i, kind, chain, scratch.clone(), pre));
            chain += 1;
        }
    }

    /// Simulates one trajectory from the model's initial state.
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        opts: &CtmcOptions,
        rng: &mut R,
        obs: &mut dyn Observer,
    ) -> Result<Trajectory, CtmcError> {
        let s0 = self.initial_state()?;
        self.simulate_from(s0, opts, rng, obs)
    }

    pub fn simulate_from<R: Rng + ?Sized>(
        &self,
        s0: CtmcState,
        opts: &CtmcOptions,
        rng: &mut R,
        obs: &mut dyn Observer,
    ) -> Result<Trajectory, CtmcError> {
        let nv = self.program.variables.len();
        let r = resolver(&self.program);
        let stop = match &opts.stop {
            Some(g) => Some(CGuard::compile(g, &r, &mut 0).map_err(eval_err("stop condition"))?),
            None => None,
        };
        let mut vals = s0.vals.clone();
        vals.resize(nv + self.nlocals, 0.0);
        let mut t = s0.time;
        let mut traj = Trajectory {
            initial: s0.vals.clone(),
            events: Vec::new(),
            horizon: opts.horizon,
            final_state: s0.clone(),
            observations: Vec::with_capacity(opts.grid.len()),
            n_events: 0,
            clamped_rates: 0,
            stopped_at: None,
            seed: None,
        };
        let mut scratch = Vec::new();
        let mut enabled = Vec::new();
        let mut events = Vec::new();
        let record = opts.record;
        let mut n_events = 0u64;

        let mut log = |i: usize, kind: EventKind, chain: u32, sc: &[(usize, f64)], time: f64, pre: Option<Vec<f64>>| {
            if record != Record::Off {
                events.push(EventRecord {
                    time,
                    action: i as u32,
                    kind,
                    chain,
                    changes: sc.iter().map(|&(j, v)| (j as u32, v)).collect(),
                    pre,
                });
            }
        };

        let dense = record == Record::Dense;
        let mut pending: Vec<Pending> = Vec::new();

        // initial vanishing state
        self.resolve(&mut vals, t, rng, opts.max_chain, dense, &mut enabled, &mut scratch, &mut pending)?;
        for (i, k, c, sc, pre) in pending.drain(..) {
            n_events += 1;
            obs.event(t, i, k, &vals[..nv]);
            log(i, k, c, &sc, t, pre);
        }

        let mut rates = alloc::vec![0.0; self.actions.len()];
        for &i in &self.stochastic {
            rates[i] = self.rate(i, &vals, &mut traj.clamped_rates)?;
        }
        let mut grid = opts.grid.iter().copied().peekable();
        let mut timed_next = self.next_timed_activation(&CtmcState { vals: vals[..nv].to_vec(), time: t })?;
        let stop_holds = |vals: &[f64], t: f64| -> Result<bool, CtmcError> {
            match &stop {
                Some(g) => g.holds(&Ctx { vals, time: t, size: self.size }).map_err(eval_err("stop condition")),
                None => Ok(false),
            }
        };
        if stop_holds(&vals, t)? {
            traj.stopped_at = Some(t);
        }

        while traj.stopped_at.is_none() && n_events < opts.max_events {
            let total: f64 = self.stochastic.iter().map(|&i| rates[i]).sum();
            let t_jump = if total > 0.0 { t + exp1(rng) / total } else { f64::INFINITY };
            let t_timed = timed_next.unwrap_or(f64::INFINITY);
            let t_next = t_jump.min(t_timed);
            if t_next > opts.horizon {
                break;
            }
            while let Some(&g) = grid.peek() {
                if g < t_next {
                    traj.observations.push(vals[..nv].to_vec());
                    grid.next();
                } else {
                    break;
                }
            }
            t = t_next;
            let mut touched: Vec<usize> = Vec::new();
            if t_timed <= t_jump {
                self.resolve(&mut vals, t, rng, opts.max_chain, dense, &mut enabled, &mut scratch, &mut pending)?;
            } else {
                let pre = dense.then(|| vals[..nv].to_vec());
                let mut u = rng.random::<f64>() * total;
                let mut pickd = *self.stochastic.iter().rev().find(|&&i| rates[i] > 0.0).unwrap();
                for &i in &self.stochastic {
                    if rates[i] > 0.0 {
                        if u < rates[i] {
                            pickd = i;
                            break;
                        }
                        u -= rates[i];
                    }
                }
                self.fire(pickd, &mut vals, t, rng, &mut scratch)?;
                pending.push((pickd, EventKind::Stochastic, 0, scratch.clone(), pre));
                self.resolve(&mut vals, t, rng, opts.max_chain, dense, &mut enabled, &mut scratch, &mut pending)?;
            }
            for (i, k, c, sc, pre) in pending.drain(..) {
                n_events += 1;
                touched.push(i);
                obs.event(t, i, k, &vals[..nv]);
                log(i, k, c, &sc, t, pre);
            }
            for i in touched {
                for &j in &self.deps[i] {
                    rates[j] = self.rate(j, &vals, &mut traj.clamped_rates)?;
                }
            }
            if !self.instantaneous.is_empty() {
                timed_next = self.next_timed_activation(&CtmcState { vals: vals[..nv].to_vec(), time: t })?;
            }
            if stop_holds(&vals, t)? {
                traj.stopped_at = Some(t);
            }
        }
        let t_end = if traj.stopped_at.is_some() || n_events >= opts.max_events { t } else { opts.horizon };
        for _ in grid {
            traj.observations.push(vals[..nv].to_vec());
        }
        vals.truncate(nv);
        traj.final_state = CtmcState { vals, time: t_end };
        traj.events = events;
        traj.n_events = n_events;
        Ok(traj)
    }
}

type Pending = (usize, EventKind, u32, Vec<(usize, f64)>, Option<Vec<f64>>);

fn pick<R: Rng + ?Sized>(xs: &[(usize, f64)], total: f64, rng: &mut R) -> usize {
    let mut u = rng.random::<f64>() * total;
    let mut last = xs[0].0;
    for &(i, w) in xs {
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    last
}

/// One trajectory of `p` at size `size` up to `horizon`, recording events.
pub fn simulate_ctmc<R: Rng + ?Sized>(
    p: &Program,
    size: Option<f64>,
    horizon: f64,
    rng: &mut R,
) -> Result<Trajectory, CtmcError> {
    let m = CtmcModel::new(p, size)?;
    let mut opts = CtmcOptions::new(horizon);
    opts.record = Record::Changes;
    m.simulate(&opts, rng, &mut ())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CLIENT_SERVER: &str = "
        param kr = 2; param ks = 0.01; param kt = 1/50; param kb = 1/2000; param kf = 1/1000;
        size N = 100;
        var Xr : continuous init N; var Xt : continuous init 0;
        var Xi : discrete init 2; var Xb : discrete init 0;
        agent client {
          request: rate min(kr * Xr, N * ks * Xi) class continuous -> { Xr -= 1; Xt += 1; };
          think: rate kt * Xt class continuous -> { Xr += 1; Xt -= 1; };
        }
        agent server {
          breakdown: rate kb * Xi -> { Xi -= 1; Xb += 1; };
          repair: rate kf * Xb -> { Xi += 1; Xb -= 1; };
        }";

    fn model(src: &str) -> CtmcModel {
        CtmcModel::new(&parse_model(src).unwrap(), None).unwrap()
    }

    #[test]
    fn enabled_rates_at_a_state() {
        let m = model(CLIENT_SERVER);
        let s = CtmcState { vals: alloc::vec![0.0, 100.0, 2.0, 0.0], time: 0.0 };
        let en = m.enabled_stochastic(&s).unwrap();
        let names: Vec<&str> = en.iter().map(|(i, _)| m.action_name(*i)).collect();
        assert_eq!(names, ["think", "breakdown"]);
        assert!((en[0].1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn timed_activation_schedule() {
        let m = model(
            "var K : environment init 0; var B : discrete init 1;
             agent a { fix: [time >= K && B >= 1] immediate weight 1 -> { B = 0; }; }",
        );
        let k = m.var_index("K").unwrap();
        let mut s = CtmcState { vals: alloc::vec![0.0, 1.0], time: 5.0 };
        s.vals[k] = 7.3;
        assert_eq!(m.next_timed_activation(&s).unwrap(), Some(7.3));
        s.vals[k] = 4.0;
        assert_eq!(m.next_timed_activation(&s).unwrap(), Some(5.0));
        s.vals[1] = 0.0;
        assert_eq!(m.next_timed_activation(&s).unwrap(), None);
    }

    #[test]
    fn weights_select_proportionally() {
        let m = model(
            "var Z : discrete int init 0;
             agent a {
               d1: [Z == 0] immediate weight 99 -> { Z = 1; };
               d2: [Z == 0] immediate weight 1 -> { Z = -1; };
             }",
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let mut ones = 0;
        for _ in 0..n {
            let mut s = CtmcState { vals: alloc::vec![0.0], time: 0.0 };
            let ev = m.resolve_instantaneous(&mut s, &mut rng, 1).unwrap();
            assert_eq!(ev.len(), 1);
            ones += (s.vals[0] == 1.0) as u32;
        }
        let p = ones as f64 / n as f64;
        assert!((p - 0.99).abs() < 4.0 * (0.99f64 * 0.01 / n as f64).sqrt(), "{p}");
    }

    #[test]
    fn looping_instantaneous_actions_hit_the_chain_limit() {
        let m = model(
            "var X : discrete init 1;
             agent a {
               down: [X >= 1] immediate weight 1 -> { X = 0; };
               up: [X <= 0] immediate weight 1 -> { X = 1; };
             }",
        );
        let mut s = CtmcState { vals: alloc::vec![1.0], time: 0.0 };
        let e = m.resolve_instantaneous(&mut s, &mut ChaCha8Rng::seed_from_u64(0), 10).unwrap_err();
        assert!(matches!(e, CtmcError::ChainLimitExceeded { limit: 10, .. }));
    }

    #[test]
    fn no_rate_runs_to_horizon() {
        let m = model("var X : discrete init 0; agent a { go: [X > 0] rate 1 -> { X -= 1; }; }");
        let t = m.simulate(&CtmcOptions::new(10.0), &mut ChaCha8Rng::seed_from_u64(0), &mut ()).unwrap();
        assert_eq!(t.n_events, 0);
        assert_eq!(t.final_state.time, 10.0);
    }

    #[test]
    fn negative_population_is_a_domain_violation() {
        let m = model("var X : discrete init 0; agent a { go: rate 1 -> { X -= 1; }; }");
        let e = m.simulate(&CtmcOptions::new(10.0), &mut ChaCha8Rng::seed_from_u64(0), &mut ()).unwrap_err();
        assert!(matches!(e, CtmcError::DomainViolation { ref action, .. } if action == "go"), "{e}");
    }

    #[test]
    fn negative_rates_are_clamped_and_counted() {
        let m = model("var X : discrete init 3; agent a { go: rate X - 5 -> { X += 1; }; }");
        let t = m.simulate(&CtmcOptions::new(1.0), &mut ChaCha8Rng::seed_from_u64(0), &mut ()).unwrap();
        assert!(t.clamped_rates > 0);
    }

    #[test]
    fn conservation_and_determinism() {
        let p = parse_model(CLIENT_SERVER).unwrap();
        let m = CtmcModel::new(&p, None).unwrap();
        let mut opts = CtmcOptions::new(200.0);
        opts.record = Record::Dense;
        let run = |seed| m.simulate(&opts, &mut ChaCha8Rng::seed_from_u64(seed), &mut ()).unwrap();
        let a = run(11);
        assert!(a.n_events > 100);
        let mut s = a.initial.clone();
        let mut last = 0.0;
        for e in &a.events {
            assert!(e.time >= last);
            last = e.time;
            assert_eq!(e.pre.as_ref().unwrap(), &s);
            for &(i, v) in &e.changes {
                s[i as usize] = v;
            }
            assert_eq!(s[0] + s[1], 100.0);
            assert_eq!(s[2] + s[3], 2.0);
        }
        assert_eq!(s, a.final_state.vals);
        assert_eq!(a, run(11));
        assert_ne!(a.events, run(12).events);
    }

    #[test]
    fn birth_death_stationary_law() {
        // one unit switching on at rate 1 and off at rate 2
        let m = model(
            "var X : discrete init 0;
             agent a { on: [X <= 0] rate 1 -> { X = 1; }; off: [X >= 1] rate 2 -> { X = 0; }; }",
        );
        let mut opts = CtmcOptions::new(f64::INFINITY);
        opts.record = Record::Changes;
        opts.max_events = 200_000;
        let t = m.simulate(&opts, &mut ChaCha8Rng::seed_from_u64(5), &mut ()).unwrap();
        let mut time_off = 0.0;
        let mut last = 0.0;
        let mut x = 0.0;
        for e in &t.events {
            if x == 0.0 {
                time_off += e.time - last;
            }
            last = e.time;
            x = e.changes[0].1;
        }
        let p0 = time_off / last;
        assert!((p0 - 2.0 / 3.0).abs() < 0.01, "{p0}");
    }

    #[test]
    fn grid_observations_and_stop() {
        let m = model("var X : discrete init 0; agent a { go: rate 1 -> { X += 1; }; }");
        let mut opts = CtmcOptions::new(100.0);
        opts.grid = alloc::vec![0.0, 1.0, 2.0];
        opts.stop = Some(Guard::atom(Expr::sub(Expr::var("X"), Expr::c(5.0))));
        let t = m.simulate(&opts, &mut ChaCha8Rng::seed_from_u64(1), &mut ()).unwrap();
        assert_eq!(t.observations.len(), 3);
        assert_eq!(t.observations[0], [0.0]);
        assert_eq!(t.final_state.vals, [5.0]);
        assert_eq!(t.stopped_at, Some(t.final_state.time));
    }

    use crate::expr::Expr;
}
