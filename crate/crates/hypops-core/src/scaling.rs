//! Numeric scaling checks: how rates, guards and resets of each action
//! behave as the system size grows.
//!
//! Every action is evaluated at random states (continuous variables in
//! normalized units, scaled back by each `N` of the grid). The slope of
//! `log rate` against `log N` gives the order of the rate; the differences
//! between successive normalized values give a convergence residual.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::expr::{CExpr, CRandom, Ctx, Slot};
use crate::model::{
    flatten, split_timed_guard, Action, ActionClass, Program, UpdateRhs, VarKind,
};

pub const DEFAULT_SIZES: [f64; 4] = [1e2, 1e3, 1e4, 1e5];
pub const DEFAULT_SAMPLES: usize = 64;

/// Slope tolerance around the expected order (1 for flows, 0 for jumps).
const SLOPE_TOL: f64 = 0.1;
/// Relative residual above which a normalized quantity is not converging.
const RESIDUAL_TOL: f64 = 1e-2;
/// Below this the residual is rounding noise: the rate is density dependent.
const EXACT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuardClass {
    /// No guard.
    None,
    /// Atoms over discrete and environment variables only.
    Discrete,
    /// Some atom reads a continuous variable.
    Continuous,
    /// A `time >= h0` guard.
    Timed,
}

impl GuardClass {
    pub fn as_str(self) -> &'static str {
        match self {
            GuardClass::None => "none",
            GuardClass::Discrete => "discrete",
            GuardClass::Continuous => "continuous",
            GuardClass::Timed => "timed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Verdict {
    Pass,
    Warn,
    Fail,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Warn => "warn",
            Verdict::Fail => "fail",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionScaling {
    pub action: String,
    pub class: ActionClass,
    pub instantaneous: bool,
    /// Fitted exponent of the raw rate (weight for instantaneous actions).
    pub slope: f64,
    pub rate_residual: f64,
    pub guard_residual: f64,
    pub reset_residual: f64,
    pub guard_class: GuardClass,
    pub verdict: Verdict,
    pub rule: &'static str,
    pub advice: String,
    pub suggested_class: ActionClass,
    /// Sample points skipped because an expression failed to evaluate.
    pub skipped: usize,
}

impl ActionScaling {
    pub fn residual_max(&self) -> f64 {
        self.rate_residual.max(self.guard_residual).max(self.reset_residual)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub sizes: Vec<f64>,
    pub samples: usize,
    pub actions: Vec<ActionScaling>,
    pub notes: Vec<String>,
}

impl ScalingReport {
    pub fn passed(&self) -> bool {
        self.actions.iter().all(|a| a.verdict != Verdict::Fail)
    }

    pub fn get(&self, action: &str) -> Option<&ActionScaling> {
        self.actions.iter().find(|a| a.action == action)
    }

    /// `action,slope,residual_max,guard_class,verdict,rule`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("action,slope,residual_max,guard_class,verdict,rule\n");
        for a in &self.actions {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                a.action,
                finite(a.slope),
                finite(a.residual_max()),
                a.guard_class.as_str(),
                a.verdict.as_str(),
                a.rule
            ));
        }
        s
    }
}

fn finite(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else if x > 0.0 {
        "1e308".into()
    } else {
        "0".into()
    }
}

impl fmt::Display for ScalingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for a in &self.actions {
            let class = |c: ActionClass| if c == ActionClass::Continuous { "continuous" } else { "discrete" };
            write!(
                f,
                "{:<5} {:<16} slope {:>7.3}  residual {:>9.2e}  guard {:<10} {:<28} suggested {}",
                a.verdict.as_str(),
                a.action,
                a.slope,
                a.residual_max(),
                a.guard_class.as_str(),
                a.rule,
                class(a.suggested_class),
            )?;
            if a.suggested_class != a.class && !a.instantaneous {
                write!(f, " (declared {})", class(a.class))?;
            }
            writeln!(f)?;
            if !a.advice.is_empty() {
                writeln!(f, "      {}", a.advice)?;
            }
        }
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        Ok(())
    }
}

struct Compiled {
    intensity: CExpr,
    /// Atom expressions and whether each reads a continuous variable.
    atoms: Vec<(CExpr, bool)>,
    locals: Vec<CRandom>,
    /// (update expression or distribution, target is continuous)
    updates: Vec<(UpdateKind, bool)>,
}

enum UpdateKind {
    Incr(CExpr),
    Set(CExpr),
    IncrRandom(CRandom),
    SetRandom(CRandom),
}

fn compile(p: &Program, a: &Action, is_cont: &dyn Fn(&str) -> bool) -> Result<Compiled, String> {
    let nv = p.variables.len();
    let r = |n: &str| -> Option<Slot> {
        p.var_index(n)
            .map(Slot::Index)
            .or_else(|| p.param(n).map(Slot::Const))
            .or_else(|| a.reset.locals.iter().position(|(l, _)| l == n).map(|i| Slot::Index(nv + i)))
    };
    let e = |x: &crate::expr::Expr| CExpr::compile(x, &r).map_err(|e| e.to_string());
    let mut atoms = Vec::new();
    a.guard.for_each_atom(&mut |at| {
        let mut cont = false;
        at.expr.for_each_var(&mut |n| cont |= is_cont(n));
        atoms.push((at.expr.clone(), cont));
    });
    let atoms = atoms.into_iter().map(|(x, c)| Ok((e(&x)?, c))).collect::<Result<Vec<_>, String>>()?;
    let locals = a
        .reset
        .locals
        .iter()
        .map(|(_, s)| CRandom::compile(s, &r).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut updates = Vec::new();
    for u in &a.reset.updates {
        let k = match &u.rhs {
            UpdateRhs::IncrementBy(x) => UpdateKind::Incr(e(x)?),
            UpdateRhs::SetTo(x) => UpdateKind::Set(e(x)?),
            UpdateRhs::IncrementByRandom(s) => UpdateKind::IncrRandom(CRandom::compile(s, &r).map_err(|e| e.to_string())?),
            UpdateRhs::SetToRandom(s) => UpdateKind::SetRandom(CRandom::compile(s, &r).map_err(|e| e.to_string())?),
        };
        updates.push((k, is_cont(&u.target)));
    }
    Ok(Compiled { intensity: e(a.intensity())?, atoms, locals, updates })
}

/// Values of the normalized quantities of one action at one state and size.
struct Probe {
    raw_rate: f64,
    rate: f64,
    atoms: Vec<f64>,
    resets: Vec<f64>,
}

fn ctx(vals: &[f64], n: f64) -> Ctx<'_> {
    Ctx { vals, time: 0.0, size: Some(n) }
}

fn probe(c: &Compiled, class: ActionClass, vals: &mut Vec<f64>, nv: usize, n: f64) -> Result<Probe, ()> {
    let raw_rate = c.intensity.eval(&ctx(vals, n)).map_err(|_| ())?.max(0.0);
    let rate = if class == ActionClass::Continuous { raw_rate / n } else { raw_rate };
    let mut atoms = Vec::with_capacity(c.atoms.len());
    for (x, cont) in &c.atoms {
        let v = x.eval(&ctx(vals, n)).map_err(|_| ())?;
        atoms.push(if *cont { v / n } else { v });
    }
    vals.truncate(nv);
    for l in &c.locals {
        let m = l.mean(&ctx(vals, n)).map_err(|_| ())?;
        vals.push(m);
    }
    let mut resets = Vec::with_capacity(c.updates.len());
    for (u, cont) in &c.updates {
        let v = match u {
            UpdateKind::Incr(x) | UpdateKind::Set(x) => x.eval(&ctx(vals, n)).map_err(|_| ())?,
            UpdateKind::IncrRandom(s) | UpdateKind::SetRandom(s) => s.mean(&ctx(vals, n)).map_err(|_| ())?,
        };
        let per_size = *cont && class == ActionClass::Discrete;
        resets.push(if per_size { v / n } else { v });
    }
    vals.truncate(nv);
    Ok(Probe { raw_rate, rate, atoms, resets })
}

/// Least-squares slope of `ys` against `xs`.
fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Relative difference between the values at the two largest sizes.
struct Residual {
    diff: f64,
    scale: f64,
}

impl Residual {
    fn new() -> Residual {
        Residual { diff: 0.0, scale: 0.0 }
    }

    fn add(&mut self, prev: f64, last: f64) {
        self.diff = self.diff.max(libm::fabs(last - prev));
        self.scale = self.scale.max(libm::fabs(last)).max(libm::fabs(prev));
    }

    fn value(&self) -> f64 {
        if self.diff == 0.0 {
            0.0
        } else {
            self.diff / self.scale.max(1e-12)
        }
    }
}

fn guard_class(p: &Program, a: &Action) -> GuardClass {
    if a.guard.is_true() {
        return GuardClass::None;
    }
    if a.is_instantaneous() && a.guard.uses_time() {
        return GuardClass::Timed;
    }
    let mut cont = false;
    a.guard.for_each_var(&mut |n| cont |= p.var(n).is_some_and(|v| v.kind == VarKind::Continuous));
    if cont {
        GuardClass::Continuous
    } else {
        GuardClass::Discrete
    }
}

/// Continuous variables read by the intensity.
fn continuous_reads(p: &Program, a: &Action) -> usize {
    let mut names: Vec<String> = Vec::new();
    a.intensity().for_each_var(&mut |n| {
        if p.var(n).is_some_and(|v| v.kind == VarKind::Continuous) && !names.iter().any(|m| m == n) {
            names.push(n.to_string());
        }
    });
    names.len()
}

/// True if the reset could be a continuous transition: constant or random
/// increments of continuous variables only, no local draws.
fn flow_compatible(p: &Program, a: &Action) -> bool {
    a.reset.locals.is_empty()
        && a.reset.updates.iter().all(|u| {
            let cont = p.var(&u.target).is_some_and(|v| v.kind == VarKind::Continuous);
            let mut param_only = true;
            let mut check = |n: &str| param_only &= p.param(n).is_some();
            match &u.rhs {
                UpdateRhs::IncrementBy(e) => e.for_each_var(&mut check),
                UpdateRhs::IncrementByRandom(s) => s.for_each_var(&mut check),
                _ => return false,
            }
            cont && param_only
        })
}

fn sample_state<R: Rng + ?Sized>(p: &Program, rng: &mut R) -> Vec<f64> {
    p.variables
        .iter()
        .map(|v| {
            let (lo, hi) = v.sample_range();
            let u: f64 = rng.random();
            match v.kind {
                VarKind::Discrete => libm::floor(lo + u * (hi - lo + 1.0)).min(hi),
                _ => lo + u * (hi - lo),
            }
        })
        .collect()
}

/// Evaluates every action of `p` over the size grid. Non-flat programs are
/// flattened first. Findings are report entries, never errors.
pub fn check_scalings<R: Rng + ?Sized>(p: &Program, sizes: &[f64], samples: usize, rng: &mut R) -> ScalingReport {
    let p = flatten(p);
    let mut sizes: Vec<f64> = sizes.iter().copied().filter(|n| *n > 0.0 && n.is_finite()).collect();
    sizes.sort_by(f64::total_cmp);
    sizes.dedup();
    let mut report = ScalingReport { sizes: sizes.clone(), samples, actions: Vec::new(), notes: Vec::new() };
    if sizes.len() < 2 {
        report.notes.push("need at least two distinct sizes; nothing checked".into());
        return report;
    }
    let nv = p.variables.len();
    let is_cont = |n: &str| p.var(n).is_some_and(|v| v.kind == VarKind::Continuous);
    let points: Vec<Vec<f64>> = (0..samples).map(|_| sample_state(&p, rng)).collect();
    let log_n: Vec<f64> = sizes.iter().map(|n| libm::log(*n)).collect();

    for (_, a) in p.actions() {
        let gc = guard_class(&p, a);
        let mut entry = ActionScaling {
            action: a.name.clone(),
            class: a.class,
            instantaneous: a.is_instantaneous(),
            slope: 0.0,
            rate_residual: 0.0,
            guard_residual: 0.0,
            reset_residual: 0.0,
            guard_class: gc,
            verdict: Verdict::Pass,
            rule: "",
            advice: String::new(),
            suggested_class: a.class,
            skipped: 0,
        };
        let c = match compile(&p, a, &is_cont) {
            Ok(c) => c,
            Err(e) => {
                entry.verdict = Verdict::Fail;
                entry.rule = "unresolved-expression";
                entry.advice = e;
                report.actions.push(entry);
                continue;
            }
        };
        let (mut rate_res, mut guard_res, mut reset_res) = (Residual::new(), Residual::new(), Residual::new());
        let mut slopes = Vec::new();
        let mut vals = Vec::with_capacity(nv + c.locals.len());
        for x in &points {
            let mut probes = Vec::with_capacity(sizes.len());
            for &n in &sizes {
                vals.clear();
                vals.extend(p.variables.iter().zip(x).map(|(v, x)| if v.kind == VarKind::Continuous { x * n } else { *x }));
                match probe(&c, a.class, &mut vals, nv, n) {
                    Ok(pr) => probes.push(pr),
                    Err(()) => break,
                }
            }
            if probes.len() < sizes.len() {
                entry.skipped += 1;
                continue;
            }
            if probes.iter().all(|pr| pr.raw_rate > 0.0) {
                let ys: Vec<f64> = probes.iter().map(|pr| libm::log(pr.raw_rate)).collect();
                slopes.push(slope(&log_n, &ys));
            }
            let (prev, last) = (&probes[sizes.len() - 2], &probes[sizes.len() - 1]);
            rate_res.add(prev.rate, last.rate);
            for (u, v) in prev.atoms.iter().zip(&last.atoms) {
                guard_res.add(*u, *v);
            }
            for (u, v) in prev.resets.iter().zip(&last.resets) {
                reset_res.add(*u, *v);
            }
        }
        slopes.sort_by(f64::total_cmp);
        entry.slope = if slopes.is_empty() { 0.0 } else { slopes[slopes.len() / 2] };
        entry.rate_residual = rate_res.value();
        entry.guard_residual = guard_res.value();
        entry.reset_residual = reset_res.value();
        let zero_rate = slopes.is_empty() && entry.skipped < samples;
        classify(&p, a, &mut entry, zero_rate);
        if entry.skipped == samples {
            entry.verdict = Verdict::Warn;
            entry.rule = "not-evaluable";
            entry.advice = "every sample state failed to evaluate; declare variable ranges".into();
        }
        report.actions.push(entry);
    }
    report.notes.push("local Lipschitz continuity of the limit rates is an unchecked analytic hypothesis".into());
    report
}

fn classify(p: &Program, a: &Action, e: &mut ActionScaling, zero_rate: bool) {
    let s = e.slope;
    let near = |target: f64| libm::fabs(s - target) <= SLOPE_TOL;
    if a.is_instantaneous() {
        e.suggested_class = ActionClass::Discrete;
        if let Ok(Some((h0, _))) = split_timed_guard(&a.guard) {
            let mut cont = false;
            h0.for_each_var(&mut |n| cont |= p.var(n).is_some_and(|v| v.kind == VarKind::Continuous));
            if cont {
                return set(e, Verdict::Warn, "timed-threshold-reads-continuous", "the time threshold must not depend on continuous variables in the limit");
            }
        }
        if e.guard_residual > RESIDUAL_TOL {
            return set(e, Verdict::Fail, "guard-not-size-compatible", "normalized guard does not converge as N grows");
        }
        if e.reset_residual > RESIDUAL_TOL {
            return set(e, Verdict::Fail, "reset-not-convergent", "normalized reset does not converge as N grows");
        }
        return set(e, Verdict::Pass, "size-compatible-guard", "");
    }
    let flowable = flow_compatible(p, a);
    if zero_rate {
        e.suggested_class = a.class;
        return set(e, Verdict::Warn, "zero-rate", "rate vanished at every sample state");
    }
    if near(1.0) {
        e.suggested_class = if flowable { ActionClass::Continuous } else { ActionClass::Discrete };
    } else if near(0.0) || s < 0.0 {
        e.suggested_class = ActionClass::Discrete;
    } else if s > 1.0 + SLOPE_TOL && flowable {
        e.suggested_class = ActionClass::Continuous;
    } else {
        e.suggested_class = a.class;
    }
    match a.class {
        ActionClass::Continuous => {
            if s > 1.0 + SLOPE_TOL {
                let advice = if continuous_reads(p, a) >= 2 {
                    "rate grows faster than N; keep one variable discrete"
                } else {
                    "rate grows faster than N; rescale the rate"
                };
                set(e, Verdict::Fail, "flow-rate-superlinear", advice)
            } else if s < 1.0 - SLOPE_TOL {
                set(e, Verdict::Fail, "flow-rate-sublinear", "rate is o(N); declare the action discrete")
            } else if e.rate_residual > RESIDUAL_TOL {
                set(e, Verdict::Fail, "flow-rate-not-convergent", "rate/N does not converge uniformly on the sample box")
            } else if e.guard_residual > RESIDUAL_TOL {
                set(e, Verdict::Fail, "guard-not-size-compatible", "normalized guard does not converge as N grows")
            } else if e.reset_residual > RESIDUAL_TOL {
                set(e, Verdict::Fail, "increment-not-convergent", "increments must not depend on N")
            } else if e.rate_residual < EXACT_TOL {
                set(e, Verdict::Pass, "density-dependent-flow", "")
            } else {
                set(e, Verdict::Pass, "convergent-flow", "")
            }
        }
        ActionClass::Discrete => {
            if s > SLOPE_TOL {
                let advice = if near(1.0) && flowable {
                    "rate is O(N); declare the action continuous"
                } else {
                    "rate grows with N; a discrete transition needs an O(1) rate"
                };
                set(e, Verdict::Fail, "fast-discrete-rate", advice)
            } else if e.rate_residual > RESIDUAL_TOL {
                set(e, Verdict::Fail, "jump-rate-not-convergent", "rate does not converge uniformly on the sample box")
            } else if e.guard_residual > RESIDUAL_TOL {
                set(e, Verdict::Fail, "guard-not-size-compatible", "normalized guard does not converge as N grows")
            } else if e.reset_residual > RESIDUAL_TOL {
                set(e, Verdict::Fail, "reset-not-convergent", "normalized reset does not converge as N grows")
            } else if s < -SLOPE_TOL {
                set(e, Verdict::Warn, "vanishing-jump-rate", "rate tends to 0; the limit never fires this action")
            } else {
                set(e, Verdict::Pass, "bounded-jump-rate", "")
            }
        }
    }
}

fn set(e: &mut ActionScaling, v: Verdict, rule: &'static str, advice: &str) {
    e.verdict = v;
    e.rule = rule;
    e.advice = advice.into();
}
