//! Transition-driven stochastic hybrid automata built from a program, and
//! their assembly into an executable PDMP model.
//!
//! Continuous-class actions become flows (constant increment times a guarded
//! rate), discrete stochastic actions become stochastic jumps and
//! instantaneous actions become boundary jumps. Components contribute
//! multisets of transitions that are joined without merging duplicates.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use thiserror::Error;

use crate::exec::CReset;
use crate::expr::{fmt_num, AtomOverride, CExpr, CGuard, CRandom, Ctx, EvalError, Expr, Guard, RandomSpec, Slot};
use crate::model::{
    flatten, normalize, validate, ActionClass, ActionKind, ModelErrors, NormMode, NormalizeError, Normalization,
    Program, Reset, UpdateRhs, VarKind,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TdshaError {
    #[error(transparent)]
    Model(#[from] ModelErrors),
    #[error(transparent)]
    Normalize(#[from] NormalizeError),
    #[error("{context}: {source}")]
    Eval { context: String, source: EvalError },
    #[error("flow `{action}` changes discrete variable `{var}`")]
    IncrementOnDiscrete { action: String, var: String },
    #[error("cannot compose automata over different variables")]
    Incompatible,
}

fn eval_err(context: String) -> impl Fn(EvalError) -> TdshaError {
    move |source| TdshaError::Eval { context: context.clone(), source }
}

/// A continuous transition: `d/dt y += increments * 1{guard} * rate`.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub name: String,
    pub component: String,
    pub guard: Guard,
    pub rate: Expr,
    /// Expected increment per variable (zero entries dropped).
    pub increments: Vec<(String, f64)>,
    /// Random increments as declared, kept for reporting.
    pub random: Vec<(String, RandomSpec)>,
}

/// A stochastic (rate) or instantaneous (weight) transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Jump {
    pub name: String,
    pub component: String,
    pub guard: Guard,
    pub intensity: Expr,
    pub reset: Reset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tdsha {
    /// The flat, normalized program the transitions refer to.
    pub program: Program,
    pub mode: NormMode,
    /// Discrete variables (the mode).
    pub discrete: Vec<String>,
    /// Continuous variables, environment variables included.
    pub continuous: Vec<String>,
    pub tc: Vec<Flow>,
    pub ts: Vec<Jump>,
    pub td: Vec<Jump>,
}

/// Flattens, validates and normalizes `p` (unless already normalized) and
/// builds the composed automaton.
pub fn build_tdsha(p: &Program, mode: NormMode) -> Result<Tdsha, TdshaError> {
    let flat = flatten(p);
    validate(&flat)?;
    let prog = match flat.normalization {
        Normalization::Raw => normalize(&flat, mode)?,
        _ => flat,
    };
    let mut out: Option<Tdsha> = None;
    for c in 0..prog.components.len() {
        let t = component_tdsha(&prog, c, mode)?;
        out = Some(match out {
            None => t,
            Some(acc) => compose(&acc, &t)?,
        });
    }
    out.ok_or(TdshaError::Model(ModelErrors(vec![crate::model::ModelError::EmptyModel])))
}

/// The automaton of a single component of a normalized program.
pub fn component_tdsha(p: &Program, component: usize, mode: NormMode) -> Result<Tdsha, TdshaError> {
    let size = match mode {
        NormMode::AtSize(n) => Some(n),
        NormMode::Limit => None,
    };
    let comp = &p.components[component];
    let mut tc = Vec::new();
    let mut ts = Vec::new();
    let mut td = Vec::new();
    for a in &comp.actions {
        match (&a.kind, a.class) {
            (ActionKind::Stochastic { rate }, ActionClass::Continuous) => {
                tc.push(flow_of(p, &comp.name, &a.name, &a.guard, rate, &a.reset, size)?);
            }
            (ActionKind::Stochastic { rate }, ActionClass::Discrete) => ts.push(Jump {
                name: a.name.clone(),
                component: comp.name.clone(),
                guard: a.guard.clone(),
                intensity: rate.clone(),
                reset: a.reset.clone(),
            }),
            (ActionKind::Instantaneous { weight }, _) => td.push(Jump {
                name: a.name.clone(),
                component: comp.name.clone(),
                guard: a.guard.clone(),
                intensity: weight.clone(),
                reset: a.reset.clone(),
            }),
        }
    }
    let (discrete, continuous) = split_vars(p);
    Ok(Tdsha { program: p.clone(), mode, discrete, continuous, tc, ts, td })
}

fn split_vars(p: &Program) -> (Vec<String>, Vec<String>) {
    let mut d = Vec::new();
    let mut c = Vec::new();
    for v in &p.variables {
        if v.kind == VarKind::Discrete {
            d.push(v.name.clone());
        } else {
            c.push(v.name.clone());
        }
    }
    (d, c)
}

fn flow_of(
    p: &Program,
    component: &str,
    name: &str,
    guard: &Guard,
    rate: &Expr,
    reset: &Reset,
    size: Option<f64>,
) -> Result<Flow, TdshaError> {
    let err = || eval_err(format!("flow `{name}`"));
    // Locals resolve to their means; state variables are not allowed.
    let mut means: Vec<(String, f64)> = Vec::new();
    let ctx = Ctx { vals: &[], time: 0.0, size };
    for (l, s) in &reset.locals {
        let r = |n: &str| lookup(p, &means, n);
        let m = CRandom::compile(s, &r).map_err(err())?.mean(&ctx).map_err(err())?;
        means.push((l.clone(), m));
    }
    let r = |n: &str| lookup(p, &means, n);
    let mut increments = Vec::new();
    let mut random = Vec::new();
    for u in &reset.updates {
        if p.var(&u.target).is_some_and(|v| v.kind == VarKind::Discrete) {
            return Err(TdshaError::IncrementOnDiscrete { action: name.into(), var: u.target.clone() });
        }
        let nu = match &u.rhs {
            UpdateRhs::IncrementBy(e) => {
                for v in e.vars() {
                    if let Some((_, s)) = reset.locals.iter().find(|(l, _)| *l == v) {
                        random.push((u.target.clone(), s.clone()));
                    }
                }
                CExpr::compile(e, &r).map_err(err())?.eval(&ctx).map_err(err())?
            }
            UpdateRhs::IncrementByRandom(s) => {
                random.push((u.target.clone(), s.clone()));
                CRandom::compile(s, &r).map_err(err())?.mean(&ctx).map_err(err())?
            }
            _ => return Err(TdshaError::Eval { context: format!("flow `{name}`"), source: EvalError::NoClosedForm }),
        };
        if nu != 0.0 {
            increments.push((u.target.clone(), nu));
        }
    }
    Ok(Flow {
        name: name.into(),
        component: component.into(),
        guard: guard.clone(),
        rate: rate.clone(),
        increments,
        random,
    })
}

fn lookup(p: &Program, locals: &[(String, f64)], n: &str) -> Option<Slot> {
    locals
        .iter()
        .find(|(l, _)| l == n)
        .map(|(_, v)| Slot::Const(*v))
        .or_else(|| p.param(n).map(Slot::Const))
}

/// Multiset union. Both automata must range over the same variables.
pub fn compose(a: &Tdsha, b: &Tdsha) -> Result<Tdsha, TdshaError> {
    if a.program.variables != b.program.variables || a.mode != b.mode {
        return Err(TdshaError::Incompatible);
    }
    let mut out = a.clone();
    out.tc.extend(b.tc.iter().cloned());
    out.ts.extend(b.ts.iter().cloned());
    out.td.extend(b.td.iter().cloned());
    Ok(out)
}

impl fmt::Display for Tdsha {
    /// One line per transition: kind, name, guard, effect, rate or weight.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for fl in &self.tc {
            write!(f, "flow {}.{} [{}] (", fl.component, fl.name, fl.guard)?;
            for (i, (v, nu)) in fl.increments.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                write!(f, "{v}: {}", fmt_num(*nu))?;
            }
            writeln!(f, ") rate {}", fl.rate)?;
        }
        for (kind, word, js) in [("stochastic", "rate", &self.ts), ("instantaneous", "weight", &self.td)] {
            for j in js {
                write!(f, "{kind} {}.{} [{}] {{", j.component, j.name, j.guard)?;
                for (l, s) in &j.reset.locals {
                    write!(f, " let {l} = sample {s};")?;
                }
                for u in &j.reset.updates {
                    match &u.rhs {
                        UpdateRhs::IncrementBy(e) => write!(f, " {} += {e};", u.target)?,
                        UpdateRhs::SetTo(e) => write!(f, " {} = {e};", u.target)?,
                        UpdateRhs::IncrementByRandom(s) => write!(f, " {} += sample {s};", u.target)?,
                        UpdateRhs::SetToRandom(s) => write!(f, " {} = sample {s};", u.target)?,
                    }
                }
                writeln!(f, " }} {word} {}", j.intensity)?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Chain-freeness (sampled)

#[derive(Debug, Clone, PartialEq)]
pub enum ChainVerdict {
    NoWitnessFound,
    Violation { from: String, to: String, witness: Vec<f64>, post: Vec<f64> },
}

/// Semi-check of chain-freeness: samples states satisfying each
/// instantaneous guard, applies its reset and looks for a post-state that
/// lies in the closure of some instantaneous guard. Finding nothing proves
/// nothing.
pub fn check_chain_free_sampled<R: Rng + ?Sized>(
    t: &Tdsha,
    budget: usize,
    rng: &mut R,
) -> Result<ChainVerdict, TdshaError> {
    let p = &t.program;
    let nv = p.variables.len();
    let size = match t.mode {
        NormMode::AtSize(n) => Some(n),
        NormMode::Limit => None,
    };
    let r = crate::exec::resolver(p);
    let mut next_id = 0;
    let mut compiled = Vec::new();
    for j in &t.td {
        let err = eval_err(format!("action `{}`", j.name));
        let g = CGuard::compile(&j.guard, &r, &mut next_id).map_err(&err)?;
        let reset = CReset::compile(p, &j.reset).map_err(&err)?;
        compiled.push((g, reset));
    }
    let nlocals = t.td.iter().map(|j| j.reset.locals.len()).max().unwrap_or(0);
    let ranges: Vec<(f64, f64)> = p.variables.iter().map(|v| v.sample_range()).collect();
    let mut vals = vec![0.0; nv + nlocals];
    let mut scratch = Vec::new();
    for (i, (g, reset)) in compiled.iter().enumerate() {
        let mut found = 0;
        let mut tries = 0;
        while found < budget && tries < budget * 50 {
            tries += 1;
            let time = rng.random::<f64>() * 10.0;
            for (k, (lo, hi)) in ranges.iter().enumerate() {
                let x = lo + (hi - lo) * rng.random::<f64>();
                let discrete = p.variables[k].kind != VarKind::Continuous || p.variables[k].domain != crate::model::Domain::Real;
                vals[k] = if discrete { libm::round(x) } else { x };
            }
            // Half of the probes sit on the boundary of an atom of the guard.
            if rng.random::<bool>() {
                snap_to_boundary(g, &mut vals, nv, time, size, rng);
            }
            let ctx = Ctx { vals: &vals, time, size };
            match g.holds(&ctx) {
                Ok(true) => {}
                _ => continue,
            }
            found += 1;
            let pre = vals[..nv].to_vec();
            if reset.apply(&mut vals, nv, time, size, rng, &mut scratch).is_err() {
                continue;
            }
            for (k, (h, _)) in compiled.iter().enumerate() {
                let ctx = Ctx { vals: &vals, time, size };
                if let Ok(true) = h.holds(&ctx) {
                    return Ok(ChainVerdict::Violation {
                        from: t.td[i].name.clone(),
                        to: t.td[k].name.clone(),
                        witness: pre,
                        post: vals[..nv].to_vec(),
                    });
                }
            }
        }
    }
    Ok(ChainVerdict::NoWitnessFound)
}

/// Moves one variable read by a random atom of `g` so that the atom is
/// (approximately) zero; only atoms linear in that variable are solved
/// exactly, others are left alone.
fn snap_to_boundary<R: Rng + ?Sized>(g: &CGuard, vals: &mut [f64], nv: usize, time: f64, size: Option<f64>, rng: &mut R) {
    let mut atoms: Vec<&CExpr> = Vec::new();
    g.for_each_atom(&mut |_, e, _| atoms.push(e));
    if atoms.is_empty() {
        return;
    }
    let e = atoms[rng.random_range(0..atoms.len())];
    let mut slots = Vec::new();
    e.for_each_slot(&mut |s| {
        if s < nv && !slots.contains(&s) {
            slots.push(s)
        }
    });
    if slots.is_empty() {
        return;
    }
    let s = slots[rng.random_range(0..slots.len())];
    let f = |x: f64, vals: &mut [f64]| {
        vals[s] = x;
        e.eval(&Ctx { vals, time, size }).ok()
    };
    let x0 = vals[s];
    let (Some(a), Some(b)) = (f(x0, vals), f(x0 + 1.0, vals)) else {
        vals[s] = x0;
        return;
    };
    if b != a {
        let root = x0 - a / (b - a);
        vals[s] = root;
        if f(root, vals).is_none_or(|v| libm::fabs(v) > 1e-9 * (1.0 + libm::fabs(a))) {
            vals[s] = x0;
        }
    } else {
        vals[s] = x0;
    }
}

// ---------------------------------------------------------------------------
// PDMP assembly

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CFlow {
    pub guard: CGuard,
    pub rate: CExpr,
    /// (coordinate, increment)
    pub incr: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CJump {
    pub guard: CGuard,
    pub intensity: CExpr,
    pub reset: CReset,
    /// Atoms that cannot change along the flow; activations treat them as
    /// fixed truth values.
    pub fixed: Vec<(u32, CExpr, bool)>,
}

/// A discontinuity surface `h = 0` of guarded flows or guarded stochastic
/// rates. Member atoms are positive multiples `o * h` of the surface.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub expr: CExpr,
    pub label: String,
    /// True when a flow guard reads it (Filippov machinery), false when only
    /// stochastic guards do (rate switch only).
    pub pws: bool,
    pub members: Vec<(u32, f64)>,
}

/// Current side of every surface: `true` for `h > 0`.
pub type Signature = Vec<bool>;

pub(crate) struct SigOverride<'a> {
    pub atom_surface: &'a [Option<(usize, f64)>],
    pub sig: &'a [bool],
}

impl AtomOverride for SigOverride<'_> {
    #[inline]
    fn atom(&self, id: u32) -> Option<bool> {
        match self.atom_surface.get(id as usize) {
            Some(Some((s, o))) => Some(if *o > 0.0 { self.sig[*s] } else { !self.sig[*s] }),
            _ => None,
        }
    }
}

/// Executable PDMP: compiled flows, rates, kernels and surfaces.
///
/// Values are laid out as in the program (normalized units) followed by
/// scratch slots for reset locals. The ODE coordinates are the variables
/// that some flow moves, then the time monitor if present.
#[derive(Debug, Clone)]
pub struct PdmpModel {
    pub tdsha: Tdsha,
    pub size: Option<f64>,
    pub nv: usize,
    pub nlocals: usize,
    /// Variable index of each flowing coordinate.
    pub flowing: Vec<usize>,
    pub time_monitor: bool,
    pub(crate) flows: Vec<CFlow>,
    pub(crate) stoch: Vec<CJump>,
    pub(crate) inst: Vec<CJump>,
    pub surfaces: Vec<Surface>,
    pub(crate) atom_surface: Vec<Option<(usize, f64)>>,
    /// Report notes (guards on continuous variables routed to surfaces).
    pub notes: Vec<String>,
}

impl PdmpModel {
    /// Number of ODE coordinates excluding the cumulative rate.
    pub fn ncoords(&self) -> usize {
        self.flowing.len() + usize::from(self.time_monitor)
    }

    pub fn time_coord(&self) -> Option<usize> {
        self.time_monitor.then_some(self.flowing.len())
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.tdsha.program.var_index(name)
    }

    pub fn stochastic_names(&self) -> impl Iterator<Item = &str> {
        self.tdsha.ts.iter().map(|j| j.name.as_str())
    }

    pub fn instantaneous_names(&self) -> impl Iterator<Item = &str> {
        self.tdsha.td.iter().map(|j| j.name.as_str())
    }

    /// Initial values (normalized) followed by zeroed scratch slots.
    pub fn initial_values(&self) -> Result<Vec<f64>, TdshaError> {
        let mut v = self.tdsha.program.initial_state(self.size).map_err(|e| TdshaError::Model(ModelErrors(vec![e])))?;
        v.resize(self.nv + self.nlocals, 0.0);
        Ok(v)
    }

    fn ctx<'a>(&self, vals: &'a [f64], time: f64) -> Ctx<'a> {
        Ctx { vals, time, size: self.size }
    }

    /// Vector field over the coordinates, with surface atoms fixed by `sig`.
    /// The time coordinate (if any) gets 1.
    pub fn drift(&self, vals: &[f64], time: f64, sig: &[bool], out: &mut [f64]) -> Result<(), EvalError> {
        out.iter_mut().for_each(|x| *x = 0.0);
        let ov = SigOverride { atom_surface: &self.atom_surface, sig };
        let c = self.ctx(vals, time);
        for f in &self.flows {
            if !f.guard.holds_with(&c, &ov)? {
                continue;
            }
            let r = f.rate.eval(&c)?;
            for &(k, nu) in &f.incr {
                out[k] += nu * r;
            }
        }
        if let Some(k) = self.time_coord() {
            out[k] = 1.0;
        }
        Ok(())
    }

    /// Active stochastic rates (negative values clamped to 0) and their sum.
    pub fn stochastic_rates(&self, vals: &[f64], time: f64, sig: &[bool], out: &mut Vec<f64>) -> Result<f64, EvalError> {
        out.clear();
        let ov = SigOverride { atom_surface: &self.atom_surface, sig };
        let c = self.ctx(vals, time);
        let mut total = 0.0;
        for j in &self.stoch {
            let r = if j.guard.holds_with(&c, &ov)? { j.intensity.eval(&c)?.max(0.0) } else { 0.0 };
            total += r;
            out.push(r);
        }
        Ok(total)
    }

    pub fn total_rate(&self, vals: &[f64], time: f64, sig: &[bool]) -> Result<f64, EvalError> {
        let ov = SigOverride { atom_surface: &self.atom_surface, sig };
        let c = self.ctx(vals, time);
        let mut total = 0.0;
        for j in &self.stoch {
            if j.guard.holds_with(&c, &ov)? {
                total += j.intensity.eval(&c)?.max(0.0);
            }
        }
        Ok(total)
    }

    /// Activation value of instantaneous transition `i`: `>= 0` inside the
    /// (closed) guard. Static atoms count as `+inf`/`-inf`.
    pub fn activation(&self, i: usize, vals: &[f64], time: f64) -> Result<f64, EvalError> {
        let j = &self.inst[i];
        let c = self.ctx(vals, time);
        let fixed = |id: u32| {
            j.fixed.iter().find(|(k, _, _)| *k == id).map(|(_, e, strict)| {
                let v = e.eval(&c).unwrap_or(f64::NAN);
                if *strict {
                    v > 0.0
                } else {
                    v >= 0.0
                }
            })
        };
        j.guard.activation(&c, &fixed)
    }

    pub fn inst_count(&self) -> usize {
        self.inst.len()
    }

    pub fn stoch_count(&self) -> usize {
        self.stoch.len()
    }

    pub fn surface_value(&self, s: usize, vals: &[f64], time: f64) -> Result<f64, EvalError> {
        self.surfaces[s].expr.eval(&self.ctx(vals, time))
    }

    /// Side of every surface at a state off all surfaces. Points exactly on
    /// a surface get `false`; the simulator resolves those separately.
    pub fn signature(&self, vals: &[f64], time: f64) -> Result<Signature, EvalError> {
        self.surfaces.iter().map(|s| Ok(s.expr.eval(&self.ctx(vals, time))? > 0.0)).collect()
    }

    /// Whether instantaneous guard `i` holds (closed form, all atoms live).
    pub fn inst_holds(&self, i: usize, vals: &[f64], time: f64) -> Result<bool, EvalError> {
        self.inst[i].guard.holds(&self.ctx(vals, time))
    }

    pub fn inst_weight(&self, i: usize, vals: &[f64], time: f64) -> Result<f64, EvalError> {
        self.inst[i].intensity.eval(&self.ctx(vals, time))
    }

    pub(crate) fn apply_reset<R: Rng + ?Sized>(
        &self,
        instantaneous: bool,
        i: usize,
        vals: &mut [f64],
        time: f64,
        rng: &mut R,
        scratch: &mut Vec<(usize, f64)>,
    ) -> Result<(), EvalError> {
        let j = if instantaneous { &self.inst[i] } else { &self.stoch[i] };
        j.reset.apply(vals, self.nv, time, self.size, rng, scratch)
    }
}

/// Compiles the automaton into an executable model.
pub fn assemble_pdmp(t: &Tdsha) -> Result<PdmpModel, TdshaError> {
    let p = &t.program;
    let nv = p.variables.len();
    let size = match t.mode {
        NormMode::AtSize(n) => Some(n),
        NormMode::Limit => None,
    };
    let r = crate::exec::resolver(p);

    let mut flowing: Vec<usize> = Vec::new();
    for f in &t.tc {
        for (v, _) in &f.increments {
            let i = p.var_index(v).ok_or_else(|| TdshaError::Eval {
                context: format!("flow `{}`", f.name),
                source: EvalError::UnboundVariable(v.clone()),
            })?;
            if p.variables[i].kind == VarKind::Discrete {
                return Err(TdshaError::IncrementOnDiscrete { action: f.name.clone(), var: v.clone() });
            }
            if !flowing.contains(&i) {
                flowing.push(i);
            }
        }
    }
    flowing.sort_unstable();
    let time_monitor = t.tc.iter().any(|f| f.guard.uses_time() || f.rate.uses_time())
        || t.ts.iter().chain(&t.td).any(|j| j.guard.uses_time() || j.intensity.uses_time() || j.reset.uses_time());

    let mut next_id = 0u32;
    let mut flows = Vec::new();
    for f in &t.tc {
        let err = eval_err(format!("flow `{}`", f.name));
        let guard = CGuard::compile(&f.guard, &r, &mut next_id).map_err(&err)?;
        let rate = CExpr::compile(&f.rate, &r).map_err(&err)?;
        let incr = f
            .increments
            .iter()
            .map(|(v, nu)| (flowing.iter().position(|&k| Some(k) == p.var_index(v)).unwrap_or(0), *nu))
            .collect();
        flows.push(CFlow { guard, rate, incr });
    }
    let moves = |e: &CExpr| {
        let mut m = time_monitor && e.uses_time();
        e.for_each_slot(&mut |s| m |= flowing.contains(&s));
        m
    };
    let compile_jumps = |js: &[Jump], next_id: &mut u32| -> Result<Vec<CJump>, TdshaError> {
        let mut out = Vec::new();
        for j in js {
            let err = eval_err(format!("action `{}`", j.name));
            let guard = CGuard::compile(&j.guard, &r, next_id).map_err(&err)?;
            let intensity = CExpr::compile(&j.intensity, &r).map_err(&err)?;
            let reset = CReset::compile(p, &j.reset).map_err(&err)?;
            let mut fixed = Vec::new();
            guard.for_each_atom(&mut |id, e, strict| {
                if !moves(e) {
                    fixed.push((id, e.clone(), strict))
                }
            });
            out.push(CJump { guard, intensity, reset, fixed });
        }
        Ok(out)
    };
    let stoch = compile_jumps(&t.ts, &mut next_id)?;
    let inst = compile_jumps(&t.td, &mut next_id)?;
    let nlocals = t.ts.iter().chain(&t.td).map(|j| j.reset.locals.len()).max().unwrap_or(0);

    // Surfaces: moving atoms of flow guards and of stochastic guards.
    let mut candidates: Vec<(u32, CExpr, bool, String)> = Vec::new();
    for (f, cf) in t.tc.iter().zip(&flows) {
        cf.guard.for_each_atom(&mut |id, e, _| {
            if moves(e) {
                candidates.push((id, e.clone(), true, f.name.clone()));
            }
        });
    }
    for (j, cj) in t.ts.iter().zip(&stoch) {
        cj.guard.for_each_atom(&mut |id, e, _| {
            if moves(e) {
                candidates.push((id, e.clone(), false, j.name.clone()));
            }
        });
    }
    let probes = probe_states(p, size, nv);
    let mut surfaces: Vec<Surface> = Vec::new();
    let mut atom_surface = vec![None; next_id as usize];
    let mut notes = Vec::new();
    for (id, e, pws, owner) in candidates {
        let found = surfaces.iter().position(|s| proportional(&s.expr, &e, &probes, size).is_some());
        let k = match found {
            Some(k) => {
                let o = proportional(&surfaces[k].expr, &e, &probes, size).unwrap_or(1.0);
                surfaces[k].members.push((id, o));
                surfaces[k].pws |= pws;
                k
            }
            None => {
                surfaces.push(Surface { expr: e, label: owner.clone(), pws, members: vec![(id, 1.0)] });
                surfaces.len() - 1
            }
        };
        let o = surfaces[k].members.last().map_or(1.0, |m| m.1);
        atom_surface[id as usize] = Some((k, o));
        notes.push(format!(
            "{} `{owner}` has a guard on continuous variables: {}",
            if pws { "flow" } else { "stochastic transition" },
            if pws { "handled as a discontinuity surface of the vector field" } else { "its rate switches on a surface" }
        ));
    }
    notes.dedup();

    Ok(PdmpModel {
        tdsha: t.clone(),
        size,
        nv,
        nlocals,
        flowing,
        time_monitor,
        flows,
        stoch,
        inst,
        surfaces,
        atom_surface,
        notes,
    })
}

/// Deterministic probe states used to recognize atoms that describe the
/// same surface.
fn probe_states(p: &Program, size: Option<f64>, nv: usize) -> Vec<(Vec<f64>, f64)> {
    let base = p.initial_state(size).unwrap_or_else(|_| vec![0.0; nv]);
    let mut out = Vec::new();
    // A fixed low-discrepancy pattern keeps assembly deterministic.
    for k in 0..8 {
        let vals: Vec<f64> = p
            .variables
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let (lo, hi) = v.sample_range();
                let u = libm::fmod(0.137 + 0.618_033_988_75 * (k as f64 + 1.0) * (i as f64 + 1.0), 1.0);
                if v.kind == VarKind::Discrete { base[i] } else { lo + (hi - lo) * u }
            })
            .collect();
        out.push((vals, 0.5 + 1.3 * k as f64));
    }
    out
}

/// `Some(o)` with `b = o * a`, `o > 0` or `o < 0`, on every probe.
fn proportional(a: &CExpr, b: &CExpr, probes: &[(Vec<f64>, f64)], size: Option<f64>) -> Option<f64> {
    if a == b {
        return Some(1.0);
    }
    let mut ratio: Option<f64> = None;
    for (vals, time) in probes {
        let c = Ctx { vals, time: *time, size };
        let (x, y) = (a.eval(&c).ok()?, b.eval(&c).ok()?);
        let scale = 1.0 + libm::fabs(x) + libm::fabs(y);
        if libm::fabs(x) < 1e-12 * scale {
            if libm::fabs(y) > 1e-12 * scale {
                return None;
            }
            continue;
        }
        let q = y / x;
        match ratio {
            None => ratio = Some(q),
            Some(r) if libm::fabs(q - r) <= 1e-9 * libm::fabs(r) => {}
            Some(_) => return None,
        }
    }
    ratio.filter(|r| *r != 0.0 && r.is_finite())
}

impl Flow {
    pub fn uses_time(&self) -> bool {
        self.guard.uses_time() || self.rate.uses_time()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_model;
    use rand::SeedableRng;

    const CS_HYBRID: &str = "
        param kr = 2; param ks = 0.01; param kt = 0.02; param kb = 0.0005; param kf = 0.001;
        size N = 1000;
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

    fn field(m: &PdmpModel, vals: &[f64]) -> Vec<f64> {
        let sig = m.signature(vals, 0.0).unwrap();
        let mut out = vec![0.0; m.ncoords()];
        m.drift(vals, 0.0, &sig, &mut out).unwrap();
        out
    }

    #[test]
    fn client_server_composition() {
        let p = parse_model(CS_HYBRID).unwrap();
        let t = build_tdsha(&p, NormMode::Limit).unwrap();
        assert_eq!(t.tc.len(), 2);
        assert_eq!(t.ts.len(), 2);
        assert!(t.td.is_empty());
        assert_eq!(t.tc[0].increments, vec![("Xr".into(), -1.0), ("Xt".into(), 1.0)]);
        assert_eq!(t.tc[1].increments, vec![("Xr".into(), 1.0), ("Xt".into(), -1.0)]);
        assert_eq!(t.discrete, vec!["Xi".to_string(), "Xb".into()], "{:?}", t.discrete);
        let m = assemble_pdmp(&t).unwrap();
        assert_eq!(m.flowing, vec![0, 1]);
        assert!(!m.time_monitor);
        // xr = 0.1, xt = 0.9, Xi = 2
        let mut vals = m.initial_values().unwrap();
        vals[0] = 0.1;
        vals[1] = 0.9;
        let f = field(&m, &vals);
        assert!((f[0] - (-0.002)).abs() < 1e-15, "{f:?}");
        assert!((f[1] - 0.002).abs() < 1e-15);
        let listing = format!("{t}");
        assert!(listing.contains("flow client.request"), "{listing}");
        assert!(listing.contains("stochastic server.breakdown"), "{listing}");
    }

    #[test]
    fn at_size_and_limit_fields_agree_for_linear_rates() {
        let p = parse_model(CS_HYBRID).unwrap();
        let lim = assemble_pdmp(&build_tdsha(&p, NormMode::Limit).unwrap()).unwrap();
        let fin = assemble_pdmp(&build_tdsha(&p, NormMode::AtSize(1000.0)).unwrap()).unwrap();
        let mut vals = lim.initial_values().unwrap();
        vals[0] = 0.3;
        vals[1] = 0.7;
        let a = field(&lim, &vals);
        let b = field(&fin, &vals);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{a:?} {b:?}");
        }
    }

    #[test]
    fn no_stochastic_transitions_means_zero_rate() {
        let src = "param k = 1; var X : continuous init N;
            agent a { d: rate k * X class continuous -> { X -= 1; }; }";
        let p = parse_model(src).unwrap();
        let m = assemble_pdmp(&build_tdsha(&p, NormMode::Limit).unwrap()).unwrap();
        let vals = m.initial_values().unwrap();
        assert_eq!(m.total_rate(&vals, 0.0, &[]).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_random_increment_gives_no_flow() {
        let src = "var X : continuous init N;
            agent a { s: rate N class continuous -> { X += sample categorical(-1: 0.5, 1: 0.5); }; }";
        let p = parse_model(src).unwrap();
        let t = build_tdsha(&p, NormMode::Limit).unwrap();
        assert!(t.tc[0].increments.is_empty());
        assert_eq!(t.tc[0].random.len(), 1);
        let m = assemble_pdmp(&t).unwrap();
        assert!(m.flowing.is_empty());
    }

    #[test]
    fn no_continuous_actions_no_flows() {
        let src = "var X : discrete init 3; agent a { d: [X > 0] rate X -> { X -= 1; }; }";
        let t = build_tdsha(&parse_model(src).unwrap(), NormMode::Limit).unwrap();
        assert!(t.tc.is_empty());
        assert_eq!(t.ts.len(), 1);
    }

    #[test]
    fn composition_order_does_not_matter() {
        let p = parse_model(CS_HYBRID).unwrap();
        let prog = normalize(&flatten(&p), NormMode::Limit).unwrap();
        let a = component_tdsha(&prog, 0, NormMode::Limit).unwrap();
        let b = component_tdsha(&prog, 1, NormMode::Limit).unwrap();
        let ab = assemble_pdmp(&compose(&a, &b).unwrap()).unwrap();
        let ba = assemble_pdmp(&compose(&b, &a).unwrap()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut rates = Vec::new();
        for _ in 0..1000 {
            let mut vals = ab.initial_values().unwrap();
            vals[0] = rng.random();
            vals[1] = rng.random();
            vals[2] = rng.random_range(0..3) as f64;
            vals[3] = 2.0 - vals[2];
            let sig = ab.signature(&vals, 0.0).unwrap();
            let mut f1 = vec![0.0; 2];
            let mut f2 = vec![0.0; 2];
            ab.drift(&vals, 0.0, &sig, &mut f1).unwrap();
            ba.drift(&vals, 0.0, &sig, &mut f2).unwrap();
            assert_eq!(f1, f2);
            let l1 = ab.stochastic_rates(&vals, 0.0, &sig, &mut rates).unwrap();
            let l2 = ba.stochastic_rates(&vals, 0.0, &sig, &mut rates).unwrap();
            assert!((l1 - l2).abs() <= 1e-15 * l1.abs());
        }
    }

    #[test]
    fn opposite_atoms_share_a_surface() {
        let src = "param a = 0.1; var X : continuous init N; var Y : continuous init 0;
            agent p {
              hi: [X >= a * N] rate N class continuous -> { X -= 1; Y += 1; };
              lo: [X < a * N] rate 2 * N class continuous -> { X += 1; };
            }";
        let m = assemble_pdmp(&build_tdsha(&parse_model(src).unwrap(), NormMode::Limit).unwrap()).unwrap();
        assert_eq!(m.surfaces.len(), 1);
        assert!(m.surfaces[0].pws);
        let o: Vec<f64> = m.surfaces[0].members.iter().map(|x| x.1.signum()).collect();
        assert_eq!(o, vec![1.0, -1.0]);
    }

    #[test]
    fn chain_free_semi_check() {
        let looping = "var X : discrete int init 5;
            agent a {
              up: [X >= 1] immediate weight 1 -> { X = 0; };
              dn: [X <= 0] immediate weight 1 -> { X = 1; };
            }";
        let t = build_tdsha(&parse_model(looping).unwrap(), NormMode::Limit).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        match check_chain_free_sampled(&t, 100, &mut rng).unwrap() {
            ChainVerdict::Violation { from, to, .. } => assert_eq!((from.as_str(), to.as_str()), ("up", "dn")),
            v => panic!("{v:?}"),
        }
        let fine = "var X : continuous init 0; var Z : discrete int init 0;
            agent a { f: [Z == 0 && X >= N] immediate weight 1 -> { Z = 1; }; }";
        let t = build_tdsha(&parse_model(fine).unwrap(), NormMode::Limit).unwrap();
        assert_eq!(check_chain_free_sampled(&t, 100, &mut rng).unwrap(), ChainVerdict::NoWitnessFound);
        let empty = "var X : discrete init 0; agent a { s: rate 1 -> { X += 1; }; }";
        let t = build_tdsha(&parse_model(empty).unwrap(), NormMode::Limit).unwrap();
        assert_eq!(check_chain_free_sampled(&t, 100, &mut rng).unwrap(), ChainVerdict::NoWitnessFound);
    }
}
