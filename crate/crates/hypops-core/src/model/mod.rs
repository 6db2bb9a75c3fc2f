//! Population programs: variables, components of guarded actions, and the
//! structural checks every other module relies on.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::expr::{CExpr, Ctx, EvalError, Expr, Guard, RandomSpec, Slot};

mod flatten;
mod normalize;

pub use flatten::{flatten, is_flat};
pub use normalize::{denormalize_state, normalize, normalize_state, NormMode, NormalizeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKind {
    Discrete,
    Continuous,
    Environment,
}

/// Value domain. `Natural` (non-negative integers) is the default for
/// population counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Domain {
    Natural,
    Integer,
    Real,
}

impl Domain {
    pub fn contains(self, v: f64) -> bool {
        match self {
            Domain::Real => v.is_finite(),
            Domain::Integer => v.is_finite() && v == libm::round(v),
            Domain::Natural => v.is_finite() && v >= 0.0 && v == libm::round(v),
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Domain::Natural => "nat",
            Domain::Integer => "int",
            Domain::Real => "real",
        }
    }
}

impl VarKind {
    pub fn keyword(self) -> &'static str {
        match self {
            VarKind::Discrete => "discrete",
            VarKind::Continuous => "continuous",
            VarKind::Environment => "environment",
        }
    }

    pub fn default_domain(self) -> Domain {
        match self {
            VarKind::Environment => Domain::Real,
            _ => Domain::Natural,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariableDecl {
    pub name: String,
    pub kind: VarKind,
    pub domain: Domain,
    pub init: Expr,
    /// Box used when sampling states for the scaling checker. Continuous
    /// variables are given in normalized units.
    pub range: Option<(f64, f64)>,
}

impl VariableDecl {
    pub fn new(name: &str, kind: VarKind, init: Expr) -> VariableDecl {
        VariableDecl { name: name.to_string(), kind, domain: kind.default_domain(), init, range: None }
    }

    pub fn sample_range(&self) -> (f64, f64) {
        self.range.unwrap_or(match self.kind {
            VarKind::Continuous => (0.0, 1.0),
            _ => (0.0, 10.0),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionClass {
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionKind {
    Stochastic { rate: Expr },
    Instantaneous { weight: Expr },
}

#[derive(Debug, Clone, PartialEq)]
pub enum UpdateRhs {
    IncrementBy(Expr),
    SetTo(Expr),
    SetToRandom(RandomSpec),
    IncrementByRandom(RandomSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    pub target: String,
    pub rhs: UpdateRhs,
}

/// Simultaneous update. `locals` are random draws taken once per firing and
/// visible by name to every update right-hand side.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Reset {
    pub locals: Vec<(String, RandomSpec)>,
    pub updates: Vec<Update>,
}

impl Reset {
    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.updates.iter().map(|u| u.target.as_str())
    }

    pub fn uses_time(&self) -> bool {
        self.locals.iter().any(|(_, s)| s.uses_time())
            || self.updates.iter().any(|u| match &u.rhs {
                UpdateRhs::IncrementBy(e) | UpdateRhs::SetTo(e) => e.uses_time(),
                UpdateRhs::SetToRandom(s) | UpdateRhs::IncrementByRandom(s) => s.uses_time(),
            })
    }

    pub fn for_each_read(&self, f: &mut dyn FnMut(&str)) {
        for (_, s) in &self.locals {
            s.for_each_var(f);
        }
        for u in &self.updates {
            match &u.rhs {
                UpdateRhs::IncrementBy(e) => {
                    f(&u.target);
                    e.for_each_var(f)
                }
                UpdateRhs::SetTo(e) => e.for_each_var(f),
                UpdateRhs::IncrementByRandom(s) => {
                    f(&u.target);
                    s.for_each_var(f)
                }
                UpdateRhs::SetToRandom(s) => s.for_each_var(f),
            }
        }
    }
}

/// What an action turns into after firing.
#[derive(Debug, Clone, PartialEq)]
pub enum Continuation {
    /// The component calls itself again (the flat case).
    Recurse,
    /// A parallel composition of components with multiplicities; empty means
    /// the agent terminates.
    Network(Vec<(String, u32)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub name: String,
    pub kind: ActionKind,
    pub guard: Guard,
    pub reset: Reset,
    pub class: ActionClass,
    pub next: Continuation,
}

impl Action {
    pub fn is_instantaneous(&self) -> bool {
        matches!(self.kind, ActionKind::Instantaneous { .. })
    }

    /// Rate or weight expression.
    pub fn intensity(&self) -> &Expr {
        match &self.kind {
            ActionKind::Stochastic { rate } => rate,
            ActionKind::Instantaneous { weight } => weight,
        }
    }

    pub fn intensity_mut(&mut self) -> &mut Expr {
        match &mut self.kind {
            ActionKind::Stochastic { rate } => rate,
            ActionKind::Instantaneous { weight } => weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub name: String,
    pub actions: Vec<Action>,
}

/// How the continuous-kind variables of a program are scaled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalization {
    /// Raw population counts.
    Raw,
    /// Densities `X/N` at a fixed size.
    AtSize(f64),
    /// The `N -> inf` limit: continuous-class rates are the limit
    /// densities `g` and their increments are unscaled.
    Limit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub params: Vec<(String, f64)>,
    /// Default value of the size symbol `N`.
    pub size: Option<f64>,
    pub variables: Vec<VariableDecl>,
    pub components: Vec<Component>,
    /// Initial network: components with multiplicities.
    pub network: Vec<(String, u32)>,
    pub normalization: Normalization,
}

impl Default for Program {
    fn default() -> Program {
        Program {
            params: Vec::new(),
            size: None,
            variables: Vec::new(),
            components: Vec::new(),
            network: Vec::new(),
            normalization: Normalization::Raw,
        }
    }
}

pub const RESERVED: &[&str] = &["N", "time", "true", "min", "max", "ind", "floor", "abs"];

impl Program {
    pub fn var(&self, name: &str) -> Option<&VariableDecl> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn actions(&self) -> impl Iterator<Item = (&Component, &Action)> {
        self.components.iter().flat_map(|c| c.actions.iter().map(move |a| (c, a)))
    }

    pub fn action_count(&self) -> usize {
        self.components.iter().map(|c| c.actions.len()).sum()
    }

    /// The default initial network: one copy of each component.
    pub fn default_network(&self) -> Vec<(String, u32)> {
        self.components.iter().map(|c| (c.name.clone(), 1)).collect()
    }

    /// Resolver mapping variables to state slots and parameters to constants.
    pub fn resolver(&self) -> impl Fn(&str) -> Option<Slot> + '_ {
        move |n| self.var_index(n).map(Slot::Index).or_else(|| self.param(n).map(Slot::Const))
    }

    /// Evaluates the initial state. `size` binds `N` (required when any
    /// initial value mentions it).
    pub fn initial_state(&self, size: Option<f64>) -> Result<Vec<f64>, ModelError> {
        let r = |n: &str| self.param(n).map(Slot::Const);
        let mut out = Vec::with_capacity(self.variables.len());
        for v in &self.variables {
            let c = CExpr::compile(&v.init, &r).map_err(|e| ModelError::Eval { context: format!("init of `{}`", v.name), source: e })?;
            let x = c
                .eval(&Ctx { vals: &[], time: 0.0, size })
                .map_err(|e| ModelError::Eval { context: format!("init of `{}`", v.name), source: e })?;
            let x = if v.domain == Domain::Real { x } else { snap_integer(x) };
            if !v.domain.contains(x) {
                return Err(ModelError::InitDomain { var: v.name.clone(), value: x, domain: v.domain });
            }
            out.push(x);
        }
        Ok(out)
    }
}

/// Rounds values within 1e-9 of an integer (e.g. `0.1 * N` at N = 1000).
pub fn snap_integer(x: f64) -> f64 {
    let r = libm::round(x);
    if libm::fabs(x - r) <= 1e-9 * libm::fmax(1.0, libm::fabs(x)) {
        r
    } else {
        x
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("model declares no agents")]
    EmptyModel,
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("`{0}` is reserved")]
    ReservedName(String),
    #[error("{context}: undeclared variable or parameter `{name}`")]
    UndeclaredVariable { context: String, name: String },
    #[error("unknown component `{0}` in network")]
    UnknownComponent(String),
    #[error("variable `{var}`: initial value {value} is outside its {} domain", domain.keyword())]
    InitDomain { var: String, value: f64, domain: Domain },
    #[error("variable `{var}`: {detail}")]
    KindDomain { var: String, detail: String },
    #[error("action `{action}`: continuous-class transitions must add constant (or mean-constant random) increments to continuous variables only: {detail}")]
    Assumption1Violation { action: String, detail: String },
    #[error("action `{action}`: `time` may only appear in guards and resets of instantaneous actions and in resets of discrete stochastic actions")]
    TimeOutsideInstantaneous { action: String },
    #[error("action `{action}`: a timed guard must have the form `time >= h0 && g` with h0 and g free of `time`")]
    TimedGuardForm { action: String },
    #[error("action `{action}`: variable `{var}` updated twice")]
    DuplicateTarget { action: String, var: String },
    #[error("action `{action}`: cannot update `{var}`")]
    BadTarget { action: String, var: String },
    #[error("{context}: {source}")]
    Eval { context: String, source: EvalError },
}

/// All violations found, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelErrors(pub Vec<ModelError>);

impl fmt::Display for ModelErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl core::error::Error for ModelErrors {}

/// Splits an instantaneous guard `time >= h0 && g` into `(h0, g)`.
/// Returns `Ok(None)` for guards that do not mention time.
pub fn split_timed_guard(g: &Guard) -> Result<Option<(Expr, Guard)>, ()> {
    fn time_atom(g: &Guard) -> Option<Expr> {
        if let Guard::Atom(a) = g {
            match &a.expr {
                Expr::Time => return Some(Expr::Const(0.0)),
                Expr::Bin(crate::expr::BinOp::Sub, l, r) if matches!(**l, Expr::Time) && !r.uses_time() => {
                    return Some((**r).clone())
                }
                _ => {}
            }
        }
        None
    }
    if !g.uses_time() {
        return Ok(None);
    }
    if let Some(h0) = time_atom(g) {
        return Ok(Some((h0, Guard::True)));
    }
    if let Guard::And(parts) = g {
        let mut h0 = None;
        let mut rest = Vec::new();
        for p in parts {
            match time_atom(p) {
                Some(h) if h0.is_none() => h0 = Some(h),
                _ => {
                    if p.uses_time() {
                        return Err(());
                    }
                    rest.push(p.clone())
                }
            }
        }
        let rest = match rest.len() {
            0 => Guard::True,
            1 => rest.pop().unwrap(),
            _ => Guard::And(rest),
        };
        return h0.map(|h| Some((h, rest))).ok_or(());
    }
    Err(())
}

fn is_constant_increment(e: &Expr, p: &Program) -> bool {
    let mut ok = true;
    e.for_each_var(&mut |n| ok &= p.param(n).is_some());
    ok && !e.uses_time()
}

/// Checks names, kinds, domains, the continuous-transition restrictions and
/// the placement of `time`. Reports every violation found.
pub fn validate(p: &Program) -> Result<(), ModelErrors> {
    let mut errs = Vec::new();
    if p.components.is_empty() {
        errs.push(ModelError::EmptyModel);
        return Err(ModelErrors(errs));
    }
    let mut names: Vec<&str> = Vec::new();
    for n in p.params.iter().map(|(n, _)| n).chain(p.variables.iter().map(|v| &v.name)) {
        if RESERVED.contains(&n.as_str()) {
            errs.push(ModelError::ReservedName(n.clone()));
        }
        if names.contains(&n.as_str()) {
            errs.push(ModelError::DuplicateName(n.clone()));
        }
        names.push(n);
    }
    let mut comp_names: Vec<&str> = Vec::new();
    for c in &p.components {
        if comp_names.contains(&c.name.as_str()) {
            errs.push(ModelError::DuplicateName(c.name.clone()));
        }
        comp_names.push(&c.name);
    }
    let mut action_names: Vec<&str> = Vec::new();
    for (_, a) in p.actions() {
        if action_names.contains(&a.name.as_str()) {
            errs.push(ModelError::DuplicateName(a.name.clone()));
        }
        action_names.push(&a.name);
    }
    for (c, _) in &p.network {
        if !comp_names.contains(&c.as_str()) {
            errs.push(ModelError::UnknownComponent(c.clone()));
        }
    }

    let known = |n: &str| p.var(n).is_some() || p.param(n).is_some();
    for v in &p.variables {
        if v.kind == VarKind::Discrete && v.domain == Domain::Real {
            errs.push(ModelError::KindDomain { var: v.name.clone(), detail: "discrete variables must be integer-valued".into() });
        }
        if v.init.uses_time() {
            errs.push(ModelError::KindDomain { var: v.name.clone(), detail: "initial value may not use `time`".into() });
        }
        v.init.for_each_var(&mut |n| {
            if p.param(n).is_none() {
                errs.push(ModelError::UndeclaredVariable { context: format!("init of `{}`", v.name), name: n.to_string() });
            }
        });
        if let Some((lo, hi)) = v.range {
            if !(lo < hi) {
                errs.push(ModelError::KindDomain { var: v.name.clone(), detail: "empty range".into() });
            }
        }
        if !v.init.uses_size() && p.normalization == Normalization::Raw {
            if let Ok(c) = CExpr::compile(&v.init, &|n| p.param(n).map(Slot::Const)) {
                if let Ok(x) = c.eval(&Ctx { vals: &[], time: 0.0, size: None }) {
                    if !v.domain.contains(x) {
                        errs.push(ModelError::InitDomain { var: v.name.clone(), value: x, domain: v.domain });
                    }
                }
            }
        }
    }

    for c in &p.components {
        for a in &c.actions {
            let ctx = format!("action `{}`", a.name);
            let check_name = |n: &str, locals: &[(String, RandomSpec)], errs: &mut Vec<ModelError>| {
                if !known(n) && !locals.iter().any(|(l, _)| l == n) {
                    errs.push(ModelError::UndeclaredVariable { context: ctx.clone(), name: n.to_string() });
                }
            };
            a.guard.for_each_var(&mut |n| check_name(n, &[], &mut errs));
            a.intensity().for_each_var(&mut |n| check_name(n, &[], &mut errs));
            for (i, (l, s)) in a.reset.locals.iter().enumerate() {
                if known(l) || RESERVED.contains(&l.as_str()) || a.reset.locals[..i].iter().any(|(m, _)| m == l) {
                    errs.push(ModelError::DuplicateName(l.clone()));
                }
                s.for_each_var(&mut |n| check_name(n, &a.reset.locals[..i], &mut errs));
            }
            let mut seen: Vec<&str> = Vec::new();
            for u in &a.reset.updates {
                if seen.contains(&u.target.as_str()) {
                    errs.push(ModelError::DuplicateTarget { action: a.name.clone(), var: u.target.clone() });
                }
                seen.push(&u.target);
                match p.var(&u.target) {
                    None => errs.push(ModelError::BadTarget { action: a.name.clone(), var: u.target.clone() }),
                    Some(_) => {}
                }
                let mut reads = |n: &str| check_name(n, &a.reset.locals, &mut errs);
                match &u.rhs {
                    UpdateRhs::IncrementBy(e) | UpdateRhs::SetTo(e) => e.for_each_var(&mut reads),
                    UpdateRhs::SetToRandom(s) | UpdateRhs::IncrementByRandom(s) => s.for_each_var(&mut reads),
                }
            }
            if let Continuation::Network(net) = &a.next {
                for (n, _) in net {
                    if !comp_names.contains(&n.as_str()) {
                        errs.push(ModelError::UnknownComponent(n.clone()));
                    }
                }
            }

            // Placement of `time`.
            match &a.kind {
                ActionKind::Stochastic { rate } => {
                    if rate.uses_time() || a.guard.uses_time() {
                        errs.push(ModelError::TimeOutsideInstantaneous { action: a.name.clone() });
                    } else if a.reset.uses_time() && a.class == ActionClass::Continuous {
                        errs.push(ModelError::TimeOutsideInstantaneous { action: a.name.clone() });
                    }
                }
                ActionKind::Instantaneous { weight } => {
                    if weight.uses_time() {
                        errs.push(ModelError::TimeOutsideInstantaneous { action: a.name.clone() });
                    }
                    if split_timed_guard(&a.guard).is_err() {
                        errs.push(ModelError::TimedGuardForm { action: a.name.clone() });
                    }
                }
            }

            // Continuous transitions.
            if a.class == ActionClass::Continuous {
                let bad = |detail: String| ModelError::Assumption1Violation { action: a.name.clone(), detail };
                if a.is_instantaneous() {
                    errs.push(bad("instantaneous actions are always discrete".into()));
                }
                if !a.reset.locals.is_empty() {
                    errs.push(bad("local draws are not allowed; use `+= sample ...`".into()));
                }
                if !matches!(a.next, Continuation::Recurse) {
                    errs.push(bad("the action must recurse into its own component".into()));
                }
                for u in &a.reset.updates {
                    match p.var(&u.target) {
                        Some(v) if v.kind == VarKind::Continuous => {}
                        Some(_) => errs.push(bad(format!("updates non-continuous variable `{}`", u.target))),
                        None => continue,
                    }
                    match &u.rhs {
                        UpdateRhs::IncrementBy(e) if is_constant_increment(e, p) => {}
                        UpdateRhs::IncrementByRandom(s) if s.params().iter().all(|e| is_constant_increment(e, p)) => {}
                        _ => errs.push(bad(format!("update of `{}` is not a constant increment", u.target))),
                    }
                }
            }
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(ModelErrors(errs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_model;

    #[test]
    fn timed_guard_split() {
        let g = Guard::And(alloc::vec![
            Guard::atom(Expr::sub(Expr::Time, Expr::var("K"))),
            Guard::atom(Expr::sub(Expr::var("Xb"), Expr::c(1.0))),
        ]);
        let (h0, rest) = split_timed_guard(&g).unwrap().unwrap();
        assert_eq!(h0, Expr::var("K"));
        assert_eq!(rest, Guard::atom(Expr::sub(Expr::var("Xb"), Expr::c(1.0))));
        let bad = Guard::atom(Expr::sub(Expr::var("K"), Expr::Time));
        assert!(split_timed_guard(&bad).is_err());
        assert_eq!(split_timed_guard(&Guard::True), Ok(None));
    }

    #[test]
    fn continuous_action_touching_discrete_is_rejected() {
        let src = "var X : continuous init 1; var Z : discrete init 0;
            agent a { go: rate 1 class continuous -> { X += 1; Z += 1; }; }";
        let err = parse_model(src).unwrap_err();
        assert!(err.to_string().contains("non-continuous variable `Z`"), "{err}");
    }

    #[test]
    fn time_in_rate_is_rejected() {
        let src = "var X : discrete init 1; agent a { go: rate time -> { X += 1; }; }";
        let err = parse_model(src).unwrap_err();
        assert!(err.to_string().contains("`time` may only appear"), "{err}");
    }

    #[test]
    fn stochastic_reset_may_read_time() {
        let src = "var X : discrete init 1; var K : environment init 0;
            agent a { go: rate 1 -> { X += 1; K = time + 2; }; }";
        assert!(parse_model(src).is_ok());
    }

    #[test]
    fn domains() {
        assert!(Domain::Natural.contains(3.0));
        assert!(!Domain::Natural.contains(-1.0));
        assert!(Domain::Integer.contains(-1.0));
        assert!(!Domain::Integer.contains(0.5));
        assert!(Domain::Real.contains(0.5));
        assert!(!Domain::Real.contains(f64::NAN));
    }
}
