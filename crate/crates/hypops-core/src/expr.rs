//! Arithmetic expressions, guards and random specifications.
//!
//! Models are written against [`Expr`]/[`Guard`]/[`RandomSpec`], which refer
//! to variables by name. Simulators compile them once into [`CExpr`],
//! [`CGuard`] and [`CRandom`], which use slot indices into a state vector.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Exp1, Geometric, LogNormal, Normal, Uniform, Weibull};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }

    fn prec(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(String),
    /// The system size symbol `N`.
    Size,
    /// Simulation time.
    Time,
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Min(Vec<Expr>),
    Max(Vec<Expr>),
    /// 1 if the guard holds, else 0.
    Ind(Box<Guard>),
    Floor(Box<Expr>),
    Abs(Box<Expr>),
}

/// `expr >= 0`, or `expr > 0` when `strict`.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub expr: Expr,
    pub strict: bool,
}

/// Positive boolean combination of atoms. `And(vec![])` is true and
/// `Or(vec![])` is false.
#[derive(Debug, Clone, PartialEq)]
pub enum Guard {
    True,
    Atom(Atom),
    And(Vec<Guard>),
    Or(Vec<Guard>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RandomSpec {
    Constant(Expr),
    Uniform(Expr, Expr),
    Normal(Expr, Expr),
    LogNormal(Expr, Expr),
    /// Number of trials up to and including the first success.
    Geometric(Expr),
    Binomial(Expr, Expr),
    /// Weibull with the given shape and rate (= 1/scale).
    Weibull(Expr, Expr),
    Categorical(Vec<(Expr, Expr)>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("size symbol N used in limit mode")]
    SizeSymbolInLimitMode,
    #[error("invalid distribution parameter: {0}")]
    InvalidParameter(String),
    #[error("distribution has no closed-form mean")]
    NoClosedForm,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActivationError {
    #[error("guard is constantly true and has no activation surface")]
    GuardIsConstantTrue,
}

// ---------------------------------------------------------------------------
// Construction helpers

impl Expr {
    pub fn c(v: f64) -> Expr {
        Expr::Const(v)
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_string())
    }

    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Bin(op, Box::new(a), Box::new(b))
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        Expr::bin(BinOp::Add, a, b)
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        Expr::bin(BinOp::Sub, a, b)
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        Expr::bin(BinOp::Mul, a, b)
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        Expr::bin(BinOp::Div, a, b)
    }

    pub fn neg(a: Expr) -> Expr {
        Expr::Neg(Box::new(a))
    }

    pub fn is_const(&self, v: f64) -> bool {
        matches!(self, Expr::Const(c) if *c == v)
    }

    /// Calls `f` on every variable name in the expression (including those
    /// inside indicator guards).
    pub fn for_each_var(&self, f: &mut dyn FnMut(&str)) {
        match self {
            Expr::Var(n) => f(n),
            Expr::Const(_) | Expr::Size | Expr::Time => {}
            Expr::Neg(a) | Expr::Floor(a) | Expr::Abs(a) => a.for_each_var(f),
            Expr::Bin(_, a, b) => {
                a.for_each_var(f);
                b.for_each_var(f);
            }
            Expr::Min(xs) | Expr::Max(xs) => xs.iter().for_each(|x| x.for_each_var(f)),
            Expr::Ind(g) => g.for_each_var(f),
        }
    }

    pub fn vars(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        self.for_each_var(&mut |n| {
            if !out.iter().any(|m| m == n) {
                out.push(n.to_string());
            }
        });
        out
    }

    pub fn any_node(&self, pred: &dyn Fn(&Expr) -> bool) -> bool {
        if pred(self) {
            return true;
        }
        match self {
            Expr::Const(_) | Expr::Var(_) | Expr::Size | Expr::Time => false,
            Expr::Neg(a) | Expr::Floor(a) | Expr::Abs(a) => a.any_node(pred),
            Expr::Bin(_, a, b) => a.any_node(pred) || b.any_node(pred),
            Expr::Min(xs) | Expr::Max(xs) => xs.iter().any(|x| x.any_node(pred)),
            Expr::Ind(g) => g.any_expr(pred),
        }
    }

    pub fn uses_time(&self) -> bool {
        self.any_node(&|e| matches!(e, Expr::Time))
    }

    pub fn uses_size(&self) -> bool {
        self.any_node(&|e| matches!(e, Expr::Size))
    }

    /// Rebuilds the expression, replacing each variable by `f(name)`.
    pub fn map_vars(&self, f: &dyn Fn(&str) -> Expr) -> Expr {
        match self {
            Expr::Var(n) => f(n),
            Expr::Const(_) | Expr::Size | Expr::Time => self.clone(),
            Expr::Neg(a) => Expr::Neg(Box::new(a.map_vars(f))),
            Expr::Floor(a) => Expr::Floor(Box::new(a.map_vars(f))),
            Expr::Abs(a) => Expr::Abs(Box::new(a.map_vars(f))),
            Expr::Bin(op, a, b) => Expr::Bin(*op, Box::new(a.map_vars(f)), Box::new(b.map_vars(f))),
            Expr::Min(xs) => Expr::Min(xs.iter().map(|x| x.map_vars(f)).collect()),
            Expr::Max(xs) => Expr::Max(xs.iter().map(|x| x.map_vars(f)).collect()),
            Expr::Ind(g) => Expr::Ind(Box::new(g.map_vars(f))),
        }
    }
}

impl Guard {
    pub fn atom(expr: Expr) -> Guard {
        Guard::Atom(Atom { expr, strict: false })
    }

    pub fn strict(expr: Expr) -> Guard {
        Guard::Atom(Atom { expr, strict: true })
    }

    pub fn is_true(&self) -> bool {
        match self {
            Guard::True => true,
            Guard::And(gs) => gs.iter().all(Guard::is_true),
            Guard::Or(gs) => gs.iter().any(Guard::is_true),
            Guard::Atom(_) => false,
        }
    }

    /// Conjunction that flattens nested `And`s and drops `True`.
    pub fn and(a: Guard, b: Guard) -> Guard {
        let mut parts = Vec::new();
        for g in [a, b] {
            match g {
                Guard::True => {}
                Guard::And(gs) => parts.extend(gs),
                g => parts.push(g),
            }
        }
        match parts.len() {
            0 => Guard::True,
            1 => parts.pop().unwrap(),
            _ => Guard::And(parts),
        }
    }

    /// Logical negation, pushed into the atoms.
    pub fn negate(&self) -> Guard {
        match self {
            Guard::True => Guard::Or(Vec::new()),
            Guard::Atom(a) => Guard::Atom(Atom { expr: negate_expr(&a.expr), strict: !a.strict }),
            Guard::And(gs) => Guard::Or(gs.iter().map(Guard::negate).collect()),
            Guard::Or(gs) => Guard::And(gs.iter().map(Guard::negate).collect()),
        }
    }

    pub fn for_each_atom<'a>(&'a self, f: &mut dyn FnMut(&'a Atom)) {
        match self {
            Guard::True => {}
            Guard::Atom(a) => f(a),
            Guard::And(gs) | Guard::Or(gs) => gs.iter().for_each(|g| g.for_each_atom(f)),
        }
    }

    pub fn for_each_var(&self, f: &mut dyn FnMut(&str)) {
        self.for_each_atom(&mut |a| a.expr.for_each_var(f));
    }

    pub fn vars(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        self.for_each_var(&mut |n| {
            if !out.iter().any(|m| m == n) {
                out.push(n.to_string());
            }
        });
        out
    }

    pub fn any_expr(&self, pred: &dyn Fn(&Expr) -> bool) -> bool {
        let mut hit = false;
        self.for_each_atom(&mut |a| hit |= a.expr.any_node(pred));
        hit
    }

    pub fn uses_time(&self) -> bool {
        self.any_expr(&|e| matches!(e, Expr::Time))
    }

    pub fn map_vars(&self, f: &dyn Fn(&str) -> Expr) -> Guard {
        self.map_atoms(&|a| Guard::Atom(Atom { expr: a.expr.map_vars(f), strict: a.strict }))
    }

    pub fn map_atoms(&self, f: &dyn Fn(&Atom) -> Guard) -> Guard {
        match self {
            Guard::True => Guard::True,
            Guard::Atom(a) => f(a),
            Guard::And(gs) => Guard::And(gs.iter().map(|g| g.map_atoms(f)).collect()),
            Guard::Or(gs) => Guard::Or(gs.iter().map(|g| g.map_atoms(f)).collect()),
        }
    }
}

fn negate_expr(e: &Expr) -> Expr {
    match e {
        Expr::Const(c) => Expr::Const(-c),
        Expr::Neg(a) => (**a).clone(),
        _ => Expr::neg(e.clone()),
    }
}

impl RandomSpec {
    pub fn family(&self) -> &'static str {
        match self {
            RandomSpec::Constant(_) => "constant",
            RandomSpec::Uniform(..) => "uniform",
            RandomSpec::Normal(..) => "normal",
            RandomSpec::LogNormal(..) => "lognormal",
            RandomSpec::Geometric(_) => "geometric",
            RandomSpec::Binomial(..) => "binomial",
            RandomSpec::Weibull(..) => "weibull",
            RandomSpec::Categorical(_) => "categorical",
        }
    }

    /// Distribution parameters in declaration order (categorical entries are
    /// flattened as value, weight, value, weight, ...).
    pub fn params(&self) -> Vec<&Expr> {
        match self {
            RandomSpec::Constant(a) | RandomSpec::Geometric(a) => alloc::vec![a],
            RandomSpec::Uniform(a, b)
            | RandomSpec::Normal(a, b)
            | RandomSpec::LogNormal(a, b)
            | RandomSpec::Binomial(a, b)
            | RandomSpec::Weibull(a, b) => alloc::vec![a, b],
            RandomSpec::Categorical(xs) => xs.iter().flat_map(|(v, w)| [v, w]).collect(),
        }
    }

    pub fn map_exprs(&self, f: &dyn Fn(&Expr) -> Expr) -> RandomSpec {
        match self {
            RandomSpec::Constant(a) => RandomSpec::Constant(f(a)),
            RandomSpec::Uniform(a, b) => RandomSpec::Uniform(f(a), f(b)),
            RandomSpec::Normal(a, b) => RandomSpec::Normal(f(a), f(b)),
            RandomSpec::LogNormal(a, b) => RandomSpec::LogNormal(f(a), f(b)),
            RandomSpec::Geometric(a) => RandomSpec::Geometric(f(a)),
            RandomSpec::Binomial(a, b) => RandomSpec::Binomial(f(a), f(b)),
            RandomSpec::Weibull(a, b) => RandomSpec::Weibull(f(a), f(b)),
            RandomSpec::Categorical(xs) => RandomSpec::Categorical(xs.iter().map(|(v, w)| (f(v), f(w))).collect()),
        }
    }

    pub fn for_each_var(&self, f: &mut dyn FnMut(&str)) {
        for p in self.params() {
            p.for_each_var(f);
        }
    }

    pub fn uses_time(&self) -> bool {
        self.params().iter().any(|p| p.uses_time())
    }
}

// ---------------------------------------------------------------------------
// Name-based environment and the reference operations

/// Variable bindings, current time and (at finite size) the value of `N`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Env {
    vars: BTreeMap<String, f64>,
    pub time: f64,
    pub size: Option<f64>,
}

impl Env {
    pub fn new() -> Env {
        Env::default()
    }

    pub fn with_size(size: f64) -> Env {
        Env { size: Some(size), ..Env::default() }
    }

    pub fn set(&mut self, name: &str, v: f64) -> &mut Env {
        self.vars.insert(name.to_string(), v);
        self
    }

    pub fn bind(mut self, name: &str, v: f64) -> Env {
        self.set(name, v);
        self
    }

    pub fn get(&self, name: &str) -> Result<f64, EvalError> {
        self.vars.get(name).copied().ok_or_else(|| EvalError::UnboundVariable(name.to_string()))
    }

    fn compile_env(&self) -> (Vec<f64>, impl Fn(&str) -> Option<Slot> + '_) {
        let vals: Vec<f64> = self.vars.values().copied().collect();
        let resolve = move |n: &str| self.vars.keys().position(|k| k == n).map(Slot::Index);
        (vals, resolve)
    }
}

pub fn eval_expr(e: &Expr, env: &Env) -> Result<f64, EvalError> {
    let (vals, resolve) = env.compile_env();
    let c = CExpr::compile(e, &resolve)?;
    c.eval(&Ctx { vals: &vals, time: env.time, size: env.size })
}

pub fn eval_guard(g: &Guard, env: &Env) -> Result<bool, EvalError> {
    let (vals, resolve) = env.compile_env();
    let c = CGuard::compile(g, &resolve, &mut 0)?;
    c.holds(&Ctx { vals: &vals, time: env.time, size: env.size })
}

/// Continuous function `h` with `h >= 0` exactly where `g` holds (up to the
/// strictness of atoms at `h = 0`).
pub fn activation_function(g: &Guard) -> Result<Expr, ActivationError> {
    match g {
        Guard::True => Err(ActivationError::GuardIsConstantTrue),
        Guard::Atom(a) => Ok(a.expr.clone()),
        Guard::And(gs) => {
            let mut parts = Vec::new();
            for c in gs {
                match activation_function(c) {
                    Ok(h) => parts.push(h),
                    Err(ActivationError::GuardIsConstantTrue) => {}
                }
            }
            match parts.len() {
                0 => Err(ActivationError::GuardIsConstantTrue),
                1 => Ok(parts.pop().unwrap()),
                _ => Ok(Expr::Min(parts)),
            }
        }
        Guard::Or(gs) => {
            if gs.is_empty() {
                return Ok(Expr::Const(-1.0));
            }
            let mut parts = Vec::new();
            for c in gs {
                parts.push(activation_function(c)?);
            }
            if parts.len() == 1 {
                Ok(parts.pop().unwrap())
            } else {
                Ok(Expr::Max(parts))
            }
        }
    }
}

pub fn sample_random<R: Rng + ?Sized>(spec: &RandomSpec, env: &Env, rng: &mut R) -> Result<f64, EvalError> {
    let (vals, resolve) = env.compile_env();
    let c = CRandom::compile(spec, &resolve)?;
    c.sample(&Ctx { vals: &vals, time: env.time, size: env.size }, rng)
}

pub fn expected_value(spec: &RandomSpec, env: &Env) -> Result<f64, EvalError> {
    let (vals, resolve) = env.compile_env();
    let c = CRandom::compile(spec, &resolve)?;
    c.mean(&Ctx { vals: &vals, time: env.time, size: env.size })
}

// ---------------------------------------------------------------------------
// Compiled forms

/// What a name resolves to during compilation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Slot {
    Index(usize),
    Const(f64),
}

/// Evaluation context: slot values, time and size (`None` in limit mode).
#[derive(Debug, Clone, Copy)]
pub struct Ctx<'a> {
    pub vals: &'a [f64],
    pub time: f64,
    pub size: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CExpr {
    Const(f64),
    Slot(u32),
    Size,
    Time,
    Neg(Box<CExpr>),
    Bin(BinOp, Box<CExpr>, Box<CExpr>),
    Min(Box<[CExpr]>),
    Max(Box<[CExpr]>),
    Ind(Box<CGuard>),
    Floor(Box<CExpr>),
    Abs(Box<CExpr>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum CGuard {
    True,
    /// `id` numbers the atoms of one compilation unit so callers can attach
    /// side information (surface membership, static/dynamic status).
    Atom { expr: CExpr, strict: bool, id: u32 },
    And(Box<[CGuard]>),
    Or(Box<[CGuard]>),
}

pub trait Resolver: Fn(&str) -> Option<Slot> {}
impl<F: Fn(&str) -> Option<Slot>> Resolver for F {}

impl CExpr {
    pub fn compile(e: &Expr, r: &dyn Fn(&str) -> Option<Slot>) -> Result<CExpr, EvalError> {
        Ok(match e {
            Expr::Const(c) => CExpr::Const(*c),
            Expr::Var(n) => match r(n) {
                Some(Slot::Index(i)) => CExpr::Slot(i as u32),
                Some(Slot::Const(c)) => CExpr::Const(c),
                None => return Err(EvalError::UnboundVariable(n.clone())),
            },
            Expr::Size => CExpr::Size,
            Expr::Time => CExpr::Time,
            Expr::Neg(a) => match CExpr::compile(a, r)? {
                CExpr::Const(c) => CExpr::Const(-c),
                a => CExpr::Neg(Box::new(a)),
            },
            Expr::Bin(op, a, b) => {
                let a = CExpr::compile(a, r)?;
                let b = CExpr::compile(b, r)?;
                match (&a, &b, op) {
                    (CExpr::Const(_), CExpr::Const(y), BinOp::Div) if *y == 0.0 => {
                        CExpr::Bin(*op, Box::new(a), Box::new(b))
                    }
                    (CExpr::Const(x), CExpr::Const(y), _) => CExpr::Const(apply(*op, *x, *y).unwrap_or(f64::NAN)),
                    _ => CExpr::Bin(*op, Box::new(a), Box::new(b)),
                }
            }
            Expr::Min(xs) => CExpr::Min(xs.iter().map(|x| CExpr::compile(x, r)).collect::<Result<_, _>>()?),
            Expr::Max(xs) => CExpr::Max(xs.iter().map(|x| CExpr::compile(x, r)).collect::<Result<_, _>>()?),
            Expr::Ind(g) => CExpr::Ind(Box::new(CGuard::compile(g, r, &mut 0)?)),
            Expr::Floor(a) => CExpr::Floor(Box::new(CExpr::compile(a, r)?)),
            Expr::Abs(a) => CExpr::Abs(Box::new(CExpr::compile(a, r)?)),
        })
    }

    #[inline]
    pub fn eval(&self, c: &Ctx<'_>) -> Result<f64, EvalError> {
        Ok(match self {
            CExpr::Const(v) => *v,
            CExpr::Slot(i) => c.vals[*i as usize],
            CExpr::Size => c.size.ok_or(EvalError::SizeSymbolInLimitMode)?,
            CExpr::Time => c.time,
            CExpr::Neg(a) => -a.eval(c)?,
            CExpr::Bin(op, a, b) => apply(*op, a.eval(c)?, b.eval(c)?)?,
            CExpr::Min(xs) => {
                let mut m = f64::INFINITY;
                for x in xs.iter() {
                    m = m.min(x.eval(c)?);
                }
                m
            }
            CExpr::Max(xs) => {
                let mut m = f64::NEG_INFINITY;
                for x in xs.iter() {
                    m = m.max(x.eval(c)?);
                }
                m
            }
            CExpr::Ind(g) => {
                if g.holds(c)? {
                    1.0
                } else {
                    0.0
                }
            }
            CExpr::Floor(a) => libm::floor(a.eval(c)?),
            CExpr::Abs(a) => libm::fabs(a.eval(c)?),
        })
    }

    pub fn for_each_slot(&self, f: &mut dyn FnMut(usize)) {
        match self {
            CExpr::Slot(i) => f(*i as usize),
            CExpr::Const(_) | CExpr::Size | CExpr::Time => {}
            CExpr::Neg(a) | CExpr::Floor(a) | CExpr::Abs(a) => a.for_each_slot(f),
            CExpr::Bin(_, a, b) => {
                a.for_each_slot(f);
                b.for_each_slot(f);
            }
            CExpr::Min(xs) | CExpr::Max(xs) => xs.iter().for_each(|x| x.for_each_slot(f)),
            CExpr::Ind(g) => g.for_each_slot(f),
        }
    }

    pub fn uses_time(&self) -> bool {
        match self {
            CExpr::Time => true,
            CExpr::Const(_) | CExpr::Slot(_) | CExpr::Size => false,
            CExpr::Neg(a) | CExpr::Floor(a) | CExpr::Abs(a) => a.uses_time(),
            CExpr::Bin(_, a, b) => a.uses_time() || b.uses_time(),
            CExpr::Min(xs) | CExpr::Max(xs) => xs.iter().any(CExpr::uses_time),
            CExpr::Ind(g) => {
                let mut t = false;
                g.for_each_atom(&mut |_, e, _| t |= e.uses_time());
                t
            }
        }
    }
}

#[inline]
fn apply(op: BinOp, a: f64, b: f64) -> Result<f64, EvalError> {
    Ok(match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => {
            if b == 0.0 {
                return Err(EvalError::DivisionByZero);
            }
            a / b
        }
    })
}

/// Lets a caller force the truth value of individual atoms (by id).
pub trait AtomOverride {
    fn atom(&self, id: u32) -> Option<bool>;
}

pub struct NoOverride;

impl AtomOverride for NoOverride {
    #[inline]
    fn atom(&self, _id: u32) -> Option<bool> {
        None
    }
}

impl CGuard {
    pub fn compile(g: &Guard, r: &dyn Fn(&str) -> Option<Slot>, next_id: &mut u32) -> Result<CGuard, EvalError> {
        Ok(match g {
            Guard::True => CGuard::True,
            Guard::Atom(a) => {
                let id = *next_id;
                *next_id += 1;
                CGuard::Atom { expr: CExpr::compile(&a.expr, r)?, strict: a.strict, id }
            }
            Guard::And(gs) => {
                CGuard::And(gs.iter().map(|g| CGuard::compile(g, r, next_id)).collect::<Result<_, _>>()?)
            }
            Guard::Or(gs) => CGuard::Or(gs.iter().map(|g| CGuard::compile(g, r, next_id)).collect::<Result<_, _>>()?),
        })
    }

    #[inline]
    pub fn holds(&self, c: &Ctx<'_>) -> Result<bool, EvalError> {
        self.holds_with(c, &NoOverride)
    }

    pub fn holds_with<O: AtomOverride + ?Sized>(&self, c: &Ctx<'_>, ov: &O) -> Result<bool, EvalError> {
        Ok(match self {
            CGuard::True => true,
            CGuard::Atom { expr, strict, id } => match ov.atom(*id) {
                Some(b) => b,
                None => {
                    let v = expr.eval(c)?;
                    if *strict {
                        v > 0.0
                    } else {
                        v >= 0.0
                    }
                }
            },
            CGuard::And(gs) => {
                for g in gs.iter() {
                    if !g.holds_with(c, ov)? {
                        return Ok(false);
                    }
                }
                true
            }
            CGuard::Or(gs) => {
                for g in gs.iter() {
                    if g.holds_with(c, ov)? {
                        return Ok(true);
                    }
                }
                false
            }
        })
    }

    /// Evaluates the activation function (min over conjunctions, max over
    /// disjunctions). Atoms for which `fixed(id)` returns a truth value count
    /// as `+inf` (true) or `-inf` (false), so constant parts of the guard do
    /// not mask the margin of the moving parts.
    pub fn activation(&self, c: &Ctx<'_>, fixed: &dyn Fn(u32) -> Option<bool>) -> Result<f64, EvalError> {
        Ok(match self {
            CGuard::True => f64::INFINITY,
            CGuard::Atom { expr, strict, id } => match fixed(*id) {
                Some(true) => f64::INFINITY,
                Some(false) => f64::NEG_INFINITY,
                None => {
                    let _ = strict;
                    expr.eval(c)?
                }
            },
            CGuard::And(gs) => {
                let mut m = f64::INFINITY;
                for g in gs.iter() {
                    m = m.min(g.activation(c, fixed)?);
                }
                m
            }
            CGuard::Or(gs) => {
                let mut m = f64::NEG_INFINITY;
                for g in gs.iter() {
                    m = m.max(g.activation(c, fixed)?);
                }
                m
            }
        })
    }

    pub fn for_each_atom<'a>(&'a self, f: &mut dyn FnMut(u32, &'a CExpr, bool)) {
        match self {
            CGuard::True => {}
            CGuard::Atom { expr, strict, id } => f(*id, expr, *strict),
            CGuard::And(gs) | CGuard::Or(gs) => gs.iter().for_each(|g| g.for_each_atom(f)),
        }
    }

    pub fn for_each_slot(&self, f: &mut dyn FnMut(usize)) {
        self.for_each_atom(&mut |_, e, _| e.for_each_slot(f));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CRandom {
    Constant(CExpr),
    Uniform(CExpr, CExpr),
    Normal(CExpr, CExpr),
    LogNormal(CExpr, CExpr),
    Geometric(CExpr),
    Binomial(CExpr, CExpr),
    Weibull(CExpr, CExpr),
    Categorical(Box<[(CExpr, CExpr)]>),
}

fn invalid(msg: &str, v: f64) -> EvalError {
    EvalError::InvalidParameter(alloc::format!("{msg} (got {v})"))
}

impl CRandom {
    pub fn compile(s: &RandomSpec, r: &dyn Fn(&str) -> Option<Slot>) -> Result<CRandom, EvalError> {
        let c = |e: &Expr| CExpr::compile(e, r);
        Ok(match s {
            RandomSpec::Constant(a) => CRandom::Constant(c(a)?),
            RandomSpec::Uniform(a, b) => CRandom::Uniform(c(a)?, c(b)?),
            RandomSpec::Normal(a, b) => CRandom::Normal(c(a)?, c(b)?),
            RandomSpec::LogNormal(a, b) => CRandom::LogNormal(c(a)?, c(b)?),
            RandomSpec::Geometric(a) => CRandom::Geometric(c(a)?),
            RandomSpec::Binomial(a, b) => CRandom::Binomial(c(a)?, c(b)?),
            RandomSpec::Weibull(a, b) => CRandom::Weibull(c(a)?, c(b)?),
            RandomSpec::Categorical(xs) => {
                CRandom::Categorical(xs.iter().map(|(v, w)| Ok((c(v)?, c(w)?))).collect::<Result<_, EvalError>>()?)
            }
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, c: &Ctx<'_>, rng: &mut R) -> Result<f64, EvalError> {
        Ok(match self {
            CRandom::Constant(a) => a.eval(c)?,
            CRandom::Uniform(a, b) => {
                let (lo, hi) = (a.eval(c)?, b.eval(c)?);
                if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(invalid("uniform needs finite lo <= hi", hi - lo));
                }
                if lo == hi {
                    lo
                } else {
                    Uniform::new(lo, hi).map_err(|_| invalid("uniform bounds", lo))?.sample(rng)
                }
            }
            CRandom::Normal(a, b) => {
                let (m, s) = (a.eval(c)?, b.eval(c)?);
                if !(s >= 0.0 && s.is_finite() && m.is_finite()) {
                    return Err(invalid("normal sd must be finite and >= 0", s));
                }
                Normal::new(m, s).map_err(|_| invalid("normal sd must be finite and >= 0", s))?.sample(rng)
            }
            CRandom::LogNormal(a, b) => {
                let (m, s) = (a.eval(c)?, b.eval(c)?);
                if !(s >= 0.0 && s.is_finite() && m.is_finite()) {
                    return Err(invalid("lognormal sdlog must be finite and >= 0", s));
                }
                LogNormal::new(m, s).map_err(|_| invalid("lognormal sdlog must be finite and >= 0", s))?.sample(rng)
            }
            CRandom::Geometric(a) => {
                let p = a.eval(c)?;
                if !(p > 0.0 && p <= 1.0) {
                    return Err(invalid("geometric p must lie in (0, 1]", p));
                }
                let g = Geometric::new(p).map_err(|_| invalid("geometric p", p))?;
                1.0 + g.sample(rng) as f64
            }
            CRandom::Binomial(a, b) => {
                let (n, p) = (a.eval(c)?, b.eval(c)?);
                let nr = libm::round(n);
                if !(n >= 0.0) || libm::fabs(n - nr) > 1e-9 {
                    return Err(invalid("binomial n must be a non-negative integer", n));
                }
                if !(0.0..=1.0).contains(&p) {
                    return Err(invalid("binomial p must lie in [0, 1]", p));
                }
                Binomial::new(nr as u64, p).map_err(|_| invalid("binomial p", p))?.sample(rng) as f64
            }
            CRandom::Weibull(a, b) => {
                let (k, rate) = (a.eval(c)?, b.eval(c)?);
                if !(k > 0.0) || !(rate > 0.0) {
                    return Err(invalid("weibull shape and rate must be positive", k.min(rate)));
                }
                Weibull::new(1.0 / rate, k).map_err(|_| invalid("weibull", k))?.sample(rng)
            }
            CRandom::Categorical(xs) => {
                let total = categorical_total(xs, c)?;
                let u: f64 = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = None;
                for (v, w) in xs.iter() {
                    let w = w.eval(c)?;
                    if w > 0.0 {
                        acc += w;
                        pick = Some(v);
                        if u < acc {
                            break;
                        }
                    }
                }
                pick.expect("positive total weight").eval(c)?
            }
        })
    }

    pub fn mean(&self, c: &Ctx<'_>) -> Result<f64, EvalError> {
        Ok(match self {
            CRandom::Constant(a) => a.eval(c)?,
            CRandom::Uniform(a, b) => 0.5 * (a.eval(c)? + b.eval(c)?),
            CRandom::Normal(a, _) => a.eval(c)?,
            CRandom::LogNormal(a, b) => {
                let s = b.eval(c)?;
                libm::exp(a.eval(c)? + 0.5 * s * s)
            }
            CRandom::Geometric(a) => {
                let p = a.eval(c)?;
                if !(p > 0.0 && p <= 1.0) {
                    return Err(invalid("geometric p must lie in (0, 1]", p));
                }
                1.0 / p
            }
            CRandom::Binomial(a, b) => a.eval(c)? * b.eval(c)?,
            CRandom::Weibull(a, b) => {
                let (k, rate) = (a.eval(c)?, b.eval(c)?);
                if !(k > 0.0) || !(rate > 0.0) {
                    return Err(invalid("weibull shape and rate must be positive", k.min(rate)));
                }
                libm::tgamma(1.0 + 1.0 / k) / rate
            }
            CRandom::Categorical(xs) => {
                let total = categorical_total(xs, c)?;
                let mut m = 0.0;
                for (v, w) in xs.iter() {
                    let w = w.eval(c)?;
                    if w > 0.0 {
                        m += v.eval(c)? * w;
                    }
                }
                m / total
            }
        })
    }

    pub fn for_each_slot(&self, f: &mut dyn FnMut(usize)) {
        match self {
            CRandom::Constant(a) | CRandom::Geometric(a) => a.for_each_slot(f),
            CRandom::Uniform(a, b)
            | CRandom::Normal(a, b)
            | CRandom::LogNormal(a, b)
            | CRandom::Binomial(a, b)
            | CRandom::Weibull(a, b) => {
                a.for_each_slot(f);
                b.for_each_slot(f);
            }
            CRandom::Categorical(xs) => xs.iter().for_each(|(v, w)| {
                v.for_each_slot(f);
                w.for_each_slot(f);
            }),
        }
    }
}

fn categorical_total(xs: &[(CExpr, CExpr)], c: &Ctx<'_>) -> Result<f64, EvalError> {
    let mut total = 0.0;
    for (_, w) in xs {
        let w = w.eval(c)?;
        if !(w >= 0.0) || !w.is_finite() {
            return Err(invalid("categorical weights must be finite and >= 0", w));
        }
        total += w;
    }
    if total <= 0.0 {
        return Err(invalid("categorical weights sum to zero", total));
    }
    Ok(total)
}

/// A unit-rate exponential draw.
#[inline]
pub fn exp1<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    Exp1.sample(rng)
}

// ---------------------------------------------------------------------------
// Canonical text form (the model-file syntax)

/// Formats a float so that it parses back to the same value.
pub fn fmt_num(v: f64) -> String {
    alloc::format!("{v}")
}

fn write_expr(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
    match e {
        Expr::Const(v) => f.write_str(&fmt_num(*v)),
        Expr::Var(n) => f.write_str(n),
        Expr::Size => f.write_str("N"),
        Expr::Time => f.write_str("time"),
        Expr::Neg(a) => {
            if min_prec > 3 {
                f.write_str("(")?;
            }
            f.write_str("-")?;
            if matches!(**a, Expr::Const(_)) {
                // `-3` would read back as a literal
                write!(f, "({a})")?;
            } else {
                write_expr(f, a, 3)?;
            }
            if min_prec > 3 {
                f.write_str(")")?;
            }
            Ok(())
        }
        Expr::Bin(op, a, b) => {
            let p = op.prec();
            let paren = p < min_prec;
            if paren {
                f.write_str("(")?;
            }
            write_expr(f, a, p)?;
            write!(f, " {} ", op.symbol())?;
            write_expr(f, b, p + 1)?;
            if paren {
                f.write_str(")")?;
            }
            Ok(())
        }
        Expr::Min(xs) | Expr::Max(xs) => {
            f.write_str(if matches!(e, Expr::Min(_)) { "min(" } else { "max(" })?;
            for (i, x) in xs.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                write_expr(f, x, 0)?;
            }
            f.write_str(")")
        }
        Expr::Ind(g) => write!(f, "ind({g})"),
        Expr::Floor(a) => {
            f.write_str("floor(")?;
            write_expr(f, a, 0)?;
            f.write_str(")")
        }
        Expr::Abs(a) => {
            f.write_str("abs(")?;
            write_expr(f, a, 0)?;
            f.write_str(")")
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(f, self, 0)
    }
}

fn write_guard(f: &mut fmt::Formatter<'_>, g: &Guard, in_and: bool) -> fmt::Result {
    match g {
        Guard::True => f.write_str("true"),
        Guard::Atom(a) => write!(f, "{} {} 0", a.expr, if a.strict { ">" } else { ">=" }),
        Guard::And(gs) if gs.is_empty() => f.write_str("true"),
        Guard::Or(gs) if gs.is_empty() => f.write_str("!true"),
        Guard::And(gs) => {
            for (i, c) in gs.iter().enumerate() {
                if i > 0 {
                    f.write_str(" && ")?;
                }
                let nested = matches!(c, Guard::And(_));
                if nested {
                    f.write_str("(")?;
                }
                write_guard(f, c, true)?;
                if nested {
                    f.write_str(")")?;
                }
            }
            Ok(())
        }
        Guard::Or(gs) => {
            if in_and {
                f.write_str("(")?;
            }
            for (i, c) in gs.iter().enumerate() {
                if i > 0 {
                    f.write_str(" || ")?;
                }
                let nested = matches!(c, Guard::Or(_));
                if nested {
                    f.write_str("(")?;
                }
                write_guard(f, c, false)?;
                if nested {
                    f.write_str(")")?;
                }
            }
            if in_and {
                f.write_str(")")?;
            }
            Ok(())
        }
    }
}

impl fmt::Display for Guard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_guard(f, self, false)
    }
}

impl fmt::Display for RandomSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.family())?;
        match self {
            RandomSpec::Categorical(xs) => {
                for (i, (v, w)) in xs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{v} : {w}")?;
                }
            }
            _ => {
                for (i, p) in self.params().iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{p}")?;
                }
            }
        }
        f.write_str(")")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn request_rate_min() {
        let e = Expr::Min(alloc::vec![
            Expr::mul(Expr::var("kr"), Expr::var("xr")),
            Expr::mul(Expr::var("ks"), Expr::var("xi")),
        ]);
        let env = Env::new().bind("kr", 2.0).bind("xr", 0.25).bind("ks", 0.8).bind("xi", 0.4);
        assert!(close(eval_expr(&e, &env).unwrap(), 0.32));
    }

    #[test]
    fn indicator_true_times_five() {
        let e = Expr::mul(Expr::Ind(Box::new(Guard::True)), Expr::c(5.0));
        assert_eq!(eval_expr(&e, &Env::new()).unwrap(), 5.0);
    }

    #[test]
    fn size_scaled_rate() {
        let e = Expr::mul(Expr::mul(Expr::Size, Expr::var("ks")), Expr::var("Xi"));
        let env = Env::with_size(1000.0).bind("ks", 0.01).bind("Xi", 2.0);
        assert!(close(eval_expr(&e, &env).unwrap(), 20.0));
    }

    #[test]
    fn eval_errors() {
        let env = Env::new();
        assert_eq!(eval_expr(&Expr::var("Q"), &env), Err(EvalError::UnboundVariable("Q".into())));
        assert_eq!(eval_expr(&Expr::div(Expr::c(1.0), Expr::c(0.0)), &env), Err(EvalError::DivisionByZero));
        assert_eq!(eval_expr(&Expr::Size, &env), Err(EvalError::SizeSymbolInLimitMode));
    }

    #[test]
    fn guard_atoms_at_boundary() {
        let env = Env::new().bind("X", 5.0);
        let x5 = Expr::sub(Expr::var("X"), Expr::c(5.0));
        assert!(eval_guard(&Guard::atom(x5.clone()), &env).unwrap());
        assert!(!eval_guard(&Guard::strict(x5), &env).unwrap());
        let g = Guard::strict(Expr::sub(Expr::div(Expr::var("Xi"), Expr::Size), Expr::c(0.1)));
        let env = Env::with_size(1000.0).bind("Xi", 200.0);
        assert!(eval_guard(&g, &env).unwrap());
    }

    #[test]
    fn activation_shapes() {
        let a = Expr::sub(Expr::var("X"), Expr::c(5.0));
        assert_eq!(activation_function(&Guard::atom(a.clone())).unwrap(), a);
        let g = Guard::And(alloc::vec![Guard::atom(a.clone()), Guard::atom(Expr::var("Y"))]);
        assert_eq!(activation_function(&g).unwrap(), Expr::Min(alloc::vec![a.clone(), Expr::var("Y")]));
        let g = Guard::Or(alloc::vec![Guard::atom(a.clone()), Guard::atom(Expr::var("Y"))]);
        assert_eq!(activation_function(&g).unwrap(), Expr::Max(alloc::vec![a, Expr::var("Y")]));
        assert_eq!(activation_function(&Guard::True), Err(ActivationError::GuardIsConstantTrue));
    }

    #[test]
    fn degenerate_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let env = Env::new();
        for _ in 0..100 {
            assert_eq!(sample_random(&RandomSpec::Constant(Expr::c(3.5)), &env, &mut rng).unwrap(), 3.5);
            assert_eq!(sample_random(&RandomSpec::Geometric(Expr::c(1.0)), &env, &mut rng).unwrap(), 1.0);
            let b = RandomSpec::Binomial(Expr::c(0.0), Expr::c(0.33));
            assert_eq!(sample_random(&b, &env, &mut rng).unwrap(), 0.0);
        }
    }

    #[test]
    fn closed_form_means() {
        let env = Env::new();
        assert_eq!(expected_value(&RandomSpec::Geometric(Expr::c(0.5)), &env).unwrap(), 2.0);
        let cat = RandomSpec::Categorical(alloc::vec![(Expr::c(1.0), Expr::c(0.5)), (Expr::c(-1.0), Expr::c(0.5))]);
        assert_eq!(expected_value(&cat, &env).unwrap(), 0.0);
        let b = RandomSpec::Binomial(Expr::c(10.0), Expr::c(0.33));
        assert!(close(expected_value(&b, &env).unwrap(), 3.3));
    }

    #[test]
    fn invalid_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let env = Env::new();
        for s in [
            RandomSpec::Geometric(Expr::c(0.0)),
            RandomSpec::Binomial(Expr::c(2.5), Expr::c(0.5)),
            RandomSpec::Weibull(Expr::c(-1.0), Expr::c(1.0)),
            RandomSpec::Normal(Expr::c(0.0), Expr::c(-1.0)),
        ] {
            assert!(matches!(sample_random(&s, &env, &mut rng), Err(EvalError::InvalidParameter(_))), "{s}");
        }
    }

    #[test]
    fn display_forms() {
        let e = Expr::sub(Expr::var("a"), Expr::sub(Expr::var("b"), Expr::c(-2.0)));
        assert_eq!(e.to_string(), "a - (b - -2)");
        let e = Expr::mul(Expr::add(Expr::var("a"), Expr::var("b")), Expr::Size);
        assert_eq!(e.to_string(), "(a + b) * N");
    }
}
