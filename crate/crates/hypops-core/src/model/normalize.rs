//! Normalization by system size.
//!
//! Continuous-kind variables become densities `x = X/N`. At a fixed size
//! this is a plain substitution. In the limit each expression is reduced to
//! its leading term in `N`: a pair (degree, coefficient) computed
//! structurally, with the coefficient free of `N`.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use super::{is_flat, ActionClass, ActionKind, Domain, Normalization, Program, Reset, Update, UpdateRhs, VarKind};
use crate::expr::{Atom, BinOp, Expr, Guard, RandomSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NormalizeError {
    #[error("program must be flat before normalization")]
    NotFlat,
    #[error("program is already normalized")]
    AlreadyNormalized,
    #[error("{context}: the size symbol cannot be eliminated in the limit ({detail}); consult the scaling checker")]
    LimitNotNFree { context: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormMode {
    AtSize(f64),
    Limit,
}

/// Continuous-kind variables divided by `n`; everything else unchanged.
pub fn normalize_state(p: &Program, n: f64, raw: &[f64]) -> Vec<f64> {
    p.variables.iter().zip(raw).map(|(v, x)| if v.kind == VarKind::Continuous { x / n } else { *x }).collect()
}

pub fn denormalize_state(p: &Program, n: f64, dens: &[f64]) -> Vec<f64> {
    p.variables.iter().zip(dens).map(|(v, x)| if v.kind == VarKind::Continuous { x * n } else { *x }).collect()
}

pub fn normalize(p: &Program, mode: NormMode) -> Result<Program, NormalizeError> {
    if !is_flat(p) {
        return Err(NormalizeError::NotFlat);
    }
    if p.normalization != Normalization::Raw {
        return Err(NormalizeError::AlreadyNormalized);
    }
    let cont: Vec<String> =
        p.variables.iter().filter(|v| v.kind == VarKind::Continuous).map(|v| v.name.clone()).collect();
    match mode {
        NormMode::AtSize(n) => Ok(at_size(p, &cont, n)),
        NormMode::Limit => limit(p, &cont),
    }
}

// ---------------------------------------------------------------------------
// Fixed size

fn at_size(p: &Program, cont: &[String], n: f64) -> Program {
    let is_cont = |name: &str| cont.iter().any(|c| c == name);
    let subst = |e: &Expr| e.map_vars(&|v| if is_cont(v) { Expr::mul(Expr::Size, Expr::var(v)) } else { Expr::var(v) });
    let subst_g = |g: &Guard| g.map_vars(&|v| if is_cont(v) { Expr::mul(Expr::Size, Expr::var(v)) } else { Expr::var(v) });
    let per_size = |e: Expr| Expr::div(e, Expr::Size);

    let mut out = p.clone();
    for v in &mut out.variables {
        if v.kind == VarKind::Continuous {
            v.init = per_size(v.init.clone());
            v.domain = Domain::Real;
        }
    }
    for c in &mut out.components {
        for a in &mut c.actions {
            a.guard = subst_g(&a.guard);
            *a.intensity_mut() = subst(a.intensity());
            let mut locals: Vec<(String, RandomSpec)> =
                a.reset.locals.iter().map(|(l, s)| (l.clone(), s.map_exprs(&subst))).collect();
            let mut updates = Vec::new();
            for u in &a.reset.updates {
                let rhs = if is_cont(&u.target) {
                    match &u.rhs {
                        UpdateRhs::IncrementBy(e) => UpdateRhs::IncrementBy(per_size(subst(e))),
                        UpdateRhs::SetTo(e) => UpdateRhs::SetTo(per_size(subst(e))),
                        UpdateRhs::IncrementByRandom(s) | UpdateRhs::SetToRandom(s) => {
                            let local = fresh_local(&locals, &u.target);
                            locals.push((local.clone(), s.map_exprs(&subst)));
                            let v = per_size(Expr::Var(local));
                            if matches!(u.rhs, UpdateRhs::IncrementByRandom(_)) {
                                UpdateRhs::IncrementBy(v)
                            } else {
                                UpdateRhs::SetTo(v)
                            }
                        }
                    }
                } else {
                    match &u.rhs {
                        UpdateRhs::IncrementBy(e) => UpdateRhs::IncrementBy(subst(e)),
                        UpdateRhs::SetTo(e) => UpdateRhs::SetTo(subst(e)),
                        UpdateRhs::IncrementByRandom(s) => UpdateRhs::IncrementByRandom(s.map_exprs(&subst)),
                        UpdateRhs::SetToRandom(s) => UpdateRhs::SetToRandom(s.map_exprs(&subst)),
                    }
                };
                updates.push(Update { target: u.target.clone(), rhs });
            }
            a.reset = Reset { locals, updates };
        }
    }
    out.size = Some(n);
    out.normalization = Normalization::AtSize(n);
    out
}

fn fresh_local(locals: &[(String, RandomSpec)], target: &str) -> String {
    let mut name = format!("_d{target}");
    while locals.iter().any(|(l, _)| *l == name) {
        name.push('_');
    }
    name
}

// ---------------------------------------------------------------------------
// Limit

/// Leading term `coef * N^deg`; `None` stands for an expression that is
/// identically zero.
type Lead = Option<(i32, Expr)>;

struct Scope<'a> {
    cont: &'a [String],
    /// Deterministic locals (law of large numbers) and random locals.
    locals: Vec<(String, Lead)>,
}

fn smul(a: Expr, b: Expr) -> Expr {
    if a.is_const(1.0) {
        b
    } else if b.is_const(1.0) {
        a
    } else if let (Expr::Const(x), Expr::Const(y)) = (&a, &b) {
        Expr::Const(x * y)
    } else {
        Expr::mul(a, b)
    }
}

fn sdiv(a: Expr, b: Expr) -> Expr {
    if b.is_const(1.0) {
        a
    } else {
        Expr::div(a, b)
    }
}

fn sneg(a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(-c),
        a => Expr::neg(a),
    }
}

impl Scope<'_> {
    fn lead(&self, e: &Expr) -> Result<Lead, String> {
        Ok(match e {
            Expr::Const(c) if *c == 0.0 => None,
            Expr::Const(c) => Some((0, Expr::Const(*c))),
            Expr::Var(n) => {
                if let Some((_, l)) = self.locals.iter().find(|(l, _)| l == n) {
                    l.clone()
                } else if self.cont.iter().any(|c| c == n) {
                    Some((1, Expr::var(n)))
                } else {
                    Some((0, Expr::var(n)))
                }
            }
            Expr::Size => Some((1, Expr::Const(1.0))),
            Expr::Time => Some((0, Expr::Time)),
            Expr::Neg(a) => self.lead(a)?.map(|(d, c)| (d, sneg(c))),
            Expr::Bin(op @ (BinOp::Add | BinOp::Sub), a, b) => {
                let (la, lb) = (self.lead(a)?, self.lead(b)?);
                let lb = lb.map(|(d, c)| (d, if *op == BinOp::Sub { sneg(c) } else { c }));
                match (la, lb) {
                    (None, x) | (x, None) => x,
                    (Some((da, ca)), Some((db, cb))) => {
                        if da > db {
                            Some((da, ca))
                        } else if db > da {
                            Some((db, cb))
                        } else {
                            match (&ca, &cb) {
                                (Expr::Const(x), Expr::Const(y)) if x + y == 0.0 => None,
                                (_, Expr::Neg(inner)) => Some((da, Expr::sub(ca, (**inner).clone()))),
                                (_, Expr::Const(y)) if *y < 0.0 => Some((da, Expr::sub(ca, Expr::Const(-y)))),
                                _ => Some((da, Expr::add(ca, cb))),
                            }
                        }
                    }
                }
            }
            Expr::Bin(BinOp::Mul, a, b) => match (self.lead(a)?, self.lead(b)?) {
                (Some((da, ca)), Some((db, cb))) => Some((da + db, smul(ca, cb))),
                _ => None,
            },
            Expr::Bin(BinOp::Div, a, b) => match (self.lead(a)?, self.lead(b)?) {
                (_, None) => return Err("division by an expression that vanishes identically".into()),
                (None, _) => None,
                (Some((da, ca)), Some((db, cb))) => Some((da - db, sdiv(ca, cb))),
            },
            Expr::Min(xs) | Expr::Max(xs) => {
                let mut deg = None;
                let mut coefs = Vec::new();
                for x in xs {
                    let l = self.lead(x)?;
                    let d = l.as_ref().map(|(d, _)| *d);
                    if deg.is_some() && deg != Some(d) {
                        return Err(format!("arguments of `{}` grow at different orders in N", e));
                    }
                    deg = Some(d);
                    coefs.push(l.map(|(_, c)| c).unwrap_or(Expr::Const(0.0)));
                }
                match deg.flatten() {
                    None => None,
                    Some(d) => Some((d, if matches!(e, Expr::Min(_)) { Expr::Min(coefs) } else { Expr::Max(coefs) })),
                }
            }
            Expr::Ind(g) => Some((0, Expr::Ind(Box::new(self.guard(g)?)))),
            Expr::Floor(a) => match self.lead(a)? {
                None => None,
                Some((d, c)) if d > 0 => Some((d, c)),
                Some((0, c)) => Some((0, Expr::Floor(Box::new(c)))),
                Some(_) => return Err(format!("floor of a vanishing quantity in `{e}`")),
            },
            Expr::Abs(a) => self.lead(a)?.map(|(d, c)| (d, Expr::Abs(Box::new(c)))),
        })
    }

    fn guard(&self, g: &Guard) -> Result<Guard, String> {
        Ok(match g {
            Guard::True => Guard::True,
            Guard::Atom(a) => {
                let expr = match self.lead(&a.expr)? {
                    None => Expr::Const(0.0),
                    Some((_, c)) => c,
                };
                Guard::Atom(Atom { expr, strict: a.strict })
            }
            Guard::And(gs) => Guard::And(gs.iter().map(|g| self.guard(g)).collect::<Result<_, _>>()?),
            Guard::Or(gs) => Guard::Or(gs.iter().map(|g| self.guard(g)).collect::<Result<_, _>>()?),
        })
    }

    /// Coefficient at exactly degree `want`; lower orders vanish, higher
    /// orders are an error.
    fn at_degree(&self, e: &Expr, want: i32) -> Result<Expr, String> {
        match self.lead(e)? {
            None => Ok(Expr::Const(0.0)),
            Some((d, c)) if d == want => Ok(c),
            Some((d, _)) if d < want => Ok(Expr::Const(0.0)),
            Some((d, _)) => Err(format!("`{e}` grows like N^{d}, expected at most N^{want}")),
        }
    }

    fn deg0_params(&self, s: &RandomSpec) -> Result<RandomSpec, String> {
        for x in s.params() {
            self.at_degree(x, 0)?;
        }
        Ok(s.map_exprs(&|x| self.at_degree(x, 0).unwrap_or(Expr::Const(0.0))))
    }

    /// Leading behaviour of a random draw. Deterministic limits (law of
    /// large numbers) become plain coefficients; genuinely random limits
    /// keep a local with N-free parameters.
    fn random_lead(&self, s: &RandomSpec) -> Result<(Lead, Option<RandomSpec>), String> {
        let max_deg = |xs: &[&Expr]| -> Result<Option<i32>, String> {
            let mut m = None;
            for x in xs {
                if let Some((d, _)) = self.lead(x)? {
                    m = Some(m.map_or(d, |k: i32| k.max(d)));
                }
            }
            Ok(m)
        };
        match s {
            RandomSpec::Constant(e) => Ok((self.lead(e)?, None)),
            RandomSpec::Binomial(n, p) => {
                let pc = self.at_degree(p, 0)?;
                match self.lead(n)? {
                    None => Ok((None, None)),
                    Some((d, nc)) if d >= 1 => Ok((Some((d, smul(nc, pc))), None)),
                    Some(_) => Ok((Some((0, Expr::Const(1.0))), Some(self.deg0_params(s)?))),
                }
            }
            RandomSpec::Uniform(a, b) | RandomSpec::Normal(a, b) => {
                let d = max_deg(&[a, b])?.unwrap_or(0);
                if d > 1 {
                    return Err(format!("`{s}` grows faster than N"));
                }
                let spec = if d == 1 {
                    s.map_exprs(&|x| self.at_degree(x, 1).unwrap_or(Expr::Const(0.0)))
                } else {
                    self.deg0_params(s)?
                };
                Ok((Some((d.max(0), Expr::Const(1.0))), Some(spec)))
            }
            _ => Ok((Some((0, Expr::Const(1.0))), Some(self.deg0_params(s)?))),
        }
    }
}

fn limit(p: &Program, cont: &[String]) -> Result<Program, NormalizeError> {
    let is_cont = |name: &str| cont.iter().any(|c| c == name);
    let mut out = p.clone();
    let top = Scope { cont, locals: Vec::new() };
    let err = |context: String| move |detail: String| NormalizeError::LimitNotNFree { context, detail };

    for v in &mut out.variables {
        let ctx = format!("init of `{}`", v.name);
        if v.kind == VarKind::Continuous {
            v.init = top.at_degree(&v.init, 1).map_err(err(ctx))?;
            v.domain = Domain::Real;
        } else {
            v.init = top.at_degree(&v.init, 0).map_err(err(ctx))?;
        }
    }

    for c in &mut out.components {
        for a in &mut c.actions {
            let ctx = format!("action `{}`", a.name);
            a.guard = top.guard(&a.guard).map_err(err(ctx.clone()))?;
            let continuous = a.class == ActionClass::Continuous;
            let want = if continuous { 1 } else { 0 };
            let new_intensity = match &a.kind {
                ActionKind::Stochastic { rate } => top.at_degree(rate, want),
                ActionKind::Instantaneous { weight } => top.at_degree(weight, 0),
            }
            .map_err(err(ctx.clone()))?;
            *a.intensity_mut() = new_intensity;

            if continuous {
                // Unscaled increments; the flow divides the rate instead.
                for u in &mut a.reset.updates {
                    if let UpdateRhs::IncrementBy(e) = &u.rhs {
                        u.rhs = UpdateRhs::IncrementBy(top.at_degree(e, 0).map_err(err(ctx.clone()))?);
                    }
                }
                continue;
            }

            let mut scope = Scope { cont, locals: Vec::new() };
            let mut locals = Vec::new();
            for (l, s) in &a.reset.locals {
                let (lead, spec) = scope.random_lead(s).map_err(err(ctx.clone()))?;
                match spec {
                    Some(spec) => {
                        let d = lead.as_ref().map_or(0, |(d, _)| *d);
                        scope.locals.push((l.clone(), Some((d, Expr::Var(l.clone())))));
                        locals.push((l.clone(), spec));
                    }
                    None => scope.locals.push((l.clone(), lead)),
                }
            }
            let mut updates = Vec::new();
            for u in &a.reset.updates {
                let want = if is_cont(&u.target) { 1 } else { 0 };
                let ctx = format!("action `{}`, update of `{}`", a.name, u.target);
                let rhs = match &u.rhs {
                    UpdateRhs::IncrementBy(e) => {
                        let c = scope.at_degree(e, want).map_err(err(ctx))?;
                        if c.is_const(0.0) {
                            continue;
                        }
                        UpdateRhs::IncrementBy(c)
                    }
                    UpdateRhs::SetTo(e) => UpdateRhs::SetTo(scope.at_degree(e, want).map_err(err(ctx))?),
                    UpdateRhs::IncrementByRandom(s) | UpdateRhs::SetToRandom(s) => {
                        let inc = matches!(u.rhs, UpdateRhs::IncrementByRandom(_));
                        let (lead, spec) = scope.random_lead(s).map_err(err(ctx.clone()))?;
                        let d = lead.as_ref().map_or(i32::MIN, |(d, _)| *d);
                        if d > want {
                            return Err(err(ctx)(format!("`{s}` grows faster than N^{want}")));
                        }
                        match (spec, d == want) {
                            (Some(spec), true) => {
                                if inc {
                                    UpdateRhs::IncrementByRandom(spec)
                                } else {
                                    UpdateRhs::SetToRandom(spec)
                                }
                            }
                            (None, true) => {
                                let c = lead.map(|(_, c)| c).unwrap_or(Expr::Const(0.0));
                                if inc {
                                    UpdateRhs::IncrementBy(c)
                                } else {
                                    UpdateRhs::SetTo(c)
                                }
                            }
                            (_, false) => {
                                if inc {
                                    continue;
                                }
                                UpdateRhs::SetTo(Expr::Const(0.0))
                            }
                        }
                    }
                };
                updates.push(Update { target: u.target.clone(), rhs });
            }
            // Keep only random locals still referenced.
            locals.retain(|(l, _)| {
                updates.iter().any(|u| match &u.rhs {
                    UpdateRhs::IncrementBy(e) | UpdateRhs::SetTo(e) => e.vars().iter().any(|v| v == l),
                    _ => false,
                })
            });
            a.reset = Reset { locals, updates };
        }
    }
    out.size = None;
    out.normalization = Normalization::Limit;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{eval_expr, Env};
    use crate::parser::parse_model;

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

    fn rate_of(p: &Program, name: &str) -> Expr {
        p.actions().find(|(_, a)| a.name == name).unwrap().1.intensity().clone()
    }

    #[test]
    fn limit_request_rate() {
        let p = parse_model(CS_HYBRID).unwrap();
        let l = normalize(&p, NormMode::Limit).unwrap();
        let g = rate_of(&l, "request");
        assert_eq!(g.to_string(), "min(kr * Xr, ks * Xi)");
        let env = Env::new().bind("kr", 2.0).bind("ks", 0.01).bind("Xr", 0.3).bind("Xi", 2.0);
        assert!((eval_expr(&g, &env).unwrap() - 0.02).abs() < 1e-15);
        // increments stay unscaled in the limit
        let req = l.actions().find(|(_, a)| a.name == "request").unwrap().1;
        assert_eq!(req.reset.updates[0].rhs, UpdateRhs::IncrementBy(Expr::c(-1.0)));
        assert_eq!(l.var("Xr").unwrap().init, Expr::c(1.0));
    }

    #[test]
    fn at_size_increment_is_scaled() {
        let p = parse_model(CS_HYBRID).unwrap();
        let s = normalize(&p, NormMode::AtSize(1000.0)).unwrap();
        let think = s.actions().find(|(_, a)| a.name == "think").unwrap().1;
        let UpdateRhs::IncrementBy(e) = &think.reset.updates[0].rhs else { panic!() };
        assert_eq!(eval_expr(e, &Env::with_size(1000.0)).unwrap(), 1.0 / 1000.0);
        // rate evaluated on densities equals the raw rate at X = N x
        let env = Env::with_size(1000.0).bind("kr", 2.0).bind("ks", 0.01).bind("Xr", 0.3).bind("Xi", 2.0);
        assert!((eval_expr(&rate_of(&s, "request"), &env).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn environment_reset_untouched() {
        let src = "var Xi : discrete init 1; var K : environment init 0;
            agent s { b: rate 1 -> { Xi -= 1; K = time + 3; }; }";
        let p = parse_model(src).unwrap();
        for mode in [NormMode::AtSize(100.0), NormMode::Limit] {
            let q = normalize(&p, mode).unwrap();
            let b = &q.components[0].actions[0];
            assert_eq!(b.reset.updates[1], p.components[0].actions[0].reset.updates[1]);
        }
    }

    #[test]
    fn size_dependent_guard_loses_offset() {
        let src = "param k = 0.5; var X : continuous int init 0; var Z : discrete int init 0;
            agent rw { up: rate N class continuous -> { X += 1; }; }
            agent d { doom: [Z == 0 && X >= N * k - 2] immediate weight 1 -> { Z = -1; }; }";
        let l = normalize(&parse_model(src).unwrap(), NormMode::Limit).unwrap();
        let doom = &l.components[1].actions[0];
        assert_eq!(doom.guard.to_string(), "Z >= 0 && -Z >= 0 && X - k >= 0");
        assert_eq!(rate_of(&l, "up"), Expr::c(1.0));
    }

    #[test]
    fn superlinear_rate_is_rejected() {
        let src = "param k = 1; var A : continuous init N; var B : continuous init N;
            agent r { meet: rate k * A * B class continuous -> { A -= 1; B -= 1; }; }";
        let e = normalize(&parse_model(src).unwrap(), NormMode::Limit).unwrap_err();
        assert!(matches!(e, NormalizeError::LimitNotNFree { .. }), "{e}");
    }

    #[test]
    fn binomial_reset_obeys_large_numbers() {
        let src = "param p = 0.33; var Xr : continuous init N; var Xd : continuous init 0;
            agent worm { hit: rate 0.1 -> { let W = sample binomial(Xr, p); Xr -= W; Xd += W; }; }";
        let l = normalize(&parse_model(src).unwrap(), NormMode::Limit).unwrap();
        let a = &l.components[0].actions[0];
        assert!(a.reset.locals.is_empty());
        let UpdateRhs::IncrementBy(e) = &a.reset.updates[0].rhs else { panic!() };
        let env = Env::new().bind("Xr", 0.5).bind("p", 0.33);
        assert!((eval_expr(e, &env).unwrap() + 0.165).abs() < 1e-15);
    }

    #[test]
    fn discrete_jump_on_continuous_variable_vanishes() {
        let src = "var P : continuous init 0; var G : discrete init 1;
            agent g { bind: rate P / N * G -> { P -= 1; G -= 1; }; }";
        let l = normalize(&parse_model(src).unwrap(), NormMode::Limit).unwrap();
        let a = &l.components[0].actions[0];
        assert_eq!(a.reset.updates.len(), 1);
        assert_eq!(a.reset.updates[0].target, "G");
        assert_eq!(a.intensity().to_string(), "P * G");
    }

    #[test]
    fn normalize_denormalize_roundtrip() {
        let p = parse_model(CS_HYBRID).unwrap();
        let raw = [700.0, 300.0, 2.0, 0.0];
        let d = normalize_state(&p, 1000.0, &raw);
        assert_eq!(d, [0.7, 0.3, 2.0, 0.0]);
        assert_eq!(denormalize_state(&p, 1000.0, &d), raw);
    }
}
