use alloc::format;
use alloc::string::String;
use core::fmt::Write;

use crate::expr::{fmt_num, Expr, Guard};
use crate::model::{Action, ActionClass, ActionKind, Continuation, Program, Update, UpdateRhs, VarKind};

/// Canonical source text for a program. Parsing the output yields an equal
/// program for anything the parser itself can produce.
pub fn pretty_print(p: &Program) -> String {
    let mut out = String::new();
    for (n, v) in &p.params {
        let _ = writeln!(out, "param {n} = {};", fmt_num(*v));
    }
    if let Some(n) = p.size {
        let _ = writeln!(out, "size N = {};", fmt_num(n));
    }
    for v in &p.variables {
        let kind = match v.kind {
            VarKind::Discrete => "discrete",
            VarKind::Continuous => "continuous",
            VarKind::Environment => "environment",
        };
        let _ = write!(out, "var {} : {kind} {} init {}", v.name, v.domain.keyword(), v.init);
        if let Some((lo, hi)) = v.range {
            let _ = write!(out, " range [{}, {}]", fmt_num(lo), fmt_num(hi));
        }
        out.push_str(";\n");
    }
    for c in &p.components {
        let _ = writeln!(out, "agent {} {{", c.name);
        for a in &c.actions {
            out.push_str("  ");
            action(&mut out, a);
            out.push('\n');
        }
        out.push_str("}\n");
    }
    if p.network != p.default_network() {
        let _ = writeln!(out, "system {};", network(&p.network));
    }
    out
}

fn network(net: &[(String, u32)]) -> String {
    if net.is_empty() {
        return "0".into();
    }
    let parts: alloc::vec::Vec<String> =
        net.iter().map(|(n, k)| if *k == 1 { n.clone() } else { format!("{n} * {k}") }).collect();
    parts.join(" || ")
}

fn action(out: &mut String, a: &Action) {
    let _ = write!(out, "{}:", a.name);
    if !matches!(a.guard, Guard::True) {
        let _ = write!(out, " [{}]", a.guard);
    }
    match &a.kind {
        ActionKind::Stochastic { rate } => {
            let _ = write!(out, " rate {rate}");
        }
        ActionKind::Instantaneous { weight } => {
            let _ = write!(out, " immediate weight {weight}");
        }
    }
    if a.class == ActionClass::Continuous {
        out.push_str(" class continuous");
    }
    out.push_str(" -> {");
    for (l, spec) in &a.reset.locals {
        let _ = write!(out, " let {l} = sample {spec};");
    }
    for u in &a.reset.updates {
        out.push(' ');
        update(out, u);
    }
    out.push_str(" }");
    if let Continuation::Network(n) = &a.next {
        let _ = write!(out, " then {}", network(n));
    }
    out.push(';');
}

fn update(out: &mut String, u: &Update) {
    let t = &u.target;
    let _ = match &u.rhs {
        UpdateRhs::IncrementBy(Expr::Const(c)) if *c < 0.0 => write!(out, "{t} -= {};", fmt_num(-c)),
        UpdateRhs::IncrementBy(Expr::Neg(x)) if !matches!(**x, Expr::Const(_)) => write!(out, "{t} -= {x};"),
        UpdateRhs::IncrementBy(e) => write!(out, "{t} += {e};"),
        UpdateRhs::SetTo(e) => write!(out, "{t} = {e};"),
        UpdateRhs::IncrementByRandom(s) => write!(out, "{t} += sample {s};"),
        UpdateRhs::SetToRandom(s) => write!(out, "{t} = sample {s};"),
    };
}
