use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::lexer::{Tok, Token};
use super::{Diagnostic, Positions};
use crate::expr::{Atom, CExpr, Ctx, Expr, Guard, RandomSpec, Slot};
use crate::model::{
    Action, ActionClass, ActionKind, Component, Continuation, Program, Reset, Update, UpdateRhs, VarKind, VariableDecl,
};

const MAX_DEPTH: u32 = 200;

pub struct Parser {
    toks: Vec<Token>,
    pos: usize,
    depth: u32,
}

type PResult<T> = Result<T, Diagnostic>;

impl Parser {
    pub fn new(toks: Vec<Token>) -> Parser {
        Parser { toks, pos: 0, depth: 0 }
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.pos.min(self.toks.len() - 1)].tok
    }

    fn peek_at(&self, k: usize) -> &Tok {
        &self.toks[(self.pos + k).min(self.toks.len() - 1)].tok
    }

    fn here(&self) -> (u32, u32) {
        let t = &self.toks[self.pos.min(self.toks.len() - 1)];
        (t.line, t.col)
    }

    fn err<T>(&self, msg: String) -> PResult<T> {
        let (l, c) = self.here();
        Err(Diagnostic::new(l, c, msg))
    }

    fn describe(&self) -> String {
        match self.peek() {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Num(v) => format!("`{v}`"),
            Tok::Sym(s) => format!("`{s}`"),
            Tok::Eof => "end of input".to_string(),
        }
    }

    fn bump(&mut self) {
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
    }

    fn is_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Tok::Sym(t) if *t == s)
    }

    fn is_kw(&self, s: &str) -> bool {
        matches!(self.peek(), Tok::Ident(t) if t == s)
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if self.is_sym(s) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn eat_kw(&mut self, s: &str) -> bool {
        if self.is_kw(s) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &str) -> PResult<()> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            self.err(format!("expected `{s}`, found {}", self.describe()))
        }
    }

    fn expect_kw(&mut self, s: &str) -> PResult<()> {
        if self.eat_kw(s) {
            Ok(())
        } else {
            self.err(format!("expected `{s}`, found {}", self.describe()))
        }
    }

    fn ident(&mut self, what: &str) -> PResult<String> {
        if let Tok::Ident(s) = self.peek() {
            let s = s.clone();
            self.bump();
            Ok(s)
        } else {
            self.err(format!("expected {what}, found {}", self.describe()))
        }
    }

    fn enter(&mut self) -> PResult<()> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return self.err("expression nested too deeply".into());
        }
        Ok(())
    }

    // -----------------------------------------------------------------------

    pub fn program(&mut self) -> PResult<(Program, Positions)> {
        let mut p = Program::default();
        let mut pos = Positions::default();
        let mut network = None;
        loop {
            let (l, c) = self.here();
            match self.peek().clone() {
                Tok::Eof => break,
                Tok::Ident(k) if k == "param" => {
                    self.bump();
                    let (l, c) = self.here();
                    let name = self.ident("parameter name")?;
                    self.expect_sym("=")?;
                    let (el, ec) = self.here();
                    let e = self.expr()?;
                    self.expect_sym(";")?;
                    let r = |n: &str| p.param(n).map(Slot::Const);
                    let v = CExpr::compile(&e, &r)
                        .and_then(|c| c.eval(&Ctx { vals: &[], time: 0.0, size: None }))
                        .map_err(|err| Diagnostic::new(el, ec, format!("parameter `{name}`: {err}")))?;
                    pos.names.push((name.clone(), l, c));
                    p.params.push((name, v));
                }
                Tok::Ident(k) if k == "size" => {
                    self.bump();
                    self.expect_kw("N")?;
                    if self.eat_sym("=") {
                        let (el, ec) = self.here();
                        let e = self.expr()?;
                        let r = |n: &str| p.param(n).map(Slot::Const);
                        let v = CExpr::compile(&e, &r)
                            .and_then(|c| c.eval(&Ctx { vals: &[], time: 0.0, size: None }))
                            .map_err(|err| Diagnostic::new(el, ec, format!("size: {err}")))?;
                        p.size = Some(v);
                    }
                    self.expect_sym(";")?;
                }
                Tok::Ident(k) if k == "var" => {
                    self.bump();
                    let (l, c) = self.here();
                    let v = self.var_decl()?;
                    pos.names.push((v.name.clone(), l, c));
                    p.variables.push(v);
                }
                Tok::Ident(k) if k == "agent" => {
                    self.bump();
                    let (l, c) = self.here();
                    let name = self.ident("agent name")?;
                    pos.names.push((name.clone(), l, c));
                    self.expect_sym("{")?;
                    let mut actions = Vec::new();
                    while !self.eat_sym("}") {
                        let (l, c) = self.here();
                        let a = self.action()?;
                        pos.names.push((a.name.clone(), l, c));
                        actions.push(a);
                    }
                    p.components.push(Component { name, actions });
                }
                Tok::Ident(k) if k == "system" => {
                    self.bump();
                    if network.is_some() {
                        return Err(Diagnostic::new(l, c, "duplicate `system` declaration".into()));
                    }
                    let net = self.network()?;
                    self.expect_sym(";")?;
                    network = Some(net);
                }
                _ => return self.err(format!("expected `param`, `size`, `var`, `agent` or `system`, found {}", self.describe())),
            }
        }
        p.network = network.unwrap_or_else(|| p.default_network());
        Ok((p, pos))
    }

    fn var_decl(&mut self) -> PResult<VariableDecl> {
        let name = self.ident("variable name")?;
        self.expect_sym(":")?;
        let kind = match self.peek() {
            Tok::Ident(k) if k == "discrete" => VarKind::Discrete,
            Tok::Ident(k) if k == "continuous" => VarKind::Continuous,
            Tok::Ident(k) if k == "environment" => VarKind::Environment,
            _ => return self.err(format!("expected `discrete`, `continuous` or `environment`, found {}", self.describe())),
        };
        self.bump();
        let mut v = VariableDecl::new(&name, kind, Expr::Const(0.0));
        for (kw, d) in [("nat", crate::model::Domain::Natural), ("int", crate::model::Domain::Integer), ("real", crate::model::Domain::Real)] {
            if self.eat_kw(kw) {
                v.domain = d;
                break;
            }
        }
        self.expect_kw("init")?;
        v.init = self.expr()?;
        if self.eat_kw("range") {
            self.expect_sym("[")?;
            let lo = self.signed_number()?;
            self.expect_sym(",")?;
            let hi = self.signed_number()?;
            self.expect_sym("]")?;
            v.range = Some((lo, hi));
        }
        self.expect_sym(";")?;
        Ok(v)
    }

    fn signed_number(&mut self) -> PResult<f64> {
        let neg = self.eat_sym("-");
        match *self.peek() {
            Tok::Num(v) => {
                self.bump();
                Ok(if neg { -v } else { v })
            }
            _ => self.err(format!("expected a number, found {}", self.describe())),
        }
    }

    fn network(&mut self) -> PResult<Vec<(String, u32)>> {
        if let Tok::Num(v) = *self.peek() {
            if v == 0.0 {
                self.bump();
                return Ok(Vec::new());
            }
        }
        let mut net: Vec<(String, u32)> = Vec::new();
        loop {
            let name = self.ident("component name")?;
            let mut k = 1u32;
            if self.eat_sym("*") {
                match *self.peek() {
                    Tok::Num(v) if v >= 1.0 && v == libm::floor(v) && v < 1e9 => {
                        k = v as u32;
                        self.bump();
                    }
                    _ => return self.err(format!("expected a positive integer multiplicity, found {}", self.describe())),
                }
            }
            match net.iter_mut().find(|(n, _)| *n == name) {
                Some(e) => e.1 += k,
                None => net.push((name, k)),
            }
            if !self.eat_sym("||") {
                break;
            }
        }
        Ok(net)
    }

    fn action(&mut self) -> PResult<Action> {
        let name = self.ident("action name")?;
        self.expect_sym(":")?;
        let guard = if self.eat_sym("[") {
            let g = self.guard()?;
            self.expect_sym("]")?;
            g
        } else {
            Guard::True
        };
        let kind = if self.eat_kw("rate") {
            ActionKind::Stochastic { rate: self.expr()? }
        } else if self.eat_kw("immediate") {
            self.expect_kw("weight")?;
            ActionKind::Instantaneous { weight: self.expr()? }
        } else {
            return self.err(format!("expected `rate` or `immediate`, found {}", self.describe()));
        };
        let mut class = ActionClass::Discrete;
        if self.eat_kw("class") {
            class = if self.eat_kw("continuous") {
                ActionClass::Continuous
            } else if self.eat_kw("discrete") {
                ActionClass::Discrete
            } else {
                return self.err(format!("expected `continuous` or `discrete`, found {}", self.describe()));
            };
        }
        self.expect_sym("->")?;
        self.expect_sym("{")?;
        let mut reset = Reset::default();
        while !self.eat_sym("}") {
            if self.eat_kw("let") {
                let local = self.ident("local name")?;
                self.expect_sym("=")?;
                self.expect_kw("sample")?;
                let spec = self.distribution()?;
                self.expect_sym(";")?;
                reset.locals.push((local, spec));
                continue;
            }
            let target = self.ident("variable name or `}`")?;
            let op = match self.peek() {
                Tok::Sym(s @ ("+=" | "-=" | "=")) => *s,
                _ => return self.err(format!("expected `+=`, `-=` or `=`, found {}", self.describe())),
            };
            self.bump();
            let rhs = if self.eat_kw("sample") {
                let spec = self.distribution()?;
                match op {
                    "+=" => UpdateRhs::IncrementByRandom(spec),
                    "=" => UpdateRhs::SetToRandom(spec),
                    _ => return self.err("`-= sample` is not supported; bind the draw with `let` and subtract it".into()),
                }
            } else {
                let e = self.expr()?;
                match op {
                    "+=" => UpdateRhs::IncrementBy(e),
                    "-=" => UpdateRhs::IncrementBy(match e {
                        Expr::Const(c) => Expr::Const(-c),
                        e => Expr::neg(e),
                    }),
                    _ => UpdateRhs::SetTo(e),
                }
            };
            self.expect_sym(";")?;
            reset.updates.push(Update { target, rhs });
        }
        let next = if self.eat_kw("then") { Continuation::Network(self.network()?) } else { Continuation::Recurse };
        self.expect_sym(";")?;
        Ok(Action { name, kind, guard, reset, class, next })
    }

    fn distribution(&mut self) -> PResult<RandomSpec> {
        let (l, c) = self.here();
        let fam = self.ident("distribution name")?;
        self.expect_sym("(")?;
        if fam == "categorical" {
            let mut xs = Vec::new();
            loop {
                let v = self.expr()?;
                self.expect_sym(":")?;
                let w = self.expr()?;
                xs.push((v, w));
                if !self.eat_sym(",") {
                    break;
                }
            }
            self.expect_sym(")")?;
            return Ok(RandomSpec::Categorical(xs));
        }
        let mut args = Vec::new();
        if !self.is_sym(")") {
            loop {
                args.push(self.expr()?);
                if !self.eat_sym(",") {
                    break;
                }
            }
        }
        self.expect_sym(")")?;
        let arity = match fam.as_str() {
            "constant" | "geometric" => 1,
            "uniform" | "normal" | "lognormal" | "binomial" | "weibull" => 2,
            _ => return Err(Diagnostic::new(l, c, format!("unknown distribution `{fam}`"))),
        };
        if args.len() != arity {
            return Err(Diagnostic::new(l, c, format!("`{fam}` takes {arity} argument(s), got {}", args.len())));
        }
        let mut it = args.into_iter();
        let mut a = || it.next().unwrap();
        Ok(match fam.as_str() {
            "constant" => RandomSpec::Constant(a()),
            "geometric" => RandomSpec::Geometric(a()),
            "uniform" => RandomSpec::Uniform(a(), a()),
            "normal" => RandomSpec::Normal(a(), a()),
            "lognormal" => RandomSpec::LogNormal(a(), a()),
            "binomial" => RandomSpec::Binomial(a(), a()),
            _ => RandomSpec::Weibull(a(), a()),
        })
    }

    // -----------------------------------------------------------------------
    // Guards

    pub fn guard(&mut self) -> PResult<Guard> {
        self.enter()?;
        let mut parts = alloc::vec![self.conj()?];
        while self.eat_sym("||") {
            parts.push(self.conj()?);
        }
        self.depth -= 1;
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Guard::Or(parts) })
    }

    fn conj(&mut self) -> PResult<Guard> {
        let mut parts = Vec::new();
        loop {
            match self.gprim()? {
                GPrim::One(g) => parts.push(g),
                GPrim::Splice(gs) => parts.extend(gs),
            }
            if !self.eat_sym("&&") {
                break;
            }
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Guard::And(parts) })
    }

    fn gprim(&mut self) -> PResult<GPrim> {
        if self.eat_sym("!") {
            self.enter()?;
            let g = match self.gprim()? {
                GPrim::One(g) => g,
                GPrim::Splice(gs) => Guard::And(gs),
            };
            self.depth -= 1;
            return Ok(GPrim::One(g.negate()));
        }
        if self.eat_kw("true") {
            return Ok(GPrim::One(Guard::True));
        }
        if self.is_sym("(") {
            let save = (self.pos, self.depth);
            self.bump();
            if let Ok(g) = self.guard() {
                if self.eat_sym(")") && !self.at_operator() {
                    return Ok(GPrim::One(g));
                }
            }
            self.pos = save.0;
            self.depth = save.1;
        }
        self.comparison()
    }

    fn at_operator(&self) -> bool {
        matches!(self.peek(), Tok::Sym("+" | "-" | "*" | "/" | ">=" | ">" | "<=" | "<" | "==" | "!="))
    }

    fn comparison(&mut self) -> PResult<GPrim> {
        let a = self.expr()?;
        let op = match self.peek() {
            Tok::Sym(s @ (">=" | ">" | "<=" | "<" | "==" | "!=")) => *s,
            _ => return self.err(format!("expected a comparison operator, found {}", self.describe())),
        };
        self.bump();
        let b = self.expr()?;
        Ok(match op {
            ">=" => GPrim::One(ge(a, b, false)),
            ">" => GPrim::One(ge(a, b, true)),
            "<=" => GPrim::One(le(a, b, false)),
            "<" => GPrim::One(le(a, b, true)),
            "==" => GPrim::Splice(alloc::vec![ge(a.clone(), b.clone(), false), le(a, b, false)]),
            _ => GPrim::One(Guard::Or(alloc::vec![ge(a.clone(), b.clone(), true), le(a, b, true)])),
        })
    }

    // -----------------------------------------------------------------------
    // Expressions

    pub fn expr(&mut self) -> PResult<Expr> {
        self.enter()?;
        let mut e = self.term()?;
        loop {
            if self.eat_sym("+") {
                e = Expr::add(e, self.term()?);
            } else if self.eat_sym("-") {
                e = Expr::sub(e, self.term()?);
            } else {
                break;
            }
        }
        self.depth -= 1;
        Ok(e)
    }

    fn term(&mut self) -> PResult<Expr> {
        let mut e = self.unary()?;
        loop {
            if self.eat_sym("*") {
                e = Expr::mul(e, self.unary()?);
            } else if self.eat_sym("/") {
                e = Expr::div(e, self.unary()?);
            } else {
                break;
            }
        }
        Ok(e)
    }

    fn unary(&mut self) -> PResult<Expr> {
        if self.eat_sym("-") {
            if let Tok::Num(v) = *self.peek() {
                self.bump();
                return Ok(Expr::Const(-v));
            }
            self.enter()?;
            let e = self.unary()?;
            self.depth -= 1;
            return Ok(Expr::neg(e));
        }
        self.primary()
    }

    fn primary(&mut self) -> PResult<Expr> {
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Const(v))
            }
            Tok::Sym("(") => {
                self.bump();
                let e = self.expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            Tok::Ident(n) => {
                let call = matches!(self.peek_at(1), Tok::Sym("("));
                self.bump();
                match n.as_str() {
                    "N" => Ok(Expr::Size),
                    "time" => Ok(Expr::Time),
                    "min" | "max" if call => {
                        self.bump();
                        let mut xs = alloc::vec![self.expr()?];
                        while self.eat_sym(",") {
                            xs.push(self.expr()?);
                        }
                        self.expect_sym(")")?;
                        Ok(if n == "min" { Expr::Min(xs) } else { Expr::Max(xs) })
                    }
                    "floor" | "abs" if call => {
                        self.bump();
                        let a = Box::new(self.expr()?);
                        self.expect_sym(")")?;
                        Ok(if n == "floor" { Expr::Floor(a) } else { Expr::Abs(a) })
                    }
                    "ind" if call => {
                        self.bump();
                        let g = self.guard()?;
                        self.expect_sym(")")?;
                        Ok(Expr::Ind(Box::new(g)))
                    }
                    "min" | "max" | "floor" | "abs" | "ind" | "true" => {
                        self.pos -= 1;
                        self.err(format!("`{n}` is reserved"))
                    }
                    _ => Ok(Expr::Var(n)),
                }
            }
            _ => self.err(format!("expected an expression, found {}", self.describe())),
        }
    }
}

enum GPrim {
    One(Guard),
    /// Several conjuncts produced by one comparison (`==`).
    Splice(Vec<Guard>),
}

fn diff(a: Expr, b: Expr) -> Expr {
    if b.is_const(0.0) {
        a
    } else {
        Expr::sub(a, b)
    }
}

/// `a >= b` (or `a > b`).
fn ge(a: Expr, b: Expr, strict: bool) -> Guard {
    Guard::Atom(Atom { expr: diff(a, b), strict })
}

/// `a <= b` (or `a < b`).
fn le(a: Expr, b: Expr, strict: bool) -> Guard {
    let expr = if b.is_const(0.0) && !a.is_const(0.0) { Expr::neg(a) } else { diff(b, a) };
    Guard::Atom(Atom { expr, strict })
}
