//! Flattening: one counter variable per component turns an arbitrary
//! network of agents into a program where every component recurses to itself.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{ActionClass, ActionKind, Component, Continuation, Domain, Program, Update, UpdateRhs, VarKind, VariableDecl};
use crate::expr::{Expr, Guard};

/// Every branch recurses into its own component and the initial network
/// holds each component exactly once.
pub fn is_flat(p: &Program) -> bool {
    let net_ok = if p.network.is_empty() {
        true
    } else {
        p.network.len() == p.components.len()
            && p.components.iter().all(|c| p.network.iter().any(|(n, k)| *n == c.name && *k == 1))
    };
    net_ok && p.components.iter().all(|c| c.actions.iter().all(|a| a.next == Continuation::Recurse))
}

fn occurrences(net: &[(String, u32)], comp: &str) -> u32 {
    net.iter().filter(|(n, _)| n == comp).map(|(_, k)| *k).sum()
}

fn counter_name(p: &Program, comp: &str) -> String {
    let mut name = format!("P_{comp}");
    while p.var(&name).is_some() || p.param(&name).is_some() {
        name.push('_');
    }
    name
}

/// Returns a flat program equivalent to `p`. Flat inputs come back unchanged.
pub fn flatten(p: &Program) -> Program {
    if is_flat(p) {
        return p.clone();
    }
    let network = if p.network.is_empty() { p.default_network() } else { p.network.clone() };
    let counters: Vec<String> = p.components.iter().map(|c| counter_name(p, &c.name)).collect();

    let mut out = p.clone();
    for (c, counter) in p.components.iter().zip(&counters) {
        out.variables.push(VariableDecl {
            name: counter.clone(),
            kind: VarKind::Discrete,
            domain: Domain::Natural,
            init: Expr::Const(occurrences(&network, &c.name) as f64),
            range: None,
        });
    }
    out.components = p
        .components
        .iter()
        .zip(&counters)
        .map(|(c, counter)| {
            let actions = c
                .actions
                .iter()
                .map(|a| {
                    let mut a = a.clone();
                    let pc = Expr::Var(counter.clone());
                    a.guard = Guard::and(a.guard.clone(), Guard::strict(pc.clone()));
                    let scaled = Expr::mul(pc, a.intensity().clone());
                    match &mut a.kind {
                        ActionKind::Stochastic { rate } => *rate = scaled,
                        ActionKind::Instantaneous { weight } => *weight = scaled,
                    }
                    let next = match &a.next {
                        Continuation::Recurse => alloc::vec![(c.name.clone(), 1)],
                        Continuation::Network(n) => n.clone(),
                    };
                    for (other, other_counter) in p.components.iter().zip(&counters) {
                        let mut delta = occurrences(&next, &other.name) as f64;
                        if other.name == c.name {
                            delta -= 1.0;
                        }
                        if delta != 0.0 {
                            a.reset.updates.push(Update {
                                target: other_counter.clone(),
                                rhs: UpdateRhs::IncrementBy(Expr::Const(delta)),
                            });
                            a.class = ActionClass::Discrete;
                        }
                    }
                    a.next = Continuation::Recurse;
                    a
                })
                .collect();
            Component { name: c.name.clone(), actions }
        })
        .collect();
    out.network = out.default_network();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{eval_expr, eval_guard, Env};
    use crate::model::{Action, Reset};

    fn bacteria(m: u32) -> Program {
        let reproduce = Action {
            name: "reproduce".into(),
            kind: ActionKind::Stochastic { rate: Expr::var("kr") },
            guard: Guard::strict(Expr::var("F")),
            reset: Reset {
                locals: Vec::new(),
                updates: alloc::vec![Update { target: "F".into(), rhs: UpdateRhs::IncrementBy(Expr::c(-1.0)) }],
            },
            class: ActionClass::Discrete,
            next: Continuation::Network(alloc::vec![("bacterium".into(), 2)]),
        };
        let die = Action {
            name: "die".into(),
            kind: ActionKind::Stochastic { rate: Expr::var("kd") },
            guard: Guard::True,
            reset: Reset::default(),
            class: ActionClass::Discrete,
            next: Continuation::Network(Vec::new()),
        };
        Program {
            params: alloc::vec![("kr".into(), 1.0), ("kd".into(), 0.5)],
            variables: alloc::vec![VariableDecl::new("F", VarKind::Discrete, Expr::c(3.0))],
            components: alloc::vec![Component { name: "bacterium".into(), actions: alloc::vec![reproduce, die] }],
            network: alloc::vec![("bacterium".into(), m)],
            ..Program::default()
        }
    }

    #[test]
    fn bacteria_flattening() {
        let f = flatten(&bacteria(2));
        assert!(is_flat(&f));
        let b = f.var("P_bacterium").unwrap();
        assert_eq!(b.init, Expr::c(2.0));
        let acts = &f.components[0].actions;
        let env = Env::new().bind("F", 3.0).bind("P_bacterium", 4.0).bind("kr", 1.0).bind("kd", 0.5);
        // reproduction: guard F > 0 && B > 0, rate kr * B, F - 1 and B + 1
        assert!(eval_guard(&acts[0].guard, &env).unwrap());
        let no_food = env.clone().bind("F", 0.0);
        assert!(!eval_guard(&acts[0].guard, &no_food).unwrap());
        assert_eq!(eval_expr(acts[0].intensity(), &env).unwrap(), 4.0);
        let deltas: Vec<(&str, f64)> = acts[0]
            .reset
            .updates
            .iter()
            .map(|u| match &u.rhs {
                UpdateRhs::IncrementBy(Expr::Const(c)) => (u.target.as_str(), *c),
                _ => panic!(),
            })
            .collect();
        assert_eq!(deltas, alloc::vec![("F", -1.0), ("P_bacterium", 1.0)]);
        // death: guard B > 0, rate kd * B, B - 1
        let none = env.clone().bind("P_bacterium", 0.0);
        assert!(!eval_guard(&acts[1].guard, &none).unwrap());
        assert_eq!(eval_expr(acts[1].intensity(), &env).unwrap(), 2.0);
        assert_eq!(acts[1].reset.updates.len(), 1);
        assert_eq!(acts[1].reset.updates[0].rhs, UpdateRhs::IncrementBy(Expr::c(-1.0)));
    }

    #[test]
    fn flat_input_is_unchanged() {
        let mut p = bacteria(1);
        for a in &mut p.components[0].actions {
            a.next = Continuation::Recurse;
        }
        assert!(is_flat(&p));
        assert_eq!(flatten(&p), p);
    }

    #[test]
    fn multiplicity_sets_counter_init() {
        let f = flatten(&bacteria(2));
        assert_eq!(f.var("P_bacterium").unwrap().init, Expr::c(2.0));
    }
}
