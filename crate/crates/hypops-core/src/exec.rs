//! Compiled resets shared by both simulators.
//!
//! State vectors hold the program variables in declaration order followed
//! by scratch slots for the local draws of the reset being applied.

use alloc::vec::Vec;

use rand::Rng;

use crate::expr::{CExpr, CRandom, Ctx, EvalError, Slot};
use crate::model::{Program, Reset, UpdateRhs};

#[derive(Debug, Clone, PartialEq)]
pub enum CUpdate {
    Incr(CExpr),
    Set(CExpr),
    IncrRandom(CRandom),
    SetRandom(CRandom),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CReset {
    pub locals: Vec<CRandom>,
    pub updates: Vec<(usize, CUpdate)>,
}

/// Resolver for expressions outside resets: variables to slots, parameters
/// to constants.
pub fn resolver(p: &Program) -> impl Fn(&str) -> Option<Slot> + '_ {
    move |n| p.var_index(n).map(Slot::Index).or_else(|| p.param(n).map(Slot::Const))
}

impl CReset {
    pub fn compile(p: &Program, r: &Reset) -> Result<CReset, EvalError> {
        let nv = p.variables.len();
        let res = |n: &str| {
            p.var_index(n)
                .map(Slot::Index)
                .or_else(|| p.param(n).map(Slot::Const))
                .or_else(|| r.locals.iter().position(|(l, _)| l == n).map(|i| Slot::Index(nv + i)))
        };
        let locals = r.locals.iter().map(|(_, s)| CRandom::compile(s, &res)).collect::<Result<Vec<_>, _>>()?;
        let mut updates = Vec::with_capacity(r.updates.len());
        for u in &r.updates {
            let idx = p.var_index(&u.target).ok_or_else(|| EvalError::UnboundVariable(u.target.clone()))?;
            let c = match &u.rhs {
                UpdateRhs::IncrementBy(e) => CUpdate::Incr(CExpr::compile(e, &res)?),
                UpdateRhs::SetTo(e) => CUpdate::Set(CExpr::compile(e, &res)?),
                UpdateRhs::IncrementByRandom(s) => CUpdate::IncrRandom(CRandom::compile(s, &res)?),
                UpdateRhs::SetToRandom(s) => CUpdate::SetRandom(CRandom::compile(s, &res)?),
            };
            updates.push((idx, c));
        }
        Ok(CReset { locals, updates })
    }

    pub fn targets(&self) -> impl Iterator<Item = usize> + '_ {
        self.updates.iter().map(|(i, _)| *i)
    }

    /// Applies the reset in place. All right-hand sides see the pre-state;
    /// `vals` must have room for the local draws after the first `nv` slots.
    pub fn apply<R: Rng + ?Sized>(
        &self,
        vals: &mut [f64],
        nv: usize,
        time: f64,
        size: Option<f64>,
        rng: &mut R,
        scratch: &mut Vec<(usize, f64)>,
    ) -> Result<(), EvalError> {
        for (i, l) in self.locals.iter().enumerate() {
            let v = l.sample(&Ctx { vals, time, size }, rng)?;
            vals[nv + i] = v;
        }
        scratch.clear();
        {
            let ctx = Ctx { vals, time, size };
            for (idx, u) in &self.updates {
                let v = match u {
                    CUpdate::Incr(e) => vals[*idx] + e.eval(&ctx)?,
                    CUpdate::Set(e) => e.eval(&ctx)?,
                    CUpdate::IncrRandom(s) => vals[*idx] + s.sample(&ctx, rng)?,
                    CUpdate::SetRandom(s) => s.sample(&ctx, rng)?,
                };
                scratch.push((*idx, v));
            }
        }
        for &(i, v) in scratch.iter() {
            vals[i] = v;
        }
        Ok(())
    }
}
