//! Population-process models in a guarded-command language, exact CTMC
//! simulation, and construction/simulation of their hybrid (PDMP) limits.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, ensembles and the
//! command-line driver live in the `hypops` crate.
#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod ctmc;
pub mod exec;
pub mod expr;
pub mod model;
pub mod parser;
pub mod pdmp;
pub mod rng;
pub mod scaling;
pub mod tdsha;

pub use ctmc::{simulate_ctmc, CtmcError, CtmcModel, CtmcOptions, CtmcState, EventKind, Record, Trajectory};
pub use expr::{activation_function, eval_expr, eval_guard, expected_value, sample_random, Env, Expr, Guard, RandomSpec};
pub use model::{flatten, normalize, validate, Action, Program, VariableDecl};
pub use parser::{parse_model, pretty_print};
pub use scaling::{check_scalings, ScalingReport};
pub use pdmp::{simulate_pdmp, PdmpError, PdmpOptions, PdmpTrajectory};
pub use tdsha::{assemble_pdmp, build_tdsha, PdmpModel, Tdsha};
