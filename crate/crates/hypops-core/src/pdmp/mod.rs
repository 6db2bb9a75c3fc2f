//! Simulation of the PDMP assembled from an automaton.
//!
//! Between jumps the continuous coordinates follow the vector field, with
//! the cumulative stochastic rate `L` carried as one extra coordinate; a
//! stochastic jump fires when `L` reaches an `Exp(1)` threshold. Guards of
//! instantaneous transitions are monitored on the dense output and fire at
//! the first time they are reached (tangential touches included). Flow
//! guards on continuous variables split the space into regions; crossings
//! are classified and stable contacts slide along the surface with the
//! Filippov field.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::expr::{exp1, EvalError};
use crate::rng::SeedId;
use crate::tdsha::{PdmpModel, Signature};

pub mod filippov;
pub mod rk;

pub use filippov::{classify_surface_contact, sliding_field, Contact};

use filippov::{dot, sliding_field_into};
use rk::{Dense, Dopri5, StepError, Tolerances};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PdmpError {
    #[error("{context}: {source}")]
    Eval { context: String, source: EvalError },
    #[error("integrator step size underflow at t = {time} (h = {h})")]
    StepFailure { time: f64, h: f64 },
    #[error("state norm exceeded {bound} at t = {time}")]
    BlowUp { time: f64, bound: f64 },
    #[error("after `{transition}` at t = {time} the state lies in the guard of `{active}`")]
    PostStateOnBoundary { time: f64, transition: String, active: String },
    #[error("zero total weight among active instantaneous transitions at t = {time}")]
    ZeroTotalWeight { time: f64 },
    #[error("degenerate sliding on surface `{surface}` at t = {time} (n.F1 = {nf1}, n.F2 = {nf2})")]
    DegenerateSliding { time: f64, surface: String, nf1: f64, nf2: f64 },
    #[error("unstable sliding on surface `{surface}` at t = {time}")]
    UnstableSliding { time: f64, surface: String },
    #[error("both fields tangent to surface `{surface}` at t = {time}")]
    SimultaneousTangency { time: f64, surface: String },
    #[error("more than {limit} surface contacts within {window} time units near t = {time}")]
    ChatteringDetected { time: f64, limit: usize, window: f64 },
    #[error("more than {limit} jumps in one time unit near t = {time}")]
    Zeno { time: f64, limit: f64 },
    #[error("initial state: {0}")]
    Initial(String),
    #[error("more than {limit} instantaneous firings at the initial state")]
    InitialChain { limit: usize },
}

fn eval_err(context: &str) -> impl Fn(EvalError) -> PdmpError + '_ {
    move |source| PdmpError::Eval { context: context.into(), source }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdmpOptions {
    pub horizon: f64,
    pub atol: f64,
    pub rtol: f64,
    /// Width of the bracket returned by event location.
    pub event_tol: f64,
    /// Activation margin within which a guard counts as reached.
    pub tol_act: f64,
    /// Tangency threshold relative to the typical rate of change of the
    /// activation along the segment.
    pub tang_rel: f64,
    /// Bound on |h| kept by projection while sliding.
    pub slide_tol: f64,
    pub zeno_rate: f64,
    pub max_contacts: usize,
    pub blowup: f64,
    pub h_max: f64,
    pub max_initial_chain: usize,
    /// Sorted observation times.
    pub grid: Vec<f64>,
    pub record_jumps: bool,
}

impl PdmpOptions {
    pub fn new(horizon: f64) -> PdmpOptions {
        PdmpOptions {
            horizon,
            atol: 1e-8,
            rtol: 1e-8,
            event_tol: 1e-9,
            tol_act: 1e-7,
            tang_rel: 1e-4,
            slide_tol: 1e-6,
            zeno_rate: 1e4,
            max_contacts: 1000,
            blowup: 1e12,
            h_max: f64::INFINITY,
            max_initial_chain: 100,
            grid: Vec::new(),
            record_jumps: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridState {
    /// Program variables (normalized units).
    pub vals: Vec<f64>,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JumpKind {
    Stochastic,
    Boundary,
}

impl JumpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            JumpKind::Stochastic => "stochastic",
            JumpKind::Boundary => "boundary",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpRecord {
    pub time: f64,
    pub kind: JumpKind,
    /// Index among the stochastic or instantaneous transitions.
    pub transition: u32,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlideExit {
    /// The `h > 0` field became tangent; motion continues there.
    IntoPositive,
    IntoNegative,
    Jump,
    Horizon,
}

impl SlideExit {
    pub fn as_str(self) -> &'static str {
        match self {
            SlideExit::IntoPositive => "into_positive",
            SlideExit::IntoNegative => "into_negative",
            SlideExit::Jump => "jump",
            SlideExit::Horizon => "horizon",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideRecord {
    pub surface: usize,
    pub entry: f64,
    pub exit: f64,
    pub reason: SlideExit,
    /// Normal components `(n.F1, n.F2)` at entry and at exit.
    pub entry_normals: (f64, f64),
    pub exit_normals: (f64, f64),
    /// Normal components just after the exit. They differ from
    /// `exit_normals` only when a jump ended the slide.
    pub post_normals: (f64, f64),
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Largest |h| seen at step ends and samples.
    pub max_h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryDiag {
    pub time: f64,
    pub transition: u32,
    /// Rate of change of the activation at the firing point.
    pub margin: f64,
    pub tangential: bool,
    /// At least two activations within `tol_act` of zero.
    pub proximity: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    pub boundary: Vec<BoundaryDiag>,
    /// Per surface: time spent with |h| < tol_act.
    pub dwell: Vec<f64>,
    pub elapsed: f64,
    /// Largest number of jumps within one unit time window.
    pub max_jumps_per_unit: u64,
    pub surface_contacts: u64,
    pub contacts: Vec<(f64, usize, Contact)>,
}

impl Diagnostics {
    pub fn dwell_fraction(&self, s: usize) -> f64 {
        if self.elapsed > 0.0 {
            self.dwell[s] / self.elapsed
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdmpTrajectory {
    pub initial: Vec<f64>,
    /// States (program variables) at the option grid times.
    pub observations: Vec<Vec<f64>>,
    pub jumps: Vec<JumpRecord>,
    pub n_jumps: u64,
    pub slides: Vec<SlideRecord>,
    pub diagnostics: Diagnostics,
    pub final_state: HybridState,
    pub horizon: f64,
    pub seed: Option<SeedId>,
}

/// What ended an integration leg.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Event {
    Stochastic,
    /// Instantaneous transition reached; `touch` when the guard was reached
    /// tangentially without a sign change.
    Boundary { transition: usize, margin: f64, tangential: bool },
    Surface(usize),
    SlideExit { positive: bool },
    Horizon,
}

struct Slide {
    surface: usize,
    record: SlideRecord,
}

struct Engine<'m> {
    m: &'m PdmpModel,
    opts: &'m PdmpOptions,
    tol: Tolerances,
    nc: usize,
    t: f64,
    vals: Vec<f64>,
    y: Vec<f64>,
    sig: Signature,
    hyst: Vec<f64>,
    xi: f64,
    /// Sliding-surface normals captured just before the current jump.
    pre_jump_normals: (f64, f64),
    rk: Dopri5,
    dense: Dense,
    slide: Option<Slide>,
    last_jump: f64,
    act_scale: Vec<f64>,
    // scratch
    work: Vec<f64>,
    ytmp: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
    grad: Vec<f64>,
    rates: Vec<f64>,
    resets: Vec<(usize, f64)>,
    // bookkeeping
    grid_next: usize,
    observations: Vec<Vec<f64>>,
    jumps: Vec<JumpRecord>,
    n_jumps: u64,
    slides: Vec<SlideRecord>,
    diag: Diagnostics,
    window: (f64, u64),
    chatter: (f64, usize),
}

/// Number of interior samples per step used to bracket events.
const SAMPLES: usize = 16;

impl<'m> Engine<'m> {
    fn new(m: &'m PdmpModel, opts: &'m PdmpOptions, vals: Vec<f64>, t: f64) -> Engine<'m> {
        let nc = m.ncoords();
        let mut vals = vals;
        vals.resize(m.nv + m.nlocals, 0.0);
        let mut y = vec![0.0; nc + 1];
        for (k, &i) in m.flowing.iter().enumerate() {
            y[k] = vals[i];
        }
        if let Some(k) = m.time_coord() {
            y[k] = t;
        }
        let ns = m.surfaces.len();
        Engine {
            m,
            opts,
            tol: Tolerances { atol: opts.atol, rtol: opts.rtol },
            nc,
            t,
            work: vals.clone(),
            vals,
            y,
            sig: vec![false; ns],
            hyst: vec![0.0; ns],
            xi: 0.0,
            pre_jump_normals: (f64::NAN, f64::NAN),
            rk: Dopri5::new(nc + 1),
            dense: Dense::default(),
            slide: None,
            last_jump: f64::NEG_INFINITY,
            act_scale: vec![0.0; m.inst_count()],
            ytmp: vec![0.0; nc + 1],
            f1: vec![0.0; nc],
            f2: vec![0.0; nc],
            grad: vec![0.0; nc],
            rates: Vec::new(),
            resets: Vec::new(),
            grid_next: 0,
            observations: Vec::new(),
            jumps: Vec::new(),
            n_jumps: 0,
            slides: Vec::new(),
            diag: Diagnostics { dwell: vec![0.0; ns], ..Diagnostics::default() },
            window: (libm::floor(t), 0),
            chatter: (t, 0),
        }
    }

    /// Clock value seen by expressions: the monitor coordinate if present.
    fn clock(m: &PdmpModel, t: f64, y: &[f64]) -> f64 {
        match m.time_coord() {
            Some(k) => y[k],
            None => t,
        }
    }

    fn load(m: &PdmpModel, y: &[f64], vals: &mut [f64]) {
        for (k, &i) in m.flowing.iter().enumerate() {
            vals[i] = y[k];
        }
    }

    // -- fields ------------------------------------------------------------

    /// Field on one side of surface `s` at `work` (already loaded).
    fn side_field(m: &PdmpModel, work: &[f64], time: f64, sig: &mut [bool], s: usize, side: bool, out: &mut [f64]) -> Result<(), EvalError> {
        let keep = sig[s];
        sig[s] = side;
        let r = m.drift(work, time, sig, out);
        sig[s] = keep;
        r
    }

    /// Gradient of surface `s` over the coordinates by central differences.
    fn gradient(m: &PdmpModel, s: usize, work: &mut [f64], time: f64, out: &mut [f64]) -> Result<(), EvalError> {
        for (k, &i) in m.flowing.iter().enumerate() {
            let x = work[i];
            let d = 1e-7 * libm::fmax(1.0, libm::fabs(x));
            work[i] = x + d;
            let a = m.surface_value(s, work, time)?;
            work[i] = x - d;
            let b = m.surface_value(s, work, time)?;
            work[i] = x;
            out[k] = (a - b) / (2.0 * d);
        }
        if let Some(k) = m.time_coord() {
            let d = 1e-7 * libm::fmax(1.0, libm::fabs(time));
            let a = m.surface_value(s, work, time + d)?;
            let b = m.surface_value(s, work, time - d)?;
            out[k] = (a - b) / (2.0 * d);
        }
        Ok(())
    }

    /// Normal components `(n.F1, n.F2)` of surface `s` at `work`, plus the
    /// fields in `f1`, `f2` and the unit normal in `grad`.
    #[allow(clippy::too_many_arguments)]
    fn normals(
        m: &PdmpModel,
        s: usize,
        work: &mut [f64],
        time: f64,
        sig: &mut [bool],
        f1: &mut [f64],
        f2: &mut [f64],
        grad: &mut [f64],
    ) -> Result<(f64, f64), EvalError> {
        Self::side_field(m, work, time, sig, s, true, f1)?;
        Self::side_field(m, work, time, sig, s, false, f2)?;
        Self::gradient(m, s, work, time, grad)?;
        let norm = libm::sqrt(dot(grad, grad));
        if norm > 0.0 {
            grad.iter_mut().for_each(|g| *g /= norm);
        }
        Ok((dot(grad, f1), dot(grad, f2)))
    }

    /// Normal components of the sliding surface at the current state, if sliding.
    fn slide_normals(&mut self) -> Result<Option<(usize, (f64, f64))>, PdmpError> {
        let Some(s) = self.slide.as_ref().map(|x| x.surface) else {
            return Ok(None);
        };
        self.work.copy_from_slice(&self.vals);
        let time = self.now();
        let n = Self::normals(self.m, s, &mut self.work, time, &mut self.sig, &mut self.f1, &mut self.f2, &mut self.grad)
            .map_err(eval_err("sliding field"))?;
        Ok(Some((s, n)))
    }

    fn class_tol(f1: &[f64], f2: &[f64]) -> f64 {
        1e-10 * (1.0 + libm::sqrt(dot(f1, f1)) + libm::sqrt(dot(f2, f2)))
    }

    /// Total stochastic rate; while sliding, the Filippov mixture of the two
    /// sides of the sliding surface.
    fn rate(m: &PdmpModel, work: &[f64], time: f64, sig: &mut [bool], mix: Option<(usize, f64)>) -> Result<f64, EvalError> {
        match mix {
            None => m.total_rate(work, time, sig),
            Some((s, a)) => {
                let keep = sig[s];
                sig[s] = true;
                let r1 = m.total_rate(work, time, sig);
                sig[s] = false;
                let r2 = m.total_rate(work, time, sig);
                sig[s] = keep;
                Ok(a * r1? + (1.0 - a) * r2?)
            }
        }
    }

    // -- integration ------------------------------------------------------

    fn step(&mut self) -> Result<(), PdmpError> {
        let m = self.m;
        let nc = self.nc;
        let work = &mut self.work;
        work.copy_from_slice(&self.vals);
        let sig = &mut self.sig;
        let (f1, f2, grad) = (&mut self.f1, &mut self.f2, &mut self.grad);
        let sliding = self.slide.as_ref().map(|s| s.surface);
        let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<(), EvalError> {
            Self::load(m, y, work);
            let time = Self::clock(m, t, y);
            match sliding {
                None => {
                    m.drift(work, time, sig, &mut dy[..nc])?;
                    dy[nc] = m.total_rate(work, time, sig)?;
                }
                Some(s) => {
                    Self::normals(m, s, work, time, sig, f1, f2, grad)?;
                    let a = match sliding_field_into(f1, f2, grad, 0.0, &mut dy[..nc]) {
                        Ok(a) => a,
                        Err(_) => {
                            // Degenerate: fall back to the mean field; the
                            // exit monitor reports the condition.
                            for i in 0..nc {
                                dy[i] = 0.5 * (f1[i] + f2[i]);
                            }
                            0.5
                        }
                    };
                    dy[nc] = Self::rate(m, work, time, sig, Some((s, a)))?;
                }
            }
            Ok(())
        };
        let t_end = self.opts.horizon;
        match self.rk.step(&mut rhs, self.t, &mut self.y, t_end, &self.tol, self.opts.h_max, &mut self.dense) {
            Ok(t1) => {
                self.t = t1;
                Ok(())
            }
            Err(StepError::Rhs(e)) => Err(PdmpError::Eval { context: format!("vector field at t = {}", self.t), source: e }),
            Err(StepError::TooSmall { t, h }) => Err(PdmpError::StepFailure { time: t, h }),
        }
    }

    /// State at time `t` of the current step into `work`; returns the clock.
    fn state_at(&mut self, t: f64) -> f64 {
        self.dense.eval(t, &mut self.ytmp);
        self.work.copy_from_slice(&self.vals);
        Self::load(self.m, &self.ytmp, &mut self.work);
        Self::clock(self.m, t, &self.ytmp)
    }

    fn activation_at(&mut self, i: usize, t: f64) -> Result<f64, PdmpError> {
        let time = self.state_at(t);
        self.m.activation(i, &self.work, time).map_err(eval_err("activation"))
    }

    fn surface_margin_at(&mut self, s: usize, t: f64) -> Result<f64, PdmpError> {
        let time = self.state_at(t);
        let h = self.m.surface_value(s, &self.work, time).map_err(eval_err("surface"))?;
        Ok(if self.sig[s] { h } else { -h } + self.hyst[s])
    }

    /// `(n.F1, n.F2)` of the sliding surface at `t`.
    fn slide_normals_at(&mut self, s: usize, t: f64) -> Result<(f64, f64, f64), PdmpError> {
        let time = self.state_at(t);
        let (a, b) = Self::normals(self.m, s, &mut self.work, time, &mut self.sig, &mut self.f1, &mut self.f2, &mut self.grad)
            .map_err(eval_err("sliding field"))?;
        Ok((a, b, Self::class_tol(&self.f1, &self.f2)))
    }

    /// First `t` in `(a, b]` with `f(t) >= 0`, given `f(a) < 0 <= f(b)`.
    fn bisect(&mut self, mut a: f64, mut b: f64, f: &mut dyn FnMut(&mut Self, f64) -> Result<f64, PdmpError>) -> Result<f64, PdmpError> {
        for _ in 0..200 {
            if b - a <= self.opts.event_tol {
                break;
            }
            let c = 0.5 * (a + b);
            if f(self, c)? >= 0.0 {
                b = c;
            } else {
                a = c;
            }
        }
        Ok(b)
    }

    /// Maximizes activation `i` on `[a, b]` (golden section).
    fn peak(&mut self, i: usize, mut a: f64, mut b: f64) -> Result<(f64, f64), PdmpError> {
        const G: f64 = 0.618_033_988_749_895;
        let mut c = b - G * (b - a);
        let mut d = a + G * (b - a);
        let mut fc = self.activation_at(i, c)?;
        let mut fd = self.activation_at(i, d)?;
        for _ in 0..200 {
            if b - a <= 0.1 * self.opts.event_tol {
                break;
            }
            if fc >= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - G * (b - a);
                fc = self.activation_at(i, c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + G * (b - a);
                fd = self.activation_at(i, d)?;
            }
        }
        let t = 0.5 * (a + b);
        Ok((t, self.activation_at(i, t)?))
    }

    fn slope(&mut self, i: usize, t: f64) -> Result<f64, PdmpError> {
        let d = 1e-6 * libm::fmax(self.dense.h, 1e-9);
        let a = self.activation_at(i, t + d)?;
        let b = self.activation_at(i, t - d)?;
        Ok((a - b) / (2.0 * d))
    }

    /// Looks for the earliest event inside the last accepted step.
    fn locate(&mut self) -> Result<Option<(f64, Event)>, PdmpError> {
        let t0 = self.dense.t0;
        let t1 = self.dense.t1();
        let nc = self.nc;
        let times: Vec<f64> = (0..=SAMPLES).map(|j| if j == SAMPLES { t1 } else { t0 + (t1 - t0) * j as f64 / SAMPLES as f64 }).collect();
        let mut best: Option<(f64, Event)> = None;
        let consider = |best: &mut Option<(f64, Event)>, t: f64, e: Event| {
            if best.is_none_or(|(b, _)| t < b) {
                *best = Some((t, e));
            }
        };

        // Stochastic threshold (monotone).
        if self.y[nc] >= self.xi {
            let xi = self.xi;
            let te = self.bisect(t0, t1, &mut |s, t| {
                s.dense.eval(t, &mut s.ytmp);
                Ok(s.ytmp[nc] - xi)
            })?;
            consider(&mut best, te, Event::Stochastic);
        }

        // Surfaces other than the sliding one.
        let sliding = self.slide.as_ref().map(|s| s.surface);
        for s in 0..self.m.surfaces.len() {
            if Some(s) == sliding {
                continue;
            }
            let mut prev = times[0];
            for &t in &times[1..] {
                if best.is_some_and(|(b, _)| prev >= b) {
                    break;
                }
                if self.surface_margin_at(s, t)? < 0.0 {
                    let te = self.bisect(prev, t, &mut |e, t| Ok(-e.surface_margin_at(s, t)?))?;
                    consider(&mut best, te, Event::Surface(s));
                    break;
                }
                prev = t;
            }
        }

        // Instantaneous guards: crossings and tangential touches.
        for i in 0..self.m.inst_count() {
            let mut vals = Vec::with_capacity(times.len());
            for &t in &times {
                vals.push(self.activation_at(i, t)?);
            }
            if vals.iter().all(|v| *v == f64::NEG_INFINITY) {
                continue;
            }
            for w in 1..times.len() {
                let s = (vals[w] - vals[w - 1]) / (times[w] - times[w - 1]);
                if s.is_finite() {
                    self.act_scale[i] = self.act_scale[i].max(libm::fabs(s));
                }
            }
            let tol_tang = self.opts.tang_rel * self.act_scale[i];
            let tol_act = self.opts.tol_act;
            let min_t = self.last_jump + 10.0 * self.opts.event_tol;
            if let Some(w) = (1..times.len()).find(|&w| vals[w] >= 0.0) {
                let r = if vals[w - 1] >= 0.0 {
                    times[w - 1]
                } else {
                    self.bisect(times[w - 1], times[w], &mut |e, t| e.activation_at(i, t))?
                };
                let mut margin = self.slope(i, r)?;
                let mut at = r;
                let tangential = libm::fabs(margin) < tol_tang;
                if tangential {
                    // A grazing contact overshoots by the integration error;
                    // fire at the peak when it stays within the tolerance.
                    let end = (w..times.len()).find(|&k| vals[k] < 0.0).map_or(t1, |k| times[k]);
                    let (tp, vp) = self.peak(i, r, end)?;
                    if vp <= tol_act && tp > r {
                        at = tp;
                        margin = self.slope(i, tp)?;
                    }
                }
                consider(&mut best, at, Event::Boundary { transition: i, margin, tangential: tangential || libm::fabs(margin) < tol_tang });
                continue;
            }
            // No sign change: a touch from below within tol_act.
            let (k, vmax) = vals.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (k, v)| if *v > acc.1 { (k, *v) } else { acc });
            if vmax < -1e3 * tol_act {
                continue;
            }
            let a = times[k.saturating_sub(1)];
            let b = times[(k + 1).min(SAMPLES)];
            let (tp, vp) = self.peak(i, a, b)?;
            if vp < -tol_act || tp <= min_t {
                continue;
            }
            let d = 1e-3 * (times[1] - times[0]);
            let left = self.activation_at(i, tp - d)?;
            let right = self.activation_at(i, tp + d)?;
            if left <= vp && right <= vp {
                let margin = self.slope(i, tp)?;
                consider(&mut best, tp, Event::Boundary { transition: i, margin, tangential: true });
            }
        }

        // Exit from a slide.
        if let Some(s) = sliding {
            let mut prev = times[0];
            for &t in &times[1..] {
                if best.is_some_and(|(b, _)| prev >= b) {
                    break;
                }
                let (a, b, _) = self.slide_normals_at(s, t)?;
                if a >= 0.0 || b <= 0.0 {
                    let te = self.bisect(prev, t, &mut |e, t| {
                        let (a, b, _) = e.slide_normals_at(s, t)?;
                        Ok(a.max(-b))
                    })?;
                    let (a, b, tol) = self.slide_normals_at(s, te)?;
                    if libm::fabs(a) <= tol.max(1e-9) && libm::fabs(b) <= tol.max(1e-9) {
                        return Err(PdmpError::SimultaneousTangency { time: te, surface: self.m.surfaces[s].label.clone() });
                    }
                    consider(&mut best, te, Event::SlideExit { positive: a >= -libm::fabs(b) });
                    break;
                }
                prev = t;
            }
        }
        Ok(best)
    }

    /// Records grid observations up to (excluding) `until`, or including it
    /// when `inclusive`.
    fn observe(&mut self, until: f64, inclusive: bool) {
        while let Some(&g) = self.opts.grid.get(self.grid_next) {
            if g > until || (!inclusive && g == until) {
                break;
            }
            if g >= self.dense.t0 && self.dense.h > 0.0 {
                self.state_at(g);
                self.observations.push(self.work[..self.m.nv].to_vec());
            } else {
                self.observations.push(self.vals[..self.m.nv].to_vec());
            }
            self.grid_next += 1;
        }
    }

    /// Moves the state to time `te` inside the last step.
    fn settle(&mut self, te: f64) {
        self.dense.eval(te, &mut self.ytmp);
        self.y.copy_from_slice(&self.ytmp);
        self.t = te;
        Self::load(self.m, &self.y, &mut self.vals);
        self.rk.invalidate();
    }

    fn now(&self) -> f64 {
        Self::clock(self.m, self.t, &self.y)
    }

    fn sync_y(&mut self) {
        for (k, &i) in self.m.flowing.iter().enumerate() {
            self.y[k] = self.vals[i];
        }
    }

    fn check_blowup(&self) -> Result<(), PdmpError> {
        if self.y[..self.nc].iter().any(|v| !(libm::fabs(*v) <= self.opts.blowup)) {
            return Err(PdmpError::BlowUp { time: self.t, bound: self.opts.blowup });
        }
        Ok(())
    }

    fn count_jump(&mut self) -> Result<(), PdmpError> {
        self.n_jumps += 1;
        let w = libm::floor(self.t);
        if w != self.window.0 {
            self.window = (w, 0);
        }
        self.window.1 += 1;
        self.diag.max_jumps_per_unit = self.diag.max_jumps_per_unit.max(self.window.1);
        if self.window.1 as f64 > self.opts.zeno_rate {
            return Err(PdmpError::Zeno { time: self.t, limit: self.opts.zeno_rate });
        }
        self.last_jump = self.t;
        Ok(())
    }

    fn record(&mut self, kind: JumpKind, transition: usize, pre: Vec<f64>) {
        if self.opts.record_jumps {
            self.jumps.push(JumpRecord {
                time: self.t,
                kind,
                transition: transition as u32,
                pre,
                post: self.vals[..self.m.nv].to_vec(),
            });
        }
    }

    fn end_slide(&mut self, reason: SlideExit, normals: (f64, f64)) {
        if let Some(mut s) = self.slide.take() {
            s.record.exit = self.t;
            s.record.reason = reason;
            s.record.exit_normals = normals;
            s.record.post_normals = normals;
            self.slides.push(s.record);
        }
    }

    /// Samples of alpha and |h| along the last sliding step.
    fn track_slide(&mut self) -> Result<(), PdmpError> {
        let Some(s) = self.slide.as_ref().map(|s| s.surface) else { return Ok(()) };
        let (t0, t1) = (self.dense.t0, self.dense.t1());
        for j in 0..=4 {
            let t = t0 + (t1 - t0) * j as f64 / 4.0;
            let time = self.state_at(t);
            let h = self.m.surface_value(s, &self.work, time).map_err(eval_err("surface"))?;
            let (a, b) = Self::normals(self.m, s, &mut self.work, time, &mut self.sig, &mut self.f1, &mut self.f2, &mut self.grad)
                .map_err(eval_err("sliding field"))?;
            let alpha = b / (b - a);
            let r = &mut self.slide.as_mut().unwrap().record;
            r.alpha_min = r.alpha_min.min(alpha);
            r.alpha_max = r.alpha_max.max(alpha);
            r.max_h = r.max_h.max(libm::fabs(h));
        }
        Ok(())
    }

    /// Pulls the flowing variables back onto the sliding surface.
    fn project(&mut self, s: usize) -> Result<(), PdmpError> {
        let m = self.m;
        let time = self.now();
        for _ in 0..4 {
            Self::load(m, &self.y, &mut self.vals);
            let h = m.surface_value(s, &self.vals, time).map_err(eval_err("surface"))?;
            if libm::fabs(h) <= 1e-14 {
                break;
            }
            self.work.copy_from_slice(&self.vals);
            Self::gradient(m, s, &mut self.work, time, &mut self.grad).map_err(eval_err("surface"))?;
            let nf = m.flowing.len();
            let g2: f64 = self.grad[..nf].iter().map(|g| g * g).sum();
            if g2 == 0.0 {
                break;
            }
            for k in 0..nf {
                self.y[k] -= h * self.grad[k] / g2;
            }
        }
        Self::load(m, &self.y, &mut self.vals);
        Ok(())
    }

    fn dwell(&mut self) -> Result<(), PdmpError> {
        let (t0, t1) = (self.dense.t0, self.dense.t1());
        for s in 0..self.m.surfaces.len() {
            let a = {
                let time = self.state_at(t0);
                self.m.surface_value(s, &self.work, time)
            };
            let b = {
                let time = self.state_at(t1);
                self.m.surface_value(s, &self.work, time)
            };
            if let (Ok(a), Ok(b)) = (a, b) {
                if libm::fabs(a) < self.opts.tol_act && libm::fabs(b) < self.opts.tol_act {
                    self.diag.dwell[s] += t1 - t0;
                }
            }
        }
        Ok(())
    }

    // -- contacts and jumps -------------------------------------------------

    fn chatter_check(&mut self) -> Result<(), PdmpError> {
        let window = self.opts.slide_tol;
        if self.t - self.chatter.0 > window {
            self.chatter = (self.t, 0);
        }
        self.chatter.1 += 1;
        if self.chatter.1 > self.opts.max_contacts {
            return Err(PdmpError::ChatteringDetected { time: self.t, limit: self.opts.max_contacts, window });
        }
        Ok(())
    }

    /// Resolves a contact with surface `s` at the current state. `from`
    /// is the side the trajectory arrives from (`None` for a state placed on
    /// the surface by a jump or at the start).
    fn contact(&mut self, s: usize, from: Option<bool>) -> Result<(), PdmpError> {
        self.diag.surface_contacts += 1;
        self.chatter_check()?;
        let m = self.m;
        let time = self.now();
        self.work.copy_from_slice(&self.vals);
        let (nf1, nf2) = Self::normals(m, s, &mut self.work, time, &mut self.sig, &mut self.f1, &mut self.f2, &mut self.grad)
            .map_err(eval_err("surface contact"))?;
        if !m.surfaces[s].pws {
            // Stochastic guards only: no effect on the flow.
            let h = m.surface_value(s, &self.vals, time).map_err(eval_err("surface"))?;
            self.set_side(s, from.map_or(h > 0.0, |f| !f), h);
            return Ok(());
        }
        let tol = Self::class_tol(&self.f1, &self.f2);
        let c = classify_surface_contact(nf1, nf2, tol);
        self.diag.contacts.push((self.t, s, c));
        let h = m.surface_value(s, &self.vals, time).map_err(eval_err("surface"))?;
        match c {
            Contact::Transversal => self.set_side(s, nf1 > 0.0, h),
            Contact::StableSliding => {
                if let Some(old) = self.slide.as_ref().map(|x| x.surface) {
                    if old != s {
                        return Err(PdmpError::SimultaneousTangency { time: self.t, surface: m.surfaces[s].label.clone() });
                    }
                }
                self.hyst[s] = 0.0;
                self.slide = Some(Slide {
                    surface: s,
                    record: SlideRecord {
                        surface: s,
                        entry: self.t,
                        exit: self.t,
                        reason: SlideExit::Horizon,
                        entry_normals: (nf1, nf2),
                        exit_normals: (nf1, nf2),
                        post_normals: (nf1, nf2),
                        alpha_min: f64::INFINITY,
                        alpha_max: f64::NEG_INFINITY,
                        max_h: 0.0,
                    },
                });
                self.project(s)?;
                self.sync_y();
            }
            Contact::UnstableSliding => {
                return Err(PdmpError::UnstableSliding { time: self.t, surface: m.surfaces[s].label.clone() })
            }
            Contact::Tangential => {
                let side = if libm::fabs(nf1) <= tol && libm::fabs(nf2) <= tol {
                    from.map_or(h > 0.0, |f| !f)
                } else if libm::fabs(nf1) <= tol {
                    nf2 > 0.0
                } else {
                    nf1 > 0.0
                };
                self.set_side(s, side, h);
            }
        }
        self.rk.invalidate();
        Ok(())
    }

    fn set_side(&mut self, s: usize, side: bool, h: f64) {
        self.sig[s] = side;
        let v = if side { h } else { -h };
        self.hyst[s] = if v < 0.0 { 10.0 * self.opts.slide_tol.max(-v) } else { 0.0 };
    }

    /// Sides of all surfaces after a jump or at the start.
    fn resolve_sides(&mut self) -> Result<(), PdmpError> {
        let time = self.now();
        let mut on = Vec::new();
        for s in 0..self.m.surfaces.len() {
            if self.slide.as_ref().is_some_and(|x| x.surface == s) {
                continue;
            }
            let h = self.m.surface_value(s, &self.vals, time).map_err(eval_err("surface"))?;
            self.hyst[s] = 0.0;
            if h != 0.0 {
                self.sig[s] = h > 0.0;
            } else {
                on.push(s);
            }
        }
        // Contacts need the sides of every other surface.
        for s in on {
            self.contact(s, None)?;
        }
        Ok(())
    }

    fn boundary_jump<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<usize, PdmpError> {
        let pre = self.vals[..self.m.nv].to_vec();
        let time = self.now();
        let i = jump_boundary(self.m, &mut self.vals, time, self.opts.tol_act, rng, &mut self.resets)?;
        let tol_act = self.opts.tol_act;
        let proximity = (0..self.m.inst_count())
            .filter(|&k| {
                let mut w = pre.clone();
                w.resize(self.vals.len(), 0.0);
                self.m.activation(k, &w, time).is_ok_and(|a| a >= -tol_act)
            })
            .count()
            >= 2;
        if let Some(d) = self.diag.boundary.last_mut() {
            if d.time == self.t && d.transition == u32::MAX {
                d.transition = i as u32;
                d.proximity = proximity;
            }
        }
        self.record(JumpKind::Boundary, i, pre);
        Ok(i)
    }

    fn after_jump(&mut self, name: &str) -> Result<(), PdmpError> {
        let time = self.now();
        for k in 0..self.m.inst_count() {
            let a = self.m.activation(k, &self.vals, time).map_err(eval_err("activation"))?;
            if a >= 0.0 {
                return Err(PdmpError::PostStateOnBoundary {
                    time: self.t,
                    transition: name.into(),
                    active: self.m.tdsha.td[k].name.clone(),
                });
            }
        }
        self.sync_y();
        if let Some((s, post)) = self.slide_normals()? {
            let h = self.m.surface_value(s, &self.vals, time).map_err(eval_err("surface"))?;
            self.end_slide(SlideExit::Jump, self.pre_jump_normals);
            if let Some(r) = self.slides.last_mut() {
                r.post_normals = post;
            }
            self.sig[s] = h > 0.0;
            self.hyst[s] = 10.0 * self.opts.slide_tol;
        }
        self.resolve_sides()?;
        self.rk.invalidate();
        self.check_blowup()
    }

    fn initial<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(), PdmpError> {
        let mut n = 0;
        loop {
            let time = self.now();
            let mut any = false;
            for k in 0..self.m.inst_count() {
                if self.m.activation(k, &self.vals, time).map_err(eval_err("activation"))? >= 0.0 {
                    any = true;
                }
            }
            if !any {
                break;
            }
            n += 1;
            if n > self.opts.max_initial_chain {
                return Err(PdmpError::InitialChain { limit: self.opts.max_initial_chain });
            }
            let pre = self.vals[..self.m.nv].to_vec();
            let i = jump_boundary(self.m, &mut self.vals, time, 0.0, rng, &mut self.resets)?;
            self.count_jump()?;
            self.record(JumpKind::Boundary, i, pre);
        }
        self.sync_y();
        self.resolve_sides()?;
        self.xi = exp1(rng);
        self.check_blowup()
    }

    /// Integrates until the next event (applied by the caller).
    fn next_event(&mut self) -> Result<(f64, Event), PdmpError> {
        loop {
            if self.t >= self.opts.horizon {
                return Ok((self.t, Event::Horizon));
            }
            self.step()?;
            let found = self.locate()?;
            let until = found.map_or(self.t, |(te, _)| te);
            self.observe(until, found.is_none());
            match found {
                Some((te, e)) => {
                    self.diag.elapsed += te - self.dense.t0;
                    self.settle(te);
                    if let Some(s) = self.slide.as_ref().map(|x| x.surface) {
                        self.project(s)?;
                        self.sync_y();
                    }
                    return Ok((te, e));
                }
                None => {
                    self.dwell()?;
                    self.track_slide()?;
                    self.diag.elapsed += self.dense.h;
                    if let Some(s) = self.slide.as_ref().map(|x| x.surface) {
                        self.project(s)?;
                    } else {
                        Self::load(self.m, &self.y, &mut self.vals);
                    }
                    for s in 0..self.hyst.len() {
                        if self.hyst[s] > 0.0 {
                            let time = self.now();
                            let h = self.m.surface_value(s, &self.vals, time).map_err(eval_err("surface"))?;
                            if (if self.sig[s] { h } else { -h }) > self.hyst[s] {
                                self.hyst[s] = 0.0;
                            }
                        }
                    }
                    self.check_blowup()?;
                }
            }
        }
    }

    fn run<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(), PdmpError> {
        self.initial(rng)?;
        loop {
            let (_, e) = self.next_event()?;
            match e {
                Event::Horizon => {
                    self.observe(self.t, true);
                    self.end_slide(SlideExit::Horizon, (f64::NAN, f64::NAN));
                    return Ok(());
                }
                Event::Stochastic => {
                    self.pre_jump_normals = self.slide_normals()?.map_or((f64::NAN, f64::NAN), |x| x.1);
                    let pre = self.vals[..self.m.nv].to_vec();
                    let time = self.now();
                    let mix = self.slide.as_ref().map(|s| s.surface);
                    let i = jump_stochastic_mixed(self, time, mix, rng)?;
                    self.count_jump()?;
                    self.record(JumpKind::Stochastic, i, pre);
                    self.y[self.nc] = 0.0;
                    self.xi = exp1(rng);
                    let name = self.m.tdsha.ts[i].name.clone();
                    self.observe(self.t, true);
                    self.after_jump(&name)?;
                }
                Event::Boundary { margin, tangential, .. } => {
                    self.diag.boundary.push(BoundaryDiag {
                        time: self.t,
                        transition: u32::MAX,
                        margin,
                        tangential,
                        proximity: false,
                    });
                    self.pre_jump_normals = self.slide_normals()?.map_or((f64::NAN, f64::NAN), |x| x.1);
                    let i = self.boundary_jump(rng)?;
                    self.count_jump()?;
                    let name = self.m.tdsha.td[i].name.clone();
                    self.observe(self.t, true);
                    self.after_jump(&name)?;
                }
                Event::Surface(s) => {
                    let from = self.sig[s];
                    self.contact(s, Some(from))?;
                }
                Event::SlideExit { positive } => {
                    let s = self.slide.as_ref().map(|x| x.surface).unwrap_or(0);
                    let (a, b, _) = {
                        self.dense.h = 0.0;
                        let t = self.t;
                        self.dense.t0 = t;
                        self.work.copy_from_slice(&self.vals);
                        let time = self.now();
                        let (a, b) = Self::normals(self.m, s, &mut self.work, time, &mut self.sig, &mut self.f1, &mut self.f2, &mut self.grad)
                            .map_err(eval_err("sliding field"))?;
                        (a, b, 0.0)
                    };
                    self.end_slide(if positive { SlideExit::IntoPositive } else { SlideExit::IntoNegative }, (a, b));
                    let time = self.now();
                    let h = self.m.surface_value(s, &self.vals, time).map_err(eval_err("surface"))?;
                    self.set_side(s, positive, h);
                    self.hyst[s] = self.hyst[s].max(10.0 * self.opts.slide_tol);
                    self.rk.invalidate();
                }
            }
        }
    }
}

fn jump_stochastic_mixed<R: Rng + ?Sized>(e: &mut Engine<'_>, time: f64, mix: Option<usize>, rng: &mut R) -> Result<usize, PdmpError> {
    let m = e.m;
    let ctx = "stochastic rates";
    match mix {
        None => m.stochastic_rates(&e.vals, time, &e.sig, &mut e.rates).map_err(eval_err(ctx))?,
        Some(s) => {
            e.work.copy_from_slice(&e.vals);
            let (a, b) = Engine::normals(m, s, &mut e.work, time, &mut e.sig, &mut e.f1, &mut e.f2, &mut e.grad)
                .map_err(eval_err("sliding field"))?;
            let alpha = b / (b - a);
            let keep = e.sig[s];
            let mut r1 = Vec::new();
            e.sig[s] = true;
            m.stochastic_rates(&e.vals, time, &e.sig, &mut r1).map_err(eval_err(ctx))?;
            e.sig[s] = false;
            m.stochastic_rates(&e.vals, time, &e.sig, &mut e.rates).map_err(eval_err(ctx))?;
            e.sig[s] = keep;
            for (r, q) in e.rates.iter_mut().zip(&r1) {
                *r = alpha * q + (1.0 - alpha) * *r;
            }
            e.rates.iter().sum()
        }
    };
    let i = pick(&e.rates, rng).unwrap_or(0);
    m.apply_reset(false, i, &mut e.vals, time, rng, &mut e.resets)
        .map_err(|source| PdmpError::Eval { context: format!("reset of `{}`", m.tdsha.ts[i].name), source })?;
    Ok(i)
}

/// Index drawn proportionally to `w`; `None` when the total is zero.
fn pick<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, x) in w.iter().enumerate() {
        if *x > 0.0 {
            last = i;
            if u < *x {
                return Some(i);
            }
            u -= x;
        }
    }
    Some(last)
}

/// Boundary kernel: picks among instantaneous transitions whose activation
/// is at least `-tol_act`, proportionally to weight, and applies its reset.
fn jump_boundary<R: Rng + ?Sized>(
    m: &PdmpModel,
    vals: &mut [f64],
    time: f64,
    tol_act: f64,
    rng: &mut R,
    scratch: &mut Vec<(usize, f64)>,
) -> Result<usize, PdmpError> {
    let mut w = vec![0.0; m.inst_count()];
    for (k, wk) in w.iter_mut().enumerate() {
        if m.activation(k, vals, time).map_err(eval_err("activation"))? >= -tol_act {
            *wk = m.inst_weight(k, vals, time).map_err(eval_err("weight"))?.max(0.0);
        }
    }
    let i = pick(&w, rng).ok_or(PdmpError::ZeroTotalWeight { time })?;
    m.apply_reset(true, i, vals, time, rng, scratch)
        .map_err(|source| PdmpError::Eval { context: format!("reset of `{}`", m.tdsha.td[i].name), source })?;
    Ok(i)
}

/// Applies one jump of the given kind to `s` and returns the transition
/// index. Stochastic jumps use the rates at `s` (surfaces on their actual
/// sides); boundary jumps use the weights of the active guards.
pub fn jump<R: Rng + ?Sized>(m: &PdmpModel, s: &mut HybridState, kind: JumpKind, rng: &mut R) -> Result<usize, PdmpError> {
    let mut vals = s.vals.clone();
    vals.resize(m.nv + m.nlocals, 0.0);
    let mut scratch = Vec::new();
    let i = match kind {
        JumpKind::Stochastic => {
            let sig = m.signature(&vals, s.time).map_err(eval_err("surface"))?;
            let mut rates = Vec::new();
            m.stochastic_rates(&vals, s.time, &sig, &mut rates).map_err(eval_err("stochastic rates"))?;
            let i = pick(&rates, rng).ok_or(PdmpError::ZeroTotalWeight { time: s.time })?;
            m.apply_reset(false, i, &mut vals, s.time, rng, &mut scratch)
                .map_err(|source| PdmpError::Eval { context: format!("reset of `{}`", m.tdsha.ts[i].name), source })?;
            i
        }
        JumpKind::Boundary => jump_boundary(m, &mut vals, s.time, 1e-7, rng, &mut scratch)?,
    };
    for k in 0..m.inst_count() {
        if m.activation(k, &vals, s.time).map_err(eval_err("activation"))? >= 0.0 {
            let name = match kind {
                JumpKind::Stochastic => &m.tdsha.ts[i].name,
                JumpKind::Boundary => &m.tdsha.td[i].name,
            };
            return Err(PdmpError::PostStateOnBoundary { time: s.time, transition: name.clone(), active: m.tdsha.td[k].name.clone() });
        }
    }
    vals.truncate(m.nv);
    s.vals = vals;
    Ok(i)
}

/// Integrates from `s` until the first event given the jump threshold
/// `xi`, without applying it. Returns the event, its time and the state.
pub fn integrate_to_event(m: &PdmpModel, s: &HybridState, xi: f64, opts: &PdmpOptions) -> Result<(Event, f64, HybridState), PdmpError> {
    let mut e = Engine::new(m, opts, s.vals.clone(), s.time);
    e.resolve_sides()?;
    e.xi = xi;
    let (t, ev) = e.next_event()?;
    Ok((ev, t, HybridState { vals: e.vals[..m.nv].to_vec(), time: t }))
}

impl PdmpModel {
    /// Simulates one trajectory from the initial state.
    pub fn simulate<R: Rng + ?Sized>(&self, opts: &PdmpOptions, rng: &mut R) -> Result<PdmpTrajectory, PdmpError> {
        let vals = self.initial_values().map_err(|e| PdmpError::Initial(format!("{e}")))?;
        self.simulate_from(&HybridState { vals, time: 0.0 }, opts, rng)
    }

    pub fn simulate_from<R: Rng + ?Sized>(&self, s0: &HybridState, opts: &PdmpOptions, rng: &mut R) -> Result<PdmpTrajectory, PdmpError> {
        let mut e = Engine::new(self, opts, s0.vals.clone(), s0.time);
        e.run(rng)?;
        let mut diagnostics = core::mem::take(&mut e.diag);
        diagnostics.boundary.retain(|d| d.transition != u32::MAX);
        Ok(PdmpTrajectory {
            initial: s0.vals[..self.nv].to_vec(),
            observations: e.observations,
            jumps: e.jumps,
            n_jumps: e.n_jumps,
            slides: e.slides,
            diagnostics,
            final_state: HybridState { vals: e.vals[..self.nv].to_vec(), time: e.t },
            horizon: opts.horizon,
            seed: None,
        })
    }
}

/// One trajectory to `horizon` with default options.
pub fn simulate_pdmp<R: Rng + ?Sized>(m: &PdmpModel, horizon: f64, rng: &mut R) -> Result<PdmpTrajectory, PdmpError> {
    m.simulate(&PdmpOptions::new(horizon), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NormMode;
    use crate::parser::parse_model;
    use crate::tdsha::{assemble_pdmp, build_tdsha};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn limit(src: &str) -> PdmpModel {
        let p = parse_model(src).unwrap();
        assemble_pdmp(&build_tdsha(&p, NormMode::Limit).unwrap()).unwrap()
    }

    fn cubic_model(threshold: u32) -> PdmpModel {
        limit(&format!(
            "size N = 1000;
             var X1 : continuous init N; var X2 : continuous init 9 * N; var X3 : continuous init 0;
             var Z : discrete init 0;
             agent a1 {{
               right: [X2 > 0] rate X2 class continuous -> {{ X1 += 1; }};
               left: [X2 < 0] rate -X2 class continuous -> {{ X1 -= 1; }};
             }}
             agent a2 {{
               up: rate X3 class continuous -> {{ X2 += 1; }};
               down: rate 12 * N class continuous -> {{ X2 -= 1; }};
             }}
             agent a3 {{ grow: rate 6 * N class continuous -> {{ X3 += 1; }}; }}
             agent doom {{ fire: [Z == 0 && X1 >= {threshold} * N] immediate weight 1 -> {{ Z = 1; }}; }}"
        ))
    }

    fn cubic(t: f64) -> f64 {
        t * t * t - 6.0 * t * t + 9.0 * t + 1.0
    }

    #[test]
    fn cubic_trajectory_and_tangential_touch() {
        let m = cubic_model(5);
        let mut opts = PdmpOptions::new(2.0);
        opts.grid = (0..=99).map(|k| k as f64 / 100.0).collect();
        let tr = m.simulate(&opts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let err = opts.grid.iter().zip(&tr.observations).map(|(t, o)| libm::fabs(o[0] - cubic(*t))).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
        assert_eq!(tr.jumps.len(), 1, "{:?}", tr.jumps);
        assert!(libm::fabs(tr.jumps[0].time - 1.0) < 1e-6, "{}", tr.jumps[0].time);
        assert_eq!(tr.jumps[0].kind, JumpKind::Boundary);
        let d = &tr.diagnostics.boundary[0];
        assert!(d.tangential && libm::fabs(d.margin) < 1e-6, "{d:?}");
        assert_eq!(tr.final_state.vals[3], 1.0);
    }

    #[test]
    fn transversal_crossing_after_the_local_maximum() {
        let m = cubic_model(6);
        let s = HybridState { vals: m.initial_values().unwrap(), time: 0.0 };
        let (e, t, st) = integrate_to_event(&m, &s, f64::INFINITY, &PdmpOptions::new(10.0)).unwrap();
        // The sign of X2 flips at t = 1 and t = 3 first.
        assert!(matches!(e, Event::Surface(_)), "{e:?}");
        assert!(libm::fabs(t - 1.0) < 1e-6, "{t}");
        let tr = m.simulate(&PdmpOptions::new(10.0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tr.jumps.len(), 1);
        assert!(libm::fabs(tr.jumps[0].time - 4.103_803_402_735_537) < 1e-6, "{}", tr.jumps[0].time);
        assert!(!tr.diagnostics.boundary[0].tangential);
        assert!(libm::fabs(st.vals[0] - 5.0) < 1e-6);
    }

    #[test]
    fn constant_rate_inverts_the_threshold() {
        let m = limit("size N = 1; var X : discrete init 0; agent a { go: rate 1 -> { X += 1; }; }");
        let s = HybridState { vals: m.initial_values().unwrap(), time: 0.0 };
        let (e, t, _) = integrate_to_event(&m, &s, 0.7, &PdmpOptions::new(5.0)).unwrap();
        assert_eq!(e, Event::Stochastic);
        assert!(libm::fabs(t - 0.7) < 1e-9, "{t}");
    }

    #[test]
    fn exponential_jump_times() {
        let m = limit("size N = 1; var X : discrete init 0; agent a { go: rate 2 -> { X += 1; }; }");
        let mut opts = PdmpOptions::new(1e3);
        opts.record_jumps = true;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut times = Vec::with_capacity(n);
        let s = HybridState { vals: m.initial_values().unwrap(), time: 0.0 };
        for _ in 0..n {
            let xi = exp1(&mut rng);
            let (_, t, _) = integrate_to_event(&m, &s, xi, &opts).unwrap();
            times.push(t);
        }
        times.sort_by(f64::total_cmp);
        let d = times
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let f = 1.0 - libm::exp(-2.0 * t);
                libm::fmax(libm::fabs(f - i as f64 / n as f64), libm::fabs((i + 1) as f64 / n as f64 - f))
            })
            .fold(0.0, f64::max);
        assert!(d < 1.628 / libm::sqrt(n as f64), "{d}");
    }

    #[test]
    fn boundary_kernel_follows_weights() {
        let m = limit(
            "size N = 1; var Z : discrete init 0; var X : discrete init 0;
             agent a {
               d1: [Z == 0 && X >= 1] immediate weight 99 -> { Z = 1; };
               d2: [Z == 0 && X >= 1] immediate weight 1 -> { Z = -1; };
             }",
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let mut ones = 0;
        for _ in 0..n {
            let mut s = HybridState { vals: vec![0.0, 1.0], time: 0.0 };
            jump(&m, &mut s, JumpKind::Boundary, &mut rng).unwrap();
            ones += (s.vals[0] == 1.0) as u32;
        }
        let p = ones as f64 / n as f64;
        assert!(libm::fabs(p - 0.99) < 0.003, "{p}");
        let mut s = HybridState { vals: vec![0.0, 0.0], time: 0.0 };
        assert!(matches!(jump(&m, &mut s, JumpKind::Boundary, &mut rng), Err(PdmpError::ZeroTotalWeight { .. })));
    }

    #[test]
    fn post_state_inside_a_guard_is_rejected() {
        let m = limit(
            "size N = 1; var X : discrete init 0;
             agent a { go: rate 1 -> { X = 2; }; back: [X >= 1] immediate weight 1 -> { X = 3; }; }",
        );
        let e = m.simulate(&PdmpOptions::new(100.0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(e, PdmpError::PostStateOnBoundary { .. }), "{e}");
    }

    const SLIDE: &str = "size N = 1;
        var Y1 : continuous init 0; var Y2 : continuous init 0;
        agent drift { east: rate N class continuous -> { Y1 += 1; }; }
        agent pull {
          down: [Y2 > 0 && Y1 < N] rate N class continuous -> { Y2 -= 1; };
          away: [Y2 > 0 && Y1 >= N] rate N class continuous -> { Y2 += 1; };
          up: [Y2 <= 0] rate N class continuous -> { Y2 += 1; };
        }";

    #[test]
    fn slides_until_the_upper_field_turns() {
        let m = limit(SLIDE);
        let mut opts = PdmpOptions::new(3.0);
        opts.grid = vec![0.5, 2.0, 3.0];
        let tr = m.simulate(&opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tr.slides.len(), 1, "{:?} {:?}", tr.slides, tr.diagnostics.contacts);
        let s = &tr.slides[0];
        assert_eq!(s.entry, 0.0);
        assert!(libm::fabs(s.exit - 1.0) < 1e-6, "{s:?}");
        assert_eq!(s.reason, SlideExit::IntoPositive);
        assert!(s.max_h <= 1e-6 && s.alpha_min > 0.0 && s.alpha_max < 1.0, "{s:?}");
        assert!(libm::fabs(tr.observations[0][1]) < 1e-6);
        // Past the exit both fields point up: Y2 grows at unit speed.
        assert!(libm::fabs(tr.observations[1][1] - 1.0) < 1e-5, "{:?}", tr.observations);
        assert!(libm::fabs(tr.observations[2][0] - 3.0) < 1e-6);
    }

    #[test]
    fn slides_to_the_horizon_with_constant_fields() {
        let m = limit(
            "size N = 1;
             var Y1 : continuous init 0; var Y2 : continuous init 0;
             agent drift { east: rate N class continuous -> { Y1 += 1; }; }
             agent pull {
               down: [Y2 > 0] rate N class continuous -> { Y2 -= 1; };
               up: [Y2 <= 0] rate N class continuous -> { Y2 += 1; };
             }",
        );
        let tr = m.simulate(&PdmpOptions::new(5.0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tr.slides.len(), 1);
        assert_eq!(tr.slides[0].reason, SlideExit::Horizon);
        assert!(libm::fabs(tr.slides[0].alpha_min - 0.5) < 1e-9);
        assert!(libm::fabs(tr.final_state.vals[0] - 5.0) < 1e-9 && libm::fabs(tr.final_state.vals[1]) < 1e-9);
    }

    #[test]
    fn unstable_contact_is_an_error() {
        let m = limit(
            "size N = 1;
             var Y : continuous init 0;
             agent a { up: [Y > 0] rate N class continuous -> { Y += 1; }; down: [Y <= 0] rate N class continuous -> { Y -= 1; }; }",
        );
        let e = m.simulate(&PdmpOptions::new(1.0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(e, PdmpError::UnstableSliding { .. }), "{e}");
    }

    #[test]
    fn time_monitor_tracks_the_clock() {
        let m = limit(
            "size N = 1; param K = 2.5;
             var X : continuous init 0; var B : discrete init 1;
             agent a {
               go: rate N class continuous -> { X += 1; };
               fix: [time >= K && B >= 1] immediate weight 1 -> { B = 0; };
             }",
        );
        let k = m.time_coord().unwrap();
        let opts = PdmpOptions::new(4.0);
        let mut e = Engine::new(&m, &opts, m.initial_values().unwrap(), 0.0);
        e.resolve_sides().unwrap();
        e.xi = f64::INFINITY;
        while e.t < 2.0 {
            e.step().unwrap();
            assert!(libm::fabs(e.y[k] - e.t) < 1e-9);
        }
        let tr = m.simulate(&opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(libm::fabs(tr.jumps[0].time - 2.5) < 1e-8, "{:?}", tr.jumps);
    }

    #[test]
    fn exponential_growth_accuracy() {
        let m = limit("size N = 1; var Y : continuous init N; agent a { g: rate Y class continuous -> { Y += 1; }; }");
        let tr = m.simulate(&PdmpOptions::new(1.0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let err = tr.final_state.vals[0] - core::f64::consts::E;
        assert!(libm::fabs(err) < 1e-8, "{err}");
    }

    #[test]
    fn zeno_loops_are_stopped() {
        let m = limit("size N = 1; var X : discrete init 0; agent a { go: rate 1e6 -> { X += 1; }; }");
        let e = m.simulate(&PdmpOptions::new(1.0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(e, PdmpError::Zeno { .. }), "{e}");
    }
}
