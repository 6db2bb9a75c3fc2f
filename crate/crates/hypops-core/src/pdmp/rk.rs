//! Dormand–Prince 5(4) with the usual fourth-order continuous extension.
//! Errors are measured in the max norm over components.

use alloc::vec;
use alloc::vec::Vec;

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub atol: f64,
    pub rtol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepError<E> {
    Rhs(E),
    /// Step size underflow: the tolerances cannot be met.
    TooSmall { t: f64, h: f64 },
}

/// Interpolant of the last accepted step on `[t0, t0 + h]`.
#[derive(Debug, Clone, Default)]
pub struct Dense {
    pub t0: f64,
    pub h: f64,
    n: usize,
    r: Vec<f64>,
}

impl Dense {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    /// Evaluates all components at `t` (also usable slightly outside the
    /// step, as a polynomial extrapolation).
    pub fn eval(&self, t: f64, out: &mut [f64]) {
        let n = self.n;
        if self.h == 0.0 {
            out[..n].copy_from_slice(&self.r[..n]);
            return;
        }
        let s = (t - self.t0) / self.h;
        let s1 = 1.0 - s;
        for i in 0..n {
            let r = &self.r;
            out[i] = r[i] + s * (r[n + i] + s1 * (r[2 * n + i] + s * (r[3 * n + i] + s1 * r[4 * n + i])));
        }
    }
}

pub struct Dopri5 {
    n: usize,
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y1: Vec<f64>,
    /// Step size to try next (0 before the first step).
    pub h: f64,
    fsal: bool,
}

impl Dopri5 {
    pub fn new(n: usize) -> Dopri5 {
        Dopri5 {
            n,
            k: core::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            y1: vec![0.0; n],
            h: 0.0,
            fsal: false,
        }
    }

    /// Forget the cached derivative (after a jump or a change of field).
    pub fn invalidate(&mut self) {
        self.fsal = false;
    }

    fn norm(&self, v: &[f64], y: &[f64], tol: &Tolerances) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            let sk = tol.atol + tol.rtol * libm::fabs(y[i]);
            s = libm::fmax(s, libm::fabs(v[i] / sk));
        }
        s
    }

    /// Takes one accepted step from `(t, y)` towards `t_end` (never past it),
    /// overwriting `y` and `dense`. Returns the new time.
    pub fn step<E>(
        &mut self,
        f: &mut dyn FnMut(f64, &[f64], &mut [f64]) -> Result<(), E>,
        t: f64,
        y: &mut [f64],
        t_end: f64,
        tol: &Tolerances,
        h_max: f64,
        dense: &mut Dense,
    ) -> Result<f64, StepError<E>> {
        let n = self.n;
        if !self.fsal {
            f(t, y, &mut self.k[0]).map_err(StepError::Rhs)?;
            self.fsal = true;
        }
        if self.h <= 0.0 {
            let d0 = self.norm(y, y, tol);
            let d1 = self.norm(&self.k[0], y, tol);
            self.h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        }
        let span = t_end - t;
        let h_min = 1e-14 * libm::fmax(1.0, libm::fabs(t));
        let mut h = self.h.min(h_max);
        let mut rejected = false;
        loop {
            let last = h >= span;
            if last {
                h = span;
            }
            if h < h_min && !last {
                return Err(StepError::TooSmall { t, h });
            }
            let [k1, k2, k3, k4, k5, k6, k7] = &mut self.k;
            let tmp = &mut self.tmp;
            for i in 0..n {
                tmp[i] = y[i] + h * A21 * k1[i];
            }
            f(t + C2 * h, tmp, k2).map_err(StepError::Rhs)?;
            for i in 0..n {
                tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
            }
            f(t + C3 * h, tmp, k3).map_err(StepError::Rhs)?;
            for i in 0..n {
                tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            f(t + C4 * h, tmp, k4).map_err(StepError::Rhs)?;
            for i in 0..n {
                tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            f(t + C5 * h, tmp, k5).map_err(StepError::Rhs)?;
            for i in 0..n {
                tmp[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            let t_new = if last { t_end } else { t + h };
            f(t_new, tmp, k6).map_err(StepError::Rhs)?;
            let y1 = &mut self.y1;
            for i in 0..n {
                y1[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
            }
            f(t_new, y1, k7).map_err(StepError::Rhs)?;
            let mut err = 0.0;
            let mut finite = true;
            for i in 0..n {
                let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                let sk = tol.atol + tol.rtol * libm::fmax(libm::fabs(y[i]), libm::fabs(y1[i]));
                err = libm::fmax(err, libm::fabs(e / sk));
                finite &= y1[i].is_finite();
            }
            let err = if finite { err } else { f64::INFINITY };
            if err <= 1.0 {
                let fac = if err == 0.0 { 10.0 } else { (0.9 * libm::pow(err, -0.2)).clamp(0.2, 10.0) };
                let fac = if rejected { fac.min(1.0) } else { fac };
                // A step truncated at t_end says little about the next one.
                self.h = if last && !rejected { self.h.max(h * fac) } else { h * fac };
                dense.t0 = t;
                dense.h = t_new - t;
                dense.n = n;
                dense.r.resize(5 * n, 0.0);
                let r = &mut dense.r;
                for i in 0..n {
                    let dy = y1[i] - y[i];
                    let bspl = h * k1[i] - dy;
                    r[i] = y[i];
                    r[n + i] = dy;
                    r[2 * n + i] = bspl;
                    r[3 * n + i] = dy - h * k7[i] - bspl;
                    r[4 * n + i] =
                        h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
                }
                y.copy_from_slice(y1);
                core::mem::swap(k1, k7);
                return Ok(t_new);
            }
            rejected = true;
            let fac = if err.is_finite() { (0.9 * libm::pow(err, -0.2)).max(0.2) } else { 0.1 };
            h *= fac;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solve(f: &mut dyn FnMut(f64, &[f64], &mut [f64]) -> Result<(), ()>, y: &mut [f64], t_end: f64) -> usize {
        let mut rk = Dopri5::new(y.len());
        let mut dense = Dense::default();
        let tol = Tolerances { atol: 1e-8, rtol: 1e-8 };
        let mut t = 0.0;
        let mut steps = 0;
        while t < t_end {
            t = rk.step(f, t, y, t_end, &tol, f64::INFINITY, &mut dense).unwrap();
            steps += 1;
        }
        steps
    }

    #[test]
    fn exponential_growth() {
        let mut y = [1.0];
        solve(&mut |_, y, d| Ok(d[0] = y[0]), &mut y, 1.0);
        assert!((y[0] - core::f64::consts::E).abs() < 1e-8, "{}", y[0] - core::f64::consts::E);
    }

    #[test]
    fn dense_output_matches_polynomial() {
        // x' = v, v' = 6t - 12: cubic in t, reproduced exactly by the interpolant.
        let mut rk = Dopri5::new(2);
        let mut dense = Dense::default();
        let tol = Tolerances { atol: 1e-10, rtol: 1e-10 };
        let mut y = [1.0, 9.0];
        let mut f = |t: f64, y: &[f64], d: &mut [f64]| -> Result<(), ()> {
            d[0] = y[1];
            d[1] = 6.0 * t - 12.0;
            Ok(())
        };
        let mut t = 0.0;
        let mut out = [0.0; 2];
        while t < 2.0 {
            t = rk.step(&mut f, t, &mut y, 2.0, &tol, 0.3, &mut dense).unwrap();
            for k in 0..=10 {
                let s = dense.t0 + dense.h * k as f64 / 10.0;
                dense.eval(s, &mut out);
                let exact = s * s * s - 6.0 * s * s + 9.0 * s + 1.0;
                assert!((out[0] - exact).abs() < 1e-10, "{s} {}", out[0] - exact);
            }
        }
    }

    #[test]
    fn harmonic_oscillator_period() {
        let mut y = [1.0, 0.0];
        solve(&mut |_, y, d| {
            d[0] = y[1];
            d[1] = -y[0];
            Ok(())
        }, &mut y, 2.0 * core::f64::consts::PI);
        assert!((y[0] - 1.0).abs() < 1e-6 && y[1].abs() < 1e-6, "{y:?}");
    }
}
