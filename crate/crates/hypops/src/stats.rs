//! Sample statistics: moments, empirical CDFs, two-sample KS distances and
//! histograms.

use std::cmp::Ordering;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("empty sample")]
    EmptySample,
}

fn total(a: &f64, b: &f64) -> Ordering {
    a.total_cmp(b)
}

/// Sorts a copy of `xs` (NaN last).
pub fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(total);
    v
}

/// Mean and unbiased variance (0 for a single value).
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, ss / (n - 1) as f64)
}

/// Median of an arbitrary sample (mean of the middle pair for even sizes).
pub fn median(xs: &[f64]) -> f64 {
    let v = sorted(xs);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Step function `F(x) = #{x_i <= x} / n` over a sorted sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Ecdf {
    sample: Vec<f64>,
}

impl Ecdf {
    pub fn new(xs: &[f64]) -> Result<Ecdf, StatsError> {
        if xs.is_empty() {
            return Err(StatsError::EmptySample);
        }
        Ok(Ecdf { sample: sorted(xs) })
    }

    pub fn len(&self) -> usize {
        self.sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample.is_empty()
    }

    pub fn sample(&self) -> &[f64] {
        &self.sample
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.sample.partition_point(|&s| s <= x) as f64 / self.sample.len() as f64
    }

    /// Distinct values with the CDF just after each.
    pub fn steps(&self) -> Vec<(f64, f64)> {
        let n = self.sample.len() as f64;
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (i, &x) in self.sample.iter().enumerate() {
            let f = (i + 1) as f64 / n;
            match out.last_mut() {
                Some(last) if last.0 == x => last.1 = f,
                _ => out.push((x, f)),
            }
        }
        out
    }
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`. Ties across
/// the samples are handled by stepping both CDFs past a shared value
/// together.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let a = sorted(a);
    let b = sorted(b);
    Ok(ks_sorted(&a, &b))
}

/// As [`ks_two_sample`] for samples already sorted ascending.
pub fn ks_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = if a[i].total_cmp(&b[j]).is_le() { a[i] } else { b[j] };
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    // Once one sample is exhausted its CDF is 1 and the gap only shrinks.
    d
}

/// Equal-width histogram on `[lo, hi]`; values outside are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize, xs: &[f64]) -> Histogram {
        let bins = bins.max(1);
        let mut counts = vec![0; bins];
        let w = (hi - lo) / bins as f64;
        for &x in xs {
            if x >= lo && x <= hi && w > 0.0 {
                let k = (((x - lo) / w) as usize).min(bins - 1);
                counts[k] += 1;
            }
        }
        Histogram { lo, hi, counts }
    }

    pub fn edges(&self, k: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + k as f64 * w, self.lo + (k + 1) as f64 * w)
    }

    /// Number of values that landed in a bin.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Fraction of `xs` in the closed interval `[a, b]`.
pub fn fraction_in(xs: &[f64], a: f64, b: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().filter(|&&x| x >= a && x <= b).count() as f64 / xs.len() as f64
}
