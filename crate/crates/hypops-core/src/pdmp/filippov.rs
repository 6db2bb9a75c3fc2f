//! Contact classification and the sliding vector field on a surface
//! `h = 0`. `F1` is the field on the `h > 0` side, `F2` on the `h < 0` side
//! and the normal points into `h > 0`.

use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Contact {
    Transversal,
    StableSliding,
    UnstableSliding,
    Tangential,
}

impl Contact {
    pub fn as_str(self) -> &'static str {
        match self {
            Contact::Transversal => "transversal",
            Contact::StableSliding => "stable_sliding",
            Contact::UnstableSliding => "unstable_sliding",
            Contact::Tangential => "tangential",
        }
    }
}

/// Classifies a contact from the normal components of the two fields.
pub fn classify_surface_contact(nf1: f64, nf2: f64, tol: f64) -> Contact {
    if libm::fabs(nf1) <= tol || libm::fabs(nf2) <= tol {
        Contact::Tangential
    } else if (nf1 > 0.0) == (nf2 > 0.0) {
        Contact::Transversal
    } else if nf1 < 0.0 {
        Contact::StableSliding
    } else {
        Contact::UnstableSliding
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegenerateSliding {
    pub nf1: f64,
    pub nf2: f64,
}

/// Convex combination `G = a F1 + (1 - a) F2` tangent to the surface.
/// `n` need not be normalized.
pub fn sliding_field(f1: &[f64], f2: &[f64], n: &[f64], tol: f64) -> Result<(Vec<f64>, f64), DegenerateSliding> {
    let mut g = alloc::vec![0.0; f1.len()];
    let a = sliding_field_into(f1, f2, n, tol, &mut g)?;
    Ok((g, a))
}

pub fn sliding_field_into(f1: &[f64], f2: &[f64], n: &[f64], tol: f64, g: &mut [f64]) -> Result<f64, DegenerateSliding> {
    let nf1 = dot(n, f1);
    let nf2 = dot(n, f2);
    let den = nf2 - nf1;
    if !(den > tol) {
        return Err(DegenerateSliding { nf1, nf2 });
    }
    let a = nf2 / den;
    for i in 0..g.len() {
        g[i] = a * f1[i] + (1.0 - a) * f2[i];
    }
    Ok(a)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_table() {
        assert_eq!(classify_surface_contact(-1.0, 1.0, 1e-9), Contact::StableSliding);
        assert_eq!(classify_surface_contact(2.0, 3.0, 1e-9), Contact::Transversal);
        assert_eq!(classify_surface_contact(-2.0, -3.0, 1e-9), Contact::Transversal);
        assert_eq!(classify_surface_contact(1.0, -1.0, 1e-9), Contact::UnstableSliding);
        assert_eq!(classify_surface_contact(1e-12, -1.0, 1e-9), Contact::Tangential);
    }

    #[test]
    fn weights() {
        let (_, a) = sliding_field(&[-2.0], &[3.0], &[1.0], 1e-12).unwrap();
        assert!((a - 0.6).abs() < 1e-15);
        let (g, a) = sliding_field(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 1.0], 1e-12).unwrap();
        assert_eq!(a, 0.5);
        assert_eq!(g, [1.0, 0.0]);
        assert!(sliding_field(&[1.0], &[1.0], &[1.0], 1e-12).is_err());
    }
}
