use hypops_core::pdmp::{classify_surface_contact, sliding_field, Contact};
use proptest::prelude::*;

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn stable_pairs_give_a_tangent_convex_combination(
        dim in 2usize..5,
        raw in prop::collection::vec(-10.0f64..10.0, 15),
        push in 0.01f64..10.0,
        pull in 0.01f64..10.0,
    ) {
        let n = unit(&raw[..dim]);
        prop_assume!(n.iter().all(|x| x.is_finite()));
        // Shift tangential parts so that n.F1 = -push and n.F2 = pull.
        let f1: Vec<f64> = (0..dim).map(|i| raw[5 + i]).collect();
        let f2: Vec<f64> = (0..dim).map(|i| raw[10 + i]).collect();
        let (a1, a2) = (dot(&n, &f1), dot(&n, &f2));
        let f1: Vec<f64> = f1.iter().zip(&n).map(|(f, ni)| f - (a1 + push) * ni).collect();
        let f2: Vec<f64> = f2.iter().zip(&n).map(|(f, ni)| f - (a2 - pull) * ni).collect();
        let (nf1, nf2) = (dot(&n, &f1), dot(&n, &f2));
        prop_assert_eq!(classify_surface_contact(nf1, nf2, 1e-12), Contact::StableSliding);
        let (g, alpha) = sliding_field(&f1, &f2, &n, 1e-12).unwrap();
        prop_assert!(alpha > 0.0 && alpha < 1.0, "{alpha}");
        let scale = 1.0 + dot(&f1, &f1).sqrt() + dot(&f2, &f2).sqrt();
        prop_assert!(dot(&n, &g).abs() < 1e-10 * scale, "{}", dot(&n, &g));
        for i in 0..dim {
            prop_assert!((g[i] - (alpha * f1[i] + (1.0 - alpha) * f2[i])).abs() < 1e-12 * scale);
        }
    }

    #[test]
    fn classification_is_total_and_symmetric_in_sign(a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let c = classify_surface_contact(a, b, 1e-9);
        let flipped = classify_surface_contact(-b, -a, 1e-9);
        // Reversing the normal swaps the roles of the two fields.
        prop_assert_eq!(c, flipped);
    }
}
