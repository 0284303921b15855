mod common;

use cqkit::linalg::{
    family_rank, matrix_from_rows, numerical_rank, positive_dependence_certificate, SignConstraint,
};
use cqkit::vcalc::{dist_omega, project_omega, Norm};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn in_omega(a: f64, b: f64) -> bool {
    a >= 0.0 && b >= 0.0 && a.min(b) == 0.0
}

proptest! {
    #[test]
    fn dist_omega_zero_exactly_on_omega(a in -3.0f64..3.0, b in -3.0f64..3.0, snap in 0usize..3) {
        let (a, b) = match snap { 0 => (0.0, b.abs()), 1 => (a.abs(), 0.0), _ => (a, b) };
        for norm in [Norm::L1, Norm::Linf] {
            let d = dist_omega(a, b, norm);
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d == 0.0, in_omega(a, b));
        }
        let l1 = dist_omega(a, b, Norm::L1);
        let li = dist_omega(a, b, Norm::Linf);
        prop_assert!(li <= l1 + 1e-15 && l1 <= 2.0 * li + 1e-15);
    }

    #[test]
    fn projection_lands_on_omega(a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let p = project_omega(a, b);
        prop_assert!(in_omega(p[0], p[1]));
        // no point of Ω on either half-axis is closer
        let d = (p[0] - a).hypot(p[1] - b);
        prop_assert!(d <= (a.max(0.0) - a).hypot(b) + 1e-15);
        prop_assert!(d <= a.hypot(b.max(0.0) - b) + 1e-15);
    }

    #[test]
    fn rank_invariant_under_row_operations(
        rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..6),
        scales in prop::collection::vec(prop_oneof![1e-3f64..1e3, -1e3f64..-1e-3], 6),
        shift in 0usize..6,
    ) {
        let base = family_rank(&rows, 4, 1e-8).rank;
        let mut permuted = rows.clone();
        let n = permuted.len();
        permuted.rotate_left(shift % n);
        prop_assert_eq!(numerical_rank(&matrix_from_rows(&permuted, 4), 1e-8).rank, base);
        let scaled: Vec<Vec<f64>> = rows.iter().zip(&scales).map(|(r, s)| r.iter().map(|v| v * s).collect()).collect();
        prop_assert_eq!(family_rank(&scaled, 4, 1e-8).rank, base);
    }

    #[test]
    fn dependence_certificates_substitute_back(
        vectors in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2), 1..5),
        free in prop::collection::vec(any::<bool>(), 5),
    ) {
        let signs: Vec<SignConstraint> = (0..vectors.len())
            .map(|i| if free[i] { SignConstraint::Free } else { SignConstraint::Nonneg })
            .collect();
        if let Some(c) = positive_dependence_certificate(&vectors, &signs, 1 << 20).unwrap() {
            let mut sum = [0.0; 2];
            for (l, v) in c.multipliers.iter().zip(&vectors) {
                sum[0] += l * v[0];
                sum[1] += l * v[1];
            }
            prop_assert!(sum[0].hypot(sum[1]) <= 1e-8);
            let l1: f64 = c.multipliers.iter().map(|l| l.abs()).sum();
            prop_assert!((l1 - 1.0).abs() <= 1e-9);
            for (l, s) in c.multipliers.iter().zip(&signs) {
                if *s == SignConstraint::Nonneg {
                    prop_assert!(*l >= -1e-12);
                }
            }
        }
    }

    #[test]
    fn no_certificate_means_no_small_simplex_residual(
        vectors in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2), 1..5),
    ) {
        let signs = vec![SignConstraint::Nonneg; vectors.len()];
        if positive_dependence_certificate(&vectors, &signs, 1 << 20).unwrap().is_none() {
            let n = vectors.len();
            let steps = 100usize;
            let mut idx = vec![0usize; n];
            // enumerate compositions of `steps` into n parts
            fn rec(k: usize, left: usize, idx: &mut Vec<usize>, vs: &[Vec<f64>], steps: usize, best: &mut f64) {
                if k + 1 == idx.len() {
                    idx[k] = left;
                    let mut s = [0.0; 2];
                    for (c, v) in idx.iter().zip(vs) {
                        let l = *c as f64 / steps as f64;
                        s[0] += l * v[0];
                        s[1] += l * v[1];
                    }
                    *best = best.min(s[0].hypot(s[1]));
                    return;
                }
                for c in 0..=left {
                    idx[k] = c;
                    rec(k + 1, left - c, idx, vs, steps, best);
                }
            }
            let mut best = f64::INFINITY;
            rec(0, steps, &mut idx, &vectors, steps, &mut best);
            prop_assert!(best >= 1e-3, "simplex residual {best}");
        }
    }

    #[test]
    fn smooth_vertex_set_is_the_gradient(seed in any::<u64>(), nvars in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = common::random_smooth_expr(&mut rng, 5, nvars);
        let x: Vec<f64> = (0..nvars).map(|i| 0.3 * i as f64 - 0.4).collect();
        let v = e.subdifferential_vertices(&x, 1e-9).unwrap();
        prop_assert!(v.exact);
        prop_assert_eq!(v.vertices.len(), 1);
        let g = e.eval_gradient(&x).unwrap();
        for (a, b) in v.vertices[0].iter().zip(&g) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
