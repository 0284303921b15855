#![allow(dead_code)]

use cqkit::expr::{Expr, Variables};
use cqkit::system::{CatalogSet, FeasibilitySystem};

/// `h = 2x1 + x2`, `g = x1 + x2 − max{1/2, x3} − x4 + 1` over the sawtooth
/// graph times the segment from (0,1) to (1,0).
pub fn example_4_1() -> FeasibilitySystem {
    let x = |i| Expr::var(i);
    let g = x(0) + x(1) - Expr::max2(Expr::constant(0.5), x(2)) - x(3) + 1.0;
    let h = 2.0 * x(0) + x(1);
    FeasibilitySystem::new(
        Variables::new(["x1", "x2", "x3", "x4"]),
        vec![g],
        vec![h],
        vec![],
        vec![],
        vec![
            CatalogSet::Sawtooth,
            CatalogSet::segment(vec![0.0, 1.0], vec![1.0, 0.0]).unwrap(),
        ],
    )
    .unwrap()
}

pub const X_4_1: [f64; 4] = [0.0, 0.0, 0.5, 0.5];

use cqkit::bilevel::BilevelProgram;

/// Upper `x ∈ [−3, 2]`, `H = x² + y − 2 = 0`, objective `x + y`; lower
/// `min y³ − 3y` s.t. `x − y ≤ 0`, `y − 3 ≤ 0`.
pub fn example_5_1() -> BilevelProgram {
    let x = Expr::var(0);
    let y = Expr::var(1);
    BilevelProgram {
        x_names: vec!["x".into()],
        y_names: vec!["y".into()],
        upper_objective: x.clone() + y.clone(),
        upper_ineq: vec![],
        upper_eq: vec![Expr::powi(x.clone(), 2) + y.clone() - 2.0],
        lower_objective: Expr::powi(y.clone(), 3) - 3.0 * y.clone(),
        lower_ineq: vec![x - y.clone(), y - 3.0],
        lower_eq: vec![],
        x_set: CatalogSet::boxed(vec![-3.0], vec![2.0]).unwrap(),
        y_lower: vec![-4.0],
        y_upper: vec![4.0],
    }
}

pub fn v_5_1(x: f64) -> f64 {
    if (-2.0..=1.0).contains(&x) {
        -2.0
    } else {
        x.powi(3) - 3.0 * x
    }
}

/// Upper `H = x1 − x2 + y − 1/2 = 0`; lower `min (x1 − x2) e^y` over
/// `y ∈ [−ln 2, ln 2]`.
pub fn example_5_2() -> BilevelProgram {
    let (x1, x2, y) = (Expr::var(0), Expr::var(1), Expr::var(2));
    let ln2 = std::f64::consts::LN_2;
    BilevelProgram {
        x_names: vec!["x1".into(), "x2".into()],
        y_names: vec!["y".into()],
        upper_objective: x1.clone() + x2.clone() + y.clone(),
        upper_ineq: vec![],
        upper_eq: vec![x1.clone() - x2.clone() + y.clone() - 0.5],
        lower_objective: (x1 - x2) * Expr::exp(y.clone()),
        lower_ineq: vec![-y.clone() - ln2, y - ln2],
        lower_eq: vec![],
        x_set: CatalogSet::full(2),
        y_lower: vec![-1.0],
        y_upper: vec![1.0],
    }
}

pub fn v_5_2(x1: f64, x2: f64) -> f64 {
    let t = x1 - x2;
    if t == 0.0 {
        0.0
    } else if t < 0.0 {
        2.0 * t
    } else {
        0.5 * t
    }
}

/// Representatives of the three solution families of the 5.2 combined program.
pub fn reps_5_2(a: f64) -> [[f64; 5]; 3] {
    let ln2 = std::f64::consts::LN_2;
    [
        [a, a, 0.5, 0.0, 0.0],
        [0.0, ln2 - 0.5, ln2, 0.0, 2.0 * ln2 - 1.0],
        [ln2 + 0.5, 0.0, -ln2, (ln2 + 0.5) / 2.0, 0.0],
    ]
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn affine_at(rng: &mut ChaCha8Rng, x: &[f64], offset: f64) -> Expr {
    // small integer coefficients make rank deficiencies common
    let mut e = Expr::constant(offset);
    for (i, xi) in x.iter().enumerate() {
        let a = rng.gen_range(-2i32..=2) as f64;
        if a != 0.0 {
            e = e + a * (Expr::var(i) - *xi);
        }
    }
    e
}

/// Seeded random affine systems with a known feasible anchor point.
pub fn affine_corpus(seed: u64, count: usize) -> Vec<(FeasibilitySystem, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let d = rng.gen_range(2..=4);
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2i32..=2) as f64 * 0.5).collect();
            let g = (0..rng.gen_range(0..=2))
                .map(|_| {
                    let off = if rng.gen_bool(0.6) { 0.0 } else { -1.0 };
                    affine_at(&mut rng, &x, off)
                })
                .collect();
            let h = (0..rng.gen_range(0..=1)).map(|_| affine_at(&mut rng, &x, 0.0)).collect();
            let pairs = rng.gen_range(0..=2);
            let mut gg = Vec::new();
            let mut hh = Vec::new();
            for _ in 0..pairs {
                let (a, b) = match rng.gen_range(0..3) {
                    0 => (0.0, 1.0),
                    1 => (1.0, 0.0),
                    _ => (0.0, 0.0),
                };
                gg.push(affine_at(&mut rng, &x, a));
                hh.push(affine_at(&mut rng, &x, b));
            }
            let block = match rng.gen_range(0..3) {
                0 => CatalogSet::full(d),
                1 => {
                    // anchor on the lower face in the first coordinate
                    let lower: Vec<f64> = x.iter().enumerate().map(|(i, v)| if i == 0 { *v } else { v - 1.0 }).collect();
                    let upper: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
                    CatalogSet::boxed(lower, upper).unwrap()
                }
                _ => {
                    // union of two half-spaces with the anchor on both boundaries
                    let mut pieces = Vec::new();
                    for k in [0, d - 1] {
                        let mut row = vec![0.0; d];
                        row[k] = 1.0;
                        pieces.push((vec![row], vec![x[k]]));
                    }
                    CatalogSet::union(d, pieces).unwrap()
                }
            };
            let names: Vec<String> = (0..d).map(|i| format!("x{}", i + 1)).collect();
            let sys = FeasibilitySystem::new(Variables::new(names), g, h, gg, hh, vec![block]).unwrap();
            (sys, x)
        })
        .collect()
}

/// Random smooth expression of depth at most `depth`; `exp` and `ln` get
/// bounded or positive arguments and divisors are `1 + b²`.
pub fn random_smooth_expr(rng: &mut ChaCha8Rng, depth: usize, nvars: usize) -> Expr {
    if depth <= 1 || rng.gen_bool(0.15) {
        return if rng.gen_bool(0.7) {
            Expr::var(rng.gen_range(0..nvars))
        } else {
            Expr::constant(rng.gen_range(-1.0..1.0))
        };
    }
    let sub = |rng: &mut ChaCha8Rng| random_smooth_expr(rng, depth - 1, nvars);
    match rng.gen_range(0..8) {
        0 => sub(rng) + sub(rng),
        1 => sub(rng) - sub(rng),
        2 => sub(rng) * sub(rng),
        3 => {
            let b = sub(rng);
            sub(rng) / (Expr::powi(b, 2) + 1.0)
        }
        4 => Expr::powi(sub(rng), 2),
        5 => {
            let a = sub(rng);
            Expr::exp(a.clone() / (Expr::powi(a, 2) + 1.0))
        }
        6 => Expr::ln(Expr::powi(sub(rng), 2) + 1.0),
        _ => -sub(rng),
    }
}
