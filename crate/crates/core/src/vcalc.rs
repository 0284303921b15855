//! Variational objects of the complementarity set `Ω = {(a, b) : 0 ≤ a ⊥ b ≥ 0}`
//! and of the aggregate residual `φ0`.

use serde::{Deserialize, Serialize};

use crate::expr::ExprError;
use crate::system::{ConeChart, FeasibilitySystem};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VcalcError {
    #[error("({a}, {b}) is not in the complementarity set")]
    NotInOmega { a: f64, b: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L1,
    Linf,
}

impl std::str::FromStr for Norm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "l1" => Ok(Norm::L1),
            "linf" => Ok(Norm::Linf),
            other => Err(format!("unknown norm `{other}` (expected l1 or linf)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaBranch {
    /// `a = 0 < b`
    FirstZero,
    /// `a > 0 = b`
    SecondZero,
    /// `a = b = 0`
    Biactive,
}

/// Limiting normal cone of `Ω` at one pair, as a union of charts in `ℝ²`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OmegaNormalCone {
    pub branch: OmegaBranch,
    pub charts: Vec<ConeChart>,
}

impl OmegaNormalCone {
    pub fn contains(&self, v: [f64; 2], tol: f64) -> bool {
        v == [0.0, 0.0] || self.charts.iter().any(|c| c.distance(&v) <= tol)
    }
}

pub fn normal_cone_omega(a: f64, b: f64, tol: f64) -> Result<OmegaNormalCone, VcalcError> {
    if a < -tol || b < -tol || a.min(b) > tol {
        return Err(VcalcError::NotInOmega { a, b });
    }
    let az = a.abs() <= tol;
    let bz = b.abs() <= tol;
    let (branch, charts) = match (az, bz) {
        (true, false) => (OmegaBranch::FirstZero, vec![ConeChart::line(vec![1.0, 0.0])]),
        (false, true) => (OmegaBranch::SecondZero, vec![ConeChart::line(vec![0.0, 1.0])]),
        _ => (
            OmegaBranch::Biactive,
            vec![
                ConeChart {
                    rays: vec![vec![-1.0, 0.0], vec![0.0, -1.0]],
                    lineality: vec![],
                    apex: false,
                },
                ConeChart::line(vec![1.0, 0.0]),
                ConeChart::line(vec![0.0, 1.0]),
            ],
        ),
    };
    Ok(OmegaNormalCone { branch, charts })
}

/// A point of `Ω` within `delta` of `(a, b)` at which `v` is a regular
/// normal, if one exists among the branch representatives.
pub fn regular_normal_base(a: f64, b: f64, v: [f64; 2], delta: f64, tol: f64) -> Option<[f64; 2]> {
    let cone = normal_cone_omega(a, b, tol).ok()?;
    let scale = tol * (1.0 + v[0].abs() + v[1].abs());
    match cone.branch {
        OmegaBranch::FirstZero => (v[1].abs() <= scale).then_some([0.0, b]),
        OmegaBranch::SecondZero => (v[0].abs() <= scale).then_some([a, 0.0]),
        OmegaBranch::Biactive => {
            if v[0] <= scale && v[1] <= scale {
                Some([0.0, 0.0])
            } else if v[1].abs() <= scale {
                Some([0.0, delta])
            } else if v[0].abs() <= scale {
                Some([delta, 0.0])
            } else {
                None
            }
        }
    }
}

/// Distance from `(a, b)` to `Ω` in the given norm.
pub fn dist_omega(a: f64, b: f64, norm: Norm) -> f64 {
    match norm {
        Norm::L1 => (-a).max(-b).max(-(a + b)).max(a.min(b)),
        Norm::Linf => a.min(b).abs(),
    }
}

/// The two candidate nearest points on the half-axes of `Ω`.
pub fn omega_candidates(a: f64, b: f64) -> [[f64; 2]; 2] {
    [[a.max(0.0), 0.0], [0.0, b.max(0.0)]]
}

/// Euclidean projection onto `Ω`; ties go to the first half-axis.
pub fn project_omega(a: f64, b: f64) -> [f64; 2] {
    let [p, q] = omega_candidates(a, b);
    let d = |z: [f64; 2]| (z[0] - a).hypot(z[1] - b);
    if d(p) <= d(q) {
        p
    } else {
        q
    }
}

/// The three groups of terms summed by `φ0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Phi0Terms {
    pub g_plus: Vec<f64>,
    pub h_abs: Vec<f64>,
    pub pair_min_abs: Vec<f64>,
}

impl Phi0Terms {
    pub fn total(&self) -> f64 {
        self.g_plus.iter().chain(&self.h_abs).chain(&self.pair_min_abs).sum()
    }
}

pub fn phi0_terms(sys: &FeasibilitySystem, x: &[f64]) -> Result<Phi0Terms, ExprError> {
    let g_plus = sys.g.iter().map(|g| g.eval(x).map(|v| v.max(0.0))).collect::<Result<_, _>>()?;
    let h_abs = sys.h.iter().map(|h| h.eval(x).map(f64::abs)).collect::<Result<_, _>>()?;
    let pair_min_abs = sys
        .big_g
        .iter()
        .zip(&sys.big_h)
        .map(|(g, h)| Ok(g.eval(x)?.min(h.eval(x)?).abs()))
        .collect::<Result<_, ExprError>>()?;
    Ok(Phi0Terms {
        g_plus,
        h_abs,
        pair_min_abs,
    })
}

/// `Σ max{0, g_i} + Σ |h_i| + Σ |min{G_i, H_i}|`.
pub fn phi0(sys: &FeasibilitySystem, x: &[f64]) -> Result<f64, ExprError> {
    Ok(phi0_terms(sys, x)?.total())
}

/// One generator of the `φ0` subdifferential family.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Phi0Certificate {
    pub value: f64,
    pub lambda_g: Vec<f64>,
    pub lambda_h: Vec<f64>,
    pub lambda_gg: Vec<f64>,
    pub lambda_hh: Vec<f64>,
    /// Subdifferential vertex used for each `g_i` with a nonzero multiplier.
    pub g_vertices: Vec<Option<Vec<f64>>>,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Phi0Generators {
    pub certificates: Vec<Phi0Certificate>,
    /// `false` if some `g_i` vertex set is an outer estimate.
    pub exact: bool,
    /// `false` if enumeration stopped at the cap.
    pub complete: bool,
}

#[derive(Clone)]
enum Choice {
    G(usize, f64, Vec<f64>),
    H(usize, f64),
    Pair(usize, f64, f64),
}

/// Finite generator family for `∂φ0(x)`: one certificate per combination of
/// branch multipliers and `g` subdifferential vertices.
pub fn phi0_subdifferential_elements(
    sys: &FeasibilitySystem,
    x: &[f64],
    tol: f64,
    cap: usize,
) -> Result<Phi0Generators, ExprError> {
    let d = sys.dim();
    let value = phi0(sys, x)?;
    let mut exact = true;
    let mut groups: Vec<Vec<Choice>> = Vec::new();
    for (i, g) in sys.g.iter().enumerate() {
        let gv = g.eval(x)?;
        if gv < -tol {
            continue;
        }
        let verts = g.subdifferential_vertices(x, tol)?;
        exact &= verts.exact;
        let mut opts: Vec<Choice> = verts.vertices.into_iter().map(|v| Choice::G(i, 1.0, v)).collect();
        if gv <= tol {
            opts.push(Choice::G(i, 0.0, vec![0.0; d]));
        }
        groups.push(opts);
    }
    for (i, h) in sys.h.iter().enumerate() {
        let hv = h.eval(x)?;
        groups.push(if hv > tol {
            vec![Choice::H(i, 1.0)]
        } else if hv < -tol {
            vec![Choice::H(i, -1.0)]
        } else {
            vec![Choice::H(i, 1.0), Choice::H(i, -1.0)]
        });
    }
    for i in 0..sys.big_g.len() {
        let a = sys.big_g[i].eval(x)?;
        let b = sys.big_h[i].eval(x)?;
        let sign_of = |t: f64| -> Vec<f64> {
            // multiplier λ with −λ ∈ ∂|·|(t)
            if t > tol {
                vec![-1.0]
            } else if t < -tol {
                vec![1.0]
            } else {
                vec![-1.0, 1.0]
            }
        };
        let opts: Vec<Choice> = if a < b - tol {
            sign_of(a).into_iter().map(|l| Choice::Pair(i, l, 0.0)).collect()
        } else if b < a - tol {
            sign_of(b).into_iter().map(|l| Choice::Pair(i, 0.0, l)).collect()
        } else if a.min(b) > tol {
            vec![Choice::Pair(i, -1.0, 0.0), Choice::Pair(i, 0.0, -1.0)]
        } else if a.max(b) < -tol {
            vec![Choice::Pair(i, 1.0, 0.0), Choice::Pair(i, 0.0, 1.0)]
        } else {
            vec![
                Choice::Pair(i, 0.5, 0.5),
                Choice::Pair(i, 1.0, 0.0),
                Choice::Pair(i, -1.0, 0.0),
                Choice::Pair(i, 0.0, 1.0),
                Choice::Pair(i, 0.0, -1.0),
            ]
        };
        groups.push(opts);
    }

    let grad_gg: Vec<Vec<f64>> = sys.big_g.iter().map(|e| e.eval_gradient(x)).collect::<Result<_, _>>()?;
    let grad_hh: Vec<Vec<f64>> = sys.big_h.iter().map(|e| e.eval_gradient(x)).collect::<Result<_, _>>()?;
    let grad_h: Vec<Vec<f64>> = sys.h.iter().map(|e| e.eval_gradient(x)).collect::<Result<_, _>>()?;

    let mut certificates = Vec::new();
    let mut idx = vec![0usize; groups.len()];
    let mut complete = true;
    loop {
        if certificates.len() >= cap {
            complete = false;
            break;
        }
        let mut c = Phi0Certificate {
            value,
            lambda_g: vec![0.0; sys.g.len()],
            lambda_h: vec![0.0; sys.h.len()],
            lambda_gg: vec![0.0; sys.big_g.len()],
            lambda_hh: vec![0.0; sys.big_h.len()],
            g_vertices: vec![None; sys.g.len()],
            vector: vec![0.0; d],
        };
        for (gi, &k) in groups.iter().zip(&idx) {
            match &gi[k] {
                Choice::G(i, l, v) => {
                    c.lambda_g[*i] = *l;
                    if *l != 0.0 {
                        c.g_vertices[*i] = Some(v.clone());
                        axpy(&mut c.vector, *l, v);
                    }
                }
                Choice::H(i, l) => {
                    c.lambda_h[*i] = *l;
                    axpy(&mut c.vector, *l, &grad_h[*i]);
                }
                Choice::Pair(i, lg, lh) => {
                    c.lambda_gg[*i] = *lg;
                    c.lambda_hh[*i] = *lh;
                    axpy(&mut c.vector, -lg, &grad_gg[*i]);
                    axpy(&mut c.vector, -lh, &grad_hh[*i]);
                }
            }
        }
        certificates.push(c);
        // odometer
        let mut k = 0;
        while k < groups.len() {
            idx[k] += 1;
            if idx[k] < groups[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == groups.len() {
            break;
        }
    }
    Ok(Phi0Generators {
        certificates,
        exact,
        complete,
    })
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `Σ d_Ω(G_i(x), H_i(x))` in the chosen norm.
pub fn omega_residual(sys: &FeasibilitySystem, x: &[f64], norm: Norm) -> Result<f64, ExprError> {
    let mut s = 0.0;
    for (g, h) in sys.big_g.iter().zip(&sys.big_h) {
        s += dist_omega(g.eval(x)?, h.eval(x)?, norm);
    }
    Ok(s)
}
