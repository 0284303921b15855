//! Error-bound residuals, distance to the feasible set, and empirical
//! estimates of the error-bound modulus.

use serde::Serialize;

use crate::config::Settings;
use crate::cq::{check_fullrank, CqError, SamplingPlan, Verdict};
use crate::expr::{Expr, ExprError};
use crate::stationarity::{solve_penalized, PenaltyOptions};
use crate::system::{active_index_sets, is_feasible, FeasibilitySystem, SystemError};
use crate::vcalc::{dist_omega, Norm};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ErrorBoundError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Cq(#[from] CqError),
    #[error("strict-complementarity residual needs an empty biactive set, found {0:?}")]
    NotStrictlyComplementary(Vec<usize>),
}

/// Which residual `φ` is used.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Residual {
    /// `‖g_+‖ + ‖h‖ + Σ d_Ω(G_i, H_i)`.
    Full { norm: Norm },
    /// `‖g_+‖ + ‖h‖ + Σ_{I*} |G_i| + Σ_{K*} |H_i|`.
    StrictComplementarity { i_star: Vec<usize>, k_star: Vec<usize> },
}

impl Residual {
    pub fn full() -> Self {
        Residual::Full { norm: Norm::L1 }
    }

    pub fn strict_at(sys: &FeasibilitySystem, x: &[f64], tol: f64) -> Result<Self, ErrorBoundError> {
        let sets = active_index_sets(sys, x, tol)?;
        if !sets.j_star.is_empty() {
            return Err(ErrorBoundError::NotStrictlyComplementary(sets.j_star));
        }
        Ok(Residual::StrictComplementarity {
            i_star: sets.i_star,
            k_star: sets.k_star,
        })
    }
}

pub fn residual_phi(sys: &FeasibilitySystem, x: &[f64], residual: &Residual) -> Result<f64, ExprError> {
    let mut total = 0.0;
    for g in &sys.g {
        total += g.eval(x)?.max(0.0);
    }
    for h in &sys.h {
        total += h.eval(x)?.abs();
    }
    match residual {
        Residual::Full { norm } => {
            for (gg, hh) in sys.big_g.iter().zip(&sys.big_h) {
                total += dist_omega(gg.eval(x)?, hh.eval(x)?, *norm);
            }
        }
        Residual::StrictComplementarity { i_star, k_star } => {
            for &i in i_star {
                total += sys.big_g[i].eval(x)?.abs();
            }
            for &i in k_star {
                total += sys.big_h[i].eval(x)?.abs();
            }
        }
    }
    Ok(total)
}

/// The l1 full residual as an expression, for use inside penalized objectives.
pub fn residual_expr(sys: &FeasibilitySystem) -> Expr {
    let mut terms = Vec::new();
    for g in &sys.g {
        terms.push(Expr::max(vec![g.clone(), Expr::zero()]));
    }
    for h in &sys.h {
        terms.push(Expr::abs(h.clone()));
    }
    for (a, b) in sys.big_g.iter().zip(&sys.big_h) {
        terms.push(Expr::max(vec![
            -a.clone(),
            -b.clone(),
            -(a.clone() + b.clone()),
            Expr::min(vec![a.clone(), b.clone()]),
        ]));
    }
    terms.into_iter().fold(Expr::zero(), |acc, t| acc + t)
}

/// Feasible nodes of a cubic grid centered at `center`; nodes are projected
/// onto `C` before the functional feasibility test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibleGrid {
    pub center: Vec<f64>,
    pub half_width: f64,
    pub points_per_dim: usize,
    pub spacing: f64,
    pub nodes: Vec<Vec<f64>>,
}

/// Residual below which a grid node counts as feasible.
pub const GRID_FEAS_TOL: f64 = 1e-14;

impl FeasibleGrid {
    /// `anchor_feasible` adds the center itself (known feasible) to the nodes.
    pub fn build(
        sys: &FeasibilitySystem,
        center: &[f64],
        half_width: f64,
        points_per_dim: usize,
        anchor_feasible: bool,
    ) -> Result<Self, ExprError> {
        let d = center.len();
        let n = points_per_dim.max(1) | 1;
        let spacing = if n > 1 { 2.0 * half_width / (n - 1) as f64 } else { 0.0 };
        let half = (n / 2) as i64;
        let mut nodes = Vec::new();
        if anchor_feasible {
            nodes.push(center.to_vec());
        }
        let mut idx = vec![-half; d];
        loop {
            let z: Vec<f64> = center.iter().zip(&idx).map(|(c, &k)| c + k as f64 * spacing).collect();
            let p = sys.project_onto_c(&z);
            if residual_phi(sys, &p, &Residual::full())? <= GRID_FEAS_TOL {
                nodes.push(p);
            }
            let mut k = 0;
            while k < d {
                idx[k] += 1;
                if idx[k] <= half {
                    break;
                }
                idx[k] = -half;
                k += 1;
            }
            if k == d {
                break;
            }
        }
        Ok(FeasibleGrid {
            center: center.to_vec(),
            half_width,
            points_per_dim: n,
            spacing,
            nodes,
        })
    }

    pub fn nearest(&self, x: &[f64]) -> Option<(f64, &[f64])> {
        self.nodes
            .iter()
            .map(|n| (dist(n, x), n.as_slice()))
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Grid points per dimension for the default grid oracle (`None` beyond d = 4).
pub fn default_grid_points(d: usize) -> Option<usize> {
    match d {
        0 | 1 => Some(2001),
        2 => Some(201),
        3 => Some(41),
        4 => Some(21),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DistanceMethod {
    Grid {
        center: Option<Vec<f64>>,
        half_width: f64,
        points_per_dim: usize,
    },
    PenaltyProjection(PenaltyOptions),
}

impl DistanceMethod {
    pub fn name(&self) -> &'static str {
        match self {
            DistanceMethod::Grid { .. } => "grid",
            DistanceMethod::PenaltyProjection(_) => "penalty-projection",
        }
    }

    pub fn penalty_default() -> Self {
        DistanceMethod::PenaltyProjection(PenaltyOptions {
            schedule: vec![1e2, 1e4, 1e6, 1e8, 1e10],
            initial_step: 0.05,
            ..PenaltyOptions::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceResult {
    pub distance: f64,
    pub nearest: Option<Vec<f64>>,
    pub method: String,
    /// No feasible candidate was found within the budget; `distance` is then
    /// infinite (grid) or measured to an infeasible point (penalty).
    pub exhausted: bool,
}

pub fn distance_to_feasible(
    sys: &FeasibilitySystem,
    x: &[f64],
    method: &DistanceMethod,
    s: &Settings,
) -> Result<DistanceResult, ExprError> {
    match method {
        DistanceMethod::Grid {
            center,
            half_width,
            points_per_dim,
        } => {
            let c = center.clone().unwrap_or_else(|| x.to_vec());
            let anchored = is_feasible(sys, &c, s.feas_tol).map(|r| r.feasible).unwrap_or(false);
            let grid = FeasibleGrid::build(sys, &c, *half_width, *points_per_dim, anchored)?;
            Ok(match grid.nearest(x) {
                Some((d, n)) => DistanceResult {
                    distance: d,
                    nearest: Some(n.to_vec()),
                    method: method.name().into(),
                    exhausted: false,
                },
                None => DistanceResult {
                    distance: f64::INFINITY,
                    nearest: None,
                    method: method.name().into(),
                    exhausted: true,
                },
            })
        }
        DistanceMethod::PenaltyProjection(opts) => {
            let opts = PenaltyOptions {
                center: Some(x.to_vec()),
                ..opts.clone()
            };
            let r = solve_penalized(sys, &Expr::zero(), x, &opts, s)?;
            Ok(DistanceResult {
                distance: dist(&r.point, x),
                exhausted: r.infeasible,
                nearest: Some(r.point),
                method: method.name().into(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadiusEstimate {
    pub radius: f64,
    pub samples: usize,
    /// Samples with `φ` above the zero threshold.
    pub counted: usize,
    pub alpha_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorstSample {
    pub point: Vec<f64>,
    pub d_f: f64,
    pub phi: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBoundReport {
    pub point: Vec<f64>,
    pub residual: Residual,
    pub d_f_method: String,
    /// Maximum of `d_F/φ` over all counted samples.
    pub alpha_hat: Option<f64>,
    pub samples: usize,
    pub per_radius: Vec<RadiusEstimate>,
    pub worst: Option<WorstSample>,
    pub strict_complementarity: bool,
    /// Some sample had `φ = 0` but a positive distance.
    pub unbounded: bool,
    /// No sample had a positive residual.
    pub trivial: bool,
    pub fullrank: Verdict,
    pub notes: Vec<String>,
}

/// Residual values at or below this count as zero.
pub const PHI_ZERO_TOL: f64 = 1e-14;

/// Samples `P_C(x* + r u)` per the plan and records `max d_F/φ` per radius.
/// With the grid oracle each radius gets its own grid of half-width `2r`
/// centered at `x*`.
pub fn estimate_error_bound_modulus(
    sys: &FeasibilitySystem,
    x: &[f64],
    plan: &SamplingPlan,
    residual: &Residual,
    method: Option<&DistanceMethod>,
    s: &Settings,
) -> Result<ErrorBoundReport, ErrorBoundError> {
    let sets = active_index_sets(sys, x, s.feas_tol)?;
    let d = x.len();
    let fullrank = check_fullrank(sys, x, s)?.verdict;
    let mut notes = Vec::new();
    let use_grid = match method {
        Some(DistanceMethod::Grid { .. }) => true,
        Some(DistanceMethod::PenaltyProjection(_)) => false,
        None => default_grid_points(d).is_some(),
    };
    let grid_points = match method {
        Some(DistanceMethod::Grid { points_per_dim, .. }) => *points_per_dim,
        _ => default_grid_points(d).unwrap_or(21),
    };
    let penalty = match method {
        Some(m @ DistanceMethod::PenaltyProjection(_)) => m.clone(),
        _ => DistanceMethod::penalty_default(),
    };
    let samples = plan.sample(sys, x);
    let radii = plan.radii();
    let mut per_radius = Vec::new();
    let mut worst: Option<WorstSample> = None;
    let mut unbounded = false;
    for (level, &r) in radii.iter().enumerate() {
        let grid = if use_grid {
            Some(FeasibleGrid::build(sys, x, 2.0 * r, grid_points, true)?)
        } else {
            None
        };
        let mut est = RadiusEstimate {
            radius: r,
            samples: 0,
            counted: 0,
            alpha_hat: None,
        };
        for smp in samples.iter().filter(|smp| smp.level == level) {
            est.samples += 1;
            let phi = residual_phi(sys, &smp.point, residual)?;
            let d_f = match &grid {
                Some(g) => g.nearest(&smp.point).map_or(f64::INFINITY, |(dd, _)| dd),
                None => {
                    let res = distance_to_feasible(sys, &smp.point, &penalty, s)?;
                    if res.exhausted {
                        notes.push(format!("penalty projection did not reach feasibility from {:?}", smp.point));
                    }
                    res.distance
                }
            };
            if phi <= PHI_ZERO_TOL {
                if d_f > 0.0 {
                    unbounded = true;
                }
                continue;
            }
            est.counted += 1;
            let ratio = d_f / phi;
            est.alpha_hat = Some(est.alpha_hat.map_or(ratio, |a: f64| a.max(ratio)));
            if worst.as_ref().is_none_or(|w| ratio > w.ratio) {
                worst = Some(WorstSample {
                    point: smp.point.clone(),
                    d_f,
                    phi,
                    ratio,
                });
            }
        }
        per_radius.push(est);
    }
    let alpha_hat = if unbounded { None } else { worst.as_ref().map(|w| w.ratio) };
    let trivial = worst.is_none() && !unbounded;
    let strict = sets.j_star.is_empty();
    if fullrank == Verdict::Holds {
        notes.push("full-rank condition holds: the error bound is certified".into());
    } else if strict {
        let regular = sys.blocks.iter().all(|b| b.is_clarke_regular()) && sys.g.iter().all(|g| g.is_smooth());
        notes.push(if regular {
            "strict complementarity and regularity hold; the bound follows when RCPLD holds".into()
        } else {
            "strict complementarity holds; Clarke regularity is unverified".into()
        });
    } else {
        notes.push("biactive pairs present: no sufficient condition applies".into());
    }
    if unbounded {
        notes.push("a sample with zero residual lies off the feasible set".into());
    }
    if trivial {
        notes.push("trivial bound: every sample had zero residual".into());
    }
    Ok(ErrorBoundReport {
        point: x.to_vec(),
        residual: residual.clone(),
        d_f_method: if use_grid { "grid".into() } else { "penalty-projection".into() },
        alpha_hat,
        samples: samples.len(),
        per_radius,
        worst,
        strict_complementarity: strict,
        unbounded,
        trivial,
        fullrank,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Variables;
    use crate::system::CatalogSet;

    fn sys(g: Vec<Expr>, h: Vec<Expr>, gg: Vec<Expr>, hh: Vec<Expr>, n: usize) -> FeasibilitySystem {
        let names: Vec<String> = (0..n).map(|i| format!("x{}", i + 1)).collect();
        FeasibilitySystem::new(Variables::new(names), g, h, gg, hh, vec![CatalogSet::full(n)]).unwrap()
    }

    #[test]
    fn pair_contribution() {
        let s = sys(vec![], vec![], vec![Expr::var(0)], vec![Expr::var(1)], 2);
        assert_eq!(residual_phi(&s, &[-1.0, -2.0], &Residual::full()).unwrap(), 3.0);
        assert_eq!(residual_phi(&s, &[0.0, 2.0], &Residual::full()).unwrap(), 0.0);
    }

    #[test]
    fn residual_expr_matches_evaluation() {
        let s = sys(
            vec![Expr::var(0) - 1.0],
            vec![Expr::var(1) * 2.0],
            vec![Expr::var(0)],
            vec![Expr::var(1) + 0.5],
            2,
        );
        let e = residual_expr(&s);
        for p in [[-1.0, -2.0], [2.0, 0.1], [0.3, -0.4], [0.0, 0.0]] {
            assert!((e.eval(&p).unwrap() - residual_phi(&s, &p, &Residual::full()).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn strict_variant_needs_empty_biactive_set() {
        let s = sys(vec![], vec![], vec![Expr::var(0)], vec![Expr::var(1)], 2);
        assert!(Residual::strict_at(&s, &[0.0, 0.0], 1e-8).is_err());
        let r = Residual::strict_at(&s, &[0.0, 1.0], 1e-8).unwrap();
        assert_eq!(residual_phi(&s, &[0.25, 0.5], &r).unwrap(), 0.25);
    }

    #[test]
    fn distance_to_hyperplane() {
        let s = sys(vec![], vec![Expr::var(0)], vec![], vec![], 2);
        let grid = DistanceMethod::Grid {
            center: None,
            half_width: 0.6,
            points_per_dim: 201,
        };
        let r = distance_to_feasible(&s, &[0.3, 0.0], &grid, &Settings::default()).unwrap();
        assert!((r.distance - 0.3).abs() < 1e-12);
        let p = distance_to_feasible(&s, &[0.3, 0.0], &DistanceMethod::penalty_default(), &Settings::default())
            .unwrap();
        assert!((p.distance - 0.3).abs() < 1e-6);
        assert!(!p.exhausted);
    }

    #[test]
    fn feasible_point_has_zero_distance() {
        let s = sys(vec![], vec![Expr::var(0)], vec![], vec![], 2);
        let grid = DistanceMethod::Grid {
            center: None,
            half_width: 0.1,
            points_per_dim: 11,
        };
        let r = distance_to_feasible(&s, &[0.0, 0.7], &grid, &Settings::default()).unwrap();
        assert_eq!(r.distance, 0.0);
    }

    #[test]
    fn interior_point_gives_trivial_bound() {
        let s = sys(vec![Expr::var(0) - 1.0], vec![], vec![], vec![], 1);
        let plan = SamplingPlan {
            r0: 1e-2,
            levels: 2,
            points_per_radius: 8,
            ..SamplingPlan::default()
        };
        let r = estimate_error_bound_modulus(&s, &[0.0], &plan, &Residual::full(), None, &Settings::default())
            .unwrap();
        assert!(r.trivial);
        assert!(r.alpha_hat.is_none());
    }

    #[test]
    fn square_equality_modulus_blows_up() {
        let s = sys(vec![], vec![Expr::powi(Expr::var(0), 2)], vec![], vec![], 1);
        let plan = SamplingPlan {
            r0: 1e-1,
            rho: 0.1,
            levels: 3,
            points_per_radius: 10,
            ..SamplingPlan::default()
        };
        let r = estimate_error_bound_modulus(&s, &[0.0], &plan, &Residual::full(), None, &Settings::default())
            .unwrap();
        for (k, est) in r.per_radius.iter().enumerate() {
            let a = est.alpha_hat.unwrap();
            assert!((a * est.radius - 1.0).abs() < 1e-9, "level {k}: {a}");
        }
    }
}
