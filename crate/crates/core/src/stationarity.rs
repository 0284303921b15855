//! M-stationarity by linear feasibility, and a penalized local solver.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::Settings;
use crate::cq::{find_multipliers, star_data, star_exact, CqError, MultiplierVector};
use crate::expr::{Expr, ExprError};
use crate::linalg::matrix_from_rows;
use crate::system::{FeasibilitySystem, IndexSets};
use crate::vcalc::phi0;

/// Multipliers beyond this magnitude are treated as unbounded rays.
pub const MULTIPLIER_BOX: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StationarityVerdict {
    Stationary,
    NotStationaryWithinModel,
    Incomplete,
}

impl std::fmt::Display for StationarityVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StationarityVerdict::Stationary => "stationary",
            StationarityVerdict::NotStationaryWithinModel => "not-stationary-within-model",
            StationarityVerdict::Incomplete => "incomplete",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MStationarityReport {
    pub verdict: StationarityVerdict,
    pub point: Vec<f64>,
    pub index_sets: IndexSets,
    pub multipliers: Option<MultiplierVector>,
    pub objective_vertex: Option<Vec<f64>>,
    pub residual: Option<f64>,
    pub notes: Vec<String>,
}

/// Searches multipliers with `0 ∈ ∇f + Σλ^g v + Σλ^h ∇h − Σλ^G ∇G − Σλ^H ∇H + N_C(x*)`
/// under the M-stationary sign pattern, one objective vertex at a time.
pub fn check_mstationarity(
    sys: &FeasibilitySystem,
    f: &Expr,
    x: &[f64],
    s: &Settings,
) -> Result<MStationarityReport, CqError> {
    let star = star_data(sys, x, s)?;
    let fverts = f.subdifferential_vertices(x, s.kink_tol)?;
    let mut report = MStationarityReport {
        verdict: StationarityVerdict::NotStationaryWithinModel,
        point: x.to_vec(),
        index_sets: star.sets.clone(),
        multipliers: None,
        objective_vertex: None,
        residual: None,
        notes: vec![],
    };
    let mut complete = true;
    for v in &fverts.vertices {
        let (found, c) = find_multipliers(sys, &star, v, s, true)?;
        complete &= c;
        if let Some(mv) = found {
            let residual = v
                .iter()
                .zip(&mv.combination)
                .map(|(a, b)| (a + b).powi(2))
                .sum::<f64>()
                .sqrt();
            let biggest = mv
                .lambda_g
                .iter()
                .chain(&mv.lambda_h)
                .chain(&mv.lambda_gg)
                .chain(&mv.lambda_hh)
                .fold(0.0f64, |m, l| m.max(l.abs()));
            if biggest > MULTIPLIER_BOX {
                report.notes.push(format!("multiplier of size {biggest:.3e} exceeds the normalization box"));
                continue;
            }
            report.verdict = StationarityVerdict::Stationary;
            report.objective_vertex = Some(v.clone());
            report.residual = Some(residual);
            report.multipliers = Some(mv);
            return Ok(report);
        }
    }
    if !complete {
        report.verdict = StationarityVerdict::Incomplete;
        report.notes.push("enumeration cap reached".into());
    }
    if !fverts.exact || !star_exact(&star) {
        report.notes.push("subdifferential or normal cone is an outer estimate".into());
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PenaltyStep {
    pub k: f64,
    pub point: Vec<f64>,
    pub phi0: f64,
    pub objective: f64,
    pub evaluations: usize,
    pub budget_exhausted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PenaltyResult {
    pub point: Vec<f64>,
    pub trace: Vec<PenaltyStep>,
    pub budget_exhausted: bool,
    /// `φ0` along the schedule never increased.
    pub monotone: bool,
    /// Final `φ0` above the feasibility tolerance.
    pub infeasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PenaltyOptions {
    pub schedule: Vec<f64>,
    /// Objective evaluations allowed per penalty parameter.
    pub budget: usize,
    pub initial_step: f64,
    pub min_step: f64,
    /// Proximal center; defaults to the starting point.
    pub center: Option<Vec<f64>>,
}

impl Default for PenaltyOptions {
    fn default() -> Self {
        PenaltyOptions {
            schedule: vec![1e1, 1e2, 1e3, 1e4, 1e5, 1e6],
            budget: 20_000,
            initial_step: 0.1,
            min_step: 1e-10,
            center: None,
        }
    }
}

/// Extra random poll directions per failed coordinate poll, per dimension.
const RANDOM_POLLS_PER_DIM: usize = 4;
const POLL_SEED: u64 = 0x005e_ed0f_9a77;

/// Gauss-Newton step `−J⁺r` on the pieces of `φ0` that are active at `x`:
/// positive `g_i`, every `h_i`, and the smaller member of each pair.
fn feasibility_step(sys: &FeasibilitySystem, x: &[f64], tol: f64) -> Result<Option<Vec<f64>>, ExprError> {
    let d = x.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut r: Vec<f64> = Vec::new();
    for g in &sys.g {
        let v = g.eval(x)?;
        if v > 0.0 {
            let verts = g.subdifferential_vertices(x, tol)?;
            if let Some(first) = verts.vertices.into_iter().next() {
                rows.push(first);
                r.push(v);
            }
        }
    }
    for h in &sys.h {
        rows.push(h.eval_gradient(x)?);
        r.push(h.eval(x)?);
    }
    for (a, b) in sys.big_g.iter().zip(&sys.big_h) {
        let (va, vb) = (a.eval(x)?, b.eval(x)?);
        let (e, v) = if va <= vb { (a, va) } else { (b, vb) };
        rows.push(e.eval_gradient(x)?);
        r.push(v);
    }
    if r.iter().all(|v| *v == 0.0) {
        return Ok(None);
    }
    let j = matrix_from_rows(&rows, d);
    let rhs = DVector::from_iterator(r.len(), r.iter().map(|v| -v));
    let step = j.svd(true, true).solve(&rhs, 1e-12).ok();
    Ok(step.map(|s| s.iter().copied().collect::<Vec<f64>>()).filter(|s| s.iter().all(|v| v.is_finite())))
}

/// Halvings tried along a search-step direction.
const SEARCH_HALVINGS: usize = 12;

fn pattern_search(
    sys: &FeasibilitySystem,
    obj: &dyn Fn(&[f64]) -> Result<f64, ExprError>,
    x0: Vec<f64>,
    opts: &PenaltyOptions,
    tol: f64,
) -> Result<(Vec<f64>, f64, usize, bool), ExprError> {
    let d = x0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(POLL_SEED);
    let mut x = x0;
    let mut fx = obj(&x)?;
    let mut evals = 1;
    let mut step = opts.initial_step;
    while step >= opts.min_step {
        if let Some(dir) = feasibility_step(sys, &x, tol)? {
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..SEARCH_HALVINGS {
                if evals >= opts.budget {
                    return Ok((x, fx, evals, true));
                }
                let z: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
                let z = sys.project_onto_c(&z);
                let fz = obj(&z)?;
                evals += 1;
                if fz < fx {
                    x = z;
                    fx = fz;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if accepted {
                continue;
            }
        }
        let mut improved = false;
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(2 * d);
        for i in 0..d {
            for sgn in [1.0, -1.0] {
                let mut e = vec![0.0; d];
                e[i] = sgn;
                dirs.push(e);
            }
        }
        let mut polled_random = false;
        loop {
            for dir in &dirs {
                if evals >= opts.budget {
                    return Ok((x, fx, evals, true));
                }
                let z: Vec<f64> = x.iter().zip(dir).map(|(a, b)| a + step * b).collect();
                let z = sys.project_onto_c(&z);
                let fz = obj(&z)?;
                evals += 1;
                if fz < fx {
                    x = z;
                    fx = fz;
                    improved = true;
                }
            }
            if improved || polled_random || d < 2 {
                break;
            }
            polled_random = true;
            dirs = (0..RANDOM_POLLS_PER_DIM * d)
                .map(|_| {
                    let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    v.into_iter().map(|a| a / n).collect()
                })
                .collect();
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok((x, fx, evals, false))
}

/// Minimizes `f + (k/2)φ0² + ½‖x − x̄‖²` over `C` for each `k` of the
/// schedule by projected pattern search, warm-started.
pub fn solve_penalized(
    sys: &FeasibilitySystem,
    f: &Expr,
    x0: &[f64],
    opts: &PenaltyOptions,
    s: &Settings,
) -> Result<PenaltyResult, ExprError> {
    let center = opts.center.clone().unwrap_or_else(|| x0.to_vec());
    let mut x = sys.project_onto_c(x0);
    let mut trace = Vec::new();
    for &k in &opts.schedule {
        let obj = |z: &[f64]| -> Result<f64, ExprError> {
            let p = phi0(sys, z)?;
            let prox: f64 = z.iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum();
            Ok(f.eval(z)? + 0.5 * k * p * p + 0.5 * prox)
        };
        let (xk, fk, evals, exhausted) = pattern_search(sys, &obj, x, opts, s.kink_tol)?;
        x = xk;
        trace.push(PenaltyStep {
            k,
            point: x.clone(),
            phi0: phi0(sys, &x)?,
            objective: fk,
            evaluations: evals,
            budget_exhausted: exhausted,
        });
    }
    let monotone = trace.windows(2).all(|w| w[1].phi0 <= w[0].phi0 + 1e-15);
    let last = trace.last().map_or(phi0(sys, &x)?, |t| t.phi0);
    Ok(PenaltyResult {
        point: x,
        budget_exhausted: trace.iter().any(|t| t.budget_exhausted),
        monotone,
        infeasible: last > s.feas_tol,
        trace,
    })
}
