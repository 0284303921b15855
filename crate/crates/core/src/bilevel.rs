//! Bilevel programs: grid value function, Danskin and KKT generators of its
//! Clarke subdifferential, the combined program (CP), and the rank-test
//! matrices used to verify constraint qualifications for (CP).

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::DVector;
use serde::Serialize;

use crate::errorbound::{residual_expr, residual_phi, Residual};
use crate::expr::{dedup, Expr, ExprError, ScalarOracle, Variables};
use crate::linalg::{
    family_rank, matrix_from_rows, positive_dependence_certificate, LinalgError, RankReport, SignConstraint,
};
use crate::system::{CatalogSet, FeasibilitySystem, SystemError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BilevelError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("lower-level {0} is not smooth")]
    NonsmoothLower(String),
    #[error("lower-level feasible set is empty on the grid at x = {0:?}")]
    EmptyFeasibleSet(Vec<f64>),
    #[error("lower-level constraints depend on x; use the KKT generators")]
    DanskinPrecondition,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// `min F(x,y)` s.t. `G ≤ 0, H = 0, x ∈ X, y ∈ S(x)` where `S(x)` solves
/// `min_y f(x,y)` s.t. `g(x,y) ≤ 0, h(x,y) = 0`. Expressions read `x` as
/// variables `0..d` and `y` as `d..d+s`.
#[derive(Debug, Clone)]
pub struct BilevelProgram {
    pub x_names: Vec<String>,
    pub y_names: Vec<String>,
    pub upper_objective: Expr,
    pub upper_ineq: Vec<Expr>,
    pub upper_eq: Vec<Expr>,
    pub lower_objective: Expr,
    pub lower_ineq: Vec<Expr>,
    pub lower_eq: Vec<Expr>,
    pub x_set: CatalogSet,
    /// Box searched for lower-level minimizers.
    pub y_lower: Vec<f64>,
    pub y_upper: Vec<f64>,
}

impl BilevelProgram {
    pub fn d(&self) -> usize {
        self.x_names.len()
    }

    pub fn s(&self) -> usize {
        self.y_names.len()
    }

    pub fn m(&self) -> usize {
        self.lower_ineq.len()
    }

    pub fn n(&self) -> usize {
        self.lower_eq.len()
    }

    pub fn validate(&self) -> Result<(), BilevelError> {
        let (d, s) = (self.d(), self.s());
        if self.x_set.dim() != d {
            return Err(BilevelError::Dimension(format!("x set has dimension {}, expected {d}", self.x_set.dim())));
        }
        if self.y_lower.len() != s || self.y_upper.len() != s {
            return Err(BilevelError::Dimension("y box".into()));
        }
        if let Some(i) = (0..s).find(|&i| self.y_lower[i] > self.y_upper[i]) {
            return Err(SystemError::InvertedBox(i).into());
        }
        let lower = std::iter::once(("objective", 0, &self.lower_objective))
            .chain(self.lower_ineq.iter().enumerate().map(|(i, e)| ("inequality", i, e)))
            .chain(self.lower_eq.iter().enumerate().map(|(i, e)| ("equality", i, e)));
        for (kind, i, e) in lower {
            if !e.is_smooth() {
                return Err(BilevelError::NonsmoothLower(format!("{kind} {i}")));
            }
        }
        let all = [&self.upper_objective, &self.lower_objective]
            .into_iter()
            .chain(&self.upper_ineq)
            .chain(&self.upper_eq)
            .chain(&self.lower_ineq)
            .chain(&self.lower_eq);
        for e in all {
            if let Some(&v) = e.variables().iter().next_back() {
                if v >= d + s {
                    return Err(ExprError::VarOutOfRange { index: v, len: d + s }.into());
                }
            }
        }
        Ok(())
    }

    /// The lower-level constraints do not read `x`.
    pub fn y_independent_of_x(&self) -> bool {
        let d = self.d();
        self.lower_ineq
            .iter()
            .chain(&self.lower_eq)
            .all(|e| e.variables().iter().all(|&v| v >= d))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValueConfig {
    pub grid_points: usize,
    /// Relative tolerance defining `S(x)`.
    pub value_tol: f64,
    /// Minimal linkage distance when clustering `S(x)`.
    pub cluster_tol: f64,
    pub active_tol: f64,
    pub kkt_tol: f64,
    /// Cap on `2^m` active-set patterns in multiplier enumeration.
    pub pattern_cap: usize,
}

impl Default for ValueConfig {
    fn default() -> Self {
        ValueConfig {
            grid_points: 2001,
            value_tol: 1e-9,
            cluster_tol: 1e-4,
            active_tol: 1e-7,
            kkt_tol: 1e-5,
            pattern_cap: 1 << 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridMeta {
    pub points_per_dim: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub spacing: Vec<f64>,
    pub feasible_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueFunctionSample {
    pub x: Vec<f64>,
    pub value: f64,
    /// Clustered approximation of `S(x)`.
    pub minimizers: Vec<Vec<f64>>,
    pub grid: GridMeta,
}

struct Lower<'a> {
    blp: &'a BilevelProgram,
    x: &'a [f64],
    eq_tol: f64,
}

impl Lower<'_> {
    fn point(&self, y: &[f64]) -> Vec<f64> {
        let mut z = self.x.to_vec();
        z.extend_from_slice(y);
        z
    }

    fn in_box(&self, y: &[f64]) -> bool {
        y.iter()
            .zip(&self.blp.y_lower)
            .zip(&self.blp.y_upper)
            .all(|((v, l), u)| *v >= *l && *v <= *u)
    }

    /// `f(x,y)` if `y` is feasible.
    fn value(&self, y: &[f64]) -> Result<Option<f64>, ExprError> {
        let z = self.point(y);
        for g in &self.blp.lower_ineq {
            if g.eval(&z)? > 0.0 {
                return Ok(None);
            }
        }
        for h in &self.blp.lower_eq {
            if h.eval(&z)?.abs() > self.eq_tol {
                return Ok(None);
            }
        }
        self.blp.lower_objective.eval(&z).map(Some)
    }

    fn refine(&self, y0: Vec<f64>, v0: f64, step0: f64) -> Result<(Vec<f64>, f64), ExprError> {
        let (mut y, mut v) = (y0, v0);
        let mut step = step0;
        let mut iters = 0;
        while step > 1e-14 * (1.0 + y.iter().fold(0.0f64, |m, a| m.max(a.abs()))) && iters < 100_000 {
            iters += 1;
            let mut improved = false;
            for j in 0..y.len() {
                for sgn in [1.0, -1.0] {
                    let mut c = y.clone();
                    c[j] += sgn * step;
                    if !self.in_box(&c) {
                        continue;
                    }
                    if let Some(fc) = self.value(&c)? {
                        if fc < v {
                            y = c;
                            v = fc;
                            improved = true;
                        }
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        Ok((y, v))
    }
}

fn decode(mut k: usize, n: usize, s: usize) -> Vec<usize> {
    (0..s)
        .map(|_| {
            let i = k % n;
            k /= n;
            i
        })
        .collect()
}

fn neighbors(k: usize, n: usize, s: usize) -> Vec<usize> {
    let idx = decode(k, n, s);
    let mut out = Vec::with_capacity(2 * s);
    let mut stride = 1;
    for &i in idx.iter().take(s) {
        if i > 0 {
            out.push(k - stride);
        }
        if i + 1 < n {
            out.push(k + stride);
        }
        stride *= n;
    }
    out
}

/// Connected components of `members` under grid adjacency.
fn components(members: &[usize], n: usize, s: usize) -> Vec<Vec<usize>> {
    let set: std::collections::HashSet<usize> = members.iter().copied().collect();
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for &m in members {
        if !seen.insert(m) {
            continue;
        }
        let mut comp = vec![m];
        let mut stack = vec![m];
        while let Some(k) = stack.pop() {
            for nb in neighbors(k, n, s) {
                if set.contains(&nb) && seen.insert(nb) {
                    comp.push(nb);
                    stack.push(nb);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `V(x)` by exhaustive grid search over the y-box followed by pattern-search
/// refinement from every grid local minimum.
pub fn value_function(
    blp: &BilevelProgram,
    x: &[f64],
    cfg: &ValueConfig,
) -> Result<ValueFunctionSample, BilevelError> {
    let s = blp.s();
    if x.len() != blp.d() {
        return Err(BilevelError::Dimension(format!("x has length {}, expected {}", x.len(), blp.d())));
    }
    let n = cfg.grid_points.max(2);
    let spacing: Vec<f64> = blp
        .y_lower
        .iter()
        .zip(&blp.y_upper)
        .map(|(l, u)| (u - l) / (n - 1) as f64)
        .collect();
    let lower = Lower {
        blp,
        x,
        eq_tol: spacing.iter().fold(1e-9f64, |m, h| m.max(*h)),
    };
    let coord = |k: usize| -> Vec<f64> {
        decode(k, n, s)
            .iter()
            .enumerate()
            .map(|(j, &i)| if i + 1 == n { blp.y_upper[j] } else { blp.y_lower[j] + i as f64 * spacing[j] })
            .collect()
    };
    let total = n.pow(s as u32);
    let mut values: Vec<Option<f64>> = Vec::with_capacity(total);
    for k in 0..total {
        values.push(lower.value(&coord(k))?);
    }
    let feasible = values.iter().filter(|v| v.is_some()).count();
    if feasible == 0 {
        return Err(BilevelError::EmptyFeasibleSet(x.to_vec()));
    }
    let local_min: Vec<usize> = (0..total)
        .filter(|&k| {
            values[k].is_some_and(|v| neighbors(k, n, s).iter().all(|&nb| values[nb].is_none_or(|w| v <= w)))
        })
        .collect();
    let mut starts: Vec<(usize, f64)> = components(&local_min, n, s)
        .into_iter()
        .map(|c| {
            let best = *c
                .iter()
                .min_by(|a, b| values[**a].unwrap().partial_cmp(&values[**b].unwrap()).unwrap())
                .unwrap();
            (best, values[best].unwrap())
        })
        .collect();
    starts.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    starts.truncate(256);
    let step0 = spacing.iter().fold(0.0f64, |m, h| m.max(*h));
    let mut refined = Vec::with_capacity(starts.len());
    for (k, v) in starts {
        refined.push(lower.refine(coord(k), v, step0)?);
    }
    let value = refined.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let tol_s = cfg.value_tol * value.abs().max(1.0);
    let in_s = |y: &[f64]| -> Result<bool, ExprError> {
        Ok(lower.in_box(y) && lower.value(y)?.is_some_and(|v| v <= value + tol_s))
    };

    let mut candidates: Vec<Vec<f64>> = Vec::new();
    let near: Vec<usize> = (0..total).filter(|&k| values[k].is_some_and(|v| v <= value + tol_s)).collect();
    for comp in components(&near, n, s).into_iter().filter(|c| c.len() > 1) {
        let set: std::collections::HashSet<usize> = comp.iter().copied().collect();
        for j in 0..s {
            let key = |k: &usize| decode(*k, n, s)[j];
            let lo = *comp.iter().min_by_key(|k| key(k)).unwrap();
            let hi = *comp.iter().max_by_key(|k| key(k)).unwrap();
            for (k, dir) in [(lo, -1i64), (hi, 1i64)] {
                let stride = n.pow(j as u32);
                let idx = decode(k, n, s)[j] as i64 + dir;
                let mut inside = coord(k);
                if idx >= 0 && (idx as usize) < n && !set.contains(&((k as i64 + dir * stride as i64) as usize)) {
                    let mut outside = coord((k as i64 + dir * stride as i64) as usize);
                    for _ in 0..60 {
                        let mid: Vec<f64> = inside.iter().zip(&outside).map(|(a, b)| 0.5 * (a + b)).collect();
                        if in_s(&mid)? {
                            inside = mid;
                        } else {
                            outside = mid;
                        }
                    }
                }
                candidates.push(inside);
            }
        }
    }
    candidates.extend(refined.iter().filter(|r| r.1 <= value + tol_s).map(|r| r.0.clone()));
    let linkage = cfg.cluster_tol.max(1.5 * step0);
    let mut minimizers: Vec<Vec<f64>> = Vec::new();
    for c in candidates {
        if minimizers.iter().all(|m| dist(m, &c) > linkage) {
            minimizers.push(c);
        }
    }
    Ok(ValueFunctionSample {
        x: x.to_vec(),
        value,
        minimizers,
        grid: GridMeta {
            points_per_dim: n,
            lower: blp.y_lower.clone(),
            upper: blp.y_upper.clone(),
            spacing,
            feasible_points: feasible,
        },
    })
}

fn xy(x: &[f64], y: &[f64]) -> Vec<f64> {
    let mut z = x.to_vec();
    z.extend_from_slice(y);
    z
}

/// `{∇_x f(x,y) : y ∈ S(x)}` when the lower feasible set does not move with `x`.
pub fn danskin_generators(
    blp: &BilevelProgram,
    x: &[f64],
    cfg: &ValueConfig,
) -> Result<Vec<Vec<f64>>, BilevelError> {
    if !blp.y_independent_of_x() {
        return Err(BilevelError::DanskinPrecondition);
    }
    let sample = value_function(blp, x, cfg)?;
    danskin_from_sample(blp, &sample)
}

fn danskin_from_sample(blp: &BilevelProgram, sample: &ValueFunctionSample) -> Result<Vec<Vec<f64>>, BilevelError> {
    let d = blp.d();
    let mut out = Vec::new();
    for y in &sample.minimizers {
        let g = blp.lower_objective.eval_gradient(&xy(&sample.x, y))?;
        out.push(g[..d].to_vec());
    }
    Ok(dedup(out))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktPoint {
    pub y: Vec<f64>,
    pub active: Vec<usize>,
    /// Vertices `(u, v)` of the multiplier set `M(x, y)`.
    pub multipliers: Vec<(Vec<f64>, Vec<f64>)>,
    pub mfcq: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WGenerators {
    pub generators: Vec<Vec<f64>>,
    pub points: Vec<KktPoint>,
    /// Minimizers at which no KKT multiplier was found.
    pub kkt_failures: Vec<Vec<f64>>,
    pub complete: bool,
}

/// `W(x) = ∪_{y ∈ S(x)} {∇_x f + u ∇_x g + v ∇_x h : (u, v) ∈ M(x, y)}`, one
/// generator per vertex of each multiplier set.
pub fn w_generators(blp: &BilevelProgram, x: &[f64], cfg: &ValueConfig) -> Result<WGenerators, BilevelError> {
    let sample = value_function(blp, x, cfg)?;
    w_from_sample(blp, &sample, cfg)
}

fn w_from_sample(
    blp: &BilevelProgram,
    sample: &ValueFunctionSample,
    cfg: &ValueConfig,
) -> Result<WGenerators, BilevelError> {
    let (d, s) = (blp.d(), blp.s());
    let mut out = WGenerators {
        generators: vec![],
        points: vec![],
        kkt_failures: vec![],
        complete: true,
    };
    for y in &sample.minimizers {
        let z = xy(&sample.x, y);
        let gf = blp.lower_objective.eval_gradient(&z)?;
        let gg: Vec<Vec<f64>> = blp.lower_ineq.iter().map(|g| g.eval_gradient(&z)).collect::<Result<_, _>>()?;
        let gh: Vec<Vec<f64>> = blp.lower_eq.iter().map(|h| h.eval_gradient(&z)).collect::<Result<_, _>>()?;
        let mut active = Vec::new();
        for (i, g) in blp.lower_ineq.iter().enumerate() {
            if g.eval(&z)? >= -cfg.active_tol {
                active.push(i);
            }
        }
        let y_part = |v: &Vec<f64>| v[d..d + s].to_vec();
        let mut family: Vec<Vec<f64>> = active.iter().map(|&i| y_part(&gg[i])).collect();
        let mut signs = vec![SignConstraint::Nonneg; active.len()];
        family.extend(gh.iter().map(y_part));
        signs.extend(std::iter::repeat_n(SignConstraint::Free, gh.len()));
        let mfcq = positive_dependence_certificate(&family, &signs, 1)?.is_none();

        let rhs = DVector::from_iterator(s, gf[d..d + s].iter().map(|v| -v));
        let scale = 1.0 + rhs.norm();
        let mut multipliers = Vec::new();
        let patterns = 1usize << active.len().min(20);
        if patterns > cfg.pattern_cap {
            out.complete = false;
        }
        for mask in 0..patterns.min(cfg.pattern_cap) {
            let p: Vec<usize> = (0..active.len()).filter(|b| mask & (1 << b) != 0).map(|b| active[b]).collect();
            let mut cols: Vec<Vec<f64>> = p.iter().map(|&i| y_part(&gg[i])).collect();
            cols.extend(gh.iter().map(y_part));
            let (u_p, v) = if cols.is_empty() {
                if rhs.norm() > cfg.kkt_tol * scale {
                    continue;
                }
                (vec![], vec![])
            } else {
                if family_rank(&cols, s, 1e-10).rank < cols.len() {
                    continue;
                }
                let a = matrix_from_rows(&cols, s).transpose();
                let sol = a.clone().svd(true, true).solve(&rhs, 1e-14).map_err(|e| BilevelError::Dimension(e.to_string()))?;
                if (&a * &sol - &rhs).norm() > cfg.kkt_tol * scale || sol.iter().take(p.len()).any(|u| *u < -1e-10) {
                    continue;
                }
                (sol.iter().take(p.len()).map(|u| u.max(0.0)).collect::<Vec<_>>(), sol.iter().skip(p.len()).copied().collect())
            };
            let mut u = vec![0.0; blp.m()];
            for (&i, &val) in p.iter().zip(&u_p) {
                u[i] = val;
            }
            let mut w = gf[..d].to_vec();
            for (i, ui) in u.iter().enumerate() {
                for (wk, gk) in w.iter_mut().zip(&gg[i][..d]) {
                    *wk += ui * gk;
                }
            }
            for (j, vj) in v.iter().enumerate() {
                for (wk, hk) in w.iter_mut().zip(&gh[j][..d]) {
                    *wk += vj * hk;
                }
            }
            multipliers.push((u, v));
            out.generators.push(w);
        }
        if multipliers.is_empty() {
            out.kkt_failures.push(y.clone());
        }
        out.points.push(KktPoint {
            y: y.clone(),
            active,
            multipliers,
            mfcq,
        });
    }
    out.generators = dedup(out.generators);
    Ok(out)
}

fn key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

/// `V` as an expression node: values from [`value_function`], generators
/// from Danskin's formula when applicable and from `W` otherwise.
#[derive(Debug)]
pub struct ValueOracle {
    blp: BilevelProgram,
    cfg: ValueConfig,
    support: Vec<usize>,
    samples: Mutex<HashMap<Vec<u64>, Arc<ValueFunctionSample>>>,
    gens: Mutex<HashMap<Vec<u64>, Arc<(Vec<Vec<f64>>, bool)>>>,
}

impl ValueOracle {
    pub fn new(blp: BilevelProgram, cfg: ValueConfig) -> Self {
        let support = (0..blp.d()).collect();
        ValueOracle {
            blp,
            cfg,
            support,
            samples: Mutex::new(HashMap::new()),
            gens: Mutex::new(HashMap::new()),
        }
    }

    pub fn program(&self) -> &BilevelProgram {
        &self.blp
    }

    pub fn config(&self) -> &ValueConfig {
        &self.cfg
    }

    pub fn sample(&self, x: &[f64]) -> Result<Arc<ValueFunctionSample>, BilevelError> {
        if let Some(s) = self.samples.lock().unwrap().get(&key(x)) {
            return Ok(s.clone());
        }
        let s = Arc::new(value_function(&self.blp, x, &self.cfg)?);
        self.samples.lock().unwrap().insert(key(x), s.clone());
        Ok(s)
    }

    /// Generators of `∂^c V(x)` in `ℝ^d` and whether their hull is exact.
    pub fn generators_x(&self, x: &[f64]) -> Result<Arc<(Vec<Vec<f64>>, bool)>, BilevelError> {
        if let Some(g) = self.gens.lock().unwrap().get(&key(x)) {
            return Ok(g.clone());
        }
        let sample = self.sample(x)?;
        let g = if self.blp.y_independent_of_x() {
            (danskin_from_sample(&self.blp, &sample)?, true)
        } else {
            let w = w_from_sample(&self.blp, &sample, &self.cfg)?;
            let exact = w.generators.len() == 1 && w.kkt_failures.is_empty();
            (w.generators, exact)
        };
        let g = Arc::new(g);
        self.gens.lock().unwrap().insert(key(x), g.clone());
        Ok(g)
    }

    fn wrap(&self, e: BilevelError) -> ExprError {
        ExprError::Oracle {
            name: "V".into(),
            message: e.to_string(),
        }
    }
}

impl ScalarOracle for ValueOracle {
    fn name(&self) -> &str {
        "V"
    }

    fn support(&self) -> &[usize] {
        &self.support
    }

    fn eval(&self, point: &[f64]) -> Result<f64, ExprError> {
        let d = self.blp.d();
        self.sample(&point[..d]).map(|s| s.value).map_err(|e| self.wrap(e))
    }

    fn generators(&self, point: &[f64], _tol: f64) -> Result<(Vec<Vec<f64>>, bool), ExprError> {
        let d = self.blp.d();
        let g = self.generators_x(&point[..d]).map_err(|e| self.wrap(e))?;
        let full = g
            .0
            .iter()
            .map(|w| {
                let mut v = vec![0.0; point.len()];
                v[..d].copy_from_slice(w);
                v
            })
            .collect();
        Ok((full, g.1))
    }
}

/// The combined program over `(x, y, u, v)`:
/// `f − V ≤ 0, G ≤ 0, H = 0, ∇_y L = 0, h = 0, (−g, u) ∈ Ω^m, x ∈ X`.
#[derive(Debug, Clone)]
pub struct CombinedProgram {
    pub system: FeasibilitySystem,
    pub objective: Expr,
    pub oracle: Arc<ValueOracle>,
    pub program: BilevelProgram,
    /// `∇_y L(x, y, u, v)` componentwise.
    pub lagrangian_grad: Vec<Expr>,
}

impl CombinedProgram {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let p = &self.program;
        (p.d(), p.s(), p.m(), p.n())
    }
}

pub fn build_combined_program(blp: &BilevelProgram, cfg: &ValueConfig) -> Result<CombinedProgram, BilevelError> {
    blp.validate()?;
    let (d, s, m, n) = (blp.d(), blp.s(), blp.m(), blp.n());
    let mut names: Vec<String> = blp.x_names.iter().chain(&blp.y_names).cloned().collect();
    names.extend((1..=m).map(|i| format!("u{i}")));
    names.extend((1..=n).map(|j| format!("v{j}")));
    let oracle = Arc::new(ValueOracle::new(blp.clone(), *cfg));
    let v_node = Expr::oracle(oracle.clone());

    let mut lagrangian_grad = Vec::with_capacity(s);
    for j in 0..s {
        let yj = d + j;
        let mut e = blp.lower_objective.derivative(yj)?;
        for (i, g) in blp.lower_ineq.iter().enumerate() {
            e = e + Expr::var(d + s + i) * g.derivative(yj)?;
        }
        for (k, h) in blp.lower_eq.iter().enumerate() {
            e = e + Expr::var(d + s + m + k) * h.derivative(yj)?;
        }
        lagrangian_grad.push(e);
    }

    let mut g = vec![blp.lower_objective.clone() - v_node];
    g.extend(blp.upper_ineq.iter().cloned());
    let mut h = blp.upper_eq.clone();
    h.extend(lagrangian_grad.iter().cloned());
    h.extend(blp.lower_eq.iter().cloned());
    let big_g = blp.lower_ineq.iter().map(|gi| -gi.clone()).collect();
    let big_h = (0..m).map(|i| Expr::var(d + s + i)).collect();
    let mut blocks = vec![blp.x_set.clone()];
    if s + m + n > 0 {
        blocks.push(CatalogSet::full(s + m + n));
    }
    let system = FeasibilitySystem::new(Variables::new(names), g, h, big_g, big_h, blocks)?;
    Ok(CombinedProgram {
        system,
        objective: blp.upper_objective.clone(),
        oracle,
        program: blp.clone(),
        lagrangian_grad,
    })
}

/// Index sets of a (CP) point: active upper inequalities and the partition
/// of the lower inequalities by `g_i = 0` and `u_i > 0`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct CpIndexSets {
    pub i_g: Vec<usize>,
    pub i_star: Vec<usize>,
    pub j_star: Vec<usize>,
    pub k_star: Vec<usize>,
}

pub fn cp_index_sets(cp: &CombinedProgram, point: &[f64], tol: f64) -> Result<CpIndexSets, BilevelError> {
    let (d, s, m, _) = cp.dims();
    let mut out = CpIndexSets::default();
    for (i, g) in cp.program.upper_ineq.iter().enumerate() {
        if g.eval(point)? >= -tol {
            out.i_g.push(i);
        }
    }
    for (i, g) in cp.program.lower_ineq.iter().enumerate() {
        let (gv, u) = (g.eval(point)?, point[d + s + i]);
        match (gv.abs() <= tol, u.abs() <= tol) {
            (true, true) => out.j_star.push(i),
            (true, false) => out.i_star.push(i),
            _ => out.k_star.push(i),
        }
    }
    debug_assert_eq!(out.i_star.len() + out.j_star.len() + out.k_star.len(), m);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixReport {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub rank: RankReport,
    pub target: Option<usize>,
    pub attains_target: Option<bool>,
    pub index_sets: CpIndexSets,
}

fn report(
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
    target: Option<usize>,
    index_sets: CpIndexSets,
    rank_tol: f64,
) -> MatrixReport {
    let rank = family_rank(&rows, columns.len(), rank_tol);
    MatrixReport {
        attains_target: target.map(|t| rank.rank == t),
        columns,
        rows,
        rank,
        target,
        index_sets,
    }
}

/// Full gradient over `(x, y, u, v)` reordered as `[(x, y) | v | u_cols]`.
fn reorder(grad: &[f64], d: usize, s: usize, m: usize, u_cols: &[usize]) -> Vec<f64> {
    let mut row = grad[..d + s].to_vec();
    row.extend_from_slice(&grad[d + s + m..]);
    row.extend(u_cols.iter().map(|&i| grad[d + s + i]));
    row
}

fn pad(v: &[f64], len: usize) -> Vec<f64> {
    let mut out = v.to_vec();
    out.resize(len, 0.0);
    out
}

fn columns(cp: &CombinedProgram, u_cols: &[usize]) -> Vec<String> {
    let (d, s, m, _) = cp.dims();
    let names = &cp.system.vars.0;
    let mut out: Vec<String> = names[..d + s].to_vec();
    out.extend(names[d + s + m..].iter().cloned());
    out.extend(u_cols.iter().map(|&i| names[d + s + i].clone()));
    out
}

/// `[∇h; ∇H; ∇g_{I*}]` over `(x, y)`; the target is full column rank `d + s`.
pub fn matrix_sj(cp: &CombinedProgram, point: &[f64], tol: f64, rank_tol: f64) -> Result<MatrixReport, BilevelError> {
    let (d, s, _, _) = cp.dims();
    let sets = cp_index_sets(cp, point, tol)?;
    let p = &cp.program;
    let mut rows = Vec::new();
    for e in p.lower_eq.iter().chain(&p.upper_eq).chain(sets.i_star.iter().map(|&i| &p.lower_ineq[i])) {
        rows.push(e.eval_gradient(point)?[..d + s].to_vec());
    }
    let cols = cp.system.vars.0[..d + s].to_vec();
    Ok(report(cols, rows, Some(d + s), sets, rank_tol))
}

/// The matrix whose rank `d + s + m + n − |K*|` certifies RCPLD for (CP).
/// Without active lower inequalities it reduces to `[∇(∇_y L); ∇h; ∇H; …]`
/// over `(x, y, v)`.
pub fn matrix_jstar(cp: &CombinedProgram, point: &[f64], tol: f64, rank_tol: f64) -> Result<MatrixReport, BilevelError> {
    let (d, s, m, n) = cp.dims();
    let sets = cp_index_sets(cp, point, tol)?;
    let mut u_cols: Vec<usize> = sets.i_star.iter().chain(&sets.j_star).copied().collect();
    u_cols.sort_unstable();
    let width = d + s + n + u_cols.len();
    let p = &cp.program;
    let mut rows = Vec::new();
    for l in &cp.lagrangian_grad {
        rows.push(reorder(&l.eval_gradient(point)?, d, s, m, &u_cols));
    }
    for e in p.lower_eq.iter().chain(&p.upper_eq).chain(sets.i_star.iter().map(|&i| &p.lower_ineq[i])) {
        rows.push(pad(&e.eval_gradient(point)?[..d + s], width));
    }
    let target = d + s + m + n - sets.k_star.len();
    Ok(report(columns(cp, &u_cols), rows, Some(target), sets, rank_tol))
}

/// Optional index choices for [`matrix_jprime`]; `None` for `i2` means all
/// active upper inequalities.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct JprimeChoice {
    pub i2: Option<Vec<usize>>,
    pub i3: Vec<usize>,
    pub i4: Vec<usize>,
}

/// `J′` with columns `(x, y, v, u)`: the `∇_y L` rows, `∇h`, `∇H`,
/// `∇G_{I2}`, `∇g_{I*∪I3}`, unit rows `E_{K*∪I4}` in the `u` block, and
/// `α(∇f − (w, 0))` padded with zeros.
pub fn matrix_jprime(
    cp: &CombinedProgram,
    point: &[f64],
    alpha: bool,
    w: &[f64],
    choice: &JprimeChoice,
    tol: f64,
    rank_tol: f64,
) -> Result<MatrixReport, BilevelError> {
    let (d, s, m, n) = cp.dims();
    if w.len() != d {
        return Err(BilevelError::Dimension(format!("w has length {}, expected {d}", w.len())));
    }
    let sets = cp_index_sets(cp, point, tol)?;
    let u_cols: Vec<usize> = (0..m).collect();
    let width = d + s + n + m;
    let p = &cp.program;
    let mut rows = Vec::new();
    for l in &cp.lagrangian_grad {
        rows.push(reorder(&l.eval_gradient(point)?, d, s, m, &u_cols));
    }
    let i2 = choice.i2.clone().unwrap_or_else(|| sets.i_g.clone());
    let mut i_g3: Vec<usize> = sets.i_star.iter().chain(&choice.i3).copied().collect();
    i_g3.sort_unstable();
    i_g3.dedup();
    let smooth_rows = p
        .lower_eq
        .iter()
        .chain(&p.upper_eq)
        .chain(i2.iter().map(|&i| &p.upper_ineq[i]))
        .chain(i_g3.iter().map(|&i| &p.lower_ineq[i]));
    for e in smooth_rows {
        rows.push(pad(&e.eval_gradient(point)?[..d + s], width));
    }
    let mut e_rows: Vec<usize> = sets.k_star.iter().chain(&choice.i4).copied().collect();
    e_rows.sort_unstable();
    e_rows.dedup();
    for i in e_rows {
        let mut r = vec![0.0; width];
        r[d + s + n + i] = 1.0;
        rows.push(r);
    }
    let a = if alpha { 1.0 } else { 0.0 };
    let gf = p.lower_objective.eval_gradient(point)?;
    let mut last: Vec<f64> = (0..d + s).map(|k| a * (gf[k] - if k < d { w[k] } else { 0.0 })).collect();
    last.resize(width, 0.0);
    rows.push(last);
    Ok(report(columns(cp, &u_cols), rows, None, sets, rank_tol))
}

/// `(f − V)_+ + ‖H‖ + ‖h‖ + ‖G_+‖ + ‖∇_y L‖ + Σ d_Ω(−g_i, u_i)` in the l1 norm.
pub fn phi_cp(cp: &CombinedProgram, point: &[f64]) -> Result<f64, ExprError> {
    residual_phi(&cp.system, point, &Residual::full())
}

/// The exact-penalty objective `F + μ φ_CP` of the combined program.
pub fn cp_penalty_objective(cp: &CombinedProgram, mu: f64) -> Expr {
    cp.objective.clone() + residual_expr(&cp.system) * mu
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `min_y (y − x)^2` over `y ∈ [−1, 1]`.
    fn tracking() -> BilevelProgram {
        let x = Expr::var(0);
        let y = Expr::var(1);
        BilevelProgram {
            x_names: vec!["x".into()],
            y_names: vec!["y".into()],
            upper_objective: x.clone() + y.clone(),
            upper_ineq: vec![],
            upper_eq: vec![],
            lower_objective: Expr::powi(y.clone() - x, 2),
            lower_ineq: vec![y.clone() - 1.0, -y - 1.0],
            lower_eq: vec![],
            x_set: CatalogSet::full(1),
            y_lower: vec![-2.0],
            y_upper: vec![2.0],
        }
    }

    #[test]
    fn value_of_clamped_tracking() {
        let b = tracking();
        let cfg = ValueConfig::default();
        for x in [-3.0, -0.3, 0.0, 0.77, 2.5] {
            let v = value_function(&b, &[x], &cfg).unwrap();
            let c = f64::clamp(x, -1.0, 1.0);
            assert!((v.value - (c - x).powi(2)).abs() < 1e-9, "x = {x}");
            assert_eq!(v.minimizers.len(), 1);
            assert!((v.minimizers[0][0] - c).abs() < 1e-6);
        }
    }

    #[test]
    fn kkt_generator_matches_derivative() {
        // V(x) = (x − 1)^2 for x > 1, derivative 2(x − 1)
        let b = tracking();
        let w = w_generators(&b, &[1.5], &ValueConfig::default()).unwrap();
        assert_eq!(w.generators.len(), 1);
        assert!((w.generators[0][0] - 1.0).abs() < 1e-6);
        assert!(w.points[0].mfcq);
    }

    #[test]
    fn danskin_refuses_moving_constraints() {
        let mut b = tracking();
        b.lower_ineq[0] = Expr::var(1) - Expr::var(0);
        assert_eq!(
            danskin_generators(&b, &[0.0], &ValueConfig::default()),
            Err(BilevelError::DanskinPrecondition)
        );
    }

    #[test]
    fn objective_free_of_x_gives_zero_generator() {
        let mut b = tracking();
        b.lower_objective = Expr::powi(Expr::var(1), 2);
        let g = danskin_generators(&b, &[0.4], &ValueConfig::default()).unwrap();
        assert_eq!(g, vec![vec![0.0]]);
    }

    #[test]
    fn no_lower_inequalities_gives_no_pairs() {
        let mut b = tracking();
        b.lower_ineq.clear();
        let cp = build_combined_program(&b, &ValueConfig::default()).unwrap();
        assert!(cp.system.big_g.is_empty());
        assert_eq!(cp.system.dim(), 2);
    }

    #[test]
    fn nonsmooth_lower_level_rejected() {
        let mut b = tracking();
        b.lower_objective = Expr::abs(Expr::var(1));
        assert!(matches!(b.validate(), Err(BilevelError::NonsmoothLower(_))));
    }
}
