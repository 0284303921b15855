//! Feasibility systems `g ≤ 0, h = 0, (G, H) ∈ Ω^p, x ∈ C` and the catalog of
//! abstract sets `C_i` with their limiting normal cones.

pub mod sawtooth;

use std::ops::Range;

use nalgebra::DVector;
use serde::Serialize;

use crate::expr::{Expr, ExprError, Variables};
use crate::linalg::{self, orthonormal_basis, project_onto_cone};
use crate::vcalc;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SystemError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{kind}[{index}] must be smooth")]
    NonsmoothData { kind: &'static str, index: usize },
    #[error("polyhedron is empty")]
    EmptyPolyhedron,
    #[error("segment endpoints coincide")]
    DegenerateSegment,
    #[error("box has lower bound above upper bound at coordinate {0}")]
    InvertedBox(usize),
    #[error("point is not in the set (distance {distance:.3e})")]
    PointNotInSet { distance: f64 },
    #[error("point is infeasible (max residual {residual:.3e})")]
    Infeasible { residual: f64 },
}

/// `cone(rays) + span(lineality)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConeChart {
    pub rays: Vec<Vec<f64>>,
    pub lineality: Vec<Vec<f64>>,
    /// Chart taken from an apex clause of the sawtooth case table.
    pub apex: bool,
}

impl ConeChart {
    pub fn zero() -> Self {
        ConeChart {
            rays: vec![],
            lineality: vec![],
            apex: false,
        }
    }

    pub fn line(dir: Vec<f64>) -> Self {
        ConeChart {
            rays: vec![],
            lineality: vec![dir],
            apex: false,
        }
    }

    pub fn map(self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        ConeChart {
            rays: self.rays.iter().map(|r| f(r)).collect(),
            lineality: self.lineality.iter().map(|r| f(r)).collect(),
            apex: self.apex,
        }
    }

    pub fn is_trivial(&self) -> bool {
        self.rays.iter().chain(&self.lineality).all(|v| v.iter().all(|x| *x == 0.0))
    }

    /// Distance from `v` to the chart.
    pub fn distance(&self, v: &[f64]) -> f64 {
        project_onto_cone(&self.rays, &self.lineality, v).1
    }

    /// Nearest point of the chart to `v`.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        project_onto_cone(&self.rays, &self.lineality, v).0
    }

    /// Equivalent chart with an orthonormal lineality basis and pointed rays
    /// orthogonal to it, so that a nonzero coefficient vector always yields
    /// a nonzero cone element.
    pub fn canonical(&self) -> ConeChart {
        let mut rays = self.rays.clone();
        let mut lin = self.lineality.clone();
        loop {
            let mut moved = None;
            for i in 0..rays.len() {
                let others: Vec<Vec<f64>> = rays
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, r)| r.clone())
                    .collect();
                let neg: Vec<f64> = rays[i].iter().map(|x| -x).collect();
                let norm = neg.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    continue;
                }
                let (_, d) = project_onto_cone(&others, &lin, &neg);
                if d <= 1e-10 * norm {
                    moved = Some(i);
                    break;
                }
            }
            match moved {
                Some(i) => lin.push(rays.remove(i)),
                None => break,
            }
        }
        let q = orthonormal_basis(&lin, 1e-12);
        let mut out_rays: Vec<Vec<f64>> = Vec::new();
        for r in &rays {
            let mut x = DVector::from_column_slice(r);
            for b in &q {
                let c = b.dot(&x);
                x -= b * c;
            }
            let n = x.norm();
            if n <= 1e-12 {
                continue;
            }
            let unit: Vec<f64> = (x / n).iter().copied().collect();
            let dup = out_rays
                .iter()
                .any(|w| w.iter().zip(&unit).all(|(a, b)| (a - b).abs() < 1e-12));
            if !dup {
                out_rays.push(unit);
            }
        }
        ConeChart {
            rays: out_rays,
            lineality: q.iter().map(|b| b.iter().copied().collect()).collect(),
            apex: self.apex,
        }
    }

    /// A nonzero element of the chart, if any.
    pub fn some_nonzero(&self) -> Option<Vec<f64>> {
        let c = self.canonical();
        c.lineality.first().or(c.rays.first()).cloned()
    }
}

/// Limiting normal cone of one block as a union of charts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalConeDescription {
    pub dim: usize,
    pub charts: Vec<ConeChart>,
    /// `false` when the union over-approximates the limiting cone.
    pub exact: bool,
}

impl NormalConeDescription {
    pub fn trivial(dim: usize) -> Self {
        NormalConeDescription {
            dim,
            charts: vec![ConeChart::zero()],
            exact: true,
        }
    }

    pub fn is_trivial(&self) -> bool {
        self.charts.iter().all(ConeChart::is_trivial)
    }

    /// Nearest cone element to `v` over all charts.
    pub fn project(&self, v: &[f64]) -> (Vec<f64>, f64) {
        self.charts
            .iter()
            .map(|c| project_onto_cone(&c.rays, &c.lineality, v))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap_or((vec![0.0; v.len()], v.iter().map(|x| x * x).sum::<f64>().sqrt()))
    }
}

pub fn normal_cone_membership(cone: &NormalConeDescription, v: &[f64], tol: f64) -> bool {
    if v.iter().all(|x| *x == 0.0) {
        return true;
    }
    cone.charts.iter().any(|c| c.distance(v) <= tol)
}

/// `{z : A z ≤ b}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Polyhedron {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl Polyhedron {
    pub fn new(a: Vec<Vec<f64>>, b: Vec<f64>, dim: usize) -> Result<Self, SystemError> {
        if a.len() != b.len() || a.iter().any(|r| r.len() != dim) {
            return Err(SystemError::Dimension("polyhedron rows".into()));
        }
        let p = Polyhedron { a, b };
        if !p.nonempty(dim) {
            return Err(SystemError::EmptyPolyhedron);
        }
        Ok(p)
    }

    fn nonempty(&self, dim: usize) -> bool {
        let m = self.a.len();
        if m == 0 {
            return true;
        }
        // z = p − q, A p − A q + s = b, (p, q, s) ≥ 0.
        let mut mat = nalgebra::DMatrix::zeros(m, 2 * dim + m);
        for i in 0..m {
            for j in 0..dim {
                mat[(i, j)] = self.a[i][j];
                mat[(i, dim + j)] = -self.a[i][j];
            }
            mat[(i, 2 * dim + i)] = 1.0;
        }
        linalg::lp::phase_one(&mat, &DVector::from_column_slice(&self.b)).is_some()
    }

    fn slack_tol(&self, i: usize, tol: f64) -> f64 {
        tol * norm(&self.a[i]).max(1.0)
    }

    pub fn contains(&self, z: &[f64], tol: f64) -> bool {
        (0..self.a.len()).all(|i| dot(&self.a[i], z) <= self.b[i] + self.slack_tol(i, tol))
    }

    pub fn active(&self, z: &[f64], tol: f64) -> Vec<usize> {
        (0..self.a.len())
            .filter(|&i| (dot(&self.a[i], z) - self.b[i]).abs() <= self.slack_tol(i, tol))
            .collect()
    }

    /// Dykstra's alternating projection onto the defining half-spaces.
    pub fn project(&self, z: &[f64]) -> Vec<f64> {
        let m = self.a.len();
        let mut x = z.to_vec();
        if self.contains(z, 0.0) {
            return x;
        }
        let mut incr = vec![vec![0.0; z.len()]; m];
        for _ in 0..20_000 {
            let prev = x.clone();
            for i in 0..m {
                let y: Vec<f64> = x.iter().zip(&incr[i]).map(|(a, b)| a + b).collect();
                let ai = &self.a[i];
                let nn = dot(ai, ai);
                let viol = dot(ai, &y) - self.b[i];
                let xn: Vec<f64> = if viol > 0.0 && nn > 0.0 {
                    y.iter().zip(ai).map(|(v, a)| v - viol / nn * a).collect()
                } else {
                    y.clone()
                };
                incr[i] = y.iter().zip(&xn).map(|(a, b)| a - b).collect();
                x = xn;
            }
            let change = x.iter().zip(&prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if change < 1e-15 && self.contains(&x, 1e-13) {
                break;
            }
        }
        x
    }

    pub fn normal_chart(&self, z: &[f64], tol: f64) -> ConeChart {
        ConeChart {
            rays: self.active(z, tol).into_iter().map(|i| self.a[i].clone()).collect(),
            lineality: vec![],
            apex: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CatalogSet {
    FullSpace { dim: usize },
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Polyhedron(Polyhedron),
    Union { dim: usize, pieces: Vec<Polyhedron> },
    Segment { p0: Vec<f64>, p1: Vec<f64> },
    Sawtooth,
}

fn orth_complement(u: &[f64]) -> Vec<Vec<f64>> {
    let q = u.len();
    let mut family = vec![u.to_vec()];
    for i in 0..q {
        let mut e = vec![0.0; q];
        e[i] = 1.0;
        family.push(e);
    }
    orthonormal_basis(&family, 1e-10)
        .into_iter()
        .skip(1)
        .map(|b| b.iter().copied().collect())
        .collect()
}

impl CatalogSet {
    pub fn full(dim: usize) -> Self {
        CatalogSet::FullSpace { dim }
    }

    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, SystemError> {
        if lower.len() != upper.len() {
            return Err(SystemError::Dimension("box bounds".into()));
        }
        if let Some(i) = (0..lower.len()).find(|&i| lower[i] > upper[i]) {
            return Err(SystemError::InvertedBox(i));
        }
        Ok(CatalogSet::Box { lower, upper })
    }

    pub fn polyhedron(a: Vec<Vec<f64>>, b: Vec<f64>, dim: usize) -> Result<Self, SystemError> {
        Ok(CatalogSet::Polyhedron(Polyhedron::new(a, b, dim)?))
    }

    pub fn union(dim: usize, pieces: Vec<(Vec<Vec<f64>>, Vec<f64>)>) -> Result<Self, SystemError> {
        if pieces.is_empty() {
            return Err(SystemError::EmptyPolyhedron);
        }
        let pieces = pieces
            .into_iter()
            .map(|(a, b)| Polyhedron::new(a, b, dim))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CatalogSet::Union { dim, pieces })
    }

    pub fn segment(p0: Vec<f64>, p1: Vec<f64>) -> Result<Self, SystemError> {
        if p0.len() != p1.len() {
            return Err(SystemError::Dimension("segment endpoints".into()));
        }
        if p0 == p1 {
            return Err(SystemError::DegenerateSegment);
        }
        Ok(CatalogSet::Segment { p0, p1 })
    }

    pub fn dim(&self) -> usize {
        match self {
            CatalogSet::FullSpace { dim } | CatalogSet::Union { dim, .. } => *dim,
            CatalogSet::Box { lower, .. } => lower.len(),
            CatalogSet::Polyhedron(p) => p.a.first().map_or(0, Vec::len),
            CatalogSet::Segment { p0, .. } => p0.len(),
            CatalogSet::Sawtooth => 2,
        }
    }

    /// Polyhedral or a finite union of polyhedra.
    pub fn is_polyhedral(&self) -> bool {
        !matches!(self, CatalogSet::Sawtooth)
    }

    /// Catalog-level Clarke regularity (convex members are regular).
    pub fn is_clarke_regular(&self) -> bool {
        !matches!(self, CatalogSet::Sawtooth | CatalogSet::Union { .. })
    }

    fn segment_param(p0: &[f64], p1: &[f64], z: &[f64]) -> f64 {
        let u: Vec<f64> = p1.iter().zip(p0).map(|(a, b)| a - b).collect();
        let w: Vec<f64> = z.iter().zip(p0).map(|(a, b)| a - b).collect();
        (dot(&w, &u) / dot(&u, &u)).clamp(0.0, 1.0)
    }

    pub fn project(&self, z: &[f64]) -> Vec<f64> {
        match self {
            CatalogSet::FullSpace { .. } => z.to_vec(),
            CatalogSet::Box { lower, upper } => z
                .iter()
                .enumerate()
                .map(|(i, v)| v.clamp(lower[i], upper[i]))
                .collect(),
            CatalogSet::Polyhedron(p) => p.project(z),
            CatalogSet::Union { pieces, .. } => pieces
                .iter()
                .map(|p| p.project(z))
                .min_by(|a, b| {
                    let da: f64 = a.iter().zip(z).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = b.iter().zip(z).map(|(x, y)| (x - y).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .expect("nonempty union"),
            CatalogSet::Segment { p0, p1 } => {
                let t = Self::segment_param(p0, p1, z);
                p0.iter().zip(p1).map(|(a, b)| a + t * (b - a)).collect()
            }
            CatalogSet::Sawtooth => sawtooth::project([z[0], z[1]]).to_vec(),
        }
    }

    pub fn distance(&self, z: &[f64]) -> f64 {
        let p = self.project(z);
        p.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }

    pub fn contains(&self, z: &[f64], tol: f64) -> bool {
        match self {
            CatalogSet::FullSpace { .. } => true,
            CatalogSet::Box { lower, upper } => z
                .iter()
                .enumerate()
                .all(|(i, v)| *v >= lower[i] - tol && *v <= upper[i] + tol),
            CatalogSet::Polyhedron(p) => p.contains(z, tol),
            CatalogSet::Union { pieces, .. } => pieces.iter().any(|p| p.contains(z, tol)),
            _ => self.distance(z) <= tol,
        }
    }

    /// Limiting normal cone at `z` as a union of charts.
    pub fn normal_cone(&self, z: &[f64], tol: f64) -> Result<NormalConeDescription, SystemError> {
        if z.len() != self.dim() {
            return Err(SystemError::Dimension("point length differs from block dimension".into()));
        }
        if !self.contains(z, tol) {
            return Err(SystemError::PointNotInSet {
                distance: self.distance(z),
            });
        }
        let dim = self.dim();
        let (charts, exact) = match self {
            CatalogSet::FullSpace { .. } => (vec![ConeChart::zero()], true),
            CatalogSet::Box { lower, upper } => {
                let mut chart = ConeChart::zero();
                for i in 0..dim {
                    let mut e = vec![0.0; dim];
                    if lower[i] == upper[i] {
                        e[i] = 1.0;
                        chart.lineality.push(e);
                    } else {
                        if (z[i] - lower[i]).abs() <= tol {
                            e[i] = -1.0;
                            chart.rays.push(e.clone());
                        }
                        if (z[i] - upper[i]).abs() <= tol {
                            e[i] = 1.0;
                            chart.rays.push(e);
                        }
                    }
                }
                (vec![chart], true)
            }
            CatalogSet::Polyhedron(p) => (vec![p.normal_chart(z, tol)], true),
            CatalogSet::Union { pieces, .. } => {
                let containing: Vec<&Polyhedron> =
                    pieces.iter().filter(|p| p.contains(z, tol)).collect();
                let exact = containing.len() <= 1;
                (containing.iter().map(|p| p.normal_chart(z, tol)).collect(), exact)
            }
            CatalogSet::Segment { p0, p1 } => {
                let u: Vec<f64> = p1.iter().zip(p0).map(|(a, b)| a - b).collect();
                let len = norm(&u);
                let t = Self::segment_param(p0, p1, z);
                let mut chart = ConeChart {
                    rays: vec![],
                    lineality: orth_complement(&u),
                    apex: false,
                };
                if t * len <= tol {
                    chart.rays.push(u.iter().map(|x| -x).collect());
                } else if (1.0 - t) * len <= tol {
                    chart.rays.push(u.clone());
                }
                (vec![chart], true)
            }
            CatalogSet::Sawtooth => (sawtooth::normal_charts([z[0], z[1]], tol), true),
        };
        Ok(NormalConeDescription { dim, charts, exact })
    }
}

/// Active-set partition at a point.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct IndexSets {
    pub i_g: Vec<usize>,
    pub i_star: Vec<usize>,
    pub j_star: Vec<usize>,
    pub k_star: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub max_residual: f64,
    pub g_plus: Vec<f64>,
    pub h_abs: Vec<f64>,
    pub pair_min_abs: Vec<f64>,
    pub block_distance: Vec<f64>,
}

/// Data of the system `g ≤ 0, h = 0, (G, H) ∈ Ω^p, x ∈ C_1 × … × C_l`.
#[derive(Debug, Clone)]
pub struct FeasibilitySystem {
    pub vars: Variables,
    pub g: Vec<Expr>,
    pub h: Vec<Expr>,
    pub big_g: Vec<Expr>,
    pub big_h: Vec<Expr>,
    pub blocks: Vec<CatalogSet>,
}

impl FeasibilitySystem {
    pub fn new(
        vars: Variables,
        g: Vec<Expr>,
        h: Vec<Expr>,
        big_g: Vec<Expr>,
        big_h: Vec<Expr>,
        blocks: Vec<CatalogSet>,
    ) -> Result<Self, SystemError> {
        let d = vars.len();
        if big_g.len() != big_h.len() {
            return Err(SystemError::Dimension("G and H need the same length".into()));
        }
        let total: usize = blocks.iter().map(CatalogSet::dim).sum();
        if total != d {
            return Err(SystemError::Dimension(format!(
                "blocks cover {total} coordinates but {d} variables are declared"
            )));
        }
        for (kind, list) in [("h", &h), ("G", &big_g), ("H", &big_h)] {
            if let Some(i) = list.iter().position(|e| !e.is_smooth()) {
                return Err(SystemError::NonsmoothData { kind, index: i });
            }
        }
        for e in g.iter().chain(&h).chain(&big_g).chain(&big_h) {
            if let Some(&i) = e.variables().iter().next_back() {
                if i >= d {
                    return Err(SystemError::Dimension(format!("variable index {i} ≥ {d}")));
                }
            }
        }
        Ok(FeasibilitySystem {
            vars,
            g,
            h,
            big_g,
            big_h,
            blocks,
        })
    }

    pub fn dim(&self) -> usize {
        self.vars.len()
    }

    pub fn block_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.blocks
            .iter()
            .map(|b| {
                let r = start..start + b.dim();
                start = r.end;
                r
            })
            .collect()
    }

    pub fn project_onto_c(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        for (b, r) in self.blocks.iter().zip(self.block_ranges()) {
            let p = b.project(&x[r.clone()]);
            out[r].copy_from_slice(&p);
        }
        out
    }

    pub fn in_c(&self, x: &[f64], tol: f64) -> bool {
        self.blocks
            .iter()
            .zip(self.block_ranges())
            .all(|(b, r)| b.contains(&x[r], tol))
    }

    /// Per-block limiting normal cones of `C` at `x`.
    pub fn normal_cones(&self, x: &[f64], tol: f64) -> Result<Vec<NormalConeDescription>, SystemError> {
        self.blocks
            .iter()
            .zip(self.block_ranges())
            .map(|(b, r)| b.normal_cone(&x[r], tol))
            .collect()
    }

    pub fn is_affine(&self) -> bool {
        self.g
            .iter()
            .chain(&self.h)
            .chain(&self.big_g)
            .chain(&self.big_h)
            .all(Expr::is_affine)
    }
}

pub fn is_feasible(sys: &FeasibilitySystem, x: &[f64], tol: f64) -> Result<FeasibilityReport, SystemError> {
    if x.len() != sys.dim() {
        return Err(SystemError::Dimension("point length".into()));
    }
    let terms = vcalc::phi0_terms(sys, x)?;
    let block_distance: Vec<f64> = sys
        .blocks
        .iter()
        .zip(sys.block_ranges())
        .map(|(b, r)| if b.contains(&x[r.clone()], tol) { 0.0 } else { b.distance(&x[r]) })
        .collect();
    let max_residual = terms
        .g_plus
        .iter()
        .chain(&terms.h_abs)
        .chain(&terms.pair_min_abs)
        .fold(0.0f64, |m, v| m.max(*v));
    let feasible = max_residual <= tol && block_distance.iter().all(|d| *d == 0.0);
    Ok(FeasibilityReport {
        feasible,
        max_residual,
        g_plus: terms.g_plus,
        h_abs: terms.h_abs,
        pair_min_abs: terms.pair_min_abs,
        block_distance,
    })
}

pub fn active_index_sets(sys: &FeasibilitySystem, x: &[f64], tol: f64) -> Result<IndexSets, SystemError> {
    let rep = is_feasible(sys, x, tol)?;
    if !rep.feasible {
        let worst = rep.block_distance.iter().fold(rep.max_residual, |m, v| m.max(*v));
        return Err(SystemError::Infeasible { residual: worst });
    }
    let mut out = IndexSets::default();
    for (i, g) in sys.g.iter().enumerate() {
        if g.eval(x)?.abs() <= tol {
            out.i_g.push(i);
        }
    }
    for i in 0..sys.big_g.len() {
        let gz = sys.big_g[i].eval(x)?.abs() <= tol;
        let hz = sys.big_h[i].eval(x)?.abs() <= tol;
        match (gz, hz) {
            (true, true) => out.j_star.push(i),
            (true, false) => out.i_star.push(i),
            _ => out.k_star.push(i),
        }
    }
    Ok(out)
}
