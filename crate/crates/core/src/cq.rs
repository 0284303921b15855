//! Constraint-qualification verdicts: NNAMCQ, the full-rank condition, LCQ,
//! and sampled probes for RCPLD and RCRCQ.

use std::fmt;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::Settings;
use crate::expr::{ExprError, SubdifferentialVertexSet};
use crate::linalg::{
    family_rank, positive_dependence_certificate, positive_dependence_certificate_degraded,
    select_basis, DependenceCertificate, JBranch, LinalgError, PairSide, RankReport, SignConstraint,
};
use crate::system::{active_index_sets, CatalogSet, ConeChart, FeasibilitySystem, IndexSets, NormalConeDescription, SystemError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CqError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Holds,
    Fails,
    NoViolationFound,
    ViolatedWithWitness,
    Incomplete,
}

impl Verdict {
    pub fn is_violation(self) -> bool {
        matches!(self, Verdict::Fails | Verdict::ViolatedWithWitness)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Holds => "holds",
            Verdict::Fails => "fails",
            Verdict::NoViolationFound => "no-violation-found",
            Verdict::ViolatedWithWitness => "violated-with-witness",
            Verdict::Incomplete => "incomplete",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CqKind {
    Nnamcq,
    FullRank,
    Lcq,
    Rcpld,
    Rcrcq,
}

impl fmt::Display for CqKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CqKind::Nnamcq => "NNAMCQ",
            CqKind::FullRank => "full-rank",
            CqKind::Lcq => "LCQ",
            CqKind::Rcpld => "RCPLD",
            CqKind::Rcrcq => "RCRCQ",
        })
    }
}

/// Radii `r0·ρ^k, k = 0..=levels`, with a fixed number of points per radius.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingPlan {
    pub r0: f64,
    pub rho: f64,
    pub levels: usize,
    pub points_per_radius: usize,
    pub seed: u64,
    /// Answer from LCQ or the full-rank condition when they hold.
    pub short_circuit: bool,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan {
            r0: 1e-2,
            rho: 0.5,
            levels: 12,
            points_per_radius: 16,
            seed: 20_150_601,
            short_circuit: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub level: usize,
    pub radius: f64,
    pub point: Vec<f64>,
}

impl SamplingPlan {
    pub fn radii(&self) -> Vec<f64> {
        (0..=self.levels).map(|k| self.r0 * self.rho.powi(k as i32)).collect()
    }

    /// Points `P_C(x* + r u)` with `u` uniform on the unit sphere; points that
    /// project back onto `x*` are dropped.
    pub fn sample(&self, sys: &FeasibilitySystem, x: &[f64]) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let d = x.len();
        let mut out = Vec::new();
        for (level, r) in self.radii().into_iter().enumerate() {
            for _ in 0..self.points_per_radius {
                let mut u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                u.iter_mut().for_each(|v| *v /= n);
                let z: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + r * b).collect();
                let p = sys.project_onto_c(&z);
                if p.iter().zip(x).any(|(a, b)| a != b) {
                    out.push(Sample {
                        level,
                        radius: r,
                        point: p,
                    });
                }
            }
        }
        out
    }
}

/// `(λ^g, λ^h, λ^G, λ^H, η)` together with the chosen `g` subgradients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiplierVector {
    pub lambda_g: Vec<f64>,
    /// `v_i ∈ ∂g_i` paired with each nonzero `λ^g_i`.
    pub g_vertices: Vec<Option<Vec<f64>>>,
    pub lambda_h: Vec<f64>,
    pub lambda_gg: Vec<f64>,
    pub lambda_hh: Vec<f64>,
    pub eta: Vec<f64>,
    pub branches: Vec<(usize, JBranch)>,
    /// `Σλ^g v + Σλ^h ∇h − Σλ^G ∇G − Σλ^H ∇H + η`.
    pub combination: Vec<f64>,
}

impl MultiplierVector {
    pub fn l1_norm(&self) -> f64 {
        self.lambda_g
            .iter()
            .chain(&self.lambda_h)
            .chain(&self.lambda_gg)
            .chain(&self.lambda_hh)
            .map(|v| v.abs())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WitnessStep {
    pub radius: f64,
    pub point: Vec<f64>,
    pub family: Vec<Vec<f64>>,
    pub rank: usize,
}

/// A sequence along which a rank or dependence condition breaks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankWitness {
    pub condition: String,
    pub i4: Vec<usize>,
    pub i5: Vec<usize>,
    pub i6: Vec<usize>,
    pub blocks: Vec<usize>,
    pub limit_family: Vec<Vec<f64>>,
    pub limit_rank: usize,
    pub multipliers: Option<Vec<f64>>,
    pub sequence: Vec<WitnessStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CqReport {
    pub check: CqKind,
    pub verdict: Verdict,
    pub point: Vec<f64>,
    pub index_sets: Option<IndexSets>,
    pub certificate: Option<MultiplierVector>,
    pub witness: Option<RankWitness>,
    pub rank: Option<RankReport>,
    pub target_rank: Option<usize>,
    pub plan: Option<SamplingPlan>,
    pub explored_fraction: Option<f64>,
    pub notes: Vec<String>,
}

impl CqReport {
    fn new(check: CqKind, verdict: Verdict, point: &[f64]) -> Self {
        CqReport {
            check,
            verdict,
            point: point.to_vec(),
            index_sets: None,
            certificate: None,
            witness: None,
            rank: None,
            target_rank: None,
            plan: None,
            explored_fraction: None,
            notes: vec![],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Member {
    G(usize),
    H(usize),
    BigG(usize),
    BigH(usize),
    Normal(usize),
}

#[derive(Debug, Clone, Default)]
struct Family {
    members: Vec<Member>,
    vectors: Vec<Vec<f64>>,
    signs: Vec<SignConstraint>,
}

impl Family {
    fn push(&mut self, m: Member, v: Vec<f64>, s: SignConstraint) {
        self.members.push(m);
        self.vectors.push(v);
        self.signs.push(s);
    }

    fn push_chart(&mut self, block: usize, range: &Range<usize>, d: usize, chart: &ConeChart) {
        for r in &chart.rays {
            self.push(Member::Normal(block), embed(d, range, r), SignConstraint::Nonneg);
        }
        for l in &chart.lineality {
            self.push(Member::Normal(block), embed(d, range, l), SignConstraint::Free);
        }
    }

    fn multipliers(&self, sys: &FeasibilitySystem, lambda: &[f64], branches: Vec<(usize, JBranch)>) -> MultiplierVector {
        let d = sys.dim();
        let mut out = MultiplierVector {
            lambda_g: vec![0.0; sys.g.len()],
            g_vertices: vec![None; sys.g.len()],
            lambda_h: vec![0.0; sys.h.len()],
            lambda_gg: vec![0.0; sys.big_g.len()],
            lambda_hh: vec![0.0; sys.big_h.len()],
            eta: vec![0.0; d],
            branches,
            combination: vec![0.0; d],
        };
        let mut g_sum = vec![vec![0.0; d]; sys.g.len()];
        for ((m, v), &l) in self.members.iter().zip(&self.vectors).zip(lambda) {
            axpy(&mut out.combination, l, v);
            match *m {
                Member::G(i) => {
                    out.lambda_g[i] += l;
                    axpy(&mut g_sum[i], l, v);
                }
                Member::H(i) => out.lambda_h[i] += l,
                Member::BigG(i) => out.lambda_gg[i] += l,
                Member::BigH(i) => out.lambda_hh[i] += l,
                Member::Normal(_) => axpy(&mut out.eta, l, v),
            }
        }
        for i in 0..sys.g.len() {
            if out.lambda_g[i] != 0.0 {
                out.g_vertices[i] = Some(g_sum[i].iter().map(|x| x / out.lambda_g[i]).collect());
            }
        }
        out
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn embed(d: usize, range: &Range<usize>, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d];
    out[range.clone()].copy_from_slice(v);
    out
}

fn neg(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| -x).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Gradients, `g` vertex sets and canonical normal cones at one point.
struct PointData {
    point: Vec<f64>,
    grad_h: Vec<Vec<f64>>,
    grad_gg: Vec<Vec<f64>>,
    grad_hh: Vec<Vec<f64>>,
    g_verts: Vec<Option<SubdifferentialVertexSet>>,
    cones: Vec<NormalConeDescription>,
}

impl PointData {
    fn new(sys: &FeasibilitySystem, x: &[f64], g_idx: &[usize], s: &Settings) -> Result<Self, CqError> {
        let grads = |es: &[crate::expr::Expr]| -> Result<Vec<Vec<f64>>, ExprError> {
            es.iter().map(|e| e.eval_gradient(x)).collect()
        };
        let mut g_verts = vec![None; sys.g.len()];
        for &i in g_idx {
            g_verts[i] = Some(sys.g[i].subdifferential_vertices(x, s.kink_tol)?);
        }
        let cones = sys
            .normal_cones(x, s.feas_tol)?
            .into_iter()
            .map(|c| NormalConeDescription {
                charts: c.charts.iter().map(ConeChart::canonical).collect(),
                ..c
            })
            .collect();
        Ok(PointData {
            point: x.to_vec(),
            grad_h: grads(&sys.h)?,
            grad_gg: grads(&sys.big_g)?,
            grad_hh: grads(&sys.big_h)?,
            g_verts,
            cones,
        })
    }

    fn vertices(&self, i: usize) -> &[Vec<f64>] {
        &self.g_verts[i].as_ref().expect("vertex set computed").vertices
    }

    fn exact(&self) -> bool {
        self.g_verts.iter().flatten().all(|v| v.exact) && self.cones.iter().all(|c| c.exact)
    }

    /// `{∇h} ∪ {∇G_i}_{I*} ∪ {∇H_i}_{K*}` in that order.
    fn base_family(&self, sets: &IndexSets) -> Vec<Vec<f64>> {
        let mut rows = self.grad_h.clone();
        rows.extend(sets.i_star.iter().map(|&i| self.grad_gg[i].clone()));
        rows.extend(sets.k_star.iter().map(|&i| self.grad_hh[i].clone()));
        rows
    }
}

/// Cartesian product of index ranges `0..sizes[k]`, first factor fastest.
fn product(sizes: &[usize], cap: usize) -> (Vec<Vec<usize>>, bool) {
    let total = sizes.iter().try_fold(1usize, |acc, s| acc.checked_mul(*s));
    if sizes.contains(&0) {
        return (vec![], true);
    }
    let mut out = Vec::new();
    let mut idx = vec![0usize; sizes.len()];
    loop {
        if out.len() >= cap {
            return (out, total.is_some_and(|t| t <= cap));
        }
        out.push(idx.clone());
        let mut k = 0;
        while k < sizes.len() {
            idx[k] += 1;
            if idx[k] < sizes[k] {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == sizes.len() {
            return (out, true);
        }
    }
}

/// Subsets of `items` ordered by size (descending if `desc`), then
/// lexicographically by position.
fn subsets(items: &[usize], desc: bool) -> Vec<Vec<usize>> {
    let n = items.len().min(20);
    let mut all: Vec<Vec<usize>> = (0u32..(1 << n))
        .map(|mask| (0..n).filter(|k| mask & (1 << k) != 0).map(|k| items[k]).collect())
        .collect();
    all.sort_by(|a: &Vec<usize>, b: &Vec<usize>| {
        let by_size = if desc { b.len().cmp(&a.len()) } else { a.len().cmp(&b.len()) };
        by_size.then_with(|| a.cmp(b))
    });
    all
}

fn dependence(
    fam: &Family,
    s: &Settings,
    incomplete: &mut bool,
) -> Result<Option<DependenceCertificate>, CqError> {
    match positive_dependence_certificate(&fam.vectors, &fam.signs, s.branch_cap) {
        Ok(c) => Ok(c),
        Err(LinalgError::BranchExplosion { .. }) => {
            *incomplete = true;
            Ok(positive_dependence_certificate_degraded(&fam.vectors, &fam.signs)?)
        }
        Err(e) => Err(e.into()),
    }
}

/// The NNAMCQ / stationarity family at `x*` for one vertex choice per active
/// `g` (several vertices per index give the convex-hull relaxation).
fn full_family(
    sys: &FeasibilitySystem,
    pd: &PointData,
    sets: &IndexSets,
    g_choice: &[(usize, Vec<Vec<f64>>)],
    charts: &[usize],
) -> Family {
    let d = sys.dim();
    let mut fam = Family::default();
    for (i, verts) in g_choice {
        for v in verts {
            fam.push(Member::G(*i), v.clone(), SignConstraint::Nonneg);
        }
    }
    for (i, gh) in pd.grad_h.iter().enumerate() {
        fam.push(Member::H(i), gh.clone(), SignConstraint::Free);
    }
    for &i in &sets.i_star {
        fam.push(Member::BigG(i), neg(&pd.grad_gg[i]), SignConstraint::Free);
    }
    for &i in &sets.k_star {
        fam.push(Member::BigH(i), neg(&pd.grad_hh[i]), SignConstraint::Free);
    }
    for &i in &sets.j_star {
        fam.push(Member::BigG(i), neg(&pd.grad_gg[i]), SignConstraint::Paired { pair: i, side: PairSide::G });
        fam.push(Member::BigH(i), neg(&pd.grad_hh[i]), SignConstraint::Paired { pair: i, side: PairSide::H });
    }
    for (b, range) in sys.block_ranges().iter().enumerate() {
        fam.push_chart(b, range, d, &pd.cones[b].charts[charts[b]]);
    }
    fam
}

pub(crate) struct StarData {
    pd: PointData,
    pub(crate) sets: IndexSets,
}

pub(crate) fn star_data(sys: &FeasibilitySystem, x: &[f64], s: &Settings) -> Result<StarData, CqError> {
    let sets = active_index_sets(sys, x, s.feas_tol)?;
    let pd = PointData::new(sys, x, &sets.i_g, s)?;
    Ok(StarData { pd, sets })
}

/// Signed representation `−target = Σ λ m` over the full family, for every
/// vertex selection and chart combination, in enumeration order.
pub(crate) fn find_multipliers(
    sys: &FeasibilitySystem,
    star: &StarData,
    target: &[f64],
    s: &Settings,
    hull: bool,
) -> Result<(Option<MultiplierVector>, bool), CqError> {
    let pd = &star.pd;
    let sets = &star.sets;
    let chart_sizes: Vec<usize> = pd.cones.iter().map(|c| c.charts.len()).collect();
    let (combos, mut complete) = product(&chart_sizes, s.subset_cap);
    let selections: Vec<Vec<(usize, Vec<Vec<f64>>)>> = if hull {
        vec![sets.i_g.iter().map(|&i| (i, pd.vertices(i).to_vec())).collect()]
    } else {
        let sizes: Vec<usize> = sets.i_g.iter().map(|&i| pd.vertices(i).len()).collect();
        let (sel, c) = product(&sizes, s.subset_cap);
        complete &= c;
        sel.into_iter()
            .map(|pick| {
                sets.i_g
                    .iter()
                    .zip(&pick)
                    .map(|(&i, &k)| (i, vec![pd.vertices(i)[k].clone()]))
                    .collect()
            })
            .collect()
    };
    let rhs = neg(target);
    for sel in &selections {
        for combo in &combos {
            let fam = full_family(sys, pd, sets, sel, combo);
            let found = match crate::linalg::signed_solution(&fam.vectors, &fam.signs, &rhs, s.branch_cap) {
                Ok(f) => f,
                Err(LinalgError::BranchExplosion { .. }) => {
                    complete = false;
                    None
                }
                Err(e) => return Err(e.into()),
            };
            if let Some((lambda, branches)) = found {
                return Ok((Some(fam.multipliers(sys, &lambda, branches)), complete));
            }
        }
    }
    Ok((None, complete))
}

pub(crate) fn star_exact(star: &StarData) -> bool {
    star.pd.exact()
}

/// No nonzero abnormal multiplier: searches for a sign-feasible dependence
/// among `∂g` vertices, `∇h`, `−∇G`, `−∇H` and normal-cone generators.
pub fn check_nnamcq(sys: &FeasibilitySystem, x: &[f64], s: &Settings) -> Result<CqReport, CqError> {
    let star = star_data(sys, x, s)?;
    let pd = &star.pd;
    let sets = &star.sets;
    let mut report = CqReport::new(CqKind::Nnamcq, Verdict::Holds, x);
    report.index_sets = Some(sets.clone());
    let chart_sizes: Vec<usize> = pd.cones.iter().map(|c| c.charts.len()).collect();
    let (combos, mut complete) = product(&chart_sizes, s.subset_cap);
    let vsizes: Vec<usize> = sets.i_g.iter().map(|&i| pd.vertices(i).len()).collect();
    let (selections, c) = product(&vsizes, s.subset_cap);
    complete &= c;
    let mut degraded = false;
    for pick in &selections {
        let sel: Vec<(usize, Vec<Vec<f64>>)> = sets
            .i_g
            .iter()
            .zip(pick)
            .map(|(&i, &k)| (i, vec![pd.vertices(i)[k].clone()]))
            .collect();
        for combo in &combos {
            let fam = full_family(sys, pd, sets, &sel, combo);
            if let Some(cert) = dependence(&fam, s, &mut degraded)? {
                report.verdict = Verdict::Fails;
                report.certificate = Some(fam.multipliers(sys, &cert.multipliers, cert.branches));
                return Ok(report);
            }
        }
    }
    let mut relaxed = false;
    if vsizes.iter().any(|n| *n > 1) {
        let sel: Vec<(usize, Vec<Vec<f64>>)> = sets.i_g.iter().map(|&i| (i, pd.vertices(i).to_vec())).collect();
        for combo in &combos {
            let fam = full_family(sys, pd, sets, &sel, combo);
            if dependence(&fam, s, &mut degraded)?.is_some() {
                relaxed = true;
                report
                    .notes
                    .push("a dependence exists with convex combinations of subgradients only".into());
                break;
            }
        }
    }
    if !pd.exact() {
        report.notes.push("subdifferential or normal cone is an outer estimate".into());
    }
    report.verdict = if !complete || degraded {
        Verdict::Incomplete
    } else if relaxed || !pd.exact() {
        Verdict::NoViolationFound
    } else {
        Verdict::Holds
    };
    if degraded {
        report.notes.push("branch cap exceeded; only uniform branch assignments were searched".into());
    }
    Ok(report)
}

/// Rank of `{∇h} ∪ {∇G_i}_{I*} ∪ {∇H_i}_{K*}` against the dimension.
pub fn check_fullrank(sys: &FeasibilitySystem, x: &[f64], s: &Settings) -> Result<CqReport, CqError> {
    let sets = active_index_sets(sys, x, s.feas_tol)?;
    let pd = PointData::new(sys, x, &[], s)?;
    let rows = pd.base_family(&sets);
    let rank = family_rank(&rows, sys.dim(), s.rank_tol);
    let d = sys.dim();
    let mut report = CqReport::new(CqKind::FullRank, Verdict::NoViolationFound, x);
    if rank.rank == d {
        report.verdict = Verdict::Holds;
        report.notes.push("full rank implies RCPLD and the local error bound".into());
    } else {
        report
            .notes
            .push(format!("rank {} < {d}: the full-rank condition does not apply", rank.rank));
    }
    report.index_sets = Some(sets);
    report.rank = Some(rank);
    report.target_rank = Some(d);
    Ok(report)
}

/// Syntactic linearity of all constraint functions and polyhedrality of `C`.
pub fn check_lcq(sys: &FeasibilitySystem) -> CqReport {
    let mut report = CqReport::new(CqKind::Lcq, Verdict::Holds, &[]);
    for (kind, list) in [("g", &sys.g), ("h", &sys.h), ("G", &sys.big_g), ("H", &sys.big_h)] {
        for (i, e) in list.iter().enumerate() {
            if !e.is_affine() {
                report.verdict = Verdict::Fails;
                report.notes.push(format!("{kind}[{i}] is not affine"));
            }
        }
    }
    for (b, set) in sys.blocks.iter().enumerate() {
        if !set.is_polyhedral() {
            report.verdict = Verdict::Fails;
            report.notes.push(format!("block {b} is not a finite union of polyhedra"));
        }
    }
    report
}

fn short_circuit(
    sys: &FeasibilitySystem,
    x: &[f64],
    s: &Settings,
    kind: CqKind,
) -> Result<Option<CqReport>, CqError> {
    if kind == CqKind::Rcpld {
        let fr = check_fullrank(sys, x, s)?;
        if fr.verdict == Verdict::Holds {
            let mut r = CqReport::new(kind, Verdict::NoViolationFound, x);
            r.index_sets = fr.index_sets;
            r.rank = fr.rank;
            r.notes.push("short-circuit: full rank => RCPLD".into());
            return Ok(Some(r));
        }
    }
    if check_lcq(sys).verdict == Verdict::Holds {
        let mut r = CqReport::new(kind, Verdict::NoViolationFound, x);
        r.index_sets = Some(active_index_sets(sys, x, s.feas_tol)?);
        r.notes.push(match kind {
            CqKind::Rcrcq => "short-circuit: LCQ => RCRCQ".into(),
            _ => "short-circuit: LCQ => RCRCQ => RCPLD".into(),
        });
        return Ok(Some(r));
    }
    Ok(None)
}

struct SampleData {
    level: usize,
    radius: f64,
    pd: PointData,
}

fn sample_data(
    sys: &FeasibilitySystem,
    x: &[f64],
    plan: &SamplingPlan,
    g_idx: &[usize],
    s: &Settings,
) -> Result<Vec<SampleData>, CqError> {
    plan.sample(sys, x)
        .into_iter()
        .map(|smp| {
            Ok(SampleData {
                level: smp.level,
                radius: smp.radius,
                pd: PointData::new(sys, &smp.point, g_idx, s)?,
            })
        })
        .collect()
}

fn admissible_radius(r: f64, reference: &[f64]) -> f64 {
    r.sqrt() * (1.0 + norm(reference))
}

/// Vertex of `∂g_i(x^k)` nearest to `v*`, if close enough to converge.
fn matched_vertex(pd: &PointData, i: usize, target: &[f64], r: f64) -> Option<Vec<f64>> {
    let best = pd
        .vertices(i)
        .iter()
        .min_by(|a, b| dist(a, target).partial_cmp(&dist(b, target)).unwrap())?;
    (dist(best, target) <= admissible_radius(r, target)).then(|| best.clone())
}

fn generators(chart: &ConeChart) -> Vec<Vec<f64>> {
    let mut out = chart.rays.clone();
    for l in &chart.lineality {
        out.push(l.clone());
        out.push(neg(l));
    }
    out
}

/// Candidate normal vectors `η^k_b` converging to `η*_b`.
fn normal_candidates(cone: &NormalConeDescription, target: &[f64], r: f64) -> Option<Vec<Vec<f64>>> {
    if norm(target) == 0.0 {
        let mut out: Vec<Vec<f64>> = cone
            .charts
            .iter()
            .flat_map(generators)
            .map(|g| g.iter().map(|v| r * v / norm(&g).max(1e-300)).collect())
            .collect();
        out.push(vec![0.0; target.len()]);
        return Some(crate::expr::dedup(out));
    }
    let (k, (p, dd)) = cone
        .charts
        .iter()
        .map(|c| crate::linalg::project_onto_cone(&c.rays, &c.lineality, target))
        .enumerate()
        .min_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap())?;
    if dd > admissible_radius(r, target) {
        return None;
    }
    let mut out = vec![p.clone()];
    for g in generators(&cone.charts[k]) {
        let gn = norm(&g).max(1e-300);
        out.push(p.iter().zip(&g).map(|(a, b)| a + r * b / gn).collect());
    }
    Some(out)
}

/// One candidate per block from `cands` with at most one block varied away
/// from its first candidate.
fn one_at_a_time(cands: &[Vec<Vec<f64>>]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; cands.len()]];
    for (b, c) in cands.iter().enumerate() {
        for k in 1..c.len() {
            let mut pick = vec![0; cands.len()];
            pick[b] = k;
            out.push(pick);
        }
    }
    out
}

fn collect_levels(plan: &SamplingPlan, steps: Vec<(usize, WitnessStep)>) -> Option<Vec<WitnessStep>> {
    let mut by_level: Vec<Option<WitnessStep>> = vec![None; plan.levels + 1];
    for (lvl, st) in steps {
        if by_level[lvl].is_none() {
            by_level[lvl] = Some(st);
        }
    }
    by_level.into_iter().collect()
}

/// Sampled test of RCPLD: rank constancy of the basic family and persistence
/// of every positive-dependence certificate found at `x*`.
pub fn probe_rcpld(
    sys: &FeasibilitySystem,
    x: &[f64],
    plan: &SamplingPlan,
    s: &Settings,
) -> Result<CqReport, CqError> {
    if plan.short_circuit {
        if let Some(mut r) = short_circuit(sys, x, s, CqKind::Rcpld)? {
            r.plan = Some(plan.clone());
            return Ok(r);
        }
    }
    let d = sys.dim();
    let star = star_data(sys, x, s)?;
    let (pd, sets) = (&star.pd, &star.sets);
    let mut report = CqReport::new(CqKind::Rcpld, Verdict::NoViolationFound, x);
    report.index_sets = Some(sets.clone());
    report.plan = Some(plan.clone());
    let samples = sample_data(sys, x, plan, &sets.i_g, s)?;
    let ranges = sys.block_ranges();

    // (i) rank constancy of the basic family
    let base = pd.base_family(sets);
    let base_rank = family_rank(&base, d, s.rank_tol).rank;
    report.rank = Some(family_rank(&base, d, s.rank_tol));
    let steps: Vec<(usize, WitnessStep)> = samples
        .iter()
        .filter_map(|smp| {
            let fam = smp.pd.base_family(sets);
            let r = family_rank(&fam, d, s.rank_tol).rank;
            (r != base_rank).then(|| {
                (
                    smp.level,
                    WitnessStep {
                        radius: smp.radius,
                        point: smp.pd.point.clone(),
                        family: fam,
                        rank: r,
                    },
                )
            })
        })
        .collect();
    if let Some(sequence) = collect_levels(plan, steps) {
        report.verdict = Verdict::ViolatedWithWitness;
        report.witness = Some(RankWitness {
            condition: "rank of {grad h, grad G (I*), grad H (K*)} is not constant".into(),
            i4: vec![],
            i5: vec![],
            i6: vec![],
            blocks: vec![],
            limit_family: base,
            limit_rank: base_rank,
            multipliers: None,
            sequence,
        });
        return Ok(report);
    }

    // (ii) persistence of positive dependence
    let basis = select_basis(&base, s.rank_tol);
    let m = sys.h.len();
    let ni = sets.i_star.len();
    let i1: Vec<usize> = basis.iter().filter(|&&k| k < m).copied().collect();
    let i2: Vec<usize> = basis.iter().filter(|&&k| k >= m && k < m + ni).map(|&k| sets.i_star[k - m]).collect();
    let i3: Vec<usize> = basis.iter().filter(|&&k| k >= m + ni).map(|&k| sets.k_star[k - m - ni]).collect();

    let chart_sizes: Vec<usize> = pd.cones.iter().map(|c| c.charts.len()).collect();
    let (combos, mut complete) = product(&chart_sizes, s.subset_cap);
    let mut budget = s.subset_cap;
    let mut explored = 0usize;
    let mut degraded = false;
    'outer: for i4 in subsets(&sets.i_g, true) {
        let vsizes: Vec<usize> = i4.iter().map(|&i| pd.vertices(i).len()).collect();
        let (picks, c) = product(&vsizes, s.subset_cap);
        complete &= c;
        for i5 in subsets(&sets.j_star, false) {
            for i6 in subsets(&sets.j_star, false) {
                for pick in &picks {
                    for combo in &combos {
                        if budget == 0 {
                            complete = false;
                            break 'outer;
                        }
                        budget -= 1;
                        explored += 1;
                        let vstar: Vec<Vec<f64>> =
                            i4.iter().zip(pick).map(|(&i, &k)| pd.vertices(i)[k].clone()).collect();
                        let mut fam = Family::default();
                        for (&i, v) in i4.iter().zip(&vstar) {
                            fam.push(Member::G(i), v.clone(), SignConstraint::Nonneg);
                        }
                        for &i in &i1 {
                            fam.push(Member::H(i), pd.grad_h[i].clone(), SignConstraint::Free);
                        }
                        let paired = |i: usize, side| {
                            if i5.contains(&i) && i6.contains(&i) {
                                SignConstraint::Paired { pair: i, side }
                            } else {
                                SignConstraint::Free
                            }
                        };
                        for &i in i2.iter().chain(&i5) {
                            let sg = if i5.contains(&i) { paired(i, PairSide::G) } else { SignConstraint::Free };
                            fam.push(Member::BigG(i), neg(&pd.grad_gg[i]), sg);
                        }
                        for &i in i3.iter().chain(&i6) {
                            let sg = if i6.contains(&i) { paired(i, PairSide::H) } else { SignConstraint::Free };
                            fam.push(Member::BigH(i), neg(&pd.grad_hh[i]), sg);
                        }
                        for (b, range) in ranges.iter().enumerate() {
                            fam.push_chart(b, range, d, &pd.cones[b].charts[combo[b]]);
                        }
                        let Some(cert) = dependence(&fam, s, &mut degraded)? else { continue };
                        let mv = fam.multipliers(sys, &cert.multipliers, cert.branches.clone());
                        let eta_blocks: Vec<Vec<f64>> = ranges.iter().map(|r| mv.eta[r.clone()].to_vec()).collect();
                        let l: Vec<usize> = (0..ranges.len()).filter(|&b| norm(&eta_blocks[b]) > 1e-10).collect();

                        let mut limit_family: Vec<Vec<f64>> = vstar.clone();
                        limit_family.extend(i1.iter().map(|&i| pd.grad_h[i].clone()));
                        limit_family.extend(i2.iter().chain(&i5).map(|&i| pd.grad_gg[i].clone()));
                        limit_family.extend(i3.iter().chain(&i6).map(|&i| pd.grad_hh[i].clone()));
                        limit_family.extend(l.iter().map(|&b| embed(d, &ranges[b], &eta_blocks[b])));
                        let limit_rank = family_rank(&limit_family, d, s.rank_tol).rank;

                        let mut steps = Vec::new();
                        'samples: for smp in &samples {
                            let mut vk = Vec::new();
                            for (&i, v) in i4.iter().zip(&vstar) {
                                match matched_vertex(&smp.pd, i, v, smp.radius) {
                                    Some(w) => vk.push(w),
                                    None => continue 'samples,
                                }
                            }
                            let mut cands = Vec::new();
                            for &b in &l {
                                match normal_candidates(&smp.pd.cones[b], &eta_blocks[b], smp.radius) {
                                    Some(c) => cands.push(c),
                                    None => continue 'samples,
                                }
                            }
                            let mut fixed = vk;
                            fixed.extend(i1.iter().map(|&i| smp.pd.grad_h[i].clone()));
                            fixed.extend(i2.iter().chain(&i5).map(|&i| smp.pd.grad_gg[i].clone()));
                            fixed.extend(i3.iter().chain(&i6).map(|&i| smp.pd.grad_hh[i].clone()));
                            for choice in one_at_a_time(&cands) {
                                let mut famk = fixed.clone();
                                for (j, &b) in l.iter().enumerate() {
                                    famk.push(embed(d, &ranges[b], &cands[j][choice[j]]));
                                }
                                let rk = family_rank(&famk, d, s.rank_tol).rank;
                                if rk == famk.len() {
                                    steps.push((
                                        smp.level,
                                        WitnessStep {
                                            radius: smp.radius,
                                            point: smp.pd.point.clone(),
                                            family: famk,
                                            rank: rk,
                                        },
                                    ));
                                    break;
                                }
                            }
                        }
                        if let Some(sequence) = collect_levels(plan, steps) {
                            report.verdict = Verdict::ViolatedWithWitness;
                            report.certificate = Some(mv);
                            report.witness = Some(RankWitness {
                                condition: "positively dependent family at x* becomes independent".into(),
                                i4: i4.clone(),
                                i5: i5.clone(),
                                i6: i6.clone(),
                                blocks: l,
                                limit_family,
                                limit_rank,
                                multipliers: Some(cert.multipliers),
                                sequence,
                            });
                            return Ok(report);
                        }
                    }
                }
            }
        }
    }
    finish_probe(&mut report, complete && !degraded, explored, pd.exact());
    report.notes.push("subgradients along sequences are paired with the nearest vertex".into());
    Ok(report)
}

fn finish_probe(report: &mut CqReport, complete: bool, explored: usize, exact: bool) {
    if !complete {
        report.verdict = Verdict::Incomplete;
        report.notes.push(format!("enumeration capped after {explored} selections"));
    }
    report.explored_fraction = Some(if complete { 1.0 } else { 0.0 });
    if !exact {
        report.notes.push("subdifferential or normal cone is an outer estimate".into());
    }
}

/// Limit choices for `η*_b`: zero first, then each chart generator.
fn limit_normal_choices(cone: &NormalConeDescription) -> Vec<Vec<f64>> {
    let q = cone.dim;
    let mut out = vec![vec![0.0; q]];
    for c in &cone.charts {
        out.extend(c.rays.iter().cloned());
        out.extend(c.lineality.iter().cloned());
    }
    crate::expr::dedup(out)
}

/// Sampled test of RCRCQ: rank of the augmented family at `x*` versus along
/// sequences with converging subgradient and normal selections.
pub fn probe_rcrcq(
    sys: &FeasibilitySystem,
    x: &[f64],
    plan: &SamplingPlan,
    s: &Settings,
) -> Result<CqReport, CqError> {
    if plan.short_circuit {
        if let Some(mut r) = short_circuit(sys, x, s, CqKind::Rcrcq)? {
            r.plan = Some(plan.clone());
            return Ok(r);
        }
    }
    let d = sys.dim();
    let star = star_data(sys, x, s)?;
    let (pd, sets) = (&star.pd, &star.sets);
    let mut report = CqReport::new(CqKind::Rcrcq, Verdict::NoViolationFound, x);
    report.index_sets = Some(sets.clone());
    report.plan = Some(plan.clone());
    let samples = sample_data(sys, x, plan, &sets.i_g, s)?;
    let ranges = sys.block_ranges();
    let blocks: Vec<usize> = (0..sys.blocks.len())
        .filter(|&b| !matches!(sys.blocks[b], CatalogSet::FullSpace { .. }))
        .collect();

    let mut budget = s.subset_cap;
    let mut explored = 0usize;
    let mut complete = true;
    'outer: for i4 in subsets(&sets.i_g, true) {
        let vsizes: Vec<usize> = i4.iter().map(|&i| pd.vertices(i).len()).collect();
        let (picks, c) = product(&vsizes, s.subset_cap);
        complete &= c;
        for i5 in subsets(&sets.j_star, false) {
            for i6 in subsets(&sets.j_star, false) {
                for l in subsets(&blocks, false) {
                    let choices: Vec<Vec<Vec<f64>>> = l.iter().map(|&b| limit_normal_choices(&pd.cones[b])).collect();
                    let (eta_picks, c) = product(&choices.iter().map(Vec::len).collect::<Vec<_>>(), s.subset_cap);
                    complete &= c;
                    for pick in &picks {
                        for ep in &eta_picks {
                            if budget == 0 {
                                complete = false;
                                break 'outer;
                            }
                            budget -= 1;
                            explored += 1;
                            let vstar: Vec<Vec<f64>> =
                                i4.iter().zip(pick).map(|(&i, &k)| pd.vertices(i)[k].clone()).collect();
                            let eta_star: Vec<Vec<f64>> =
                                choices.iter().zip(ep).map(|(c, &k)| c[k].clone()).collect();
                            let mut limit_family = vstar.clone();
                            limit_family.extend(pd.grad_h.iter().cloned());
                            limit_family.extend(sets.i_star.iter().chain(&i5).map(|&i| pd.grad_gg[i].clone()));
                            limit_family.extend(sets.k_star.iter().chain(&i6).map(|&i| pd.grad_hh[i].clone()));
                            limit_family.extend(l.iter().zip(&eta_star).map(|(&b, e)| embed(d, &ranges[b], e)));
                            let limit_rank = family_rank(&limit_family, d, s.rank_tol).rank;

                            let mut steps = Vec::new();
                            'samples: for smp in &samples {
                                let mut vk = Vec::new();
                                for (&i, v) in i4.iter().zip(&vstar) {
                                    match matched_vertex(&smp.pd, i, v, smp.radius) {
                                        Some(w) => vk.push(w),
                                        None => continue 'samples,
                                    }
                                }
                                let mut cands = Vec::new();
                                for (&b, e) in l.iter().zip(&eta_star) {
                                    match normal_candidates(&smp.pd.cones[b], e, smp.radius) {
                                        Some(c) => cands.push(c),
                                        None => continue 'samples,
                                    }
                                }
                                let mut fixed = vk;
                                fixed.extend(smp.pd.grad_h.iter().cloned());
                                fixed.extend(sets.i_star.iter().chain(&i5).map(|&i| smp.pd.grad_gg[i].clone()));
                                fixed.extend(sets.k_star.iter().chain(&i6).map(|&i| smp.pd.grad_hh[i].clone()));
                                for choice in one_at_a_time(&cands) {
                                    let mut famk = fixed.clone();
                                    for (j, &b) in l.iter().enumerate() {
                                        famk.push(embed(d, &ranges[b], &cands[j][choice[j]]));
                                    }
                                    let rk = family_rank(&famk, d, s.rank_tol).rank;
                                    if rk != limit_rank {
                                        steps.push((
                                            smp.level,
                                            WitnessStep {
                                                radius: smp.radius,
                                                point: smp.pd.point.clone(),
                                                family: famk,
                                                rank: rk,
                                            },
                                        ));
                                        break;
                                    }
                                }
                            }
                            if let Some(sequence) = collect_levels(plan, steps) {
                                report.verdict = Verdict::ViolatedWithWitness;
                                report.witness = Some(RankWitness {
                                    condition: "rank of the augmented family changes along a sequence".into(),
                                    i4: i4.clone(),
                                    i5: i5.clone(),
                                    i6: i6.clone(),
                                    blocks: l.clone(),
                                    limit_family,
                                    limit_rank,
                                    multipliers: None,
                                    sequence,
                                });
                                return Ok(report);
                            }
                        }
                    }
                }
            }
        }
    }
    finish_probe(&mut report, complete, explored, pd.exact());
    report.notes.push("subgradients along sequences are paired with the nearest vertex".into());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{Expr, Variables};

    fn single_equality() -> FeasibilitySystem {
        FeasibilitySystem::new(
            Variables::new(["x1", "x2"]),
            vec![],
            vec![Expr::var(0)],
            vec![],
            vec![],
            vec![CatalogSet::full(2)],
        )
        .unwrap()
    }

    #[test]
    fn nnamcq_single_equality_holds() {
        let r = check_nnamcq(&single_equality(), &[0.0, 0.0], &Settings::default()).unwrap();
        assert_eq!(r.verdict, Verdict::Holds);
    }

    #[test]
    fn nnamcq_opposite_inequalities_fail() {
        let x = Expr::var(0);
        let sys = FeasibilitySystem::new(
            Variables::new(["x"]),
            vec![x.clone(), -x],
            vec![],
            vec![],
            vec![],
            vec![CatalogSet::full(1)],
        )
        .unwrap();
        let r = check_nnamcq(&sys, &[0.0], &Settings::default()).unwrap();
        assert_eq!(r.verdict, Verdict::Fails);
        let c = r.certificate.unwrap();
        assert!((c.lambda_g[0] - 0.5).abs() < 1e-12 && (c.lambda_g[1] - 0.5).abs() < 1e-12);
        assert!(norm(&c.combination) < 1e-12);
    }

    #[test]
    fn fullrank_does_not_apply() {
        let r = check_fullrank(&single_equality(), &[0.0, 0.0], &Settings::default()).unwrap();
        assert_eq!(r.verdict, Verdict::NoViolationFound);
        assert_eq!(r.rank.unwrap().rank, 1);
    }

    #[test]
    fn lcq_syntactic() {
        assert_eq!(check_lcq(&single_equality()).verdict, Verdict::Holds);
        let sys = FeasibilitySystem::new(
            Variables::new(["x"]),
            vec![Expr::max2(Expr::var(0), Expr::constant(0.5))],
            vec![],
            vec![],
            vec![],
            vec![CatalogSet::full(1)],
        )
        .unwrap();
        assert_eq!(check_lcq(&sys).verdict, Verdict::Fails);
    }

    #[test]
    fn lcq_short_circuits_probes() {
        let plan = SamplingPlan::default();
        let r = probe_rcrcq(&single_equality(), &[0.0, 0.0], &plan, &Settings::default()).unwrap();
        assert_eq!(r.verdict, Verdict::NoViolationFound);
        assert!(r.notes[0].contains("LCQ"));
    }

    #[test]
    fn rank_change_detected() {
        // h = x1^2 has a vanishing gradient only at the origin.
        let x = Expr::var(0);
        let sys = FeasibilitySystem::new(
            Variables::new(["x1"]),
            vec![],
            vec![Expr::powi(x, 2)],
            vec![],
            vec![],
            vec![CatalogSet::full(1)],
        )
        .unwrap();
        let plan = SamplingPlan {
            short_circuit: false,
            ..SamplingPlan::default()
        };
        let r = probe_rcpld(&sys, &[0.0], &plan, &Settings::default()).unwrap();
        assert_eq!(r.verdict, Verdict::ViolatedWithWitness);
        let w = r.witness.unwrap();
        assert_eq!(w.limit_rank, 0);
        assert!(w.sequence.iter().all(|st| st.rank == 1));
    }

    #[test]
    fn subset_order() {
        assert_eq!(subsets(&[3, 5], true), vec![vec![3, 5], vec![3], vec![5], vec![]]);
        assert_eq!(subsets(&[3, 5], false), vec![vec![], vec![3], vec![5], vec![3, 5]]);
    }
}
