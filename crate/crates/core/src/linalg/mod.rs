//! Numerical rank, basis selection, sign-preserving Carathéodory reduction,
//! cone projection and positive-dependence certificates.

pub mod lp;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("vector is not in the span required by the decomposition (residual {residual:.3e})")]
    InconsistentDecomposition { residual: f64 },
    #[error("coefficient {index} of the extras is zero")]
    ZeroCoefficient { index: usize },
    #[error("{pairs} branch-paired entries exceed the branch cap {cap}")]
    BranchExplosion { pairs: usize, cap: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankReport {
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub tol: f64,
}

/// Builds a matrix whose rows are `rows`; `ncols` fixes the width when
/// `rows` is empty.
pub fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows.len(), ncols);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), ncols, "row {i} has the wrong length");
        for (j, v) in r.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    m
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return vec![];
    }
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

/// Rank as the count of singular values above `tol` times the largest one.
pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> RankReport {
    let s = singular_values(m);
    let top = s.first().copied().unwrap_or(0.0);
    let rank = if top == 0.0 {
        0
    } else {
        s.iter().filter(|&&v| v > tol * top).count()
    };
    RankReport {
        rank,
        singular_values: s,
        tol,
    }
}

/// Rank of a family of vectors of common length `dim`.
pub fn family_rank(vectors: &[Vec<f64>], dim: usize, tol: f64) -> RankReport {
    numerical_rank(&matrix_from_rows(vectors, dim), tol)
}

/// Greedy selection of an independent spanning subfamily, lowest index first.
pub fn select_basis(vectors: &[Vec<f64>], tol: f64) -> Vec<usize> {
    let Some(dim) = vectors.first().map(Vec::len) else {
        return vec![];
    };
    let top = singular_values(&matrix_from_rows(vectors, dim))
        .first()
        .copied()
        .unwrap_or(0.0);
    if top == 0.0 {
        return vec![];
    }
    let mut chosen: Vec<usize> = Vec::new();
    for i in 0..vectors.len() {
        let mut trial: Vec<Vec<f64>> = chosen.iter().map(|&j| vectors[j].clone()).collect();
        trial.push(vectors[i].clone());
        let s = singular_values(&matrix_from_rows(&trial, dim));
        if s.len() == trial.len() && s.last().copied().unwrap_or(0.0) > tol * top {
            chosen.push(i);
        }
    }
    chosen
}

/// Null-space basis of `m` (vectors `z` with `m z ≈ 0`).
pub fn null_space(m: &DMatrix<f64>, tol: f64) -> Vec<DVector<f64>> {
    let (r, c) = m.shape();
    if c == 0 {
        return vec![];
    }
    let padded = if r < c {
        let mut p = DMatrix::zeros(c, c);
        p.view_mut((0, 0), (r, c)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let top = svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut out = Vec::new();
    for (k, s) in svd.singular_values.iter().enumerate() {
        if top == 0.0 || *s <= tol * top {
            out.push(v_t.row(k).transpose());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaratheodoryResult {
    /// Retained indices into `extras`.
    pub kept: Vec<usize>,
    pub base_coefficients: Vec<f64>,
    /// Coefficients aligned with `kept`.
    pub extra_coefficients: Vec<f64>,
}

/// Sign-preserving reduction of `v = Σ β base + Σ α extras` to an
/// independent family (lowest index dropped on ties).
pub fn caratheodory_reduce(
    v: &[f64],
    base: &[Vec<f64>],
    extras: &[Vec<f64>],
    alphas: &[f64],
    tol: f64,
) -> Result<CaratheodoryResult, LinalgError> {
    let d = v.len();
    if extras.len() != alphas.len() {
        return Err(LinalgError::Dimension("extras and alphas differ in length".into()));
    }
    if let Some(i) = alphas.iter().position(|a| *a == 0.0) {
        return Err(LinalgError::ZeroCoefficient { index: i });
    }
    // Base coefficients from the residual after removing extras.
    let mut target = DVector::from_column_slice(v);
    for (e, a) in extras.iter().zip(alphas) {
        target -= DVector::from_column_slice(e) * *a;
    }
    let mut beta = vec![0.0; base.len()];
    let scale = 1.0 + v.iter().map(|x| x.abs()).fold(0.0, f64::max);
    if base.is_empty() {
        if target.norm() > 1e-9 * scale {
            return Err(LinalgError::InconsistentDecomposition {
                residual: target.norm(),
            });
        }
    } else {
        let b = matrix_from_rows(base, d).transpose();
        let sol = b
            .clone()
            .svd(true, true)
            .solve(&target, 1e-14)
            .map_err(|e| LinalgError::Dimension(e.to_string()))?;
        let residual = (&b * &sol - &target).norm();
        if residual > 1e-9 * scale {
            return Err(LinalgError::InconsistentDecomposition { residual });
        }
        beta = sol.iter().copied().collect();
    }

    let mut kept: Vec<usize> = (0..extras.len()).collect();
    let mut coef: Vec<f64> = alphas.to_vec();
    let coef_scale = alphas.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    loop {
        let mut cols: Vec<Vec<f64>> = base.to_vec();
        cols.extend(kept.iter().map(|&i| extras[i].clone()));
        let total = cols.len();
        if total == 0 {
            break;
        }
        let m = matrix_from_rows(&cols, d).transpose();
        if numerical_rank(&m, tol).rank == total {
            break;
        }
        let nulls = null_space(&m, tol);
        // Pick a null direction that moves some extra coefficient.
        let z = nulls
            .into_iter()
            .rev()
            .find(|z| (base.len()..total).any(|k| z[k].abs() > 1e-12))
            .ok_or_else(|| LinalgError::Dimension("base family is dependent".into()))?;
        let mut step = f64::INFINITY;
        let mut drop_pos = usize::MAX;
        for (pos, &c) in coef.iter().enumerate() {
            let zk = z[base.len() + pos];
            if zk.abs() > 1e-12 {
                let t = c / zk;
                if t.abs() < step.abs() - 1e-15 || drop_pos == usize::MAX {
                    step = t;
                    drop_pos = pos;
                }
            }
        }
        for (k, b) in beta.iter_mut().enumerate() {
            *b -= step * z[k];
        }
        for (pos, c) in coef.iter_mut().enumerate() {
            *c -= step * z[base.len() + pos];
        }
        coef[drop_pos] = 0.0;
        let mut next_kept = Vec::new();
        let mut next_coef = Vec::new();
        for (pos, &i) in kept.iter().enumerate() {
            if coef[pos].abs() > 1e-14 * coef_scale.max(1.0) {
                next_kept.push(i);
                next_coef.push(coef[pos]);
            }
        }
        kept = next_kept;
        coef = next_coef;
    }
    Ok(CaratheodoryResult {
        kept,
        base_coefficients: beta,
        extra_coefficients: coef,
    })
}

/// Nonnegative least squares `min ‖E μ − v‖, μ ≥ 0` (Lawson–Hanson);
/// columns of `e` are the generators.
pub fn nnls(e: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let n = e.ncols();
    let mut x = DVector::zeros(n);
    if n == 0 {
        return x;
    }
    let mut passive = vec![false; n];
    let tol = 1e-12 * (1.0 + e.norm() * v.norm());
    for _ in 0..(3 * n + 10) {
        let w = e.transpose() * (v - e * &x);
        let cand = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&a, &b| w[a].partial_cmp(&w[b]).unwrap());
        let Some(t) = cand else { break };
        passive[t] = true;
        for _ in 0..(3 * n + 10) {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let sub = e.select_columns(idx.iter());
            let s_p = sub
                .svd(true, true)
                .solve(v, 1e-14)
                .unwrap_or_else(|_| DVector::zeros(idx.len()));
            if s_p.iter().all(|&s| s > 0.0) {
                x.fill(0.0);
                for (k, &j) in idx.iter().enumerate() {
                    x[j] = s_p[k];
                }
                break;
            }
            let mut alpha = 1.0f64;
            for (k, &j) in idx.iter().enumerate() {
                if s_p[k] <= 0.0 {
                    let denom = x[j] - s_p[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    }
                }
            }
            for (k, &j) in idx.iter().enumerate() {
                x[j] += alpha * (s_p[k] - x[j]);
                if x[j] <= 1e-15 {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    x
}

/// Orthonormal basis for the span of `vectors`.
pub fn orthonormal_basis(vectors: &[Vec<f64>], tol: f64) -> Vec<DVector<f64>> {
    let mut q: Vec<DVector<f64>> = Vec::new();
    let top = vectors
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    for v in vectors {
        let mut r = DVector::from_column_slice(v);
        for _ in 0..2 {
            for b in &q {
                let c = b.dot(&r);
                r -= b * c;
            }
        }
        let n = r.norm();
        if n > tol.max(1e-12) * top.max(1e-300) && n > 0.0 {
            q.push(r / n);
        }
    }
    q
}

/// Euclidean projection of `v` onto `cone(rays) + span(lineality)`.
/// Returns the projected point and its distance from `v`.
pub fn project_onto_cone(rays: &[Vec<f64>], lineality: &[Vec<f64>], v: &[f64]) -> (Vec<f64>, f64) {
    let d = v.len();
    let q = orthonormal_basis(lineality, 1e-12);
    let perp = |x: &[f64]| {
        let mut r = DVector::from_column_slice(x);
        for b in &q {
            let c = b.dot(&r);
            r -= b * c;
        }
        r
    };
    let vv = DVector::from_column_slice(v);
    let v_perp = perp(v);
    let lin_part = &vv - &v_perp;
    let mut e = DMatrix::zeros(d, rays.len());
    for (j, r) in rays.iter().enumerate() {
        e.set_column(j, &perp(r));
    }
    let mu = nnls(&e, &v_perp);
    let cone_part = &e * &mu;
    let proj = lin_part + &cone_part;
    let dist = (&v_perp - &cone_part).norm();
    (proj.iter().copied().collect(), dist)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PairSide {
    G,
    H,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SignConstraint {
    Free,
    Nonneg,
    /// One side of a biactive complementarity pair: either both multipliers
    /// of the pair are positive or their product vanishes.
    Paired { pair: usize, side: PairSide },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum JBranch {
    BothPositive,
    GZero,
    HZero,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DependenceCertificate {
    pub multipliers: Vec<f64>,
    pub signs: Vec<SignConstraint>,
    /// Branch chosen for each pair id, in increasing id order.
    pub branches: Vec<(usize, JBranch)>,
    pub residual: f64,
}

fn pair_ids(signs: &[SignConstraint]) -> Vec<usize> {
    let mut ids: Vec<usize> = signs
        .iter()
        .filter_map(|s| match s {
            SignConstraint::Paired { pair, .. } => Some(*pair),
            _ => None,
        })
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Per-entry restriction once a branch is fixed for every pair.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Effective {
    Free,
    Nonneg,
    Zero,
}

fn effective(signs: &[SignConstraint], ids: &[usize], branch: &[JBranch]) -> Vec<Effective> {
    signs
        .iter()
        .map(|s| match s {
            SignConstraint::Free => Effective::Free,
            SignConstraint::Nonneg => Effective::Nonneg,
            SignConstraint::Paired { pair, side } => {
                let k = ids.binary_search(pair).expect("pair id");
                match (branch[k], side) {
                    (JBranch::BothPositive, _) => Effective::Nonneg,
                    (JBranch::GZero, PairSide::G) | (JBranch::HZero, PairSide::H) => Effective::Zero,
                    _ => Effective::Free,
                }
            }
        })
        .collect()
}

/// Nonzero `λ` with `Σ λ_i v_i = 0` under fixed per-entry restrictions.
fn solve_branch(vectors: &[Vec<f64>], eff: &[Effective], dim: usize) -> Option<Vec<f64>> {
    let free: Vec<usize> = (0..eff.len()).filter(|&i| eff[i] == Effective::Free).collect();
    let nonneg: Vec<usize> = (0..eff.len()).filter(|&i| eff[i] == Effective::Nonneg).collect();
    let mut lambda = vec![0.0; vectors.len()];

    if !free.is_empty() {
        let vf: Vec<Vec<f64>> = free.iter().map(|&i| vectors[i].clone()).collect();
        let m = matrix_from_rows(&vf, dim).transpose();
        if numerical_rank(&m, 1e-10).rank < free.len() {
            let z = null_space(&m, 1e-10).pop()?;
            for (k, &i) in free.iter().enumerate() {
                lambda[i] = z[k];
            }
            return Some(lambda);
        }
    }
    if nonneg.is_empty() {
        return None;
    }
    // Columns: nonneg block, free positive parts, free negative parts.
    let cols = nonneg.len() + 2 * free.len();
    let mut a = DMatrix::zeros(dim + 1, cols);
    for (k, &i) in nonneg.iter().enumerate() {
        for r in 0..dim {
            a[(r, k)] = vectors[i][r];
        }
        a[(dim, k)] = 1.0;
    }
    for (k, &i) in free.iter().enumerate() {
        for r in 0..dim {
            a[(r, nonneg.len() + k)] = vectors[i][r];
            a[(r, nonneg.len() + free.len() + k)] = -vectors[i][r];
        }
    }
    let mut b = DVector::zeros(dim + 1);
    b[dim] = 1.0;
    let x = lp::phase_one(&a, &b)?;
    for (k, &i) in nonneg.iter().enumerate() {
        lambda[i] = x[k];
    }
    for (k, &i) in free.iter().enumerate() {
        lambda[i] = x[nonneg.len() + k] - x[nonneg.len() + free.len() + k];
    }
    Some(lambda)
}

fn finish(
    vectors: &[Vec<f64>],
    signs: &[SignConstraint],
    ids: &[usize],
    branch: &[JBranch],
    mut lambda: Vec<f64>,
    dim: usize,
) -> Option<DependenceCertificate> {
    let l1: f64 = lambda.iter().map(|x| x.abs()).sum();
    if l1 == 0.0 {
        return None;
    }
    lambda.iter_mut().for_each(|x| *x /= l1);
    let mut r = vec![0.0; dim];
    for (l, v) in lambda.iter().zip(vectors) {
        for k in 0..dim {
            r[k] += l * v[k];
        }
    }
    let residual = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = vectors
        .iter()
        .map(|v| v.iter().map(|x| x.abs()).fold(0.0, f64::max))
        .fold(1.0, f64::max);
    if residual > 1e-8 * scale {
        return None;
    }
    Some(DependenceCertificate {
        multipliers: lambda,
        signs: signs.to_vec(),
        branches: ids.iter().copied().zip(branch.iter().copied()).collect(),
        residual,
    })
}

fn check_dims(vectors: &[Vec<f64>], signs: &[SignConstraint]) -> Result<usize, LinalgError> {
    if vectors.len() != signs.len() {
        return Err(LinalgError::Dimension("one sign per vector required".into()));
    }
    let dim = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(LinalgError::Dimension("vectors differ in length".into()));
    }
    Ok(dim)
}

/// Searches for a nonzero sign-feasible `λ` with `Σ λ_i v_i = 0`, enumerating
/// the three branches of every pair. Multipliers are normalized to unit l1 norm.
pub fn positive_dependence_certificate(
    vectors: &[Vec<f64>],
    signs: &[SignConstraint],
    branch_cap: usize,
) -> Result<Option<DependenceCertificate>, LinalgError> {
    let dim = check_dims(vectors, signs)?;
    let ids = pair_ids(signs);
    let count = 3usize.checked_pow(ids.len() as u32).unwrap_or(usize::MAX);
    if count > branch_cap {
        return Err(LinalgError::BranchExplosion {
            pairs: ids.len(),
            cap: branch_cap,
        });
    }
    const ORDER: [JBranch; 3] = [JBranch::BothPositive, JBranch::GZero, JBranch::HZero];
    for code in 0..count {
        let mut c = code;
        let branch: Vec<JBranch> = (0..ids.len())
            .map(|_| {
                let b = ORDER[c % 3];
                c /= 3;
                b
            })
            .collect();
        let eff = effective(signs, &ids, &branch);
        if let Some(l) = solve_branch(vectors, &eff, dim) {
            if let Some(cert) = finish(vectors, signs, &ids, &branch, l, dim) {
                return Ok(Some(cert));
            }
        }
    }
    Ok(None)
}

/// Reduced search used past the branch cap: only the uniform branch
/// assignments (all both-positive, all `λ^G = 0`, all `λ^H = 0`).
pub fn positive_dependence_certificate_degraded(
    vectors: &[Vec<f64>],
    signs: &[SignConstraint],
) -> Result<Option<DependenceCertificate>, LinalgError> {
    let dim = check_dims(vectors, signs)?;
    let ids = pair_ids(signs);
    for b in [JBranch::GZero, JBranch::HZero, JBranch::BothPositive] {
        let branch = vec![b; ids.len()];
        let eff = effective(signs, &ids, &branch);
        if let Some(l) = solve_branch(vectors, &eff, dim) {
            if let Some(cert) = finish(vectors, signs, &ids, &branch, l, dim) {
                return Ok(Some(cert));
            }
        }
    }
    Ok(None)
}

/// Checks the sign pattern of a certificate, including the pair disjunction.
pub fn certificate_signs_ok(cert: &DependenceCertificate, tol: f64) -> bool {
    for (l, s) in cert.multipliers.iter().zip(&cert.signs) {
        if *s == SignConstraint::Nonneg && *l < -tol {
            return false;
        }
    }
    for &(id, _) in &cert.branches {
        let side = |want: PairSide| {
            cert.signs
                .iter()
                .zip(&cert.multipliers)
                .filter(|(s, _)| matches!(s, SignConstraint::Paired { pair, side } if *pair == id && *side == want))
                .map(|(_, l)| *l)
                .sum::<f64>()
        };
        let (g, h) = (side(PairSide::G), side(PairSide::H));
        let both_pos = g >= -tol && h >= -tol;
        let product_zero = g.abs() <= tol || h.abs() <= tol;
        if !(both_pos || product_zero) {
            return false;
        }
    }
    true
}

/// A signed representation of `target`: multipliers with `Σ λ_i v_i = target`
/// respecting `signs`, trying pair branches in the same order as
/// [`positive_dependence_certificate`].
pub fn signed_solution(
    vectors: &[Vec<f64>],
    signs: &[SignConstraint],
    target: &[f64],
    branch_cap: usize,
) -> Result<Option<(Vec<f64>, Vec<(usize, JBranch)>)>, LinalgError> {
    check_dims(vectors, signs)?;
    let dim = target.len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(LinalgError::Dimension("target length differs from vectors".into()));
    }
    let ids = pair_ids(signs);
    let count = 3usize.checked_pow(ids.len() as u32).unwrap_or(usize::MAX);
    if count > branch_cap {
        return Err(LinalgError::BranchExplosion {
            pairs: ids.len(),
            cap: branch_cap,
        });
    }
    const ORDER: [JBranch; 3] = [JBranch::BothPositive, JBranch::GZero, JBranch::HZero];
    let scale = target
        .iter()
        .chain(vectors.iter().flatten())
        .fold(1.0f64, |m, x| m.max(x.abs()));
    for code in 0..count {
        let mut c = code;
        let branch: Vec<JBranch> = (0..ids.len())
            .map(|_| {
                let b = ORDER[c % 3];
                c /= 3;
                b
            })
            .collect();
        let eff = effective(signs, &ids, &branch);
        let active: Vec<usize> = (0..eff.len()).filter(|&i| eff[i] != Effective::Zero).collect();
        let cols = active.len() + active.iter().filter(|&&i| eff[i] == Effective::Free).count();
        let mut a = DMatrix::zeros(dim, cols);
        let mut col_of = Vec::with_capacity(active.len());
        let mut next = 0;
        for &i in &active {
            for r in 0..dim {
                a[(r, next)] = vectors[i][r];
            }
            let pos = next;
            next += 1;
            let negc = if eff[i] == Effective::Free {
                for r in 0..dim {
                    a[(r, next)] = -vectors[i][r];
                }
                next += 1;
                Some(next - 1)
            } else {
                None
            };
            col_of.push((i, pos, negc));
        }
        let Some(x) = lp::phase_one(&a, &DVector::from_column_slice(target)) else {
            continue;
        };
        let mut lambda = vec![0.0; vectors.len()];
        for (i, pos, negc) in col_of {
            lambda[i] = x[pos] - negc.map_or(0.0, |k| x[k]);
        }
        let mut r = target.to_vec();
        for (l, v) in lambda.iter().zip(vectors) {
            for k in 0..dim {
                r[k] -= l * v[k];
            }
        }
        if r.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1e-8 * scale {
            return Ok(Some((lambda, ids.iter().copied().zip(branch).collect())));
        }
    }
    Ok(None)
}
