//! Dense phase-one simplex for `{x ≥ 0 : A x = b}`.

use nalgebra::{DMatrix, DVector};

const PIVOT_EPS: f64 = 1e-10;

/// Returns a basic feasible point of `{x ≥ 0 : A x = b}` or `None` when the
/// phase-one optimum is positive.
pub fn phase_one(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let (m, n) = a.shape();
    assert_eq!(b.len(), m, "rhs length must match rows");
    if m == 0 {
        return Some(DVector::zeros(n));
    }
    // Row scaling and sign normalization so that the rhs is nonnegative.
    let mut rows = Vec::with_capacity(m);
    let mut rhs = Vec::with_capacity(m);
    for i in 0..m {
        let mut r: Vec<f64> = a.row(i).iter().copied().collect();
        let mut bi = b[i];
        let s = r.iter().fold(bi.abs(), |acc, x| acc.max(x.abs()));
        if s > 0.0 {
            r.iter_mut().for_each(|x| *x /= s);
            bi /= s;
        }
        if bi < 0.0 {
            r.iter_mut().for_each(|x| *x = -*x);
            bi = -bi;
        }
        rows.push(r);
        rhs.push(bi);
    }

    let width = n + m + 1;
    let mut t = vec![vec![0.0; width]; m + 1];
    for i in 0..m {
        t[i][..n].copy_from_slice(&rows[i]);
        t[i][n + i] = 1.0;
        t[i][width - 1] = rhs[i];
    }
    // Reduced costs for minimizing the sum of artificials.
    for j in 0..n {
        t[m][j] = -(0..m).map(|i| t[i][j]).sum::<f64>();
    }
    t[m][width - 1] = -rhs.iter().sum::<f64>();
    let mut basis: Vec<usize> = (n..n + m).collect();

    let max_iter = 50 * (n + m) + 100;
    for _ in 0..max_iter {
        // Bland's rule: lowest index with negative reduced cost.
        let entering = (0..n + m).find(|&j| t[m][j] < -PIVOT_EPS);
        let Some(j) = entering else { break };
        let mut leave: Option<usize> = None;
        let mut best = f64::INFINITY;
        for i in 0..m {
            if t[i][j] > PIVOT_EPS {
                let ratio = t[i][width - 1] / t[i][j];
                let better = ratio < best - 1e-14
                    || ((ratio - best).abs() <= 1e-14
                        && leave.is_none_or(|l| basis[i] < basis[l]));
                if better {
                    best = ratio;
                    leave = Some(i);
                }
            }
        }
        let Some(r) = leave else { break };
        pivot(&mut t, r, j);
        basis[r] = j;
    }

    let infeasibility = -t[m][width - 1];
    let scale = 1.0 + rhs.iter().fold(0.0f64, |s, x| s.max(x.abs()));
    if infeasibility > 1e-9 * scale {
        return None;
    }
    let mut x = DVector::zeros(n);
    for (i, &bi) in basis.iter().enumerate() {
        if bi < n {
            x[bi] = t[i][width - 1].max(0.0);
        }
    }
    Some(polish(a, b, &basis, n, x))
}

fn pivot(t: &mut [Vec<f64>], r: usize, j: usize) {
    let p = t[r][j];
    t[r].iter_mut().for_each(|v| *v /= p);
    let pivot_row = t[r].clone();
    for (i, row) in t.iter_mut().enumerate() {
        if i != r {
            let f = row[j];
            if f != 0.0 {
                row.iter_mut().zip(&pivot_row).for_each(|(v, pr)| *v -= f * pr);
            }
        }
    }
}

/// Re-solves the basic columns directly to remove tableau round-off.
fn polish(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    basis: &[usize],
    n: usize,
    x: DVector<f64>,
) -> DVector<f64> {
    let cols: Vec<usize> = basis.iter().copied().filter(|&j| j < n).collect();
    if cols.is_empty() {
        return x;
    }
    let sub = a.select_columns(cols.iter());
    let svd = sub.clone().svd(true, true);
    let Ok(sol) = svd.solve(b, 1e-13) else { return x };
    if sol.iter().any(|v| *v < -1e-12) {
        return x;
    }
    let mut y = DVector::zeros(n);
    for (k, &j) in cols.iter().enumerate() {
        y[j] = sol[k].max(0.0);
    }
    let ry = (a * &y - b).norm();
    let rx = (a * &x - b).norm();
    if ry <= rx {
        y
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_feasible() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0]);
        let x = phase_one(&a, &b).unwrap();
        assert!((x.sum() - 1.0).abs() < 1e-12);
        assert!(x.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn simple_infeasible() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_vec(vec![-1.0]);
        assert!(phase_one(&a, &b).is_none());
    }

    #[test]
    fn negative_rhs_rows() {
        // x0 - x1 = -2, x0 + x1 = 4 -> x = (1, 3)
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![-2.0, 4.0]);
        let x = phase_one(&a, &b).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_redundant_rows() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 1.0]);
        let x = phase_one(&a, &b).unwrap();
        assert!((a * &x - b).norm() < 1e-12);
    }
}
