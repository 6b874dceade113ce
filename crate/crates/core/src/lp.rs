//! Dense simplex for `max cᵀx` subject to `Ax <= b`, `x >= 0`, `b >= 0`.
//!
//! The origin is feasible, so a single phase suffices. The condensed tableau
//! keeps one column per original variable; slack labels are swapped in and
//! out on pivots. Rows and columns are equilibrated by powers of two. Dantzig
//! pricing is used until a run of degenerate pivots, after which Bland's rule
//! takes over until progress resumes. The ratio test is Harris's two-pass
//! variant. At optimality the tableau is rebuilt from the original data and
//! rechecked.

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub objective: f64,
    pub x: Vec<f64>,
    /// Shadow price of each constraint row.
    pub duals: Vec<f64>,
    pub pivots: usize,
}

/// Row-major constraint matrix with `rows × cols` entries.
#[derive(Debug, Clone)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    #[inline]
    pub fn at(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

const DEGENERATE_RUN: usize = 50;
const PIVOT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-10;
const OPT_TOL: f64 = 1e-11;
const MAX_REINVERSIONS: usize = 4;

pub fn maximize(c: &[f64], a: &DenseMatrix, b: &[f64]) -> Result<LpSolution> {
    let (m, n) = (a.rows, a.cols);
    if c.len() != n || b.len() != m {
        return Err(LabError::invalid("LP dimensions disagree"));
    }
    if b.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(LabError::invalid("LP right-hand side must be finite and nonnegative"));
    }
    if c.iter().chain(a.data.iter()).any(|v| !v.is_finite()) {
        return Err(LabError::invalid("LP data must be finite"));
    }
    let (row_s, col_s) = equilibrate(a);
    let w = n + 1;
    let mut orig = vec![0.0; (m + 1) * w];
    for i in 0..m {
        for j in 0..n {
            orig[i * w + j] = a.data[i * n + j] * row_s[i] * col_s[j];
        }
        orig[i * w + n] = b[i] * row_s[i];
    }
    for j in 0..n {
        orig[m * w + j] = -c[j] * col_s[j];
    }
    let c_scale = (0..n).map(|j| orig[m * w + j].abs()).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let b_max = b.iter().cloned().fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    // feasibility slack per scaled row, uniform in the original units
    let tol: Vec<f64> = row_s.iter().map(|s| FEAS_TOL * b_max * s).collect();

    let mut t = orig.clone();
    // labels: 0..n original variables, n..n+m slacks
    let mut nonbasic: Vec<usize> = (0..n).collect();
    let mut basic: Vec<usize> = (n..n + m).collect();
    let max_pivots = 200 * (m + n) + 10_000;
    let mut pivots = 0usize;
    let mut degenerate = 0usize;
    let mut reinversions = 0usize;

    loop {
        let bland = degenerate >= DEGENERATE_RUN;
        let obj = &t[m * w..m * w + n];
        let eps = OPT_TOL * c_scale;
        let mut q = None;
        if bland {
            let mut best_label = usize::MAX;
            for j in 0..n {
                if obj[j] < -eps && nonbasic[j] < best_label {
                    best_label = nonbasic[j];
                    q = Some(j);
                }
            }
        } else {
            let mut best = -eps;
            for j in 0..n {
                if obj[j] < best {
                    best = obj[j];
                    q = Some(j);
                }
            }
        }
        let Some(q) = q else {
            if reinversions < MAX_REINVERSIONS {
                reinversions += 1;
                t = reinvert(&orig, m, n, &mut basic, &mut nonbasic)?;
                let feasible = (0..m).all(|i| t[i * w + n] >= -tol[i]);
                let optimal = (0..n).all(|j| t[m * w + j] >= -eps);
                if feasible && optimal {
                    break;
                }
                for i in 0..m {
                    let v = &mut t[i * w + n];
                    *v = v.max(0.0);
                }
                continue;
            }
            break;
        };

        // Harris ratio test: bound the step with relaxed right-hand sides,
        // then take the largest pivot among rows within that bound.
        let col_max = (0..m).map(|i| t[i * w + q]).fold(0.0f64, f64::max);
        let ptol = PIVOT_TOL * col_max.max(1.0);
        let mut bound = f64::INFINITY;
        for i in 0..m {
            let aiq = t[i * w + q];
            if aiq > ptol {
                bound = bound.min((t[i * w + n].max(0.0) + tol[i]) / aiq);
            }
        }
        if bound == f64::INFINITY {
            return Err(LabError::Unbounded(format!("variable {} can grow without bound", nonbasic[q])));
        }
        let mut p: Option<usize> = None;
        for i in 0..m {
            let aiq = t[i * w + q];
            if aiq > ptol && t[i * w + n].max(0.0) / aiq <= bound {
                let better = match p {
                    None => true,
                    Some(pi) => {
                        let ap = t[pi * w + q];
                        aiq > ap || (aiq == ap && basic[i] < basic[pi])
                    }
                };
                if better {
                    p = Some(i);
                }
            }
        }
        let p = p.expect("a row attains the Harris bound");
        if t[p * w + n].max(0.0) <= tol[p] {
            degenerate += 1;
        } else {
            degenerate = 0;
        }
        pivot(&mut t, m + 1, w, p, q);
        std::mem::swap(&mut basic[p], &mut nonbasic[q]);
        pivots += 1;
        if pivots > max_pivots {
            return Err(LabError::Numerical("simplex exceeded its pivot budget".into()));
        }
    }

    let mut x = vec![0.0; n];
    for i in 0..m {
        if basic[i] < n {
            x[basic[i]] = t[i * w + n].max(0.0) * col_s[basic[i]];
        }
    }
    let mut duals = vec![0.0; m];
    for j in 0..n {
        if nonbasic[j] >= n {
            let r = nonbasic[j] - n;
            duals[r] = t[m * w + j].max(0.0) * row_s[r];
        }
    }
    let objective = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
    Ok(LpSolution { objective, x, duals, pivots })
}

/// Row and column scale factors that bring every row and column maximum of
/// `R A S` close to one.
fn equilibrate(a: &DenseMatrix) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = (a.rows, a.cols);
    let mut row_s = vec![1.0; m];
    let mut col_s = vec![1.0; n];
    for _ in 0..4 {
        for i in 0..m {
            let mx = (0..n).map(|j| (a.data[i * n + j] * col_s[j]).abs()).fold(0.0f64, f64::max);
            row_s[i] = if mx > 0.0 { pow2(1.0 / mx) } else { 1.0 };
        }
        for j in 0..n {
            let mx = (0..m).map(|i| (a.data[i * n + j] * row_s[i]).abs()).fold(0.0f64, f64::max);
            col_s[j] = if mx > 0.0 { pow2(1.0 / mx) } else { 1.0 };
        }
    }
    (row_s, col_s)
}

/// Nearest power of two, so scaling is exact in floating point.
fn pow2(v: f64) -> f64 {
    2f64.powi(v.log2().round() as i32)
}

/// Rebuilds the tableau of the current basis from the original data by
/// Gauss-Jordan elimination with partial pivoting within the basis.
fn reinvert(orig: &[f64], m: usize, n: usize, basic: &mut [usize], nonbasic: &mut [usize]) -> Result<Vec<f64>> {
    let w = n + 1;
    let structural: Vec<usize> = basic.iter().copied().filter(|&l| l < n).collect();
    let tight: Vec<bool> = {
        let mut v = vec![false; m];
        for &l in nonbasic.iter() {
            if l >= n {
                v[l - n] = true;
            }
        }
        v
    };
    let mut t = orig.to_vec();
    let mut nb: Vec<usize> = (0..n).collect();
    let mut bs: Vec<usize> = (n..n + m).collect();
    for &j in &structural {
        let q = nb.iter().position(|&l| l == j).expect("structural label is nonbasic before its pivot");
        let mut best: Option<(usize, f64)> = None;
        for i in 0..m {
            if bs[i] >= n && tight[bs[i] - n] {
                let v = t[i * w + q].abs();
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
        }
        match best {
            Some((p, v)) if v > 0.0 => {
                pivot(&mut t, m + 1, w, p, q);
                std::mem::swap(&mut bs[p], &mut nb[q]);
            }
            _ => return Err(LabError::Numerical("simplex basis became singular".into())),
        }
    }
    basic.copy_from_slice(&bs);
    nonbasic.copy_from_slice(&nb);
    Ok(t)
}

fn pivot(t: &mut [f64], rows: usize, w: usize, p: usize, q: usize) {
    let piv = t[p * w + q];
    let inv = 1.0 / piv;
    let prow: Vec<f64> = t[p * w..(p + 1) * w].iter().map(|v| v * inv).collect();
    for i in 0..rows {
        if i == p {
            continue;
        }
        let f = t[i * w + q];
        if f == 0.0 {
            continue;
        }
        let row = &mut t[i * w..(i + 1) * w];
        for (j, v) in row.iter_mut().enumerate() {
            if j != q {
                *v -= f * prow[j];
            }
        }
        row[q] = -f * inv;
    }
    let row = &mut t[p * w..(p + 1) * w];
    row.copy_from_slice(&prow);
    row[q] = inv;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> DenseMatrix {
        let cols = rows[0].len();
        DenseMatrix { rows: rows.len(), cols, data: rows.iter().flat_map(|r| r.iter().copied()).collect() }
    }

    #[test]
    fn textbook_problem() {
        // max 3x + 5y, x <= 4, 2y <= 12, 3x + 2y <= 18  ->  36 at (2, 6)
        let a = mat(&[&[1.0, 0.0], &[0.0, 2.0], &[3.0, 2.0]]);
        let s = maximize(&[3.0, 5.0], &a, &[4.0, 12.0, 18.0]).unwrap();
        assert!((s.objective - 36.0).abs() < 1e-9);
        assert!((s.x[0] - 2.0).abs() < 1e-9 && (s.x[1] - 6.0).abs() < 1e-9);
        // duals (0, 1.5, 1) reproduce the objective
        let dual_obj: f64 = s.duals.iter().zip(&[4.0, 12.0, 18.0]).map(|(y, b)| y * b).sum();
        assert!((dual_obj - 36.0).abs() < 1e-9);
    }

    #[test]
    fn unbounded_is_reported() {
        let a = mat(&[&[1.0, -1.0]]);
        assert!(matches!(maximize(&[0.0, 1.0], &a, &[1.0]), Err(LabError::Unbounded(_))));
    }

    #[test]
    fn degenerate_problem_terminates() {
        // classic cycling example under pure Dantzig pricing
        let a = mat(&[&[0.5, -5.5, -2.5, 9.0], &[0.5, -1.5, -0.5, 1.0], &[1.0, 0.0, 0.0, 0.0]]);
        let s = maximize(&[10.0, -57.0, -9.0, -24.0], &a, &[0.0, 0.0, 1.0]).unwrap();
        assert!((s.objective - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_negative_rhs() {
        let a = mat(&[&[1.0]]);
        assert!(maximize(&[1.0], &a, &[-1.0]).is_err());
    }

    #[test]
    fn ill_conditioned_kernel_certificate() {
        // Gaussian kernel between two offset grids: entries span many decades.
        let (m, k) = (120, 90);
        let mut a = DenseMatrix::zeros(m, k);
        for i in 0..m {
            for j in 0..k {
                let d = i as f64 / m as f64 - (j as f64 + 0.5) / k as f64;
                *a.at(i, j) = 40.0 * (-d * d * 900.0).exp();
            }
        }
        let sol = maximize(&vec![1.0; k], &a, &vec![1.0; m]).unwrap();
        for i in 0..m {
            let row: f64 = (0..k).map(|j| a.get(i, j) * sol.x[j]).sum();
            assert!(row <= 1.0 + 1e-9, "row {i}: {row}");
        }
        for j in 0..k {
            let col: f64 = (0..m).map(|i| a.get(i, j) * sol.duals[i]).sum();
            assert!(col >= 1.0 - 1e-9, "column {j}: {col}");
        }
        let dual_obj: f64 = sol.duals.iter().sum();
        assert!((sol.objective - dual_obj).abs() <= 1e-9 * sol.objective);
    }

    #[test]
    fn tiny_row_does_not_loosen_other_rows() {
        let a = mat(&[&[6e-11], &[0.4], &[1.6]]);
        let sol = maximize(&[1.0], &a, &[1.0, 1.0, 1.0]).unwrap();
        assert!((sol.objective - 1.0 / 1.6).abs() < 1e-12, "{}", sol.objective);
    }
}
