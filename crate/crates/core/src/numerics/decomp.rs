//! Jacobi SVD, symmetric eigendecomposition, Cholesky and ridge solves.

use super::{Matrix, NumericsError};

pub const SVD_MAX_SWEEPS: usize = 10_000;
pub const SVD_TOL: f64 = 1e-12;

/// Thin SVD `m = U diag(S) Vᵀ` with `k = min(rows, cols)` singular triplets.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        self.truncated(self.s.len())
    }

    /// Rank-`r` truncation `Σ_{k<r} s_k u_k v_kᵀ`.
    pub fn truncated(&self, r: usize) -> Matrix {
        let r = r.min(self.s.len());
        let mut us = Matrix::zeros(self.u.rows(), r);
        for i in 0..self.u.rows() {
            for k in 0..r {
                us[(i, k)] = self.u[(i, k)] * self.s[k];
            }
        }
        let vr = self.v.col_block(0, r);
        us.matmul_nt(&vr)
    }
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Singular values come out sorted non-increasing; each left singular vector
/// is signed so that its largest-magnitude entry is positive.
pub fn svd(m: &Matrix) -> Result<SvdResult, NumericsError> {
    if !m.is_finite() {
        return Err(NumericsError::NonFinite("svd input"));
    }
    if m.rows() < m.cols() {
        let t = svd(&m.transpose())?;
        let mut out = SvdResult { u: t.v, s: t.s, v: t.u };
        canonical_signs(&mut out);
        return Ok(out);
    }
    let (rows, cols) = m.shape();
    // Work on columns: store Aᵀ so each column is a contiguous row.
    let mut at = m.transpose();
    let mut vt = Matrix::identity(cols);
    let mut converged = cols < 2;
    for _sweep in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..cols.saturating_sub(1) {
            for q in p + 1..cols {
                let (alpha, beta, gamma) = {
                    let up = at.row(p);
                    let uq = at.row(q);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for i in 0..rows {
                        a += up[i] * up[i];
                        b += uq[i] * uq[i];
                        g += up[i] * uq[i];
                    }
                    (a, b, g)
                };
                if gamma == 0.0 || gamma.abs() <= SVD_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut at, p, q, c, s);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(NumericsError::NoConvergence { rows, cols, sweeps: SVD_MAX_SWEEPS });
    }

    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = (0..cols).map(|j| at.row(j).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let smax = norms.iter().cloned().fold(0.0, f64::max);
    let mut u = Matrix::zeros(rows, cols);
    let mut v = Matrix::zeros(cols, cols);
    let mut s = Vec::with_capacity(cols);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let nrm = norms[j];
        s.push(nrm);
        for i in 0..cols {
            v[(i, k)] = vt[(j, i)];
        }
        if nrm > 0.0 && nrm > smax * f64::EPSILON * rows as f64 {
            for i in 0..rows {
                u[(i, k)] = at[(j, i)] / nrm;
            }
        } else {
            missing.push(k);
        }
    }
    complete_basis(&mut u, &missing);
    let mut out = SvdResult { u, s, v };
    canonical_signs(&mut out);
    Ok(out)
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    let (lo, hi) = data.split_at_mut(q * cols);
    let rp = &mut lo[p * cols..(p + 1) * cols];
    let rq = &mut hi[..cols];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fill the listed columns of `u` with unit vectors orthogonal to the others.
fn complete_basis(u: &mut Matrix, missing: &[usize]) {
    let rows = u.rows();
    let mut done: Vec<usize> = (0..u.cols()).filter(|j| !missing.contains(j)).collect();
    for &k in missing {
        let mut best = (0.0, vec![0.0; rows]);
        for e in 0..rows {
            let mut cand = vec![0.0; rows];
            cand[e] = 1.0;
            for _ in 0..2 {
                for &j in &done {
                    let dot: f64 = (0..rows).map(|i| u[(i, j)] * cand[i]).sum();
                    for (i, c) in cand.iter_mut().enumerate() {
                        *c -= dot * u[(i, j)];
                    }
                }
            }
            let n = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > best.0 {
                best = (n, cand);
            }
        }
        let (n, col) = best;
        for i in 0..rows {
            u[(i, k)] = col[i] / n;
        }
        done.push(k);
    }
}

fn canonical_signs(r: &mut SvdResult) {
    for k in 0..r.s.len() {
        let mut idx = 0;
        let mut best = -1.0;
        for i in 0..r.u.rows() {
            let a = r.u[(i, k)].abs();
            if a > best + 1e-14 {
                best = a;
                idx = i;
            }
        }
        if r.u[(idx, k)] < 0.0 {
            for i in 0..r.u.rows() {
                r.u[(i, k)] = -r.u[(i, k)];
            }
            for i in 0..r.v.rows() {
                r.v[(i, k)] = -r.v[(i, k)];
            }
        }
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues sorted non-increasing and eigenvectors as columns.
pub fn sym_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix), NumericsError> {
    let n = m.rows();
    if m.cols() != n {
        return Err(NumericsError::Shape(format!("sym_eigen needs a square matrix, got {:?}", m.shape())));
    }
    if !m.is_finite() {
        return Err(NumericsError::NonFinite("sym_eigen input"));
    }
    let mut a = m.clone();
    // Symmetrize to remove rounding asymmetry from callers.
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = avg;
            a[(j, i)] = avg;
        }
    }
    let mut vecs = Matrix::identity(n);
    let scale = a.frobenius().max(f64::MIN_POSITIVE);
    let mut converged = n < 2;
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= SVD_TOL * scale {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = vecs[(k, p)];
                    let vkq = vecs[(k, q)];
                    vecs[(k, p)] = c * vkp - s * vkq;
                    vecs[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(NumericsError::NoConvergence { rows: n, cols: n, sweeps: SVD_MAX_SWEEPS });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[(y, y)].total_cmp(&a[(x, x)]).then(x.cmp(&y)));
    let vals = order.iter().map(|&i| a[(i, i)]).collect();
    let vecs_sorted = Matrix::from_fn(n, n, |i, k| vecs[(i, order[k])]);
    Ok((vals, vecs_sorted))
}

/// Cholesky factor `L` with `m = L Lᵀ`; `None` if a pivot is not positive.
pub fn cholesky(m: &Matrix) -> Option<Matrix> {
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    let max_diag = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    let floor = max_diag * 1e-13 * n as f64;
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= floor || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Solve `L Lᵀ X = B` given the Cholesky factor.
pub fn cholesky_solve(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// `argmin_B ‖Y − XB‖² + λ‖B‖² = (XᵀX + λI)⁻¹ XᵀY`.
pub fn ridge_solve(x: &Matrix, y: &Matrix, lambda_ridge: f64) -> Result<Matrix, NumericsError> {
    if x.rows() != y.rows() {
        return Err(NumericsError::Shape(format!("ridge: X has {} rows, Y has {}", x.rows(), y.rows())));
    }
    if x.rows() == 0 {
        return Err(NumericsError::Shape("ridge: no samples".into()));
    }
    if !(lambda_ridge >= 0.0) {
        return Err(NumericsError::Shape(format!("ridge: lambda must be nonnegative, got {lambda_ridge}")));
    }
    let mut gram = x.matmul_tn(x);
    for i in 0..gram.rows() {
        gram[(i, i)] += lambda_ridge;
    }
    let rhs = x.matmul_tn(y);
    let l = cholesky(&gram).ok_or(NumericsError::RankDeficient { rows: x.rows(), cols: x.cols() })?;
    Ok(cholesky_solve(&l, &rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = RngStream::new(seed, 0);
        Matrix::from_vec(rows, cols, r.gaussian_vec(rows * cols, 1.0)).unwrap()
    }

    #[test]
    fn svd_of_identity() {
        let r = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(r.s, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn svd_of_diagonal() {
        let r = svd(&Matrix::diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(r.s, vec![3.0, 2.0, 1.0]);
        assert_eq!(r.u, Matrix::identity(3));
        assert_eq!(r.v, Matrix::identity(3));
    }

    #[test]
    fn svd_reconstructs_random_square() {
        let m = random(8, 8, 7);
        let r = svd(&m).unwrap();
        let err = r.reconstruct().sub(&m).frobenius() / m.frobenius();
        assert!(err <= 1e-9, "relative residual {err}");
        for w in r.s.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn svd_rectangular_and_rank_deficient() {
        let a = random(12, 3, 2);
        let m = a.matmul_nt(&random(5, 3, 3)); // 12x5, rank 3
        let r = svd(&m).unwrap();
        assert!(r.s[3] < 1e-10 && r.s[4] < 1e-10);
        let utu = r.u.matmul_tn(&r.u);
        assert!(utu.sub(&Matrix::identity(5)).max_abs() < 1e-10);
        assert!(r.reconstruct().sub(&m).frobenius() / m.frobenius() < 1e-9);
        let wide = m.transpose();
        let rw = svd(&wide).unwrap();
        assert!(rw.reconstruct().sub(&wide).frobenius() / wide.frobenius() < 1e-9);
    }

    #[test]
    fn sym_eigen_recovers_spectrum() {
        let a = random(6, 6, 4);
        let s = a.matmul_tn(&a);
        let (vals, vecs) = sym_eigen(&s).unwrap();
        let rebuilt = vecs.matmul(&Matrix::diag(&vals)).matmul_nt(&vecs);
        assert!(rebuilt.sub(&s).max_abs() < 1e-9);
        for w in vals.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn ridge_identity_cases() {
        let i = Matrix::identity(4);
        let b = ridge_solve(&i, &i, 0.0).unwrap();
        assert!(b.sub(&i).max_abs() < 1e-15);
        let y = random(4, 3, 9);
        let b = ridge_solve(&i, &y, 1.0).unwrap();
        assert!(b.sub(&y.scaled(0.5)).max_abs() < 1e-15);
    }

    #[test]
    fn ridge_rank_deficient_at_zero_lambda() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]);
        let y = Matrix::from_rows(&[vec![1.0], vec![0.0], vec![1.0]]);
        assert!(matches!(ridge_solve(&x, &y, 0.0), Err(NumericsError::RankDeficient { .. })));
        assert!(ridge_solve(&x, &y, 1e-3).is_ok());
    }
}
