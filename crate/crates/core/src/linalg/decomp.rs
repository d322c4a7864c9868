//! Cholesky and LU factorizations plus a Jacobi symmetric eigen-solver.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use super::Matrix;
use crate::error::{Error, Result};

/// Relative diagonal jitter tried once when a Cholesky factorization fails.
pub const CHOLESKY_JITTER: f64 = 1e-10;

/// Factor `L` with `L Lᵀ ≈ A` for a symmetric positive semidefinite `A`,
/// by Cholesky with diagonal pivoting. Stops once the remaining diagonal
/// drops below `1e-13 · max(diag)`, so rank-deficient covariances still give
/// a sampling factor. `L` is not triangular in the original ordering.
pub fn psd_factor(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::shape("psd_factor", a.shape(), a.shape()));
    }
    let n = a.rows();
    if !a.is_finite() {
        return Err(Error::NonFinite("psd_factor"));
    }
    let tol = 1e-13 * (0..n).map(|i| a[(i, i)]).fold(0.0, f64::max);
    let mut w = a.clone();
    let mut l = Matrix::zeros(n, n);
    let mut piv: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let (j, dmax) = (k..n)
            .map(|i| (i, w[(piv[i], piv[i])]))
            .fold((k, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best });
        if dmax <= tol {
            break;
        }
        piv.swap(k, j);
        let p = piv[k];
        let s = dmax.sqrt();
        for &q in &piv[k..] {
            l[(q, k)] = w[(q, p)] / s;
        }
        for &qi in &piv[k + 1..] {
            let li = l[(qi, k)];
            for &qm in &piv[k + 1..] {
                w[(qi, qm)] -= li * l[(qm, k)];
            }
        }
    }
    Ok(l)
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    /// Factors the lower triangle of `a`. On failure retries once with
    /// `1e-10 * mean(diag)` added to the diagonal.
    pub fn new(a: &Matrix) -> Result<Self> {
        match Self::new_strict(a) {
            Ok(c) => Ok(c),
            Err(Error::NotPositiveDefinite { .. }) => {
                let n = a.rows();
                let mean_diag = a.trace() / n as f64;
                let mut jittered = a.clone();
                let eps = CHOLESKY_JITTER * mean_diag.abs().max(f64::MIN_POSITIVE);
                for i in 0..n {
                    jittered[(i, i)] += eps;
                }
                Self::new_strict(&jittered)
            }
            Err(e) => Err(e),
        }
    }

    /// Factors without the jitter retry.
    pub fn new_strict(a: &Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::shape("cholesky", a.shape(), a.shape()));
        }
        let n = a.rows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let d = a[(j, j)] - l.row(j)[..j].iter().map(|v| v * v).sum::<f64>();
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in j + 1..n {
                let s: f64 = {
                    let li = l.row(i);
                    let lj = l.row(j);
                    li[..j].iter().zip(&lj[..j]).map(|(a, b)| a * b).sum()
                };
                l[(i, j)] = (a[(i, j)] - s) / djj;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn factor(&self) -> &Matrix {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Solves `A X = B`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        if b.rows() != n {
            return Err(Error::shape("cholesky_solve", (n, n), b.shape()));
        }
        let mut x = b.clone();
        let m = x.cols();
        let l = &self.l;
        // L y = b
        for i in 0..n {
            for k in 0..i {
                let lik = l[(i, k)];
                if lik != 0.0 {
                    row_axpy(&mut x, i, k, -lik, m);
                }
            }
            let inv = 1.0 / l[(i, i)];
            x.row_mut(i).iter_mut().for_each(|v| *v *= inv);
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            for k in i + 1..n {
                let lki = l[(k, i)];
                if lki != 0.0 {
                    row_axpy(&mut x, i, k, -lki, m);
                }
            }
            let inv = 1.0 / l[(i, i)];
            x.row_mut(i).iter_mut().for_each(|v| *v *= inv);
        }
        Ok(x)
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> Matrix {
        self.solve(&Matrix::identity(self.dim()))
            .expect("identity has matching rows")
    }
}

/// LU factorization with partial pivoting, `P A = L U`.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
}

impl Lu {
    pub fn new(a: &Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::shape("lu", a.shape(), a.shape()));
        }
        let n = a.rows();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[(k, k)].abs();
            for i in k + 1..n {
                let v = lu[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > 0.0) || !best.is_finite() {
                return Err(Error::Singular { pivot: k });
            }
            if p != k {
                perm.swap(p, k);
                for j in 0..n {
                    let t = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = t;
                }
            }
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let f = lu[(i, k)] / pivot;
                lu[(i, k)] = f;
                if f != 0.0 {
                    let (upper, lower) = lu.as_mut_slice().split_at_mut(i * n);
                    let rk = &upper[k * n + k + 1..k * n + n];
                    let ri = &mut lower[k + 1..n];
                    for (a, b) in ri.iter_mut().zip(rk) {
                        *a -= f * b;
                    }
                }
            }
        }
        Ok(Lu { lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.lu.rows()
    }

    /// Solves `A X = B`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        if b.rows() != n {
            return Err(Error::shape("lu_solve", (n, n), b.shape()));
        }
        let m = b.cols();
        let mut x = Matrix::zeros(n, m);
        for i in 0..n {
            x.row_mut(i).copy_from_slice(b.row(self.perm[i]));
        }
        let lu = &self.lu;
        for i in 0..n {
            for k in 0..i {
                let lik = lu[(i, k)];
                if lik != 0.0 {
                    row_axpy(&mut x, i, k, -lik, m);
                }
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let uik = lu[(i, k)];
                if uik != 0.0 {
                    row_axpy(&mut x, i, k, -uik, m);
                }
            }
            let inv = 1.0 / lu[(i, i)];
            x.row_mut(i).iter_mut().for_each(|v| *v *= inv);
        }
        Ok(x)
    }

    /// Solves `Aᵀ X = B`.
    pub fn solve_transpose(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        if b.rows() != n {
            return Err(Error::shape("lu_solve_transpose", (n, n), b.shape()));
        }
        let m = b.cols();
        let lu = &self.lu;
        let mut y = b.clone();
        // Uᵀ z = b
        for i in 0..n {
            for k in 0..i {
                let uki = lu[(k, i)];
                if uki != 0.0 {
                    row_axpy(&mut y, i, k, -uki, m);
                }
            }
            let inv = 1.0 / lu[(i, i)];
            y.row_mut(i).iter_mut().for_each(|v| *v *= inv);
        }
        // Lᵀ w = z
        for i in (0..n).rev() {
            for k in i + 1..n {
                let lki = lu[(k, i)];
                if lki != 0.0 {
                    row_axpy(&mut y, i, k, -lki, m);
                }
            }
        }
        let mut x = Matrix::zeros(n, m);
        for i in 0..n {
            x.row_mut(self.perm[i]).copy_from_slice(y.row(i));
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Matrix {
        self.solve(&Matrix::identity(self.dim()))
            .expect("identity has matching rows")
    }
}

/// `x[dst, :] += alpha * x[src, :]` for distinct rows.
#[inline]
fn row_axpy(x: &mut Matrix, dst: usize, src: usize, alpha: f64, m: usize) {
    debug_assert_ne!(dst, src);
    let data = x.as_mut_slice();
    if dst > src {
        let (a, b) = data.split_at_mut(dst * m);
        let s = &a[src * m..src * m + m];
        for (d, v) in b[..m].iter_mut().zip(s) {
            *d += alpha * v;
        }
    } else {
        let (a, b) = data.split_at_mut(src * m);
        let s = &b[..m];
        for (d, v) in a[dst * m..dst * m + m].iter_mut().zip(s) {
            *d += alpha * v;
        }
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
    assert!(a.is_square(), "eigenvalues of non-square matrix");
    let n = a.rows();
    let mut m = a.symmetrize();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        let scale: f64 = m.norm_sq().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev = m.diagonal();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    ev
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> Matrix {
        let b = Matrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.4 + if i == j { 1.0 } else { 0.0 });
        let mut a = b.matmul_tr(&b).unwrap();
        for i in 0..n {
            a[(i, i)] += 0.5;
        }
        a
    }

    #[test]
    fn cholesky_solves() {
        let a = spd(6);
        let x = Matrix::from_fn(6, 2, |i, j| i as f64 - 2.0 * j as f64);
        let b = a.matmul(&x).unwrap();
        let chol = Cholesky::new(&a).unwrap();
        assert!(chol.solve(&b).unwrap().max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn cholesky_reports_pivot() {
        let a = Matrix::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, -3.0]]);
        assert_eq!(
            Cholesky::new(&a).unwrap_err(),
            Error::NotPositiveDefinite { pivot: 2 }
        );
    }

    #[test]
    fn jitter_rescues_semidefinite() {
        let a = Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert!(Cholesky::new_strict(&a).is_err());
        assert!(Cholesky::new(&a).is_ok());
    }

    #[test]
    fn lu_solves_both_ways() {
        let a = Matrix::from_rows(&[&[0.0, 2.0, 1.0], &[1.0, -1.0, 3.0], &[4.0, 0.5, -2.0]]);
        let x = Matrix::from_fn(3, 2, |i, j| (i + j) as f64 - 0.5);
        let lu = Lu::new(&a).unwrap();
        assert!(lu.solve(&a.matmul(&x).unwrap()).unwrap().max_abs_diff(&x) < 1e-12);
        let bt = a.tr_matmul(&x).unwrap();
        assert!(lu.solve_transpose(&bt).unwrap().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn lu_singular() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(matches!(Lu::new(&a), Err(Error::Singular { .. })));
    }

    #[test]
    fn jacobi_eigenvalues() {
        let a = Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let ev = symmetric_eigenvalues(&a);
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
    }
}
