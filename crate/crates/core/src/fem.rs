//! Linear finite elements on uniform 1D meshes.
//!
//! Periodic meshes identify node `n_u` with node 0, so there are `n_u` nodes
//! and `n_u` elements of width `h = L / n_u`.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const GAUSS_POINTS: [f64; 4] = [-0.861_136_311_594_052_6, -0.339_981_043_584_856_3, 0.339_981_043_584_856_3, 0.861_136_311_594_052_6];
const GAUSS_WEIGHTS: [f64; 4] = [0.347_854_845_137_453_8, 0.652_145_154_862_546_1, 0.652_145_154_862_546_1, 0.347_854_845_137_453_8];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mesh1D {
    n_u: usize,
    s_min: f64,
    s_max: f64,
    periodic: bool,
}

impl Mesh1D {
    pub fn new(n_u: usize, s_min: f64, s_max: f64, periodic: bool) -> Result<Self> {
        if n_u < 2 {
            return Err(Error::MeshTooSmall { n_u, min: 2 });
        }
        if !(s_max > s_min) || !s_min.is_finite() || !s_max.is_finite() {
            return Err(Error::Param(alloc::format!("empty domain [{s_min}, {s_max}]")));
        }
        Ok(Mesh1D {
            n_u,
            s_min,
            s_max,
            periodic,
        })
    }

    pub fn periodic(n_u: usize, s_min: f64, s_max: f64) -> Result<Self> {
        Mesh1D::new(n_u, s_min, s_max, true)
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.s_min, self.s_max)
    }

    pub fn length(&self) -> f64 {
        self.s_max - self.s_min
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    pub fn h(&self) -> f64 {
        if self.periodic {
            self.length() / self.n_u as f64
        } else {
            self.length() / (self.n_u - 1) as f64
        }
    }

    pub fn node(&self, i: usize) -> f64 {
        self.s_min + i as f64 * self.h()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_u).map(|i| self.node(i)).collect()
    }

    fn n_elements(&self) -> usize {
        if self.periodic {
            self.n_u
        } else {
            self.n_u - 1
        }
    }

    fn element_nodes(&self, e: usize) -> (usize, usize) {
        (e, (e + 1) % self.n_u)
    }

    fn require_min(&self, min: usize) -> Result<()> {
        if self.n_u < min {
            Err(Error::MeshTooSmall { n_u: self.n_u, min })
        } else {
            Ok(())
        }
    }

    fn require_periodic(&self) -> Result<()> {
        if self.periodic {
            Ok(())
        } else {
            Err(Error::UnsupportedBoundary)
        }
    }

    /// Distance used by covariance kernels (wrapped on periodic meshes).
    pub fn distance(&self, a: f64, b: f64) -> f64 {
        let d = (a - b).abs();
        if self.periodic {
            let l = self.length();
            let d = d % l;
            d.min(l - d)
        } else {
            d
        }
    }
}

/// `M_ij = ⟨φ_i, φ_j⟩`.
pub fn assemble_mass(mesh: &Mesh1D) -> Result<Matrix> {
    mesh.require_min(3)?;
    let n = mesh.n_u();
    let h = mesh.h();
    let mut m = Matrix::zeros(n, n);
    for e in 0..mesh.n_elements() {
        let (i, j) = mesh.element_nodes(e);
        m[(i, i)] += h / 3.0;
        m[(j, j)] += h / 3.0;
        m[(i, j)] += h / 6.0;
        m[(j, i)] += h / 6.0;
    }
    Ok(m)
}

/// `A_ij = c ⟨∂_s φ_j, φ_i⟩` for `u_t + c u_s = 0`.
pub fn assemble_advection(mesh: &Mesh1D, c: f64) -> Result<Matrix> {
    mesh.require_periodic()?;
    mesh.require_min(3)?;
    let n = mesh.n_u();
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        a[(i, (i + 1) % n)] += 0.5 * c;
        a[(i, (i + n - 1) % n)] -= 0.5 * c;
    }
    Ok(a)
}

/// Central five-point stencil for `∂_s³` on a periodic mesh (not weak form).
pub fn third_derivative_stencil(mesh: &Mesh1D) -> Result<Matrix> {
    mesh.require_periodic()?;
    mesh.require_min(5)?;
    let n = mesh.n_u();
    let s = 1.0 / (2.0 * mesh.h().powi(3));
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        d[(i, (i + n - 2) % n)] -= s;
        d[(i, (i + n - 1) % n)] += 2.0 * s;
        d[(i, (i + 1) % n)] -= 2.0 * s;
        d[(i, (i + 2) % n)] += s;
    }
    Ok(d)
}

/// The weak-form convection term `⟨u_h ∂_s u_h, φ_j⟩` on a periodic mesh,
/// integrated exactly element by element.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convection {
    n: usize,
}

impl Convection {
    pub fn new(mesh: &Mesh1D) -> Result<Self> {
        mesh.require_periodic()?;
        mesh.require_min(3)?;
        Ok(Convection { n: mesh.n_u() })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn eval(&self, u: &Matrix) -> Matrix {
        let n = self.n;
        let u = u.as_slice();
        Matrix::from_fn(n, 1, |j, _| {
            let (um, u0, up) = (u[(j + n - 1) % n], u[j], u[(j + 1) % n]);
            (up * up - um * um + u0 * (up - um)) / 6.0
        })
    }

    pub fn jacobian(&self, u: &Matrix) -> Matrix {
        let n = self.n;
        let u = u.as_slice();
        let mut jac = Matrix::zeros(n, n);
        for j in 0..n {
            let (jm, jp) = ((j + n - 1) % n, (j + 1) % n);
            let (um, u0, up) = (u[jm], u[j], u[jp]);
            jac[(j, jp)] += (2.0 * up + u0) / 6.0;
            jac[(j, j)] += (up - um) / 6.0;
            jac[(j, jm)] -= (2.0 * um + u0) / 6.0;
        }
        jac
    }

    /// `∂/∂u ⟨Ḡ, J(u)⟩` as a column; exact because `J` is linear in `u`.
    pub fn jacobian_adjoint(&self, gbar: &Matrix) -> Matrix {
        let n = self.n;
        let mut out = Matrix::zeros(n, 1);
        let o = out.as_mut_slice();
        for j in 0..n {
            let (jm, jp) = ((j + n - 1) % n, (j + 1) % n);
            let (gp, g0, gm) = (gbar[(j, jp)] / 6.0, gbar[(j, j)] / 6.0, gbar[(j, jm)] / 6.0);
            o[jp] += 2.0 * gp + g0;
            o[j] += gp - gm;
            o[jm] -= g0 + 2.0 * gm;
        }
        out
    }
}

/// KdV operators `u_t + α u u_s + β u_sss = 0` in weak form.
#[derive(Debug, Clone, PartialEq)]
pub struct KdvOperators {
    /// `β M D₃`, skew-symmetric.
    pub a_disp: Matrix,
    pub alpha: f64,
    pub convection: Convection,
}

impl KdvOperators {
    /// `α ⟨u ∂_s u, φ_j⟩`.
    pub fn f(&self, u: &Matrix) -> Matrix {
        self.convection.eval(u).scale(self.alpha)
    }

    pub fn jacobian(&self, u: &Matrix) -> Matrix {
        self.convection.jacobian(u).scale(self.alpha)
    }
}

pub fn assemble_kdv(mesh: &Mesh1D, alpha: f64, beta: f64) -> Result<KdvOperators> {
    if !(beta >= 0.0) {
        return Err(Error::Param(alloc::format!("KdV dispersion must be non-negative, got {beta}")));
    }
    let d3 = third_derivative_stencil(mesh)?;
    let m = assemble_mass(mesh)?;
    Ok(KdvOperators {
        a_disp: m.matmul(&d3)?.scale(beta),
        alpha,
        convection: Convection::new(mesh)?,
    })
}

fn quadrature(mesh: &Mesh1D) -> (Vec<f64>, Vec<f64>, Vec<[(usize, f64); 2]>) {
    let h = mesh.h();
    let ne = mesh.n_elements();
    let mut pts = Vec::with_capacity(4 * ne);
    let mut wts = Vec::with_capacity(4 * ne);
    let mut basis = Vec::with_capacity(4 * ne);
    for e in 0..ne {
        let (i, j) = mesh.element_nodes(e);
        let left = mesh.node(e);
        for (xi, w) in GAUSS_POINTS.iter().zip(GAUSS_WEIGHTS) {
            let t = 0.5 * (xi + 1.0);
            pts.push(left + t * h);
            wts.push(0.5 * h * w);
            basis.push([(i, 1.0 - t), (j, t)]);
        }
    }
    (pts, wts, basis)
}

/// `b_j = ⟨f, φ_j⟩` by Gauss–Legendre quadrature.
pub fn assemble_forcing(mesh: &Mesh1D, f: impl Fn(f64) -> f64) -> Result<Matrix> {
    mesh.require_min(3)?;
    let (pts, wts, basis) = quadrature(mesh);
    let mut b = Matrix::zeros(mesh.n_u(), 1);
    for ((s, w), phi) in pts.iter().zip(&wts).zip(&basis) {
        let fs = f(*s) * w;
        for &(i, v) in phi {
            b[i] += fs * v;
        }
    }
    Ok(b)
}

/// Squared-exponential covariance `ρ² exp(−d²/(2ℓ²))`.
pub fn se_kernel(d: f64, rho: f64, ell: f64) -> f64 {
    rho * rho * (-d * d / (2.0 * ell * ell)).exp()
}

/// `G_ij = ⟨φ_i, ⟨k, φ_j⟩⟩` with four Gauss points per element.
pub fn assemble_forcing_cov(mesh: &Mesh1D, rho: f64, ell: f64) -> Result<Matrix> {
    if !(ell > 0.0) {
        return Err(Error::Param(alloc::format!("length scale must be positive, got {ell}")));
    }
    if !(rho >= 0.0) {
        return Err(Error::Param(alloc::format!("kernel amplitude must be non-negative, got {rho}")));
    }
    mesh.require_min(3)?;
    let n = mesh.n_u();
    let (pts, wts, basis) = quadrature(mesh);
    let q = pts.len();
    // P: n x q with weighted basis values
    let mut p = Matrix::zeros(n, q);
    for k in 0..q {
        for &(i, v) in &basis[k] {
            p[(i, k)] += v * wts[k];
        }
    }
    let kmat = Matrix::from_fn(q, q, |a, b| se_kernel(mesh.distance(pts[a], pts[b]), rho, ell));
    let g = p.matmul(&kmat)?.matmul_tr(&p)?;
    Ok(g.symmetrize())
}

/// Rows of hat-function weights so that `(H u)_j = u_h(points_j)`.
pub fn interp_operator(mesh: &Mesh1D, points: &[f64]) -> Result<Matrix> {
    let n = mesh.n_u();
    let h = mesh.h();
    let mut hmat = Matrix::zeros(points.len(), n);
    for (row, &p) in points.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::OutOfRange(p));
        }
        let (k, frac) = if mesh.is_periodic() {
            let l = mesh.length();
            let mut t = (p - mesh.s_min) % l;
            if t < 0.0 {
                t += l;
            }
            let x = t / h;
            let k = (x.floor() as usize).min(n - 1);
            (k, x - k as f64)
        } else {
            if p < mesh.s_min || p > mesh.s_max {
                return Err(Error::OutOfRange(p));
            }
            let x = (p - mesh.s_min) / h;
            let k = (x.floor() as usize).min(n - 2);
            (k, x - k as f64)
        };
        let k1 = (k + 1) % n;
        hmat[(row, k)] += 1.0 - frac;
        hmat[(row, k1)] += frac;
    }
    Ok(hmat)
}

/// `n_x` observation points spaced evenly across the domain (half-open on
/// periodic meshes).
pub fn uniform_points(mesh: &Mesh1D, n_x: usize) -> Vec<f64> {
    let (a, b) = mesh.domain();
    if mesh.is_periodic() || n_x < 2 {
        (0..n_x).map(|i| a + (b - a) * i as f64 / n_x as f64).collect()
    } else {
        (0..n_x).map(|i| a + (b - a) * i as f64 / (n_x - 1) as f64).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_rule_integrates_cubics() {
        let s: f64 = GAUSS_POINTS.iter().zip(GAUSS_WEIGHTS).map(|(x, w)| w * x.powi(6)).sum();
        assert!((s - 2.0 / 7.0).abs() < 1e-15);
        assert!((GAUSS_WEIGHTS.iter().sum::<f64>() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn mass_entries() {
        let mesh = Mesh1D::periodic(5, 0.0, 1.0).unwrap();
        let m = assemble_mass(&mesh).unwrap();
        let h = 0.2;
        assert!((m[(0, 0)] - 2.0 * h / 3.0).abs() < 1e-15);
        assert!((m[(0, 4)] - h / 6.0).abs() < 1e-15);
        assert!((m[(2, 3)] - h / 6.0).abs() < 1e-15);
        assert_eq!(m[(0, 2)], 0.0);
    }

    #[test]
    fn small_meshes_rejected() {
        let mesh = Mesh1D::periodic(2, 0.0, 1.0).unwrap();
        assert_eq!(assemble_mass(&mesh).unwrap_err(), Error::MeshTooSmall { n_u: 2, min: 3 });
        let mesh = Mesh1D::periodic(4, 0.0, 1.0).unwrap();
        assert!(matches!(assemble_kdv(&mesh, 1.0, 1.0), Err(Error::MeshTooSmall { min: 5, .. })));
        let open = Mesh1D::new(6, 0.0, 1.0, false).unwrap();
        assert_eq!(assemble_advection(&open, 1.0).unwrap_err(), Error::UnsupportedBoundary);
    }

    #[test]
    fn convection_matches_element_sum() {
        // direct element-by-element integration of u_h u_h' φ_j
        let n = 7;
        let u: Vec<f64> = (0..n).map(|i| (i as f64 * 0.9).sin() + 0.3).collect();
        let um = Matrix::col(&u);
        let f = Convection { n }.eval(&um);
        let mut direct = [0.0; 7];
        for e in 0..n {
            let (i, j) = (e, (e + 1) % n);
            let (a, b) = (u[i], u[j]);
            direct[i] += (b - a) * (2.0 * a + b) / 6.0;
            direct[j] += (b - a) * (a + 2.0 * b) / 6.0;
        }
        for j in 0..n {
            assert!((f[j] - direct[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn interp_wraps() {
        let mesh = Mesh1D::periodic(4, 0.0, 1.0).unwrap();
        let h = interp_operator(&mesh, &[0.875, 1.25, -0.25]).unwrap();
        assert_eq!(h.row(0), &[0.5, 0.0, 0.0, 0.5]);
        assert_eq!(h.row(1), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(h.row(2), &[0.0, 0.0, 0.0, 1.0]);
        let open = Mesh1D::new(4, 0.0, 1.0, false).unwrap();
        assert_eq!(interp_operator(&open, &[1.5]).unwrap_err(), Error::OutOfRange(1.5));
    }
}
