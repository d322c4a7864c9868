//! Time-discretized stochastic transition models.
//!
//! Every scheme is written in residual form
//!
//! ```text
//! 𝓜(u_n, u_prev) = M (u_n − u_prev) + Δt r(u*, Λ) = e,   e ~ N(0, Q)
//! ```
//!
//! where `r(u, Λ) = A u + F(u) − b` for FEM systems (and `−f(u)` for the
//! Lorenz drift, with `M = I`), and `u*` is `u_prev` (explicit Euler–Maruyama),
//! `u_n` (implicit Euler) or the midpoint (Crank–Nicolson).

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::Convection;
use crate::linalg::{psd_factor, Cholesky, CustomOp, Lu, Matrix, Var};

pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 50;

/// Physical parameters Λ with a diagonal Gaussian prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub prior_mean: Vec<f64>,
    pub prior_var: Vec<f64>,
    pub free: Vec<bool>,
}

impl ModelParams {
    pub fn new(names: Vec<String>, values: Vec<f64>, prior_mean: Vec<f64>, prior_var: Vec<f64>, free: Vec<bool>) -> Result<Self> {
        let p = names.len();
        if values.len() != p || prior_mean.len() != p || prior_var.len() != p || free.len() != p {
            return Err(Error::Param(format!("parameter vectors must all have length {p}")));
        }
        if let Some(v) = prior_var.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Param(format!("prior variance must be positive, got {v}")));
        }
        Ok(ModelParams {
            names,
            values,
            prior_mean,
            prior_var,
            free,
        })
    }

    /// Parameters that are all fixed at `values`.
    pub fn fixed(names: &[&str], values: &[f64]) -> Self {
        ModelParams {
            names: names.iter().map(|s| String::from(*s)).collect(),
            values: values.to_vec(),
            prior_mean: values.to_vec(),
            prior_var: vec![1.0; values.len()],
            free: vec![false; values.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.free[i]).collect()
    }

    pub fn n_free(&self) -> usize {
        self.free.iter().filter(|f| **f).count()
    }

    pub fn column(&self) -> Matrix {
        Matrix::col(&self.values)
    }

    /// `p x k` matrix scattering the free entries into the full vector.
    pub fn selection(&self) -> Matrix {
        let idx = self.free_indices();
        let mut s = Matrix::zeros(self.len(), idx.len());
        for (k, &i) in idx.iter().enumerate() {
            s[(i, k)] = 1.0;
        }
        s
    }

    /// The full vector with free entries zeroed.
    pub fn fixed_part(&self) -> Matrix {
        Matrix::from_fn(self.len(), 1, |i, _| if self.free[i] { 0.0 } else { self.values[i] })
    }

    pub fn free_prior(&self) -> (Vec<f64>, Vec<f64>) {
        let idx = self.free_indices();
        (idx.iter().map(|&i| self.prior_mean[i]).collect(), idx.iter().map(|&i| self.prior_var[i]).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    ExplicitEm,
    ImplicitEuler,
    CrankNicolson,
}

impl Scheme {
    /// Weights of `u_n` and `u_prev` in the evaluation point `u*`.
    fn weights(self) -> (f64, f64) {
        match self {
            Scheme::ExplicitEm => (0.0, 1.0),
            Scheme::ImplicitEuler => (1.0, 0.0),
            Scheme::CrankNicolson => (0.5, 0.5),
        }
    }
}

/// A coefficient that is either a constant or one entry of Λ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Coef {
    Fixed(f64),
    Param(usize),
}

impl Coef {
    fn value(self, lam: &[f64]) -> f64 {
        match self {
            Coef::Fixed(v) => v,
            Coef::Param(i) => lam[i],
        }
    }
}

/// Weak-form PDE system with `r(u) = Σ c_k A_k u + c_F F(u) − b`.
#[derive(Debug, Clone, PartialEq)]
pub struct FemSystem {
    pub mass: Matrix,
    pub linear: Vec<(Coef, Matrix)>,
    pub convection: Option<(Coef, Convection)>,
    pub forcing: Matrix,
    /// Spatial covariance `G` of the forcing.
    pub noise_cov: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum System {
    /// Lorenz-63 with Λ = (σ, r, b) and additive noise `L dW`.
    Lorenz { noise_cov: Matrix },
    Fem(FemSystem),
}

/// Lorenz-63 drift `f(u; σ, r, b)`.
pub fn lorenz_drift(u: &[f64], lam: &[f64]) -> [f64; 3] {
    let (s, r, b) = (lam[0], lam[1], lam[2]);
    [s * (u[1] - u[0]), -u[0] * u[2] + r * u[0] - u[1], u[0] * u[1] - b * u[2]]
}

/// Jacobian of [`lorenz_drift`] with respect to `u`.
pub fn lorenz_drift_jacobian(u: &[f64], lam: &[f64]) -> Matrix {
    let (s, r, b) = (lam[0], lam[1], lam[2]);
    Matrix::from_rows(&[&[-s, s, 0.0], &[r - u[2], -1.0, -u[0]], &[u[1], u[0], -b]])
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    pub system: System,
    pub scheme: Scheme,
    pub dt: f64,
    /// Integration steps between consecutive observations.
    pub substeps: usize,
    mass: Matrix,
    /// Covariance of the residual noise `e` per step.
    q: Matrix,
}

impl TransitionModel {
    pub fn new(system: System, scheme: Scheme, dt: f64, substeps: usize) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Param(format!("time step must be positive, got {dt}")));
        }
        if substeps == 0 {
            return Err(Error::Param("substeps must be at least 1".into()));
        }
        let (mass, q) = match &system {
            System::Lorenz { noise_cov } => {
                if scheme != Scheme::ExplicitEm {
                    return Err(Error::Param("the Lorenz drift is integrated with explicit Euler-Maruyama only".into()));
                }
                if noise_cov.shape() != (3, 3) {
                    return Err(Error::shape("lorenz noise", noise_cov.shape(), (3, 3)));
                }
                (Matrix::identity(3), noise_cov.scale(dt))
            }
            System::Fem(f) => {
                let n = f.mass.rows();
                let check = |name, m: &Matrix, shape| {
                    if m.shape() != shape {
                        Err(Error::shape(name, m.shape(), shape))
                    } else {
                        Ok(())
                    }
                };
                check("mass", &f.mass, (n, n))?;
                check("noise_cov", &f.noise_cov, (n, n))?;
                check("forcing", &f.forcing, (n, 1))?;
                for (_, a) in &f.linear {
                    check("linear term", a, (n, n))?;
                }
                if let Some((_, c)) = &f.convection {
                    check("convection", &Matrix::zeros(c.dim(), c.dim()), (n, n))?;
                }
                (f.mass.clone(), f.noise_cov.scale(dt))
            }
        };
        Ok(TransitionModel {
            system,
            scheme,
            dt,
            substeps,
            mass,
            q,
        })
    }

    /// The same model with a different time step.
    pub fn with_dt(&self, dt: f64) -> Result<Self> {
        TransitionModel::new(self.system.clone(), self.scheme, dt, self.substeps)
    }

    pub fn dim(&self) -> usize {
        self.mass.rows()
    }

    pub fn mass(&self) -> &Matrix {
        &self.mass
    }

    /// Per-step covariance of the residual noise.
    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn n_params(&self) -> usize {
        match &self.system {
            System::Lorenz { .. } => 3,
            System::Fem(f) => {
                let mut p = 0;
                for (c, _) in &f.linear {
                    if let Coef::Param(i) = c {
                        p = p.max(i + 1);
                    }
                }
                if let Some((Coef::Param(i), _)) = &f.convection {
                    p = p.max(i + 1);
                }
                p
            }
        }
    }

    /// True when `r` is affine in `u`.
    pub fn is_linear(&self) -> bool {
        matches!(&self.system, System::Fem(f) if f.convection.is_none())
    }

    fn check_lam(&self, lam: &[f64]) -> Result<()> {
        if lam.len() < self.n_params() {
            return Err(Error::Param(format!("model needs {} parameters, got {}", self.n_params(), lam.len())));
        }
        Ok(())
    }

    /// `r(u, Λ)`.
    pub fn rate(&self, u: &Matrix, lam: &[f64]) -> Matrix {
        match &self.system {
            System::Lorenz { .. } => {
                let f = lorenz_drift(u.as_slice(), lam);
                Matrix::col(&[-f[0], -f[1], -f[2]])
            }
            System::Fem(f) => {
                let mut out = f.forcing.scale(-1.0);
                for (c, a) in &f.linear {
                    let v = c.value(lam);
                    if v != 0.0 {
                        out.axpy(v, &a.matmul_unchecked(u));
                    }
                }
                if let Some((c, conv)) = &f.convection {
                    out.axpy(c.value(lam), &conv.eval(u));
                }
                out
            }
        }
    }

    /// `∂r/∂u`.
    pub fn rate_jacobian(&self, u: &Matrix, lam: &[f64]) -> Matrix {
        match &self.system {
            System::Lorenz { .. } => lorenz_drift_jacobian(u.as_slice(), lam).scale(-1.0),
            System::Fem(f) => {
                let n = self.dim();
                let mut k = Matrix::zeros(n, n);
                for (c, a) in &f.linear {
                    k.axpy(c.value(lam), a);
                }
                if let Some((c, conv)) = &f.convection {
                    k.axpy(c.value(lam), &conv.jacobian(u));
                }
                k
            }
        }
    }

    /// `∂r/∂Λ`, an `n x p` matrix.
    pub fn rate_param_jacobian(&self, u: &Matrix, lam: &[f64]) -> Matrix {
        let p = lam.len();
        let n = self.dim();
        let mut out = Matrix::zeros(n, p);
        match &self.system {
            System::Lorenz { .. } => {
                let u = u.as_slice();
                out[(0, 0)] = -(u[1] - u[0]);
                out[(1, 1)] = -u[0];
                out[(2, 2)] = u[2];
            }
            System::Fem(f) => {
                for (c, a) in &f.linear {
                    if let Coef::Param(i) = c {
                        let au = a.matmul_unchecked(u);
                        for r in 0..n {
                            out[(r, *i)] += au[r];
                        }
                    }
                }
                if let Some((Coef::Param(i), conv)) = &f.convection {
                    let fu = conv.eval(u);
                    for r in 0..n {
                        out[(r, *i)] += fu[r];
                    }
                }
            }
        }
        out
    }

    /// Adjoints of `⟨Ḡ, ∂r/∂u(u, Λ)⟩` with respect to `u` and `Λ`.
    pub fn rate_jacobian_adjoint(&self, u: &Matrix, lam: &[f64], gbar: &Matrix) -> (Matrix, Matrix) {
        let n = self.dim();
        let mut ubar = Matrix::zeros(n, 1);
        let mut lbar = Matrix::zeros(lam.len(), 1);
        match &self.system {
            System::Lorenz { .. } => {
                let g = |i: usize, j: usize| gbar[(i, j)];
                ubar[0] = g(1, 2) - g(2, 1);
                ubar[1] = -g(2, 0);
                ubar[2] = g(1, 0);
                lbar[0] = g(0, 0) - g(0, 1);
                lbar[1] = -g(1, 0);
                lbar[2] = g(2, 2);
            }
            System::Fem(f) => {
                for (c, a) in &f.linear {
                    if let Coef::Param(i) = c {
                        lbar[*i] += gbar.dot(a);
                    }
                }
                if let Some((c, conv)) = &f.convection {
                    ubar = conv.jacobian_adjoint(gbar).scale(c.value(lam));
                    if let Coef::Param(i) = c {
                        lbar[*i] += gbar.dot(&conv.jacobian(u));
                    }
                }
            }
        }
        (ubar, lbar)
    }

    /// Evaluation point `u*` of the scheme.
    pub fn eval_point(&self, u_n: &Matrix, u_prev: &Matrix) -> Matrix {
        let (wn, wp) = self.scheme.weights();
        match self.scheme {
            Scheme::ExplicitEm => u_prev.clone(),
            Scheme::ImplicitEuler => u_n.clone(),
            Scheme::CrankNicolson => u_n.zip_map(u_prev, |a, b| wn * a + wp * b),
        }
    }

    /// `𝓜(u_n, u_prev)`.
    pub fn residual(&self, u_n: &Matrix, u_prev: &Matrix, lam: &[f64]) -> Result<Matrix> {
        self.check_lam(lam)?;
        let mut res = self.mass.matmul(&u_n.sub(u_prev)?)?;
        res.axpy(self.dt, &self.rate(&self.eval_point(u_n, u_prev), lam));
        Ok(res)
    }

    /// `(∂𝓜/∂u_n, ∂𝓜/∂u_prev)`.
    pub fn jacobians(&self, u_n: &Matrix, u_prev: &Matrix, lam: &[f64]) -> Result<(Matrix, Matrix)> {
        self.check_lam(lam)?;
        let k = self.rate_jacobian(&self.eval_point(u_n, u_prev), lam);
        Ok(self.jacobians_from(&k))
    }

    fn jacobians_from(&self, k: &Matrix) -> (Matrix, Matrix) {
        let (wn, wp) = self.scheme.weights();
        let mut jn = self.mass.clone();
        let mut jp = self.mass.scale(-1.0);
        if wn != 0.0 {
            jn.axpy(self.dt * wn, k);
        }
        if wp != 0.0 {
            jp.axpy(self.dt * wp, k);
        }
        (jn, jp)
    }

    /// Solves `𝓜(u_n, u_prev) = e` for `u_n`.
    pub fn step(&self, u_prev: &Matrix, lam: &[f64], e: Option<&Matrix>) -> Result<Matrix> {
        self.check_lam(lam)?;
        if self.scheme == Scheme::ExplicitEm {
            // M u_n = M u_prev − Δt r(u_prev) + e
            let mut rhs = self.mass.matmul(u_prev)?;
            rhs.axpy(-self.dt, &self.rate(u_prev, lam));
            if let Some(e) = e {
                rhs.add_assign(e);
            }
            let out = match &self.system {
                System::Lorenz { .. } => rhs,
                System::Fem(_) => Cholesky::new(&self.mass)?.solve(&rhs)?,
            };
            return if out.is_finite() {
                Ok(out)
            } else {
                Err(Error::Divergence { step: 0, iterations: 0 })
            };
        }
        let target = |u: &Matrix| -> Result<Matrix> {
            let r = self.residual(u, u_prev, lam)?;
            match e {
                Some(e) => r.sub(e),
                None => Ok(r),
            }
        };
        let mut u = u_prev.clone();
        let mut r = target(&u)?;
        for it in 0..NEWTON_MAX_ITER {
            if !r.is_finite() {
                return Err(Error::Divergence { step: 0, iterations: it });
            }
            if r.max_abs() < NEWTON_TOL {
                return Ok(u);
            }
            let (jn, _) = self.jacobians(&u, u_prev, lam)?;
            let du = Lu::new(&jn)?.solve(&r)?;
            if du.max_abs() <= 1e-15 * (1.0 + u.max_abs()) {
                // residual is at round-off level and further steps cannot reduce it
                return Ok(u);
            }
            // halve the step while it fails to decrease the residual
            let norm = r.norm();
            let mut t = 1.0;
            loop {
                let mut trial = u.clone();
                trial.axpy(-t, &du);
                let rt = target(&trial)?;
                if (rt.is_finite() && rt.norm() < norm) || t < 1e-3 {
                    u = trial;
                    r = rt;
                    break;
                }
                t *= 0.5;
            }
        }
        Err(Error::Divergence {
            step: 0,
            iterations: NEWTON_MAX_ITER,
        })
    }

    /// Explicit Euler–Maruyama moments `(mean, Δt M⁻¹ G M⁻ᵀ)` of one step.
    pub fn em_mean_cov(&self, u_prev: &Matrix, lam: &[f64]) -> Result<(Matrix, Matrix)> {
        if self.scheme != Scheme::ExplicitEm {
            return Err(Error::Param("em_mean_cov needs the explicit Euler-Maruyama scheme".into()));
        }
        let mean = self.step(u_prev, lam, None)?;
        let chol = Cholesky::new(&self.mass)?;
        let x = chol.solve(&self.q)?;
        let cov = chol.solve(&x.transpose())?.symmetrize();
        Ok((mean, cov))
    }

    /// Trajectory at observation times `0, 1, ..., n_obs` (row `n` is `u_n`).
    ///
    /// Noise `e ~ N(0, noise_scale² Q)` is drawn per integration step from a
    /// ChaCha stream seeded with `seed`.
    pub fn simulate(&self, u0: &Matrix, lam: &[f64], n_obs: usize, noise_scale: f64, seed: u64) -> Result<Matrix> {
        let n = self.dim();
        if u0.shape() != (n, 1) {
            return Err(Error::shape("simulate", u0.shape(), (n, 1)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise_factor = if noise_scale != 0.0 && self.q.max_abs() > 0.0 {
            Some(psd_factor(&self.q)?)
        } else {
            None
        };
        let mut out = Matrix::zeros(n_obs + 1, n);
        out.row_mut(0).copy_from_slice(u0.as_slice());
        let mut u = u0.clone();
        let mut step = 0;
        for obs in 1..=n_obs {
            for _ in 0..self.substeps {
                let e = match &noise_factor {
                    Some(l) => {
                        let z = Matrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
                        Some(l.matmul(&z)?.scale(noise_scale))
                    }
                    None => None,
                };
                u = self.step(&u, lam, e.as_ref()).map_err(|err| match err {
                    Error::Divergence { iterations, .. } => Error::Divergence { step, iterations },
                    other => other,
                })?;
                step += 1;
            }
            out.row_mut(obs).copy_from_slice(u.as_slice());
        }
        Ok(out)
    }
}

/// One noise-free integration step recorded on the tape. The adjoint uses
/// the implicit function theorem on `𝓜(u_n, u_prev; Λ) = 0`.
struct StepOp {
    model: Rc<TransitionModel>,
}

impl CustomOp for StepOp {
    fn name(&self) -> &'static str {
        "transition_step"
    }

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        self.model.step(inputs[0], inputs[1].as_slice(), None)
    }

    fn vjp(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Result<Vec<Option<Matrix>>> {
        let (u_prev, lam) = (inputs[0], inputs[1].as_slice());
        let m = &self.model;
        let (jn, jp) = m.jacobians(output, u_prev, lam)?;
        let w = Lu::new(&jn)?.solve_transpose(grad)?;
        let ubar = jp.tr_matmul(&w)?.scale(-1.0);
        let pj = m.rate_param_jacobian(&m.eval_point(output, u_prev), lam);
        let lbar = pj.tr_matmul(&w)?.scale(-m.dt);
        Ok(vec![Some(ubar), Some(lbar)])
    }
}

/// `∂r/∂u` recorded on the tape.
struct RateJacobianOp {
    model: Rc<TransitionModel>,
}

impl CustomOp for RateJacobianOp {
    fn name(&self) -> &'static str {
        "rate_jacobian"
    }

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        Ok(self.model.rate_jacobian(inputs[0], inputs[1].as_slice()))
    }

    fn vjp(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Option<Matrix>>> {
        let (ubar, lbar) = self.model.rate_jacobian_adjoint(inputs[0], inputs[1].as_slice(), grad);
        Ok(vec![Some(ubar), Some(lbar)])
    }
}

/// `r(u, Λ)` recorded on the tape.
struct RateOp {
    model: Rc<TransitionModel>,
}

impl CustomOp for RateOp {
    fn name(&self) -> &'static str {
        "rate"
    }

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        Ok(self.model.rate(inputs[0], inputs[1].as_slice()))
    }

    fn vjp(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Option<Matrix>>> {
        let (u, lam) = (inputs[0], inputs[1].as_slice());
        let k = self.model.rate_jacobian(u, lam);
        let pj = self.model.rate_param_jacobian(u, lam);
        Ok(vec![Some(k.tr_matmul(grad)?), Some(pj.tr_matmul(grad)?)])
    }
}

/// Differentiable views of a [`TransitionModel`].
pub trait TapeModel {
    /// Mean of one noise-free step from `u_prev`.
    fn step_var<'t>(&self, u_prev: Var<'t>, lam: Var<'t>) -> Result<Var<'t>>;
    fn rate_jacobian_var<'t>(&self, u: Var<'t>, lam: Var<'t>) -> Result<Var<'t>>;
    fn rate_var<'t>(&self, u: Var<'t>, lam: Var<'t>) -> Result<Var<'t>>;
    /// `(J_n, J_prev)` built from a recorded rate Jacobian.
    fn jacobians_var<'t>(&self, k: Var<'t>) -> Result<(Var<'t>, Var<'t>)>;
}

impl TapeModel for Rc<TransitionModel> {
    fn step_var<'t>(&self, u_prev: Var<'t>, lam: Var<'t>) -> Result<Var<'t>> {
        u_prev.tape().custom(StepOp { model: self.clone() }, &[u_prev, lam])
    }

    fn rate_jacobian_var<'t>(&self, u: Var<'t>, lam: Var<'t>) -> Result<Var<'t>> {
        u.tape().custom(RateJacobianOp { model: self.clone() }, &[u, lam])
    }

    fn rate_var<'t>(&self, u: Var<'t>, lam: Var<'t>) -> Result<Var<'t>> {
        u.tape().custom(RateOp { model: self.clone() }, &[u, lam])
    }

    fn jacobians_var<'t>(&self, k: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let tape = k.tape();
        let (wn, wp) = self.scheme.weights();
        let mass = tape.constant(self.mass.clone());
        let neg_mass = tape.constant(self.mass.scale(-1.0));
        let jn = if wn != 0.0 { mass.add(k.scale(self.dt * wn))? } else { mass };
        let jp = if wp != 0.0 { neg_mass.add(k.scale(self.dt * wp))? } else { neg_mass };
        Ok((jn, jp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lorenz_fixed_point_and_value() {
        let lam = [10.0, 28.0, 8.0 / 3.0];
        assert_eq!(lorenz_drift(&[0.0; 3], &lam), [0.0; 3]);
        let f = lorenz_drift(&[1.0; 3], &lam);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 26.0);
        assert!((f[2] + 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn lorenz_only_explicit() {
        let sys = System::Lorenz {
            noise_cov: Matrix::identity(3),
        };
        assert!(TransitionModel::new(sys, Scheme::CrankNicolson, 0.01, 1).is_err());
    }
}
