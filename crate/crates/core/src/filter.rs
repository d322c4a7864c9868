//! Extended Kalman filtering over a [`TransitionModel`].
//!
//! The recursion is recorded on a [`Tape`] so the log marginal likelihood can
//! be differentiated with respect to the pseudo-observations and Λ. Numeric
//! entry points run the same code on a throwaway tape.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Scheme, System, TapeModel, TransitionModel};
use crate::error::{Error, Result};
use crate::linalg::{CustomOp, Matrix, Tape, Var};

/// Mean and covariance of a Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianState {
    pub m: Matrix,
    pub c: Matrix,
}

impl GaussianState {
    pub fn new(m: Matrix, c: Matrix) -> Result<Self> {
        let n = m.rows();
        if m.cols() != 1 || c.shape() != (n, n) {
            return Err(Error::shape("GaussianState", m.shape(), c.shape()));
        }
        Ok(GaussianState { m, c })
    }

    pub fn dim(&self) -> usize {
        self.m.rows()
    }

    /// Per-component standard deviations.
    pub fn sd(&self) -> Vec<f64> {
        self.c.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

/// Linear-Gaussian observation `x = H u + N(0, R)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationModel {
    pub h: Matrix,
    pub r: Matrix,
}

impl ObservationModel {
    pub fn new(h: Matrix, r: Matrix) -> Result<Self> {
        if r.shape() != (h.rows(), h.rows()) {
            return Err(Error::shape("ObservationModel", h.shape(), r.shape()));
        }
        Ok(ObservationModel { h, r })
    }

    pub fn n_x(&self) -> usize {
        self.h.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub states: Vec<GaussianState>,
    pub predicted: Vec<GaussianState>,
    pub loglik: f64,
}

/// Filter recursion recorded on a tape.
pub struct TapeFilter<'t> {
    pub loglik: Var<'t>,
    pub states: Vec<(Var<'t>, Var<'t>)>,
    pub predicted: Vec<(Var<'t>, Var<'t>)>,
}

/// Per-observation affine transition `u ↦ Φ u + β` with noise `Q_s`, valid
/// when the rate is affine in `u`.
struct LinearTransition<'t> {
    phi: Var<'t>,
    beta: Var<'t>,
    q: Var<'t>,
}

fn linear_transition<'t>(model: &Rc<TransitionModel>, lam: Var<'t>) -> Result<LinearTransition<'t>> {
    let tape = lam.tape();
    let n = model.dim();
    let zero = tape.constant(Matrix::zeros(n, 1));
    let k = model.rate_jacobian_var(zero, lam)?;
    let r0 = model.rate_var(zero, lam)?;
    let (jn, jp) = model.jacobians_var(k)?;
    let phi = jn.solve(jp.neg())?;
    let beta = jn.solve(r0.scale(-model.dt))?;
    let q = tape.constant(model.q().clone());
    let qd = jn.solve(jn.solve(q)?.t())?.symmetrize()?;
    let (mut phi_s, mut beta_s, mut q_s) = (phi, beta, qd);
    for _ in 1..model.substeps {
        phi_s = phi.matmul(phi_s)?;
        beta_s = phi.matmul(beta_s)?.add(beta)?;
        q_s = phi.matmul(q_s)?.matmul(phi.t())?.add(qd)?.symmetrize()?;
    }
    Ok(LinearTransition {
        phi: phi_s,
        beta: beta_s,
        q: q_s,
    })
}

/// One tangent-linear prediction step `(m, C) ↦ (m̂, Ĉ)`.
pub fn predict_var<'t>(model: &Rc<TransitionModel>, lam: Var<'t>, m: Var<'t>, c: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let tape = m.tape();
    let m_new = model.step_var(m, lam)?;
    let u_star = match model.scheme {
        Scheme::ExplicitEm => m,
        Scheme::ImplicitEuler => m_new,
        Scheme::CrankNicolson => m.add(m_new)?.scale(0.5),
    };
    let k = model.rate_jacobian_var(u_star, lam)?;
    let (jn, jp) = model.jacobians_var(k)?;
    let p = jp.matmul(c)?.matmul(jp.t())?.add(tape.constant(model.q().clone()))?;
    let c_new = if matches!(model.system, System::Lorenz { .. }) {
        p
    } else {
        jn.solve(jn.solve(p)?.t())?
    };
    Ok((m_new, c_new.symmetrize()?))
}

/// Largest number of pieces an implicit step is split into when Newton fails.
pub const MAX_STEP_SPLIT: usize = 16;

/// [`predict_var`] over one time step. If Newton fails on the full step, the
/// step is retried as 2, 4, ... equal pieces, each with its own share of the
/// process noise.
pub fn predict_step<'t>(model: &Rc<TransitionModel>, lam: Var<'t>, m: Var<'t>, c: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let mut err = match predict_var(model, lam, m, c) {
        Err(e @ Error::Divergence { .. }) if model.scheme != Scheme::ExplicitEm => e,
        other => return other,
    };
    let mut k = 2;
    while k <= MAX_STEP_SPLIT {
        let fine = Rc::new(model.with_dt(model.dt / k as f64)?);
        match (0..k).try_fold((m, c), |(m, c), _| predict_var(&fine, lam, m, c)) {
            Ok(out) => return Ok(out),
            Err(e @ Error::Divergence { .. }) => err = e,
            Err(e) => return Err(e),
        }
        k *= 2;
    }
    Err(err)
}

/// Kalman update with observation `x` (`n_x x 1`); returns `(m, C, log p(x))`.
pub fn update_var<'t>(
    obs: &ObservationModel,
    m_hat: Var<'t>,
    c_hat: Var<'t>,
    x: Var<'t>,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let tape = m_hat.tape();
    let h = tape.constant(obs.h.clone());
    let hc = h.matmul(c_hat)?;
    let s = hc.matmul(h.t())?.add(tape.constant(obs.r.clone()))?;
    let factor = tape.spd_factor(s)?;
    let v = x.sub(h.matmul(m_hat)?)?;
    let w = factor.solve(hc)?;
    let m = m_hat.add(w.t().matmul(v)?)?;
    let c = c_hat.sub(hc.t().matmul(w)?)?.symmetrize()?;
    let quad = v.dot(factor.solve(v)?)?;
    let n_x = obs.n_x() as f64;
    let ll = quad.add(factor.logdet())?.scale(-0.5).add(tape.scalar(-0.5 * n_x * (2.0 * PI).ln()))?;
    Ok((m, c, ll))
}

/// Runs the filter over `x_seq` (`N x n_x`, row `n` observes `u_{n+1}`).
pub fn run_filter_var<'t>(
    model: &Rc<TransitionModel>,
    lam: Var<'t>,
    x_seq: Var<'t>,
    obs: &ObservationModel,
    prior: &GaussianState,
    keep_states: bool,
) -> Result<TapeFilter<'t>> {
    let tape = lam.tape();
    let (n_steps, n_x) = x_seq.shape();
    if n_x != obs.n_x() || obs.h.cols() != model.dim() || prior.dim() != model.dim() {
        return Err(Error::shape("run_filter", (n_steps, n_x), obs.h.shape()));
    }
    let mut m = tape.constant(prior.m.clone());
    let mut c = tape.constant(prior.c.clone());
    let linear = if model.is_linear() {
        Some(linear_transition(model, lam)?)
    } else {
        None
    };
    let mut terms = Vec::with_capacity(n_steps);
    let mut states = Vec::new();
    let mut predicted = Vec::new();
    for n in 0..n_steps {
        let step = || -> Result<_> {
            let (m_hat, c_hat) = match &linear {
                Some(t) => {
                    let m_hat = t.phi.matmul(m)?.add(t.beta)?;
                    let c_hat = t.phi.matmul(c)?.matmul(t.phi.t())?.add(t.q)?.symmetrize()?;
                    (m_hat, c_hat)
                }
                None => {
                    let (mut mh, mut ch) = (m, c);
                    for _ in 0..model.substeps {
                        (mh, ch) = predict_step(model, lam, mh, ch)?;
                    }
                    (mh, ch)
                }
            };
            let x = x_seq.row(n)?.t();
            let (m_new, c_new, ll) = update_var(obs, m_hat, c_hat, x)?;
            Ok((m_hat, c_hat, m_new, c_new, ll))
        };
        let (m_hat, c_hat, m_new, c_new, ll) = step().map_err(|e| e.at_step(n + 1))?;
        if !ll.item().is_finite() {
            return Err(Error::NonFinite("filter log-likelihood").at_step(n + 1));
        }
        if keep_states {
            predicted.push((m_hat, c_hat));
            states.push((m_new, c_new));
        }
        terms.push(ll);
        m = m_new;
        c = c_new;
    }
    let loglik = if terms.is_empty() {
        tape.scalar(0.0)
    } else {
        Var::vstack(&terms)?.sum()
    };
    Ok(TapeFilter {
        loglik,
        states,
        predicted,
    })
}

/// Numeric filter run.
pub fn run_filter(
    model: &Rc<TransitionModel>,
    lam: &[f64],
    x_seq: &Matrix,
    obs: &ObservationModel,
    prior: &GaussianState,
) -> Result<FilterResult> {
    let tape = Tape::new();
    let lam = tape.constant(Matrix::col(lam));
    let x = tape.constant(x_seq.clone());
    let out = run_filter_var(model, lam, x, obs, prior, true)?;
    let collect = |v: &[(Var<'_>, Var<'_>)]| {
        v.iter()
            .map(|(m, c)| GaussianState {
                m: m.value(),
                c: c.value(),
            })
            .collect()
    };
    Ok(FilterResult {
        states: collect(&out.states),
        predicted: collect(&out.predicted),
        loglik: out.loglik.item(),
    })
}

/// One integration step of the prediction.
pub fn predict(model: &Rc<TransitionModel>, lam: &[f64], state: &GaussianState) -> Result<GaussianState> {
    let tape = Tape::new();
    let lam = tape.constant(Matrix::col(lam));
    let (m, c) = predict_var(model, lam, tape.constant(state.m.clone()), tape.constant(state.c.clone()))?;
    Ok(GaussianState { m: m.value(), c: c.value() })
}

/// Kalman update; returns the posterior and the innovation log-density.
pub fn update(pred: &GaussianState, x: &Matrix, obs: &ObservationModel) -> Result<(GaussianState, f64)> {
    let tape = Tape::new();
    let (m, c, ll) = update_var(
        obs,
        tape.constant(pred.m.clone()),
        tape.constant(pred.c.clone()),
        tape.constant(x.clone()),
    )?;
    Ok((GaussianState { m: m.value(), c: c.value() }, ll.item()))
}

/// `log p(x_{1:N} | Λ)` as a single tape node. The filter is recorded on a
/// private tape and differentiated immediately, so only one run's
/// intermediates are alive at a time.
pub struct FilterLoglik {
    model: Rc<TransitionModel>,
    obs: Rc<ObservationModel>,
    prior: Rc<GaussianState>,
    grads: RefCell<Option<(Matrix, Matrix)>>,
}

impl FilterLoglik {
    pub fn new(model: Rc<TransitionModel>, obs: Rc<ObservationModel>, prior: Rc<GaussianState>) -> Self {
        FilterLoglik {
            model,
            obs,
            prior,
            grads: RefCell::new(None),
        }
    }

    /// Records the node with inputs `x_seq` (`N x n_x`) and `lam` (`p x 1`).
    pub fn apply<'t>(self, x_seq: Var<'t>, lam: Var<'t>) -> Result<Var<'t>> {
        x_seq.tape().custom(self, &[x_seq, lam])
    }
}

impl CustomOp for FilterLoglik {
    fn name(&self) -> &'static str {
        "filter_loglik"
    }

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        let tape = Tape::new();
        let x = tape.leaf(inputs[0].clone());
        let lam = tape.leaf(inputs[1].clone());
        let out = run_filter_var(&self.model, lam, x, &self.obs, &self.prior, false)?;
        let g = tape.backward(out.loglik)?;
        *self.grads.borrow_mut() = Some((g.wrt(x), g.wrt(lam)));
        Ok(Matrix::scalar(out.loglik.item()))
    }

    fn vjp(&self, _inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Option<Matrix>>> {
        let cached = self.grads.borrow();
        let (gx, gl) = cached.as_ref().expect("forward runs before vjp");
        let s = grad.item();
        Ok(vec![Some(gx.scale(s)), Some(gl.scale(s))])
    }
}

/// Equally weighted Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePosterior {
    pub components: Vec<GaussianState>,
}

impl MixturePosterior {
    pub fn weights(&self) -> Vec<f64> {
        let k = self.components.len();
        vec![1.0 / k as f64; k]
    }

    pub fn mean(&self) -> Matrix {
        let k = self.components.len() as f64;
        let mut m = Matrix::zeros(self.components[0].dim(), 1);
        for c in &self.components {
            m.add_assign(&c.m);
        }
        m.scale(1.0 / k)
    }

    /// Mixture covariance: mean of the covariances plus covariance of the means.
    pub fn covariance(&self) -> Matrix {
        let k = self.components.len() as f64;
        let mean = self.mean();
        let n = mean.rows();
        let mut c = Matrix::zeros(n, n);
        for comp in &self.components {
            c.add_assign(&comp.c);
            let d = comp.m.sub(&mean).expect("components share a dimension");
            c.add_assign(&d.matmul_tr(&d).expect("column vectors"));
        }
        c.scale(1.0 / k)
    }

    pub fn sd(&self) -> Vec<f64> {
        self.covariance().diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

fn mixtures(runs: Vec<FilterResult>) -> Vec<MixturePosterior> {
    let n = runs[0].states.len();
    (0..n)
        .map(|t| MixturePosterior {
            components: runs.iter().map(|r| r.states[t].clone()).collect(),
        })
        .collect()
}

/// Per-time mixture over encoder samples `x⁽ⁱ⁾` at fixed Λ.
pub fn marginal_filter_encoder(
    model: &Rc<TransitionModel>,
    lam: &[f64],
    x_samples: &[Matrix],
    obs: &ObservationModel,
    prior: &GaussianState,
) -> Result<Vec<MixturePosterior>> {
    marginal_filter_joint(model, x_samples, &[lam.to_vec()], obs, prior)
}

/// Per-time mixture over every pair of encoder sample and parameter sample.
pub fn marginal_filter_joint(
    model: &Rc<TransitionModel>,
    x_samples: &[Matrix],
    lambda_samples: &[Vec<f64>],
    obs: &ObservationModel,
    prior: &GaussianState,
) -> Result<Vec<MixturePosterior>> {
    if x_samples.is_empty() || lambda_samples.is_empty() {
        return Err(Error::Param("marginal filtering needs at least one sample of each kind".into()));
    }
    let mut runs = Vec::with_capacity(x_samples.len() * lambda_samples.len());
    for x in x_samples {
        for lam in lambda_samples {
            runs.push(run_filter(model, lam, x, obs, prior)?);
        }
    }
    Ok(mixtures(runs))
}
