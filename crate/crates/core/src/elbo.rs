//! The evidence lower bound
//!
//! ```text
//! log p_θ(y | x) − log q_φ(x | y) + E_{q_λ}[log p(x | Λ)] − KL(q_λ ‖ p(Λ))
//! ```
//!
//! estimated with one encoder sample and `M_λ` reparameterized parameter
//! samples.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::dynamics::{ModelParams, TransitionModel};
use crate::error::{Error, Result};
use crate::filter::{marginal_filter_joint, FilterLoglik, GaussianState, MixturePosterior, ObservationModel};
use crate::linalg::{Matrix, ParamSet, ParamVars, Tape, Var};

pub const LAMBDA_MU: &str = "lambda.mu";
pub const LAMBDA_LOG_SIGMA: &str = "lambda.log_sigma";

/// Diagonal Gaussian `q_λ` over the free entries of Λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalLambda {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl VariationalLambda {
    /// `q_λ` equal to the prior of the free entries.
    pub fn from_prior(params: &ModelParams) -> Self {
        let (mean, var) = params.free_prior();
        VariationalLambda {
            mu: mean,
            log_sigma: var.iter().map(|v| 0.5 * v.ln()).collect(),
        }
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|v| v.exp()).collect()
    }

    pub fn from_params(params: &ParamSet) -> Option<Self> {
        Some(VariationalLambda {
            mu: params.get(LAMBDA_MU)?.as_slice().to_vec(),
            log_sigma: params.get(LAMBDA_LOG_SIGMA)?.as_slice().to_vec(),
        })
    }
}

/// `Σ_i [log(σ₀ᵢ/σᵢ) + (σᵢ² + (μᵢ − μ₀ᵢ)²)/(2σ₀ᵢ²) − ½]`.
pub fn kl_gaussian_diag(q: &VariationalLambda, prior_mean: &[f64], prior_var: &[f64]) -> f64 {
    let tape = Tape::new();
    kl_var(
        tape.constant(Matrix::col(&q.mu)),
        tape.constant(Matrix::col(&q.log_sigma)),
        prior_mean,
        prior_var,
    )
    .map(|v| v.item())
    .unwrap_or(0.0)
}

fn kl_var<'t>(mu: Var<'t>, log_sigma: Var<'t>, prior_mean: &[f64], prior_var: &[f64]) -> Result<Var<'t>> {
    let tape = mu.tape();
    let k = prior_mean.len();
    let m0 = tape.constant(Matrix::col(prior_mean));
    let inv2v = tape.constant(Matrix::from_fn(k, 1, |i, _| 0.5 / prior_var[i]));
    let c: f64 = prior_var.iter().map(|v| 0.5 * v.ln() - 0.5).sum();
    let var = log_sigma.scale(2.0).exp();
    let spread = var.add(mu.sub(m0)?.square())?.mul(inv2v)?.sum();
    spread.sub(log_sigma.sum())?.add(tape.scalar(c))
}

fn diag_logpdf(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * ((x - m) * (x - m) / v + (2.0 * PI * v).ln()))
        .sum()
}

/// Monte-Carlo estimate of `KL(q ‖ p)` = `E_q[log q − log p]` for an arbitrary
/// prior log-density.
pub fn mc_kl_fallback(q: &VariationalLambda, prior_logpdf: impl Fn(&[f64]) -> f64, m: usize, rng: &mut impl Rng) -> Result<f64> {
    if m == 0 {
        return Err(Error::Param("Monte-Carlo KL needs at least one sample".into()));
    }
    let sigma = q.sigma();
    let var: Vec<f64> = sigma.iter().map(|s| s * s).collect();
    let mut acc = 0.0;
    let mut lam = alloc::vec![0.0; q.mu.len()];
    for _ in 0..m {
        for i in 0..lam.len() {
            let e: f64 = rng.sample(StandardNormal);
            lam[i] = q.mu[i] + sigma[i] * e;
        }
        acc += diag_logpdf(&lam, &q.mu, &var) - prior_logpdf(&lam);
    }
    Ok(acc / m as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlMode {
    Analytic,
    /// Reuse the `M_λ` parameter samples of the likelihood term.
    MonteCarlo,
}

/// Everything the ELBO needs besides the trainable parameters.
#[derive(Debug, Clone)]
pub struct ElboProblem {
    pub codec: Codec,
    pub model: Rc<TransitionModel>,
    pub obs: Rc<ObservationModel>,
    pub prior_u0: Rc<GaussianState>,
    pub lambda: ModelParams,
    pub m_lambda: usize,
    pub kl_mode: KlMode,
}

/// Standard-normal draws for one ELBO evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboNoise {
    /// Encoder noise, `N x codec.noise_width()`.
    pub x: Matrix,
    /// One `k x 1` draw per parameter sample.
    pub lambda: Vec<Matrix>,
}

/// ELBO terms; `total = reconstruction − log_q + loglik − kl`.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms<T> {
    pub reconstruction: T,
    pub log_q: T,
    pub loglik: T,
    pub kl: T,
    pub total: T,
}

impl ElboTerms<Var<'_>> {
    pub fn values(&self) -> ElboTerms<f64> {
        ElboTerms {
            reconstruction: self.reconstruction.item(),
            log_q: self.log_q.item(),
            loglik: self.loglik.item(),
            kl: self.kl.item(),
            total: self.total.item(),
        }
    }
}

impl ElboProblem {
    pub fn n_free(&self) -> usize {
        self.lambda.n_free()
    }

    /// Codec parameters plus `q_λ` initialized at the prior.
    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamSet> {
        let mut p = self.codec.init(rng)?;
        if self.n_free() > 0 {
            let q = VariationalLambda::from_prior(&self.lambda);
            p.insert(LAMBDA_MU, Matrix::col(&q.mu))?;
            p.insert(LAMBDA_LOG_SIGMA, Matrix::col(&q.log_sigma))?;
        }
        Ok(p)
    }

    pub fn draw_noise(&self, n_frames: usize, rng: &mut impl Rng) -> ElboNoise {
        let x = Matrix::from_fn(n_frames, self.codec.noise_width(), |_, _| rng.sample(StandardNormal));
        let k = self.n_free();
        let lambda = if k == 0 {
            Vec::new()
        } else {
            (0..self.m_lambda.max(1))
                .map(|_| Matrix::from_fn(k, 1, |_, _| rng.sample(StandardNormal)))
                .collect()
        };
        ElboNoise { x, lambda }
    }

    /// Records the ELBO for observations `y` (`N x n_y`).
    pub fn elbo_var<'t>(&self, vars: &ParamVars<'t>, y: &Matrix, noise: &ElboNoise) -> Result<ElboTerms<Var<'t>>> {
        let tape = vars.vars().first().map(|v| v.tape()).ok_or_else(|| Error::Param("empty parameter set".into()))?;
        let yv = tape.constant(y.clone());
        let post = self.codec.encode_var(vars, yv)?;
        let x = post.sample(&noise.x)?;
        let reconstruction = self.codec.log_likelihood_var(vars, x, yv)?;
        let log_q = post.log_density(x)?;

        let filter_op = || FilterLoglik::new(self.model.clone(), self.obs.clone(), self.prior_u0.clone());
        let (loglik, kl) = if self.n_free() == 0 {
            let lam = tape.constant(self.lambda.column());
            (filter_op().apply(x, lam)?, tape.scalar(0.0))
        } else {
            let mu = vars.slot(LAMBDA_MU);
            let log_sigma = vars.slot(LAMBDA_LOG_SIGMA);
            let sigma = log_sigma.exp();
            let select = tape.constant(self.lambda.selection());
            let fixed = tape.constant(self.lambda.fixed_part());
            let (pm, pv) = self.lambda.free_prior();
            let mut lls = Vec::with_capacity(noise.lambda.len());
            let mut mc_kl = Vec::new();
            for eps in &noise.lambda {
                let free = mu.add(sigma.mul(tape.constant(eps.clone()))?)?;
                let lam = fixed.add(select.matmul(free)?)?;
                lls.push(filter_op().apply(x, lam)?);
                if self.kl_mode == KlMode::MonteCarlo {
                    mc_kl.push(self.mc_kl_term(free, mu, log_sigma, &pm, &pv)?);
                }
            }
            let inv_m = 1.0 / noise.lambda.len() as f64;
            let loglik = Var::vstack(&lls)?.sum().scale(inv_m);
            let kl = match self.kl_mode {
                KlMode::Analytic => kl_var(mu, log_sigma, &pm, &pv)?,
                KlMode::MonteCarlo => Var::vstack(&mc_kl)?.sum().scale(inv_m),
            };
            (loglik, kl)
        };
        let total = reconstruction.sub(log_q)?.add(loglik)?.sub(kl)?;
        Ok(ElboTerms {
            reconstruction,
            log_q,
            loglik,
            kl,
            total,
        })
    }

    /// `log q_λ(Λ) − log p(Λ)` at one reparameterized sample.
    fn mc_kl_term<'t>(&self, free: Var<'t>, mu: Var<'t>, log_sigma: Var<'t>, pm: &[f64], pv: &[f64]) -> Result<Var<'t>> {
        let tape = free.tape();
        let z = free.sub(mu)?.mul(log_sigma.neg().exp())?;
        let log_q = z.square().sum().scale(-0.5).sub(log_sigma.sum())?;
        let inv2v = tape.constant(Matrix::from_fn(pm.len(), 1, |i, _| 0.5 / pv[i]));
        let log_p = free.sub(tape.constant(Matrix::col(pm)))?.square().mul(inv2v)?.sum().neg();
        // the 2π terms of both densities cancel
        let c: f64 = pv.iter().map(|v| 0.5 * v.ln()).sum::<f64>();
        log_q.sub(log_p)?.add(tape.scalar(c))
    }

    /// Numeric ELBO terms.
    pub fn elbo(&self, params: &ParamSet, y: &Matrix, noise: &ElboNoise) -> Result<ElboTerms<f64>> {
        let tape = Tape::new();
        let vars = params.on_tape(&tape);
        Ok(self.elbo_var(&vars, y, noise)?.values())
    }

    /// ELBO value and its gradient with respect to every parameter slot. The
    /// gradient is zero when the ELBO is not finite.
    pub fn elbo_and_gradient(&self, params: &ParamSet, y: &Matrix, noise: &ElboNoise) -> Result<(ElboTerms<f64>, ParamSet)> {
        let tape = Tape::new();
        let vars = params.on_tape(&tape);
        let terms = self.elbo_var(&vars, y, noise)?;
        let values = terms.values();
        if !values.total.is_finite() {
            return Ok((values, params.zeros_like()));
        }
        let grads = tape.backward(terms.total)?;
        let mut out = params.zeros_like();
        for (slot, v) in out.values_mut().iter_mut().zip(vars.vars()) {
            *slot = grads.wrt(*v);
        }
        Ok((values, out))
    }

    /// Σ‖ŷ − y_ref‖² / Σ‖y_ref‖² with ŷ decoded from the encoder mean.
    pub fn nmse(&self, params: &ParamSet, y: &Matrix, y_ref: &Matrix) -> Result<f64> {
        let y_hat = self.codec.reconstruct(params, y)?;
        Ok(y_hat.sub(y_ref)?.norm_sq() / y_ref.norm_sq())
    }

    /// `m_x` draws of `x_{1:N}` from the encoder and `m_lambda` draws of the
    /// full parameter vector from `q_λ` (or the fixed values when nothing is
    /// free).
    pub fn posterior_samples(
        &self,
        params: &ParamSet,
        y: &Matrix,
        m_x: usize,
        m_lambda: usize,
        rng: &mut impl Rng,
    ) -> Result<(Vec<Matrix>, Vec<Vec<f64>>)> {
        let tape = Tape::new();
        let vars = params.on_tape(&tape);
        let post = self.codec.encode_var(&vars, tape.constant(y.clone()))?;
        let mut xs = Vec::with_capacity(m_x);
        for _ in 0..m_x {
            let eps = Matrix::from_fn(y.rows(), self.codec.noise_width(), |_, _| rng.sample(StandardNormal));
            xs.push(post.sample(&eps)?.value());
        }
        let lambdas = match VariationalLambda::from_params(params) {
            Some(q) if self.n_free() > 0 => {
                let sigma = q.sigma();
                let idx = self.lambda.free_indices();
                (0..m_lambda)
                    .map(|_| {
                        let mut lam = self.lambda.values.clone();
                        for (k, &i) in idx.iter().enumerate() {
                            let e: f64 = rng.sample(StandardNormal);
                            lam[i] = q.mu[k] + sigma[k] * e;
                        }
                        lam
                    })
                    .collect()
            }
            _ => alloc::vec![self.lambda.values.clone()],
        };
        Ok((xs, lambdas))
    }

    /// Filtering posterior of `u_n` marginalized over encoder and parameter
    /// samples.
    pub fn filtering_posterior(
        &self,
        params: &ParamSet,
        y: &Matrix,
        m_x: usize,
        m_lambda: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<MixturePosterior>> {
        let (xs, lambdas) = self.posterior_samples(params, y, m_x, m_lambda, rng)?;
        marginal_filter_joint(&self.model, &xs, &lambdas, &self.obs, &self.prior_u0)
    }

    pub fn describe(&self) -> alloc::string::String {
        format!(
            "n_u={} n_x={} n_y={} free_params={} m_lambda={}",
            self.model.dim(),
            self.obs.n_x(),
            self.codec.n_y(),
            self.n_free(),
            self.m_lambda
        )
    }
}
