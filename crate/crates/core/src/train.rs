//! Deterministic training loop.
//!
//! All randomness comes from one ChaCha stream per epoch derived from the
//! configured seed, so a run resumed from a checkpoint after epoch `e`
//! reproduces the remaining epochs exactly.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elbo::{ElboNoise, ElboProblem, ElboTerms, VariationalLambda};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, ParamSet};
use crate::optim::{clip_global_norm, Adam};

/// Stream reserved for parameter initialization.
const INIT_STREAM: u64 = u64::MAX;

/// Fresh noise draws tried when the filter fails for a parameter sample
/// (e.g. a negative damping coefficient drawn from a wide `q_λ`).
pub const MAX_REDRAWS: u64 = 16;

/// Stream of redraw `attempt` in `epoch`; attempt 0 is the epoch's own stream.
fn noise_stream(epoch: u64, attempt: u64) -> u64 {
    epoch | (attempt << 40)
}

/// Failures that a different noise draw can avoid.
fn redrawable(e: &Error) -> bool {
    match e {
        Error::Filter { .. } | Error::NonFiniteLoss { .. } => true,
        Error::Training { source, .. } => redrawable(source),
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub m_lambda: usize,
    /// Encoder samples used when marginalizing the filtering posterior.
    pub m_x: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.m_lambda == 0 || self.m_x == 0 {
            return Err(Error::Config("sample counts must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// One metrics row. Epoch 0 evaluates the initial parameters; epoch `e ≥ 1`
/// holds the ELBO of the gradient step taken at the parameters of epoch
/// `e − 1` and the reconstruction error and `q_λ` after that step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub elbo: f64,
    pub nmse: f64,
    pub mu_lambda: Vec<f64>,
    pub sigma_lambda: Vec<f64>,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub params: ParamSet,
    pub adam: Adam,
}

pub struct Trainer<'a> {
    pub problem: &'a ElboProblem,
    pub config: &'a TrainConfig,
    /// Observations, `N x n_y`.
    pub y: &'a Matrix,
    /// Reference frames for the reconstruction error (clean data if known).
    pub y_ref: &'a Matrix,
}

pub fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<'a> Trainer<'a> {
    pub fn new(problem: &'a ElboProblem, config: &'a TrainConfig, y: &'a Matrix, y_ref: &'a Matrix) -> Result<Self> {
        config.validate()?;
        if y.cols() != problem.codec.n_y() {
            return Err(Error::Config(format!(
                "episode frames have {} values but the decoder produces {}",
                y.cols(),
                problem.codec.n_y()
            )));
        }
        if y.shape() != y_ref.shape() {
            return Err(Error::shape("reference frames", y.shape(), y_ref.shape()));
        }
        Ok(Trainer { problem, config, y, y_ref })
    }

    pub fn init(&self) -> Result<TrainState> {
        let params = self.problem.init_params(&mut epoch_rng(self.config.seed, INIT_STREAM))?;
        let adam = Adam::new(&params);
        Ok(TrainState { epoch: 0, params, adam })
    }

    fn record(&self, epoch: usize, elbo: f64, params: &ParamSet) -> Result<EpochRecord> {
        let nmse = self.problem.nmse(params, self.y, self.y_ref).map_err(|e| wrap(epoch, e))?;
        let (mu_lambda, sigma_lambda) = match VariationalLambda::from_params(params) {
            Some(q) => {
                let s = q.sigma();
                (q.mu, s)
            }
            None => (Vec::new(), Vec::new()),
        };
        Ok(EpochRecord {
            epoch,
            elbo,
            nmse,
            mu_lambda,
            sigma_lambda,
            wallclock_s: 0.0,
        })
    }

    fn check_finite(&self, epoch: usize, terms: &ElboTerms<f64>, params: &ParamSet) -> Result<()> {
        if terms.total.is_finite() {
            return Ok(());
        }
        let q = VariationalLambda::from_params(params);
        Err(Error::NonFiniteLoss {
            epoch,
            snapshot: format!(
                "reconstruction={} log_q={} loglik={} kl={} q_lambda={:?}",
                terms.reconstruction, terms.log_q, terms.loglik, terms.kl, q
            ),
        })
    }

    /// Runs `attempt` on the epoch's noise, redrawing after failures that a
    /// different sample can avoid.
    fn with_redraws<T>(&self, epoch: usize, mut attempt: impl FnMut(&ElboNoise) -> Result<T>) -> Result<T> {
        let mut k = 0;
        loop {
            let mut rng = epoch_rng(self.config.seed, noise_stream(epoch as u64, k));
            let noise = self.problem.draw_noise(self.y.rows(), &mut rng);
            match attempt(&noise) {
                Err(e) if redrawable(&e) && k + 1 < MAX_REDRAWS => k += 1,
                r => return r,
            }
        }
    }

    /// ELBO estimate at the current parameters (stream `state.epoch`).
    pub fn evaluate(&self, state: &TrainState) -> Result<EpochRecord> {
        let epoch = state.epoch;
        let total = self.with_redraws(epoch, |noise| {
            let terms = self.problem.elbo(&state.params, self.y, noise).map_err(|e| wrap(epoch, e))?;
            self.check_finite(epoch, &terms, &state.params)?;
            Ok(terms.total)
        })?;
        self.record(epoch, total, &state.params)
    }

    /// One Adam ascent step on the ELBO.
    pub fn step(&self, state: &mut TrainState) -> Result<EpochRecord> {
        let epoch = state.epoch + 1;
        let (total, grads) = self.with_redraws(epoch, |noise| {
            let (terms, grads) = self
                .problem
                .elbo_and_gradient(&state.params, self.y, noise)
                .map_err(|e| wrap(epoch, e))?;
            self.check_finite(epoch, &terms, &state.params)?;
            Ok((terms.total, grads))
        })?;
        let flat = grads.flatten();
        if flat.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                epoch,
                snapshot: format!("non-finite gradient with ELBO {total}"),
            });
        }
        let mut ascent = grads.unflatten(&flat.iter().map(|g| -g).collect::<Vec<_>>())?;
        clip_global_norm(&mut ascent, self.config.clip_norm);
        state
            .adam
            .step(&mut state.params, &ascent, self.config.learning_rate)
            .map_err(|e| wrap(epoch, e))?;
        state.epoch = epoch;
        self.record(epoch, total, &state.params)
    }

    /// Trains until `config.epochs`, emitting the epoch-0 evaluation first on
    /// a fresh state. `on_epoch` sees every record with the state after it.
    pub fn run(&self, state: &mut TrainState, mut on_epoch: impl FnMut(&EpochRecord, &TrainState) -> Result<()>) -> Result<Vec<EpochRecord>> {
        let mut out = Vec::new();
        if state.epoch == 0 {
            let rec = self.evaluate(state)?;
            on_epoch(&rec, state)?;
            out.push(rec);
        }
        while state.epoch < self.config.epochs {
            let rec = self.step(state)?;
            on_epoch(&rec, state)?;
            out.push(rec);
        }
        Ok(out)
    }
}

fn wrap(epoch: usize, e: Error) -> Error {
    match e {
        e @ (Error::Training { .. } | Error::NonFiniteLoss { .. }) => e,
        e => Error::Training {
            epoch,
            source: alloc::boxed::Box::new(e),
        },
    }
}
