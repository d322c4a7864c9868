//! Amortized encoders `q_φ(x_n | y_n)` and decoders `p_θ(y_n | x_n)`.
//!
//! Networks act on whole sequences at once: row `n` of the input is frame `n`,
//! so every time index shares the same weights.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, ParamSet, ParamVars, Tape, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const PROB_CLAMP: f64 = 1e-7;
pub const LOG_SIGMA_BIAS_INIT: f64 = -1.0;

/// How stored weight matrices map to the weights used in the forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScale {
    /// Stored weights are used as they are.
    #[default]
    Standard,
    /// Stored weights are multiplied by `√(2 / (fan_in + fan_out))`, so an
    /// optimizer step moves every layer's output by a similar amount
    /// regardless of its width.
    FanScaled,
}

impl WeightScale {
    pub fn gain(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            WeightScale::Standard => 1.0,
            WeightScale::FanScaled => (2.0 / (fan_in + fan_out) as f64).sqrt(),
        }
    }
}

/// Fully connected LeakyReLU network with one or more linear output heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub prefix: String,
    pub input: usize,
    pub hidden: Vec<usize>,
    pub heads: Vec<(String, usize)>,
    #[serde(default)]
    pub weights: WeightScale,
}

impl MlpSpec {
    pub fn new(prefix: &str, input: usize, hidden: &[usize], heads: &[(&str, usize)]) -> Self {
        MlpSpec {
            prefix: prefix.into(),
            input,
            hidden: hidden.to_vec(),
            heads: heads.iter().map(|(n, s)| (String::from(*n), *s)).collect(),
            weights: WeightScale::Standard,
        }
    }

    pub fn with_weights(mut self, weights: WeightScale) -> Self {
        self.weights = weights;
        self
    }

    fn layer_name(&self, kind: &str, k: usize) -> String {
        format!("{}.{kind}{k}", self.prefix)
    }

    fn head_name(&self, kind: &str, head: &str) -> String {
        format!("{}.{head}.{kind}", self.prefix)
    }

    /// Adds weights and zero biases to `params`. The weights used in the
    /// forward pass start Xavier-uniform whatever the [`WeightScale`].
    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        let weights = self.weights;
        let unit = |r: usize, c: usize, rng: &mut dyn rand::RngCore| {
            let a = (6.0 / (r + c) as f64).sqrt() / weights.gain(r, c);
            Matrix::from_fn(r, c, |_, _| rng.random_range(-a..a))
        };
        let mut fan_in = self.input;
        for (k, &width) in self.hidden.iter().enumerate() {
            params.insert(&self.layer_name("w", k), unit(fan_in, width, rng))?;
            params.insert(&self.layer_name("b", k), Matrix::zeros(1, width))?;
            fan_in = width;
        }
        for (head, size) in &self.heads {
            params.insert(&self.head_name("w", head), unit(fan_in, *size, rng))?;
            params.insert(&self.head_name("b", head), Matrix::zeros(1, *size))?;
        }
        Ok(())
    }

    /// One output per head, each with a row per input row.
    pub fn forward_var<'t>(&self, vars: &ParamVars<'t>, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        let mut h = x;
        for k in 0..self.hidden.len() {
            let w = vars.slot(&self.layer_name("w", k));
            let b = vars.slot(&self.layer_name("b", k));
            let (fan_in, fan_out) = w.shape();
            h = h.matmul(w)?.scale(self.weights.gain(fan_in, fan_out)).add_row(b)?.leaky_relu(LEAKY_SLOPE);
        }
        self.heads
            .iter()
            .map(|(head, _)| {
                let w = vars.slot(&self.head_name("w", head));
                let b = vars.slot(&self.head_name("b", head));
                let (fan_in, fan_out) = w.shape();
                h.matmul(w)?.scale(self.weights.gain(fan_in, fan_out)).add_row(b)
            })
            .collect()
    }

    pub fn forward(&self, params: &ParamSet, x: &Matrix) -> Result<Vec<Matrix>> {
        let tape = Tape::new();
        let vars = params.on_tape(&tape);
        let out = self.forward_var(&vars, tape.constant(x.clone()))?;
        let vals: Vec<Matrix> = out.iter().map(Var::value).collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output"));
        }
        Ok(vals)
    }
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-a..a))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Encoder {
    /// Heads `mu` and `log_sigma`.
    Mlp(MlpSpec),
    /// `N((wᵀw)⁻¹wᵀy, η²(wᵀw)⁻¹)`, tied to a linear decoder.
    PseudoInverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Decoder {
    Bernoulli { net: MlpSpec },
    Gaussian { net: MlpSpec, eta: f64 },
    Linear { n_y: usize, n_x: usize, eta: f64 },
}

pub const LINEAR_W: &str = "dec.w";

/// Encoder/decoder pair with their parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codec {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Encoder moments for a whole sequence.
pub enum Posterior<'t> {
    /// Mean and per-entry standard deviation, both `N x n_x`.
    Diagonal { mu: Var<'t>, log_sigma: Var<'t> },
    /// Mean `N x n_x` and the tied linear decoder weights `w` (`n_y x n_x`).
    PseudoInverse { mu: Var<'t>, w: Var<'t>, eta: f64 },
}

impl<'t> Posterior<'t> {
    pub fn mean(&self) -> Var<'t> {
        match self {
            Posterior::Diagonal { mu, .. } | Posterior::PseudoInverse { mu, .. } => *mu,
        }
    }

    /// Reparameterized sample. `eps` is `N x n_x` for diagonal posteriors and
    /// `N x n_y` for the pseudo-inverse encoder.
    pub fn sample(&self, eps: &Matrix) -> Result<Var<'t>> {
        match self {
            Posterior::Diagonal { mu, log_sigma } => {
                let e = mu.tape().constant(eps.clone());
                mu.add(log_sigma.exp().mul(e)?)
            }
            Posterior::PseudoInverse { mu, w, eta } => {
                let e = mu.tape().constant(eps.scale(*eta));
                let wtw = w.t().matmul(*w)?;
                // rows: ((wᵀw)⁻¹ wᵀ ξ_n)ᵀ
                let delta = wtw.solve_spd(w.t().matmul(e.t())?)?.t();
                mu.add(delta)
            }
        }
    }

    /// `Σ_n log q(x_n | y_n)` at the sample `x`.
    pub fn log_density(&self, x: Var<'t>) -> Result<Var<'t>> {
        let (n, n_x) = x.shape();
        let tape = x.tape();
        let norm = tape.scalar(-0.5 * (n * n_x) as f64 * (2.0 * PI).ln());
        match self {
            Posterior::Diagonal { mu, log_sigma } => {
                let z = x.sub(*mu)?.mul(log_sigma.neg().exp())?;
                z.square().sum().scale(-0.5).sub(log_sigma.sum())?.add(norm)
            }
            Posterior::PseudoInverse { mu, w, eta } => {
                let d = x.sub(*mu)?;
                let quad = d.matmul(w.t())?.square().sum().scale(-0.5 / (eta * eta));
                let wtw = w.t().matmul(*w)?;
                // −½ N logdet Σ with Σ = η²(wᵀw)⁻¹
                let logdet = wtw.logdet_spd()?.scale(0.5 * n as f64);
                let c = tape.scalar(-((n * n_x) as f64) * eta.ln());
                quad.add(logdet)?.add(c)?.add(norm)
            }
        }
    }
}

impl Codec {
    pub fn n_x(&self) -> usize {
        match &self.decoder {
            Decoder::Bernoulli { net } | Decoder::Gaussian { net, .. } => net.input,
            Decoder::Linear { n_x, .. } => *n_x,
        }
    }

    pub fn n_y(&self) -> usize {
        match &self.decoder {
            Decoder::Bernoulli { net } | Decoder::Gaussian { net, .. } => net.heads[0].1,
            Decoder::Linear { n_y, .. } => *n_y,
        }
    }

    /// Width of the noise needed by [`Posterior::sample`].
    pub fn noise_width(&self) -> usize {
        match self.encoder {
            Encoder::Mlp(_) => self.n_x(),
            Encoder::PseudoInverse => self.n_y(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.encoder, &self.decoder) {
            (Encoder::PseudoInverse, Decoder::Linear { n_y, n_x, eta }) => {
                if n_y < n_x {
                    return Err(Error::Param(format!("pseudo-inverse encoder needs n_y ≥ n_x, got {n_y} < {n_x}")));
                }
                check_eta(*eta)
            }
            (Encoder::PseudoInverse, _) => Err(Error::Param("the pseudo-inverse encoder requires a linear decoder".into())),
            (Encoder::Mlp(enc), dec) => {
                let heads: Vec<&str> = enc.heads.iter().map(|(h, _)| h.as_str()).collect();
                if heads != ["mu", "log_sigma"] || enc.heads.iter().any(|(_, s)| *s != self.n_x()) {
                    return Err(Error::Param("encoder heads must be mu and log_sigma of width n_x".into()));
                }
                if enc.input != self.n_y() {
                    return Err(Error::Param(format!("encoder input {} does not match n_y {}", enc.input, self.n_y())));
                }
                match dec {
                    Decoder::Gaussian { eta, .. } | Decoder::Linear { eta, .. } => check_eta(*eta),
                    Decoder::Bernoulli { .. } => Ok(()),
                }
            }
        }
    }

    /// Fresh parameters for both networks.
    pub fn init(&self, rng: &mut impl Rng) -> Result<ParamSet> {
        self.validate()?;
        let mut p = ParamSet::new();
        if let Encoder::Mlp(enc) = &self.encoder {
            enc.init(&mut p, rng)?;
            let b = enc.head_name("b", "log_sigma");
            let cols = p.slot(&b).cols();
            p.set(&b, Matrix::filled(1, cols, LOG_SIGMA_BIAS_INIT))?;
        }
        match &self.decoder {
            Decoder::Bernoulli { net } | Decoder::Gaussian { net, .. } => net.init(&mut p, rng)?,
            Decoder::Linear { n_y, n_x, .. } => p.insert(LINEAR_W, xavier(*n_y, *n_x, rng))?,
        }
        Ok(p)
    }

    pub fn encode_var<'t>(&self, vars: &ParamVars<'t>, y: Var<'t>) -> Result<Posterior<'t>> {
        match &self.encoder {
            Encoder::Mlp(enc) => {
                let out = enc.forward_var(vars, y)?;
                Ok(Posterior::Diagonal {
                    mu: out[0],
                    log_sigma: out[1],
                })
            }
            Encoder::PseudoInverse => {
                let Decoder::Linear { eta, .. } = self.decoder else {
                    return Err(Error::Param("the pseudo-inverse encoder requires a linear decoder".into()));
                };
                let w = vars.slot(LINEAR_W);
                let wtw = w.t().matmul(w)?;
                let mu = wtw.solve_spd(w.t().matmul(y.t())?)?.t();
                Ok(Posterior::PseudoInverse { mu, w, eta })
            }
        }
    }

    /// Decoder mean (Gaussian/linear) or pixel probabilities (Bernoulli).
    pub fn decode_var<'t>(&self, vars: &ParamVars<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match &self.decoder {
            Decoder::Bernoulli { net } => Ok(net.forward_var(vars, x)?[0].sigmoid()),
            Decoder::Gaussian { net, .. } => Ok(net.forward_var(vars, x)?[0]),
            Decoder::Linear { .. } => x.matmul(vars.slot(LINEAR_W).t()),
        }
    }

    /// `Σ_n log p_θ(y_n | x_n)`.
    pub fn log_likelihood_var<'t>(&self, vars: &ParamVars<'t>, x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
        let out = self.decode_var(vars, x)?;
        match &self.decoder {
            Decoder::Bernoulli { .. } => bernoulli_loglik_var(out, y),
            Decoder::Gaussian { eta, .. } | Decoder::Linear { eta, .. } => gaussian_loglik_var(out, y, *eta),
        }
    }

    /// Numeric `(mu, sigma)` of the encoder for every row of `y`. For the
    /// pseudo-inverse encoder `sigma` holds the marginal standard deviations.
    pub fn encode(&self, params: &ParamSet, y: &Matrix) -> Result<(Matrix, Matrix)> {
        let tape = Tape::new();
        let vars = params.on_tape(&tape);
        let post = self.encode_var(&vars, tape.constant(y.clone()))?;
        let mu = post.mean().value();
        let sigma = match &post {
            Posterior::Diagonal { log_sigma, .. } => log_sigma.value().map(|v| v.exp()),
            Posterior::PseudoInverse { w, eta, .. } => {
                let (_, cov) = pinv_encode(&Matrix::zeros(w.shape().0, 1), &w.value(), *eta)?;
                let sd: Vec<f64> = cov.diagonal().iter().map(|v| v.sqrt()).collect();
                Matrix::from_fn(mu.rows(), mu.cols(), |_, j| sd[j])
            }
        };
        if !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::NonFinite("encoder output"));
        }
        Ok((mu, sigma))
    }

    pub fn decode(&self, params: &ParamSet, x: &Matrix) -> Result<Matrix> {
        let tape = Tape::new();
        let vars = params.on_tape(&tape);
        Ok(self.decode_var(&vars, tape.constant(x.clone()))?.value())
    }

    /// Decoder applied to the encoder mean.
    pub fn reconstruct(&self, params: &ParamSet, y: &Matrix) -> Result<Matrix> {
        let (mu, _) = self.encode(params, y)?;
        self.decode(params, &mu)
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::Param(format!("observation noise must be positive, got {eta}")))
    }
}

/// `Σ y ln p + (1 − y) ln(1 − p)` with `p` clamped away from 0 and 1.
pub fn bernoulli_loglik_var<'t>(probs: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    let tape = probs.tape();
    let p = probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let (r, c) = y.shape();
    let one = tape.constant(Matrix::filled(r, c, 1.0));
    let pos = y.mul(p.ln())?.sum();
    let neg = one.sub(y)?.mul(one.sub(p)?.ln())?.sum();
    pos.add(neg)
}

/// `−(N n_y / 2) log(2πη²) − ‖y − mean‖² / (2η²)`.
pub fn gaussian_loglik_var<'t>(mean: Var<'t>, y: Var<'t>, eta: f64) -> Result<Var<'t>> {
    let (r, c) = y.shape();
    let norm = -0.5 * (r * c) as f64 * (2.0 * PI * eta * eta).ln();
    let quad = y.sub(mean)?.square().sum().scale(-0.5 / (eta * eta));
    quad.add(y.tape().scalar(norm))
}

pub fn reparam_sample(mu: &Matrix, sigma: &Matrix, eps: &Matrix) -> Result<Matrix> {
    mu.add(&sigma.hadamard(eps)?)
}

/// Clamped Bernoulli probabilities of an MLP decoder with a single head.
pub fn decode_bernoulli(x: &Matrix, net: &MlpSpec, params: &ParamSet) -> Result<Matrix> {
    Ok(net.forward(params, x)?[0].map(|v| crate::linalg::tape::sigmoid(v).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)))
}

/// Gaussian decoder mean and variance `η²`.
pub fn decode_gaussian(x: &Matrix, net: &MlpSpec, params: &ParamSet, eta: f64) -> Result<(Matrix, f64)> {
    check_eta(eta)?;
    Ok((net.forward(params, x)?.swap_remove(0), eta * eta))
}

pub fn bernoulli_loglik(probs: &Matrix, y: &Matrix) -> Result<f64> {
    let tape = Tape::new();
    Ok(bernoulli_loglik_var(tape.constant(probs.clone()), tape.constant(y.clone()))?.item())
}

pub fn gaussian_loglik(mean: &Matrix, y: &Matrix, eta: f64) -> Result<f64> {
    let tape = Tape::new();
    Ok(gaussian_loglik_var(tape.constant(mean.clone()), tape.constant(y.clone()), eta)?.item())
}

/// Moments `((wᵀw)⁻¹wᵀy, η²(wᵀw)⁻¹)` of the pseudo-inverse encoder for one
/// column `y`.
pub fn pinv_encode(y: &Matrix, w: &Matrix, eta: f64) -> Result<(Matrix, Matrix)> {
    let wtw = w.tr_matmul(w)?;
    let chol = crate::linalg::Cholesky::new_strict(&wtw)?;
    let mu = chol.solve(&w.tr_matmul(y)?)?;
    Ok((mu, chol.inverse().scale(eta * eta)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_outputs() {
        let spec = MlpSpec::new("enc", 3, &[4, 4], &[("mu", 2), ("log_sigma", 2)]);
        let mut p = ParamSet::new();
        spec.init(&mut p, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
        let zero = p.zeros_like();
        let out = spec.forward(&zero, &Matrix::filled(5, 3, 0.7)).unwrap();
        assert_eq!(out[0], Matrix::zeros(5, 2));
        assert_eq!(out[1].map(|v| v.exp()), Matrix::filled(5, 2, 1.0));
    }

    use rand::SeedableRng;

    #[test]
    fn leaky_relu_slope() {
        let tape = Tape::new();
        let x = tape.constant(Matrix::row_vec(&[-1.0, 2.0]));
        assert_eq!(x.leaky_relu(LEAKY_SLOPE).value().as_slice(), &[-0.01, 2.0]);
    }
}
