//! Run configuration for the three reference experiments and construction
//! of the corresponding models.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, Decoder, Encoder, MlpSpec, WeightScale};
use crate::dynamics::{Coef, FemSystem, ModelParams, Scheme, System, TransitionModel};
use crate::elbo::{ElboProblem, KlMode};
use crate::error::{Error, Result};
use crate::fem::{self, Convection, Mesh1D};
use crate::filter::{GaussianState, ObservationModel};
use crate::linalg::Matrix;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Lorenz,
    Advection,
    Kdv,
}

impl Experiment {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lorenz" => Ok(Experiment::Lorenz),
            "advection" => Ok(Experiment::Advection),
            "kdv" => Ok(Experiment::Kdv),
            other => Err(Error::Config(format!("unknown experiment `{other}` (expected lorenz, advection or kdv)"))),
        }
    }

    /// Order of Λ expected by the dynamics.
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            Experiment::Lorenz => &["sigma", "r", "b"],
            Experiment::Advection => &["c"],
            Experiment::Kdv => &["alpha", "beta"],
        }
    }
}

/// Data generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_frames: usize,
    /// Lorenz initial state; PDE experiments use their fixed initial profile.
    pub u0: Vec<f64>,
    /// Per-pixel flip probability.
    pub salt_pepper: f64,
    pub frame_width: usize,
    pub frame_height: usize,
    /// Physical range mapped to the frame's rows (bottom, top).
    pub u_range: [f64; 2],
    /// Standard deviation of the Lorenz pseudo-data `x_n = u_{1,n} + w_n`.
    pub pseudo_obs_sd: f64,
    /// Lorenz velocity grid: points per axis and half-width.
    pub grid_points: usize,
    pub grid_half_width: f64,
    /// Parameter values used to generate the data.
    pub truth: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamPrior {
    pub value: f64,
    pub prior_mean: f64,
    pub prior_sd: f64,
    pub free: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_u: usize,
    pub n_x: usize,
    pub domain: [f64; 2],
    pub scheme: Scheme,
    pub dt: f64,
    pub substeps: usize,
    /// Forcing kernel amplitude and length scale.
    pub rho: f64,
    pub ell: f64,
    /// Pseudo-observation noise, `R = obs_sd² I`.
    pub obs_sd: f64,
    /// Lorenz diffusion, `L Lᵀ = process_sd² I`.
    pub process_sd: f64,
    /// Prior standard deviation of `u_0` around the known initial condition.
    pub u0_sd: f64,
    pub params: BTreeMap<String, ParamPrior>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    Bernoulli,
    Gaussian,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Mlp,
    PseudoInverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    pub hidden: Vec<usize>,
    pub eta: f64,
    /// Parametrization of the network weights.
    pub weights: WeightScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub m_lambda: usize,
    pub m_x: usize,
    pub clip_norm: f64,
    pub checkpoint_every: usize,
    pub kl: KlMode,
    /// Record elapsed time in the metrics; disable for byte-stable output.
    pub wallclock: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub codec: CodecConfig,
    pub train: TrainSection,
}

fn prior(value: f64, prior_mean: f64, prior_sd: f64, free: bool) -> ParamPrior {
    ParamPrior {
        value,
        prior_mean,
        prior_sd,
        free,
    }
}

fn map<T>(entries: Vec<(&str, T)>) -> BTreeMap<String, T> {
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

impl RunConfig {
    /// Defaults of the published experiment.
    pub fn preset(experiment: Experiment) -> Self {
        let train = |lr: f64| TrainSection {
            learning_rate: lr,
            epochs: 200,
            m_lambda: 4,
            m_x: 8,
            clip_norm: 100.0,
            checkpoint_every: 50,
            kl: KlMode::Analytic,
            wallclock: true,
        };
        let mlp_codec = CodecConfig {
            encoder: EncoderKind::Mlp,
            decoder: DecoderKind::Bernoulli,
            hidden: vec![128, 128],
            eta: 0.1,
            weights: WeightScale::Standard,
        };
        match experiment {
            Experiment::Lorenz => RunConfig {
                experiment,
                seed: 0,
                data: DataConfig {
                    n_frames: 150,
                    u0: vec![-3.7277, -3.8239, 21.1507],
                    salt_pepper: 0.0,
                    frame_width: 0,
                    frame_height: 0,
                    u_range: [0.0, 0.0],
                    pseudo_obs_sd: 0.4,
                    grid_points: 10,
                    grid_half_width: 4.0,
                    truth: map(vec![("sigma", 10.0), ("r", 28.0), ("b", 8.0 / 3.0)]),
                },
                model: ModelConfig {
                    n_u: 3,
                    n_x: 1,
                    domain: [0.0, 0.0],
                    scheme: Scheme::ExplicitEm,
                    dt: 0.001,
                    substeps: 40,
                    rho: 0.0,
                    ell: 1.0,
                    obs_sd: 0.4,
                    process_sd: 0.2,
                    u0_sd: 0.1,
                    params: map(vec![
                        ("sigma", prior(10.0, 30.0, 12.0, true)),
                        ("r", prior(28.0, 20.0, 10.0, true)),
                        ("b", prior(8.0 / 3.0, 5.0, 3.0, true)),
                    ]),
                },
                codec: CodecConfig {
                    encoder: EncoderKind::PseudoInverse,
                    decoder: DecoderKind::Linear,
                    hidden: vec![],
                    eta: 0.005,
                    weights: WeightScale::Standard,
                },
                train: train(1e-4),
            },
            Experiment::Advection => RunConfig {
                experiment,
                seed: 0,
                data: DataConfig {
                    n_frames: 200,
                    u0: vec![],
                    salt_pepper: 0.05,
                    frame_width: 28,
                    frame_height: 28,
                    u_range: [-0.2, 1.2],
                    pseudo_obs_sd: 0.0,
                    grid_points: 0,
                    grid_half_width: 0.0,
                    truth: map(vec![("c", 0.5)]),
                },
                model: ModelConfig {
                    n_u: 64,
                    n_x: 64,
                    domain: [0.0, 1.0],
                    scheme: Scheme::CrankNicolson,
                    dt: 0.02,
                    substeps: 10,
                    rho: 0.02,
                    ell: 0.1,
                    obs_sd: 0.1,
                    process_sd: 0.0,
                    u0_sd: 0.01,
                    params: map(vec![("c", prior(0.5, 0.5, 1.0, false))]),
                },
                codec: mlp_codec.clone(),
                train: train(0.001),
            },
            Experiment::Kdv => RunConfig {
                experiment,
                seed: 0,
                data: DataConfig {
                    n_frames: 100,
                    u0: vec![],
                    salt_pepper: 0.05,
                    frame_width: 64,
                    frame_height: 28,
                    u_range: [-2.5, 2.5],
                    pseudo_obs_sd: 0.0,
                    grid_points: 0,
                    grid_half_width: 0.0,
                    truth: map(vec![("alpha", 1.0), ("beta", 0.022 * 0.022)]),
                },
                model: ModelConfig {
                    n_u: 600,
                    n_x: 40,
                    domain: [0.0, 2.0],
                    scheme: Scheme::CrankNicolson,
                    dt: 0.01,
                    substeps: 1,
                    rho: 0.01,
                    ell: 0.2,
                    obs_sd: 0.05,
                    process_sd: 0.0,
                    u0_sd: 0.01,
                    params: map(vec![
                        ("alpha", prior(1.0, 1.5, 0.3, true)),
                        ("beta", prior(0.022 * 0.022, 0.022 * 0.022, 1.0, false)),
                    ]),
                },
                // plain weights blow up the encoder within a few epochs at this rate
                codec: CodecConfig {
                    weights: WeightScale::FanScaled,
                    ..mlp_codec
                },
                train: train(0.005),
            },
        }
    }

    pub fn n_y(&self) -> usize {
        match self.experiment {
            Experiment::Lorenz => 2 * self.data.grid_points * self.data.grid_points,
            _ => self.data.frame_width * self.data.frame_height,
        }
    }

    /// Checks cross-field consistency; returns every problem found.
    pub fn validate(&self) -> Result<()> {
        let mut errs: Vec<String> = Vec::new();
        let names = self.experiment.param_names();
        for n in names {
            if !self.model.params.contains_key(*n) {
                errs.push(format!("model.params.{n} is missing"));
            }
            if !self.data.truth.contains_key(*n) {
                errs.push(format!("data.truth.{n} is missing"));
            }
        }
        for k in self.model.params.keys().chain(self.data.truth.keys()) {
            if !names.contains(&k.as_str()) {
                errs.push(format!("unknown parameter `{k}` for this experiment"));
            }
        }
        for (k, p) in &self.model.params {
            if !(p.prior_sd > 0.0) {
                errs.push(format!("model.params.{k}.prior_sd must be positive"));
            }
        }
        if self.data.n_frames == 0 {
            errs.push("data.n_frames must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.data.salt_pepper) {
            errs.push("data.salt_pepper must lie in [0, 1]".into());
        }
        if !(self.model.dt > 0.0) || self.model.substeps == 0 {
            errs.push("model.dt must be positive and model.substeps at least 1".into());
        }
        if !(self.model.obs_sd > 0.0) {
            errs.push("model.obs_sd must be positive".into());
        }
        if !(self.model.u0_sd > 0.0) {
            errs.push("model.u0_sd must be positive".into());
        }
        match self.experiment {
            Experiment::Lorenz => {
                if self.model.n_u != 3 || self.model.n_x != 1 {
                    errs.push("the Lorenz model has n_u = 3 and n_x = 1".into());
                }
                if self.data.u0.len() != 3 {
                    errs.push("data.u0 must have three entries".into());
                }
                if self.data.grid_points < 1 {
                    errs.push("data.grid_points must be at least 1".into());
                }
            }
            _ => {
                if self.data.frame_width == 0 || self.data.frame_height == 0 {
                    errs.push("frame dimensions must be positive".into());
                }
                if !(self.data.u_range[1] > self.data.u_range[0]) {
                    errs.push("data.u_range must be increasing".into());
                }
                if !(self.model.domain[1] > self.model.domain[0]) {
                    errs.push("model.domain must be increasing".into());
                }
                if self.model.n_x == 0 {
                    errs.push("model.n_x must be positive".into());
                }
                let min_nodes = if self.experiment == Experiment::Kdv { 5 } else { 3 };
                if self.model.n_u < min_nodes {
                    errs.push(format!("model.n_u must be at least {min_nodes}"));
                }
                if !(self.model.ell > 0.0) || !(self.model.rho >= 0.0) {
                    errs.push("model.ell must be positive and model.rho non-negative".into());
                }
            }
        }
        if self.codec.encoder == EncoderKind::PseudoInverse && self.codec.decoder != DecoderKind::Linear {
            errs.push("codec.encoder = pseudo-inverse requires codec.decoder = linear".into());
        }
        if self.codec.decoder != DecoderKind::Bernoulli && !(self.codec.eta > 0.0) {
            errs.push("codec.eta must be positive".into());
        }
        if let Err(e) = self.train_config().validate() {
            errs.push(format!("{e}"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            m_lambda: self.train.m_lambda,
            m_x: self.train.m_x,
            seed: self.seed,
            clip_norm: self.train.clip_norm,
            checkpoint_every: self.train.checkpoint_every,
        }
    }

    pub fn model_params(&self) -> Result<ModelParams> {
        let names = self.experiment.param_names();
        let get = |n: &str| {
            self.model
                .params
                .get(n)
                .ok_or_else(|| Error::Config(format!("model.params.{n} is missing")))
        };
        let ps: Vec<&ParamPrior> = names.iter().map(|n| get(n)).collect::<Result<_>>()?;
        ModelParams::new(
            names.iter().map(|s| s.to_string()).collect(),
            ps.iter().map(|p| p.value).collect(),
            ps.iter().map(|p| p.prior_mean).collect(),
            ps.iter().map(|p| p.prior_sd * p.prior_sd).collect(),
            ps.iter().map(|p| p.free).collect(),
        )
    }

    pub fn truth_params(&self) -> Result<Vec<f64>> {
        self.experiment
            .param_names()
            .iter()
            .map(|n| {
                self.data
                    .truth
                    .get(*n)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("data.truth.{n} is missing")))
            })
            .collect()
    }

    pub fn mesh(&self) -> Result<Mesh1D> {
        Mesh1D::periodic(self.model.n_u, self.model.domain[0], self.model.domain[1])
    }

    /// Known initial condition at the model's nodes.
    pub fn initial_state(&self) -> Result<Matrix> {
        match self.experiment {
            Experiment::Lorenz => Ok(Matrix::col(&self.data.u0)),
            Experiment::Advection | Experiment::Kdv => {
                let mesh = self.mesh()?;
                Ok(Matrix::col(&mesh.nodes().iter().map(|&s| initial_profile(self.experiment, &mesh, s)).collect::<Vec<_>>()))
            }
        }
    }

    pub fn transition_model(&self) -> Result<TransitionModel> {
        let m = &self.model;
        let system = match self.experiment {
            Experiment::Lorenz => System::Lorenz {
                noise_cov: Matrix::identity(3).scale(m.process_sd * m.process_sd),
            },
            Experiment::Advection => {
                let mesh = self.mesh()?;
                System::Fem(FemSystem {
                    mass: fem::assemble_mass(&mesh)?,
                    linear: vec![(Coef::Param(0), fem::assemble_advection(&mesh, 1.0)?)],
                    convection: None,
                    forcing: Matrix::zeros(m.n_u, 1),
                    noise_cov: fem::assemble_forcing_cov(&mesh, m.rho, m.ell)?,
                })
            }
            Experiment::Kdv => {
                let mesh = self.mesh()?;
                // unit coefficients; α and β scale them
                let ops = fem::assemble_kdv(&mesh, 1.0, 1.0)?;
                System::Fem(FemSystem {
                    mass: fem::assemble_mass(&mesh)?,
                    linear: vec![(Coef::Param(1), ops.a_disp)],
                    convection: Some((Coef::Param(0), Convection::new(&mesh)?)),
                    forcing: Matrix::zeros(m.n_u, 1),
                    noise_cov: fem::assemble_forcing_cov(&mesh, m.rho, m.ell)?,
                })
            }
        };
        TransitionModel::new(system, m.scheme, m.dt, m.substeps)
    }

    pub fn observation_model(&self) -> Result<ObservationModel> {
        let m = &self.model;
        let h = match self.experiment {
            Experiment::Lorenz => Matrix::row_vec(&[1.0, 0.0, 0.0]),
            _ => {
                let mesh = self.mesh()?;
                fem::interp_operator(&mesh, &fem::uniform_points(&mesh, m.n_x))?
            }
        };
        ObservationModel::new(h, Matrix::identity(m.n_x).scale(m.obs_sd * m.obs_sd))
    }

    pub fn prior_u0(&self) -> Result<GaussianState> {
        let n = self.model.n_u;
        GaussianState::new(self.initial_state()?, Matrix::identity(n).scale(self.model.u0_sd * self.model.u0_sd))
    }

    pub fn codec(&self) -> Codec {
        let n_x = self.model.n_x;
        let n_y = self.n_y();
        let c = &self.codec;
        let encoder = match c.encoder {
            EncoderKind::Mlp => Encoder::Mlp(
                MlpSpec::new("enc", n_y, &c.hidden, &[("mu", n_x), ("log_sigma", n_x)]).with_weights(c.weights),
            ),
            EncoderKind::PseudoInverse => Encoder::PseudoInverse,
        };
        let net = MlpSpec::new("dec", n_x, &c.hidden, &[("out", n_y)]).with_weights(c.weights);
        let decoder = match c.decoder {
            DecoderKind::Bernoulli => Decoder::Bernoulli { net },
            DecoderKind::Gaussian => Decoder::Gaussian { net, eta: c.eta },
            DecoderKind::Linear => Decoder::Linear { n_y, n_x, eta: c.eta },
        };
        Codec { encoder, decoder }
    }

    pub fn problem(&self) -> Result<ElboProblem> {
        self.validate()?;
        let codec = self.codec();
        codec.validate()?;
        Ok(ElboProblem {
            codec,
            model: Rc::new(self.transition_model()?),
            obs: Rc::new(self.observation_model()?),
            prior_u0: Rc::new(self.prior_u0()?),
            lambda: self.model_params()?,
            m_lambda: self.train.m_lambda,
            kl_mode: self.train.kl,
        })
    }
}

/// Initial profile of the PDE experiments at position `s`.
pub fn initial_profile(experiment: Experiment, mesh: &Mesh1D, s: f64) -> f64 {
    match experiment {
        Experiment::Advection => {
            // exp(−(s − 2.5)²/0.1) with the offset wrapped onto the period
            let d = mesh.distance(s, 2.5);
            (-(d * d) / 0.1).exp()
        }
        Experiment::Kdv => (core::f64::consts::PI * s).cos(),
        Experiment::Lorenz => 0.0,
    }
}
