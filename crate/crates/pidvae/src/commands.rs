//! The `gen`, `train` and `eval` commands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pidvae_core::datagen::{generate_dataset, Episode};
use pidvae_core::elbo::{ElboProblem, VariationalLambda};
use pidvae_core::experiment::RunConfig;
use pidvae_core::filter::{self, GaussianState};
use pidvae_core::train::{epoch_rng, EpochRecord, TrainState, Trainer};
use pidvae_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{self, ConfigInput};
use crate::episode::{self, Manifest};
use crate::error::{io, json, Error, Result};
use crate::metrics::{fmt_f64, metrics_header, write_csv, MetricsLog};

/// Stream for evaluation sampling, disjoint from training and generation.
const EVAL_STREAM: u64 = u64::MAX - 3;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(json(path))?;
    fs::write(path, text + "\n").map_err(io(path))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))
}

pub struct GenArgs {
    pub config: ConfigInput,
    pub out: PathBuf,
    pub pgm: bool,
}

pub fn gen(args: &GenArgs) -> Result<Manifest> {
    let config = config::resolve(&args.config, None)?;
    let episode = generate_dataset(&config)?;
    episode::write_episode(&args.out, &episode, args.pgm)
}

pub struct TrainArgs {
    pub config: ConfigInput,
    pub episode: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: RunConfig,
    pub resumed_from: Option<usize>,
    pub records: Vec<EpochRecord>,
}

fn free_names(problem: &ElboProblem) -> Vec<String> {
    let l = &problem.lambda;
    l.free_indices().iter().map(|&i| l.names[i].clone()).collect()
}

/// Frames must match what the configured codec expects.
fn check_episode(config: &RunConfig, episode: &Episode, path: &Path) -> Result<()> {
    let mut problems = Vec::new();
    if episode.gen.config.experiment != config.experiment {
        problems.push(format!(
            "episode is {:?} but the configuration is {:?}",
            episode.gen.config.experiment, config.experiment
        ));
    }
    if episode.y.cols() != config.n_y() {
        problems.push(format!("frames have {} values, configuration expects n_y = {}", episode.y.cols(), config.n_y()));
    }
    if episode.y.rows() == 0 {
        problems.push("episode has no frames".into());
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Episode {
            path: path.to_path_buf(),
            reason: problems.join("; "),
        })
    }
}

/// Settings that may differ between a checkpoint and the run resuming it.
fn resumable(a: &RunConfig, b: &RunConfig) -> bool {
    let strip = |c: &RunConfig| {
        let mut c = c.clone();
        c.train.epochs = 0;
        c.train.checkpoint_every = 0;
        c
    };
    strip(a) == strip(b)
}

/// Trains on the episode, resuming from the latest checkpoint in the output
/// directory when there is one. `progress` sees every metrics row.
pub fn train(args: &TrainArgs, mut progress: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    let episode = episode::read_episode(&args.episode)?;
    let config = config::resolve(&args.config, Some(&episode.gen.config))?;
    check_episode(&config, &episode, &args.episode)?;
    let problem = config.problem()?;
    let tc = config.train_config();
    let trainer = Trainer::new(&problem, &tc, &episode.y, &episode.clean_y)?;

    let ckpt_dir = args.out.join(CHECKPOINT_DIR);
    create_dir(&ckpt_dir)?;
    let header = metrics_header(&free_names(&problem));
    let metrics_path = args.out.join(METRICS_FILE);

    let (mut state, mut log, offset, resumed_from) = match checkpoint::list(&ckpt_dir)?.pop() {
        Some((_, path)) => {
            let Checkpoint { header: h, state } = checkpoint::load(&path)?;
            if !resumable(&h.config, &config) {
                return Err(Error::Checkpoint {
                    path,
                    reason: "configuration differs from the run being resumed (only train.epochs and train.checkpoint_every may change)".into(),
                });
            }
            checkpoint::check_layout(&path, &state.params, &problem.init_params(&mut epoch_rng(0, 0))?)?;
            let log = MetricsLog::resume(&metrics_path, &header, state.epoch)?;
            let epoch = state.epoch;
            (state, log, h.wallclock_s, Some(epoch))
        }
        None => (trainer.init()?, MetricsLog::create(&metrics_path, &header)?, 0.0, None),
    };
    write_json(&args.out.join(CONFIG_FILE), &config)?;

    let start = Instant::now();
    let clock = |on: bool| if on { offset + start.elapsed().as_secs_f64() } else { 0.0 };
    let every = config.train.checkpoint_every;
    let epochs = config.train.epochs;
    let mut records = Vec::new();
    let mut io_failure = None;
    let mut write = |rec: &EpochRecord, st: &TrainState| -> Result<()> {
        log.push(rec)?;
        if st.epoch > 0 && ((every > 0 && st.epoch % every == 0) || st.epoch == epochs) {
            let path = ckpt_dir.join(checkpoint::file_name(st.epoch));
            checkpoint::save(&path, &config, st, rec.wallclock_s)?;
        }
        Ok(())
    };
    let run = trainer.run(&mut state, |rec, st| {
        let mut rec = rec.clone();
        rec.wallclock_s = clock(config.train.wallclock);
        if let Err(e) = write(&rec, st) {
            io_failure = Some(e);
            return Err(pidvae_core::Error::Config("output could not be written".into()));
        }
        progress(&rec);
        records.push(rec);
        Ok(())
    });
    if let Some(e) = io_failure {
        return Err(e);
    }
    run?;
    Ok(TrainOutcome {
        config,
        resumed_from,
        records,
    })
}

pub struct EvalArgs {
    /// A checkpoint file or a run directory.
    pub checkpoint: PathBuf,
    pub episode: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub checkpoint: PathBuf,
    pub epoch: usize,
    pub seed: u64,
    pub config: RunConfig,
    pub nmse: f64,
    pub mu_lambda: Vec<f64>,
    pub sigma_lambda: Vec<f64>,
    /// RMSE of the filtering posterior mean against the true state.
    pub posterior_rmse: Option<f64>,
    /// RMSE of the prediction from the prior without any update.
    pub prior_rmse: Option<f64>,
}

fn rmse(a: &Matrix, b: &Matrix) -> f64 {
    let d = a.sub(b).expect("same shape");
    (d.norm_sq() / d.len() as f64).sqrt()
}

/// Means of the no-update prediction `p(u_n | u_0)` at the posterior-mean Λ.
fn prior_prediction(problem: &ElboProblem, lam: &[f64], n: usize) -> Result<Matrix> {
    let mut state: GaussianState = (*problem.prior_u0).clone();
    let mut out = Matrix::zeros(n, state.dim());
    for t in 0..n {
        state = filter::predict(&problem.model, lam, &state)?;
        out.row_mut(t).copy_from_slice(state.m.as_slice());
    }
    Ok(out)
}

pub fn eval(args: &EvalArgs) -> Result<EvalSummary> {
    let path = checkpoint::locate(&args.checkpoint)?;
    let Checkpoint { header, state } = checkpoint::load(&path)?;
    let config = header.config;
    let episode = episode::read_episode(&args.episode)?;
    check_episode(&config, &episode, &args.episode)?;
    let problem = config.problem()?;
    checkpoint::check_layout(&path, &state.params, &problem.init_params(&mut epoch_rng(0, 0))?)?;
    create_dir(&args.out)?;
    let params = &state.params;

    let y_hat = problem.codec.reconstruct(params, &episode.y)?;
    let y_ref = &episode.clean_y;
    let nmse = problem.nmse(params, &episode.y, y_ref)?;
    let rows: Vec<Vec<String>> = (0..y_hat.rows())
        .map(|n| {
            let (num, den) = y_hat.row(n).iter().zip(y_ref.row(n)).fold((0.0, 0.0), |(a, b), (p, r)| {
                (a + (p - r) * (p - r), b + r * r)
            });
            vec![n.to_string(), fmt_f64(num / den)]
        })
        .collect();
    write_csv(&args.out.join("eval.csv"), &["frame".into(), "nmse".into()], &rows)?;
    episode::write_matrix(&args.out.join("reconstruction.bin"), &y_hat)?;
    if let Some((w, h)) = episode::frame_shape(&episode.gen) {
        episode::write_frames(&args.out.join("reconstructions"), &y_hat, w, h)?;
    }

    let mut rng = epoch_rng(config.seed, EVAL_STREAM);
    let tc = config.train_config();
    let post = problem.filtering_posterior(params, &episode.y, tc.m_x, tc.m_lambda, &mut rng)?;
    let n_u = problem.model.dim();
    let mut post_mean = Matrix::zeros(post.len(), n_u);
    let mut post_rows = Vec::with_capacity(post.len());
    for (t, p) in post.iter().enumerate() {
        let m = p.mean();
        post_mean.row_mut(t).copy_from_slice(m.as_slice());
        let mut row: Vec<String> = m.as_slice().iter().map(|v| fmt_f64(*v)).collect();
        row.extend(p.sd().iter().map(|v| fmt_f64(*v)));
        post_rows.push(row);
    }
    let mut post_header: Vec<String> = (0..n_u).map(|i| format!("mean_{i}")).collect();
    post_header.extend((0..n_u).map(|i| format!("sd_{i}")));
    write_csv(&args.out.join("posterior.csv"), &post_header, &post_rows)?;

    let q = VariationalLambda::from_params(params);
    let (mu_lambda, sigma_lambda) = q.as_ref().map(|q| (q.mu.clone(), q.sigma())).unwrap_or_default();
    let mut lam = problem.lambda.values.clone();
    for (k, &i) in problem.lambda.free_indices().iter().enumerate() {
        lam[i] = mu_lambda[k];
    }
    let (posterior_rmse, prior_rmse) = match &episode.truth_u {
        Some(truth) if truth.shape() == post_mean.shape() => {
            let prior = prior_prediction(&problem, &lam, truth.rows())?;
            (Some(rmse(&post_mean, truth)), Some(rmse(&prior, truth)))
        }
        _ => (None, None),
    };
    let summary = EvalSummary {
        checkpoint: path,
        epoch: header.epoch,
        seed: config.seed,
        config,
        nmse,
        mu_lambda,
        sigma_lambda,
        posterior_rmse,
        prior_rmse,
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    Ok(summary)
}
