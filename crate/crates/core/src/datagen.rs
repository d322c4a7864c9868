//! Synthetic datasets: Lorenz-63 velocity fields and binary videos of the
//! advection and KdV solutions.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{Experiment, RunConfig};
use crate::fem::{self, Mesh1D};
use crate::linalg::Matrix;
use crate::train::epoch_rng;

/// RNG streams reserved for data generation, disjoint from training epochs.
const STREAM_PSEUDO_OBS: u64 = u64::MAX - 1;
const STREAM_PIXELS: u64 = u64::MAX - 2;

/// Everything needed to regenerate an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRecord {
    pub config: RunConfig,
    /// Time between consecutive frames.
    pub obs_interval: f64,
    /// Number of pixels whose column value left the frame's vertical range.
    pub clipped_pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Observations, one frame per row.
    pub y: Matrix,
    /// Frames before salt-and-pepper noise (equal to `y` for Lorenz).
    pub clean_y: Matrix,
    /// Latent state at the frame times, one row per frame.
    pub truth_u: Option<Matrix>,
    /// Pseudo-data at the frame times (Lorenz only).
    pub truth_x: Option<Matrix>,
    pub gen: GenRecord,
}

impl Episode {
    pub fn n_frames(&self) -> usize {
        self.y.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameGrid {
    pub width: usize,
    pub height: usize,
    pub u_min: f64,
    pub u_max: f64,
}

impl FrameGrid {
    pub fn new(width: usize, height: usize, u_min: f64, u_max: f64) -> Result<Self> {
        if width == 0 || height == 0 || !(u_max > u_min) {
            return Err(Error::Config("frame grid needs positive size and u_max > u_min".into()));
        }
        Ok(FrameGrid {
            width,
            height,
            u_min,
            u_max,
        })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Physical height at the centre of row `r` (row 0 is the top).
    pub fn row_height(&self, r: usize) -> f64 {
        self.u_max - (r as f64 + 0.5) * (self.u_max - self.u_min) / self.height as f64
    }

    /// Physical coordinate at the centre of column `c`.
    pub fn column_position(&self, mesh: &Mesh1D, c: usize) -> f64 {
        let (a, _) = mesh.domain();
        a + (c as f64 + 0.5) * mesh.length() / self.width as f64
    }
}

/// Velocity of the streamfunction `ψ = u1 sin(πs₁/l) sin(πs₂/l)` with
/// `l = 2·half_width`, sampled on a `points × points` grid over
/// `[−half_width, half_width]²`. Returns all first components, then all second
/// components, with points ordered `s₁`-major.
pub fn lorenz_velocity_field(u1: f64, points: usize, half_width: f64) -> Vec<f64> {
    use core::f64::consts::PI;
    let l = 2.0 * half_width;
    let k = PI / l;
    let coord = |i: usize| {
        if points == 1 {
            0.0
        } else {
            -half_width + 2.0 * half_width * i as f64 / (points - 1) as f64
        }
    };
    let n = points * points;
    let mut out = alloc::vec![0.0; 2 * n];
    for i in 0..points {
        let (s1, c1) = (k * coord(i)).sin_cos();
        for j in 0..points {
            let (s2, c2) = (k * coord(j)).sin_cos();
            let p = i * points + j;
            out[p] = -u1 * k * s1 * c2;
            out[n + p] = u1 * k * c1 * s2;
        }
    }
    out
}

/// Renders `u_h` as a binary image: a pixel is lit when its row lies below
/// the solution at its column. Returns the image (row-major) and the number
/// of pixels whose column value fell outside the vertical range.
pub fn render_frame(u_nodes: &[f64], mesh: &Mesh1D, grid: &FrameGrid) -> Result<(Vec<f64>, usize)> {
    if u_nodes.len() != mesh.n_u() {
        return Err(Error::shape("render_frame", (mesh.n_u(), 1), (u_nodes.len(), 1)));
    }
    let cols: Vec<f64> = (0..grid.width).map(|c| grid.column_position(mesh, c)).collect();
    let interp = fem::interp_operator(mesh, &cols)?;
    let values = interp.matmul_unchecked(&Matrix::col(u_nodes));
    let mut img = alloc::vec![0.0; grid.pixels()];
    let mut clipped = 0;
    for c in 0..grid.width {
        let v = values[c];
        if v > grid.u_max || v < grid.u_min {
            clipped += 1;
        }
        for r in 0..grid.height {
            if grid.row_height(r) < v {
                img[r * grid.width + c] = 1.0;
            }
        }
    }
    Ok((img, clipped))
}

/// Flips each pixel of a binary image independently with probability `p`.
pub fn salt_pepper<R: Rng + ?Sized>(img: &[f64], p: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::OutOfRange(p));
    }
    Ok(img
        .iter()
        .map(|&v| {
            let flip = rng.random::<f64>() < p;
            if flip {
                1.0 - v
            } else {
                v
            }
        })
        .collect())
}

/// Simulates the deterministic truth and renders the observations.
pub fn generate_dataset(config: &RunConfig) -> Result<Episode> {
    config.validate()?;
    let model = config.transition_model()?;
    let lam = config.truth_params()?;
    let n = config.data.n_frames;
    let u0 = config.initial_state()?;
    let traj = model.simulate(&u0, &lam, n, 0.0, config.seed)?;
    // drop the initial state; frames start at the first observation time
    let truth_u = traj.block(1, 0, n, traj.cols());
    let obs_interval = config.model.dt * config.model.substeps as f64;

    match config.experiment {
        Experiment::Lorenz => {
            let mut rng = epoch_rng(config.seed, STREAM_PSEUDO_OBS);
            let sd = config.data.pseudo_obs_sd;
            let x: Vec<f64> = (0..n)
                .map(|t| {
                    let w: f64 = StandardNormal.sample(&mut rng);
                    truth_u[(t, 0)] + sd * w
                })
                .collect();
            let n_y = config.n_y();
            let mut y = Matrix::zeros(n, n_y);
            for (t, &xt) in x.iter().enumerate() {
                let field = lorenz_velocity_field(xt, config.data.grid_points, config.data.grid_half_width);
                y.row_mut(t).copy_from_slice(&field);
            }
            Ok(Episode {
                clean_y: y.clone(),
                y,
                truth_u: Some(truth_u),
                truth_x: Some(Matrix::col(&x)),
                gen: GenRecord {
                    config: config.clone(),
                    obs_interval,
                    clipped_pixels: 0,
                },
            })
        }
        Experiment::Advection | Experiment::Kdv => {
            let mesh = config.mesh()?;
            let d = &config.data;
            let grid = FrameGrid::new(d.frame_width, d.frame_height, d.u_range[0], d.u_range[1])?;
            let mut rng = epoch_rng(config.seed, STREAM_PIXELS);
            let mut clean = Matrix::zeros(n, grid.pixels());
            let mut y = Matrix::zeros(n, grid.pixels());
            let mut clipped = 0;
            for t in 0..n {
                let (img, c) = render_frame(truth_u.row(t), &mesh, &grid)?;
                clipped += c;
                let noisy = salt_pepper(&img, d.salt_pepper, &mut rng)?;
                clean.row_mut(t).copy_from_slice(&img);
                y.row_mut(t).copy_from_slice(&noisy);
            }
            Ok(Episode {
                y,
                clean_y: clean,
                truth_u: Some(truth_u),
                truth_x: None,
                gen: GenRecord {
                    config: config.clone(),
                    obs_interval,
                    clipped_pixels: clipped,
                },
            })
        }
    }
}

/// Number of strict local maxima of a periodic sequence.
pub fn count_local_maxima(u: &[f64]) -> usize {
    let n = u.len();
    (0..n)
        .filter(|&i| {
            let prev = u[(i + n - 1) % n];
            let next = u[(i + 1) % n];
            u[i] > prev && u[i] >= next
        })
        .count()
}
