mod common;

use std::f64::consts::PI;
use std::rc::Rc;

use common::{fd_gradient, random_matrix, random_spd, rel_err, rng};
use pidvae_core::codec::{Codec, Decoder, Encoder, MlpSpec, WeightScale, LINEAR_W};
use pidvae_core::dynamics::{Coef, FemSystem, ModelParams, Scheme, System, TransitionModel};
use pidvae_core::elbo::{kl_gaussian_diag, mc_kl_fallback, ElboProblem, KlMode, VariationalLambda, LAMBDA_LOG_SIGMA, LAMBDA_MU};
use pidvae_core::filter::{FilterLoglik, GaussianState, ObservationModel};
use pidvae_core::linalg::Cholesky;
use pidvae_core::{Matrix, ParamSet, Tape};
use rand::Rng;

/// Lorenz toy with three free parameters: n_u = 3, n_x = 2, two frames.
fn lorenz_toy(codec: Codec, kl_mode: KlMode) -> ElboProblem {
    let mut r = rng(99);
    let model = TransitionModel::new(
        System::Lorenz {
            noise_cov: Matrix::identity(3).scale(0.3),
        },
        Scheme::ExplicitEm,
        0.01,
        3,
    )
    .unwrap();
    let obs = ObservationModel::new(random_matrix(&mut r, 2, 3), Matrix::identity(2).scale(0.2)).unwrap();
    let prior = GaussianState::new(Matrix::col(&[1.0, -0.5, 2.0]), Matrix::identity(3).scale(0.1)).unwrap();
    let lambda = ModelParams::new(
        vec!["sigma".into(), "r".into(), "b".into()],
        vec![10.0, 28.0, 8.0 / 3.0],
        vec![9.0, 25.0, 3.0],
        vec![4.0, 9.0, 1.0],
        vec![true, true, true],
    )
    .unwrap();
    ElboProblem {
        codec,
        model: Rc::new(model),
        obs: Rc::new(obs),
        prior_u0: Rc::new(prior),
        lambda,
        m_lambda: 2,
        kl_mode,
    }
}

fn codecs() -> Vec<Codec> {
    let enc = Encoder::Mlp(MlpSpec::new("enc", 4, &[5], &[("mu", 2), ("log_sigma", 2)]));
    let dec = MlpSpec::new("dec", 2, &[5], &[("out", 4)]);
    vec![
        Codec {
            encoder: enc.clone(),
            decoder: Decoder::Gaussian { net: dec.clone(), eta: 0.7 },
        },
        Codec {
            encoder: enc,
            decoder: Decoder::Bernoulli { net: dec },
        },
        Codec {
            encoder: Encoder::PseudoInverse,
            decoder: Decoder::Linear { n_y: 4, n_x: 2, eta: 0.3 },
        },
        Codec {
            encoder: Encoder::Mlp(
                MlpSpec::new("enc", 4, &[5, 3], &[("mu", 2), ("log_sigma", 2)]).with_weights(WeightScale::FanScaled),
            ),
            decoder: Decoder::Gaussian {
                net: MlpSpec::new("dec", 2, &[5], &[("out", 4)]).with_weights(WeightScale::FanScaled),
                eta: 0.7,
            },
        },
    ]
}

#[test]
fn weight_scales_start_from_the_same_network() {
    let spec = |w| MlpSpec::new("net", 6, &[4], &[("out", 3)]).with_weights(w);
    let x = random_matrix(&mut rng(1), 5, 6);
    let mut outputs = Vec::new();
    for w in [WeightScale::Standard, WeightScale::FanScaled] {
        let mut p = ParamSet::new();
        spec(w).init(&mut p, &mut rng(7)).unwrap();
        outputs.push(spec(w).forward(&p, &x).unwrap().remove(0));
    }
    assert!(rel_err(&outputs[0], &outputs[1]) < 1e-12);
}

/// Randomizes every parameter so no slot sits at a symmetric initial value.
fn perturbed(problem: &ElboProblem, seed: u64) -> ParamSet {
    let mut r = rng(seed);
    let mut p = problem.init_params(&mut r).unwrap();
    for (name, m) in p.clone().iter() {
        let noise = random_matrix(&mut r, m.rows(), m.cols()).scale(0.3);
        p.set(name, m.add(&noise).unwrap()).unwrap();
    }
    p.set(LAMBDA_LOG_SIGMA, Matrix::col(&[-1.0, -1.5, -1.2])).unwrap();
    p
}

#[test]
fn elbo_gradients_match_finite_differences() {
    for (k, codec) in codecs().into_iter().enumerate() {
        for mode in [KlMode::Analytic, KlMode::MonteCarlo] {
            let problem = lorenz_toy(codec.clone(), mode);
            let params = perturbed(&problem, k as u64);
            let mut r = rng(5);
            let y = if matches!(codec.decoder, Decoder::Bernoulli { .. }) {
                Matrix::from_fn(2, 4, |_, _| (r.random::<f64>() < 0.5) as u8 as f64)
            } else {
                random_matrix(&mut r, 2, 4)
            };
            let noise = problem.draw_noise(2, &mut r);
            let (_, grad) = problem.elbo_and_gradient(&params, &y, &noise).unwrap();
            let flat = Matrix::col(&params.flatten());
            let fd = fd_gradient(&flat, 1e-6, |f| {
                problem.elbo(&params.unflatten(f.as_slice()).unwrap(), &y, &noise).unwrap().total
            });
            let an = Matrix::col(&grad.flatten());
            let err = rel_err(&an, &fd);
            assert!(err < 1e-4, "codec {k} {mode:?}: rel err {err:e}");
            for name in [LAMBDA_MU, LAMBDA_LOG_SIGMA] {
                assert!(grad.slot(name).max_abs() > 0.0);
            }
        }
    }
}

#[test]
fn filter_loglik_gradients_wrt_pseudo_data_and_parameters() {
    let problem = lorenz_toy(codecs()[0].clone(), KlMode::Analytic);
    let mut r = rng(12);
    let x0 = random_matrix(&mut r, 2, 2);
    let lam0 = Matrix::col(&[10.0, 28.0, 8.0 / 3.0]);
    let op = || FilterLoglik::new(problem.model.clone(), problem.obs.clone(), problem.prior_u0.clone());
    let value = |x: &Matrix, lam: &Matrix| {
        let tape = Tape::new();
        op().apply(tape.constant(x.clone()), tape.constant(lam.clone())).unwrap().item()
    };
    let tape = Tape::new();
    let xv = tape.leaf(x0.clone());
    let lv = tape.leaf(lam0.clone());
    let ll = op().apply(xv, lv).unwrap();
    let g = tape.backward(ll).unwrap();
    let fd_x = fd_gradient(&x0, 1e-6, |x| value(x, &lam0));
    let fd_l = fd_gradient(&lam0, 1e-6, |l| value(&x0, l));
    assert!(rel_err(&g.wrt(xv), &fd_x) < 1e-4);
    assert!(rel_err(&g.wrt(lv), &fd_l) < 1e-4);
}

/// Linear-Gaussian toy: `u_n = F u_{n-1} + w`, `x_n = H u_n + r`, `y_n = W x_n + η ε`.
struct LinearToy {
    problem: ElboProblem,
    f: Matrix,
    q: Matrix,
    n_frames: usize,
}

fn linear_toy(seed: u64, n_x: usize, n_y: usize, n_frames: usize, codec: Codec) -> LinearToy {
    let mut r = rng(seed);
    let f = random_matrix(&mut r, 2, 2).scale(0.6);
    let q = random_spd(&mut r, 2, 0.3).scale(0.2);
    let sys = FemSystem {
        mass: Matrix::identity(2),
        linear: vec![(Coef::Fixed(1.0), Matrix::identity(2).sub(&f).unwrap())],
        convection: None,
        forcing: Matrix::zeros(2, 1),
        noise_cov: q.clone(),
    };
    let model = TransitionModel::new(System::Fem(sys), Scheme::ExplicitEm, 1.0, 1).unwrap();
    let obs = ObservationModel::new(random_matrix(&mut r, n_x, 2), Matrix::identity(n_x).scale(0.3)).unwrap();
    let prior = GaussianState::new(random_matrix(&mut r, 2, 1), random_spd(&mut r, 2, 0.5)).unwrap();
    let _ = n_y;
    LinearToy {
        problem: ElboProblem {
            codec,
            model: Rc::new(model),
            obs: Rc::new(obs),
            prior_u0: Rc::new(prior),
            lambda: ModelParams::fixed(&[], &[]),
            m_lambda: 1,
            kl_mode: KlMode::Analytic,
        },
        f,
        q,
        n_frames,
    }
}

impl LinearToy {
    /// Mean and covariance of the stacked pseudo-data `x_{1:N}`.
    fn x_moments(&self) -> (Matrix, Matrix) {
        let obs = &self.problem.obs;
        let n_x = obs.n_x();
        let n = self.n_frames;
        let mut means = Vec::new();
        let mut vars = Vec::new();
        let mut m = self.problem.prior_u0.m.clone();
        let mut v = self.problem.prior_u0.c.clone();
        for _ in 0..n {
            m = self.f.matmul(&m).unwrap();
            v = self.f.matmul(&v).unwrap().matmul_tr(&self.f).unwrap().add(&self.q).unwrap();
            means.push(m.clone());
            vars.push(v.clone());
        }
        let mut mean = Matrix::zeros(n * n_x, 1);
        let mut cov = Matrix::zeros(n * n_x, n * n_x);
        for i in 0..n {
            mean.set_block(i * n_x, 0, &obs.h.matmul(&means[i]).unwrap());
            for j in 0..=i {
                let mut cu = vars[j].clone();
                for _ in j..i {
                    cu = self.f.matmul(&cu).unwrap();
                }
                let mut block = obs.h.matmul(&cu).unwrap().matmul_tr(&obs.h).unwrap();
                if i == j {
                    block = block.add(&obs.r).unwrap();
                }
                cov.set_block(i * n_x, j * n_x, &block);
                cov.set_block(j * n_x, i * n_x, &block.transpose());
            }
        }
        (mean, cov)
    }

    /// Exact `log p(y_{1:N})` for the decoder weights `w` and noise `η`.
    fn log_evidence(&self, w: &Matrix, eta: f64, y: &Matrix) -> f64 {
        let (mx, cx) = self.x_moments();
        let n = self.n_frames;
        let (n_y, n_x) = w.shape();
        let mut big = Matrix::zeros(n * n_y, n * n_x);
        for i in 0..n {
            big.set_block(i * n_y, i * n_x, w);
        }
        let mean = big.matmul(&mx).unwrap();
        let mut cov = big.matmul(&cx).unwrap().matmul_tr(&big).unwrap();
        for i in 0..n * n_y {
            cov[(i, i)] += eta * eta;
        }
        let d = y.clone().reshape(n * n_y, 1).unwrap().sub(&mean).unwrap();
        let chol = Cholesky::new_strict(&cov).unwrap();
        -0.5 * (d.dot(&chol.solve(&d).unwrap()) + chol.logdet() + (n * n_y) as f64 * (2.0 * PI).ln())
    }
}

fn linear_codec(n_x: usize, n_y: usize, eta: f64) -> Codec {
    Codec {
        encoder: Encoder::Mlp(MlpSpec::new("enc", n_y, &[], &[("mu", n_x), ("log_sigma", n_x)])),
        decoder: Decoder::Linear { n_y, n_x, eta },
    }
}

#[test]
fn elbo_is_exact_at_the_true_posterior() {
    let eta = 0.4;
    let toy = linear_toy(3, 1, 3, 1, linear_codec(1, 3, eta));
    let (mx, cx) = toy.x_moments();
    let (mx, vx) = (mx[0], cx[0]);
    let mut r = rng(4);
    let w = random_matrix(&mut r, 3, 1);
    let y = random_matrix(&mut r, 1, 3);
    // posterior of x given y: precision 1/v + wᵀw/η²
    let post_var = 1.0 / (1.0 / vx + w.norm_sq() / (eta * eta));
    let mut p = ParamSet::new();
    p.insert("enc.mu.w", w.scale(post_var / (eta * eta))).unwrap();
    p.insert("enc.mu.b", Matrix::scalar(post_var * mx / vx)).unwrap();
    p.insert("enc.log_sigma.w", Matrix::zeros(3, 1)).unwrap();
    p.insert("enc.log_sigma.b", Matrix::scalar(0.5 * post_var.ln())).unwrap();
    p.insert(LINEAR_W, w.clone()).unwrap();
    let exact = toy.log_evidence(&w, eta, &y);
    for _ in 0..20 {
        let noise = toy.problem.draw_noise(1, &mut r);
        let elbo = toy.problem.elbo(&p, &y, &noise).unwrap().total;
        assert!((elbo - exact).abs() < 1e-10, "{elbo} vs {exact}");
    }
}

#[test]
fn elbo_bounds_the_evidence() {
    let eta = 0.5;
    let mut r = rng(77);
    for setting in 0..100 {
        let toy = linear_toy(1000 + setting, 1, 2, 3, linear_codec(1, 2, eta));
        let mut p = toy.problem.init_params(&mut r).unwrap();
        for (name, m) in p.clone().iter() {
            p.set(name, random_matrix(&mut r, m.rows(), m.cols())).unwrap();
        }
        let y = random_matrix(&mut r, 3, 2).scale(2.0);
        let exact = toy.log_evidence(p.slot(LINEAR_W), eta, &y);
        let samples: Vec<f64> = (0..1000)
            .map(|_| {
                let noise = toy.problem.draw_noise(3, &mut r);
                toy.problem.elbo(&p, &y, &noise).unwrap().total
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / 1000.0;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 999.0;
        let se = (var / 1000.0).sqrt();
        assert!(mean <= exact + 3.0 * se, "setting {setting}: {mean} > {exact} + 3·{se}");
    }
}

#[test]
fn kl_estimators_agree() {
    let q = VariationalLambda {
        mu: vec![1.2, -0.3],
        log_sigma: vec![-0.5, 0.2],
    };
    let (pm, pv) = (vec![1.0, 0.0], vec![2.0, 0.5]);
    let exact = kl_gaussian_diag(&q, &pm, &pv);
    let prior_logpdf = |l: &[f64]| {
        l.iter()
            .zip(&pm)
            .zip(&pv)
            .map(|((x, m), v)| -0.5 * ((x - m).powi(2) / v + (2.0 * PI * v).ln()))
            .sum::<f64>()
    };
    let mut r = rng(6);
    let mc = mc_kl_fallback(&q, prior_logpdf, 200_000, &mut r).unwrap();
    assert!((mc - exact).abs() < 0.01, "{mc} vs {exact}");
    let at_prior = VariationalLambda {
        mu: pm.clone(),
        log_sigma: pv.iter().map(|v| 0.5 * v.ln()).collect(),
    };
    assert!(kl_gaussian_diag(&at_prior, &pm, &pv).abs() < 1e-15);

    // the Monte-Carlo mode of the ELBO averages to the analytic KL
    let problem = lorenz_toy(codecs()[0].clone(), KlMode::MonteCarlo);
    let analytic = lorenz_toy(codecs()[0].clone(), KlMode::Analytic);
    let params = perturbed(&problem, 1);
    let y = random_matrix(&mut r, 2, 4);
    let mut acc = 0.0;
    let trials = 400;
    for _ in 0..trials {
        let noise = problem.draw_noise(2, &mut r);
        acc += problem.elbo(&params, &y, &noise).unwrap().kl;
    }
    let noise = analytic.draw_noise(2, &mut r);
    let kl = analytic.elbo(&params, &y, &noise).unwrap().kl;
    assert!((acc / trials as f64 - kl).abs() < 0.05 * (1.0 + kl.abs()), "{} vs {kl}", acc / trials as f64);
}
