mod common;

use std::f64::consts::PI;
use std::rc::Rc;

use common::*;
use pidvae_core::dynamics::{Coef, FemSystem, Scheme, System, TransitionModel};
use pidvae_core::fem::{assemble_advection, assemble_forcing_cov, assemble_kdv, assemble_mass, interp_operator, Convection, Mesh1D};
use pidvae_core::filter::*;
use pidvae_core::linalg::{Cholesky, Tape};
use pidvae_core::Matrix;

struct LinearSsm {
    model: Rc<TransitionModel>,
    f: Matrix,
    q: Matrix,
    obs: ObservationModel,
    prior: GaussianState,
    x: Matrix,
}

/// `u_n = F u_{n-1} + w` written as explicit Euler–Maruyama with `M = I`, `Δt = 1`.
fn linear_ssm(seed: u64, n_u: usize, n_x: usize, n_steps: usize) -> LinearSsm {
    let mut r = rng(seed);
    let f = random_matrix(&mut r, n_u, n_u).scale(0.5);
    let a = Matrix::identity(n_u).sub(&f).unwrap();
    let q = random_spd(&mut r, n_u, 0.2).scale(0.1);
    let sys = FemSystem {
        mass: Matrix::identity(n_u),
        linear: vec![(Coef::Fixed(1.0), a)],
        convection: None,
        forcing: Matrix::zeros(n_u, 1),
        noise_cov: q.clone(),
    };
    let model = Rc::new(TransitionModel::new(System::Fem(sys), Scheme::ExplicitEm, 1.0, 1).unwrap());
    let obs = ObservationModel::new(random_matrix(&mut r, n_x, n_u), random_spd(&mut r, n_x, 0.5).scale(0.2)).unwrap();
    let prior = GaussianState::new(random_matrix(&mut r, n_u, 1), random_spd(&mut r, n_u, 0.5)).unwrap();
    let x = random_matrix(&mut r, n_steps, n_x).scale(2.0);
    LinearSsm { model, f, q, obs, prior, x }
}

fn joint_gaussian_loglik(s: &LinearSsm) -> f64 {
    let (n_steps, n_x) = s.x.shape();
    let n_u = s.f.rows();
    // moments of u_1..u_N
    let mut means = Vec::new();
    let mut fpow = vec![s.f.clone()];
    let mut m = s.prior.m.clone();
    for _ in 0..n_steps {
        m = s.f.matmul(&m).unwrap();
        means.push(m.clone());
    }
    for k in 1..n_steps {
        let next = s.f.matmul(&fpow[k - 1]).unwrap();
        fpow.push(next);
    }
    let ident = Matrix::identity(n_u);
    let fp = |k: usize| if k == 0 { ident.clone() } else { fpow[k - 1].clone() };
    // Cov(u_i, u_j) for i ≥ j: F^{i-j} Var(u_j)
    let mut var = Vec::new();
    let mut v = s.prior.c.clone();
    for _ in 0..n_steps {
        v = s.f.matmul(&v).unwrap().matmul_tr(&s.f).unwrap().add(&s.q).unwrap();
        var.push(v.clone());
    }
    let dim = n_steps * n_x;
    let mut cov = Matrix::zeros(dim, dim);
    let mut mean = Matrix::zeros(dim, 1);
    for i in 0..n_steps {
        mean.set_block(i * n_x, 0, &s.obs.h.matmul(&means[i]).unwrap());
        for j in 0..=i {
            let cu = fp(i - j).matmul(&var[j]).unwrap();
            let block = s.obs.h.matmul(&cu).unwrap().matmul_tr(&s.obs.h).unwrap();
            cov.set_block(i * n_x, j * n_x, &block);
            cov.set_block(j * n_x, i * n_x, &block.transpose());
        }
        let diag = cov.block(i * n_x, i * n_x, n_x, n_x).add(&s.obs.r).unwrap();
        cov.set_block(i * n_x, i * n_x, &diag);
    }
    let xs = s.x.clone().reshape(dim, 1).unwrap();
    let d = xs.sub(&mean).unwrap();
    let chol = Cholesky::new_strict(&cov).unwrap();
    let quad = d.dot(&chol.solve(&d).unwrap());
    -0.5 * (quad + chol.logdet() + dim as f64 * (2.0 * PI).ln())
}

fn textbook_kalman(s: &LinearSsm) -> Vec<GaussianState> {
    let mut m = s.prior.m.clone();
    let mut c = s.prior.c.clone();
    let h = &s.obs.h;
    let mut out = Vec::new();
    for n in 0..s.x.rows() {
        m = s.f.matmul(&m).unwrap();
        c = s.f.matmul(&c).unwrap().matmul_tr(&s.f).unwrap().add(&s.q).unwrap();
        let sm = h.matmul(&c).unwrap().matmul_tr(h).unwrap().add(&s.obs.r).unwrap();
        let k = c.matmul_tr(h).unwrap().matmul(&Cholesky::new(&sm).unwrap().inverse()).unwrap();
        let v = s.x.row_as_col(n).sub(&h.matmul(&m).unwrap()).unwrap();
        m = m.add(&k.matmul(&v).unwrap()).unwrap();
        let ikh = Matrix::identity(m.rows()).sub(&k.matmul(h).unwrap()).unwrap();
        c = ikh.matmul(&c).unwrap();
        out.push(GaussianState { m: m.clone(), c: c.clone() });
    }
    out
}

#[test]
fn loglik_matches_joint_gaussian() {
    for seed in 0..5 {
        let s = linear_ssm(seed, 4, 2, 10);
        let res = run_filter(&s.model, &[], &s.x, &s.obs, &s.prior).unwrap();
        let oracle = joint_gaussian_loglik(&s);
        assert!((res.loglik - oracle).abs() < 1e-8, "seed {seed}: {} vs {oracle}", res.loglik);
    }
}

#[test]
fn states_match_textbook_kalman() {
    let s = linear_ssm(11, 4, 2, 10);
    let res = run_filter(&s.model, &[], &s.x, &s.obs, &s.prior).unwrap();
    for (a, b) in res.states.iter().zip(textbook_kalman(&s)) {
        assert!(a.m.max_abs_diff(&b.m) < 1e-10);
        assert!(a.c.max_abs_diff(&b.c) < 1e-10);
    }
}

#[test]
fn relabeling_invariance() {
    let s = linear_ssm(3, 4, 2, 6);
    let perm = [2usize, 0, 3, 1];
    let p = Matrix::from_fn(4, 4, |i, j| if perm[i] == j { 1.0 } else { 0.0 });
    let conj = |a: &Matrix| p.matmul(a).unwrap().matmul_tr(&p).unwrap();
    let System::Fem(sys) = &s.model.system else { unreachable!() };
    let relabeled = FemSystem {
        mass: conj(&sys.mass),
        linear: vec![(Coef::Fixed(1.0), conj(&sys.linear[0].1))],
        convection: None,
        forcing: Matrix::zeros(4, 1),
        noise_cov: conj(&sys.noise_cov),
    };
    let model = Rc::new(TransitionModel::new(System::Fem(relabeled), Scheme::ExplicitEm, 1.0, 1).unwrap());
    let obs = ObservationModel::new(s.obs.h.matmul_tr(&p).unwrap(), s.obs.r.clone()).unwrap();
    let prior = GaussianState::new(p.matmul(&s.prior.m).unwrap(), conj(&s.prior.c)).unwrap();
    let a = run_filter(&s.model, &[], &s.x, &s.obs, &s.prior).unwrap().loglik;
    let b = run_filter(&model, &[], &s.x, &obs, &prior).unwrap().loglik;
    assert!((a - b).abs() < 1e-10);
}

#[test]
fn uninformative_and_exact_observations() {
    let pred = GaussianState::new(Matrix::col(&[0.3, -0.2, 1.0]), Matrix::identity(3)).unwrap();
    let x = Matrix::col(&[1.0, 2.0, 3.0]);
    let vague = ObservationModel::new(Matrix::identity(3), Matrix::identity(3).scale(1e12)).unwrap();
    let (post, _) = update(&pred, &x, &vague).unwrap();
    assert!(post.m.sub(&pred.m).unwrap().norm() < 1e-6);
    let sharp = ObservationModel::new(Matrix::identity(3), Matrix::identity(3).scale(1e-12)).unwrap();
    let (post, _) = update(&pred, &x, &sharp).unwrap();
    assert!(post.m.sub(&x).unwrap().norm() < 1e-6);
}

#[test]
fn identity_dynamics_keep_state() {
    let sys = FemSystem {
        mass: Matrix::identity(3),
        linear: vec![],
        convection: None,
        forcing: Matrix::zeros(3, 1),
        noise_cov: Matrix::zeros(3, 3),
    };
    let model = Rc::new(TransitionModel::new(System::Fem(sys), Scheme::CrankNicolson, 0.1, 1).unwrap());
    let state = GaussianState::new(Matrix::col(&[1.0, 2.0, 3.0]), Matrix::diag(&[1.0, 2.0, 3.0])).unwrap();
    let next = predict(&model, &[], &state).unwrap();
    assert_eq!(next, state);
    // noiseless observations of a constant state keep the mean there
    let obs = ObservationModel::new(Matrix::identity(3), Matrix::identity(3).scale(0.1)).unwrap();
    let x = Matrix::from_fn(5, 3, |_, j| (j + 1) as f64);
    let res = run_filter(&model, &[], &x, &obs, &state).unwrap();
    for st in &res.states {
        assert!(st.m.max_abs_diff(&state.m) < 1e-12);
    }
}

fn advection_model(n_u: usize, substeps: usize, rho: f64) -> Rc<TransitionModel> {
    let mesh = Mesh1D::periodic(n_u, 0.0, 1.0).unwrap();
    let sys = FemSystem {
        mass: assemble_mass(&mesh).unwrap(),
        linear: vec![(Coef::Param(0), assemble_advection(&mesh, 1.0).unwrap())],
        convection: None,
        forcing: Matrix::zeros(n_u, 1),
        noise_cov: assemble_forcing_cov(&mesh, rho, 0.1).unwrap(),
    };
    Rc::new(TransitionModel::new(System::Fem(sys), Scheme::CrankNicolson, 0.02, substeps).unwrap())
}

#[test]
fn cn_prediction_matches_closed_form() {
    let model = advection_model(8, 1, 0.0);
    let System::Fem(sys) = &model.system else { unreachable!() };
    let a = sys.linear[0].1.scale(0.5);
    let lhs = sys.mass.add(&a.scale(0.01)).unwrap();
    let rhs = sys.mass.sub(&a.scale(0.01)).unwrap();
    let phi = pidvae_core::linalg::Lu::new(&lhs).unwrap().solve(&rhs).unwrap();
    let mut r = rng(4);
    let state = GaussianState::new(random_matrix(&mut r, 8, 1), random_spd(&mut r, 8, 0.1)).unwrap();
    let next = predict(&model, &[0.5], &state).unwrap();
    assert!(next.m.max_abs_diff(&phi.matmul(&state.m).unwrap()) < 1e-12);
    let c = phi.matmul(&state.c).unwrap().matmul_tr(&phi).unwrap();
    assert!(next.c.max_abs_diff(&c) < 1e-12);
}

#[test]
fn collapsed_linear_transition_matches_stepping() {
    let model = advection_model(8, 5, 0.05);
    let mut r = rng(9);
    let prior = GaussianState::new(random_matrix(&mut r, 8, 1), random_spd(&mut r, 8, 0.1).scale(0.01)).unwrap();
    let points: Vec<f64> = (0..4).map(|i| 0.25 * i as f64 + 0.1).collect();
    let obs = ObservationModel::new(interp_operator(&Mesh1D::periodic(8, 0.0, 1.0).unwrap(), &points).unwrap(), Matrix::identity(4).scale(0.01)).unwrap();
    let x = random_matrix(&mut r, 3, 4);
    let res = run_filter(&model, &[0.5], &x, &obs, &prior).unwrap();
    // manual stepping with the one-step predict
    let mut st = prior.clone();
    for n in 0..3 {
        for _ in 0..5 {
            st = predict(&model, &[0.5], &st).unwrap();
        }
        assert!(st.m.max_abs_diff(&res.predicted[n].m) < 1e-12);
        assert!(st.c.max_abs_diff(&res.predicted[n].c) < 1e-12);
        st = update(&st, &x.row_as_col(n), &obs).unwrap().0;
    }
}

#[test]
fn covariance_inflation_and_psd() {
    let model = advection_model(16, 1, 0.05);
    let mut r = rng(2);
    let state = GaussianState::new(random_matrix(&mut r, 16, 1), random_spd(&mut r, 16, 0.01).scale(0.01)).unwrap();
    let noisy = predict(&model, &[0.5], &state).unwrap();
    let quiet = predict(&advection_model(16, 1, 0.0), &[0.5], &state).unwrap();
    let diff = noisy.c.sub(&quiet.c).unwrap();
    let eig = pidvae_core::linalg::symmetric_eigenvalues(&diff);
    assert!(eig[0] >= -1e-10);
    assert!(pidvae_core::linalg::symmetric_eigenvalues(&noisy.c)[0] >= -1e-10);
}

#[test]
fn loglik_gradients_linear() {
    let model = advection_model(4, 2, 0.05);
    let mut r = rng(21);
    let prior = GaussianState::new(random_matrix(&mut r, 4, 1), Matrix::identity(4).scale(0.1)).unwrap();
    let obs = ObservationModel::new(random_matrix(&mut r, 2, 4), Matrix::identity(2).scale(0.05)).unwrap();
    let x = random_matrix(&mut r, 3, 2);
    let lam = Matrix::col(&[0.5]);
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let lv = tape.leaf(lam.clone());
    let out = run_filter_var(&model, lv, xv, &obs, &prior, false).unwrap();
    let g = tape.backward(out.loglik).unwrap();
    let f = |x: &Matrix, l: &Matrix| run_filter(&model, l.as_slice(), x, &obs, &prior).unwrap().loglik;
    let gx = fd_gradient(&x, 1e-6, |xp| f(xp, &lam));
    let gl = fd_gradient(&lam, 1e-6, |lp| f(&x, lp));
    assert!(rel_err(&g.wrt(xv), &gx) < 1e-4, "{:?} vs {:?}", g.wrt(xv), gx);
    assert!(rel_err(&g.wrt(lv), &gl) < 1e-4, "{:?} vs {:?}", g.wrt(lv), gl);
}

fn kdv_model(n_u: usize, scheme: Scheme) -> Rc<TransitionModel> {
    let mesh = Mesh1D::periodic(n_u, 0.0, 2.0).unwrap();
    let ops = assemble_kdv(&mesh, 1.0, 1.0).unwrap();
    let sys = FemSystem {
        mass: assemble_mass(&mesh).unwrap(),
        linear: vec![(Coef::Param(1), ops.a_disp.clone())],
        convection: Some((Coef::Param(0), Convection::new(&mesh).unwrap())),
        forcing: Matrix::zeros(n_u, 1),
        noise_cov: assemble_forcing_cov(&mesh, 0.05, 0.2).unwrap(),
    };
    Rc::new(TransitionModel::new(System::Fem(sys), scheme, 0.01, 2).unwrap())
}

#[test]
fn loglik_gradients_nonlinear() {
    for scheme in [Scheme::CrankNicolson, Scheme::ImplicitEuler, Scheme::ExplicitEm] {
        let model = kdv_model(6, scheme);
        let mut r = rng(8);
        let mesh = Mesh1D::periodic(6, 0.0, 2.0).unwrap();
        let prior = GaussianState::new(random_matrix(&mut r, 6, 1), Matrix::identity(6).scale(0.01)).unwrap();
        let obs = ObservationModel::new(interp_operator(&mesh, &[0.1, 0.7, 1.3]).unwrap(), Matrix::identity(3).scale(0.01)).unwrap();
        let x = random_matrix(&mut r, 3, 3);
        let lam = Matrix::col(&[1.2, 0.01]);
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let lv = tape.leaf(lam.clone());
        let out = FilterLoglik::new(model.clone(), Rc::new(obs.clone()), Rc::new(prior.clone())).apply(xv, lv).unwrap();
        let g = tape.backward(out).unwrap();
        let f = |x: &Matrix, l: &Matrix| run_filter(&model, l.as_slice(), x, &obs, &prior).unwrap().loglik;
        assert!((out.item() - f(&x, &lam)).abs() < 1e-12);
        let gx = fd_gradient(&x, 1e-6, |xp| f(xp, &lam));
        let gl = fd_gradient(&lam, 1e-6, |lp| f(&x, lp));
        assert!(rel_err(&g.wrt(xv), &gx) < 1e-4, "{scheme:?}");
        assert!(rel_err(&g.wrt(lv), &gl) < 1e-4, "{scheme:?}: {:?} vs {:?}", g.wrt(lv), gl);
    }
}

#[test]
fn mixtures() {
    let s = linear_ssm(1, 3, 2, 4);
    let mut r = rng(77);
    let samples: Vec<Matrix> = (0..5).map(|_| random_matrix(&mut r, 4, 2)).collect();
    let single = marginal_filter_encoder(&s.model, &[], &samples[..1], &s.obs, &s.prior).unwrap();
    let direct = run_filter(&s.model, &[], &samples[0], &s.obs, &s.prior).unwrap();
    for (mix, st) in single.iter().zip(&direct.states) {
        assert_eq!(mix.components.len(), 1);
        assert_eq!(&mix.components[0], st);
    }
    let mixes = marginal_filter_joint(&s.model, &samples, &[vec![], vec![]], &s.obs, &s.prior).unwrap();
    assert_eq!(mixes[0].components.len(), 10);
    for (t, mix) in mixes.iter().enumerate() {
        let mut avg = Matrix::zeros(3, 1);
        for x in &samples {
            avg.add_assign(&run_filter(&s.model, &[], x, &s.obs, &s.prior).unwrap().states[t].m);
        }
        assert!(mix.mean().max_abs_diff(&avg.scale(0.2)) < 1e-12);
        // law of total variance along a fixed direction
        let dir = Matrix::col(&[0.3, -1.0, 0.5]);
        let total = dir.dot(&mix.covariance().matmul(&dir).unwrap());
        let within: f64 = mix.components.iter().map(|c| dir.dot(&c.c.matmul(&dir).unwrap())).sum::<f64>() / 10.0;
        assert!(total >= within - 1e-12);
        assert!((mix.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
