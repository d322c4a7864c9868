mod common;

use common::{fd_gradient, random_matrix, rel_err, rng};
use pidvae_core::datagen::count_local_maxima;
use pidvae_core::dynamics::{lorenz_drift, lorenz_drift_jacobian, Coef, FemSystem, Scheme, System, TransitionModel};
use pidvae_core::fem::{self, Convection, Mesh1D};
use pidvae_core::{Error, Matrix};

const LORENZ: [f64; 3] = [10.0, 28.0, 8.0 / 3.0];

fn lorenz(noise: f64) -> TransitionModel {
    let system = System::Lorenz {
        noise_cov: Matrix::identity(3).scale(noise * noise),
    };
    TransitionModel::new(system, Scheme::ExplicitEm, 0.001, 40).unwrap()
}

fn kdv(n_u: usize, scheme: Scheme) -> (Mesh1D, TransitionModel) {
    let mesh = Mesh1D::periodic(n_u, 0.0, 2.0).unwrap();
    let ops = fem::assemble_kdv(&mesh, 1.0, 1.0).unwrap();
    let system = System::Fem(FemSystem {
        mass: fem::assemble_mass(&mesh).unwrap(),
        linear: vec![(Coef::Param(1), ops.a_disp)],
        convection: Some((Coef::Param(0), Convection::new(&mesh).unwrap())),
        forcing: Matrix::zeros(n_u, 1),
        noise_cov: fem::assemble_forcing_cov(&mesh, 0.01, 0.2).unwrap(),
    });
    (mesh, TransitionModel::new(system, scheme, 0.01, 1).unwrap())
}

/// `M u_t = 0` with a zero forcing covariance.
fn trivial(n: usize, scheme: Scheme) -> TransitionModel {
    let mesh = Mesh1D::periodic(n, 0.0, 1.0).unwrap();
    let system = System::Fem(FemSystem {
        mass: fem::assemble_mass(&mesh).unwrap(),
        linear: vec![],
        convection: None,
        forcing: Matrix::zeros(n, 1),
        noise_cov: Matrix::zeros(n, n),
    });
    TransitionModel::new(system, scheme, 0.1, 1).unwrap()
}

#[test]
fn lorenz_drift_examples() {
    assert_eq!(lorenz_drift(&[0.0; 3], &LORENZ), [0.0; 3]);
    let f = lorenz_drift(&[1.0, 1.0, 1.0], &LORENZ);
    assert_eq!(f[0], 0.0);
    assert!((f[1] - 26.0).abs() < 1e-14);
    assert!((f[2] + 5.0 / 3.0).abs() < 1e-14);

    let mut r = rng(1);
    for _ in 0..20 {
        let u = random_matrix(&mut r, 3, 1).scale(10.0);
        let jac = lorenz_drift_jacobian(u.as_slice(), &LORENZ);
        for k in 0..3 {
            let fd = fd_gradient(&u, 1e-6, |x| lorenz_drift(x.as_slice(), &LORENZ)[k]);
            let row = Matrix::from_fn(3, 1, |j, _| jac[(k, j)]);
            assert!(rel_err(&row, &fd) < 1e-7);
        }
    }
}

#[test]
fn lorenz_transition_moments() {
    let model = lorenz(0.2);
    let u = Matrix::col(&[1.0, 1.0, 1.0]);
    let (mean, cov) = model.em_mean_cov(&u, &LORENZ).unwrap();
    let expect = Matrix::col(&[1.0, 1.0 + 0.026, 1.0 - 0.001 * 5.0 / 3.0]);
    assert!(mean.max_abs_diff(&expect) < 1e-15);
    assert!(cov.max_abs_diff(&Matrix::identity(3).scale(0.001 * 0.04)) < 1e-18);
    assert_eq!(lorenz(0.0).em_mean_cov(&u, &LORENZ).unwrap().1.max_abs(), 0.0);

    let err = TransitionModel::new(
        System::Lorenz {
            noise_cov: Matrix::identity(3),
        },
        Scheme::CrankNicolson,
        0.001,
        1,
    );
    assert!(err.is_err());
}

#[test]
fn identity_dynamics() {
    let mut r = rng(4);
    let u = random_matrix(&mut r, 5, 1);
    for scheme in [Scheme::ExplicitEm, Scheme::ImplicitEuler, Scheme::CrankNicolson] {
        let model = trivial(5, scheme);
        assert_eq!(model.residual(&u, &u, &[]).unwrap().max_abs(), 0.0);
        let traj = model.simulate(&u, &[], 6, 1.0, 3).unwrap();
        for t in 0..=6 {
            assert!(Matrix::col(traj.row(t)).max_abs_diff(&u) < 1e-14);
        }
        if scheme != Scheme::ExplicitEm {
            let (jn, jp) = model.jacobians(&u, &u, &[]).unwrap();
            assert_eq!(jn, *model.mass());
            assert_eq!(jp, model.mass().scale(-1.0));
        } else {
            let (mean, cov) = model.em_mean_cov(&u, &[]).unwrap();
            assert!(mean.max_abs_diff(&u) < 1e-14);
            assert_eq!(cov.max_abs(), 0.0);
        }
    }
}

#[test]
fn linear_scheme_jacobians() {
    let mesh = Mesh1D::periodic(12, 0.0, 1.0).unwrap();
    let a = fem::assemble_advection(&mesh, 1.0).unwrap();
    let m = fem::assemble_mass(&mesh).unwrap();
    let make = |scheme| {
        let system = System::Fem(FemSystem {
            mass: m.clone(),
            linear: vec![(Coef::Param(0), a.clone())],
            convection: None,
            forcing: Matrix::zeros(12, 1),
            noise_cov: Matrix::zeros(12, 12),
        });
        TransitionModel::new(system, scheme, 0.05, 1).unwrap()
    };
    let c = 0.7;
    let mut r = rng(9);
    let u_prev = random_matrix(&mut r, 12, 1);
    let u_n = random_matrix(&mut r, 12, 1);

    let cn = make(Scheme::CrankNicolson);
    let (jn, jp) = cn.jacobians(&u_n, &u_prev, &[c]).unwrap();
    let mut jn_ref = m.clone();
    jn_ref.axpy(0.05 * c / 2.0, &a);
    let mut jp_ref = m.scale(-1.0);
    jp_ref.axpy(0.05 * c / 2.0, &a);
    assert!(jn.max_abs_diff(&jn_ref) < 1e-15);
    assert!(jp.max_abs_diff(&jp_ref) < 1e-15);

    // the deterministic step zeroes its own residual
    let next = cn.step(&u_prev, &[c], None).unwrap();
    assert!(cn.residual(&next, &u_prev, &[c]).unwrap().max_abs() < 1e-12);

    // implicit Euler residual is affine in u_n with slope M + Δt c A
    let ie = make(Scheme::ImplicitEuler);
    let r0 = ie.residual(&Matrix::zeros(12, 1), &u_prev, &[c]).unwrap();
    let r1 = ie.residual(&u_n, &u_prev, &[c]).unwrap();
    let mut slope = m.clone();
    slope.axpy(0.05 * c, &a);
    assert!(r1.sub(&r0).unwrap().max_abs_diff(&slope.matmul(&u_n).unwrap()) < 1e-14);
}

#[test]
fn kdv_jacobians_match_finite_differences() {
    let lam = [1.0, 0.022 * 0.022];
    let mut r = rng(17);
    for scheme in [Scheme::ExplicitEm, Scheme::ImplicitEuler, Scheme::CrankNicolson] {
        let (_, model) = kdv(16, scheme);
        let u_prev = random_matrix(&mut r, 16, 1);
        let u_n = random_matrix(&mut r, 16, 1);
        let (jn, jp) = model.jacobians(&u_n, &u_prev, &lam).unwrap();
        for k in 0..16 {
            let row = |j: &Matrix| Matrix::from_fn(16, 1, |c, _| j[(k, c)]);
            let fd_n = fd_gradient(&u_n, 1e-6, |x| model.residual(x, &u_prev, &lam).unwrap()[k]);
            let fd_p = fd_gradient(&u_prev, 1e-6, |x| model.residual(&u_n, x, &lam).unwrap()[k]);
            assert!(rel_err(&row(&jn), &fd_n) < 1e-6, "{scheme:?}");
            assert!(rel_err(&row(&jp), &fd_p) < 1e-6, "{scheme:?}");
        }
    }
}

#[test]
fn simulation_is_seed_deterministic() {
    let (mesh, model) = kdv(32, Scheme::CrankNicolson);
    let u0 = Matrix::col(&mesh.nodes().iter().map(|s| (std::f64::consts::PI * s).cos()).collect::<Vec<_>>());
    let lam = [1.0, 0.022 * 0.022];
    let a = model.simulate(&u0, &lam, 5, 1.0, 42).unwrap();
    let b = model.simulate(&u0, &lam, 5, 1.0, 42).unwrap();
    let c = model.simulate(&u0, &lam, 5, 1.0, 43).unwrap();
    assert_eq!(a.as_slice(), b.as_slice());
    assert_ne!(a.as_slice(), c.as_slice());
}

#[test]
fn lorenz_stays_bounded() {
    let model = lorenz(0.0);
    let u0 = Matrix::col(&[-3.7277, -3.8239, 21.1507]);
    let traj = model.simulate(&u0, &LORENZ, 150, 0.0, 0).unwrap();
    assert!(traj.max_abs() < 60.0);
}

#[test]
fn newton_reports_divergence() {
    let (mesh, model) = kdv(16, Scheme::ImplicitEuler);
    let u0 = Matrix::col(&mesh.nodes().iter().map(|s| (std::f64::consts::PI * s).cos()).collect::<Vec<_>>());
    match model.simulate(&u0, &[f64::NAN, 0.0], 3, 0.0, 0) {
        Err(Error::Divergence { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn kdv_generates_solitons() {
    let (mesh, model) = kdv(256, Scheme::CrankNicolson);
    let u0: Vec<f64> = mesh.nodes().iter().map(|s| (std::f64::consts::PI * s).cos()).collect();
    let traj = model.simulate(&Matrix::col(&u0), &[1.0, 0.022 * 0.022], 100, 0.0, 0).unwrap();
    let start = count_local_maxima(&u0);
    let end = count_local_maxima(traj.row(100));
    assert_eq!(start, 1);
    assert!(end > start, "peaks at t=1: {end}");
    // steepening: the largest gradient grows
    let slope = |u: &[f64]| (0..u.len()).map(|i| (u[(i + 1) % u.len()] - u[i]).abs()).fold(0.0, f64::max);
    assert!(slope(traj.row(100)) > 2.0 * slope(&u0));
}
