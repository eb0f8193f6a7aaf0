use koopman_cck::arm::{PlantState, StateVector, STATE_DIM};
use koopman_cck::fit::{BilinearLiftedModel, LinearLiftedModel, Variant, THETA, THETA_DOT};
use koopman_cck::lifting::Dictionary;
use koopman_cck::mpc::*;
use nalgebra::{DMatrix, DVector, Vector2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * 0.1
}

fn boxed(h: DMatrix<f64>, g: DVector<f64>, lim: f64) -> QpProblem {
    let n = g.len();
    QpProblem {
        hessian: h,
        gradient: g,
        lower: DVector::repeat(n, -lim),
        upper: DVector::repeat(n, lim),
    }
}

// Exhaustive grid search, then repeated zoom around the best grid point.
fn grid_minimizer(qp: &QpProblem, points: usize, rounds: usize) -> DVector<f64> {
    let n = qp.gradient.len();
    let mut lo = qp.lower.clone();
    let mut hi = qp.upper.clone();
    let mut best = lo.clone();
    for _ in 0..rounds {
        let mut idx = vec![0usize; n];
        let mut best_val = f64::INFINITY;
        loop {
            let x = DVector::from_fn(n, |i, _| lo[i] + (hi[i] - lo[i]) * idx[i] as f64 / (points - 1) as f64);
            let v = qp.objective(&x);
            if v < best_val {
                best_val = v;
                best = x;
            }
            let mut k = 0;
            while k < n {
                idx[k] += 1;
                if idx[k] < points {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == n {
                break;
            }
        }
        for i in 0..n {
            let step = (hi[i] - lo[i]) / (points - 1) as f64;
            lo[i] = (best[i] - 2.0 * step).max(qp.lower[i]);
            hi[i] = (best[i] + 2.0 * step).min(qp.upper[i]);
        }
    }
    best
}

// Projected Gauss-Seidel from a starting point; each sweep minimises exactly along one axis.
fn coordinate_descent(qp: &QpProblem, mut x: DVector<f64>, sweeps: usize) -> DVector<f64> {
    for _ in 0..sweeps {
        for i in 0..x.len() {
            let g = (qp.hessian.row(i) * &x)[0] + qp.gradient[i];
            x[i] = (x[i] - g / qp.hessian[(i, i)]).clamp(qp.lower[i], qp.upper[i]);
        }
    }
    x
}

fn identity_model(a: DMatrix<f64>, b: DMatrix<f64>) -> LinearLiftedModel {
    LinearLiftedModel {
        a,
        b,
        dictionary: Dictionary::identity(),
        variant: Variant::Dmdc,
        dt: 1e-3,
    }
}

fn random_system(rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = DMatrix::from_fn(STATE_DIM, STATE_DIM, |_, _| rng.gen_range(-1.0..1.0));
    let norm = m.norm();
    let a = DMatrix::identity(STATE_DIM, STATE_DIM) * 0.5 + m * (0.4 / norm);
    let b = DMatrix::from_fn(STATE_DIM, 2, |_, _| rng.gen_range(-1.0..1.0));
    (a, b)
}

fn output_selector() -> DMatrix<f64> {
    let mut c = DMatrix::zeros(OUTPUTS, STATE_DIM);
    for i in 0..OUTPUTS {
        c[(i, THETA + i)] = 1.0;
    }
    c
}

fn state(rng: &mut ChaCha8Rng) -> PlantState {
    PlantState::from_vector(&StateVector::from_fn(|_, _| rng.gen_range(-1.0..1.0)))
}

fn zero_refs(h: usize) -> Vec<OutputVector> {
    vec![OutputVector::zeros(); h]
}

#[test]
fn box_qp_matches_grid_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let h = random_pd(&mut rng, 4);
        let g = DVector::from_fn(4, |_, _| rng.gen_range(-3.0..3.0));
        let qp = boxed(h, g, 1.0);
        let sol = solve_qp_box(&qp, 1e-10, 5000, None);
        assert!(sol.converged);
        assert!(sol.kkt_residual <= 1e-8);
        let oracle = grid_minimizer(&qp, 11, 8);
        assert!((&sol.x - &oracle).amax() <= 2e-3, "{} vs {}", sol.x, oracle);
        assert!(qp.objective(&sol.x) <= qp.objective(&oracle) + 1e-9);
    }
}

#[test]
fn double_integrator_horizon_three_matches_grid() {
    let dt = 0.1;
    let mut a = DMatrix::identity(STATE_DIM, STATE_DIM);
    let mut b = DMatrix::zeros(STATE_DIM, 2);
    for j in 0..2 {
        a[(THETA + j, THETA_DOT + j)] = dt;
        b[(THETA_DOT + j, j)] = dt;
    }
    let model = identity_model(a, b);
    let cfg = MpcConfig {
        horizon: 3,
        q_theta: 1.0,
        q_theta_dot: 0.1,
        r_input: 0.01,
        u_max: 1.0,
        ..Default::default()
    };
    let mut x = StateVector::zeros();
    x[THETA] = 1.0;
    x[THETA_DOT + 1] = -0.5;
    let qp = build_condensed_qp(&model, &Dictionary::identity().lift_vector(&x), &zero_refs(3), &cfg).unwrap();
    let sol = solve_qp_box(&qp, 1e-10, 5000, None);
    assert!(sol.kkt_residual <= 1e-8);
    let oracle = coordinate_descent(&qp, grid_minimizer(&qp, 7, 6), 20000);
    assert!((&sol.x - &oracle).amax() <= 2e-3, "{} vs {}", sol.x, oracle);
    assert!(qp.objective(&sol.x) <= qp.objective(&oracle) + 1e-12);
    assert!(sol.x.iter().any(|u| u.abs() >= 1.0 - 1e-9), "expected an active bound: {}", sol.x);
}

#[test]
fn unconstrained_mpc_matches_finite_horizon_riccati() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = random_system(&mut rng);
    let cfg = MpcConfig {
        horizon: 12,
        q_theta: 3.0,
        q_theta_dot: 0.5,
        r_input: 0.2,
        u_max: 1e9,
        qp_tol: 1e-12,
        qp_max_iter: 20000,
    };
    let c = output_selector();
    let qw = DMatrix::from_diagonal(&DVector::from_row_slice(&[3.0, 3.0, 0.5, 0.5]));
    let ctqc = c.transpose() * &qw * &c;
    let rw = DMatrix::identity(2, 2) * 0.2;
    let mut p = ctqc.clone();
    for _ in 1..cfg.horizon {
        let btp = b.transpose() * &p;
        let s = (&rw + &btp * &b).try_inverse().unwrap();
        p = &ctqc + a.transpose() * &p * &a - a.transpose() * btp.transpose() * s * &btp * &a;
    }
    let gain = (&rw + b.transpose() * &p * &b).try_inverse().unwrap() * b.transpose() * &p * &a;
    for _ in 0..5 {
        let x = state(&mut rng);
        let u = mpc_step(&identity_model(a.clone(), b.clone()), &x, &zero_refs(cfg.horizon), &cfg).unwrap();
        let lqr = -&gain * x.to_vector();
        assert!((u[0] - lqr[0]).abs() <= 1e-6 * (1.0 + lqr[0].abs()));
        assert!((u[1] - lqr[1]).abs() <= 1e-6 * (1.0 + lqr[1].abs()));
    }
}

#[test]
fn zero_output_weight_gives_zero_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = random_system(&mut rng);
    let cfg = MpcConfig {
        q_theta: 0.0,
        q_theta_dot: 0.0,
        ..Default::default()
    };
    let u = mpc_step(&identity_model(a, b), &state(&mut rng), &zero_refs(cfg.horizon), &cfg).unwrap();
    assert_eq!(u, Vector2::zeros());
}

#[test]
fn horizon_one_without_input_gain_has_diagonal_hessian() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, _) = random_system(&mut rng);
    let cfg = MpcConfig {
        horizon: 1,
        r_input: 0.37,
        ..Default::default()
    };
    let model = identity_model(a, DMatrix::zeros(STATE_DIM, 2));
    let x = state(&mut rng);
    let qp = build_condensed_qp(&model, &model.dictionary.lift(&x), &zero_refs(1), &cfg).unwrap();
    assert_eq!(qp.hessian, DMatrix::identity(2, 2) * 0.37);
    assert_eq!(qp.gradient, DVector::zeros(2));
}

#[test]
fn reference_equal_to_free_response_needs_no_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = random_system(&mut rng);
    let cfg = MpcConfig::default();
    let x = state(&mut rng);
    let pred = Prediction::new(&a, cfg.horizon);
    let free = pred.free_response(&DVector::from_column_slice(x.to_vector().as_slice()));
    let refs: Vec<OutputVector> = (0..cfg.horizon).map(|k| OutputVector::from_fn(|i, _| free[k * OUTPUTS + i])).collect();
    let u = mpc_step(&identity_model(a, b), &x, &refs, &cfg).unwrap();
    assert!(u.amax() <= 1e-10, "{u}");
}

#[test]
fn solution_improves_on_zero_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (a, b) = random_system(&mut rng);
    let cfg = MpcConfig {
        u_max: 0.5,
        ..Default::default()
    };
    let model = identity_model(a, b);
    for _ in 0..10 {
        let x = state(&mut rng);
        let refs: Vec<OutputVector> = (0..cfg.horizon).map(|_| OutputVector::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect();
        let qp = build_condensed_qp(&model, &model.dictionary.lift(&x), &refs, &cfg).unwrap();
        let sol = solve_qp_box(&qp, cfg.qp_tol, cfg.qp_max_iter, None);
        assert!(qp.objective(&sol.x) <= 0.0);
        assert!(sol.x.iter().all(|u| u.abs() <= 0.5));
    }
}

#[test]
fn bilinear_without_coupling_equals_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (a, b) = random_system(&mut rng);
    let cfg = MpcConfig::default();
    let lin = identity_model(a.clone(), b.clone());
    let bil = BilinearLiftedModel {
        a,
        b,
        n: vec![DMatrix::zeros(STATE_DIM, STATE_DIM); 2],
        dictionary: Dictionary::identity(),
        dt: 1e-3,
    };
    for _ in 0..5 {
        let x = state(&mut rng);
        let refs: Vec<OutputVector> = (0..cfg.horizon).map(|_| OutputVector::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect();
        let ul = mpc_step(&lin, &x, &refs, &cfg).unwrap();
        let ub = bilinear_mpc_step(&bil, &x, &refs, &cfg).unwrap();
        assert!((ul - ub).amax() <= 1e-9);
    }
}

#[test]
fn scalar_bilinear_toy_reaches_setpoint() {
    let mut a = DMatrix::identity(STATE_DIM, STATE_DIM) * 0.95;
    a[(THETA, THETA)] = 0.98;
    let mut b = DMatrix::zeros(STATE_DIM, 2);
    b[(THETA, 0)] = 0.1;
    let mut n0 = DMatrix::zeros(STATE_DIM, STATE_DIM);
    n0[(THETA, THETA)] = 0.05;
    let model = BilinearLiftedModel {
        a,
        b,
        n: vec![n0, DMatrix::zeros(STATE_DIM, STATE_DIM)],
        dictionary: Dictionary::identity(),
        dt: 1e-3,
    };
    let cfg = MpcConfig {
        horizon: 10,
        u_max: 5.0,
        ..Default::default()
    };
    let target = 0.5;
    let mut refs = zero_refs(cfg.horizon);
    for r in refs.iter_mut() {
        r[0] = target;
    }
    let mut ctrl = BilinearMpc::new(model.clone(), cfg).unwrap();
    let mut x = PlantState::zero();
    for _ in 0..200 {
        let u = ctrl.control(&x, &refs).unwrap();
        let z = DVector::from_column_slice(x.to_vector().as_slice());
        let next = koopman_cck::fit::LiftedModel::predict(&model, &z, &u);
        x = PlantState::from_vector(&StateVector::from_column_slice(next.as_slice()));
    }
    assert!((x.q.theta[0] - target).abs() <= 0.05 * target, "theta = {}", x.q.theta[0]);
}

#[test]
fn controller_runs_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (a, b) = random_system(&mut rng);
    let model = identity_model(a, b);
    let cfg = MpcConfig::default();
    let xs: Vec<PlantState> = (0..20).map(|_| state(&mut rng)).collect();
    let run = || {
        let mut c = LinearMpc::new(model.clone(), cfg.clone()).unwrap();
        xs.iter().map(|x| c.control(x, &zero_refs(cfg.horizon)).unwrap()).collect::<Vec<_>>()
    };
    let first = run();
    let second = run();
    for (p, q) in first.iter().zip(&second) {
        assert_eq!(p[0].to_bits(), q[0].to_bits());
        assert_eq!(p[1].to_bits(), q[1].to_bits());
    }
}

#[test]
fn wrong_window_length_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (a, b) = random_system(&mut rng);
    let cfg = MpcConfig::default();
    let err = mpc_step(&identity_model(a, b), &PlantState::zero(), &zero_refs(3), &cfg).unwrap_err();
    assert!(matches!(err, koopman_cck::Error::DimensionMismatch { .. }));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn prop_qp_solution_feasible_and_stationary(seed in 0u64..10_000, n in 1usize..12, lim in 0.1f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_pd(&mut rng, n);
        let g = DVector::from_fn(n, |_, _| rng.gen_range(-10.0..10.0));
        let qp = boxed(h, g, lim);
        let sol = solve_qp_box(&qp, 1e-9, 20000, None);
        prop_assert!(sol.x.iter().all(|v| v.abs() <= lim));
        prop_assert!(sol.converged);
        prop_assert!(qp.kkt_residual(&sol.x) <= 1e-9);
        prop_assert!(qp.objective(&sol.x) <= qp.objective(&DVector::zeros(n)) + 1e-12);
    }
}
