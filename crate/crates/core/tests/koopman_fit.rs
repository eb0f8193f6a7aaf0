use koopman_cck::arm::{plant_step, PlantParams, PlantState, StateVector, STATE_DIM};
use koopman_cck::bench::{generate_training_data, DataConfig};
use koopman_cck::fit::*;
use koopman_cck::lifting::{Dictionary, DictionaryConfig};
use nalgebra::{DMatrix, DVector, Vector2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn exact() -> FitOptions {
    FitOptions::with_ridge(Ridge::Absolute(0.0))
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-s..s))
}

fn random_stable(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let m = random_matrix(rng, d, d, 1.0);
    let norm = m.norm();
    m * (0.9 / norm)
}

fn small_plant_data(seed: u64) -> (PlantParams, DataSet, Dictionary) {
    let p = PlantParams::default();
    let cfg = DataConfig {
        episodes: 8,
        steps_per_episode: 250,
        ..Default::default()
    };
    let data = generate_training_data(&p, &cfg, seed).unwrap();
    let states: Vec<StateVector> = data.samples.iter().map(|t| t.x.to_vector()).collect();
    let dict = Dictionary::fit(
        &states,
        &DictionaryConfig {
            num_rbf: 24,
            ..Default::default()
        },
    )
    .unwrap();
    (p, data, dict)
}

#[test]
fn edmd_recovers_lti_system() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 10;
    let a = random_stable(&mut rng, d);
    let z = random_matrix(&mut rng, d, 400, 1.0);
    let data = LiftedData::from_columns(z.clone(), DMatrix::zeros(2, 400), &a * &z).unwrap();
    let (fit, report) = fit_autonomous_a(&data, &exact()).unwrap();
    assert!((fit - &a).amax() < 1e-8);
    assert!(!report.ill_conditioned);
}

#[test]
fn dmdc_recovers_lti_system_with_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 9;
    let a = random_stable(&mut rng, d);
    let b = random_matrix(&mut rng, d, 2, 1.0);
    let z = random_matrix(&mut rng, d, 500, 1.0);
    let u = random_matrix(&mut rng, 2, 500, 1.0);
    let data = LiftedData::from_columns(z.clone(), u.clone(), &a * &z + &b * &u).unwrap();
    let (fa, fb, _) = fit_dmdc_matrices(&data, &exact()).unwrap();
    assert!((fa - a).amax() < 1e-8);
    assert!((fb - b).amax() < 1e-8);
}

#[test]
fn bilinear_fit_recovers_bilinear_system() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 5;
    let a = random_stable(&mut rng, d);
    let b = random_matrix(&mut rng, d, 2, 1.0);
    let n: Vec<DMatrix<f64>> = (0..2).map(|_| random_matrix(&mut rng, d, d, 0.3)).collect();
    let cols = 600;
    let z = random_matrix(&mut rng, d, cols, 1.0);
    let u = random_matrix(&mut rng, 2, cols, 1.0);
    let mut next = &a * &z + &b * &u;
    for j in 0..cols {
        for i in 0..2 {
            let add = u[(i, j)] * (&n[i] * z.column(j));
            let mut c = next.column_mut(j);
            c += add;
        }
    }
    let data = LiftedData::from_columns(z, u, next).unwrap();
    let (fa, fb, fnn, _) = fit_bilinear_matrices(&data, &exact()).unwrap();
    assert!((fa - a).amax() < 1e-8);
    assert!((fb - b).amax() < 1e-8);
    for i in 0..2 {
        assert!((&fnn[i] - &n[i]).amax() < 1e-8);
    }
}

#[test]
fn direct_encoding_matches_edmd_on_empirical_measure() {
    let (_, data, dict) = small_plant_data(4);
    let lifted = LiftedData::from_dataset(&data, &dict);
    let (edmd, _) = fit_autonomous_a(&lifted, &exact()).unwrap();
    let direct = InnerProducts::empirical(&lifted).solve(0.0).unwrap();
    let scale = edmd.amax().max(1.0);
    assert!((direct - edmd).amax() / scale < 1e-8);
}

#[test]
fn direct_encoding_of_linear_map_returns_its_slope() {
    let a = 0.7;
    let single = InnerProducts::monte_carlo(|x: &[f64]| DVector::from_row_slice(&[x[0]]), |x: &[f64]| vec![a * x[0]], &[(-1.0, 1.0)], 1000, 1);
    assert!((single.solve(0.0).unwrap()[(0, 0)] - a).abs() < 1e-12);

    let monomials = |x: &[f64]| DVector::from_row_slice(&[x[0], x[0] * x[0], x[0].powi(3)]);
    let ip = InnerProducts::monte_carlo(monomials, |x: &[f64]| vec![a * x[0]], &[(-1.0, 1.0)], 5000, 2);
    let k = ip.solve(0.0).unwrap();
    let expect = DMatrix::from_diagonal(&DVector::from_row_slice(&[a, a * a, a * a * a]));
    assert!((k - expect).amax() < 1e-8);
}

#[test]
fn singular_gram_is_reported() {
    let ip = InnerProducts::monte_carlo(|x: &[f64]| DVector::from_row_slice(&[x[0], 2.0 * x[0]]), |x: &[f64]| vec![x[0]], &[(-1.0, 1.0)], 100, 3);
    assert!(matches!(ip.solve(0.0), Err(koopman_cck::Error::SingularGram { .. })));
}

#[test]
fn cck_input_matrix_has_exact_structure() {
    let (p, data, dict) = small_plant_data(5);
    let (model, _) = fit_cck(&data, &p.actuator, &dict, &FitOptions::default()).unwrap();
    let check = check_cck_structure(&model.b, &p.actuator);
    assert!(check.passed(), "{check:?}");
    for j in 0..2 {
        for i in 0..model.b.nrows() {
            if i != PHI_DOT + j {
                assert_eq!(model.b[(i, j)], 0.0);
            }
        }
        assert_eq!(model.b[(PHI_DOT + j, j)], p.dt() / p.actuator.rotor_inertia[j]);
    }
}

#[test]
fn cck_actuator_rows_reproduce_plant() {
    let (p, data, dict) = small_plant_data(6);
    let (model, _) = fit_cck(&data, &p.actuator, &dict, &FitOptions::default()).unwrap();
    for t in data.samples.iter().step_by(37) {
        let pred = &model.a * dict.lift(&t.x);
        let truth = plant_step(&t.x, &Vector2::zeros(), &p).unwrap().to_vector();
        for i in PHI..THETA {
            assert!((pred[i] - truth[i]).abs() <= 1e-12 * truth[i].abs().max(1.0), "row {i}");
        }
        let forced = model.predict(&dict.lift(&t.x), &t.u);
        for i in PHI..THETA {
            assert!((forced[i] - t.next.to_vector()[i]).abs() <= 1e-12 * forced[i].abs().max(1.0));
        }
    }
}

#[test]
fn autonomous_shift_matches_zero_input_step() {
    let (p, data, _) = small_plant_data(7);
    let shifted = shift_to_autonomous(&data, &p.actuator);
    for (s, t) in shifted.samples.iter().zip(&data.samples) {
        let free = plant_step(&t.x, &Vector2::zeros(), &p).unwrap();
        assert_eq!(s.next.q, t.next.q);
        assert_eq!(s.next.p.phi, t.next.p.phi);
        assert!((s.next.p.phi_dot - free.p.phi_dot).amax() <= 1e-12 * free.p.phi_dot.amax().max(1.0));
    }
}

#[test]
fn least_squares_stationarity() {
    let (p, data, dict) = small_plant_data(8);
    let shifted = shift_to_autonomous(&data, &p.actuator);
    let lifted = LiftedData::from_dataset(&shifted, &dict);
    let (a, _) = fit_autonomous_a(&lifted, &exact()).unwrap();
    let resid = &lifted.z_next - &a * &lifted.z;
    let grad = &resid * lifted.z.transpose();
    let scale = (&lifted.z_next * lifted.z.transpose()).amax();
    assert!(grad.amax() / scale <= 1e-8, "normal-equation residual {}", grad.amax() / scale);
    let base = training_residual(
        &LinearLiftedModel {
            a: a.clone(),
            b: DMatrix::zeros(a.nrows(), 2),
            dictionary: dict.clone(),
            variant: Variant::Dmdc,
            dt: p.dt(),
        },
        &LiftedData::from_columns(lifted.z.clone(), DMatrix::zeros(2, lifted.len()), lifted.z_next.clone()).unwrap(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let x = DVector::from_fn(a.nrows(), |_, _| rng.gen_range(-1.0..1.0));
        let y = DVector::from_fn(a.nrows(), |_, _| rng.gen_range(-1.0..1.0));
        let perturbed: DMatrix<f64> = &a + 1e-6 * &x * y.transpose();
        let r = (&lifted.z_next - &perturbed * &lifted.z).norm_squared() / lifted.len() as f64;
        assert!(r >= base * (1.0 - 1e-9));
    }
}

#[test]
fn fits_are_bit_reproducible_single_worker() {
    let (p, data, dict) = small_plant_data(10);
    let (a, _) = fit_cck(&data, &p.actuator, &dict, &FitOptions::default()).unwrap();
    let (b, _) = fit_cck(&data, &p.actuator, &dict, &FitOptions::default()).unwrap();
    assert!(a.a.iter().zip(b.a.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn worker_count_changes_sums_only_by_rounding() {
    let (_, data, dict) = small_plant_data(11);
    let lifted = LiftedData::from_dataset(&data, &dict);
    let one = fit_dmdc_matrices(&lifted, &FitOptions::default()).unwrap();
    let three = fit_dmdc_matrices(
        &lifted,
        &FitOptions {
            workers: 3,
            ..Default::default()
        },
    )
    .unwrap();
    assert!((&one.0 - &three.0).amax() < 1e-6 * one.0.amax());
    assert!((&one.1 - &three.1).amax() < 1e-6 * one.1.amax().max(1.0));
}

#[test]
fn one_step_errors_and_histograms() {
    let (p, data, dict) = small_plant_data(12);
    let (train, holdout) = data.split_episodes(0.75);
    assert_eq!(train.episodes.len(), 6);
    let (model, _) = fit_cck(&train, &p.actuator, &dict, &FitOptions::default()).unwrap();
    let errs = one_step_errors(&model, &holdout);
    assert_eq!(errs.len(), holdout.len());
    let edges = Histogram::uniform_edges(errs.iter().cloned().fold(0.0, f64::max), 12);
    let h = Histogram::with_edges(&errs, &edges);
    assert_eq!(h.total(), errs.len());
    assert_eq!(h.edges[0], 0.0);
}

#[test]
fn transitions_never_cross_episodes() {
    let (_, data, _) = small_plant_data(13);
    data.validate().unwrap();
    for ep in &data.episodes {
        for w in data.samples[ep.clone()].windows(2) {
            assert_eq!(w[0].next, w[1].x);
        }
    }
}

#[test]
fn lifted_dimension_consistency() {
    let (_, data, dict) = small_plant_data(14);
    let lifted = LiftedData::from_dataset(&data, &dict);
    assert_eq!(lifted.dim(), STATE_DIM + 24);
    assert_eq!(lifted.inputs(), 2);
    assert_eq!(lifted.len(), data.len());
    let x = PlantState::from_vector(&StateVector::repeat(0.1));
    assert_eq!(dict.lift(&x).len(), lifted.dim());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn prop_dmdc_recovers_random_systems(seed in 0u64..1000, d in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_stable(&mut rng, d);
        let b = random_matrix(&mut rng, d, 2, 1.0);
        let cols = 20 * (d + 2);
        let z = random_matrix(&mut rng, d, cols, 1.0);
        let u = random_matrix(&mut rng, 2, cols, 1.0);
        let data = LiftedData::from_columns(z.clone(), u.clone(), &a * &z + &b * &u).unwrap();
        let (fa, fb, _) = fit_dmdc_matrices(&data, &exact()).unwrap();
        prop_assert!((fa - a).amax() < 1e-8);
        prop_assert!((fb - b).amax() < 1e-8);
    }

    #[test]
    fn prop_cck_b_structure_for_any_actuator(i1 in 1e-4f64..1e-2, i2 in 1e-4f64..1e-2, dt in 1e-4f64..1e-2) {
        let mut act = PlantParams::default().actuator;
        act.rotor_inertia = [i1, i2];
        act.dt = dt;
        let b = cck_input_matrix(&act, 30);
        prop_assert!(check_cck_structure(&b, &act).passed());
    }
}
