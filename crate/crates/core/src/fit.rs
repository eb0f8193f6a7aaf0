//! Lifted-model identification.
//!
//! * the autonomous Koopman matrix by ridge-regularised least squares (EDMD),
//! * the control-coherent model: autonomous `A` with exact actuator rows and
//!   the exact input matrix `[B_p; 0]`,
//! * DMDc: joint least squares over `(A, B)`,
//! * a bilinear baseline `z+ = A z + B u + sum_i u_i N_i z`,
//! * direct encoding `A = Q R^-1` from inner products of observables.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{plant_step, ActuatorParams, PlantState, StateVector, DOF, STATE_DIM};
use crate::error::{Error, Result};
use crate::lifting::{Dictionary, LiftedState};

/// Gram matrices above this condition number trigger a warning.
pub const ILL_CONDITIONED: f64 = 1e12;

/// Index of the first rotor-angle coordinate in the state / lifted state.
pub const PHI: usize = 0;
/// Index of the first rotor-velocity coordinate.
pub const PHI_DOT: usize = DOF;
pub const THETA: usize = 2 * DOF;
pub const THETA_DOT: usize = 3 * DOF;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub x: PlantState,
    pub u: Vector2<f64>,
    pub next: PlantState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub samples: Vec<Transition>,
    /// Contiguous sample ranges, one per episode.
    pub episodes: Vec<Range<usize>>,
    pub seed: u64,
    pub dt: f64,
}

impl DataSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut expected = 0;
        for ep in &self.episodes {
            if ep.start != expected || ep.end < ep.start {
                return Err(Error::InvalidModel("episodes must tile the sample list".into()));
            }
            expected = ep.end;
        }
        if expected != self.samples.len() {
            return Err(Error::DimensionMismatch {
                context: "episode coverage",
                expected: self.samples.len(),
                got: expected,
            });
        }
        Ok(())
    }

    /// Episode-level split: the first `round(frac * episodes)` episodes train.
    pub fn split_episodes(&self, frac: f64) -> (DataSet, DataSet) {
        let n_train = ((self.episodes.len() as f64) * frac).round() as usize;
        let n_train = n_train.min(self.episodes.len());
        (self.subset(0..n_train), self.subset(n_train..self.episodes.len()))
    }

    fn subset(&self, eps: Range<usize>) -> DataSet {
        let mut samples = Vec::new();
        let mut episodes = Vec::new();
        for ep in &self.episodes[eps] {
            let start = samples.len();
            samples.extend_from_slice(&self.samples[ep.clone()]);
            episodes.push(start..samples.len());
        }
        DataSet {
            samples,
            episodes,
            seed: self.seed,
            dt: self.dt,
        }
    }
}

/// Removes the known input contribution from the rotor-velocity successor,
/// turning forced transitions into samples of the associated autonomous map.
pub fn shift_to_autonomous(data: &DataSet, act: &ActuatorParams) -> DataSet {
    let gain = act.input_gain();
    let samples = data
        .samples
        .iter()
        .map(|t| {
            let mut next = t.next;
            if t.u != Vector2::zeros() {
                next.p.phi_dot -= gain.component_mul(&t.u);
            }
            Transition { next, ..*t }
        })
        .collect();
    DataSet {
        samples,
        episodes: data.episodes.clone(),
        seed: data.seed,
        dt: data.dt,
    }
}

/// Lifted snapshot matrices, one column per transition.
#[derive(Debug, Clone)]
pub struct LiftedData {
    pub z: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub z_next: DMatrix<f64>,
}

impl LiftedData {
    pub fn from_dataset(data: &DataSet, dict: &Dictionary) -> Self {
        let n = data.len();
        let d = dict.dim();
        let mut z = DMatrix::zeros(d, n);
        let mut z_next = DMatrix::zeros(d, n);
        let mut u = DMatrix::zeros(DOF, n);
        for (j, t) in data.samples.iter().enumerate() {
            z.set_column(j, &dict.lift(&t.x));
            z_next.set_column(j, &dict.lift(&t.next));
            u.set_column(j, &t.u);
        }
        LiftedData { z, u, z_next }
    }

    /// Builds from explicit snapshot columns (used for synthetic systems).
    pub fn from_columns(z: DMatrix<f64>, u: DMatrix<f64>, z_next: DMatrix<f64>) -> Result<Self> {
        if z.shape() != z_next.shape() {
            return Err(Error::DimensionMismatch {
                context: "snapshot pairs",
                expected: z.ncols(),
                got: z_next.ncols(),
            });
        }
        if u.ncols() != z.ncols() {
            return Err(Error::DimensionMismatch {
                context: "input snapshots",
                expected: z.ncols(),
                got: u.ncols(),
            });
        }
        Ok(LiftedData { z, u, z_next })
    }

    pub fn len(&self) -> usize {
        self.z.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.z.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.z.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.u.nrows()
    }
}

/// Ridge penalty applied to the normal equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "lambda", rename_all = "snake_case")]
pub enum Ridge {
    /// Adds `lambda * I` to the raw Gram matrix.
    Absolute(f64),
    /// Adds `lambda * trace / p * I` to the raw Gram matrix.
    Trace(f64),
    /// Scales regressor columns to unit norm, then adds
    /// `lambda * trace / p * I` to the scaled Gram matrix.
    Relative(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(1e-6)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub ridge: Ridge,
    /// Gram accumulation threads. One worker gives bit-reproducible sums.
    pub workers: usize,
    /// Skip the eigenvalue-based condition estimate.
    pub skip_condition: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            ridge: Ridge::default(),
            workers: 1,
            skip_condition: false,
        }
    }
}

impl FitOptions {
    pub fn with_ridge(ridge: Ridge) -> Self {
        FitOptions {
            ridge,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    pub samples: usize,
    pub regressors: usize,
    /// Condition number of the (scaled, regularised) system matrix.
    pub condition_number: f64,
    pub ill_conditioned: bool,
}

struct NormalEquations {
    gram: DMatrix<f64>,
    cross: DMatrix<f64>,
    n: usize,
}

const CHUNK: usize = 512;

/// Accumulates `X X^T` and `X Y^T` where `fill` writes the regressor and
/// target columns of a sample range.
fn accumulate<F>(n: usize, p: usize, q: usize, workers: usize, fill: F) -> NormalEquations
where
    F: Fn(Range<usize>, &mut DMatrix<f64>, &mut DMatrix<f64>) + Sync,
{
    let run = |range: Range<usize>| {
        let mut gram = DMatrix::zeros(p, p);
        let mut cross = DMatrix::zeros(p, q);
        let mut start = range.start;
        while start < range.end {
            let end = (start + CHUNK).min(range.end);
            let mut x = DMatrix::zeros(p, end - start);
            let mut y = DMatrix::zeros(q, end - start);
            fill(start..end, &mut x, &mut y);
            gram.gemm(1.0, &x, &x.transpose(), 1.0);
            cross.gemm(1.0, &x, &y.transpose(), 1.0);
            start = end;
        }
        (gram, cross)
    };

    let workers = workers.max(1).min(n.max(1));
    let (gram, cross) = if workers == 1 {
        run(0..n)
    } else {
        let per = n.div_ceil(workers);
        let parts: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let range = (w * per).min(n)..((w + 1) * per).min(n);
                    let run = &run;
                    s.spawn(move || run(range))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("gram worker panicked")).collect()
        });
        parts.into_iter().fold(
            (DMatrix::zeros(p, p), DMatrix::zeros(p, q)),
            |(g, c), (pg, pc)| (g + pg, c + pc),
        )
    };
    NormalEquations { gram, cross, n }
}

/// Solves `(G + reg) W = C` and returns `W^T` (targets x regressors).
fn solve_normal(ne: NormalEquations, opts: &FitOptions) -> Result<(DMatrix<f64>, FitReport)> {
    let p = ne.gram.nrows();
    let (mut sys, rhs, scale) = match opts.ridge {
        Ridge::Absolute(lambda) => {
            let mut g = ne.gram;
            for i in 0..p {
                g[(i, i)] += lambda;
            }
            (g, ne.cross, None)
        }
        Ridge::Trace(lambda) => {
            let mut g = ne.gram;
            let shift = lambda * g.trace() / p as f64;
            for i in 0..p {
                g[(i, i)] += shift;
            }
            (g, ne.cross, None)
        }
        Ridge::Relative(lambda) => {
            let s = DVector::from_fn(p, |i, _| {
                let v = ne.gram[(i, i)].sqrt();
                if v > 0.0 {
                    1.0 / v
                } else {
                    1.0
                }
            });
            let mut g = ne.gram;
            for j in 0..p {
                for i in 0..p {
                    g[(i, j)] *= s[i] * s[j];
                }
            }
            let mut c = ne.cross;
            for i in 0..p {
                c.row_mut(i).scale_mut(s[i]);
            }
            let shift = lambda * g.trace() / p as f64;
            for i in 0..p {
                g[(i, i)] += shift;
            }
            (g, c, Some(s))
        }
    };

    let condition_number = if opts.skip_condition {
        f64::NAN
    } else {
        condition(&sys)
    };
    let ill_conditioned = condition_number > ILL_CONDITIONED;
    if ill_conditioned {
        log::warn!(
            "Gram matrix is ill-conditioned (cond = {condition_number:.3e}, p = {p}, n = {})",
            ne.n
        );
    }

    let mut w = match sys.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            // Rank-deficient system: minimum-norm solution.
            symmetrize(&mut sys);
            let svd = sys.svd(true, true);
            let tol = svd.singular_values.max() * p as f64 * f64::EPSILON;
            svd.solve(&rhs, tol).map_err(|e| Error::InvalidModel(e.to_string()))?
        }
    };
    if let Some(s) = scale {
        for i in 0..p {
            w.row_mut(i).scale_mut(s[i]);
        }
    }
    Ok((
        w.transpose(),
        FitReport {
            samples: ne.n,
            regressors: p,
            condition_number,
            ill_conditioned,
        },
    ))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn condition(m: &DMatrix<f64>) -> f64 {
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = s.symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// EDMD: `argmin_A sum |z+ - A z|^2 + ridge`, using only the snapshot pairs.
pub fn fit_autonomous_a(data: &LiftedData, opts: &FitOptions) -> Result<(DMatrix<f64>, FitReport)> {
    let d = data.dim();
    let ne = accumulate(data.len(), d, d, opts.workers, |r, x, y| {
        let len = r.len();
        x.copy_from(&data.z.columns(r.start, len));
        y.copy_from(&data.z_next.columns(r.start, len));
    });
    solve_normal(ne, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cck,
    Dmdc,
    Hybrid,
    Bilinear,
}

impl Variant {
    pub const ALL_TRACKED: [Variant; 3] = [Variant::Cck, Variant::Dmdc, Variant::Bilinear];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cck => "cck",
            Variant::Dmdc => "dmdc",
            Variant::Hybrid => "hybrid",
            Variant::Bilinear => "bilinear",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s.to_ascii_lowercase().as_str() {
            "cck" => Some(Variant::Cck),
            "dmdc" => Some(Variant::Dmdc),
            "hybrid" => Some(Variant::Hybrid),
            "bilinear" => Some(Variant::Bilinear),
            _ => None,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}

/// Anything that advances a lifted state by one step.
pub trait LiftedModel {
    fn dictionary(&self) -> &Dictionary;
    fn variant(&self) -> Variant;
    fn predict(&self, z: &LiftedState, u: &Vector2<f64>) -> LiftedState;
}

/// `z+ = A z + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLiftedModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub dictionary: Dictionary,
    pub variant: Variant,
    pub dt: f64,
}

impl LiftedModel for LinearLiftedModel {
    fn dictionary(&self) -> &Dictionary {
        &self.dictionary
    }
    fn variant(&self) -> Variant {
        self.variant
    }
    fn predict(&self, z: &LiftedState, u: &Vector2<f64>) -> LiftedState {
        &self.a * z + &self.b * u
    }
}

/// `z+ = A z + B u + sum_i u_i N_i z`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearLiftedModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub n: Vec<DMatrix<f64>>,
    pub dictionary: Dictionary,
    pub dt: f64,
}

impl BilinearLiftedModel {
    /// Input matrix at a fixed lifted state: `B + [N_1 z | ... | N_m z]`.
    pub fn effective_input_matrix(&self, z: &LiftedState) -> DMatrix<f64> {
        let mut b = self.b.clone();
        for (i, ni) in self.n.iter().enumerate() {
            let col = ni * z;
            let mut c = b.column_mut(i);
            c += col;
        }
        b
    }
}

impl LiftedModel for BilinearLiftedModel {
    fn dictionary(&self) -> &Dictionary {
        &self.dictionary
    }
    fn variant(&self) -> Variant {
        Variant::Bilinear
    }
    fn predict(&self, z: &LiftedState, u: &Vector2<f64>) -> LiftedState {
        let mut out = &self.a * z + &self.b * u;
        for (i, ni) in self.n.iter().enumerate() {
            if u[i] != 0.0 {
                out += u[i] * (ni * z);
            }
        }
        out
    }
}

/// Control-coherent model from an autonomous Koopman matrix.
///
/// The rotor rows of `A` are replaced by the exact discrete actuator
/// dynamics (zero coefficients on every RBF) and `B` carries `dt / I_i` in
/// the rotor-velocity rows only.
pub fn assemble_cck(a_auto: &DMatrix<f64>, act: &ActuatorParams, dict: &Dictionary) -> Result<LinearLiftedModel> {
    let d = dict.dim();
    if a_auto.shape() != (d, d) {
        return Err(Error::DimensionMismatch {
            context: "autonomous A",
            expected: d,
            got: a_auto.nrows(),
        });
    }
    let mut a = a_auto.clone();
    a.rows_mut(0, 2 * DOF).fill(0.0);
    let dt = act.dt;
    for i in 0..DOF {
        let (inertia, b, k, r) = (act.rotor_inertia[i], act.damping[i], act.stiffness[i], act.gear_ratio[i]);
        a[(PHI + i, PHI + i)] = 1.0;
        a[(PHI + i, PHI_DOT + i)] = dt;
        a[(PHI_DOT + i, PHI + i)] = -dt * k / inertia;
        a[(PHI_DOT + i, PHI_DOT + i)] = 1.0 - dt * b / inertia;
        a[(PHI_DOT + i, THETA + i)] = dt * k * r / inertia;
    }
    Ok(LinearLiftedModel {
        a,
        b: cck_input_matrix(act, d),
        dictionary: dict.clone(),
        variant: Variant::Cck,
        dt,
    })
}

/// `[B_p; 0]` with `B_p` the rotor-velocity rows `diag(dt / I_i)`.
pub fn cck_input_matrix(act: &ActuatorParams, d: usize) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(d, DOF);
    for i in 0..DOF {
        b[(PHI_DOT + i, i)] = act.dt / act.rotor_inertia[i];
    }
    b
}

/// Complete control-coherent fit from raw plant transitions.
pub fn fit_cck(data: &DataSet, act: &ActuatorParams, dict: &Dictionary, opts: &FitOptions) -> Result<(LinearLiftedModel, FitReport)> {
    let shifted = shift_to_autonomous(data, act);
    let lifted = LiftedData::from_dataset(&shifted, dict);
    let (a_auto, report) = fit_autonomous_a(&lifted, opts)?;
    Ok((assemble_cck(&a_auto, act, dict)?, report))
}

/// Input-matrix structure of a control-coherent model.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureCheck {
    /// Entries outside the rotor-velocity diagonal that are not exactly zero.
    pub off_support: Vec<(usize, usize, f64)>,
    /// Largest `|B_ii - dt / I_i|` on the rotor-velocity diagonal.
    pub diagonal_error: f64,
}

impl StructureCheck {
    pub fn passed(&self) -> bool {
        self.off_support.is_empty() && self.diagonal_error == 0.0
    }
}

pub fn check_cck_structure(b: &DMatrix<f64>, act: &ActuatorParams) -> StructureCheck {
    let mut off_support = Vec::new();
    let mut diagonal_error: f64 = 0.0;
    for j in 0..b.ncols() {
        for i in 0..b.nrows() {
            let v = b[(i, j)];
            if j < DOF && i == PHI_DOT + j {
                diagonal_error = diagonal_error.max((v - act.dt / act.rotor_inertia[j]).abs());
            } else if v != 0.0 {
                off_support.push((i, j, v));
            }
        }
    }
    if b.ncols() != DOF {
        diagonal_error = f64::INFINITY;
    }
    StructureCheck {
        off_support,
        diagonal_error,
    }
}

/// Joint least squares over `[z; u]`.
pub fn fit_dmdc(data: &LiftedData, dict: &Dictionary, dt: f64, opts: &FitOptions) -> Result<(LinearLiftedModel, FitReport)> {
    let (a, b, report) = fit_dmdc_matrices(data, opts)?;
    Ok((
        LinearLiftedModel {
            a,
            b,
            dictionary: dict.clone(),
            variant: Variant::Dmdc,
            dt,
        },
        report,
    ))
}

pub fn fit_dmdc_matrices(data: &LiftedData, opts: &FitOptions) -> Result<(DMatrix<f64>, DMatrix<f64>, FitReport)> {
    let d = data.dim();
    let m = data.inputs();
    let ne = accumulate(data.len(), d + m, d, opts.workers, |r, x, y| {
        let len = r.len();
        x.rows_mut(0, d).copy_from(&data.z.columns(r.start, len));
        x.rows_mut(d, m).copy_from(&data.u.columns(r.start, len));
        y.copy_from(&data.z_next.columns(r.start, len));
    });
    let (w, report) = solve_normal(ne, opts)?;
    Ok((w.columns(0, d).into_owned(), w.columns(d, m).into_owned(), report))
}

/// Least squares over `[z; u; u_1 z; ...; u_m z]`.
pub fn fit_bilinear(data: &LiftedData, dict: &Dictionary, dt: f64, opts: &FitOptions) -> Result<(BilinearLiftedModel, FitReport)> {
    let (a, b, n, report) = fit_bilinear_matrices(data, opts)?;
    Ok((
        BilinearLiftedModel {
            a,
            b,
            n,
            dictionary: dict.clone(),
            dt,
        },
        report,
    ))
}

#[allow(clippy::type_complexity)]
pub fn fit_bilinear_matrices(
    data: &LiftedData,
    opts: &FitOptions,
) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<DMatrix<f64>>, FitReport)> {
    let d = data.dim();
    let m = data.inputs();
    let p = d + m + m * d;
    let ne = accumulate(data.len(), p, d, opts.workers, |r, x, y| {
        let len = r.len();
        let zc = data.z.columns(r.start, len);
        let uc = data.u.columns(r.start, len);
        x.rows_mut(0, d).copy_from(&zc);
        x.rows_mut(d, m).copy_from(&uc);
        for i in 0..m {
            let mut block = x.rows_mut(d + m + i * d, d);
            for c in 0..len {
                let ui = uc[(i, c)];
                block.column_mut(c).zip_apply(&zc.column(c), |dst, src| *dst = ui * src);
            }
        }
        y.copy_from(&data.z_next.columns(r.start, len));
    });
    let (w, report) = solve_normal(ne, opts)?;
    let a = w.columns(0, d).into_owned();
    let b = w.columns(d, m).into_owned();
    let n = (0..m).map(|i| w.columns(d + m + i * d, d).into_owned()).collect();
    Ok((a, b, n, report))
}

/// Mean of squared one-step residuals of a model over lifted data.
pub fn training_residual<M: LiftedModel>(model: &M, data: &LiftedData) -> f64 {
    let mut total = 0.0;
    for j in 0..data.len() {
        let z = data.z.column(j).into_owned();
        let u = Vector2::new(data.u[(0, j)], data.u[(1, j)]);
        total += (model.predict(&z, &u) - data.z_next.column(j)).norm_squared();
    }
    total / data.len().max(1) as f64
}

/// Inner-product matrices `Q = <z+, z>` and `R = <z, z>`.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerProducts {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl InnerProducts {
    /// Empirical measure on the given snapshot pairs.
    pub fn empirical(data: &LiftedData) -> Self {
        InnerProducts {
            q: &data.z_next * data.z.transpose(),
            r: &data.z * data.z.transpose(),
        }
    }

    /// Monte-Carlo quadrature over an axis-aligned box.
    pub fn monte_carlo<G, F>(observables: G, map: F, domain: &[(f64, f64)], n_samples: usize, seed: u64) -> Self
    where
        G: Fn(&[f64]) -> DVector<f64>,
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let volume: f64 = domain.iter().map(|(lo, hi)| hi - lo).product();
        let mut x = vec![0.0; domain.len()];
        let probe = observables(&x);
        let d = probe.len();
        let mut q = DMatrix::zeros(d, d);
        let mut r = DMatrix::zeros(d, d);
        for _ in 0..n_samples {
            for (xi, (lo, hi)) in x.iter_mut().zip(domain) {
                *xi = rng.gen_range(*lo..*hi);
            }
            let g = observables(&x);
            let gf = observables(&map(&x));
            q.ger(1.0, &gf, &g, 1.0);
            r.ger(1.0, &g, &g, 1.0);
        }
        let w = volume / n_samples.max(1) as f64;
        InnerProducts { q: q * w, r: r * w }
    }

    /// Solves `Q = A R` with `regularization * trace(R) / d` added to `R`.
    pub fn solve(&self, regularization: f64) -> Result<DMatrix<f64>> {
        let d = self.r.nrows();
        let mut r = self.r.clone();
        symmetrize(&mut r);
        let shift = regularization * r.trace() / d.max(1) as f64;
        for i in 0..d {
            r[(i, i)] += shift;
        }
        let threshold = f64::EPSILON * r.trace().abs().max(f64::MIN_POSITIVE);
        let ch = r.cholesky().ok_or(Error::SingularGram { min_pivot: 0.0 })?;
        let min_pivot = ch.l_dirty().diagonal().iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
        if min_pivot <= threshold {
            return Err(Error::SingularGram { min_pivot });
        }
        // A R = Q  <=>  R A^T = Q^T
        Ok(ch.solve(&self.q.transpose()).transpose())
    }
}

/// Direct encoding of an autonomous map with a dictionary over a state box.
pub fn direct_encoding<F>(
    map: F,
    dict: &Dictionary,
    domain: &[(f64, f64); STATE_DIM],
    n_samples: usize,
    seed: u64,
    regularization: f64,
) -> Result<DMatrix<f64>>
where
    F: Fn(&StateVector) -> StateVector,
{
    if n_samples < dict.dim() {
        return Err(Error::InsufficientData {
            needed: dict.dim(),
            got: n_samples,
        });
    }
    let ip = InnerProducts::monte_carlo(
        |x| dict.lift_vector(&StateVector::from_column_slice(x)),
        |x| map(&StateVector::from_column_slice(x)).as_slice().to_vec(),
        domain,
        n_samples,
        seed,
    );
    ip.solve(regularization)
}

/// Autonomous plant map (zero motor torque) as a state-vector function.
pub fn autonomous_plant_map(params: &crate::arm::PlantParams) -> impl Fn(&StateVector) -> StateVector + '_ {
    move |x| {
        let s = PlantState::from_vector(x);
        crate::arm::euler_step(&s, &Vector2::zeros(), params).to_vector()
    }
}

/// Per-sample one-step state prediction errors on a held-out data set.
pub fn one_step_errors<M: LiftedModel>(model: &M, data: &DataSet) -> Vec<f64> {
    let dict = model.dictionary();
    data.samples
        .iter()
        .map(|t| {
            let z = dict.lift(&t.x);
            let pred = model.predict(&z, &t.u);
            let pred = pred.fixed_rows::<STATE_DIM>(0);
            (pred - t.next.to_vector()).norm()
        })
        .collect()
}

/// Histogram over explicit bin edges (`edges.len() - 1` bins).
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Values outside `[edges[0], edges[last]]` are clamped into the end bins.
    pub fn with_edges(values: &[f64], edges: &[f64]) -> Self {
        assert!(edges.len() >= 2, "histogram needs at least one bin");
        let bins = edges.len() - 1;
        let mut counts = vec![0usize; bins];
        for &v in values {
            let idx = match edges.partition_point(|e| *e <= v) {
                0 => 0,
                i => (i - 1).min(bins - 1),
            };
            counts[idx] += 1;
        }
        Histogram {
            edges: edges.to_vec(),
            counts,
        }
    }

    /// `bins` equal-width bins partitioning `[0, max]`.
    pub fn uniform_edges(max: f64, bins: usize) -> Vec<f64> {
        let max = if max > 0.0 { max } else { 1.0 };
        (0..=bins).map(|i| max * i as f64 / bins as f64).collect()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Convenience: generate a transition from the plant (used by tests and data generation).
pub fn transition(x: &PlantState, u: Vector2<f64>, params: &crate::arm::PlantParams) -> Result<Transition> {
    Ok(Transition {
        x: *x,
        u,
        next: plant_step(x, &u, params)?,
    })
}
