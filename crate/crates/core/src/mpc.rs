//! Model predictive control on lifted models.
//!
//! The prediction `z_k = A^k z_0 + sum_j A^(k-1-j) B u_j` is substituted into
//! the tracking cost, leaving a box-constrained QP in the stacked inputs:
//!
//! ```text
//! min_U  1/2 U' H U + g' U    s.t.  -u_max <= U <= u_max
//! H = G' Q G + R,   g = G' Q (P z_0 - ref)
//! ```
//!
//! The costed outputs are the joint angles and velocities of the lifted state.

use nalgebra::{DMatrix, DVector, SVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::arm::{forward_kinematics, plant_step, PlantParams, PlantState, DOF};
use crate::bench::{ReferenceTrajectory, TrackingReport};
use crate::error::{Error, Result};
use crate::fit::{BilinearLiftedModel, LiftedModel, LinearLiftedModel, Variant, THETA};
use crate::lifting::{Dictionary, LiftedState};

/// Number of costed outputs: joint angles then joint velocities.
pub const OUTPUTS: usize = 2 * DOF;
/// Joint-space reference sample `[theta; theta_dot]`.
pub type OutputVector = SVector<f64, OUTPUTS>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Weight on joint-angle error.
    pub q_theta: f64,
    /// Weight on joint-velocity error.
    pub q_theta_dot: f64,
    /// Weight on motor torque.
    pub r_input: f64,
    /// Motor torque bound (N m).
    pub u_max: f64,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 20,
            q_theta: 1e4,
            q_theta_dot: 10.0,
            r_input: 0.01,
            u_max: 20.0,
            qp_tol: 1e-8,
            qp_max_iter: 2000,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("mpc.horizon", "must be >= 1"));
        }
        if !(self.q_theta >= 0.0 && self.q_theta_dot >= 0.0) {
            return Err(Error::invalid("mpc.q_theta", "output weights must be >= 0"));
        }
        if !(self.r_input > 0.0) {
            return Err(Error::invalid("mpc.r_input", "must be > 0"));
        }
        if !(self.u_max > 0.0) {
            return Err(Error::invalid("mpc.u_max", "must be > 0"));
        }
        if !(self.qp_tol > 0.0) || self.qp_max_iter == 0 {
            return Err(Error::invalid("mpc.qp_tol", "tolerance and iteration cap must be positive"));
        }
        Ok(())
    }

    fn output_weights(&self) -> OutputVector {
        OutputVector::from_fn(|i, _| if i < DOF { self.q_theta } else { self.q_theta_dot })
    }
}

/// `min 1/2 x' H x + g' x` subject to `lower <= x <= upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QpProblem {
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.gradient.dot(x)
    }

    fn project(&self, x: &mut DVector<f64>) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    /// Projected-gradient fixpoint residual `|x - P(x - grad J(x))|`.
    pub fn kkt_residual(&self, x: &DVector<f64>) -> f64 {
        let grad = &self.hessian * x + &self.gradient;
        let mut step = x - grad;
        self.project(&mut step);
        (x - step).norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// False when `max_iter` was hit; `x` is then the best iterate found.
    pub converged: bool,
}

/// Accelerated projected gradient with adaptive restart. Every few
/// iterations the current active set is polished by an exact reduced solve.
pub fn solve_qp_box(qp: &QpProblem, tol: f64, max_iter: usize, warm_start: Option<&DVector<f64>>) -> QpSolution {
    let n = qp.gradient.len();
    let lipschitz = {
        let eig = qp.hessian.clone().symmetric_eigenvalues();
        eig.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE)
    };
    let step = 1.0 / lipschitz;

    let mut x = warm_start.cloned().unwrap_or_else(|| DVector::zeros(n));
    qp.project(&mut x);
    let mut best_res = qp.kkt_residual(&x);
    let mut best = x.clone();
    if best_res <= tol {
        return QpSolution { x, iterations: 0, kkt_residual: best_res, converged: true };
    }

    let mut y = x.clone();
    let mut t: f64 = 1.0;
    let mut prev_obj = qp.objective(&x);
    for it in 1..=max_iter {
        let grad = &qp.hessian * &y + &qp.gradient;
        let mut next = &y - step * grad;
        qp.project(&mut next);
        let obj = qp.objective(&next);
        if obj > prev_obj && t > 1.0 {
            // restart momentum
            t = 1.0;
            y = x.clone();
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + ((t - 1.0) / t_next) * (&next - &x);
        x = next;
        t = t_next;
        prev_obj = obj;

        let res = qp.kkt_residual(&x);
        if res < best_res {
            best_res = res;
            best = x.clone();
        }
        if res <= tol {
            return QpSolution { x, iterations: it, kkt_residual: res, converged: true };
        }
        if it % 5 == 0 {
            if let Some(p) = polish(qp, &x) {
                let pres = qp.kkt_residual(&p);
                if pres <= tol {
                    return QpSolution { x: p, iterations: it, kkt_residual: pres, converged: true };
                }
            }
        }
    }
    QpSolution { x: best, iterations: max_iter, kkt_residual: best_res, converged: false }
}

/// Exact minimiser on the face selected by the active bounds of `x`.
fn polish(qp: &QpProblem, x: &DVector<f64>) -> Option<DVector<f64>> {
    let n = x.len();
    let grad = &qp.hessian * x + &qp.gradient;
    let scale = 1e-9 * (qp.upper.amax().max(qp.lower.amax())).max(1.0);
    let mut fixed = vec![false; n];
    let mut out = x.clone();
    for i in 0..n {
        if x[i] <= qp.lower[i] + scale && grad[i] > 0.0 {
            fixed[i] = true;
            out[i] = qp.lower[i];
        } else if x[i] >= qp.upper[i] - scale && grad[i] < 0.0 {
            fixed[i] = true;
            out[i] = qp.upper[i];
        }
    }
    let free: Vec<usize> = (0..n).filter(|&i| !fixed[i]).collect();
    if free.is_empty() {
        return Some(out);
    }
    let mut h = DMatrix::zeros(free.len(), free.len());
    let mut rhs = DVector::zeros(free.len());
    for (a, &i) in free.iter().enumerate() {
        let mut r = -qp.gradient[i];
        for j in 0..n {
            if fixed[j] {
                r -= qp.hessian[(i, j)] * out[j];
            }
        }
        rhs[a] = r;
        for (b, &j) in free.iter().enumerate() {
            h[(a, b)] = qp.hessian[(i, j)];
        }
    }
    let sol = h.cholesky()?.solve(&rhs);
    for (a, &i) in free.iter().enumerate() {
        if sol[a] < qp.lower[i] || sol[a] > qp.upper[i] {
            return None;
        }
        out[i] = sol[a];
    }
    Some(out)
}

/// Output predictors `S A^k` for `k = 0..=horizon`.
#[derive(Debug, Clone)]
pub struct Prediction {
    powers: Vec<DMatrix<f64>>,
}

impl Prediction {
    pub fn new(a: &DMatrix<f64>, horizon: usize) -> Self {
        let d = a.nrows();
        let mut powers = Vec::with_capacity(horizon + 1);
        let mut cur = DMatrix::zeros(OUTPUTS, d);
        for i in 0..OUTPUTS {
            cur[(i, THETA + i)] = 1.0;
        }
        powers.push(cur.clone());
        for _ in 0..horizon {
            cur = &cur * a;
            powers.push(cur.clone());
        }
        Prediction { powers }
    }

    pub fn horizon(&self) -> usize {
        self.powers.len() - 1
    }

    /// Free response `[S A^1 z; ...; S A^H z]`.
    pub fn free_response(&self, z0: &LiftedState) -> DVector<f64> {
        let h = self.horizon();
        let mut out = DVector::zeros(h * OUTPUTS);
        for k in 1..=h {
            out.rows_mut((k - 1) * OUTPUTS, OUTPUTS).copy_from(&(&self.powers[k] * z0));
        }
        out
    }

    /// Forced-response matrix with block `(k, j) = S A^(k-1-j) B` for `j < k`.
    pub fn forced_response(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let h = self.horizon();
        let m = b.ncols();
        let markov: Vec<DMatrix<f64>> = self.powers[..h].iter().map(|p| p * b).collect();
        let mut g = DMatrix::zeros(h * OUTPUTS, h * m);
        for k in 1..=h {
            for j in 0..k {
                g.view_mut(((k - 1) * OUTPUTS, j * m), (OUTPUTS, m))
                    .copy_from(&markov[k - 1 - j]);
            }
        }
        g
    }
}

/// Stacks a reference window into a vector matching the output ordering.
fn stack_reference(refs: &[OutputVector]) -> DVector<f64> {
    let mut out = DVector::zeros(refs.len() * OUTPUTS);
    for (k, r) in refs.iter().enumerate() {
        out.rows_mut(k * OUTPUTS, OUTPUTS).copy_from(r);
    }
    out
}

fn condensed_hessian(forced: &DMatrix<f64>, cfg: &MpcConfig, m: usize) -> DMatrix<f64> {
    let q = cfg.output_weights();
    let mut qg = forced.clone();
    for r in 0..qg.nrows() {
        qg.row_mut(r).scale_mut(q[r % OUTPUTS]);
    }
    let mut h = forced.transpose() * qg;
    for i in 0..cfg.horizon * m {
        h[(i, i)] += cfg.r_input;
    }
    // exact symmetry
    let n = h.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}

fn condensed_gradient(forced: &DMatrix<f64>, error: &DVector<f64>, cfg: &MpcConfig) -> DVector<f64> {
    let q = cfg.output_weights();
    let weighted = DVector::from_fn(error.len(), |i, _| q[i % OUTPUTS] * error[i]);
    forced.tr_mul(&weighted)
}

fn bounds(cfg: &MpcConfig, m: usize) -> (DVector<f64>, DVector<f64>) {
    let n = cfg.horizon * m;
    (DVector::repeat(n, -cfg.u_max), DVector::repeat(n, cfg.u_max))
}

fn check_window(refs: &[OutputVector], cfg: &MpcConfig) -> Result<()> {
    if refs.len() != cfg.horizon {
        return Err(Error::DimensionMismatch {
            context: "reference window",
            expected: cfg.horizon,
            got: refs.len(),
        });
    }
    Ok(())
}

/// Condensed QP for a linear lifted model from initial lifted state `z0`.
pub fn build_condensed_qp(model: &LinearLiftedModel, z0: &LiftedState, refs: &[OutputVector], cfg: &MpcConfig) -> Result<QpProblem> {
    check_window(refs, cfg)?;
    let d = model.a.nrows();
    if z0.len() != d || model.a.ncols() != d || model.b.nrows() != d {
        return Err(Error::DimensionMismatch {
            context: "condensed QP model",
            expected: d,
            got: z0.len(),
        });
    }
    let pred = Prediction::new(&model.a, cfg.horizon);
    Ok(qp_from_parts(&pred, &model.b, z0, refs, cfg))
}

fn qp_from_parts(pred: &Prediction, b: &DMatrix<f64>, z0: &LiftedState, refs: &[OutputVector], cfg: &MpcConfig) -> QpProblem {
    let forced = pred.forced_response(b);
    let error = pred.free_response(z0) - stack_reference(refs);
    let (lower, upper) = bounds(cfg, b.ncols());
    QpProblem {
        hessian: condensed_hessian(&forced, cfg, b.ncols()),
        gradient: condensed_gradient(&forced, &error, cfg),
        lower,
        upper,
    }
}

fn first_input(u: &DVector<f64>, u_max: f64) -> Vector2<f64> {
    Vector2::new(u[0].clamp(-u_max, u_max), u[1].clamp(-u_max, u_max))
}

/// One MPC step: lift the measured state, solve, return the first input.
pub fn mpc_step(model: &LinearLiftedModel, x: &PlantState, refs: &[OutputVector], cfg: &MpcConfig) -> Result<Vector2<f64>> {
    let mut ctrl = LinearMpc::new(model.clone(), cfg.clone())?;
    ctrl.control(x, refs)
}

/// One successive-linearisation MPC step for a bilinear model.
pub fn bilinear_mpc_step(model: &BilinearLiftedModel, x: &PlantState, refs: &[OutputVector], cfg: &MpcConfig) -> Result<Vector2<f64>> {
    let mut ctrl = BilinearMpc::new(model.clone(), cfg.clone())?;
    ctrl.control(x, refs)
}

/// Receding-horizon controller driven by measured plant states.
pub trait Controller {
    fn variant(&self) -> Variant;
    fn horizon(&self) -> usize;
    fn control(&mut self, x: &PlantState, refs: &[OutputVector]) -> Result<Vector2<f64>>;
    /// Statistics of the most recent QP solve.
    fn last_solution(&self) -> Option<&QpSolution>;
}

/// Warm start: previous solution shifted one step, last input repeated.
fn shifted(prev: &DVector<f64>, m: usize) -> DVector<f64> {
    let n = prev.len();
    let mut w = DVector::zeros(n);
    if n > m {
        w.rows_mut(0, n - m).copy_from(&prev.rows(m, n - m));
        w.rows_mut(n - m, m).copy_from(&prev.rows(n - m, m));
    }
    w
}

/// MPC on `z+ = A z + B u` with prediction matrices cached.
pub struct LinearMpc {
    model: LinearLiftedModel,
    cfg: MpcConfig,
    pred: Prediction,
    forced: DMatrix<f64>,
    hessian: DMatrix<f64>,
    last: Option<QpSolution>,
}

impl LinearMpc {
    pub fn new(model: LinearLiftedModel, cfg: MpcConfig) -> Result<Self> {
        cfg.validate()?;
        let pred = Prediction::new(&model.a, cfg.horizon);
        let forced = pred.forced_response(&model.b);
        let hessian = condensed_hessian(&forced, &cfg, model.b.ncols());
        Ok(LinearMpc { model, cfg, pred, forced, hessian, last: None })
    }

    pub fn model(&self) -> &LinearLiftedModel {
        &self.model
    }
}

impl Controller for LinearMpc {
    fn variant(&self) -> Variant {
        self.model.variant
    }
    fn horizon(&self) -> usize {
        self.cfg.horizon
    }
    fn control(&mut self, x: &PlantState, refs: &[OutputVector]) -> Result<Vector2<f64>> {
        check_window(refs, &self.cfg)?;
        let z = self.model.dictionary.lift(x);
        let error = self.pred.free_response(&z) - stack_reference(refs);
        let (lower, upper) = bounds(&self.cfg, DOF);
        let qp = QpProblem {
            hessian: self.hessian.clone(),
            gradient: condensed_gradient(&self.forced, &error, &self.cfg),
            lower,
            upper,
        };
        let warm = self.last.as_ref().map(|s| shifted(&s.x, DOF));
        let sol = solve_qp_box(&qp, self.cfg.qp_tol, self.cfg.qp_max_iter, warm.as_ref());
        let u = first_input(&sol.x, self.cfg.u_max);
        self.last = Some(sol);
        Ok(u)
    }
    fn last_solution(&self) -> Option<&QpSolution> {
        self.last.as_ref()
    }
}

/// MPC on a bilinear model: the input matrix is frozen at the current lifted
/// state, `B + [N_1 z | ... | N_m z]`, for the whole horizon.
pub struct BilinearMpc {
    model: BilinearLiftedModel,
    cfg: MpcConfig,
    pred: Prediction,
    last: Option<QpSolution>,
}

impl BilinearMpc {
    pub fn new(model: BilinearLiftedModel, cfg: MpcConfig) -> Result<Self> {
        cfg.validate()?;
        let pred = Prediction::new(&model.a, cfg.horizon);
        Ok(BilinearMpc { model, cfg, pred, last: None })
    }
}

impl Controller for BilinearMpc {
    fn variant(&self) -> Variant {
        Variant::Bilinear
    }
    fn horizon(&self) -> usize {
        self.cfg.horizon
    }
    fn control(&mut self, x: &PlantState, refs: &[OutputVector]) -> Result<Vector2<f64>> {
        check_window(refs, &self.cfg)?;
        let z = self.model.dictionary.lift(x);
        let b_eff = self.model.effective_input_matrix(&z);
        let qp = qp_from_parts(&self.pred, &b_eff, &z, refs, &self.cfg);
        let warm = self.last.as_ref().map(|s| shifted(&s.x, DOF));
        let sol = solve_qp_box(&qp, self.cfg.qp_tol, self.cfg.qp_max_iter, warm.as_ref());
        let u = first_input(&sol.x, self.cfg.u_max);
        self.last = Some(sol);
        Ok(u)
    }
    fn last_solution(&self) -> Option<&QpSolution> {
        self.last.as_ref()
    }
}

/// Any fitted model that can be put under MPC.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Linear(LinearLiftedModel),
    Bilinear(BilinearLiftedModel),
}

impl AnyModel {
    pub fn variant(&self) -> Variant {
        match self {
            AnyModel::Linear(m) => m.variant,
            AnyModel::Bilinear(_) => Variant::Bilinear,
        }
    }

    pub fn dictionary(&self) -> &Dictionary {
        match self {
            AnyModel::Linear(m) => &m.dictionary,
            AnyModel::Bilinear(m) => &m.dictionary,
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            AnyModel::Linear(m) => m.dt,
            AnyModel::Bilinear(m) => m.dt,
        }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        match self {
            AnyModel::Linear(m) => &m.a,
            AnyModel::Bilinear(m) => &m.a,
        }
    }

    pub fn b(&self) -> &DMatrix<f64> {
        match self {
            AnyModel::Linear(m) => &m.b,
            AnyModel::Bilinear(m) => &m.b,
        }
    }

    pub fn predict(&self, z: &LiftedState, u: &Vector2<f64>) -> LiftedState {
        match self {
            AnyModel::Linear(m) => m.predict(z, u),
            AnyModel::Bilinear(m) => m.predict(z, u),
        }
    }

    pub fn controller(&self, cfg: &MpcConfig) -> Result<Box<dyn Controller + Send>> {
        Ok(match self {
            AnyModel::Linear(m) => Box::new(LinearMpc::new(m.clone(), cfg.clone())?),
            AnyModel::Bilinear(m) => Box::new(BilinearMpc::new(m.clone(), cfg.clone())?),
        })
    }
}

impl LiftedModel for AnyModel {
    fn dictionary(&self) -> &Dictionary {
        AnyModel::dictionary(self)
    }
    fn variant(&self) -> Variant {
        AnyModel::variant(self)
    }
    fn predict(&self, z: &LiftedState, u: &Vector2<f64>) -> LiftedState {
        AnyModel::predict(self, z, u)
    }
}

/// Closed-loop tracking of a joint-space reference on the true plant.
///
/// The first `settle_steps` errors are excluded from the reported mean.
pub fn run_closed_loop(
    params: &PlantParams,
    controller: &mut dyn Controller,
    reference: &ReferenceTrajectory,
    settle_steps: usize,
) -> TrackingReport {
    let n = reference.len();
    let h = controller.horizon();
    let mut x = reference.initial_state(&params.actuator);
    let mut errors = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    let mut controls = Vec::with_capacity(n);
    let mut diverged = false;
    let mut window = vec![OutputVector::zeros(); h];
    for t in 0..n {
        for (k, w) in window.iter_mut().enumerate() {
            *w = reference.output(t + 1 + k);
        }
        let u = match controller.control(&x, &window) {
            Ok(u) => u,
            Err(_) => {
                diverged = true;
                break;
            }
        };
        match plant_step(&x, &u, params) {
            Ok(next) => x = next,
            Err(_) => {
                diverged = true;
                break;
            }
        }
        let ee = forward_kinematics(&x.q.theta, &params.arm);
        let target = reference.position(t + 1);
        let err = (ee - target).norm();
        controls.push(u);
        positions.push(ee);
        errors.push(err);
        if !err.is_finite() {
            diverged = true;
            break;
        }
    }
    TrackingReport::new(controller.variant(), reference, errors, positions, controls, settle_steps, diverged)
}
