//! Two-link planar arm with compliant, geared actuator power trains.
//!
//! Each joint is driven by a motor rotor (angle `phi`, inertia `I`, viscous
//! damping `b`) through a gear reducer of ratio `1:r` with torsional
//! stiffness `k`. The joint torque is `r k (phi - r theta)` and the same
//! spring loads the rotor with `k (phi - r theta)`. The arm moves in a
//! horizontal plane, so gravity is identically zero.
//!
//! The discrete plant is an explicit Euler step of these equations. The
//! motor torque only enters the rotor velocity update, with coefficient
//! `dt / I`.

use nalgebra::{Matrix2, SVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of joints (and actuators) of the reference plant.
pub const DOF: usize = 2;
/// Dimension of the full plant state `[phi; phi_dot; theta; theta_dot]`.
pub const STATE_DIM: usize = 4 * DOF;

pub type StateVector = SVector<f64, STATE_DIM>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointState {
    pub theta: Vector2<f64>,
    pub theta_dot: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActuatorState {
    pub phi: Vector2<f64>,
    pub phi_dot: Vector2<f64>,
}

/// Full plant state `x = [p; q]` with the actuator block first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub p: ActuatorState,
    pub q: JointState,
}

impl PlantState {
    pub fn zero() -> Self {
        Self::from_vector(&StateVector::zeros())
    }

    /// State at rest with an undeflected power train (`phi = r theta`).
    pub fn at_rest(theta: Vector2<f64>, act: &ActuatorParams) -> Self {
        Self::rigid(theta, Vector2::zeros(), act)
    }

    /// State moving as a rigid body: rotors track the reflected joint motion.
    pub fn rigid(theta: Vector2<f64>, theta_dot: Vector2<f64>, act: &ActuatorParams) -> Self {
        let r = act.gear();
        PlantState {
            p: ActuatorState {
                phi: r.component_mul(&theta),
                phi_dot: r.component_mul(&theta_dot),
            },
            q: JointState { theta, theta_dot },
        }
    }

    /// Stacks the state as `[phi; phi_dot; theta; theta_dot]`.
    pub fn to_vector(&self) -> StateVector {
        let mut v = StateVector::zeros();
        v.fixed_rows_mut::<2>(0).copy_from(&self.p.phi);
        v.fixed_rows_mut::<2>(2).copy_from(&self.p.phi_dot);
        v.fixed_rows_mut::<2>(4).copy_from(&self.q.theta);
        v.fixed_rows_mut::<2>(6).copy_from(&self.q.theta_dot);
        v
    }

    pub fn from_vector(v: &StateVector) -> Self {
        PlantState {
            p: ActuatorState {
                phi: v.fixed_rows::<2>(0).into_owned(),
                phi_dot: v.fixed_rows::<2>(2).into_owned(),
            },
            q: JointState {
                theta: v.fixed_rows::<2>(4).into_owned(),
                theta_dot: v.fixed_rows::<2>(6).into_owned(),
            },
        }
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        if s.len() != STATE_DIM {
            return Err(Error::DimensionMismatch {
                context: "plant state",
                expected: STATE_DIM,
                got: s.len(),
            });
        }
        Ok(Self::from_vector(&StateVector::from_column_slice(s)))
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Link geometry of the planar arm, modelled as uniform thin rods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmParams {
    pub lengths: [f64; DOF],
    pub masses: [f64; DOF],
}

impl Default for ArmParams {
    fn default() -> Self {
        ArmParams {
            lengths: [1.0, 0.8],
            masses: [5.0, 4.0],
        }
    }
}

impl ArmParams {
    pub fn validate(&self) -> Result<()> {
        for i in 0..DOF {
            if !(self.lengths[i] > 0.0 && self.lengths[i].is_finite()) {
                return Err(Error::invalid(format!("arm.lengths[{i}]"), "must be > 0"));
            }
            if !(self.masses[i] > 0.0 && self.masses[i].is_finite()) {
                return Err(Error::invalid(format!("arm.masses[{i}]"), "must be > 0"));
            }
        }
        Ok(())
    }

    pub fn reach(&self) -> f64 {
        self.lengths[0] + self.lengths[1]
    }

    pub fn inner_radius(&self) -> f64 {
        (self.lengths[0] - self.lengths[1]).abs()
    }
}

/// Per-joint actuator and power-train parameters plus the discretisation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActuatorParams {
    /// Rotor inertia `I_i` (kg m^2).
    pub rotor_inertia: [f64; DOF],
    /// Rotor viscous damping `b_i` (N m s / rad).
    pub damping: [f64; DOF],
    /// Power-train torsional stiffness `k_i` (N m / rad).
    pub stiffness: [f64; DOF],
    /// Gear ratio `r_i` (joint turns once per `r_i` rotor turns).
    pub gear_ratio: [f64; DOF],
    /// Time step (s).
    pub dt: f64,
}

impl Default for ActuatorParams {
    fn default() -> Self {
        ActuatorParams {
            rotor_inertia: [1e-3; DOF],
            damping: [0.1; DOF],
            stiffness: [10.0; DOF],
            gear_ratio: [10.0; DOF],
            dt: 1e-3,
        }
    }
}

impl ActuatorParams {
    pub fn validate(&self) -> Result<()> {
        let groups: [(&str, &[f64; DOF]); 4] = [
            ("rotor_inertia", &self.rotor_inertia),
            ("damping", &self.damping),
            ("stiffness", &self.stiffness),
            ("gear_ratio", &self.gear_ratio),
        ];
        for (name, vals) in groups {
            for (i, v) in vals.iter().enumerate() {
                let ok = if name == "damping" { *v >= 0.0 } else { *v > 0.0 };
                if !(ok && v.is_finite()) {
                    let bound = if name == "damping" { "must be >= 0" } else { "must be > 0" };
                    return Err(Error::invalid(format!("actuator.{name}[{i}]"), bound));
                }
            }
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("actuator.dt", "must be > 0"));
        }
        Ok(())
    }

    pub fn inertia(&self) -> Vector2<f64> {
        Vector2::from(self.rotor_inertia)
    }
    pub fn damping_vec(&self) -> Vector2<f64> {
        Vector2::from(self.damping)
    }
    pub fn stiffness_vec(&self) -> Vector2<f64> {
        Vector2::from(self.stiffness)
    }
    pub fn gear(&self) -> Vector2<f64> {
        Vector2::from(self.gear_ratio)
    }

    /// Per-joint input gain `dt / I_i` of the rotor velocity update.
    pub fn input_gain(&self) -> Vector2<f64> {
        Vector2::from_fn(|i, _| self.dt / self.rotor_inertia[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantParams {
    pub arm: ArmParams,
    pub actuator: ActuatorParams,
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        self.arm.validate()?;
        self.actuator.validate()
    }

    pub fn dt(&self) -> f64 {
        self.actuator.dt
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.actuator.dt = dt;
        self
    }
}

/// Link inertia matrix `H(theta)` of the two-link uniform-rod arm.
pub fn inertia_matrix(theta: &Vector2<f64>, arm: &ArmParams) -> Matrix2<f64> {
    let [l1, l2] = arm.lengths;
    let [m1, m2] = arm.masses;
    let c2 = theta[1].cos();
    let h22 = m2 * l2 * l2 / 3.0;
    let h12 = h22 + 0.5 * m2 * l1 * l2 * c2;
    let h11 = m1 * l1 * l1 / 3.0 + m2 * l1 * l1 + h22 + m2 * l1 * l2 * c2;
    Matrix2::new(h11, h12, h12, h22)
}

/// Coriolis/centrifugal matrix built from the Christoffel symbols of `H`.
///
/// With this choice `dH/dt - 2 C` is skew-symmetric.
pub fn coriolis_matrix(theta: &Vector2<f64>, theta_dot: &Vector2<f64>, arm: &ArmParams) -> Matrix2<f64> {
    let h = -0.5 * arm.masses[1] * arm.lengths[0] * arm.lengths[1] * theta[1].sin();
    let (w1, w2) = (theta_dot[0], theta_dot[1]);
    Matrix2::new(h * w2, h * (w1 + w2), -h * w1, 0.0)
}

/// `C(theta, theta_dot) theta_dot`.
pub fn coriolis_term(theta: &Vector2<f64>, theta_dot: &Vector2<f64>, arm: &ArmParams) -> Vector2<f64> {
    coriolis_matrix(theta, theta_dot, arm) * theta_dot
}

/// Spring deflection `phi - r theta` of each power train, rotor side.
pub fn deflection(p: &ActuatorState, q: &JointState, act: &ActuatorParams) -> Vector2<f64> {
    p.phi - act.gear().component_mul(&q.theta)
}

/// Joint torque transmitted by the compliant gearing, `r k (phi - r theta)`.
pub fn joint_torque(p: &ActuatorState, q: &JointState, act: &ActuatorParams) -> Vector2<f64> {
    act.gear()
        .component_mul(&act.stiffness_vec())
        .component_mul(&deflection(p, q, act))
}

/// Unchecked Euler step; callers decide what to do with non-finite output.
pub(crate) fn euler_step(x: &PlantState, tau_m: &Vector2<f64>, params: &PlantParams) -> PlantState {
    let act = &params.actuator;
    let dt = act.dt;
    let q = &x.q;
    let p = &x.p;

    let h = inertia_matrix(&q.theta, &params.arm);
    let rhs = joint_torque(p, q, act) - coriolis_term(&q.theta, &q.theta_dot, &params.arm);
    let theta_ddot = h
        .cholesky()
        .map(|c| c.solve(&rhs))
        .unwrap_or_else(|| Vector2::repeat(f64::NAN));

    let load = act.stiffness_vec().component_mul(&deflection(p, q, act));
    let phi_ddot = (tau_m - act.damping_vec().component_mul(&p.phi_dot) - load)
        .component_div(&act.inertia());

    PlantState {
        p: ActuatorState {
            phi: p.phi + dt * p.phi_dot,
            phi_dot: p.phi_dot + dt * phi_ddot,
        },
        q: JointState {
            theta: q.theta + dt * q.theta_dot,
            theta_dot: q.theta_dot + dt * theta_ddot,
        },
    }
}

/// One explicit Euler step of the arm and actuator dynamics.
pub fn plant_step(x: &PlantState, tau_m: &Vector2<f64>, params: &PlantParams) -> Result<PlantState> {
    let next = euler_step(x, tau_m, params);
    if next.is_finite() {
        Ok(next)
    } else {
        Err(Error::NonFiniteState { step: 0 })
    }
}

/// Iterates [`plant_step`]; the result has `inputs.len() + 1` states.
pub fn simulate(x0: &PlantState, inputs: &[Vector2<f64>], params: &PlantParams) -> Result<Vec<PlantState>> {
    let mut traj = Vec::with_capacity(inputs.len() + 1);
    traj.push(*x0);
    let mut x = *x0;
    for (step, u) in inputs.iter().enumerate() {
        x = plant_step(&x, u, params).map_err(|_| Error::NonFiniteState { step })?;
        traj.push(x);
    }
    Ok(traj)
}

/// Kinetic energy of links and rotors plus the power-train spring energy (J).
pub fn total_energy(x: &PlantState, params: &PlantParams) -> f64 {
    let act = &params.actuator;
    let q = &x.q;
    let h = inertia_matrix(&q.theta, &params.arm);
    let link = 0.5 * q.theta_dot.dot(&(h * q.theta_dot));
    let rotor = 0.5 * act.inertia().dot(&x.p.phi_dot.component_mul(&x.p.phi_dot));
    let d = deflection(&x.p, q, act);
    let spring = 0.5 * act.stiffness_vec().dot(&d.component_mul(&d));
    link + rotor + spring
}

/// End-effector position of the planar arm (m).
pub fn forward_kinematics(theta: &Vector2<f64>, arm: &ArmParams) -> Vector2<f64> {
    let [l1, l2] = arm.lengths;
    let a12 = theta[0] + theta[1];
    Vector2::new(
        l1 * theta[0].cos() + l2 * a12.cos(),
        l1 * theta[0].sin() + l2 * a12.sin(),
    )
}

/// Elbow branch selection for inverse kinematics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Elbow {
    /// `theta_2 <= 0`.
    Up,
    /// `theta_2 >= 0`.
    Down,
}

/// Joint angles placing the end effector at `target`.
pub fn inverse_kinematics(target: &Vector2<f64>, elbow: Elbow, arm: &ArmParams) -> Result<Vector2<f64>> {
    let [l1, l2] = arm.lengths;
    let (x, y) = (target[0], target[1]);
    let dist = target.norm();
    let slack = 1e-12 * arm.reach();
    if dist > arm.reach() + slack || dist < arm.inner_radius() - slack || !dist.is_finite() {
        let excess = if dist > arm.reach() {
            dist - arm.reach()
        } else {
            arm.inner_radius() - dist
        };
        return Err(Error::Unreachable { x, y, excess });
    }
    let cos2 = ((dist * dist - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let mut t2 = cos2.acos();
    if elbow == Elbow::Up {
        t2 = -t2;
    }
    let t1 = y.atan2(x) - (l2 * t2.sin()).atan2(l1 + l2 * t2.cos());
    Ok(Vector2::new(t1, t2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn params() -> PlantParams {
        PlantParams::default()
    }

    #[test]
    fn inertia_is_symmetric_and_even_in_elbow() {
        let arm = ArmParams::default();
        let h = inertia_matrix(&Vector2::new(0.4, -2.3), &arm);
        assert_eq!(h[(0, 1)], h[(1, 0)]);
        let a = inertia_matrix(&Vector2::new(0.0, PI), &arm);
        let b = inertia_matrix(&Vector2::new(0.0, -PI), &arm);
        assert_eq!(a, b);
    }

    #[test]
    fn coriolis_vanishes_at_rest() {
        let arm = ArmParams::default();
        let c = coriolis_term(&Vector2::new(0.3, 1.1), &Vector2::zeros(), &arm);
        assert_eq!(c, Vector2::zeros());
    }

    #[test]
    fn coriolis_vanishes_with_straight_elbow() {
        let arm = ArmParams::default();
        let c = coriolis_term(&Vector2::new(0.7, 0.0), &Vector2::new(1.3, -2.1), &arm);
        assert_eq!(c, Vector2::zeros());
    }

    #[test]
    fn joint_torque_cases() {
        let mut act = ActuatorParams::default();
        let q = JointState {
            theta: Vector2::new(0.2, -0.4),
            theta_dot: Vector2::zeros(),
        };
        let p = ActuatorState {
            phi: act.gear().component_mul(&q.theta),
            phi_dot: Vector2::zeros(),
        };
        assert_eq!(joint_torque(&p, &q, &act), Vector2::zeros());

        act.gear_ratio = [1.0; DOF];
        act.stiffness = [10.0; DOF];
        let p = ActuatorState {
            phi: q.theta.add_scalar(0.1),
            phi_dot: Vector2::zeros(),
        };
        let tau = joint_torque(&p, &q, &act);
        assert_relative_eq!(tau[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(tau[1], 1.0, epsilon = 1e-12);

        act.gear_ratio = [2.0; DOF];
        let p2 = ActuatorState {
            phi: act.gear().component_mul(&q.theta).add_scalar(0.1),
            phi_dot: Vector2::zeros(),
        };
        let tau2 = joint_torque(&p2, &q, &act);
        assert_relative_eq!(tau2[0], 2.0 * tau[0], epsilon = 1e-12);
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let p = params();
        let x = PlantState::at_rest(Vector2::new(0.5, -1.2), &p.actuator);
        let next = plant_step(&x, &Vector2::zeros(), &p).unwrap();
        assert_eq!(next, x);
    }

    #[test]
    fn blow_up_is_reported() {
        let p = params().with_dt(0.5);
        let mut x = PlantState::at_rest(Vector2::new(0.5, -1.2), &p.actuator);
        x.p.phi[0] += 1.0;
        let inputs = vec![Vector2::zeros(); 2000];
        match simulate(&x, &inputs, &p) {
            Err(Error::NonFiniteState { step }) => assert!(step > 0),
            other => panic!("expected NonFiniteState, got {other:?}"),
        }
    }

    #[test]
    fn simulate_empty_and_constant() {
        let p = params();
        let x = PlantState::at_rest(Vector2::new(0.1, 0.2), &p.actuator);
        assert_eq!(simulate(&x, &[], &p).unwrap(), vec![x]);
        let traj = simulate(&x, &[Vector2::zeros(); 10], &p).unwrap();
        assert!(traj.iter().all(|s| *s == x));
    }

    #[test]
    fn energy_definitions() {
        let p = params();
        assert_eq!(total_energy(&PlantState::zero(), &p), 0.0);
        let mut act = p.actuator;
        act.stiffness = [100.0; DOF];
        let pp = PlantParams { arm: p.arm, actuator: act };
        let mut x = PlantState::zero();
        x.p.phi[0] = 0.03;
        assert_relative_eq!(total_energy(&x, &pp), 0.5 * 100.0 * 0.03 * 0.03, epsilon = 1e-15);
    }

    #[test]
    fn forward_kinematics_cases() {
        let arm = ArmParams::default();
        let cases = [
            (Vector2::new(0.0, 0.0), Vector2::new(1.8, 0.0)),
            (Vector2::new(PI / 2.0, 0.0), Vector2::new(0.0, 1.8)),
            (Vector2::new(0.0, PI / 2.0), Vector2::new(1.0, 0.8)),
        ];
        for (theta, want) in cases {
            let got = forward_kinematics(&theta, &arm);
            assert!((got - want).norm() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn inverse_kinematics_cases() {
        let arm = ArmParams::default();
        for elbow in [Elbow::Up, Elbow::Down] {
            let t = inverse_kinematics(&Vector2::new(1.8, 0.0), elbow, &arm).unwrap();
            assert!(t.norm() < 1e-12);
        }
        let t = inverse_kinematics(&Vector2::new(0.0, 1.8), Elbow::Down, &arm).unwrap();
        assert!((t - Vector2::new(PI / 2.0, 0.0)).norm() < 1e-12);

        let up = inverse_kinematics(&Vector2::new(1.0, 0.5), Elbow::Up, &arm).unwrap();
        let down = inverse_kinematics(&Vector2::new(1.0, 0.5), Elbow::Down, &arm).unwrap();
        assert!(up[1] < 0.0 && down[1] > 0.0);
    }

    #[test]
    fn inverse_kinematics_rejects_unreachable() {
        let arm = ArmParams::default();
        match inverse_kinematics(&Vector2::new(2.0, 0.0), Elbow::Down, &arm) {
            Err(Error::Unreachable { excess, .. }) => assert!((excess - 0.2).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        match inverse_kinematics(&Vector2::new(0.05, 0.0), Elbow::Down, &arm) {
            Err(Error::Unreachable { excess, .. }) => assert!((excess - 0.15).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn state_vector_ordering() {
        let v = StateVector::from_fn(|i, _| i as f64);
        let x = PlantState::from_vector(&v);
        assert_eq!(x.p.phi, Vector2::new(0.0, 1.0));
        assert_eq!(x.p.phi_dot, Vector2::new(2.0, 3.0));
        assert_eq!(x.q.theta, Vector2::new(4.0, 5.0));
        assert_eq!(x.q.theta_dot, Vector2::new(6.0, 7.0));
        assert_eq!(x.to_vector(), v);
    }

    #[test]
    fn default_params_validate() {
        params().validate().unwrap();
        let mut p = params();
        p.actuator.damping[1] = 0.0;
        p.validate().unwrap();
        p.actuator.damping[1] = -0.1;
        assert!(p.validate().is_err());
        p.actuator.damping[1] = 0.1;
        p.actuator.stiffness[0] = 0.0;
        assert!(p.validate().is_err());
    }
}
