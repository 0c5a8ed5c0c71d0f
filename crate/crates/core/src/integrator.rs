//! Discretization of the continuous dynamics and the stage sensitivities
//! `(A, B, r)` used by the Gauss-Newton QP.
//!
//! The discrete map is differentiated after discretization: explicit Euler and
//! RK4 Jacobians follow from the chain rule, implicit Euler Jacobians from the
//! implicit function theorem at the converged Newton iterate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    srbd_derivative, srbd_jacobians, ControlVector, Mat12, ModelError, RobotModel, StageParams,
    StateVector, NU, NX,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegratorError {
    #[error("implicit Euler Newton solve did not converge: residual {residual:e} after {iterations} iterations")]
    NewtonDivergence { iterations: usize, residual: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Continuous-time dynamics `x_dot = g(x, u, a)` with analytic Jacobians.
pub trait Dynamics {
    fn derivative(
        &self,
        x: &StateVector,
        u: &ControlVector,
        a: &StageParams,
    ) -> Result<StateVector, ModelError>;

    fn jacobians(
        &self,
        x: &StateVector,
        u: &ControlVector,
        a: &StageParams,
    ) -> Result<(Mat12, Mat12), ModelError>;
}

impl Dynamics for RobotModel {
    fn derivative(
        &self,
        x: &StateVector,
        u: &ControlVector,
        a: &StageParams,
    ) -> Result<StateVector, ModelError> {
        srbd_derivative(x, u, a, self)
    }

    fn jacobians(
        &self,
        x: &StateVector,
        u: &ControlVector,
        a: &StageParams,
    ) -> Result<(Mat12, Mat12), ModelError> {
        srbd_jacobians(x, u, a, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    ExplicitEuler,
    ImplicitEuler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    /// Step length in seconds.
    pub step: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Compute `A`, `B` by central finite differences instead of analytically.
    pub finite_difference_jacobians: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::ImplicitEuler,
            step: 0.04,
            newton_tol: 1e-10,
            newton_max_iter: 20,
            finite_difference_jacobians: false,
        }
    }
}

/// Stage sensitivities: `dx_{k+1} = A dx_k + B du_k + r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub a: Mat12,
    pub b: Mat12,
    /// Defect `f(x_k, u_k) - x_{k+1}` at the linearization point.
    pub r: StateVector,
    /// Value of the discrete map at the linearization point.
    pub next: StateVector,
}

/// One integration step of length `cfg.step`.
pub fn step<D: Dynamics + ?Sized>(
    dynamics: &D,
    x: &StateVector,
    u: &ControlVector,
    a: &StageParams,
    cfg: &IntegratorConfig,
) -> Result<StateVector, IntegratorError> {
    let h = cfg.step;
    match cfg.scheme {
        Scheme::ExplicitEuler => Ok(x + h * dynamics.derivative(x, u, a)?),
        Scheme::Rk4 => {
            let k1 = dynamics.derivative(x, u, a)?;
            let k2 = dynamics.derivative(&(x + 0.5 * h * k1), u, a)?;
            let k3 = dynamics.derivative(&(x + 0.5 * h * k2), u, a)?;
            let k4 = dynamics.derivative(&(x + h * k3), u, a)?;
            Ok(x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        }
        Scheme::ImplicitEuler => implicit_euler_solve(dynamics, x, u, a, cfg),
    }
}

fn implicit_euler_solve<D: Dynamics + ?Sized>(
    dynamics: &D,
    x: &StateVector,
    u: &ControlVector,
    a: &StageParams,
    cfg: &IntegratorConfig,
) -> Result<StateVector, IntegratorError> {
    let h = cfg.step;
    let mut y = x + h * dynamics.derivative(x, u, a)?;
    let mut residual = f64::INFINITY;
    for _ in 0..=cfg.newton_max_iter {
        let f = y - x - h * dynamics.derivative(&y, u, a)?;
        residual = f.amax();
        if !residual.is_finite() {
            break;
        }
        if residual <= cfg.newton_tol {
            return Ok(y);
        }
        let (gx, _) = dynamics.jacobians(&y, u, a)?;
        let m = Mat12::identity() - h * gx;
        match m.lu().solve(&f) {
            Some(dy) => y -= dy,
            None => break,
        }
    }
    Err(IntegratorError::NewtonDivergence { iterations: cfg.newton_max_iter, residual })
}

/// Discrete map with analytic Jacobians `(x_next, dF/dx, dF/du)`.
pub fn step_with_jacobians<D: Dynamics + ?Sized>(
    dynamics: &D,
    x: &StateVector,
    u: &ControlVector,
    a: &StageParams,
    cfg: &IntegratorConfig,
) -> Result<(StateVector, Mat12, Mat12), IntegratorError> {
    if cfg.finite_difference_jacobians {
        let next = step(dynamics, x, u, a, cfg)?;
        let (ja, jb) = finite_difference_jacobians(dynamics, x, u, a, cfg, 1e-6)?;
        return Ok((next, ja, jb));
    }
    let h = cfg.step;
    let eye = Mat12::identity();
    match cfg.scheme {
        Scheme::ExplicitEuler => {
            let k = dynamics.derivative(x, u, a)?;
            let (gx, gu) = dynamics.jacobians(x, u, a)?;
            Ok((x + h * k, eye + h * gx, h * gu))
        }
        Scheme::ImplicitEuler => {
            let next = implicit_euler_solve(dynamics, x, u, a, cfg)?;
            let (gx, gu) = dynamics.jacobians(&next, u, a)?;
            let m = (eye - h * gx).lu();
            let ja = m.solve(&eye).ok_or(IntegratorError::NewtonDivergence {
                iterations: 0,
                residual: f64::INFINITY,
            })?;
            let jb = ja * (h * gu);
            Ok((next, ja, jb))
        }
        Scheme::Rk4 => {
            let k1 = dynamics.derivative(x, u, a)?;
            let (gx1, gu1) = dynamics.jacobians(x, u, a)?;
            let x2 = x + 0.5 * h * k1;
            let k2 = dynamics.derivative(&x2, u, a)?;
            let (gx2, gu2) = dynamics.jacobians(&x2, u, a)?;
            let x3 = x + 0.5 * h * k2;
            let k3 = dynamics.derivative(&x3, u, a)?;
            let (gx3, gu3) = dynamics.jacobians(&x3, u, a)?;
            let x4 = x + h * k3;
            let k4 = dynamics.derivative(&x4, u, a)?;
            let (gx4, gu4) = dynamics.jacobians(&x4, u, a)?;

            let dk1x = gx1;
            let dk1u = gu1;
            let dk2x = gx2 * (eye + 0.5 * h * dk1x);
            let dk2u = gx2 * (0.5 * h * dk1u) + gu2;
            let dk3x = gx3 * (eye + 0.5 * h * dk2x);
            let dk3u = gx3 * (0.5 * h * dk2u) + gu3;
            let dk4x = gx4 * (eye + h * dk3x);
            let dk4u = gx4 * (h * dk3u) + gu4;
            let next = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            let ja = eye + h / 6.0 * (dk1x + 2.0 * dk2x + 2.0 * dk3x + dk4x);
            let jb = h / 6.0 * (dk1u + 2.0 * dk2u + 2.0 * dk3u + dk4u);
            Ok((next, ja, jb))
        }
    }
}

/// Central finite-difference Jacobians of [`step`].
pub fn finite_difference_jacobians<D: Dynamics + ?Sized>(
    dynamics: &D,
    x: &StateVector,
    u: &ControlVector,
    a: &StageParams,
    cfg: &IntegratorConfig,
    eps: f64,
) -> Result<(Mat12, Mat12), IntegratorError> {
    let mut plain = *cfg;
    plain.finite_difference_jacobians = false;
    let mut ja = Mat12::zeros();
    let mut jb = Mat12::zeros();
    for j in 0..NX {
        let mut xp = *x;
        let mut xm = *x;
        xp[j] += eps;
        xm[j] -= eps;
        let d = (step(dynamics, &xp, u, a, &plain)? - step(dynamics, &xm, u, a, &plain)?)
            / (2.0 * eps);
        ja.set_column(j, &d);
    }
    for j in 0..NU {
        let mut up = *u;
        let mut um = *u;
        up[j] += eps;
        um[j] -= eps;
        let d = (step(dynamics, x, &up, a, &plain)? - step(dynamics, x, &um, a, &plain)?)
            / (2.0 * eps);
        jb.set_column(j, &d);
    }
    Ok((ja, jb))
}

/// Sensitivities of the discrete dynamics at `(x, u)` with the defect measured
/// against the next guess point `x_next_guess`.
pub fn linearize_discrete<D: Dynamics + ?Sized>(
    dynamics: &D,
    x: &StateVector,
    u: &ControlVector,
    a: &StageParams,
    x_next_guess: &StateVector,
    cfg: &IntegratorConfig,
) -> Result<Linearization, IntegratorError> {
    let (next, ja, jb) = step_with_jacobians(dynamics, x, u, a, cfg)?;
    Ok(Linearization { a: ja, b: jb, r: next - x_next_guess, next })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RobotModel, Vec3, NUM_LEGS};

    /// `x_dot = lambda * x` on every component.
    struct Scalar(f64);

    impl Dynamics for Scalar {
        fn derivative(
            &self,
            x: &StateVector,
            _: &ControlVector,
            _: &StageParams,
        ) -> Result<StateVector, ModelError> {
            Ok(self.0 * x)
        }
        fn jacobians(
            &self,
            _: &StateVector,
            _: &ControlVector,
            _: &StageParams,
        ) -> Result<(Mat12, Mat12), ModelError> {
            Ok((self.0 * Mat12::identity(), Mat12::zeros()))
        }
    }

    /// `p_dot = v`, `v_dot = u_0..3`, rest zero.
    struct Linear;

    impl Dynamics for Linear {
        fn derivative(
            &self,
            x: &StateVector,
            u: &ControlVector,
            _: &StageParams,
        ) -> Result<StateVector, ModelError> {
            let mut d = StateVector::zeros();
            for i in 0..3 {
                d[i] = x[3 + i];
                d[3 + i] = u[i];
            }
            Ok(d)
        }
        fn jacobians(
            &self,
            _: &StateVector,
            _: &ControlVector,
            _: &StageParams,
        ) -> Result<(Mat12, Mat12), ModelError> {
            let mut gx = Mat12::zeros();
            let mut gu = Mat12::zeros();
            for i in 0..3 {
                gx[(i, 3 + i)] = 1.0;
                gu[(3 + i, i)] = 1.0;
            }
            Ok((gx, gu))
        }
    }

    fn cfg(scheme: Scheme) -> IntegratorConfig {
        IntegratorConfig { scheme, ..Default::default() }
    }

    #[test]
    fn scalar_closed_forms() {
        let x = StateVector::from_element(2.0);
        let (lambda, h) = (-3.0, 0.04);
        let ex = step(&Scalar(lambda), &x, &ControlVector::zeros(), &StageParams::default(), &cfg(Scheme::ExplicitEuler)).unwrap();
        assert!((ex[0] - (1.0 + lambda * h) * 2.0).abs() < 1e-14);
        let im = step(&Scalar(lambda), &x, &ControlVector::zeros(), &StageParams::default(), &cfg(Scheme::ImplicitEuler)).unwrap();
        assert!((im[0] - 2.0 / (1.0 - lambda * h)).abs() < 1e-12);
    }

    #[test]
    fn free_fall_velocity_drop() {
        let model = RobotModel::default();
        let a = StageParams { contact: [false; NUM_LEGS], ..Default::default() };
        let mut x = StateVector::zeros();
        x[2] = 1.0;
        for scheme in [Scheme::ExplicitEuler, Scheme::ImplicitEuler, Scheme::Rk4] {
            let next = step(&model, &x, &ControlVector::zeros(), &a, &cfg(scheme)).unwrap();
            assert!((next[5] + 0.3924).abs() < 1e-12, "{scheme:?}");
        }
    }

    #[test]
    fn linear_dynamics_linearization_is_exact() {
        let x = StateVector::from_fn(|i, _| i as f64 * 0.1);
        let u = ControlVector::from_fn(|i, _| 1.0 - i as f64 * 0.05);
        let a = StageParams::default();
        let c = cfg(Scheme::ExplicitEuler);
        let lin = linearize_discrete(&Linear, &x, &u, &a, &StateVector::zeros(), &c).unwrap();
        for i in 0..3 {
            assert_eq!(lin.a[(i, 3 + i)], c.step);
            assert_eq!(lin.b[(i, i)], 0.0);
        }
        let dx = StateVector::from_element(0.3);
        let du = ControlVector::from_element(-0.2);
        let exact = step(&Linear, &(x + dx), &(u + du), &a, &c).unwrap();
        let predicted = lin.next + lin.a * dx + lin.b * du;
        assert!((exact - predicted).amax() < 1e-12);
    }

    #[test]
    fn all_swing_gives_zero_input_matrix() {
        let model = RobotModel::default();
        let a = StageParams { contact: [false; NUM_LEGS], ..Default::default() };
        let mut x = StateVector::zeros();
        x[9] = 0.2;
        let u = ControlVector::from_element(50.0);
        for scheme in [Scheme::ExplicitEuler, Scheme::ImplicitEuler, Scheme::Rk4] {
            let lin = linearize_discrete(&model, &x, &u, &a, &x, &cfg(scheme)).unwrap();
            assert_eq!(lin.b, Mat12::zeros(), "{scheme:?}");
        }
    }

    #[test]
    fn defect_vanishes_on_consistent_guess() {
        let model = RobotModel::default();
        let mut a = StageParams::default();
        for i in 0..NUM_LEGS {
            a.foot_pos[i] = model.hip_offsets[i] - Vec3::new(0.0, 0.0, 0.5);
        }
        let mut x = StateVector::zeros();
        x[3] = 0.1;
        let u = ControlVector::from_fn(|i, _| if i % 3 == 2 { 200.0 } else { 3.0 });
        let c = cfg(Scheme::ImplicitEuler);
        let next = step(&model, &x, &u, &a, &c).unwrap();
        let lin = linearize_discrete(&model, &x, &u, &a, &next, &c).unwrap();
        assert_eq!(lin.r, StateVector::zeros());
    }

    #[test]
    fn newton_divergence_is_reported() {
        let model = RobotModel::default();
        let mut x = StateVector::zeros();
        x[7] = 1.5;
        x[9] = 40.0;
        x[10] = 40.0;
        let c = IntegratorConfig { newton_max_iter: 1, newton_tol: 1e-16, ..Default::default() };
        let r = step(&model, &x, &ControlVector::zeros(), &StageParams::default(), &c);
        assert!(matches!(r, Err(IntegratorError::NewtonDivergence { .. })));
    }
}
