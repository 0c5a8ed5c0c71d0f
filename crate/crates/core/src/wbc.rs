//! Whole-body control layer: plan resampling, swing trajectories, base wrench
//! feedback, ground-reaction-force projection, joint torques and the ZMP
//! stability margin.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use nalgebra::{DMatrix, DVector, SMatrix, SVector};

use crate::leg::{jacobian, JointConfig, LegGeometry};
use crate::model::{leg_force, rotation_matrix, skew, ControlVector, Mat3, StageParams, StateVector, Vec3, NUM_LEGS, NU};
use crate::ocp::{friction_pyramid_rows, OcpConfig, OcpError};
use crate::qp::{solve_dense, QpError, SolverOptions};

pub type Wrench = SVector<f64, 6>;

#[derive(Debug, Error, Clone)]
pub enum WbcError {
    #[error("relative rotation angle {angle} is too close to pi for the logarithm")]
    LogSingularity { angle: f64 },
    #[error("support polygon is degenerate")]
    DegeneratePolygon,
    #[error("no stance leg available for force projection")]
    NoStance,
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WbcGains {
    /// Stiffness on position and orientation errors.
    pub k: [f64; 6],
    /// Damping on linear and angular velocity errors.
    pub d: [f64; 6],
    /// Wrench tracking weight.
    pub s: [f64; 6],
    /// Force tracking weight.
    pub t: [f64; NU],
}

impl Default for WbcGains {
    fn default() -> Self {
        Self {
            k: [1500.0, 1500.0, 1500.0, 100.0, 100.0, 100.0],
            d: [1000.0, 1000.0, 1000.0, 50.0, 50.0, 50.0],
            s: [5.0, 5.0, 10.0, 10.0, 10.0, 10.0],
            t: [1000.0; NU],
        }
    }
}

/// Zero-order hold of the planned forces within a planning interval.
pub fn resample_control(u_plan: &ControlVector) -> ControlVector {
    *u_plan
}

/// Linear interpolation between two planned states at sub-step `i` of `ratio`.
pub fn interpolate_state(x_k: &StateVector, x_k1: &StateVector, i: usize, ratio: usize) -> StateVector {
    x_k + (x_k1 - x_k) * (i as f64 / ratio as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwingSpec {
    pub liftoff: Vec3,
    pub touchdown: Vec3,
    /// Apex height above the lift-off/touchdown chord.
    pub height: f64,
    pub duration: f64,
}

impl SwingSpec {
    /// Swing frame: X along the chord, Z orthogonal to it in the vertical plane.
    fn frame(&self) -> (Vec3, Vec3, f64) {
        let chord = self.touchdown - self.liftoff;
        let len = chord.norm();
        if len < 1e-9 {
            return (Vec3::x(), Vec3::z(), 0.0);
        }
        let ex = chord / len;
        let mut ez = Vec3::z() - ex * ex.z;
        if ez.norm() < 1e-9 {
            ez = Vec3::x() - ex * ex.x;
        }
        (ex, ez.normalize(), len)
    }
}

/// Semi-elliptic swing position and velocity at time `t` after lift-off.
pub fn swing_position(spec: &SwingSpec, t: f64) -> (Vec3, Vec3) {
    let t = t.clamp(0.0, spec.duration);
    let (ex, ez, len) = spec.frame();
    let w = std::f64::consts::PI / spec.duration;
    let along = 0.5 * len * (1.0 - (w * t).cos());
    let up = spec.height * (w * t).sin();
    let d_along = 0.5 * len * w * (w * t).sin();
    let d_up = spec.height * w * (w * t).cos();
    (spec.liftoff + ex * along + ez * up, ex * d_along + ez * d_up)
}

/// Net force and moment about the CoM of the stance forces.
pub fn feedforward_wrench(u: &ControlVector, p_cf: &[Vec3; NUM_LEGS], contact: &[bool; NUM_LEGS]) -> Wrench {
    let mut w = Wrench::zeros();
    for i in (0..NUM_LEGS).filter(|&i| contact[i]) {
        let f = leg_force(u, i);
        let tau = p_cf[i].cross(&f);
        for k in 0..3 {
            w[k] += f[k];
            w[3 + k] += tau[k];
        }
    }
    w
}

/// Rotation vector of `r` (the inverse of the exponential map).
pub fn rotation_log(r: &Mat3) -> Result<Vec3, WbcError> {
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let angle = cos.acos();
    if angle > std::f64::consts::PI - 1e-6 {
        return Err(WbcError::LogSingularity { angle });
    }
    let vee = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
    if angle < 1e-9 {
        return Ok(vee);
    }
    Ok(vee * (angle / angle.sin()))
}

/// Impedance wrench pulling the measured state toward the desired one.
/// The orientation and angular velocity terms are formed in the body frame
/// and rotated into the world.
pub fn feedback_wrench(x_d: &StateVector, x: &StateVector, gains: &WbcGains) -> Result<Wrench, WbcError> {
    let r = rotation_matrix(&x.fixed_rows::<3>(6).into());
    let r_d = rotation_matrix(&x_d.fixed_rows::<3>(6).into_owned());
    let e_rot = rotation_log(&(r.transpose() * r_d))?;
    let e_omega: Vec3 = x_d.fixed_rows::<3>(9) - x.fixed_rows::<3>(9);
    let mut w = Wrench::zeros();
    for k in 0..3 {
        w[k] = gains.k[k] * (x_d[k] - x[k]) + gains.d[k] * (x_d[3 + k] - x[3 + k]);
    }
    let tau_body = Vec3::new(
        gains.k[3] * e_rot.x + gains.d[3] * e_omega.x,
        gains.k[4] * e_rot.y + gains.d[4] * e_omega.y,
        gains.k[5] * e_rot.z + gains.d[5] * e_omega.z,
    );
    let tau = r * tau_body;
    for k in 0..3 {
        w[3 + k] = tau[k];
    }
    Ok(w)
}

/// Distributes a desired wrench over the stance feet:
/// `min |A f - b|_S^2 + |f - u_d|_T^2` subject to the friction and normal-force rows.
pub fn project_wrench_to_grf(
    wrench: &Wrench,
    p_cf: &[Vec3; NUM_LEGS],
    params: &StageParams,
    u_d: &ControlVector,
    ocp: &OcpConfig,
    gains: &WbcGains,
    options: &SolverOptions,
) -> Result<ControlVector, WbcError> {
    let stance: Vec<usize> = (0..NUM_LEGS).filter(|&i| params.contact[i]).collect();
    if stance.is_empty() {
        return Err(WbcError::NoStance);
    }
    let n = 3 * stance.len();
    let mut a = DMatrix::zeros(6, n);
    for (j, &i) in stance.iter().enumerate() {
        a.view_mut((0, 3 * j), (3, 3)).copy_from(&Mat3::identity());
        a.view_mut((3, 3 * j), (3, 3)).copy_from(&skew(&p_cf[i]));
    }
    let s = DMatrix::from_diagonal(&DVector::from_column_slice(&gains.s));
    let t = DVector::from_fn(n, |r, _| gains.t[3 * stance[r / 3] + r % 3]);
    let ud = DVector::from_fn(n, |r, _| u_d[3 * stance[r / 3] + r % 3]);
    let b = DVector::from_column_slice(wrench.as_slice());
    let at_s = a.transpose() * &s;
    let mut hess = &at_s * &a;
    for r in 0..n {
        hess[(r, r)] += t[r];
    }
    let mut grad = -(&at_s * &b + t.component_mul(&ud));
    // the minimizer is scale free; unit curvature keeps the solver tolerance meaningful
    let scale = hess.diagonal().amax();
    hess /= scale;
    grad /= scale;
    let (_, d_full, h) = friction_pyramid_rows(params, &ControlVector::zeros(), ocp)?;
    let mut d = DMatrix::zeros(d_full.nrows(), n);
    for (j, &i) in stance.iter().enumerate() {
        d.view_mut((0, 3 * j), (d_full.nrows(), 3)).copy_from(&d_full.view((0, 3 * i), (d_full.nrows(), 3)));
    }
    let sol = solve_dense(&hess, &grad, &d, &h, options)?;
    let mut f = ControlVector::zeros();
    for (j, &i) in stance.iter().enumerate() {
        for c in 0..3 {
            f[3 * i + c] = sol.x[3 * j + c];
        }
    }
    Ok(f)
}

/// Joint torques balancing world-frame foot forces: `tau = -J' R' f` per leg,
/// with massless legs.
pub fn map_grf_to_torques(
    f: &ControlVector,
    q: &[JointConfig; NUM_LEGS],
    geom: &LegGeometry,
    base_rotation: &Mat3,
) -> SVector<f64, NU> {
    let mut tau = SVector::<f64, NU>::zeros();
    for i in 0..NUM_LEGS {
        let j = jacobian(&q[i], &geom.for_leg(i));
        let t = -(j.transpose() * (base_rotation.transpose() * leg_force(f, i)));
        tau.fixed_rows_mut::<3>(3 * i).copy_from(&t);
    }
    tau
}

/// Center of pressure of the vertical force components.
pub fn zmp_from_forces(f: &ControlVector, feet: &[Vec3; NUM_LEGS], contact: &[bool; NUM_LEGS]) -> Option<[f64; 2]> {
    let mut total = 0.0;
    let mut m = [0.0, 0.0];
    for i in (0..NUM_LEGS).filter(|&i| contact[i]) {
        let fz = f[3 * i + 2];
        total += fz;
        m[0] += fz * feet[i].x;
        m[1] += fz * feet[i].y;
    }
    (total > 1e-9).then(|| [m[0] / total, m[1] / total])
}

fn cross2(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise convex hull.
fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross2(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross2(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Signed distance of `zmp` to the closest edge of the support polygon
/// spanned by `feet` (positive inside).
pub fn zmp_margin(feet: &[[f64; 2]], zmp: [f64; 2]) -> Result<f64, WbcError> {
    if feet.len() < 3 {
        return Err(WbcError::DegeneratePolygon);
    }
    let hull = convex_hull(feet);
    if hull.len() < 3 {
        return Err(WbcError::DegeneratePolygon);
    }
    let area: f64 = (0..hull.len()).map(|k| cross2([0.0, 0.0], hull[k], hull[(k + 1) % hull.len()])).sum();
    if area.abs() < 1e-10 {
        return Err(WbcError::DegeneratePolygon);
    }
    let mut min = f64::INFINITY;
    for k in 0..hull.len() {
        let a = hull[k];
        let b = hull[(k + 1) % hull.len()];
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        min = min.min(cross2(a, b, zmp) / len);
    }
    Ok(min)
}

/// Stacked map `[I ..; [p_cf]x ..]` from stance forces to the base wrench,
/// with swing columns zeroed.
pub fn stance_map(p_cf: &[Vec3; NUM_LEGS], contact: &[bool; NUM_LEGS]) -> SMatrix<f64, 6, NU> {
    let mut a = SMatrix::<f64, 6, NU>::zeros();
    for i in (0..NUM_LEGS).filter(|&i| contact[i]) {
        a.fixed_view_mut::<3, 3>(0, 3 * i).copy_from(&Mat3::identity());
        a.fixed_view_mut::<3, 3>(3, 3 * i).copy_from(&skew(&p_cf[i]));
    }
    a
}
