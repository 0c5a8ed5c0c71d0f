//! Single-rigid-body model of the robot.
//!
//! The state is the 12-vector `(p_c, v_c, Phi, omega)` where `Phi` holds Z-Y-X
//! Euler angles `(roll, pitch, yaw)` and `omega` is the angular velocity
//! expressed in the body (CoM) frame. The control is the 12-vector of stacked
//! world-frame ground reaction forces in leg order LF, RF, LH, RH.

use std::path::Path;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type StateVector = SVector<f64, NX>;
pub type ControlVector = SVector<f64, NU>;
pub type Mat12 = SMatrix<f64, NX, NX>;

/// State dimension.
pub const NX: usize = 12;
/// Control dimension.
pub const NU: usize = 12;
/// Number of legs.
pub const NUM_LEGS: usize = 4;
/// Leg names in the fixed ordering used throughout the crate.
pub const LEG_NAMES: [&str; NUM_LEGS] = ["LF", "RF", "LH", "RH"];
/// Orientations with `|cos(pitch)|` at or below this value are rejected.
pub const SINGULARITY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("orientation is singular: |cos(pitch)| = {cos_pitch:e}")]
    SingularOrientation { cos_pitch: f64 },
    #[error("invalid robot model: {0}")]
    InvalidModel(String),
    #[error("cannot read model file: {0}")]
    Io(String),
}

/// Physical constants of the robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    pub mass: f64,
    pub inertia: Mat3,
    /// Hip positions relative to the geometric base center, body frame.
    pub hip_offsets: [Vec3; NUM_LEGS],
    /// Position of the geometric base center relative to the CoM, body frame.
    pub com_to_base: Vec3,
    pub gravity: Vec3,
}

impl Default for RobotModel {
    fn default() -> Self {
        Self {
            mass: 87.4,
            inertia: Mat3::new(
                4.0745, 0.1458, -0.2245, //
                0.1458, 11.3576, -0.0133, //
                -0.2245, -0.0133, 12.5675,
            ),
            hip_offsets: [
                Vec3::new(0.37, 0.21, 0.0),
                Vec3::new(0.37, -0.21, 0.0),
                Vec3::new(-0.37, 0.21, 0.0),
                Vec3::new(-0.37, -0.21, 0.0),
            ],
            com_to_base: Vec3::zeros(),
            gravity: Vec3::new(0.0, 0.0, -9.81),
        }
    }
}

/// On-disk form of [`RobotModel`]; every field is optional and falls back to
/// the default robot.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotModelFile {
    pub mass: Option<f64>,
    /// `[ixx, ixy, ixz, iyy, iyz, izz]`
    pub inertia: Option<[f64; 6]>,
    pub hip_offsets: Option<[[f64; 3]; NUM_LEGS]>,
    pub com_to_base: Option<[f64; 3]>,
    pub gravity: Option<[f64; 3]>,
}

impl RobotModelFile {
    pub fn into_model(self) -> Result<RobotModel, ModelError> {
        let mut m = RobotModel::default();
        if let Some(mass) = self.mass {
            m.mass = mass;
        }
        if let Some([xx, xy, xz, yy, yz, zz]) = self.inertia {
            m.inertia = Mat3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz);
        }
        if let Some(h) = self.hip_offsets {
            for (dst, src) in m.hip_offsets.iter_mut().zip(h) {
                *dst = Vec3::from(src);
            }
        }
        if let Some(c) = self.com_to_base {
            m.com_to_base = Vec3::from(c);
        }
        if let Some(g) = self.gravity {
            m.gravity = Vec3::from(g);
        }
        m.validate()?;
        Ok(m)
    }
}

impl RobotModel {
    /// Parses a model from TOML text (see [`RobotModelFile`] for the keys).
    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        let file: RobotModelFile =
            toml::from_str(text).map_err(|e| ModelError::InvalidModel(e.to_string()))?;
        file.into_model()
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io(e.to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(ModelError::InvalidModel(format!("mass must be positive, got {}", self.mass)));
        }
        if (self.inertia - self.inertia.transpose()).amax() > 1e-12 {
            return Err(ModelError::InvalidModel("inertia must be symmetric".into()));
        }
        if self.inertia.cholesky().is_none() {
            return Err(ModelError::InvalidModel("inertia must be positive definite".into()));
        }
        Ok(())
    }

    /// Same robot with mass and inertia scaled, used for model-mismatch runs.
    pub fn scaled(&self, mass_scale: f64, inertia_scale: f64) -> Self {
        let mut m = self.clone();
        m.mass *= mass_scale;
        m.inertia *= inertia_scale;
        m
    }

    pub fn weight(&self) -> f64 {
        self.mass * self.gravity.norm()
    }
}

/// Rigid-body state in structured form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub position: Vec3,
    pub velocity: Vec3,
    /// `(roll, pitch, yaw)`, Z-Y-X convention.
    pub euler: Vec3,
    /// Angular velocity in the body frame.
    pub omega: Vec3,
}

impl Default for State {
    fn default() -> Self {
        Self::from_vector(&StateVector::zeros())
    }
}

impl State {
    pub fn to_vector(&self) -> StateVector {
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.position);
        x.fixed_rows_mut::<3>(3).copy_from(&self.velocity);
        x.fixed_rows_mut::<3>(6).copy_from(&self.euler);
        x.fixed_rows_mut::<3>(9).copy_from(&self.omega);
        x
    }

    pub fn from_vector(x: &StateVector) -> Self {
        Self {
            position: x.fixed_rows::<3>(0).into(),
            velocity: x.fixed_rows::<3>(3).into(),
            euler: x.fixed_rows::<3>(6).into(),
            omega: x.fixed_rows::<3>(9).into(),
        }
    }
}

/// Stacked ground reaction forces in structured form.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub forces: [Vec3; NUM_LEGS],
}

impl Control {
    pub fn to_vector(&self) -> ControlVector {
        let mut u = ControlVector::zeros();
        for (i, f) in self.forces.iter().enumerate() {
            u.fixed_rows_mut::<3>(3 * i).copy_from(f);
        }
        u
    }

    pub fn from_vector(u: &ControlVector) -> Self {
        Self { forces: std::array::from_fn(|i| leg_force(u, i)) }
    }
}

/// Force of leg `i` inside a stacked control vector.
pub fn leg_force(u: &ControlVector, i: usize) -> Vec3 {
    u.fixed_rows::<3>(3 * i).into()
}

/// Per-stage model parameters: footholds, contact flags and terrain normals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub foot_pos: [Vec3; NUM_LEGS],
    pub contact: [bool; NUM_LEGS],
    pub normals: [Vec3; NUM_LEGS],
}

impl Default for StageParams {
    fn default() -> Self {
        Self {
            foot_pos: [Vec3::zeros(); NUM_LEGS],
            contact: [true; NUM_LEGS],
            normals: [Vec3::z(); NUM_LEGS],
        }
    }
}

impl StageParams {
    pub fn stance_count(&self) -> usize {
        self.contact.iter().filter(|c| **c).count()
    }

    pub fn contact_weight(&self, i: usize) -> f64 {
        if self.contact[i] {
            1.0
        } else {
            0.0
        }
    }
}

/// Skew-symmetric cross-product matrix `[v]x`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn drot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Body-to-world rotation `Rz(yaw) Ry(pitch) Rx(roll)`.
pub fn rotation_matrix(euler: &Vec3) -> Mat3 {
    rot_z(euler.z) * rot_y(euler.y) * rot_x(euler.x)
}

/// Partial derivatives of [`rotation_matrix`] with respect to roll, pitch and yaw.
pub fn rotation_matrix_partials(euler: &Vec3) -> [Mat3; 3] {
    let (rx, ry, rz) = (rot_x(euler.x), rot_y(euler.y), rot_z(euler.z));
    [
        rz * ry * drot_x(euler.x),
        rz * drot_y(euler.y) * rx,
        drot_z(euler.z) * ry * rx,
    ]
}

/// Map from Euler-angle rates to the world-frame angular velocity.
pub fn euler_rates_matrix(euler: &Vec3) -> Mat3 {
    let (st, ct) = euler.y.sin_cos();
    let (sp, cp) = euler.z.sin_cos();
    Mat3::new(ct * cp, -sp, 0.0, ct * sp, cp, 0.0, -st, 0.0, 1.0)
}

/// Map from Euler-angle rates to the body-frame angular velocity.
pub fn conjugate_euler_rates_matrix(euler: &Vec3) -> Mat3 {
    let (sr, cr) = euler.x.sin_cos();
    let (st, ct) = euler.y.sin_cos();
    Mat3::new(1.0, 0.0, -st, 0.0, cr, ct * sr, 0.0, -sr, ct * cr)
}

fn check_pitch(euler: &Vec3) -> Result<f64, ModelError> {
    let ct = euler.y.cos();
    if ct.abs() <= SINGULARITY_TOLERANCE || !ct.is_finite() {
        Err(ModelError::SingularOrientation { cos_pitch: ct })
    } else {
        Ok(ct)
    }
}

/// Closed-form inverse of [`conjugate_euler_rates_matrix`].
pub fn inverse_conjugate_euler_rates_matrix(euler: &Vec3) -> Result<Mat3, ModelError> {
    let ct = check_pitch(euler)?;
    let (sr, cr) = euler.x.sin_cos();
    let tt = euler.y.tan();
    Ok(Mat3::new(1.0, sr * tt, cr * tt, 0.0, cr, -sr, 0.0, sr / ct, cr / ct))
}

/// Euler-angle rates produced by a body-frame angular velocity.
pub fn euler_rates_from_body_rate(euler: &Vec3, omega_body: &Vec3) -> Result<Vec3, ModelError> {
    Ok(inverse_conjugate_euler_rates_matrix(euler)? * omega_body)
}

/// Partial derivatives of the inverse conjugate rates matrix with respect to
/// roll and pitch (yaw does not enter).
fn inverse_conjugate_partials(euler: &Vec3) -> [Mat3; 2] {
    let (sr, cr) = euler.x.sin_cos();
    let ct = euler.y.cos();
    let tt = euler.y.tan();
    let st = euler.y.sin();
    let c2 = ct * ct;
    [
        Mat3::new(0.0, cr * tt, -sr * tt, 0.0, -sr, -cr, 0.0, cr / ct, -sr / ct),
        Mat3::new(0.0, sr / c2, cr / c2, 0.0, 0.0, 0.0, 0.0, sr * st / c2, cr * st / c2),
    ]
}

/// Net force and world-frame moment about the CoM of the stance forces.
fn contact_wrench(x: &StateVector, u: &ControlVector, a: &StageParams) -> (Vec3, Vec3) {
    let pc: Vec3 = x.fixed_rows::<3>(0).into();
    let mut force = Vec3::zeros();
    let mut torque = Vec3::zeros();
    for i in 0..NUM_LEGS {
        if a.contact[i] {
            let f = leg_force(u, i);
            force += f;
            torque += (a.foot_pos[i] - pc).cross(&f);
        }
    }
    (force, torque)
}

/// Continuous-time dynamics with an additional external force acting at the CoM.
pub fn srbd_derivative_with_external(
    x: &StateVector,
    u: &ControlVector,
    a: &StageParams,
    model: &RobotModel,
    external_force: &Vec3,
) -> Result<StateVector, ModelError> {
    let euler: Vec3 = x.fixed_rows::<3>(6).into();
    let omega: Vec3 = x.fixed_rows::<3>(9).into();
    let tinv = inverse_conjugate_euler_rates_matrix(&euler)?;
    let r = rotation_matrix(&euler);
    let (force, torque_world) = contact_wrench(x, u, a);
    let inertia_inv = model.inertia.try_inverse().expect("validated inertia");
    let omega_dot =
        inertia_inv * (-omega.cross(&(model.inertia * omega)) + r.transpose() * torque_world);
    let mut dx = StateVector::zeros();
    dx.fixed_rows_mut::<3>(0).copy_from(&x.fixed_rows::<3>(3));
    dx.fixed_rows_mut::<3>(3)
        .copy_from(&(model.gravity + (force + external_force) / model.mass));
    dx.fixed_rows_mut::<3>(6).copy_from(&(tinv * omega));
    dx.fixed_rows_mut::<3>(9).copy_from(&omega_dot);
    Ok(dx)
}

/// Continuous-time single-rigid-body dynamics `x_dot = g(x, u, a)`.
pub fn srbd_derivative(
    x: &StateVector,
    u: &ControlVector,
    a: &StageParams,
    model: &RobotModel,
) -> Result<StateVector, ModelError> {
    srbd_derivative_with_external(x, u, a, model, &Vec3::zeros())
}

/// Analytic Jacobians `(dg/dx, dg/du)` of [`srbd_derivative`].
pub fn srbd_jacobians(
    x: &StateVector,
    u: &ControlVector,
    a: &StageParams,
    model: &RobotModel,
) -> Result<(Mat12, Mat12), ModelError> {
    let euler: Vec3 = x.fixed_rows::<3>(6).into();
    let omega: Vec3 = x.fixed_rows::<3>(9).into();
    let pc: Vec3 = x.fixed_rows::<3>(0).into();
    let tinv = inverse_conjugate_euler_rates_matrix(&euler)?;
    let dtinv = inverse_conjugate_partials(&euler);
    let r = rotation_matrix(&euler);
    let dr = rotation_matrix_partials(&euler);
    let (force, torque_world) = contact_wrench(x, u, a);
    let inertia = &model.inertia;
    let inertia_inv = inertia.try_inverse().expect("validated inertia");

    let mut gx = Mat12::zeros();
    let mut gu = Mat12::zeros();
    gx.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
    for j in 0..2 {
        gx.fixed_view_mut::<3, 1>(6, 6 + j).copy_from(&(dtinv[j] * omega));
    }
    gx.fixed_view_mut::<3, 3>(6, 9).copy_from(&tinv);
    gx.fixed_view_mut::<3, 3>(9, 0)
        .copy_from(&(inertia_inv * r.transpose() * skew(&force)));
    for j in 0..3 {
        gx.fixed_view_mut::<3, 1>(9, 6 + j)
            .copy_from(&(inertia_inv * dr[j].transpose() * torque_world));
    }
    gx.fixed_view_mut::<3, 3>(9, 9)
        .copy_from(&(inertia_inv * (skew(&(inertia * omega)) - skew(&omega) * inertia)));
    for i in 0..NUM_LEGS {
        if a.contact[i] {
            gu.fixed_view_mut::<3, 3>(3, 3 * i)
                .copy_from(&(Mat3::identity() / model.mass));
            gu.fixed_view_mut::<3, 3>(9, 3 * i)
                .copy_from(&(inertia_inv * r.transpose() * skew(&(a.foot_pos[i] - pc))));
        }
    }
    Ok((gx, gu))
}

/// Body-frame moment of the stance forces about the CoM, before `I^-1`.
pub fn body_frame_contact_torque(x: &StateVector, u: &ControlVector, a: &StageParams) -> Vec3 {
    let euler: Vec3 = x.fixed_rows::<3>(6).into();
    let (_, torque_world) = contact_wrench(x, u, a);
    rotation_matrix(&euler).transpose() * torque_world
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hover() -> (StateVector, ControlVector, StageParams, RobotModel) {
        let model = RobotModel::default();
        let mut x = StateVector::zeros();
        x[2] = 0.55;
        let mut a = StageParams::default();
        for i in 0..NUM_LEGS {
            a.foot_pos[i] = model.hip_offsets[i];
        }
        let mut u = ControlVector::zeros();
        for i in 0..NUM_LEGS {
            u[3 * i + 2] = model.weight() / 4.0;
        }
        (x, u, a, model)
    }

    #[test]
    fn identity_maps_at_zero_orientation() {
        assert_eq!(euler_rates_matrix(&Vec3::zeros()), Mat3::identity());
        assert_eq!(conjugate_euler_rates_matrix(&Vec3::zeros()), Mat3::identity());
        assert!((euler_rates_matrix(&Vec3::new(0.3, 0.0, 0.0)) - Mat3::identity()).amax() < 1e-15);
        assert!(
            (conjugate_euler_rates_matrix(&Vec3::new(0.0, 0.0, 1.2)) - Mat3::identity()).amax()
                < 1e-15
        );
    }

    #[test]
    fn rate_matrices_are_singular_at_vertical_pitch() {
        let e = Vec3::new(0.0, std::f64::consts::FRAC_PI_2, 0.0);
        assert!(euler_rates_matrix(&e).determinant().abs() < 1e-15);
        assert!(conjugate_euler_rates_matrix(&e).determinant().abs() < 1e-15);
        assert!(matches!(
            euler_rates_from_body_rate(&e, &Vec3::x()),
            Err(ModelError::SingularOrientation { .. })
        ));
    }

    #[test]
    fn body_rate_round_trip() {
        let e = Vec3::new(0.2, 0.3, 0.0);
        let w = Vec3::new(0.4, -0.7, 1.1);
        let rates = euler_rates_from_body_rate(&e, &w).unwrap();
        let back = conjugate_euler_rates_matrix(&e) * rates;
        assert!((back - w).amax() < 1e-12);
        let w = Vec3::new(0.1, 0.2, 0.3);
        assert!((euler_rates_from_body_rate(&Vec3::zeros(), &w).unwrap() - w).amax() < 1e-15);
        let yaw_only = euler_rates_from_body_rate(&Vec3::new(0.0, 0.0, 2.0), &Vec3::z()).unwrap();
        assert!((yaw_only - Vec3::z()).amax() < 1e-15);
    }

    #[test]
    fn world_and_body_rate_maps_agree() {
        let e = Vec3::new(0.2, -0.4, 0.9);
        let rates = Vec3::new(0.3, 0.1, -0.5);
        let world = euler_rates_matrix(&e) * rates;
        let body = conjugate_euler_rates_matrix(&e) * rates;
        assert!((rotation_matrix(&e) * body - world).amax() < 1e-12);
    }

    #[test]
    fn free_fall() {
        let (mut x, _, mut a, model) = hover();
        x[3] = 0.4;
        a.contact = [false; 4];
        let dx = srbd_derivative(&x, &ControlVector::zeros(), &a, &model).unwrap();
        assert_eq!(dx[0], 0.4);
        assert!((dx.fixed_rows::<3>(3) - model.gravity).amax() < 1e-15);
        assert!(dx.fixed_rows::<3>(9).amax() < 1e-15);
    }

    #[test]
    fn hover_forces_cancel_gravity() {
        let (x, u, a, model) = hover();
        assert!((u[2] - 214.4).abs() < 0.1);
        let dx = srbd_derivative(&x, &u, &a, &model).unwrap();
        assert!(dx.fixed_rows::<3>(3).amax() < 1e-12);
        assert!(dx.fixed_rows::<3>(9).amax() < 1e-12);
    }

    #[test]
    fn single_foot_torque() {
        let model = RobotModel::default();
        let x = StateVector::zeros();
        let mut a = StageParams { contact: [true, false, false, false], ..Default::default() };
        let mut u = ControlVector::zeros();
        u[2] = 100.0;
        a.foot_pos[0] = Vec3::new(0.0, 0.0, -0.55);
        assert!(body_frame_contact_torque(&x, &u, &a).amax() < 1e-12);
        a.foot_pos[0] = Vec3::new(0.3, 0.2, -0.55);
        let tau = body_frame_contact_torque(&x, &u, &a);
        assert!((tau - Vec3::new(20.0, -30.0, 0.0)).amax() < 1e-12);
        let dx = srbd_derivative(&x, &u, &a, &model).unwrap();
        let expected = model.inertia.try_inverse().unwrap() * tau;
        assert!((dx.fixed_rows::<3>(9) - expected).amax() < 1e-12);
    }

    #[test]
    fn model_file_overrides() {
        let m = RobotModel::from_toml_str("mass = 90.0\ninertia = [4.0, 0.0, 0.0, 11.0, 0.0, 12.0]\n")
            .unwrap();
        assert_eq!(m.mass, 90.0);
        assert_eq!(m.inertia[(1, 1)], 11.0);
        assert_eq!(m.hip_offsets, RobotModel::default().hip_offsets);
        assert!(RobotModel::from_toml_str("mass = -1.0").is_err());
        assert!(RobotModel::from_toml_str("masss = 1.0").is_err());
    }
}
