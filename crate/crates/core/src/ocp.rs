//! Optimal control problem: costs, contact-frame friction constraints and
//! the Gauss-Newton QP built along a guess trajectory.
//!
//! The stage cost is a weighted least-squares sum
//!
//! ```text
//! l = |x - x_ref|_Q^2 + |u - u_ref|_R^2 + sum_i delta_i |p_hf,i - p_hf,i_ref|_M^2 + rho sum_i |K_i' f_i|_P^2
//! ```
//!
//! and the QP minimizes the Gauss-Newton model of one half of the total
//! cost, so its Hessian is `J' W J` and its gradient `J' W res`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrator::{linearize_discrete, IntegratorConfig, IntegratorError, Scheme};
use crate::model::{
    leg_force, rotation_matrix, rotation_matrix_partials, ControlVector, Mat3, ModelError,
    RobotModel, StageParams, StateVector, Vec3, NUM_LEGS, NU, NX, SINGULARITY_TOLERANCE,
};
use crate::qp::{QpStage, QpSubproblem, QpTerminal};

/// Constraint rows generated per stance leg.
pub const ROWS_PER_LEG: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("invalid OCP configuration: {0}")]
    InvalidConfig(String),
    #[error("contact normal has zero length")]
    DegenerateNormal,
    #[error("trajectory length mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpConfig {
    pub horizon: usize,
    /// Sampling time in seconds.
    pub ts: f64,
    /// State tracking weights `(p, v, euler, omega)`.
    pub q: [f64; NX],
    /// Force tracking weights, three per leg.
    pub r: [f64; NU],
    /// Hip-to-foot weights, three per leg.
    pub m: [f64; 12],
    /// Contact-frame force weights, three per leg.
    pub p: [f64; NU],
    pub rho: f64,
    /// Terminal state weights.
    pub qn: [f64; NX],
    /// Friction coefficient per foot.
    pub mu: [f64; NUM_LEGS],
    pub fz_min: f64,
    pub fz_max: f64,
    /// Include the friction pyramid rows (the normal-force bounds are always kept).
    pub friction_constraints: bool,
    pub scheme: Scheme,
}

const DEFAULT_Q: [f64; NX] = [0.0, 0.0, 0.0, 100.0, 100.0, 100.0, 0.0, 0.0, 100.0, 100.0, 100.0, 1000.0];

fn per_leg(v: [f64; 3]) -> [f64; 12] {
    std::array::from_fn(|i| v[i % 3])
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            ts: 0.04,
            q: DEFAULT_Q,
            r: per_leg([1e-3, 1e-3, 8e-4]),
            m: per_leg([1e-4, 2e-3, 1000.0]),
            p: per_leg([100.0, 100.0, 1.0]),
            rho: 3e-5,
            qn: DEFAULT_Q,
            mu: [0.7; NUM_LEGS],
            fz_min: 0.0,
            fz_max: 500.0,
            friction_constraints: true,
            scheme: Scheme::ImplicitEuler,
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<(), OcpError> {
        let bad = |m: &str| Err(OcpError::InvalidConfig(m.to_string()));
        if self.horizon < 2 {
            return bad("horizon must be at least 2");
        }
        if !(self.ts > 0.0) {
            return bad("sampling time must be positive");
        }
        let weights = self.q.iter().chain(&self.r).chain(&self.m).chain(&self.p).chain(&self.qn);
        if weights.chain(std::iter::once(&self.rho)).any(|w| !(*w >= 0.0)) {
            return bad("weights must be non-negative");
        }
        if !(self.fz_min >= 0.0) {
            return bad("fz_min must be non-negative");
        }
        if self.mu.iter().any(|m| !(*m > 0.0)) {
            return bad("friction coefficients must be positive");
        }
        Ok(())
    }

    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig { scheme: self.scheme, step: self.ts, ..Default::default() }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, OcpError> {
        let cfg: Self = toml::from_str(text).map_err(|e| OcpError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, OcpError> {
        let text = std::fs::read_to_string(path).map_err(|e| OcpError::InvalidConfig(e.to_string()))?;
        Self::from_toml_str(&text)
    }
}

/// Default hip-to-foot reference: `(0, +-0.1, -0.55)` with the lateral sign of each leg.
pub fn default_hip_foot_reference() -> [Vec3; NUM_LEGS] {
    std::array::from_fn(|i| Vec3::new(0.0, if i % 2 == 0 { 0.1 } else { -0.1 }, -0.55))
}

/// Primal trajectory over the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub x: Vec<StateVector>,
    pub u: Vec<ControlVector>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.u.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    /// `N + 1` states.
    pub x_ref: Vec<StateVector>,
    /// `N` controls.
    pub u_ref: Vec<ControlVector>,
    /// `N` stage parameters.
    pub params: Vec<StageParams>,
    pub p_hf_ref: [Vec3; NUM_LEGS],
}

impl ReferenceTrajectory {
    pub fn horizon(&self) -> usize {
        self.u_ref.len()
    }

    pub fn validate(&self, horizon: usize) -> Result<(), OcpError> {
        if self.u_ref.len() != horizon || self.params.len() != horizon || self.x_ref.len() != horizon + 1 {
            return Err(OcpError::Dimension(format!(
                "reference has {} states, {} controls, {} parameter sets for horizon {horizon}",
                self.x_ref.len(),
                self.u_ref.len(),
                self.params.len()
            )));
        }
        Ok(())
    }

    pub fn as_guess(&self) -> Trajectory {
        Trajectory { x: self.x_ref.clone(), u: self.u_ref.clone() }
    }
}

fn check_orientation(x: &StateVector) -> Result<(), ModelError> {
    let cos_pitch = x[7].cos();
    if cos_pitch.abs() <= SINGULARITY_TOLERANCE {
        return Err(ModelError::SingularOrientation { cos_pitch });
    }
    Ok(())
}

/// Hip-to-foot vectors expressed in the CoM frame.
pub fn hip_to_foot_com_frame(
    x: &StateVector,
    foot_pos: &[Vec3; NUM_LEGS],
    model: &RobotModel,
) -> Result<[Vec3; NUM_LEGS], ModelError> {
    check_orientation(x)?;
    let rt = rotation_matrix(&x.fixed_rows::<3>(6).into()).transpose();
    let pc: Vec3 = x.fixed_rows::<3>(0).into();
    Ok(std::array::from_fn(|i| rt * (foot_pos[i] - pc) - model.com_to_base - model.hip_offsets[i]))
}

/// Jacobian of one hip-to-foot vector with respect to the CoM position and
/// the Euler angles: `(d/dp_c, d/dPhi)`.
fn hip_to_foot_jacobian(x: &StateVector, foot: &Vec3) -> (Mat3, Mat3) {
    let euler: Vec3 = x.fixed_rows::<3>(6).into();
    let pc: Vec3 = x.fixed_rows::<3>(0).into();
    let rel = foot - pc;
    let partials = rotation_matrix_partials(&euler);
    let mut d_euler = Mat3::zeros();
    for j in 0..3 {
        d_euler.set_column(j, &(partials[j].transpose() * rel));
    }
    (-rotation_matrix(&euler).transpose(), d_euler)
}

/// Orthonormal contact frame with Z along `normal`; columns are the frame axes in world coordinates.
pub fn contact_frame(normal: &Vec3) -> Result<Mat3, OcpError> {
    let len = normal.norm();
    if !(len > 0.0) || !len.is_finite() {
        return Err(OcpError::DegenerateNormal);
    }
    let z = normal / len;
    let project = |seed: Vec3| seed - z * z.dot(&seed);
    let mut x = project(Vec3::x());
    if x.norm() < 1e-8 {
        x = project(Vec3::y());
    }
    let x = x.normalize();
    let y = z.cross(&x);
    Ok(Mat3::from_columns(&[x, y, z]))
}

/// Residual blocks of one stage and their weights.
struct StageResiduals {
    state: StateVector,
    control: ControlVector,
    hip_foot: [Vec3; NUM_LEGS],
    frames: [Mat3; NUM_LEGS],
}

fn stage_residuals(
    x: &StateVector,
    u: &ControlVector,
    params: &StageParams,
    x_ref: &StateVector,
    u_ref: &ControlVector,
    p_hf_ref: &[Vec3; NUM_LEGS],
    model: &RobotModel,
) -> Result<StageResiduals, OcpError> {
    let p_hf = hip_to_foot_com_frame(x, &params.foot_pos, model)?;
    let mut frames = [Mat3::identity(); NUM_LEGS];
    for i in 0..NUM_LEGS {
        frames[i] = contact_frame(&params.normals[i])?;
    }
    Ok(StageResiduals {
        state: x - x_ref,
        control: u - u_ref,
        hip_foot: std::array::from_fn(|i| p_hf[i] - p_hf_ref[i]),
        frames,
    })
}

fn weighted_sq(r: &Vec3, w: &[f64]) -> f64 {
    (0..3).map(|k| w[k] * r[k] * r[k]).sum()
}

/// Stage cost `l(x, u, a)`.
#[allow(clippy::too_many_arguments)]
pub fn stage_cost(
    x: &StateVector,
    u: &ControlVector,
    params: &StageParams,
    x_ref: &StateVector,
    u_ref: &ControlVector,
    p_hf_ref: &[Vec3; NUM_LEGS],
    cfg: &OcpConfig,
    model: &RobotModel,
) -> Result<f64, OcpError> {
    let res = stage_residuals(x, u, params, x_ref, u_ref, p_hf_ref, model)?;
    let mut total = 0.0;
    for k in 0..NX {
        total += cfg.q[k] * res.state[k] * res.state[k];
    }
    for k in 0..NU {
        total += cfg.r[k] * res.control[k] * res.control[k];
    }
    for i in 0..NUM_LEGS {
        let w = 3 * i..3 * i + 3;
        total += params.contact_weight(i) * weighted_sq(&res.hip_foot[i], &cfg.m[w.clone()]);
        let f_k = res.frames[i].transpose() * leg_force(u, i);
        total += cfg.rho * weighted_sq(&f_k, &cfg.p[w]);
    }
    Ok(total)
}

/// Terminal cost `|x_N - x_ref|_QN^2`.
pub fn terminal_cost(x: &StateVector, x_ref: &StateVector, cfg: &OcpConfig) -> f64 {
    (0..NX).map(|k| cfg.qn[k] * (x[k] - x_ref[k]).powi(2)).sum()
}

/// Total NLP objective along a trajectory.
pub fn objective(
    traj: &Trajectory,
    refs: &ReferenceTrajectory,
    cfg: &OcpConfig,
    model: &RobotModel,
) -> Result<f64, OcpError> {
    let n = refs.horizon();
    let mut total = 0.0;
    for k in 0..n {
        total += stage_cost(
            &traj.x[k],
            &traj.u[k],
            &refs.params[k],
            &refs.x_ref[k],
            &refs.u_ref[k],
            &refs.p_hf_ref,
            cfg,
            model,
        )?;
    }
    Ok(total + terminal_cost(&traj.x[n], &refs.x_ref[n], cfg))
}

/// State block, force block and offset of a set of stacked inequality rows.
pub type InequalityRows = (DMatrix<f64>, DMatrix<f64>, DVector<f64>);

/// Linear inequality rows `D u + h >= 0` on the stacked forces at a
/// linearization point `u_lin`; returned `h` is the residual at `u_lin`.
pub fn friction_pyramid_rows(
    params: &StageParams,
    u_lin: &ControlVector,
    cfg: &OcpConfig,
) -> Result<InequalityRows, OcpError> {
    let stance: Vec<usize> = (0..NUM_LEGS).filter(|&i| params.contact[i]).collect();
    let per_leg = if cfg.friction_constraints { ROWS_PER_LEG } else { 2 };
    let rows = stance.len() * per_leg;
    let mut d = DMatrix::zeros(rows, NU);
    let mut h = DVector::zeros(rows);
    let mut row = 0;
    for &i in &stance {
        let k = contact_frame(&params.normals[i])?;
        let (t1, t2, n) = (k.column(0).into_owned(), k.column(1).into_owned(), k.column(2).into_owned());
        let mu = cfg.mu[i];
        let f = leg_force(u_lin, i);
        let mut push = |dir: Vec3, offset: f64| {
            for c in 0..3 {
                d[(row, 3 * i + c)] = dir[c];
            }
            h[row] = dir.dot(&f) + offset;
            row += 1;
        };
        if cfg.friction_constraints {
            push(mu * n - t1, 0.0);
            push(mu * n + t1, 0.0);
            push(mu * n - t2, 0.0);
            push(mu * n + t2, 0.0);
        }
        push(n, -cfg.fz_min);
        push(-n, cfg.fz_max);
    }
    let c = DMatrix::zeros(rows, NX);
    Ok((c, d, h))
}

/// Smallest margin of all friction rows at `u` (negative when violated).
pub fn constraint_margin(params: &StageParams, u: &ControlVector, cfg: &OcpConfig) -> Result<f64, OcpError> {
    let (_, _, h) = friction_pyramid_rows(params, u, cfg)?;
    Ok(h.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Gauss-Newton Hessian and gradient blocks of one stage over `(x, u)`.
#[allow(clippy::too_many_arguments)]
fn stage_quadratic(
    x: &StateVector,
    u: &ControlVector,
    params: &StageParams,
    x_ref: &StateVector,
    u_ref: &ControlVector,
    p_hf_ref: &[Vec3; NUM_LEGS],
    cfg: &OcpConfig,
    model: &RobotModel,
) -> Result<(DMatrix<f64>, DVector<f64>), OcpError> {
    let res = stage_residuals(x, u, params, x_ref, u_ref, p_hf_ref, model)?;
    let mut hess = DMatrix::zeros(NX + NU, NX + NU);
    let mut grad = DVector::zeros(NX + NU);
    for k in 0..NX {
        hess[(k, k)] = cfg.q[k];
        grad[k] = cfg.q[k] * res.state[k];
    }
    for k in 0..NU {
        hess[(NX + k, NX + k)] = cfg.r[k];
        grad[NX + k] = cfg.r[k] * res.control[k];
    }
    for i in 0..NUM_LEGS {
        let wm = Mat3::from_diagonal(&Vec3::new(cfg.m[3 * i], cfg.m[3 * i + 1], cfg.m[3 * i + 2]));
        if params.contact[i] && wm != Mat3::zeros() {
            let (jp, je) = hip_to_foot_jacobian(x, &params.foot_pos[i]);
            let blocks = [(0usize, jp), (6usize, je)];
            for (ra, ja) in &blocks {
                let g = ja.transpose() * (wm * res.hip_foot[i]);
                for r in 0..3 {
                    grad[ra + r] += g[r];
                }
                for (rb, jb) in &blocks {
                    let block = ja.transpose() * (wm * jb);
                    for r in 0..3 {
                        for c in 0..3 {
                            hess[(ra + r, rb + c)] += block[(r, c)];
                        }
                    }
                }
            }
        }
        let wp = Mat3::from_diagonal(&Vec3::new(cfg.p[3 * i], cfg.p[3 * i + 1], cfg.p[3 * i + 2]));
        if cfg.rho > 0.0 {
            let kf = res.frames[i];
            let block = cfg.rho * kf * wp * kf.transpose();
            let g = block * leg_force(u, i);
            let off = NX + 3 * i;
            for r in 0..3 {
                grad[off + r] += g[r];
                for c in 0..3 {
                    hess[(off + r, off + c)] += block[(r, c)];
                }
            }
        }
    }
    let t = hess.transpose();
    hess = (hess + t) * 0.5;
    Ok((hess, grad))
}

fn to_dmatrix<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

fn to_dvector<const R: usize>(v: &nalgebra::SVector<f64, R>) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

/// Gauss-Newton QP in the increments `(dx, du)` around `guess`.
pub fn build_qp(
    guess: &Trajectory,
    refs: &ReferenceTrajectory,
    x0_hat: &StateVector,
    cfg: &OcpConfig,
    model: &RobotModel,
) -> Result<QpSubproblem, OcpError> {
    let n = cfg.horizon;
    refs.validate(n)?;
    if guess.x.len() != n + 1 || guess.u.len() != n {
        return Err(OcpError::Dimension(format!(
            "guess has {} states and {} controls for horizon {n}",
            guess.x.len(),
            guess.u.len()
        )));
    }
    let icfg = cfg.integrator();
    let mut stages = Vec::with_capacity(n);
    for k in 0..n {
        let (x, u, a) = (&guess.x[k], &guess.u[k], &refs.params[k]);
        let (hess, grad) =
            stage_quadratic(x, u, a, &refs.x_ref[k], &refs.u_ref[k], &refs.p_hf_ref, cfg, model)?;
        let lin = linearize_discrete(model, x, u, a, &guess.x[k + 1], &icfg)?;
        let (c, d, h) = friction_pyramid_rows(a, u, cfg)?;
        stages.push(QpStage {
            hess,
            grad,
            a: to_dmatrix(&lin.a),
            b: to_dmatrix(&lin.b),
            r: to_dvector(&lin.r),
            c,
            d,
            h,
        });
    }
    check_orientation(&guess.x[n])?;
    let qn = DMatrix::from_diagonal(&DVector::from_column_slice(&cfg.qn));
    let gn = DVector::from_fn(NX, |k, _| cfg.qn[k] * (guess.x[n][k] - refs.x_ref[n][k]));
    Ok(QpSubproblem {
        stages,
        terminal: QpTerminal::unconstrained(qn, gn),
        dx0: to_dvector(&(x0_hat - guess.x[0])),
    })
}
