//! Closed-loop simulation: the reference generator and RTI controller plan at
//! the sampling rate, the whole-body layer runs `f_r` times faster, and a
//! single-rigid-body plant integrates the commanded stance forces.
//!
//! Stance feet are pinned force-transmission points. Swing feet follow the
//! semi-elliptic swing trajectory kinematically and touch down when they
//! reach the true terrain, which may differ from the planner's map to
//! provoke early or late touchdowns. A commanded force outside the true
//! friction cone is recorded as a slip event; the plant still applies it.
//!
//! Two execution modes exist. The deterministic mode interleaves planner and
//! whole-body ticks on one thread. The threaded mode runs the planner on its
//! own thread, paces the whole-body loop at wall-clock rate and keeps using
//! the last plan until a new one arrives.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrator::{step, Dynamics, IntegratorConfig, IntegratorError, Scheme};
use crate::leg::LegGeometry;
use crate::model::{
    leg_force, rotation_matrix, srbd_derivative_with_external, srbd_jacobians, ControlVector,
    Mat12, ModelError, RobotModel, RobotModelFile, StageParams, StateVector, Vec3, NUM_LEGS,
};
use crate::ocp::{
    constraint_margin, contact_frame, default_hip_foot_reference, hip_to_foot_com_frame,
    OcpConfig, OcpError, ReferenceTrajectory, Trajectory,
};
use crate::qp::{QpSubproblem, SolverOptions};
use crate::reference::{CommandScript, ReferenceConfig, ReferenceError, ReferenceGenerator, UserCommand};
use crate::rti::{CycleRecord, Plan, RtiController, RtiError};
use crate::terrain::{build_scenario, HeightMap, TerrainError, TerrainSpec};
use crate::wbc::{
    feedforward_wrench, feedback_wrench, interpolate_state, project_wrench_to_grf, swing_position,
    zmp_from_forces, zmp_margin, SwingSpec, WbcGains,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Terrain(#[from] TerrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reference(#[from] ReferenceError),
    #[error(transparent)]
    Rti(#[from] RtiError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot encode run log: {0}")]
    Encode(String),
}

/// Force tolerance in newtons of the true-cone check behind slip events.
pub const SLIP_TOLERANCE: f64 = 1e-6;

/// Constant external force applied to the CoM over a time window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disturbance {
    pub start: f64,
    pub duration: f64,
    /// World-frame force in newtons.
    pub force: [f64; 3],
}

impl Disturbance {
    pub fn active(&self, t: f64) -> bool {
        t >= self.start && t < self.start + self.duration
    }
}

/// Differences between the plant and the controller model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    pub mass_scale: f64,
    pub inertia_scale: f64,
    /// Standard deviation of Gaussian noise added to every measured state entry.
    pub state_noise: f64,
    /// Descent speed of a swing foot that reached its target above the true ground.
    pub descent_speed: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self { mass_scale: 1.0, inertia_scale: 1.0, state_noise: 0.0, descent_speed: 0.3 }
    }
}

/// Conditions that end a run as a fall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FallLimits {
    /// Maximum absolute roll or pitch in radians.
    pub max_tilt: f64,
    /// Allowed CoM height above the mean stance-foot height.
    pub height_range: [f64; 2],
    /// Slack beyond the leg length before a stance leg counts as over-extended.
    pub reach_margin: f64,
}

impl Default for FallLimits {
    fn default() -> Self {
        Self { max_tilt: 0.5, height_range: [0.25, 0.9], reach_margin: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub name: String,
    /// Simulated duration in seconds.
    pub duration: f64,
    pub seed: u64,
    /// Whole-body control and plant rate; must be an integer multiple of `1 / ocp.ts`.
    pub wbc_hz: f64,
    /// Re-planning rate; the planner runs every `round(1 / (ts * replan_hz))` samples.
    pub replan_hz: f64,
    pub threaded: bool,
    pub swing_height: f64,
    /// Initial `(x, y, yaw)`.
    pub start: [f64; 3],
    /// Initial CoM height above the ground under the start position.
    pub body_height: f64,
    pub terrain: TerrainSpec,
    /// Ground used for touchdown detection; defaults to the planner's terrain.
    pub true_terrain: Option<TerrainSpec>,
    pub commands: CommandScript,
    pub disturbances: Vec<Disturbance>,
    pub plant: PlantConfig,
    pub model: RobotModelFile,
    pub geometry: LegGeometry,
    pub ocp: OcpConfig,
    pub reference: ReferenceConfig,
    pub wbc: WbcGains,
    pub solver: SolverOptions,
    pub limits: FallLimits,
    /// Hip-to-foot reference per leg; defaults to `(0, +-0.1, -0.55)`.
    pub hip_foot_ref: Option<[[f64; 3]; NUM_LEGS]>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            name: "hover".into(),
            duration: 10.0,
            seed: 0,
            wbc_hz: 250.0,
            replan_hz: 25.0,
            threaded: false,
            swing_height: 0.10,
            start: [0.0, 0.0, 0.0],
            body_height: 0.55,
            terrain: TerrainSpec::default(),
            true_terrain: None,
            commands: CommandScript::default(),
            disturbances: Vec::new(),
            plant: PlantConfig::default(),
            model: RobotModelFile::default(),
            geometry: LegGeometry::default(),
            ocp: OcpConfig::default(),
            reference: ReferenceConfig::default(),
            wbc: WbcGains::default(),
            solver: SolverOptions::default(),
            limits: FallLimits::default(),
            hip_foot_ref: None,
        }
    }
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::InvalidConfig(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Whole-body ticks per planner sample.
    pub fn rate_ratio(&self) -> Result<usize, SimError> {
        let ratio = self.wbc_hz * self.ocp.ts;
        if !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(SimError::InvalidConfig(format!(
                "wbc rate {} Hz is not an integer multiple of the planner rate {} Hz",
                self.wbc_hz,
                1.0 / self.ocp.ts
            )));
        }
        Ok(ratio.round() as usize)
    }

    /// Planner samples between two re-plans.
    pub fn replan_interval(&self) -> Result<usize, SimError> {
        if !(self.replan_hz > 0.0) {
            return Err(SimError::InvalidConfig("replan rate must be positive".into()));
        }
        Ok(((1.0 / (self.ocp.ts * self.replan_hz)).round() as usize).max(1))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.duration > 0.0) {
            return Err(SimError::InvalidConfig("duration must be positive".into()));
        }
        self.rate_ratio()?;
        self.replan_interval()?;
        self.ocp.validate()?;
        self.reference.gait.validate()?;
        self.commands.validate()?;
        if !(self.swing_height >= 0.0) || !(self.body_height > 0.0) {
            return Err(SimError::InvalidConfig("swing and body heights must be positive".into()));
        }
        if self.plant.state_noise < 0.0 || !(self.plant.descent_speed > 0.0) {
            return Err(SimError::InvalidConfig("noise must be non-negative and descent speed positive".into()));
        }
        Ok(())
    }

    pub fn hip_foot_reference(&self) -> [Vec3; NUM_LEGS] {
        match self.hip_foot_ref {
            Some(r) => r.map(Vec3::from),
            None => default_hip_foot_reference(),
        }
    }
}

/// Height, roll and pitch weight of the base-pose task that replaces the
/// hip-to-foot cost when it is switched off.
pub const BASE_POSE_TASK_WEIGHT: f64 = 1000.0;

/// Single-feature variations compared against a baseline run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Hip-to-foot weights set to zero and replaced by a level base-pose task.
    MobilityCost,
    /// Contact-frame force weight set to zero.
    ForceRobustness,
    /// Friction pyramid rows dropped from the planner and the force projection.
    ConeConstraints,
    /// Re-planning slowed to 0.8 Hz.
    ReplanRate,
    /// Vertical force tracking weights multiplied by 100.
    VerticalForceWeight,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::MobilityCost,
        Ablation::ForceRobustness,
        Ablation::ConeConstraints,
        Ablation::ReplanRate,
        Ablation::VerticalForceWeight,
    ];

    pub fn apply(&self, cfg: &SimConfig) -> SimConfig {
        let mut out = cfg.clone();
        match self {
            Ablation::MobilityCost => {
                out.ocp.m = [0.0; 12];
                for k in [2, 6, 7] {
                    out.ocp.q[k] = BASE_POSE_TASK_WEIGHT;
                }
            }
            Ablation::ForceRobustness => out.ocp.rho = 0.0,
            Ablation::ConeConstraints => out.ocp.friction_constraints = false,
            Ablation::ReplanRate => out.replan_hz = 0.8,
            Ablation::VerticalForceWeight => {
                for i in 0..NUM_LEGS {
                    out.ocp.r[3 * i + 2] *= 100.0;
                }
            }
        }
        out.name = format!("{}-{}", cfg.name, self.label());
        out
    }

    pub fn label(&self) -> &'static str {
        match self {
            Ablation::MobilityCost => "no-mobility",
            Ablation::ForceRobustness => "no-robustness",
            Ablation::ConeConstraints => "no-cones",
            Ablation::ReplanRate => "slow-replan",
            Ablation::VerticalForceWeight => "heavy-rz",
        }
    }
}

/// One whole-body tick of the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub state: [f64; 12],
    /// Pitch of the interpolated plan state tracked at this tick.
    pub planned_pitch: f64,
    /// Forces applied to the plant, world frame.
    pub forces: [f64; 12],
    pub contact: [bool; NUM_LEGS],
    pub foot_z: [f64; NUM_LEGS],
    pub zmp_margin: Option<f64>,
    pub command: [f64; 3],
}

/// Deterministic outcome metrics of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub completed: bool,
    pub fall_reason: Option<String>,
    pub sim_time: f64,
    pub planner_cycles: usize,
    pub planner_failures: usize,
    pub projection_failures: usize,
    /// Root mean square of the horizontal velocity error against the command.
    pub velocity_rms: f64,
    pub min_zmp_margin: Option<f64>,
    /// Largest `|f_t| / f_n` among planned stance forces tracked by the whole-body layer.
    pub max_cone_ratio_planned: f64,
    /// Largest `|f_t| / f_n` among projected stance forces.
    pub max_cone_ratio_projected: f64,
    /// Smallest friction-pyramid margin over all planned stages, newtons.
    pub min_cone_margin_planned: Option<f64>,
    /// Smallest friction-pyramid margin of the projected forces, newtons.
    pub min_cone_margin_projected: Option<f64>,
    pub slip_events: usize,
    /// Largest deviation of a stance hip-to-foot height from its reference.
    pub max_hip_foot_z_error: f64,
    pub pitch_range: [f64; 2],
    pub planned_pitch_range: [f64; 2],
    pub final_position: [f64; 3],
    pub xy_drift: f64,
    pub max_vertical_speed_after_transient: f64,
    pub unsafe_footholds: usize,
    pub early_touchdowns: usize,
    pub late_touchdowns: usize,
}

/// Wall-clock statistics; these vary between runs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub feedback_ms_mean: f64,
    pub feedback_ms_max: f64,
    pub preparation_ms_mean: f64,
    pub preparation_ms_max: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub metrics: Metrics,
    pub timing: Timing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub cycles: Vec<CycleRecord>,
    pub trace: Vec<TraceRow>,
    pub summary: Summary,
}

/// Column header of [`RunLog::trace_csv`].
pub const TRACE_COLUMNS: &str = "t,px,py,pz,vx,vy,vz,roll,pitch,yaw,wx,wy,wz,planned_pitch,\
f_lf_x,f_lf_y,f_lf_z,f_rf_x,f_rf_y,f_rf_z,f_lh_x,f_lh_y,f_lh_z,f_rh_x,f_rh_y,f_rh_z,\
c_lf,c_rf,c_lh,c_rh,z_lf,z_rf,z_lh,z_rh,zmp_margin,cmd_vx,cmd_vy,cmd_yaw_rate";

impl RunLog {
    pub fn metrics_json(&self) -> Result<String, SimError> {
        serde_json::to_string(&self.summary.metrics).map_err(|e| SimError::Encode(e.to_string()))
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from(TRACE_COLUMNS);
        out.push('\n');
        for r in &self.trace {
            let _ = write!(out, "{}", r.t);
            for v in r.state.iter().chain(std::iter::once(&r.planned_pitch)).chain(r.forces.iter()) {
                let _ = write!(out, ",{v}");
            }
            for c in r.contact {
                let _ = write!(out, ",{}", u8::from(c));
            }
            for z in r.foot_z {
                let _ = write!(out, ",{z}");
            }
            match r.zmp_margin {
                Some(m) => {
                    let _ = write!(out, ",{m}");
                }
                None => out.push(','),
            }
            for c in r.command {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }

    /// Writes `cycles.jsonl`, `summary.json` and `trace.csv` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<(), SimError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut jsonl = String::new();
        for c in &self.cycles {
            jsonl.push_str(&serde_json::to_string(c).map_err(|e| SimError::Encode(e.to_string()))?);
            jsonl.push('\n');
        }
        std::fs::write(dir.join("cycles.jsonl"), jsonl)?;
        let summary = serde_json::to_string_pretty(&self.summary).map_err(|e| SimError::Encode(e.to_string()))?;
        std::fs::write(dir.join("summary.json"), summary)?;
        std::fs::write(dir.join("trace.csv"), self.trace_csv())?;
        Ok(())
    }
}

/// What the plant reports about each leg to the planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LegReport {
    Stance,
    Swinging,
    /// In contact while the current plan still has the leg swinging.
    EarlyTouchdown,
}

struct PlanRequest {
    stage: u64,
    x: StateVector,
    feet: [Vec3; NUM_LEGS],
    legs: [LegReport; NUM_LEGS],
    cmd: UserCommand,
}

struct PlanResponse {
    stage: u64,
    plan: Option<Plan>,
    record: Option<CycleRecord>,
    unsafe_footholds: usize,
}

struct Planner {
    refgen: ReferenceGenerator,
    rti: RtiController,
    map: HeightMap,
    model: RobotModel,
    p_hf_ref: [Vec3; NUM_LEGS],
    last_stage: Option<u64>,
}

impl Planner {
    fn initial_guess(refs: &ReferenceTrajectory, x0: &StateVector) -> Trajectory {
        let mut guess = refs.as_guess();
        for x in &mut guess.x {
            for k in [2, 6, 7] {
                x[k] = x0[k];
            }
        }
        guess
    }

    fn plan(&mut self, req: PlanRequest) -> PlanResponse {
        let ts = self.rti.cfg.ts;
        if let Some(last) = self.last_stage {
            self.refgen.advance(req.stage.saturating_sub(last) as f64 * ts);
        }
        self.last_stage = Some(req.stage);
        let planned = self.refgen.planned_contacts();
        let measured: [bool; NUM_LEGS] = std::array::from_fn(|i| match req.legs[i] {
            LegReport::Swinging => false,
            LegReport::EarlyTouchdown => true,
            LegReport::Stance => planned[i],
        });
        self.refgen.resync(&measured);
        let failed = |record| PlanResponse { stage: req.stage, plan: None, record, unsafe_footholds: 0 };
        let generated = match self.refgen.generate(
            &req.x,
            &req.feet,
            &req.cmd,
            &self.map,
            &self.model,
            self.rti.cfg.horizon,
            ts,
            self.p_hf_ref,
        ) {
            Ok(g) => g,
            Err(_) => return failed(None),
        };
        if self.rti.guess().is_none() {
            self.rti.set_guess(Self::initial_guess(&generated.refs, &req.x));
        }
        let plan = self.rti.prepare(generated.refs).and_then(|_| self.rti.feedback(&req.x));
        PlanResponse {
            stage: req.stage,
            plan: plan.ok(),
            record: self.rti.last_record().cloned(),
            unsafe_footholds: generated.unsafe_footholds,
        }
    }
}

/// Plant dynamics with an external CoM force.
struct Plant<'a> {
    model: &'a RobotModel,
    external: Vec3,
}

impl Dynamics for Plant<'_> {
    fn derivative(&self, x: &StateVector, u: &ControlVector, a: &StageParams) -> Result<StateVector, ModelError> {
        srbd_derivative_with_external(x, u, a, self.model, &self.external)
    }

    fn jacobians(&self, x: &StateVector, u: &ControlVector, a: &StageParams) -> Result<(Mat12, Mat12), ModelError> {
        srbd_jacobians(x, u, a, self.model)
    }
}

#[derive(Debug, Clone, Copy)]
enum LegState {
    Stance { early: bool },
    Swing { spec: SwingSpec, ticks: u64, descending_from: Option<Vec3> },
}

struct ActivePlan {
    plan: Plan,
    stage: u64,
}

impl ActivePlan {
    /// Plan stage index and interpolation endpoints at a global stage.
    fn at(&self, stage: u64) -> (usize, bool) {
        let n = self.plan.u.len();
        let j = stage.saturating_sub(self.stage) as usize;
        if j < n {
            (j, true)
        } else {
            (n - 1, false)
        }
    }
}

/// Tangential-to-normal ratio in the contact frame, `None` for unloaded feet.
fn cone_ratio(f: &Vec3, normal: &Vec3) -> Option<f64> {
    let fn_ = f.dot(normal);
    if fn_ < 1.0 {
        return None;
    }
    Some((f - normal * fn_).norm() / fn_)
}

fn mean_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut sum, mut max, mut n) = (0.0, 0.0f64, 0usize);
    for v in values.filter(|v| v.is_finite()) {
        sum += v;
        max = max.max(v);
        n += 1;
    }
    (if n > 0 { sum / n as f64 } else { 0.0 }, max)
}

fn min_opt(a: Option<f64>, b: f64) -> Option<f64> {
    if !b.is_finite() {
        return a;
    }
    Some(a.map_or(b, |v| v.min(b)))
}

/// Standing state at the start pose with every foot below its hip reference.
pub fn initial_state(
    cfg: &SimConfig,
    model: &RobotModel,
    ground: &HeightMap,
) -> Result<(StateVector, [Vec3; NUM_LEGS]), SimError> {
    let p_hf_ref = cfg.hip_foot_reference();
    let mut x = StateVector::zeros();
    x[0] = cfg.start[0];
    x[1] = cfg.start[1];
    x[2] = ground.height_at(cfg.start[0], cfg.start[1])? + cfg.body_height;
    x[8] = cfg.start[2];
    let r0 = rotation_matrix(&Vec3::new(0.0, 0.0, cfg.start[2]));
    let pc0: Vec3 = x.fixed_rows::<3>(0).into();
    let mut feet = [Vec3::zeros(); NUM_LEGS];
    for i in 0..NUM_LEGS {
        let p = pc0 + r0 * (model.com_to_base + model.hip_offsets[i] + p_hf_ref[i]);
        feet[i] = Vec3::new(p.x, p.y, ground.height_at(p.x, p.y)?);
    }
    Ok((x, feet))
}

/// QP of the first planning cycle of a scenario, with the measured initial state injected.
pub fn initial_subproblem(cfg: &SimConfig) -> Result<QpSubproblem, SimError> {
    cfg.validate()?;
    let model = cfg.model.clone().into_model()?;
    let map = build_scenario(&cfg.terrain)?;
    let (x, feet) = initial_state(cfg, &model, &map)?;
    let mut refgen = ReferenceGenerator::new(cfg.reference.clone());
    let generated = refgen.generate(
        &x,
        &feet,
        &cfg.commands.at(0.0),
        &map,
        &model,
        cfg.ocp.horizon,
        cfg.ocp.ts,
        cfg.hip_foot_reference(),
    )?;
    let mut rti = RtiController::new(cfg.ocp.clone(), model, cfg.solver);
    rti.set_guess(Planner::initial_guess(&generated.refs, &x));
    rti.prepare(generated.refs)?;
    let mut qp = rti.prepared_qp().expect("prepared above").clone();
    let guess_x0 = rti.guess().expect("prepared above").x[0];
    qp.dx0 = nalgebra::DVector::from_column_slice((x - guess_x0).as_slice());
    Ok(qp)
}

/// Runs the closed loop described by `cfg`.
pub fn run(cfg: &SimConfig) -> Result<RunLog, SimError> {
    cfg.validate()?;
    let wall = Instant::now();
    let model = cfg.model.clone().into_model()?;
    let plant_model = model.scaled(cfg.plant.mass_scale, cfg.plant.inertia_scale);
    let map = build_scenario(&cfg.terrain)?;
    let truth = match &cfg.true_terrain {
        Some(spec) => build_scenario(spec)?,
        None => map.clone(),
    };
    let ratio = cfg.rate_ratio()? as u64;
    let replan_every = cfg.replan_interval()? as u64;
    let dt = 1.0 / cfg.wbc_hz;
    let p_hf_ref = cfg.hip_foot_reference();
    let plant_integrator = IntegratorConfig { scheme: Scheme::Rk4, step: dt, ..IntegratorConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.plant.state_noise.max(f64::MIN_POSITIVE))
        .map_err(|e| SimError::InvalidConfig(e.to_string()))?;

    let (mut x, mut feet) = initial_state(cfg, &model, &truth)?;
    let mut legs = [LegState::Stance { early: false }; NUM_LEGS];

    let mut planner = Planner {
        refgen: ReferenceGenerator::new(cfg.reference.clone()),
        rti: RtiController::new(cfg.ocp.clone(), model.clone(), cfg.solver),
        map: map.clone(),
        model: model.clone(),
        p_hf_ref,
        last_stage: None,
    };

    let measure = |x: &StateVector, rng: &mut ChaCha8Rng| -> StateVector {
        if cfg.plant.state_noise > 0.0 {
            x.map(|v| v + noise.sample(rng))
        } else {
            *x
        }
    };
    let report = |legs: &[LegState; NUM_LEGS]| -> [LegReport; NUM_LEGS] {
        legs.map(|l| match l {
            LegState::Swing { .. } => LegReport::Swinging,
            LegState::Stance { early: true } => LegReport::EarlyTouchdown,
            LegState::Stance { early: false } => LegReport::Stance,
        })
    };

    let mut cycles = Vec::new();
    let mut trace = Vec::new();
    let mut planner_failures = 0usize;
    let mut projection_failures = 0usize;
    let mut unsafe_footholds = 0usize;
    let mut min_cone_margin_planned: Option<f64> = None;
    let mut min_cone_margin_projected: Option<f64> = None;
    let mut max_ratio_planned = 0.0f64;
    let mut max_ratio_projected = 0.0f64;
    let mut slip_events = 0usize;
    let mut max_hf_err = 0.0f64;
    let mut min_zmp: Option<f64> = None;
    let mut vel_sq = 0.0;
    let mut pitch_range = [f64::INFINITY, f64::NEG_INFINITY];
    let mut planned_pitch_range = [f64::INFINITY, f64::NEG_INFINITY];
    let mut max_vz_late = 0.0f64;
    let mut early_touchdowns = 0usize;
    let mut late_touchdowns = 0usize;
    let mut fall_reason: Option<String> = None;
    let mut ticks_done = 0u64;

    let mut handle = |resp: PlanResponse,
                      active: &mut Option<ActivePlan>,
                      cycles: &mut Vec<CycleRecord>,
                      legs: &mut [LegState; NUM_LEGS],
                      stage_now: u64| {
        unsafe_footholds += resp.unsafe_footholds;
        if let Some(rec) = resp.record {
            if rec.status == "ok" {
                min_cone_margin_planned = min_opt(min_cone_margin_planned, rec.min_constraint_margin);
            }
            cycles.push(rec);
        }
        match resp.plan {
            Some(plan) => {
                let ap = ActivePlan { plan, stage: resp.stage };
                let (j, _) = ap.at(stage_now);
                for i in 0..NUM_LEGS {
                    if let LegState::Swing { spec, .. } = &mut legs[i] {
                        if !ap.plan.params[j].contact[i] {
                            spec.touchdown = ap.plan.params[j].foot_pos[i];
                        }
                    }
                }
                *active = Some(ap);
            }
            None => planner_failures += 1,
        }
    };

    // first plan, synchronous in both modes
    let mut active: Option<ActivePlan> = None;
    let first = planner.plan(PlanRequest {
        stage: 0,
        x: measure(&x, &mut rng),
        feet,
        legs: report(&legs),
        cmd: cfg.commands.at(0.0),
    });
    handle(first, &mut active, &mut cycles, &mut legs, 0);
    if active.is_none() {
        return Err(SimError::InvalidConfig("the first planning cycle failed".into()));
    }

    let (req_tx, req_rx) = mpsc::channel::<PlanRequest>();
    let (resp_tx, resp_rx) = mpsc::channel::<PlanResponse>();
    let mut local_planner = Some(planner);
    let worker = if cfg.threaded {
        let mut p = local_planner.take().expect("planner not yet moved");
        Some(std::thread::spawn(move || {
            while let Ok(req) = req_rx.recv() {
                if resp_tx.send(p.plan(req)).is_err() {
                    break;
                }
            }
        }))
    } else {
        drop(req_rx);
        drop(resp_tx);
        None
    };
    let mut pending = false;
    let mut previous_f = ControlVector::zeros();
    let n_ticks = (cfg.duration * cfg.wbc_hz).round() as u64;
    let loop_start = Instant::now();

    for tick in 0..n_ticks {
        let t = tick as f64 * dt;
        let stage = tick / ratio;
        let sub = (tick % ratio) as usize;
        let cmd = cfg.commands.at(t);

        if cfg.threaded {
            let due = loop_start + Duration::from_secs_f64(t);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
            while let Ok(resp) = resp_rx.try_recv() {
                pending = false;
                handle(resp, &mut active, &mut cycles, &mut legs, stage);
            }
        }
        if sub == 0 && stage > 0 && stage.is_multiple_of(replan_every) {
            let req = PlanRequest { stage, x: measure(&x, &mut rng), feet, legs: report(&legs), cmd };
            if cfg.threaded {
                if !pending {
                    pending = req_tx.send(req).is_ok();
                }
            } else if let Some(p) = local_planner.as_mut() {
                let resp = p.plan(req);
                handle(resp, &mut active, &mut cycles, &mut legs, stage);
            }
        }

        let ap = active.as_ref().expect("a plan exists after the first cycle");
        let (j, inside) = ap.at(stage);
        let a_plan = &ap.plan.params[j];
        let x_d = if inside {
            interpolate_state(&ap.plan.x[j], &ap.plan.x[j + 1], sub, ratio as usize)
        } else {
            *ap.plan.x.last().expect("non-empty plan")
        };
        let u_d = ap.plan.u[j];

        // lift-offs and stance bookkeeping
        for i in 0..NUM_LEGS {
            if let LegState::Stance { early } = legs[i] {
                if a_plan.contact[i] {
                    legs[i] = LegState::Stance { early: false };
                } else if !early {
                    legs[i] = LegState::Swing {
                        spec: SwingSpec {
                            liftoff: feet[i],
                            touchdown: a_plan.foot_pos[i],
                            height: cfg.swing_height,
                            duration: cfg.reference.gait.swing_time(i),
                        },
                        ticks: 0,
                        descending_from: None,
                    };
                }
            }
        }
        let contact: [bool; NUM_LEGS] = legs.map(|l| matches!(l, LegState::Stance { .. }));

        // whole-body control
        let x_meas = measure(&x, &mut rng);
        let pc: Vec3 = x_meas.fixed_rows::<3>(0).into();
        let p_cf: [Vec3; NUM_LEGS] = feet.map(|f| f - pc);
        let mut normals = [Vec3::z(); NUM_LEGS];
        let mut true_normals = [Vec3::z(); NUM_LEGS];
        for i in 0..NUM_LEGS {
            normals[i] = map.normal_at(feet[i].x, feet[i].y)?;
            true_normals[i] = truth.normal_at(feet[i].x, feet[i].y)?;
        }
        let params = StageParams { foot_pos: feet, contact, normals };
        let projected = if contact.iter().any(|c| *c) {
            feedback_wrench(&x_d, &x_meas, &cfg.wbc)
                .map(|fb| feedforward_wrench(&u_d, &p_cf, &a_plan.contact) + fb)
                .and_then(|w| project_wrench_to_grf(&w, &p_cf, &params, &u_d, &cfg.ocp, &cfg.wbc, &cfg.solver))
        } else {
            Ok(ControlVector::zeros())
        };
        let mut f = match projected {
            Ok(f) => f,
            Err(_) => {
                projection_failures += 1;
                previous_f
            }
        };
        for i in (0..NUM_LEGS).filter(|&i| !contact[i]) {
            f.fixed_rows_mut::<3>(3 * i).fill(0.0);
        }
        previous_f = f;

        // cone bookkeeping
        if let Ok(m) = constraint_margin(&params, &f, &cfg.ocp) {
            min_cone_margin_projected = min_opt(min_cone_margin_projected, m);
        }
        for i in (0..NUM_LEGS).filter(|&i| contact[i]) {
            let fi = leg_force(&f, i);
            if let Some(r) = cone_ratio(&fi, &normals[i]) {
                max_ratio_projected = max_ratio_projected.max(r);
            }
            if a_plan.contact[i] {
                if let Some(r) = cone_ratio(&leg_force(&u_d, i), &a_plan.normals[i]) {
                    max_ratio_planned = max_ratio_planned.max(r);
                }
            }
            let frame = contact_frame(&true_normals[i])?;
            let local = frame.transpose() * fi;
            if local.z < -SLIP_TOLERANCE || local.x.hypot(local.y) > cfg.ocp.mu[i] * local.z + SLIP_TOLERANCE {
                slip_events += 1;
            }
        }

        // plant step
        let external = cfg
            .disturbances
            .iter()
            .filter(|d| d.active(t))
            .fold(Vec3::zeros(), |acc, d| acc + Vec3::from(d.force));
        let plant = Plant { model: &plant_model, external };
        x = step(&plant, &x, &f, &params, &plant_integrator)?;

        // swing feet and touchdowns
        let next_stage = (tick + 1) / ratio;
        let (j_next, _) = ap.at(next_stage);
        let planned_next = ap.plan.params[j_next].contact;
        for i in 0..NUM_LEGS {
            if let LegState::Swing { spec, ticks, descending_from } = &mut legs[i] {
                *ticks += 1;
                let elapsed = *ticks as f64 * dt;
                let end = elapsed >= spec.duration - 1e-9;
                let (pos, touched) = match descending_from {
                    Some(p) => {
                        let p = *p - Vec3::new(0.0, 0.0, cfg.plant.descent_speed * dt);
                        let ground = truth.height_at(p.x, p.y)?;
                        (p, p.z <= ground)
                    }
                    None => {
                        let (p, _) = swing_position(spec, elapsed);
                        let ground = truth.height_at(p.x, p.y)?;
                        let descending = elapsed > 0.5 * spec.duration;
                        (p, (descending && p.z <= ground) || (end && p.z <= ground + 1e-6))
                    }
                };
                if touched {
                    let ground = truth.height_at(pos.x, pos.y)?;
                    if !end {
                        early_touchdowns += 1;
                    } else if descending_from.is_some() {
                        late_touchdowns += 1;
                    }
                    feet[i] = Vec3::new(pos.x, pos.y, ground);
                    legs[i] = LegState::Stance { early: !planned_next[i] };
                } else {
                    feet[i] = pos;
                    if end && descending_from.is_none() {
                        *descending_from = Some(pos);
                    } else if let Some(d) = descending_from {
                        *d = pos;
                    }
                }
            }
        }
        ticks_done = tick + 1;

        // metrics
        let t_next = (tick + 1) as f64 * dt;
        let yaw = x[8];
        let (sy, cy) = yaw.sin_cos();
        let cmd_c = cmd.capped(cfg.reference.max_speed, cfg.reference.max_yaw_rate);
        let v_cmd = [cy * cmd_c.vx - sy * cmd_c.vy, sy * cmd_c.vx + cy * cmd_c.vy];
        vel_sq += (x[3] - v_cmd[0]).powi(2) + (x[4] - v_cmd[1]).powi(2);
        pitch_range = [pitch_range[0].min(x[7]), pitch_range[1].max(x[7])];
        planned_pitch_range = [planned_pitch_range[0].min(x_d[7]), planned_pitch_range[1].max(x_d[7])];
        if t_next > 2.0 {
            max_vz_late = max_vz_late.max(x[5].abs());
        }
        let stance_xy: Vec<[f64; 2]> =
            (0..NUM_LEGS).filter(|&i| contact[i]).map(|i| [feet[i].x, feet[i].y]).collect();
        let zmp = zmp_from_forces(&f, &feet, &contact)
            .and_then(|z| zmp_margin(&stance_xy, z).ok());
        if let Some(m) = zmp {
            min_zmp = Some(min_zmp.map_or(m, |v: f64| v.min(m)));
        }
        if let Ok(hf) = hip_to_foot_com_frame(&x, &feet, &model) {
            for i in (0..NUM_LEGS).filter(|&i| contact[i]) {
                max_hf_err = max_hf_err.max((hf[i].z - p_hf_ref[i].z).abs());
            }
        }
        trace.push(TraceRow {
            t: t_next,
            state: std::array::from_fn(|k| x[k]),
            planned_pitch: x_d[7],
            forces: std::array::from_fn(|k| f[k]),
            contact,
            foot_z: feet.map(|p| p.z),
            zmp_margin: zmp,
            command: [cmd.vx, cmd.vy, cmd.yaw_rate],
        });

        // fall detection
        if !x.iter().all(|v| v.is_finite()) {
            fall_reason = Some(format!("state diverged at t = {t_next:.3} s"));
        } else if x[6].abs() > cfg.limits.max_tilt || x[7].abs() > cfg.limits.max_tilt {
            fall_reason = Some(format!("tilt limit exceeded at t = {t_next:.3} s"));
        } else {
            let stance: Vec<usize> = (0..NUM_LEGS).filter(|&i| contact[i]).collect();
            if !stance.is_empty() {
                let ground = stance.iter().map(|&i| feet[i].z).sum::<f64>() / stance.len() as f64;
                let h = x[2] - ground;
                if h < cfg.limits.height_range[0] || h > cfg.limits.height_range[1] {
                    fall_reason = Some(format!("base height {h:.3} m out of range at t = {t_next:.3} s"));
                }
            }
            let r = rotation_matrix(&x.fixed_rows::<3>(6).into());
            let pc: Vec3 = x.fixed_rows::<3>(0).into();
            let reach = cfg.geometry.max_reach() + cfg.limits.reach_margin;
            for &i in &stance {
                let hip = pc + r * (model.com_to_base + model.hip_offsets[i]);
                if (feet[i] - hip).norm() > reach && fall_reason.is_none() {
                    fall_reason = Some(format!("leg {i} over-extended at t = {t_next:.3} s"));
                }
            }
        }
        if fall_reason.is_some() {
            break;
        }
    }
    drop(req_tx);
    if let Some(w) = worker {
        let _ = w.join();
    }

    let n = ticks_done.max(1) as f64;
    let (fb_mean, fb_max) = mean_max(cycles.iter().map(|c| c.feedback_ms));
    let (prep_mean, prep_max) = mean_max(cycles.iter().map(|c| c.preparation_ms));
    let metrics = Metrics {
        completed: fall_reason.is_none(),
        fall_reason,
        sim_time: ticks_done as f64 * dt,
        planner_cycles: cycles.len(),
        planner_failures,
        projection_failures,
        velocity_rms: (vel_sq / n).sqrt(),
        min_zmp_margin: min_zmp,
        max_cone_ratio_planned: max_ratio_planned,
        max_cone_ratio_projected: max_ratio_projected,
        min_cone_margin_planned,
        min_cone_margin_projected,
        slip_events,
        max_hip_foot_z_error: max_hf_err,
        pitch_range,
        planned_pitch_range,
        final_position: [x[0], x[1], x[2]],
        xy_drift: (x[0] - cfg.start[0]).hypot(x[1] - cfg.start[1]),
        max_vertical_speed_after_transient: max_vz_late,
        unsafe_footholds,
        early_touchdowns,
        late_touchdowns,
    };
    Ok(RunLog {
        cycles,
        trace,
        summary: Summary {
            name: cfg.name.clone(),
            metrics,
            timing: Timing {
                feedback_ms_mean: fb_mean,
                feedback_ms_max: fb_max,
                preparation_ms_mean: prep_mean,
                preparation_ms_max: prep_max,
                wall_s: wall.elapsed().as_secs_f64(),
            },
        },
    })
}

/// Baseline and ablated summaries of a matched pair of runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ablation: Ablation,
    pub baseline: Summary,
    pub ablated: Summary,
}

/// Runs `cfg` as is and with one feature changed.
pub fn ablate(cfg: &SimConfig, ablation: Ablation) -> Result<(RunLog, RunLog), SimError> {
    let baseline = run(cfg)?;
    let ablated = run(&ablation.apply(cfg))?;
    Ok((baseline, ablated))
}
