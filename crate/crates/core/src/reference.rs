//! Reference generation: gait scheduling, robocentric footholds and the
//! state and force references fed to the optimal control problem.
//!
//! The gait is a sawtooth stride phase `s` in `[0, 1)`. Leg `i` is in stance
//! when `s < o_i` or `s > o_i + (1 - D_i)`. Touchdown points are placed
//! relative to the hip at the lift-off stage, shifted along the commanded
//! velocity by `T_sw * alpha`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    euler_rates_from_body_rate, rotation_matrix, ControlVector, ModelError, RobotModel,
    StageParams, StateVector, Vec3, NUM_LEGS,
};
use crate::ocp::ReferenceTrajectory;
use crate::terrain::{HeightMap, TerrainError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReferenceError {
    #[error(transparent)]
    Terrain(#[from] TerrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no cell of the local map is far enough from an edge")]
    NoSafeCell,
    #[error("invalid gait or command: {0}")]
    Invalid(String),
}

/// Desired horizontal velocity in the heading frame and yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UserCommand {
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
}

impl UserCommand {
    pub fn new(vx: f64, vy: f64, yaw_rate: f64) -> Self {
        Self { vx, vy, yaw_rate }
    }

    /// Command with each component clamped to `[-limit, limit]`.
    pub fn capped(&self, max_speed: f64, max_yaw_rate: f64) -> Self {
        Self {
            vx: self.vx.clamp(-max_speed, max_speed),
            vy: self.vy.clamp(-max_speed, max_speed),
            yaw_rate: self.yaw_rate.clamp(-max_yaw_rate, max_yaw_rate),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaitSpec {
    /// Cycle duration in seconds.
    pub cycle_time: f64,
    pub duty: [f64; NUM_LEGS],
    /// Lift-off phase of each leg, LF, RF, LH, RH.
    pub offsets: [f64; NUM_LEGS],
}

impl Default for GaitSpec {
    /// Crawl: LH, LF, RH, RF swing in sequence.
    fn default() -> Self {
        Self { cycle_time: 3.2, duty: [0.85; NUM_LEGS], offsets: [0.3, 0.8, 0.05, 0.55] }
    }
}

impl GaitSpec {
    pub fn validate(&self) -> Result<(), ReferenceError> {
        let in_unit = |v: &f64| (0.0..1.0).contains(v);
        if !(self.cycle_time > 0.0) {
            return Err(ReferenceError::Invalid("cycle time must be positive".into()));
        }
        if !self.duty.iter().all(|d| *d > 0.0 && *d <= 1.0) || !self.offsets.iter().all(in_unit) {
            return Err(ReferenceError::Invalid("duty factors must lie in (0, 1] and offsets in [0, 1)".into()));
        }
        Ok(())
    }

    /// Swing duration of leg `i` in seconds.
    pub fn swing_time(&self, i: usize) -> f64 {
        (1.0 - self.duty[i]) * self.cycle_time
    }

    /// Phase at which the swing of leg `i` ends.
    pub fn swing_end(&self, i: usize) -> f64 {
        self.offsets[i] + 1.0 - self.duty[i]
    }

    pub fn flags(&self, s: f64) -> [bool; NUM_LEGS] {
        std::array::from_fn(|i| contact_flag(s, self.offsets[i], self.duty[i]))
    }
}

/// Stance flag of a leg with offset `o` and duty factor `d` at phase `s`.
/// A duty factor of one keeps the leg in stance. A swing window running past
/// the end of the cycle continues at phase zero.
pub fn contact_flag(s: f64, o: f64, d: f64) -> bool {
    let end = o + (1.0 - d);
    if d >= 1.0 {
        true
    } else if end < 1.0 {
        s < o || s > end
    } else {
        s < o && s > end - 1.0
    }
}

/// Stride phase in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GaitState {
    pub phase: f64,
    /// Completed cycles.
    pub cycles: u64,
}

impl GaitState {
    pub fn advance(&mut self, dt: f64, spec: &GaitSpec) {
        let next = self.phase + dt / spec.cycle_time;
        self.cycles += next.floor() as u64;
        self.phase = next.rem_euclid(1.0);
    }

    /// Phase `k` sampling intervals of length `ts` ahead.
    /// Rounded to 1e-9 so that phases landing on a schedule boundary compare exactly.
    pub fn phase_at(&self, k: usize, ts: f64, spec: &GaitSpec) -> f64 {
        let s = (self.phase + k as f64 * ts / spec.cycle_time).rem_euclid(1.0);
        ((s * 1e9).round() / 1e9).rem_euclid(1.0)
    }
}

/// Reconciles the planned contact state with measured contacts.
///
/// A swing leg touching down before its planned touchdown fast-forwards the
/// phase to the end of its swing; a leg planned in stance right after its
/// swing but not yet in contact holds the phase at the end of its swing.
pub fn resync_gait(
    gait: &GaitState,
    spec: &GaitSpec,
    planned: &[bool; NUM_LEGS],
    measured: &[bool; NUM_LEGS],
) -> GaitState {
    let mut out = *gait;
    for i in 0..NUM_LEGS {
        let end = spec.swing_end(i).rem_euclid(1.0);
        let since_end = (out.phase - end).rem_euclid(1.0);
        if !planned[i] && measured[i] {
            let to_end = (end - out.phase).rem_euclid(1.0);
            out.phase = end;
            if out.phase < gait.phase && to_end > 0.0 {
                out.cycles += 1;
            }
        } else if planned[i] && !measured[i] && since_end < 1.0 - spec.duty[i] {
            if out.phase < end {
                out.cycles = out.cycles.saturating_sub(1);
            }
            out.phase = end;
        }
    }
    out
}

/// Horizontal touchdown point relative to the hip, with the terrain height.
pub fn touchdown_point(
    hip_xy: [f64; 2],
    cmd_world: [f64; 2],
    yaw_rate: f64,
    swing_time: f64,
    alpha: f64,
    hip_offset_world: &Vec3,
    map: &HeightMap,
) -> Result<Vec3, ReferenceError> {
    let tangential = Vec3::new(0.0, 0.0, yaw_rate).cross(hip_offset_world);
    let x = hip_xy[0] + swing_time * alpha * (cmd_world[0] + tangential.x);
    let y = hip_xy[1] + swing_time * alpha * (cmd_world[1] + tangential.y);
    Ok(Vec3::new(x, y, map.height_at(x, y)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FootholdAdjustment {
    pub enabled: bool,
    /// Minimum distance from a height discontinuity.
    pub margin: f64,
    /// Height step between neighboring cells treated as a discontinuity.
    pub jump: f64,
    /// Patch half-width in cells.
    pub half_cells: usize,
    pub resolution: f64,
}

impl Default for FootholdAdjustment {
    fn default() -> Self {
        Self { enabled: true, margin: 0.08, jump: 0.05, half_cells: 7, resolution: 0.04 }
    }
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * d[0]).hypot(p[1] - a[1] - t * d[1])
}

/// Boundary segments between neighboring nodes whose heights differ by more than `jump`.
fn discontinuities(patch: &HeightMap, jump: f64) -> Vec<([f64; 2], [f64; 2])> {
    let r = patch.resolution;
    let pos = |ix: usize, iy: usize| [patch.origin.x + ix as f64 * r, patch.origin.y + iy as f64 * r];
    let mut edges = Vec::new();
    for iy in 0..patch.ny {
        for ix in 0..patch.nx {
            let p = pos(ix, iy);
            if ix + 1 < patch.nx && (patch.node(ix + 1, iy) - patch.node(ix, iy)).abs() > jump {
                let mx = p[0] + 0.5 * r;
                edges.push(([mx, p[1] - 0.5 * r], [mx, p[1] + 0.5 * r]));
            }
            if iy + 1 < patch.ny && (patch.node(ix, iy + 1) - patch.node(ix, iy)).abs() > jump {
                let my = p[1] + 0.5 * r;
                edges.push(([p[0] - 0.5 * r, my], [p[0] + 0.5 * r, my]));
            }
        }
    }
    edges
}

/// Moves a touchdown point away from height discontinuities of the local map.
pub fn adjust_foothold(
    p_td: &Vec3,
    patch: &HeightMap,
    margin: f64,
    jump: f64,
) -> Result<Vec3, ReferenceError> {
    let edges = discontinuities(patch, jump);
    let clearance = |p: [f64; 2]| {
        edges.iter().map(|(a, b)| point_segment_distance(p, *a, *b)).fold(f64::INFINITY, f64::min)
    };
    if clearance([p_td.x, p_td.y]) >= margin {
        return Ok(*p_td);
    }
    let mut best: Option<(f64, Vec3)> = None;
    for iy in 0..patch.ny {
        for ix in 0..patch.nx {
            let x = patch.origin.x + ix as f64 * patch.resolution;
            let y = patch.origin.y + iy as f64 * patch.resolution;
            if clearance([x, y]) < margin {
                continue;
            }
            let dist = (x - p_td.x).hypot(y - p_td.y);
            if best.is_none_or(|(d, _)| dist < d - 1e-12) {
                best = Some((dist, Vec3::new(x, y, patch.node(ix, iy))));
            }
        }
    }
    best.map(|(_, p)| p).ok_or(ReferenceError::NoSafeCell)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    pub gait: GaitSpec,
    /// Scaling between commanded velocity and step length.
    pub alpha: f64,
    pub foothold: FootholdAdjustment,
    pub max_speed: f64,
    pub max_yaw_rate: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            gait: GaitSpec::default(),
            alpha: 0.5,
            foothold: FootholdAdjustment::default(),
            max_speed: 0.5,
            max_yaw_rate: 0.5,
        }
    }
}

/// Output of one reference generation call.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedReference {
    pub refs: ReferenceTrajectory,
    /// Touchdown targets of the legs swinging at stage 0.
    pub swing_targets: [Option<Vec3>; NUM_LEGS],
    /// Foothold adjustments that found no safe cell.
    pub unsafe_footholds: usize,
}

/// Stateful reference generator: keeps the gait phase and the targets of the
/// current swings.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceGenerator {
    pub cfg: ReferenceConfig,
    pub gait: GaitState,
    pub swing_targets: [Option<Vec3>; NUM_LEGS],
}

impl ReferenceGenerator {
    pub fn new(cfg: ReferenceConfig) -> Self {
        Self { cfg, gait: GaitState::default(), swing_targets: [None; NUM_LEGS] }
    }

    pub fn planned_contacts(&self) -> [bool; NUM_LEGS] {
        self.cfg.gait.flags(self.gait.phase_at(0, 0.0, &self.cfg.gait))
    }

    pub fn advance(&mut self, dt: f64) {
        self.gait.advance(dt, &self.cfg.gait);
    }

    pub fn resync(&mut self, measured: &[bool; NUM_LEGS]) {
        let planned = self.planned_contacts();
        self.gait = resync_gait(&self.gait, &self.cfg.gait, &planned, measured);
    }

    fn footstep(
        &self,
        i: usize,
        base_xy: [f64; 2],
        yaw: f64,
        cmd_world: [f64; 2],
        cmd: &UserCommand,
        model: &RobotModel,
        map: &HeightMap,
        unsafe_count: &mut usize,
    ) -> Result<Vec3, ReferenceError> {
        let rz = rotation_matrix(&Vec3::new(0.0, 0.0, yaw));
        let offset = rz * (model.com_to_base + model.hip_offsets[i]);
        let hip = [base_xy[0] + offset.x, base_xy[1] + offset.y];
        let mut p = touchdown_point(
            hip,
            cmd_world,
            cmd.yaw_rate,
            self.cfg.gait.swing_time(i),
            self.cfg.alpha,
            &offset,
            map,
        )?;
        let fh = &self.cfg.foothold;
        if fh.enabled {
            if let Ok(patch) = map.patch(p.x, p.y, fh.half_cells, fh.resolution) {
                match adjust_foothold(&p, &patch, fh.margin, fh.jump) {
                    Ok(adj) => p = Vec3::new(adj.x, adj.y, map.height_at(adj.x, adj.y)?),
                    Err(_) => *unsafe_count += 1,
                }
            }
        }
        Ok(p)
    }

    /// Builds references for `horizon` stages from the measured state and feet.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        &mut self,
        x: &StateVector,
        feet: &[Vec3; NUM_LEGS],
        cmd: &UserCommand,
        map: &HeightMap,
        model: &RobotModel,
        horizon: usize,
        ts: f64,
        p_hf_ref: [Vec3; NUM_LEGS],
    ) -> Result<GeneratedReference, ReferenceError> {
        if horizon == 0 {
            return Err(ReferenceError::Invalid("horizon must be positive".into()));
        }
        let cmd = cmd.capped(self.cfg.max_speed, self.cfg.max_yaw_rate);
        let spec = self.cfg.gait;
        let flags: Vec<[bool; NUM_LEGS]> =
            (0..=horizon).map(|k| spec.flags(self.gait.phase_at(k, ts, &spec))).collect();

        // state references
        let yaw0 = x[8];
        let (sy, cy) = yaw0.sin_cos();
        let v_usr = [cy * cmd.vx - sy * cmd.vy, sy * cmd.vx + cy * cmd.vy];
        let euler_rate = euler_rates_from_body_rate(&Vec3::zeros(), &Vec3::new(0.0, 0.0, cmd.yaw_rate))?;
        let yaw_rate = euler_rate.z;
        let p0 = [x[0], x[1]];
        let mut x_ref = Vec::with_capacity(horizon + 1);
        let mut rel = [0.0, 0.0];
        let mut yaw = yaw0;
        for _ in 0..=horizon {
            let v = [v_usr[0] - cmd.yaw_rate * rel[1], v_usr[1] + cmd.yaw_rate * rel[0]];
            let mut xr = StateVector::zeros();
            xr[0] = p0[0] + rel[0];
            xr[1] = p0[1] + rel[1];
            xr[3] = v[0];
            xr[4] = v[1];
            xr[8] = yaw;
            xr[11] = cmd.yaw_rate;
            x_ref.push(xr);
            rel = [rel[0] + ts * v[0], rel[1] + ts * v[1]];
            yaw += ts * yaw_rate;
        }

        // footholds
        let mut unsafe_count = 0;
        let base_xy = |k: usize| {
            let off = rotation_matrix(&Vec3::new(0.0, 0.0, x_ref[k][8])) * model.com_to_base;
            [x_ref[k][0] + off.x, x_ref[k][1] + off.y]
        };
        let mut foot = *feet;
        for i in 0..NUM_LEGS {
            if flags[0][i] {
                self.swing_targets[i] = None;
            } else {
                if self.swing_targets[i].is_none() {
                    let t = self.footstep(i, base_xy(0), x_ref[0][8], v_usr, &cmd, model, map, &mut unsafe_count)?;
                    self.swing_targets[i] = Some(t);
                }
                foot[i] = self.swing_targets[i].expect("target set above");
            }
        }
        let mut params = Vec::with_capacity(horizon);
        let weight = model.weight();
        let mut u_ref = Vec::with_capacity(horizon);
        for k in 0..horizon {
            let contact = flags[k];
            let mut normals = [Vec3::z(); NUM_LEGS];
            for i in 0..NUM_LEGS {
                normals[i] = map.normal_at(foot[i].x, foot[i].y)?;
            }
            params.push(StageParams { foot_pos: foot, contact, normals });
            let stance = contact.iter().filter(|c| **c).count();
            let mut u = ControlVector::zeros();
            if stance > 0 {
                for i in (0..NUM_LEGS).filter(|&i| contact[i]) {
                    u[3 * i + 2] = weight / stance as f64;
                }
            }
            u_ref.push(u);
            for i in 0..NUM_LEGS {
                if contact[i] && !flags[k + 1][i] {
                    foot[i] = self.footstep(i, base_xy(k), x_ref[k][8], v_usr, &cmd, model, map, &mut unsafe_count)?;
                }
            }
        }
        // height reference: nominal leg height above the mean foot height
        let nominal = -p_hf_ref.iter().map(|p| p.z).sum::<f64>() / NUM_LEGS as f64;
        for k in 0..=horizon {
            let a = &params[k.min(horizon - 1)];
            x_ref[k][2] = a.foot_pos.iter().map(|p| p.z).sum::<f64>() / NUM_LEGS as f64 + nominal;
        }
        Ok(GeneratedReference {
            refs: ReferenceTrajectory { x_ref, u_ref, params, p_hf_ref },
            swing_targets: self.swing_targets,
            unsafe_footholds: unsafe_count,
        })
    }
}

/// One segment of a command script, active from `t` until the next segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandSegment {
    pub t: f64,
    #[serde(default)]
    pub vx: f64,
    #[serde(default)]
    pub vy: f64,
    #[serde(default)]
    pub yaw_rate: f64,
}

/// Piecewise-constant command sequence.
///
/// Text form: one `t vx vy yaw_rate` line per segment, times increasing,
/// `#` starts a comment.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CommandScript {
    pub segments: Vec<CommandSegment>,
}

impl CommandScript {
    pub fn constant(cmd: UserCommand) -> Self {
        Self { segments: vec![CommandSegment { t: 0.0, vx: cmd.vx, vy: cmd.vy, yaw_rate: cmd.yaw_rate }] }
    }

    pub fn parse(text: &str) -> Result<Self, ReferenceError> {
        let mut segments = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| ReferenceError::Invalid(format!("line {}: {e}", n + 1)))?;
            if vals.len() != 4 {
                return Err(ReferenceError::Invalid(format!("line {}: expected 4 numbers", n + 1)));
            }
            segments.push(CommandSegment { t: vals[0], vx: vals[1], vy: vals[2], yaw_rate: vals[3] });
        }
        let script = Self { segments };
        script.validate()?;
        Ok(script)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ReferenceError> {
        let text = std::fs::read_to_string(path).map_err(|e| ReferenceError::Invalid(e.to_string()))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ReferenceError> {
        for w in self.segments.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(ReferenceError::Invalid("segment times must increase".into()));
            }
        }
        if self.segments.iter().any(|s| ![s.t, s.vx, s.vy, s.yaw_rate].iter().all(|v| v.is_finite())) {
            return Err(ReferenceError::Invalid("non-finite command value".into()));
        }
        Ok(())
    }

    /// Command active at time `t` (zero before the first segment).
    pub fn at(&self, t: f64) -> UserCommand {
        self.segments
            .iter()
            .rev()
            .find(|s| s.t <= t)
            .map(|s| UserCommand::new(s.vx, s.vy, s.yaw_rate))
            .unwrap_or_default()
    }
}
