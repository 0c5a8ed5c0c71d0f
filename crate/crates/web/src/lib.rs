//! WebAssembly bindings for the interactive demo page in `www/`.
//!
//! Each export takes plain numbers and returns a small result object whose
//! array getters hand back flat `Float64Array`s, so the page needs no glue
//! beyond the generated bindings. The operations themselves are plain Rust
//! functions; the exports in [`bindings`] only translate errors.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use quadruped_nmpc::leg::{node_measures, EllipsoidMatrix, LegGeometry};
use quadruped_nmpc::model::{ControlVector, RobotModel, StageParams, Vec3, NUM_LEGS};
use quadruped_nmpc::ocp::{constraint_margin, OcpConfig};
use quadruped_nmpc::qp::SolverOptions;
use quadruped_nmpc::terrain::{build_scenario, ChimneyAxis, Surface, TerrainSpec};
use quadruped_nmpc::wbc::{project_wrench_to_grf, swing_position, SwingSpec, WbcGains, Wrench};
use wasm_bindgen::prelude::*;

/// Mobility factor over a sagittal slice of the hip-frame workspace.
#[wasm_bindgen]
pub struct MobilitySlice {
    nx: usize,
    nz: usize,
    x_min: f64,
    z_min: f64,
    resolution: f64,
    values: Vec<f64>,
    best: [f64; 3],
}

#[wasm_bindgen]
impl MobilitySlice {
    #[wasm_bindgen(getter)]
    pub fn nx(&self) -> usize {
        self.nx
    }

    #[wasm_bindgen(getter)]
    pub fn nz(&self) -> usize {
        self.nz
    }

    #[wasm_bindgen(getter)]
    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    #[wasm_bindgen(getter)]
    pub fn z_min(&self) -> f64 {
        self.z_min
    }

    #[wasm_bindgen(getter)]
    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    /// Row-major in z then x; `NaN` marks unreachable or out-of-limit nodes.
    #[wasm_bindgen(getter)]
    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }

    /// `[x, z, mobility]` of the best node in the slice.
    #[wasm_bindgen(getter)]
    pub fn best(&self) -> Vec<f64> {
        self.best.to_vec()
    }
}

/// Evaluates `beta V / V_range - gamma E / E_range` on the plane `y = const`
/// of the left-front leg, with ranges taken over the slice itself.
pub fn mobility_slice(y: f64, resolution: f64, beta: f64, gamma: f64, gram: bool) -> Result<MobilitySlice, String> {
    if !(resolution > 0.0) {
        return Err(String::from("resolution must be positive"));
    }
    let geom = LegGeometry::default();
    let matrix = if gram { EllipsoidMatrix::Gram } else { EllipsoidMatrix::InverseGram };
    let reach = geom.max_reach() + geom.haa_offset.abs();
    let n = (reach / resolution).ceil() as usize;
    let (nx, nz) = (2 * n + 1, n + 1);
    let x_min = -(n as f64) * resolution;
    let z_min = -(n as f64) * resolution;
    let mut measures = vec![None; nx * nz];
    for iz in 0..nz {
        for ix in 0..nx {
            let p = Vec3::new(x_min + ix as f64 * resolution, y, z_min + iz as f64 * resolution);
            measures[iz * nx + ix] = node_measures(&p, &geom, matrix);
        }
    }
    let found: Vec<(f64, f64)> = measures.iter().flatten().copied().collect();
    if found.is_empty() {
        return Err(String::from("no reachable node in this slice"));
    }
    let span = |f: fn(&(f64, f64)) -> f64| {
        let lo = found.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = found.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            hi - lo
        } else {
            1.0
        }
    };
    let (v_range, e_range) = (span(|m| m.0), span(|m| m.1));
    let mut best = [0.0, 0.0, f64::NEG_INFINITY];
    let values = measures
        .iter()
        .enumerate()
        .map(|(k, m)| match m {
            Some((v, e)) => {
                let score = beta * v / v_range - gamma * e / e_range;
                if score > best[2] {
                    best = [x_min + (k % nx) as f64 * resolution, z_min + (k / nx) as f64 * resolution, score];
                }
                score
            }
            None => f64::NAN,
        })
        .collect();
    Ok(MobilitySlice { nx, nz, x_min, z_min, resolution, values, best })
}

/// Swing-foot positions, `samples + 1` points flattened as `x, y, z`.
pub fn swing_trajectory(
    liftoff: &[f64],
    touchdown: &[f64],
    height: f64,
    duration: f64,
    samples: usize,
) -> Result<Vec<f64>, String> {
    if liftoff.len() != 3 || touchdown.len() != 3 {
        return Err(String::from("lift-off and touchdown need three coordinates"));
    }
    if !(duration > 0.0) || samples == 0 {
        return Err(String::from("duration and sample count must be positive"));
    }
    let spec = SwingSpec {
        liftoff: Vec3::from_column_slice(liftoff),
        touchdown: Vec3::from_column_slice(touchdown),
        height,
        duration,
    };
    Ok((0..=samples)
        .flat_map(|k| {
            let p = swing_position(&spec, duration * k as f64 / samples as f64).0;
            [p.x, p.y, p.z]
        })
        .collect())
}

/// Contact forces distributing the robot weight over four feet in a chimney.
#[wasm_bindgen]
pub struct ForceDistribution {
    feet: Vec<f64>,
    normals: Vec<f64>,
    forces: Vec<f64>,
    ratios: Vec<f64>,
    margin: f64,
}

#[wasm_bindgen]
impl ForceDistribution {
    /// World foot positions, `x, y, z` per leg.
    #[wasm_bindgen(getter)]
    pub fn feet(&self) -> Vec<f64> {
        self.feet.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn normals(&self) -> Vec<f64> {
        self.normals.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn forces(&self) -> Vec<f64> {
        self.forces.clone()
    }

    /// Tangential over normal force per leg.
    #[wasm_bindgen(getter)]
    pub fn ratios(&self) -> Vec<f64> {
        self.ratios.clone()
    }

    /// Smallest friction-pyramid row margin in newtons.
    #[wasm_bindgen(getter)]
    pub fn margin(&self) -> f64 {
        self.margin
    }
}

/// Feet at `+-stance_half_width` across a chimney with walls inclined by
/// `wall_angle_deg`; the weight is spread by the whole-body force projection
/// under a friction pyramid of coefficient `mu`.
pub fn chimney_forces(wall_angle_deg: f64, stance_half_width: f64, mu: f64) -> Result<ForceDistribution, String> {
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let map = build_scenario(&TerrainSpec {
        x_range: [-1.0, 1.0],
        y_range: [-1.0, 1.0],
        resolution: 0.01,
        surface: Surface::Chimney { wall_angle_deg, floor_half_width: 0.1, axis: ChimneyAxis::X },
    })
    .map_err(|e| err(&e))?;
    let model = RobotModel::default();
    let ocp = OcpConfig { mu: [mu; NUM_LEGS], ..Default::default() };
    let mut params = StageParams { contact: [true; NUM_LEGS], ..Default::default() };
    for i in 0..NUM_LEGS {
        let x = model.hip_offsets[i].x;
        let y = if i % 2 == 0 { stance_half_width } else { -stance_half_width };
        let z = map.height_at(x, y).map_err(|e| err(&e))?;
        params.foot_pos[i] = Vec3::new(x, y, z);
        params.normals[i] = map.normal_at(x, y).map_err(|e| err(&e))?;
    }
    let ground = params.foot_pos.iter().map(|p| p.z).sum::<f64>() / NUM_LEGS as f64;
    let com = Vec3::new(0.0, 0.0, ground + 0.55);
    let p_cf: [Vec3; NUM_LEGS] = std::array::from_fn(|i| params.foot_pos[i] - com);
    let mut wrench = Wrench::zeros();
    wrench[2] = model.weight();
    let mut u_d = ControlVector::zeros();
    for i in 0..NUM_LEGS {
        u_d[3 * i + 2] = model.weight() / NUM_LEGS as f64;
    }
    let f = project_wrench_to_grf(&wrench, &p_cf, &params, &u_d, &ocp, &WbcGains::default(), &SolverOptions::default())
        .map_err(|e| err(&e))?;
    let margin = constraint_margin(&params, &f, &ocp).map_err(|e| err(&e))?;
    let ratios = (0..NUM_LEGS)
        .map(|i| {
            let fi = f.fixed_rows::<3>(3 * i).into_owned();
            let n = params.normals[i];
            let normal = fi.dot(&n);
            (fi - n * normal).norm() / normal.max(f64::EPSILON)
        })
        .collect();
    let flat = |v: &[Vec3; NUM_LEGS]| v.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    Ok(ForceDistribution {
        feet: flat(&params.foot_pos),
        normals: flat(&params.normals),
        forces: f.as_slice().to_vec(),
        ratios,
        margin,
    })
}

pub mod bindings {
    use super::{ForceDistribution, MobilitySlice};
    use wasm_bindgen::prelude::*;

    #[wasm_bindgen(js_name = mobilitySlice)]
    pub fn mobility_slice(y: f64, resolution: f64, beta: f64, gamma: f64, gram: bool) -> Result<MobilitySlice, JsError> {
        super::mobility_slice(y, resolution, beta, gamma, gram).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = swingTrajectory)]
    pub fn swing_trajectory(
        liftoff: &[f64],
        touchdown: &[f64],
        height: f64,
        duration: f64,
        samples: usize,
    ) -> Result<Vec<f64>, JsError> {
        super::swing_trajectory(liftoff, touchdown, height, duration, samples).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = chimneyForces)]
    pub fn chimney_forces(wall_angle_deg: f64, stance_half_width: f64, mu: f64) -> Result<ForceDistribution, JsError> {
        super::chimney_forces(wall_angle_deg, stance_half_width, mu).map_err(|e| JsError::new(&e))
    }
}
