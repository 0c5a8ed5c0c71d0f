//! Three-joint leg kinematics and the mobility factor.
//!
//! Joint order is HAA (hip abduction/adduction about the leg's X axis), HFE
//! (hip flexion/extension) and KFE (knee), the last two about the leg's Y axis.
//! With all joints at zero the leg hangs straight down:
//!
//! ```text
//! p = Rx(q_haa) [ (0, d, 0) + Ry(q_hfe) ( (0, 0, -l_upper) + Ry(q_kfe) (0, 0, -l_lower) ) ]
//! ```
//!
//! where `d` is the signed lateral HAA offset (positive for left legs). The
//! inverse kinematics selects the branch with a negative knee angle.
//!
//! The mobility factor scores a configuration as `beta V / V_range - gamma E / E_range`
//! where `V` and `E` are the volume and eccentricity of the manipulability
//! ellipsoid, both derived from the eigenvalues of `(J J^T)^-1`.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Mat3, Vec3};

/// Eigenvalues of `J J^T` below this value are treated as singular.
pub const SINGULARITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LegError {
    #[error("foot position ({x:.3}, {y:.3}, {z:.3}) is outside the leg workspace")]
    Unreachable { x: f64, y: f64, z: f64 },
    #[error("leg Jacobian is singular (smallest eigenvalue of J J^T = {min_eigenvalue:e})")]
    SingularJacobian { min_eigenvalue: f64 },
    #[error("no grid node of the workspace is reachable")]
    EmptyWorkspace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LegGeometry {
    pub l_upper: f64,
    pub l_lower: f64,
    /// Signed lateral offset between the HAA and HFE axes.
    pub haa_offset: f64,
    /// `[min, max]` per joint in HAA, HFE, KFE order.
    pub joint_limits: [[f64; 2]; 3],
}

impl Default for LegGeometry {
    fn default() -> Self {
        Self {
            l_upper: 0.35,
            l_lower: 0.346,
            haa_offset: 0.08,
            joint_limits: [[-0.9, 0.9], [-1.22, 1.22], [-2.44, -0.36]],
        }
    }
}

impl LegGeometry {
    /// Geometry mirrored about the sagittal plane (left leg to right leg).
    pub fn mirrored(&self) -> Self {
        let [lo, hi] = self.joint_limits[0];
        let mut g = *self;
        g.haa_offset = -self.haa_offset;
        g.joint_limits[0] = [-hi, -lo];
        g
    }

    /// Geometry for leg `i` in LF, RF, LH, RH order, taking `self` as a left leg.
    pub fn for_leg(&self, i: usize) -> Self {
        if i % 2 == 1 {
            self.mirrored()
        } else {
            *self
        }
    }

    pub fn max_reach(&self) -> f64 {
        self.l_upper + self.l_lower
    }

    pub fn within_limits(&self, q: &JointConfig) -> bool {
        q.q.iter()
            .zip(self.joint_limits.iter())
            .all(|(v, [lo, hi])| *v >= *lo - 1e-12 && *v <= *hi + 1e-12)
    }
}

/// Joint angles `(HAA, HFE, KFE)` in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointConfig {
    pub q: Vec3,
}

impl JointConfig {
    pub fn new(haa: f64, hfe: f64, kfe: f64) -> Self {
        Self { q: Vec3::new(haa, hfe, kfe) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MobilityWeights {
    pub beta: f64,
    pub gamma: f64,
    /// Normalization range of the ellipsoid volume.
    pub v_range: f64,
    /// Normalization range of the ellipsoid eccentricity.
    pub e_range: f64,
}

/// Which matrix the ellipsoid volume is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EllipsoidMatrix {
    /// Product of the eigenvalues of `(J J^T)^-1`.
    #[default]
    InverseGram,
    /// Product of the eigenvalues of `J J^T`.
    Gram,
}

/// Sagittal-plane quantities shared by FK and the Jacobian.
struct Sagittal {
    px: f64,
    pz: f64,
    dpx: [f64; 2],
    dpz: [f64; 2],
}

fn sagittal(q: &Vec3, g: &LegGeometry) -> Sagittal {
    let (s1, c1) = q[1].sin_cos();
    let (s12, c12) = (q[1] + q[2]).sin_cos();
    Sagittal {
        px: -g.l_upper * s1 - g.l_lower * s12,
        pz: -g.l_upper * c1 - g.l_lower * c12,
        dpx: [-g.l_upper * c1 - g.l_lower * c12, -g.l_lower * c12],
        dpz: [g.l_upper * s1 + g.l_lower * s12, g.l_lower * s12],
    }
}

/// Hip-to-foot position in the hip frame.
pub fn forward_kinematics(q: &JointConfig, geom: &LegGeometry) -> Vec3 {
    let s = sagittal(&q.q, geom);
    let (sa, ca) = q.q[0].sin_cos();
    let d = geom.haa_offset;
    Vec3::new(s.px, d * ca - s.pz * sa, d * sa + s.pz * ca)
}

/// Joint angles reaching `p_hf` below the hip, knee-negative branch.
pub fn inverse_kinematics(p_hf: &Vec3, geom: &LegGeometry) -> Result<JointConfig, LegError> {
    let unreachable = || LegError::Unreachable { x: p_hf.x, y: p_hf.y, z: p_hf.z };
    let d = geom.haa_offset;
    let r2 = p_hf.y * p_hf.y + p_hf.z * p_hf.z;
    if r2 < d * d {
        return Err(unreachable());
    }
    let len = (r2 - d * d).sqrt();
    let mut haa = p_hf.z.atan2(p_hf.y) - (-len).atan2(d);
    haa = (haa + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
    let dist = p_hf.x.hypot(len);
    let (l1, l2) = (geom.l_upper, geom.l_lower);
    if dist > l1 + l2 + 1e-12 || dist < (l1 - l2).abs() - 1e-12 {
        return Err(unreachable());
    }
    let cos_knee = ((dist * dist - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let kfe = -cos_knee.acos();
    let hfe = (-p_hf.x).atan2(len) - (l2 * kfe.sin()).atan2(l1 + l2 * kfe.cos());
    Ok(JointConfig::new(haa, hfe, kfe))
}

/// Foot Jacobian `d p_hf / d q`.
pub fn jacobian(q: &JointConfig, geom: &LegGeometry) -> Mat3 {
    let s = sagittal(&q.q, geom);
    let (sa, ca) = q.q[0].sin_cos();
    let d = geom.haa_offset;
    Mat3::new(
        0.0,
        s.dpx[0],
        s.dpx[1],
        -d * sa - s.pz * ca,
        -s.dpz[0] * sa,
        -s.dpz[1] * sa,
        d * ca - s.pz * sa,
        s.dpz[0] * ca,
        s.dpz[1] * ca,
    )
}

/// Volume and eccentricity of the manipulability ellipsoid.
pub fn ellipsoid_volume_and_eccentricity(j: &Mat3) -> Result<(f64, f64), LegError> {
    ellipsoid_measures(j, EllipsoidMatrix::InverseGram)
}

/// Volume and eccentricity using the chosen ellipsoid matrix.
pub fn ellipsoid_measures(j: &Mat3, matrix: EllipsoidMatrix) -> Result<(f64, f64), LegError> {
    let gram = j * j.transpose();
    let eig = SymmetricEigen::new(gram).eigenvalues;
    let min = eig.min();
    let max = eig.max();
    if min <= SINGULARITY_FLOOR || !min.is_finite() {
        return Err(LegError::SingularJacobian { min_eigenvalue: min });
    }
    let product = eig.product();
    let volume = match matrix {
        EllipsoidMatrix::InverseGram => 1.0 / product,
        EllipsoidMatrix::Gram => product,
    };
    Ok((volume, max / min))
}

/// `beta V / V_range - gamma E / E_range` at configuration `q`.
pub fn mobility_factor(
    q: &JointConfig,
    geom: &LegGeometry,
    w: &MobilityWeights,
) -> Result<f64, LegError> {
    mobility_factor_with(q, geom, w, EllipsoidMatrix::InverseGram)
}

pub fn mobility_factor_with(
    q: &JointConfig,
    geom: &LegGeometry,
    w: &MobilityWeights,
    matrix: EllipsoidMatrix,
) -> Result<f64, LegError> {
    let (v, e) = ellipsoid_measures(&jacobian(q, geom), matrix)?;
    Ok(score(v, e, w))
}

fn score(v: f64, e: f64, w: &MobilityWeights) -> f64 {
    w.beta * v / w.v_range - w.gamma * e / w.e_range
}

/// Axis-aligned grid of foot positions in the hip frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceGrid {
    pub min: Vec3,
    pub max: Vec3,
    pub resolution: f64,
}

impl WorkspaceGrid {
    /// Box enclosing everything the leg can reach below the hip.
    pub fn reachable_box(geom: &LegGeometry, resolution: f64) -> Self {
        let r = geom.max_reach() + geom.haa_offset.abs();
        let r = (r / resolution).ceil() * resolution;
        Self { min: Vec3::new(-r, -r, -r), max: Vec3::new(r, r, 0.0), resolution }
    }

    pub fn counts(&self) -> [usize; 3] {
        std::array::from_fn(|k| {
            ((self.max[k] - self.min[k]) / self.resolution + 1e-9).floor() as usize + 1
        })
    }

    pub fn len(&self) -> usize {
        self.counts().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Node with multi-index `(ix, iy, iz)`.
    pub fn node(&self, idx: [usize; 3]) -> Vec3 {
        Vec3::from_fn(|k, _| self.min[k] + idx[k] as f64 * self.resolution)
    }

    /// Nodes in x-major, z-minor order.
    pub fn nodes(&self) -> impl Iterator<Item = Vec3> + '_ {
        let [nx, ny, nz] = self.counts();
        (0..nx).flat_map(move |ix| {
            (0..ny).flat_map(move |iy| (0..nz).map(move |iz| self.node([ix, iy, iz])))
        })
    }
}

/// One evaluated node of the mobility field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub position: Vec3,
    pub volume: f64,
    pub eccentricity: f64,
    pub mobility: f64,
}

/// Result of the workspace search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilityCalibration {
    /// Hip-to-foot offset maximizing the mobility factor.
    pub offset: Vec3,
    pub peak: f64,
    pub weights: MobilityWeights,
    pub evaluated_nodes: usize,
    pub skipped_nodes: usize,
}

/// Ellipsoid measures at a foot position, or `None` if the node is outside the
/// workspace, violates joint limits or is singular.
pub fn node_measures(p: &Vec3, geom: &LegGeometry, matrix: EllipsoidMatrix) -> Option<(f64, f64)> {
    let q = inverse_kinematics(p, geom).ok()?;
    if !geom.within_limits(&q) {
        return None;
    }
    ellipsoid_measures(&jacobian(&q, geom), matrix).ok()
}

/// Evaluates the mobility field over `grid`, normalizing by the observed ranges.
pub fn mobility_field(
    geom: &LegGeometry,
    beta: f64,
    gamma: f64,
    grid: &WorkspaceGrid,
    matrix: EllipsoidMatrix,
) -> Result<(Vec<FieldSample>, MobilityWeights, usize), LegError> {
    let mut samples = Vec::new();
    let mut skipped = 0;
    for p in grid.nodes() {
        match node_measures(&p, geom, matrix) {
            Some((volume, eccentricity)) => {
                samples.push(FieldSample { position: p, volume, eccentricity, mobility: 0.0 })
            }
            None => skipped += 1,
        }
    }
    if samples.is_empty() {
        return Err(LegError::EmptyWorkspace);
    }
    let range = |f: fn(&FieldSample) -> f64| {
        let (lo, hi) = samples
            .iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let r = hi - lo;
        if r > 0.0 {
            r
        } else {
            1.0
        }
    };
    let weights = MobilityWeights {
        beta,
        gamma,
        v_range: range(|s| s.volume),
        e_range: range(|s| s.eccentricity),
    };
    for s in samples.iter_mut() {
        s.mobility = score(s.volume, s.eccentricity, &weights);
    }
    Ok((samples, weights, skipped))
}

/// Grid argmax of the mobility factor; ties keep the first node in grid order.
pub fn find_max_mobility_offset(
    geom: &LegGeometry,
    beta: f64,
    gamma: f64,
    grid: &WorkspaceGrid,
) -> Result<MobilityCalibration, LegError> {
    find_max_mobility_offset_with(geom, beta, gamma, grid, EllipsoidMatrix::InverseGram)
}

pub fn find_max_mobility_offset_with(
    geom: &LegGeometry,
    beta: f64,
    gamma: f64,
    grid: &WorkspaceGrid,
    matrix: EllipsoidMatrix,
) -> Result<MobilityCalibration, LegError> {
    let (samples, weights, skipped) = mobility_field(geom, beta, gamma, grid, matrix)?;
    let mut best = &samples[0];
    for s in &samples[1..] {
        if s.mobility > best.mobility {
            best = s;
        }
    }
    Ok(MobilityCalibration {
        offset: best.position,
        peak: best.mobility,
        weights,
        evaluated_nodes: samples.len(),
        skipped_nodes: skipped,
    })
}

/// Mobility factor along a vertical line below the hip at `(x, y)`.
pub fn vertical_sweep(
    geom: &LegGeometry,
    weights: &MobilityWeights,
    xy: [f64; 2],
    z_values: &[f64],
    matrix: EllipsoidMatrix,
) -> Vec<(f64, Option<f64>)> {
    z_values
        .iter()
        .map(|&z| {
            let p = Vec3::new(xy[0], xy[1], z);
            (z, node_measures(&p, geom, matrix).map(|(v, e)| score(v, e, weights)))
        })
        .collect()
}
