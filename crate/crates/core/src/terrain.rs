//! Synthetic 2.5D heightmaps and scenario builders.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Vec3;

pub type Vec2 = Vector2<f64>;

/// Default cell size in meters.
pub const DEFAULT_RESOLUTION: f64 = 0.04;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TerrainError {
    #[error("query ({x:.3}, {y:.3}) is outside the heightmap")]
    OutOfMap { x: f64, y: f64 },
    #[error("invalid terrain spec: {0}")]
    InvalidSpec(String),
}

/// Gridded terrain elevation; node `(ix, iy)` sits at `origin + resolution * (ix, iy)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightMap {
    pub origin: Vec2,
    pub resolution: f64,
    pub nx: usize,
    pub ny: usize,
    /// Row-major in `y`: index `iy * nx + ix`.
    pub heights: Vec<f64>,
    /// Short description of how the map was built.
    pub description: String,
}

impl HeightMap {
    pub fn from_fn(
        origin: Vec2,
        resolution: f64,
        nx: usize,
        ny: usize,
        description: impl Into<String>,
        f: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let mut heights = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                heights.push(f(
                    origin.x + ix as f64 * resolution,
                    origin.y + iy as f64 * resolution,
                ));
            }
        }
        Self { origin, resolution, nx, ny, heights, description: description.into() }
    }

    pub fn flat(x_range: [f64; 2], y_range: [f64; 2], resolution: f64) -> Self {
        let spec = TerrainSpec { x_range, y_range, resolution, surface: Surface::Flat };
        build_scenario(&spec).expect("flat spec is valid")
    }

    pub fn max_corner(&self) -> Vec2 {
        self.origin
            + Vec2::new((self.nx - 1) as f64, (self.ny - 1) as f64) * self.resolution
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let hi = self.max_corner();
        let eps = 1e-9;
        x >= self.origin.x - eps && x <= hi.x + eps && y >= self.origin.y - eps && y <= hi.y + eps
    }

    pub fn node(&self, ix: usize, iy: usize) -> f64 {
        self.heights[iy * self.nx + ix]
    }

    /// Bilinear interpolation of the node heights.
    pub fn height_at(&self, x: f64, y: f64) -> Result<f64, TerrainError> {
        if !self.contains(x, y) || !x.is_finite() || !y.is_finite() {
            return Err(TerrainError::OutOfMap { x, y });
        }
        let fx = ((x - self.origin.x) / self.resolution).clamp(0.0, (self.nx - 1) as f64);
        let fy = ((y - self.origin.y) / self.resolution).clamp(0.0, (self.ny - 1) as f64);
        let ix = (fx.floor() as usize).min(self.nx.saturating_sub(2));
        let iy = (fy.floor() as usize).min(self.ny.saturating_sub(2));
        let tx = fx - ix as f64;
        let ty = fy - iy as f64;
        let ix1 = (ix + 1).min(self.nx - 1);
        let iy1 = (iy + 1).min(self.ny - 1);
        let h00 = self.node(ix, iy);
        let h10 = self.node(ix1, iy);
        let h01 = self.node(ix, iy1);
        let h11 = self.node(ix1, iy1);
        Ok((1.0 - ty) * ((1.0 - tx) * h00 + tx * h10) + ty * ((1.0 - tx) * h01 + tx * h11))
    }

    /// Unit surface normal from a central-difference gradient of [`Self::height_at`].
    pub fn normal_at(&self, x: f64, y: f64) -> Result<Vec3, TerrainError> {
        if !self.contains(x, y) {
            return Err(TerrainError::OutOfMap { x, y });
        }
        let h = 0.5 * self.resolution;
        let hi = self.max_corner();
        let slope = |lo_q: f64, hi_q: f64, eval: &dyn Fn(f64) -> Result<f64, TerrainError>| {
            let a = lo_q.max(0.0);
            let b = hi_q.max(0.0);
            let (qa, qb) = (a, b);
            let fa = eval(-qa)?;
            let fb = eval(qb)?;
            Ok::<f64, TerrainError>((fb - fa) / (qa + qb))
        };
        let dx = slope(
            h.min(x - self.origin.x),
            h.min(hi.x - x),
            &|d| self.height_at(x + d, y),
        )?;
        let dy = slope(
            h.min(y - self.origin.y),
            h.min(hi.y - y),
            &|d| self.height_at(x, y + d),
        )?;
        Ok(Vec3::new(-dx, -dy, 1.0).normalize())
    }

    /// Square patch of `2 * half + 1` nodes per side centered on `(x, y)`,
    /// sampled at `resolution`.
    pub fn patch(&self, x: f64, y: f64, half: usize, resolution: f64) -> Result<HeightMap, TerrainError> {
        let n = 2 * half + 1;
        let origin = Vec2::new(x - half as f64 * resolution, y - half as f64 * resolution);
        let mut heights = Vec::with_capacity(n * n);
        for iy in 0..n {
            for ix in 0..n {
                let px = origin.x + ix as f64 * resolution;
                let py = origin.y + iy as f64 * resolution;
                heights.push(self.height_at(px, py)?);
            }
        }
        Ok(HeightMap { origin, resolution, nx: n, ny: n, heights, description: "patch".into() })
    }

    /// CSV with one `x,y,z` row per node.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,z\n");
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let x = self.origin.x + ix as f64 * self.resolution;
                let y = self.origin.y + iy as f64 * self.resolution;
                let _ = writeln!(out, "{x:.4},{y:.4},{:.6}", self.node(ix, iy));
            }
        }
        out
    }
}

/// A box obstacle spanning the full map width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pallet {
    /// X coordinate of the leading edge.
    pub start: f64,
    pub length: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChimneyAxis {
    /// Walls rise with `|y|`; the corridor runs along x.
    #[default]
    X,
    /// Walls rise with `|x|`; the corridor runs along y.
    Y,
}

/// Terrain surface description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Surface {
    Flat,
    Pallets {
        pallets: Vec<Pallet>,
    },
    /// Pallets with random heights and gaps drawn from the given ranges.
    RandomPallets {
        seed: u64,
        first_start: f64,
        count: usize,
        length: f64,
        height_range: [f64; 2],
        gap_range: [f64; 2],
    },
    Chimney {
        wall_angle_deg: f64,
        floor_half_width: f64,
        #[serde(default)]
        axis: ChimneyAxis,
    },
    /// Smooth random bumps: uniform heights on a lattice of `cell` spacing,
    /// bilinearly interpolated.
    Rough {
        seed: u64,
        amplitude: f64,
        cell: f64,
    },
}

/// Scenario terrain: extent, resolution and surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerrainSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    pub surface: Surface,
}

impl Default for TerrainSpec {
    fn default() -> Self {
        Self { x_range: [-2.0, 8.0], y_range: [-2.0, 2.0], resolution: DEFAULT_RESOLUTION, surface: Surface::Flat }
    }
}

fn default_resolution() -> f64 {
    DEFAULT_RESOLUTION
}

impl TerrainSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, TerrainError> {
        toml::from_str(text).map_err(|e| TerrainError::InvalidSpec(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TerrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TerrainError::InvalidSpec(e.to_string()))?;
        Self::from_toml_str(&text)
    }
}

/// Pallets drawn from a seeded generator.
pub fn random_pallets(
    seed: u64,
    first_start: f64,
    count: usize,
    length: f64,
    height_range: [f64; 2],
    gap_range: [f64; 2],
) -> Vec<Pallet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut start = first_start;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let height = rng.gen_range(height_range[0]..=height_range[1]);
        out.push(Pallet { start, length, height });
        start += length + rng.gen_range(gap_range[0]..=gap_range[1]);
    }
    out
}

fn pallet_height(pallets: &[Pallet], x: f64) -> f64 {
    pallets
        .iter()
        .filter(|p| x >= p.start - 1e-9 && x <= p.start + p.length + 1e-9)
        .map(|p| p.height)
        .fold(0.0, f64::max)
}

/// Builds the heightmap described by `spec`.
pub fn build_scenario(spec: &TerrainSpec) -> Result<HeightMap, TerrainError> {
    let invalid = |m: &str| Err(TerrainError::InvalidSpec(m.to_string()));
    if !(spec.resolution > 0.0) {
        return invalid("resolution must be positive");
    }
    if !(spec.x_range[1] > spec.x_range[0] && spec.y_range[1] > spec.y_range[0]) {
        return invalid("ranges must be increasing");
    }
    let nx = ((spec.x_range[1] - spec.x_range[0]) / spec.resolution + 1e-9).floor() as usize + 1;
    let ny = ((spec.y_range[1] - spec.y_range[0]) / spec.resolution + 1e-9).floor() as usize + 1;
    let origin = Vec2::new(spec.x_range[0], spec.y_range[0]);
    let res = spec.resolution;
    let map = match &spec.surface {
        Surface::Flat => HeightMap::from_fn(origin, res, nx, ny, "flat", |_, _| 0.0),
        Surface::Pallets { pallets } => {
            if pallets.iter().any(|p| !(p.length > 0.0) || !p.height.is_finite()) {
                return invalid("pallets need positive length and finite height");
            }
            let pallets = pallets.clone();
            HeightMap::from_fn(origin, res, nx, ny, "pallets", move |x, _| pallet_height(&pallets, x))
        }
        Surface::RandomPallets { seed, first_start, count, length, height_range, gap_range } => {
            if height_range[0] > height_range[1] || gap_range[0] > gap_range[1] || !(*length > 0.0) {
                return invalid("random pallet ranges must be ordered and length positive");
            }
            let pallets =
                random_pallets(*seed, *first_start, *count, *length, *height_range, *gap_range);
            HeightMap::from_fn(origin, res, nx, ny, "random pallets", move |x, _| {
                pallet_height(&pallets, x)
            })
        }
        Surface::Chimney { wall_angle_deg, floor_half_width, axis } => {
            if !(*wall_angle_deg > 0.0 && *wall_angle_deg < 90.0) || *floor_half_width < 0.0 {
                return invalid("chimney angle must lie in (0, 90) degrees");
            }
            let slope = wall_angle_deg.to_radians().tan();
            let w = *floor_half_width;
            let axis = *axis;
            HeightMap::from_fn(origin, res, nx, ny, "chimney", move |x, y| {
                let c = match axis {
                    ChimneyAxis::X => y,
                    ChimneyAxis::Y => x,
                };
                (c.abs() - w).max(0.0) * slope
            })
        }
        Surface::Rough { seed, amplitude, cell } => {
            if !(*cell > 0.0) || *amplitude < 0.0 {
                return invalid("rough terrain needs positive cell and nonnegative amplitude");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let lx = ((spec.x_range[1] - spec.x_range[0]) / cell).ceil() as usize + 2;
            let ly = ((spec.y_range[1] - spec.y_range[0]) / cell).ceil() as usize + 2;
            let lattice: Vec<f64> =
                (0..lx * ly).map(|_| rng.gen_range(-1.0..=1.0) * amplitude).collect();
            let cell = *cell;
            HeightMap::from_fn(origin, res, nx, ny, "rough", move |x, y| {
                let fx = (x - origin.x) / cell;
                let fy = (y - origin.y) / cell;
                let ix = (fx.floor() as usize).min(lx - 2);
                let iy = (fy.floor() as usize).min(ly - 2);
                let (tx, ty) = (fx - ix as f64, fy - iy as f64);
                let at = |i: usize, j: usize| lattice[j * lx + i];
                (1.0 - ty) * ((1.0 - tx) * at(ix, iy) + tx * at(ix + 1, iy))
                    + ty * ((1.0 - tx) * at(ix, iy + 1) + tx * at(ix + 1, iy + 1))
            })
        }
    };
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pallet_map() -> HeightMap {
        build_scenario(&TerrainSpec {
            x_range: [-1.0, 4.0],
            y_range: [-1.0, 1.0],
            resolution: 0.04,
            surface: Surface::Pallets { pallets: vec![Pallet { start: 1.0, length: 1.0, height: 0.13 }] },
        })
        .unwrap()
    }

    #[test]
    fn flat_map_is_level() {
        let m = HeightMap::flat([-1.0, 1.0], [-1.0, 1.0], 0.04);
        assert_eq!(m.height_at(0.13, -0.42).unwrap(), 0.0);
        assert!((m.normal_at(0.3, 0.3).unwrap() - Vec3::z()).amax() < 1e-15);
    }

    #[test]
    fn pallet_heights() {
        let m = pallet_map();
        assert!((m.height_at(1.5, 0.1).unwrap() - 0.13).abs() < 1e-12);
        // nodes at 0.96 (ground) and 1.00 (pallet)
        assert!((m.height_at(0.98, 0.0).unwrap() - 0.065).abs() < 1e-9);
        assert_eq!(m.height_at(2.5, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn chimney_wall_normals() {
        let s35 = 35f64.to_radians().sin();
        let c35 = 35f64.to_radians().cos();
        let spec = |axis| TerrainSpec {
            x_range: [-1.0, 1.0],
            y_range: [-1.0, 1.0],
            resolution: 0.04,
            surface: Surface::Chimney { wall_angle_deg: 35.0, floor_half_width: 0.1, axis },
        };
        let along_y = build_scenario(&spec(ChimneyAxis::Y)).unwrap();
        let n = along_y.normal_at(0.42, 0.0).unwrap();
        assert!((n - Vec3::new(-s35, 0.0, c35)).amax() < 1e-3);
        let n = along_y.normal_at(-0.42, 0.0).unwrap();
        assert!((n - Vec3::new(s35, 0.0, c35)).amax() < 1e-3);
        let along_x = build_scenario(&spec(ChimneyAxis::X)).unwrap();
        assert!((along_x.height_at(0.0, 0.5).unwrap() - 0.4 * 35f64.to_radians().tan()).abs() < 1e-9);
        let n = along_x.normal_at(0.0, 0.5).unwrap();
        assert!((n - Vec3::new(0.0, -s35, c35)).amax() < 1e-3);
    }

    #[test]
    fn out_of_map_queries_fail() {
        let m = pallet_map();
        assert!(matches!(m.height_at(5.0, 0.0), Err(TerrainError::OutOfMap { .. })));
        assert!(matches!(m.normal_at(0.0, -1.5), Err(TerrainError::OutOfMap { .. })));
    }

    #[test]
    fn rough_terrain_is_reproducible() {
        let spec = TerrainSpec {
            x_range: [0.0, 2.0],
            y_range: [0.0, 1.0],
            resolution: 0.04,
            surface: Surface::Rough { seed: 7, amplitude: 0.05, cell: 0.3 },
        };
        assert_eq!(build_scenario(&spec).unwrap(), build_scenario(&spec).unwrap());
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let text = r#"
            x_range = [-1.0, 6.0]
            y_range = [-1.5, 1.5]
            [surface]
            kind = "random-pallets"
            seed = 3
            first_start = 1.0
            count = 3
            length = 1.0
            height_range = [0.13, 0.17]
            gap_range = [0.2, 0.7]
        "#;
        let spec = TerrainSpec::from_toml_str(text).unwrap();
        assert_eq!(spec.resolution, DEFAULT_RESOLUTION);
        let pallets = random_pallets(3, 1.0, 3, 1.0, [0.13, 0.17], [0.2, 0.7]);
        for w in pallets.windows(2) {
            let gap = w[1].start - (w[0].start + w[0].length);
            assert!((0.2..=0.7).contains(&gap));
        }
        assert!(pallets.iter().all(|p| (0.13..=0.17).contains(&p.height)));
        assert!(build_scenario(&spec).is_ok());
    }
}
