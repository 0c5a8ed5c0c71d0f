use proptest::prelude::*;
use quadruped_nmpc::terrain::{build_scenario, ChimneyAxis, HeightMap, Pallet, Surface, TerrainSpec};

fn surface() -> impl Strategy<Value = Surface> {
    prop_oneof![
        Just(Surface::Flat),
        (0.0..1.0f64, 0.2..1.5f64, 0.02..0.2f64)
            .prop_map(|(start, length, height)| Surface::Pallets { pallets: vec![Pallet { start, length, height }] }),
        (10.0..60.0f64, 0.0..0.3f64).prop_map(|(wall_angle_deg, floor_half_width)| Surface::Chimney {
            wall_angle_deg,
            floor_half_width,
            axis: ChimneyAxis::X
        }),
        (any::<u64>(), 0.01..0.1f64, 0.1..0.5f64).prop_map(|(seed, amplitude, cell)| Surface::Rough { seed, amplitude, cell }),
    ]
}

fn map(surface: Surface, resolution: f64) -> HeightMap {
    build_scenario(&TerrainSpec { x_range: [-1.0, 2.0], y_range: [-1.0, 1.0], resolution, surface }).unwrap()
}

proptest! {
    #[test]
    fn height_is_continuous_across_cells(surface in surface(), res in 0.02..0.08f64, x in -0.9..1.9f64, y in -0.9..0.9f64) {
        let m = map(surface, res);
        // bilinear interpolation is Lipschitz with the steepest cell slope
        let max_jump = m.heights.iter().fold(0.0f64, |a, h| a.max(h.abs())) * 2.0;
        let eps = 1e-9;
        let a = m.height_at(x, y).unwrap();
        let b = m.height_at(x + eps, y + eps).unwrap();
        prop_assert!((a - b).abs() <= max_jump / res * 4.0 * eps + 1e-12);
        // exactly on a cell boundary the two neighbouring cells agree
        let ix = ((x - m.origin.x) / res).floor();
        let xb = m.origin.x + ix * res;
        let left = m.height_at(xb - eps, y).unwrap();
        let right = m.height_at(xb + eps, y).unwrap();
        prop_assert!((left - right).abs() <= max_jump / res * 4.0 * eps + 1e-12);
    }

    #[test]
    fn normals_point_up(surface in surface(), x in -0.9..1.9f64, y in -0.9..0.9f64) {
        let m = map(surface, 0.04);
        let n = m.normal_at(x, y).unwrap();
        prop_assert!(n.z > 0.0);
        prop_assert!((n.norm() - 1.0).abs() < 1e-12);
    }
}
