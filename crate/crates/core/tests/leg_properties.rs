use proptest::prelude::*;
use quadruped_nmpc::leg::{
    ellipsoid_volume_and_eccentricity, forward_kinematics, inverse_kinematics, jacobian, JointConfig, LegGeometry,
};
use quadruped_nmpc::model::Mat3;

/// Joint angles inside the default limits, knee kept away from full extension.
fn joints() -> impl Strategy<Value = JointConfig> {
    (-0.9..0.9f64, -1.2..1.2f64, -2.4..-0.4f64).prop_map(|(a, b, c)| JointConfig::new(a, b, c))
}

fn geometry() -> impl Strategy<Value = LegGeometry> {
    prop_oneof![Just(LegGeometry::default()), Just(LegGeometry::default().mirrored())]
}

proptest! {
    #[test]
    fn ik_inverts_fk(q in joints(), geom in geometry()) {
        let sagittal = forward_kinematics(&JointConfig::new(0.0, q.q.y, q.q.z), &geom);
        prop_assume!(sagittal.z < 0.0);
        let p = forward_kinematics(&q, &geom);
        let back = inverse_kinematics(&p, &geom).unwrap();
        prop_assert!((forward_kinematics(&back, &geom) - p).amax() < 1e-9);
        prop_assert!((back.q - q.q).amax() < 1e-7);
    }

    #[test]
    fn ellipsoid_measures_are_well_formed(q in joints(), geom in geometry()) {
        let (v, e) = ellipsoid_volume_and_eccentricity(&jacobian(&q, &geom)).unwrap();
        prop_assert!(v > 0.0);
        prop_assert!(e >= 1.0 - 1e-12);
    }

    #[test]
    fn ellipsoid_measures_ignore_frame_rotation(q in joints(), angles in prop::array::uniform3(-3.0..3.0f64), flip in any::<bool>()) {
        // V and E depend only on the singular values of J, so any orthogonal
        // change of the task frame, mirror included, leaves them unchanged.
        let j = jacobian(&q, &LegGeometry::default());
        let rot = nalgebra::Rotation3::from_euler_angles(angles[0], angles[1], angles[2]).into_inner();
        let mirror = if flip { Mat3::from_diagonal(&nalgebra::Vector3::new(1.0, -1.0, 1.0)) } else { Mat3::identity() };
        let (v0, e0) = ellipsoid_volume_and_eccentricity(&j).unwrap();
        let (v1, e1) = ellipsoid_volume_and_eccentricity(&(mirror * rot * j)).unwrap();
        prop_assert!((v0 - v1).abs() <= 1e-8 * v0);
        prop_assert!((e0 - e1).abs() <= 1e-8 * e0);
    }

    #[test]
    fn mirrored_leg_has_mirrored_measures(q in joints()) {
        let geom = LegGeometry::default();
        let mirrored_q = JointConfig::new(-q.q.x, q.q.y, q.q.z);
        let p = forward_kinematics(&q, &geom);
        let pm = forward_kinematics(&mirrored_q, &geom.mirrored());
        prop_assert!((p.x - pm.x).abs() < 1e-12 && (p.y + pm.y).abs() < 1e-12 && (p.z - pm.z).abs() < 1e-12);
        let (v0, e0) = ellipsoid_volume_and_eccentricity(&jacobian(&q, &geom)).unwrap();
        let (v1, e1) = ellipsoid_volume_and_eccentricity(&jacobian(&mirrored_q, &geom.mirrored())).unwrap();
        prop_assert!((v0 - v1).abs() <= 1e-8 * v0 && (e0 - e1).abs() <= 1e-8 * e0);
    }

    #[test]
    fn jacobian_matches_central_differences(q in joints(), geom in geometry()) {
        let j = jacobian(&q, &geom);
        let h = 1e-6;
        for k in 0..3 {
            let mut plus = q;
            plus.q[k] += h;
            let mut minus = q;
            minus.q[k] -= h;
            let col = (forward_kinematics(&plus, &geom) - forward_kinematics(&minus, &geom)) / (2.0 * h);
            prop_assert!((col - j.column(k)).amax() <= 1e-6 * j.amax().max(1.0));
        }
    }
}
