use nmpc_web::{chimney_forces, mobility_slice, swing_trajectory};

#[test]
fn mobility_slice_has_a_reachable_peak() {
    let s = mobility_slice(0.08, 0.02, 1.0, 1.0, false).unwrap();
    assert_eq!(s.values().len(), s.nx() * s.nz());
    let best = s.best();
    assert!(best[2].is_finite());
    assert!(s.values().iter().filter(|v| v.is_finite()).all(|v| *v <= best[2]));
}

#[test]
fn swing_trajectory_connects_the_endpoints() {
    let pts = swing_trajectory(&[0.0, 0.0, 0.0], &[0.2, 0.0, 0.0], 0.1, 0.5, 10).unwrap();
    assert_eq!(pts.len(), 33);
    assert_eq!(&pts[..3], &[0.0, 0.0, 0.0]);
    assert!((pts[30] - 0.2).abs() < 1e-12 && pts[32].abs() < 1e-12);
    assert!((pts[17] - 0.1).abs() < 1e-12);
    assert!(swing_trajectory(&[0.0, 0.0], &[0.2, 0.0, 0.0], 0.1, 0.5, 10).is_err());
}

#[test]
fn chimney_forces_carry_the_weight_inside_the_pyramid() {
    let d = chimney_forces(35.0, 0.3, 0.7).unwrap();
    let fz: f64 = d.forces().chunks(3).map(|f| f[2]).sum();
    let weight = quadruped_nmpc::model::RobotModel::default().weight();
    assert!((fz - weight).abs() < 0.02 * weight, "fz {fz} vs {weight}");
    assert!(d.margin() >= -1e-6);
    assert!(d.ratios().iter().all(|r| *r <= 0.7 + 1e-6));
}
