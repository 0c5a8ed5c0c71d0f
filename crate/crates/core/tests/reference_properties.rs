use proptest::prelude::*;
use quadruped_nmpc::model::{RobotModel, StateVector, Vec3, NUM_LEGS};
use quadruped_nmpc::ocp::default_hip_foot_reference;
use quadruped_nmpc::reference::{ReferenceConfig, ReferenceGenerator, UserCommand};
use quadruped_nmpc::terrain::HeightMap;

const TS: f64 = 0.04;

fn standing(model: &RobotModel) -> (StateVector, [Vec3; NUM_LEGS]) {
    let mut x = StateVector::zeros();
    x[2] = 0.55;
    let hf = default_hip_foot_reference();
    (x, std::array::from_fn(|i| model.hip_offsets[i] + hf[i] + Vec3::new(0.0, 0.0, 0.55)))
}

fn command() -> impl Strategy<Value = UserCommand> {
    (-0.3..0.3f64, -0.2..0.2f64, -0.3..0.3f64).prop_map(|(vx, vy, w)| UserCommand::new(vx, vy, w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn vertical_force_reference_carries_the_weight(cmd in command(), phase in 0.0..1.0f64) {
        let model = RobotModel::default();
        let (x, feet) = standing(&model);
        let map = HeightMap::flat([-5.0, 5.0], [-5.0, 5.0], 0.04);
        let mut gen = ReferenceGenerator::new(ReferenceConfig::default());
        gen.gait.phase = phase;
        let out = gen.generate(&x, &feet, &cmd, &map, &model, 50, TS, default_hip_foot_reference()).unwrap();
        for (u, a) in out.refs.u_ref.iter().zip(&out.refs.params) {
            let total: f64 = (0..NUM_LEGS).map(|i| u[3 * i + 2]).sum();
            prop_assert!(a.stance_count() > 0);
            prop_assert!((total - model.weight()).abs() <= 1e-9 * model.weight());
        }
    }

    #[test]
    fn stance_fraction_matches_duty(phase in 0.0..1.0f64, duty in 0.6..0.95f64) {
        let model = RobotModel::default();
        let (x, feet) = standing(&model);
        let map = HeightMap::flat([-5.0, 5.0], [-5.0, 5.0], 0.04);
        let mut cfg = ReferenceConfig::default();
        cfg.gait.duty = [duty; NUM_LEGS];
        let stages = (cfg.gait.cycle_time / TS).round() as usize;
        let mut gen = ReferenceGenerator::new(cfg);
        gen.gait.phase = phase;
        let out = gen.generate(&x, &feet, &UserCommand::default(), &map, &model, stages, TS, default_hip_foot_reference()).unwrap();
        for i in 0..NUM_LEGS {
            let stance = out.refs.params.iter().filter(|a| a.contact[i]).count() as f64;
            prop_assert!((stance - duty * stages as f64).abs() <= 1.0 + 1e-9, "leg {i}: {stance} of {stages}");
        }
    }

    #[test]
    fn footholds_move_only_at_liftoff(cmd in command(), phase in 0.0..1.0f64) {
        let model = RobotModel::default();
        let (x, feet) = standing(&model);
        let map = HeightMap::flat([-5.0, 5.0], [-5.0, 5.0], 0.04);
        let mut gen = ReferenceGenerator::new(ReferenceConfig::default());
        gen.gait.phase = phase;
        let out = gen.generate(&x, &feet, &cmd, &map, &model, 80, TS, default_hip_foot_reference()).unwrap();
        let p = &out.refs.params;
        for k in 1..p.len() {
            for i in 0..NUM_LEGS {
                if p[k].foot_pos[i] != p[k - 1].foot_pos[i] {
                    prop_assert!(p[k - 1].contact[i] && !p[k].contact[i], "leg {i} moved at stage {k} outside a lift-off");
                }
            }
        }
    }

    #[test]
    fn yaw_reference_integrates_the_command(cmd in command(), yaw0 in -3.0..3.0f64) {
        let model = RobotModel::default();
        let (mut x, feet) = standing(&model);
        x[8] = yaw0;
        let map = HeightMap::flat([-5.0, 5.0], [-5.0, 5.0], 0.04);
        let mut gen = ReferenceGenerator::new(ReferenceConfig::default());
        let out = gen.generate(&x, &feet, &cmd, &map, &model, 30, TS, default_hip_foot_reference()).unwrap();
        for (k, xr) in out.refs.x_ref.iter().enumerate() {
            prop_assert!((xr[8] - (yaw0 + k as f64 * TS * cmd.yaw_rate)).abs() < 1e-12);
        }
    }
}
