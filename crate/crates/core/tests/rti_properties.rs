mod common;

use proptest::prelude::*;
use quadruped_nmpc::ocp::constraint_margin;
use quadruped_nmpc::qp::SolverOptions;
use quadruped_nmpc::rti::{Phase, RtiController, RtiError};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn planned_forces_stay_in_the_pyramid(
        dz in -0.03..0.03f64,
        dv in prop::array::uniform3(-0.2..0.2f64),
        dang in prop::array::uniform3(-0.05..0.05f64),
    ) {
        let (cfg, model, refs, mut x0) = common::hover(20);
        x0[2] += dz;
        for i in 0..3 {
            x0[3 + i] += dv[i];
            x0[6 + i] += dang[i];
        }
        let mut rti = RtiController::new(cfg.clone(), model, SolverOptions::default());
        for _ in 0..5 {
            rti.prepare(refs.clone()).unwrap();
            let plan = rti.feedback(&x0).unwrap();
            for (u, a) in plan.u.iter().zip(&plan.params) {
                prop_assert!(constraint_margin(a, u, &cfg).unwrap() >= -1e-6);
            }
            prop_assert!((plan.x[0] - x0).amax() < 1e-9);
        }
    }

    #[test]
    fn phases_alternate(extra_prepares in 0..3usize) {
        let (cfg, model, refs, x0) = common::hover(5);
        let mut rti = RtiController::new(cfg, model, SolverOptions::default());
        prop_assert!(matches!(rti.feedback(&x0), Err(RtiError::PhaseViolation)));
        for _ in 0..=extra_prepares {
            rti.prepare(refs.clone()).unwrap();
            prop_assert_eq!(rti.phase(), Phase::Prepared);
        }
        rti.feedback(&x0).unwrap();
        prop_assert_eq!(rti.phase(), Phase::Consumed);
        prop_assert!(matches!(rti.feedback(&x0), Err(RtiError::PhaseViolation)));
    }
}
