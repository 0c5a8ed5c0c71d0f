mod common;

use common::{random_qp, QpShape};
use nalgebra::DVector;
use proptest::prelude::*;
use quadruped_nmpc::qp::{kkt_residual, solve, QpSolver, SolverOptions};

fn shape() -> impl Strategy<Value = QpShape> {
    (1..=6usize, 2..=4usize, 1..=3usize, 0..=6usize).prop_map(|(horizon, nx, nu, rows)| QpShape { horizon, nx, nu, rows })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solution_satisfies_dynamics(seed in any::<u64>(), shape in shape()) {
        let qp = random_qp(seed, shape);
        let sol = solve(&qp, &SolverOptions::default()).unwrap();
        prop_assert!((&sol.dx[0] - &qp.dx0).amax() <= 1e-8);
        for (k, s) in qp.stages.iter().enumerate() {
            let next = &s.a * &sol.dx[k] + &s.b * &sol.du[k] + &s.r;
            prop_assert!((next - &sol.dx[k + 1]).amax() <= 1e-8);
        }
        prop_assert!(kkt_residual(&qp, &sol) <= 1e-6);
    }

    #[test]
    fn solution_improves_on_feasible_origin(seed in any::<u64>(), shape in shape()) {
        let mut qp = random_qp(seed, shape);
        // make the zero step feasible: no defects, no initial offset, slack rows
        qp.dx0.fill(0.0);
        for s in qp.stages.iter_mut() {
            s.r.fill(0.0);
            s.h.iter_mut().for_each(|h| *h = h.abs());
        }
        qp.terminal.h.iter_mut().for_each(|h| *h = h.abs());
        let sol = solve(&qp, &SolverOptions::default()).unwrap();
        let n = qp.horizon();
        let zx: Vec<DVector<f64>> = (0..=n).map(|k| DVector::zeros(if k < n { qp.stages[k].nx() } else { qp.terminal.grad.len() })).collect();
        let zu: Vec<DVector<f64>> = qp.stages.iter().map(|s| DVector::zeros(s.nu())).collect();
        prop_assert!(qp.objective(&sol.dx, &sol.du) <= qp.objective(&zx, &zu) + 1e-9);
    }

    #[test]
    fn warm_start_is_not_much_slower(seed in any::<u64>(), shape in shape(), scale in 0.9..1.1f64) {
        let qp = random_qp(seed, shape);
        let mut perturbed = qp.clone();
        for s in perturbed.stages.iter_mut() {
            s.grad *= scale;
        }
        let mut solver = QpSolver::new(SolverOptions::default());
        solver.solve(&qp).unwrap();
        let warm = solver.solve_warm(&perturbed).unwrap();
        let cold = solve(&perturbed, &SolverOptions::default()).unwrap();
        prop_assert!(warm.iterations <= 2 * cold.iterations.max(1), "warm {} cold {}", warm.iterations, cold.iterations);
    }
}
