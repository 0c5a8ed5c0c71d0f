//! Shared fixtures for the integration tests: random OCP-structured QPs, an
//! exhaustive active-set oracle, a hover problem and finite differences.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use quadruped_nmpc::integrator::{step, IntegratorConfig};
use quadruped_nmpc::model::{ControlVector, Mat12, RobotModel, StageParams, StateVector, Vec3, NUM_LEGS};
use quadruped_nmpc::ocp::{default_hip_foot_reference, OcpConfig, ReferenceTrajectory};
use quadruped_nmpc::qp::{QpStage, QpSubproblem, QpTerminal};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dimensions of a generated QP.
#[derive(Debug, Clone, Copy)]
pub struct QpShape {
    pub horizon: usize,
    pub nx: usize,
    pub nu: usize,
    /// Inequality rows per stage, terminal stage included.
    pub rows: usize,
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-scale..scale))
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-scale..scale))
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let l = random_matrix(rng, n, n, 1.0);
    &l * l.transpose() + DMatrix::identity(n, n) * 0.5
}

/// Random strictly convex QP with stage structure. The problem is built around
/// a random trajectory that satisfies the dynamics, and every inequality row is
/// either tight or slack there, so the QP is always feasible.
pub fn random_qp(seed: u64, shape: QpShape) -> QpSubproblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let QpShape { horizon, nx, nu, rows } = shape;
    let xs: Vec<DVector<f64>> = (0..=horizon).map(|_| random_vector(&mut rng, nx, 1.0)).collect();
    let us: Vec<DVector<f64>> = (0..horizon).map(|_| random_vector(&mut rng, nu, 1.0)).collect();
    let slack = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.4) { 0.0 } else { rng.gen_range(0.0..1.0) };
    let mut stages = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let a = random_matrix(&mut rng, nx, nx, 0.8);
        let b = random_matrix(&mut rng, nx, nu, 1.0);
        let r = &xs[k + 1] - &a * &xs[k] - &b * &us[k];
        let c = random_matrix(&mut rng, rows, nx, 1.0);
        let d = random_matrix(&mut rng, rows, nu, 1.0);
        let h = DVector::from_fn(rows, |i, _| {
            let at = (c.row(i) * &xs[k])[0] + (d.row(i) * &us[k])[0];
            -at + slack(&mut rng)
        });
        stages.push(QpStage {
            hess: random_spd(&mut rng, nx + nu),
            grad: random_vector(&mut rng, nx + nu, 3.0),
            a,
            b,
            r,
            c,
            d,
            h,
        });
    }
    let c = random_matrix(&mut rng, rows, nx, 1.0);
    let h = DVector::from_fn(rows, |i, _| -(c.row(i) * &xs[horizon])[0] + slack(&mut rng));
    let terminal = QpTerminal { hess: random_spd(&mut rng, nx), grad: random_vector(&mut rng, nx, 3.0), c, h };
    QpSubproblem { stages, terminal, dx0: xs[0].clone() }
}

/// The QP in dense form over `z = (x_0, u_0, x_1, u_1, ..., x_N)`:
/// `min 1/2 z'Hz + g'z  s.t.  E z = e,  G z + h >= 0`.
pub struct DenseQp {
    pub hess: DMatrix<f64>,
    pub grad: DVector<f64>,
    pub eq: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq: DMatrix<f64>,
    pub ineq_off: DVector<f64>,
    /// Offsets of `x_k` (first `N + 1` entries) and `u_k` in `z`.
    pub x_at: Vec<usize>,
    pub u_at: Vec<usize>,
}

pub fn densify(qp: &QpSubproblem) -> DenseQp {
    let n = qp.horizon();
    let mut x_at = Vec::new();
    let mut u_at = Vec::new();
    let mut off = 0;
    for s in &qp.stages {
        x_at.push(off);
        u_at.push(off + s.nx());
        off += s.nx() + s.nu();
    }
    x_at.push(off);
    let nxn = qp.terminal.grad.len();
    let nz = off + nxn;
    let mut hess = DMatrix::zeros(nz, nz);
    let mut grad = DVector::zeros(nz);
    let n_eq = qp.dx0.len() + qp.stages.iter().map(|s| s.r.len()).sum::<usize>();
    let n_in = qp.stages.iter().map(|s| s.nc()).sum::<usize>() + qp.terminal.h.len();
    let mut eq = DMatrix::zeros(n_eq, nz);
    let mut eq_rhs = DVector::zeros(n_eq);
    let mut ineq = DMatrix::zeros(n_in, nz);
    let mut ineq_off = DVector::zeros(n_in);
    let (mut re, mut ri) = (0, 0);
    for i in 0..qp.dx0.len() {
        eq[(i, x_at[0] + i)] = 1.0;
        eq_rhs[i] = qp.dx0[i];
    }
    re += qp.dx0.len();
    for (k, s) in qp.stages.iter().enumerate() {
        let w = s.nx() + s.nu();
        hess.view_mut((x_at[k], x_at[k]), (w, w)).copy_from(&s.hess);
        grad.rows_mut(x_at[k], w).copy_from(&s.grad);
        let m = s.r.len();
        eq.view_mut((re, x_at[k]), (m, s.nx())).copy_from(&(-&s.a));
        eq.view_mut((re, u_at[k]), (m, s.nu())).copy_from(&(-&s.b));
        eq.view_mut((re, x_at[k + 1]), (m, m)).copy_from(&DMatrix::identity(m, m));
        eq_rhs.rows_mut(re, m).copy_from(&s.r);
        re += m;
        ineq.view_mut((ri, x_at[k]), (s.nc(), w)).copy_from(&s.constraint_matrix());
        ineq_off.rows_mut(ri, s.nc()).copy_from(&s.h);
        ri += s.nc();
    }
    hess.view_mut((x_at[n], x_at[n]), (nxn, nxn)).copy_from(&qp.terminal.hess);
    grad.rows_mut(x_at[n], nxn).copy_from(&qp.terminal.grad);
    let nt = qp.terminal.h.len();
    ineq.view_mut((ri, x_at[n]), (nt, nxn)).copy_from(&qp.terminal.c);
    ineq_off.rows_mut(ri, nt).copy_from(&qp.terminal.h);
    DenseQp { hess, grad, eq, eq_rhs, ineq, ineq_off, x_at, u_at }
}

/// Solves the dense QP by trying every active set and keeping the one whose
/// equality-constrained solution is primal and dual feasible.
pub fn enumerate_active_sets(dense: &DenseQp) -> Option<DVector<f64>> {
    let nz = dense.grad.len();
    let n_eq = dense.eq.nrows();
    let m = dense.ineq.nrows();
    assert!(m <= 20, "active-set enumeration is limited to 20 rows");
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1u32 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let nc = n_eq + active.len();
        if nc > nz {
            continue;
        }
        let dim = nz + nc;
        let mut kkt = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        kkt.view_mut((0, 0), (nz, nz)).copy_from(&dense.hess);
        rhs.rows_mut(0, nz).copy_from(&(-&dense.grad));
        for r in 0..n_eq {
            for c in 0..nz {
                kkt[(nz + r, c)] = dense.eq[(r, c)];
                kkt[(c, nz + r)] = dense.eq[(r, c)];
            }
            rhs[nz + r] = dense.eq_rhs[r];
        }
        for (j, &i) in active.iter().enumerate() {
            let r = nz + n_eq + j;
            for c in 0..nz {
                kkt[(r, c)] = dense.ineq[(i, c)];
                kkt[(c, r)] = dense.ineq[(i, c)];
            }
            rhs[r] = -dense.ineq_off[i];
        }
        let lu = kkt.lu();
        let Some(sol) = lu.solve(&rhs) else { continue };
        if !sol.iter().all(|v| v.is_finite()) {
            continue;
        }
        let z = sol.rows(0, nz).into_owned();
        // multipliers of `G z + h >= 0` enter the stationarity with a minus sign
        let dual_ok = active.iter().enumerate().all(|(j, _)| -sol[nz + n_eq + j] >= -1e-9);
        let slack = &dense.ineq * &z + &dense.ineq_off;
        let primal_ok = slack.iter().all(|s| *s >= -1e-9);
        if dual_ok && primal_ok {
            let f = 0.5 * z.dot(&(&dense.hess * &z)) + dense.grad.dot(&z);
            if best.as_ref().is_none_or(|(b, _)| f < *b) {
                best = Some((f, z));
            }
        }
    }
    best.map(|(_, z)| z)
}

/// Stacks a structured solution into the dense ordering.
pub fn stack_solution(dense: &DenseQp, dx: &[DVector<f64>], du: &[DVector<f64>]) -> DVector<f64> {
    let nz = dense.grad.len();
    let mut z = DVector::zeros(nz);
    for (k, x) in dx.iter().enumerate() {
        z.rows_mut(dense.x_at[k], x.len()).copy_from(x);
    }
    for (k, u) in du.iter().enumerate() {
        z.rows_mut(dense.u_at[k], u.len()).copy_from(u);
    }
    z
}

/// Standing robot at 0.55 m with the default hip-to-foot reference and the
/// equal-share hover forces.
pub fn hover(horizon: usize) -> (OcpConfig, RobotModel, ReferenceTrajectory, StateVector) {
    let model = RobotModel::default();
    let cfg = OcpConfig { horizon, ..Default::default() };
    let p_hf_ref = default_hip_foot_reference();
    let a = StageParams {
        foot_pos: std::array::from_fn(|i| model.hip_offsets[i] + p_hf_ref[i] + Vec3::new(0.0, 0.0, 0.55)),
        ..Default::default()
    };
    let mut x0 = StateVector::zeros();
    x0[2] = 0.55;
    let fz = model.weight() / 4.0;
    let u = ControlVector::from_fn(|i, _| if i % 3 == 2 { fz } else { 0.0 });
    let refs = ReferenceTrajectory { x_ref: vec![x0; horizon + 1], u_ref: vec![u; horizon], params: vec![a; horizon], p_hf_ref };
    (cfg, model, refs, x0)
}

/// Central finite differences of one integration step.
pub fn step_differences(
    model: &RobotModel,
    x: &StateVector,
    u: &ControlVector,
    a: &StageParams,
    cfg: &IntegratorConfig,
    eps: f64,
) -> (Mat12, Mat12) {
    let mut fa = Mat12::zeros();
    let mut fb = Mat12::zeros();
    for j in 0..12 {
        let mut e = StateVector::zeros();
        e[j] = eps;
        let plus = step(model, &(x + e), u, a, cfg).unwrap();
        let minus = step(model, &(x - e), u, a, cfg).unwrap();
        fa.set_column(j, &((plus - minus) / (2.0 * eps)));
        let mut e = ControlVector::zeros();
        e[j] = eps;
        let plus = step(model, x, &(u + e), a, cfg).unwrap();
        let minus = step(model, x, &(u - e), a, cfg).unwrap();
        fb.set_column(j, &((plus - minus) / (2.0 * eps)));
    }
    (fa, fb)
}

/// Random state, forces and stage parameters around a standing robot.
pub fn random_point(rng: &mut ChaCha8Rng) -> (StateVector, ControlVector, StageParams) {
    let model = RobotModel::default();
    let mut x = StateVector::zeros();
    for j in 0..3 {
        x[j] = rng.gen_range(-0.2..0.2);
        x[3 + j] = rng.gen_range(-0.5..0.5);
        x[6 + j] = rng.gen_range(-0.4..0.4);
        x[9 + j] = rng.gen_range(-1.0..1.0);
    }
    x[2] += 0.55;
    let mut a = StageParams::default();
    let mut u = ControlVector::zeros();
    for i in 0..NUM_LEGS {
        a.contact[i] = rng.gen_bool(0.75);
        a.foot_pos[i] = model.hip_offsets[i]
            + Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.05..0.05));
        let n = Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 1.0);
        a.normals[i] = n.normalize();
        u[3 * i] = rng.gen_range(-50.0..50.0);
        u[3 * i + 1] = rng.gen_range(-50.0..50.0);
        u[3 * i + 2] = rng.gen_range(0.0..400.0);
    }
    (x, u, a)
}
