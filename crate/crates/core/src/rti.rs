//! Real-time iteration controller.
//!
//! Each sampling period is split into a preparation phase, which shifts the
//! guess, linearizes along it and assembles the QP, and a feedback phase,
//! which injects the measured state, solves the single QP and updates the
//! guess. Iterating both phases on a frozen problem is plain SQP, which
//! [`solve_to_convergence`] runs as a reference.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ControlVector, RobotModel, StageParams, StateVector};
use crate::ocp::{build_qp, constraint_margin, objective, OcpConfig, OcpError, ReferenceTrajectory, Trajectory};
use crate::qp::{QpError, QpSolution, QpSolver, QpSubproblem, SolverOptions};

#[derive(Debug, Error, Clone)]
pub enum RtiError {
    #[error("feedback requested before prepare")]
    PhaseViolation,
    #[error("SQP did not converge after {iterations} iterations (last step {step:e})")]
    NoConvergence { iterations: usize, step: f64 },
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Prepared,
    Consumed,
}

/// Full-horizon plan returned by the feedback phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub x: Vec<StateVector>,
    pub u: Vec<ControlVector>,
    pub params: Vec<StageParams>,
}

/// Per-cycle diagnostics, written as one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: u64,
    pub preparation_ms: f64,
    pub feedback_ms: f64,
    pub kkt_residual: f64,
    pub qp_iterations: usize,
    pub cost: f64,
    /// Smallest friction/bound row margin over the planned forces, in newtons.
    pub min_constraint_margin: f64,
    pub step_norm: f64,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct RtiController {
    pub cfg: OcpConfig,
    pub model: RobotModel,
    pub solver: QpSolver,
    pub warm_start: bool,
    guess: Option<Trajectory>,
    refs: Option<ReferenceTrajectory>,
    qp: Option<QpSubproblem>,
    phase: Phase,
    shift_pending: bool,
    cycle: u64,
    preparation_ms: f64,
    last_record: Option<CycleRecord>,
}

fn shift(traj: &mut Trajectory) {
    if traj.u.len() > 1 {
        traj.x.remove(0);
        traj.x.push(*traj.x.last().expect("non-empty"));
        traj.u.remove(0);
        traj.u.push(*traj.u.last().expect("non-empty"));
    }
}

fn apply_step(traj: &mut Trajectory, sol: &QpSolution) -> f64 {
    let mut norm = 0.0f64;
    for (x, dx) in traj.x.iter_mut().zip(&sol.dx) {
        for j in 0..x.len() {
            x[j] += dx[j];
            norm = norm.max(dx[j].abs());
        }
    }
    for (u, du) in traj.u.iter_mut().zip(&sol.du) {
        for j in 0..u.len() {
            u[j] += du[j];
            norm = norm.max(du[j].abs());
        }
    }
    norm
}

impl RtiController {
    pub fn new(cfg: OcpConfig, model: RobotModel, options: SolverOptions) -> Self {
        Self {
            cfg,
            model,
            solver: QpSolver::new(options),
            warm_start: false,
            guess: None,
            refs: None,
            qp: None,
            phase: Phase::Consumed,
            shift_pending: false,
            cycle: 0,
            preparation_ms: 0.0,
            last_record: None,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn guess(&self) -> Option<&Trajectory> {
        self.guess.as_ref()
    }

    pub fn prepared_qp(&self) -> Option<&QpSubproblem> {
        self.qp.as_ref()
    }

    /// Replaces the guess used by the next preparation without shifting it.
    pub fn set_guess(&mut self, guess: Trajectory) {
        self.guess = Some(guess);
        self.shift_pending = false;
    }

    pub fn last_record(&self) -> Option<&CycleRecord> {
        self.last_record.as_ref()
    }

    /// Shifts the guess once per consumed solution and assembles the QP.
    pub fn prepare(&mut self, refs: ReferenceTrajectory) -> Result<(), RtiError> {
        let start = Instant::now();
        refs.validate(self.cfg.horizon)?;
        let guess = match self.guess.take() {
            None => refs.as_guess(),
            Some(mut g) => {
                if self.shift_pending {
                    shift(&mut g);
                }
                g
            }
        };
        self.shift_pending = false;
        let x0 = guess.x[0];
        let result = build_qp(&guess, &refs, &x0, &self.cfg, &self.model);
        self.guess = Some(guess);
        let qp = result?;
        self.qp = Some(qp);
        self.refs = Some(refs);
        self.phase = Phase::Prepared;
        self.preparation_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(())
    }

    /// Injects the measured state, solves the prepared QP and updates the guess.
    pub fn feedback(&mut self, x0_hat: &StateVector) -> Result<Plan, RtiError> {
        if self.phase != Phase::Prepared {
            return Err(RtiError::PhaseViolation);
        }
        let start = Instant::now();
        self.phase = Phase::Consumed;
        self.shift_pending = true;
        self.cycle += 1;
        let qp = self.qp.as_mut().expect("prepared");
        let guess = self.guess.as_mut().expect("prepared");
        let refs = self.refs.as_ref().expect("prepared");
        let dx0 = x0_hat - guess.x[0];
        qp.dx0 = nalgebra::DVector::from_column_slice(dx0.as_slice());
        let solved = if self.warm_start { self.solver.solve_warm(qp) } else { self.solver.solve(qp) };
        let sol = match solved {
            Ok(s) => s,
            Err(e) => {
                let (kkt, it) = match &e {
                    QpError::MaxIterations { kkt_residual, iterations, .. } => (*kkt_residual, *iterations),
                    _ => (f64::NAN, 0),
                };
                self.last_record = Some(CycleRecord {
                    cycle: self.cycle,
                    preparation_ms: self.preparation_ms,
                    feedback_ms: start.elapsed().as_secs_f64() * 1e3,
                    kkt_residual: kkt,
                    qp_iterations: it,
                    cost: f64::NAN,
                    min_constraint_margin: f64::NAN,
                    step_norm: f64::NAN,
                    status: e.to_string(),
                });
                return Err(e.into());
            }
        };
        let step_norm = apply_step(guess, &sol);
        let feedback_ms = start.elapsed().as_secs_f64() * 1e3;
        let plan = Plan { x: guess.x.clone(), u: guess.u.clone(), params: refs.params.clone() };
        let cost = objective(guess, refs, &self.cfg, &self.model).unwrap_or(f64::NAN);
        let mut margin = f64::INFINITY;
        for (u, a) in plan.u.iter().zip(&plan.params) {
            if let Ok(m) = constraint_margin(a, u, &self.cfg) {
                margin = margin.min(m);
            }
        }
        self.last_record = Some(CycleRecord {
            cycle: self.cycle,
            preparation_ms: self.preparation_ms,
            feedback_ms,
            kkt_residual: sol.kkt_residual,
            qp_iterations: sol.iterations,
            cost,
            min_constraint_margin: margin,
            step_norm,
            status: "ok".into(),
        });
        Ok(plan)
    }

    /// Drops the guess so the next preparation restarts from the references.
    pub fn reset(&mut self) {
        self.guess = None;
        self.qp = None;
        self.phase = Phase::Consumed;
        self.shift_pending = false;
    }
}

/// Full SQP on a fixed problem: repeats build and solve until the step max-norm
/// falls below `tol`. Starts from `guess` or from the references.
pub fn solve_to_convergence(
    refs: &ReferenceTrajectory,
    x0_hat: &StateVector,
    cfg: &OcpConfig,
    model: &RobotModel,
    options: &SolverOptions,
    guess: Option<Trajectory>,
    max_sqp_iter: usize,
    tol: f64,
) -> Result<(Trajectory, usize), RtiError> {
    let mut traj = guess.unwrap_or_else(|| refs.as_guess());
    let mut step = f64::INFINITY;
    for it in 1..=max_sqp_iter {
        let qp = build_qp(&traj, refs, x0_hat, cfg, model)?;
        let sol = crate::qp::solve(&qp, options)?;
        step = apply_step(&mut traj, &sol);
        if step < tol {
            return Ok((traj, it));
        }
    }
    Err(RtiError::NoConvergence { iterations: max_sqp_iter, step })
}
