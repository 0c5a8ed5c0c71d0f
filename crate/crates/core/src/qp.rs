//! Structured QP solver for optimal-control problems.
//!
//! The problem has stages `k = 0..N-1` with variables `z_k = (x_k, u_k)` and a
//! terminal state `x_N`:
//!
//! ```text
//! min  sum_k 1/2 z_k' H_k z_k + g_k' z_k  +  1/2 x_N' H_N x_N + g_N' x_N
//! s.t. x_0 = dx0
//!      x_{k+1} = A_k x_k + B_k u_k + r_k
//!      C_k x_k + D_k u_k + h_k >= 0,   C_N x_N + h_N >= 0
//! ```
//!
//! It is solved by a primal-dual interior point method whose Newton systems
//! are condensed onto the stage variables and factorized by a Riccati
//! recursion, with an optional Mehrotra predictor-corrector.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Data of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct QpStage {
    /// Hessian over `(x_k, u_k)`.
    pub hess: DMatrix<f64>,
    /// Gradient over `(x_k, u_k)`.
    pub grad: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub r: DVector<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl QpStage {
    pub fn nx(&self) -> usize {
        self.a.ncols()
    }
    pub fn nu(&self) -> usize {
        self.b.ncols()
    }
    pub fn nc(&self) -> usize {
        self.h.len()
    }
    /// Inequality matrix over `(x_k, u_k)`.
    pub fn constraint_matrix(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.nc(), self.nx() + self.nu());
        g.view_mut((0, 0), (self.nc(), self.nx())).copy_from(&self.c);
        g.view_mut((0, self.nx()), (self.nc(), self.nu())).copy_from(&self.d);
        g
    }
}

/// Data of the terminal stage.
#[derive(Debug, Clone, PartialEq)]
pub struct QpTerminal {
    pub hess: DMatrix<f64>,
    pub grad: DVector<f64>,
    pub c: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl QpTerminal {
    pub fn unconstrained(hess: DMatrix<f64>, grad: DVector<f64>) -> Self {
        let n = grad.len();
        Self { hess, grad, c: DMatrix::zeros(0, n), h: DVector::zeros(0) }
    }
}

/// Complete structured QP.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSubproblem {
    pub stages: Vec<QpStage>,
    pub terminal: QpTerminal,
    /// Fixed value of the initial state variable.
    pub dx0: DVector<f64>,
}

impl QpSubproblem {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    fn stage_constraints(&self, k: usize) -> (DMatrix<f64>, &DVector<f64>) {
        if k < self.stages.len() {
            (self.stages[k].constraint_matrix(), &self.stages[k].h)
        } else {
            (self.terminal.c.clone(), &self.terminal.h)
        }
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let bad = |m: String| Err(QpError::Dimension(m));
        let mut nx = self.dx0.len();
        for (k, s) in self.stages.iter().enumerate() {
            let (nu, nc, nxn) = (s.nu(), s.nc(), s.a.nrows());
            if s.nx() != nx {
                return bad(format!("stage {k}: A has {} columns, expected {nx}", s.nx()));
            }
            if s.hess.shape() != (nx + nu, nx + nu) || s.grad.len() != nx + nu {
                return bad(format!("stage {k}: Hessian/gradient dimension mismatch"));
            }
            if s.b.nrows() != nxn || s.r.len() != nxn {
                return bad(format!("stage {k}: dynamics dimension mismatch"));
            }
            if s.c.shape() != (nc, nx) || s.d.shape() != (nc, nu) {
                return bad(format!("stage {k}: constraint dimension mismatch"));
            }
            nx = nxn;
        }
        let t = &self.terminal;
        if t.hess.shape() != (nx, nx) || t.grad.len() != nx || t.c.shape() != (t.h.len(), nx) {
            return bad("terminal dimension mismatch".into());
        }
        Ok(())
    }

    /// Objective value at the given primal point.
    pub fn objective(&self, dx: &[DVector<f64>], du: &[DVector<f64>]) -> f64 {
        let mut total = 0.0;
        for (k, s) in self.stages.iter().enumerate() {
            let z = stack(&dx[k], &du[k]);
            total += 0.5 * z.dot(&(&s.hess * &z)) + s.grad.dot(&z);
        }
        let xn = &dx[self.stages.len()];
        total + 0.5 * xn.dot(&(&self.terminal.hess * xn)) + self.terminal.grad.dot(xn)
    }
}

fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(x.len() + u.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), u.len()).copy_from(u);
    z
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    /// `N + 1` state increments.
    pub dx: Vec<DVector<f64>>,
    /// `N` control increments.
    pub du: Vec<DVector<f64>>,
    /// Multipliers of the initial-state and dynamics rows, `N + 1` entries.
    pub eq_multipliers: Vec<DVector<f64>>,
    /// Inequality multipliers, `N + 1` entries (the last one terminal).
    pub ineq_multipliers: Vec<DVector<f64>>,
    pub slacks: Vec<DVector<f64>>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub objective: f64,
    /// Whether the Hessian needed the `+regularization * I` shift.
    pub regularized: bool,
}

#[derive(Debug, Error, Clone)]
pub enum QpError {
    #[error("QP solver hit the iteration limit ({iterations}) with KKT residual {kkt_residual:e}")]
    MaxIterations { iterations: usize, kkt_residual: f64, best: Box<QpSolution> },
    #[error("QP is infeasible: {0}")]
    InfeasibleQp(String),
    #[error("QP dimension error: {0}")]
    Dimension(String),
    #[error("QP factorization failed at stage {stage}")]
    Factorization { stage: usize },
    #[error("QP dump format error: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Max-norm KKT tolerance.
    pub tol: f64,
    pub max_iter: usize,
    pub mehrotra: bool,
    /// Diagonal shift applied when the reduced Hessian is not positive definite.
    pub regularization: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 50, mehrotra: true, regularization: 1e-9 }
    }
}

/// Primal-dual iterate.
#[derive(Clone)]
struct Iterate {
    x: Vec<DVector<f64>>,
    u: Vec<DVector<f64>>,
    pi: Vec<DVector<f64>>,
    lam: Vec<DVector<f64>>,
    s: Vec<DVector<f64>>,
}

/// Riccati factors of one Newton system.
struct Factor {
    /// `P_k` for `k = 0..=N`.
    p: Vec<DMatrix<f64>>,
    k: Vec<DMatrix<f64>>,
    quu: Vec<Cholesky<f64, Dyn>>,
    qux: Vec<DMatrix<f64>>,
}

/// Residuals of the KKT conditions.
struct Residuals {
    /// Stationarity without multiplier terms of the dynamics: `H z + g - G' lam`.
    rd_partial: Vec<DVector<f64>>,
    /// Full stationarity.
    rd: Vec<DVector<f64>>,
    /// Dynamics defects, entry 0 is the initial condition.
    re: Vec<DVector<f64>>,
    /// `G z + h - s`.
    ri: Vec<DVector<f64>>,
}

struct Direction {
    dx: Vec<DVector<f64>>,
    du: Vec<DVector<f64>>,
    pi_new: Vec<DVector<f64>>,
    ds: Vec<DVector<f64>>,
    dlam: Vec<DVector<f64>>,
}

/// Interior point solver; keeps the last solution for warm starts.
#[derive(Debug, Clone, Default)]
pub struct QpSolver {
    pub options: SolverOptions,
    pub last: Option<QpSolution>,
}

impl QpSolver {
    pub fn new(options: SolverOptions) -> Self {
        Self { options, last: None }
    }

    pub fn solve(&mut self, qp: &QpSubproblem) -> Result<QpSolution, QpError> {
        let sol = solve_with(qp, &self.options, None)?;
        self.last = Some(sol.clone());
        Ok(sol)
    }

    /// Solves starting from the previous solution when dimensions agree.
    pub fn solve_warm(&mut self, qp: &QpSubproblem) -> Result<QpSolution, QpError> {
        let warm = self.last.take();
        let sol = solve_with(qp, &self.options, warm.as_ref())?;
        self.last = Some(sol.clone());
        Ok(sol)
    }
}

/// Solves `qp` from a cold start.
pub fn solve(qp: &QpSubproblem, options: &SolverOptions) -> Result<QpSolution, QpError> {
    solve_with(qp, options, None)
}

fn constraint_blocks(qp: &QpSubproblem) -> Vec<(DMatrix<f64>, DVector<f64>)> {
    (0..=qp.horizon()).map(|k| {
        let (g, h) = qp.stage_constraints(k);
        (g, h.clone())
    }).collect()
}

/// Rejects problems without a strictly feasible interior that are detectable
/// from pairs of opposite rows.
fn check_opposite_rows(blocks: &[(DMatrix<f64>, DVector<f64>)]) -> Result<(), QpError> {
    for (k, (g, h)) in blocks.iter().enumerate() {
        for i in 0..h.len() {
            for j in (i + 1)..h.len() {
                let ri = g.row(i);
                let rj = g.row(j);
                let scale = ri.amax().max(rj.amax());
                if scale == 0.0 {
                    continue;
                }
                if (ri + rj).amax() <= 1e-12 * scale && h[i] + h[j] <= 1e-12 * scale {
                    return Err(QpError::InfeasibleQp(format!(
                        "stage {k}: rows {i} and {j} leave no strictly feasible interior (slack sum {:e})",
                        h[i] + h[j]
                    )));
                }
            }
        }
        for i in 0..h.len() {
            if g.row(i).amax() == 0.0 && h[i] < 0.0 {
                return Err(QpError::InfeasibleQp(format!("stage {k}: constant row {i} is violated")));
            }
        }
    }
    Ok(())
}

fn solve_with(
    qp: &QpSubproblem,
    opts: &SolverOptions,
    warm: Option<&QpSolution>,
) -> Result<QpSolution, QpError> {
    qp.validate()?;
    let n = qp.horizon();
    let blocks = constraint_blocks(qp);
    check_opposite_rows(&blocks)?;
    let m_total: usize = blocks.iter().map(|(_, h)| h.len()).sum();

    let mut it = initial_iterate(qp, &blocks, warm);
    let mut reg = 0.0;
    let mut regularized = false;
    let mut best: Option<(f64, Iterate)> = None;

    for iter in 0..=opts.max_iter {
        let res = residuals(qp, &blocks, &it);
        let mu = if m_total > 0 {
            it.s.iter().zip(&it.lam).map(|(s, l)| s.dot(l)).sum::<f64>() / m_total as f64
        } else {
            0.0
        };
        let kkt = kkt_norm(&res, &it);
        if best.as_ref().is_none_or(|(b, _)| kkt < *b) {
            best = Some((kkt, it.clone()));
        }
        if kkt <= opts.tol {
            return Ok(finish(qp, it, kkt, iter, regularized));
        }
        if iter == opts.max_iter {
            break;
        }
        let lam_max = it.lam.iter().map(|l| l.amax()).fold(0.0, f64::max);
        if lam_max > 1e14 || !lam_max.is_finite() {
            return Err(QpError::InfeasibleQp(format!(
                "multipliers diverged ({lam_max:e}) with primal residual {:e}",
                res.ri.iter().chain(&res.re).map(|v| v.amax()).fold(0.0, f64::max)
            )));
        }

        let factor = loop {
            match factorize(qp, &blocks, &it, reg) {
                Ok(f) => break f,
                Err(stage) => {
                    if reg >= 1e-2 {
                        return Err(QpError::Factorization { stage });
                    }
                    reg = if reg == 0.0 { opts.regularization } else { reg * 100.0 };
                    regularized = true;
                }
            }
        };

        let dir = if opts.mehrotra && m_total > 0 {
            let rc_aff: Vec<DVector<f64>> =
                it.s.iter().zip(&it.lam).map(|(s, l)| s.component_mul(l)).collect();
            let aff = direction(qp, &blocks, &it, &res, &factor, &rc_aff);
            let alpha_aff = step_length(&it, &aff, 1.0);
            let mu_aff = it
                .s
                .iter()
                .zip(&it.lam)
                .zip(aff.ds.iter().zip(&aff.dlam))
                .map(|((s, l), (ds, dl))| (s + alpha_aff * ds).dot(&(l + alpha_aff * dl)))
                .sum::<f64>()
                / m_total as f64;
            let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
            let rc: Vec<DVector<f64>> = (0..=n)
                .map(|k| {
                    let mut v = it.s[k].component_mul(&it.lam[k])
                        + aff.ds[k].component_mul(&aff.dlam[k]);
                    v.add_scalar_mut(-sigma * mu);
                    v
                })
                .collect();
            direction(qp, &blocks, &it, &res, &factor, &rc)
        } else {
            let sigma = 0.1;
            let rc: Vec<DVector<f64>> = (0..=n)
                .map(|k| {
                    let mut v = it.s[k].component_mul(&it.lam[k]);
                    v.add_scalar_mut(-sigma * mu);
                    v
                })
                .collect();
            direction(qp, &blocks, &it, &res, &factor, &rc)
        };

        let alpha = step_length(&it, &dir, 0.995);
        for k in 0..=n {
            it.x[k] += alpha * &dir.dx[k];
            let dpi = &dir.pi_new[k] - &it.pi[k];
            it.pi[k] += alpha * dpi;
            it.s[k] += alpha * &dir.ds[k];
            it.lam[k] += alpha * &dir.dlam[k];
            if k < n {
                it.u[k] += alpha * &dir.du[k];
            }
        }
    }
    let (kkt, it) = best.expect("at least one iterate");
    let sol = finish(qp, it, kkt, opts.max_iter, regularized);
    Err(QpError::MaxIterations { iterations: opts.max_iter, kkt_residual: kkt, best: Box::new(sol) })
}

fn initial_iterate(
    qp: &QpSubproblem,
    blocks: &[(DMatrix<f64>, DVector<f64>)],
    warm: Option<&QpSolution>,
) -> Iterate {
    let n = qp.horizon();
    let compatible = warm.is_some_and(|w| {
        w.dx.len() == n + 1
            && (0..=n).all(|k| w.dx[k].len() == state_dim(qp, k) && w.slacks[k].len() == blocks[k].1.len())
            && (0..n).all(|k| w.du[k].len() == qp.stages[k].nu())
    });
    if let (true, Some(w)) = (compatible, warm) {
        let floor = 1e-3;
        return Iterate {
            x: w.dx.clone(),
            u: w.du.clone(),
            pi: w.eq_multipliers.clone(),
            lam: w.ineq_multipliers.iter().map(|l| l.map(|v| v.max(floor))).collect(),
            s: w.slacks.iter().map(|s| s.map(|v| v.max(floor))).collect(),
        };
    }
    let mut x = Vec::with_capacity(n + 1);
    let mut u = Vec::with_capacity(n);
    x.push(qp.dx0.clone());
    for st in &qp.stages {
        u.push(DVector::zeros(st.nu()));
        let next = &st.a * x.last().unwrap() + &st.r;
        x.push(next);
    }
    let mut s = Vec::with_capacity(n + 1);
    let mut lam = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let (g, h) = &blocks[k];
        let z = if k < n { stack(&x[k], &u[k]) } else { x[k].clone() };
        let val = g * z + h;
        s.push(val.map(|v| v.max(1.0)));
        lam.push(DVector::from_element(h.len(), 1.0));
    }
    let pi = (0..=n).map(|k| DVector::zeros(state_dim(qp, k))).collect();
    Iterate { x, u, pi, lam, s }
}

fn state_dim(qp: &QpSubproblem, k: usize) -> usize {
    if k < qp.horizon() {
        qp.stages[k].nx()
    } else {
        qp.terminal.grad.len()
    }
}

fn residuals(qp: &QpSubproblem, blocks: &[(DMatrix<f64>, DVector<f64>)], it: &Iterate) -> Residuals {
    let n = qp.horizon();
    let mut rd_partial = Vec::with_capacity(n + 1);
    let mut rd = Vec::with_capacity(n + 1);
    let mut re = Vec::with_capacity(n + 1);
    let mut ri = Vec::with_capacity(n + 1);
    re.push(&qp.dx0 - &it.x[0]);
    for k in 0..=n {
        let (g, h) = &blocks[k];
        if k < n {
            let st = &qp.stages[k];
            let nx = st.nx();
            let z = stack(&it.x[k], &it.u[k]);
            let partial = &st.hess * &z + &st.grad - g.transpose() * &it.lam[k];
            let mut full = partial.clone();
            let at_pi = st.a.transpose() * &it.pi[k + 1];
            let bt_pi = st.b.transpose() * &it.pi[k + 1];
            {
                let mut fx = full.rows_mut(0, nx);
                fx += at_pi - &it.pi[k];
            }
            {
                let mut fu = full.rows_mut(nx, st.nu());
                fu += bt_pi;
            }
            rd_partial.push(partial);
            rd.push(full);
            re.push(&st.a * &it.x[k] + &st.b * &it.u[k] + &st.r - &it.x[k + 1]);
            ri.push(g * z + h - &it.s[k]);
        } else {
            let t = &qp.terminal;
            let partial = &t.hess * &it.x[k] + &t.grad - g.transpose() * &it.lam[k];
            let full = &partial - &it.pi[k];
            rd_partial.push(partial);
            rd.push(full);
            ri.push(g * &it.x[k] + h - &it.s[k]);
        }
    }
    Residuals { rd_partial, rd, re, ri }
}

fn kkt_norm(res: &Residuals, it: &Iterate) -> f64 {
    let mut m = 0.0f64;
    for v in res.rd.iter().chain(&res.re).chain(&res.ri) {
        m = m.max(v.amax());
    }
    for (s, l) in it.s.iter().zip(&it.lam) {
        if !s.is_empty() {
            m = m.max(s.component_mul(l).amax());
        }
    }
    m
}

/// Condensed Hessian `H + G' S^-1 Lam G` of stage `k` (terminal for `k = N`).
fn condensed_hessian(
    qp: &QpSubproblem,
    blocks: &[(DMatrix<f64>, DVector<f64>)],
    it: &Iterate,
    k: usize,
    reg: f64,
) -> DMatrix<f64> {
    let mut h = if k < qp.horizon() { qp.stages[k].hess.clone() } else { qp.terminal.hess.clone() };
    let (g, _) = &blocks[k];
    if g.nrows() > 0 {
        let sigma = it.lam[k].component_div(&it.s[k]);
        let mut sg = g.clone();
        for (i, mut row) in sg.row_iter_mut().enumerate() {
            row *= sigma[i];
        }
        h += g.transpose() * sg;
    }
    if reg > 0.0 {
        // relative to the largest curvature, so that barrier terms of active
        // rows (lam / s near 1e14) do not swamp the shift
        let scale = h.diagonal().amax().max(1.0);
        for i in 0..h.nrows() {
            h[(i, i)] += reg * scale;
        }
    }
    h
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn factorize(
    qp: &QpSubproblem,
    blocks: &[(DMatrix<f64>, DVector<f64>)],
    it: &Iterate,
    reg: f64,
) -> Result<Factor, usize> {
    let n = qp.horizon();
    let mut p = vec![DMatrix::zeros(0, 0); n + 1];
    let mut kk = Vec::with_capacity(n);
    let mut quu = Vec::with_capacity(n);
    let mut qux = Vec::with_capacity(n);
    p[n] = condensed_hessian(qp, blocks, it, n, reg);
    for k in (0..n).rev() {
        let st = &qp.stages[k];
        let (nx, nu) = (st.nx(), st.nu());
        let ht = condensed_hessian(qp, blocks, it, k, reg);
        let pn = &p[k + 1];
        let pa = pn * &st.a;
        let pb = pn * &st.b;
        let mut q_uu = ht.view((nx, nx), (nu, nu)) + st.b.transpose() * &pb;
        symmetrize(&mut q_uu);
        let q_ux = ht.view((nx, 0), (nu, nx)) + st.b.transpose() * &pa;
        let q_xx = ht.view((0, 0), (nx, nx)) + st.a.transpose() * &pa;
        let chol = Cholesky::new(q_uu).ok_or(k)?;
        let gain = -chol.solve(&q_ux);
        let mut pk = q_xx + q_ux.transpose() * &gain;
        symmetrize(&mut pk);
        p[k] = pk;
        kk.push(gain);
        quu.push(chol);
        qux.push(q_ux);
    }
    kk.reverse();
    quu.reverse();
    qux.reverse();
    Ok(Factor { p, k: kk, quu, qux })
}

/// Newton direction for complementarity target `rc = s .* lam - sigma mu`.
fn direction(
    qp: &QpSubproblem,
    blocks: &[(DMatrix<f64>, DVector<f64>)],
    it: &Iterate,
    res: &Residuals,
    f: &Factor,
    rc: &[DVector<f64>],
) -> Direction {
    let n = qp.horizon();
    // condensed gradient q = rd_partial + G' S^-1 (rc + Lam ri)
    let qt: Vec<DVector<f64>> = (0..=n)
        .map(|k| {
            let (g, _) = &blocks[k];
            let mut q = res.rd_partial[k].clone();
            if g.nrows() > 0 {
                let w = (&rc[k] + it.lam[k].component_mul(&res.ri[k])).component_div(&it.s[k]);
                q += g.transpose() * w;
            }
            q
        })
        .collect();
    let mut pvec = vec![DVector::zeros(0); n + 1];
    let mut kff = vec![DVector::zeros(0); n];
    pvec[n] = qt[n].clone();
    for k in (0..n).rev() {
        let st = &qp.stages[k];
        let nx = st.nx();
        let w = &f.p[k + 1] * &res.re[k + 1] + &pvec[k + 1];
        let qx = qt[k].rows(0, nx) + st.a.transpose() * &w;
        let qu = qt[k].rows(nx, st.nu()) + st.b.transpose() * &w;
        let kf = -f.quu[k].solve(&qu);
        pvec[k] = qx + f.qux[k].transpose() * &kf;
        kff[k] = kf;
    }
    let mut dx = Vec::with_capacity(n + 1);
    let mut du = Vec::with_capacity(n);
    dx.push(res.re[0].clone());
    for k in 0..n {
        let st = &qp.stages[k];
        let u = &f.k[k] * &dx[k] + &kff[k];
        let next = &st.a * &dx[k] + &st.b * &u + &res.re[k + 1];
        du.push(u);
        dx.push(next);
    }
    let pi_new = (0..=n).map(|k| &f.p[k] * &dx[k] + &pvec[k]).collect();
    let mut ds = Vec::with_capacity(n + 1);
    let mut dlam = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let (g, _) = &blocks[k];
        let dz = if k < n { stack(&dx[k], &du[k]) } else { dx[k].clone() };
        let d_s = g * dz + &res.ri[k];
        let d_l = -(&rc[k] + it.lam[k].component_mul(&d_s)).component_div(&it.s[k]);
        ds.push(d_s);
        dlam.push(d_l);
    }
    Direction { dx, du, pi_new, ds, dlam }
}

fn step_length(it: &Iterate, dir: &Direction, tau: f64) -> f64 {
    let mut alpha: f64 = 1.0;
    for k in 0..it.s.len() {
        for i in 0..it.s[k].len() {
            if dir.ds[k][i] < 0.0 {
                alpha = alpha.min(-tau * it.s[k][i] / dir.ds[k][i]);
            }
            if dir.dlam[k][i] < 0.0 {
                alpha = alpha.min(-tau * it.lam[k][i] / dir.dlam[k][i]);
            }
        }
    }
    alpha
}

fn finish(qp: &QpSubproblem, it: Iterate, kkt: f64, iterations: usize, regularized: bool) -> QpSolution {
    let objective = qp.objective(&it.x, &it.u);
    QpSolution {
        dx: it.x,
        du: it.u,
        eq_multipliers: it.pi,
        ineq_multipliers: it.lam,
        slacks: it.s,
        kkt_residual: kkt,
        iterations,
        objective,
        regularized,
    }
}

/// Solution of a dense inequality-constrained QP.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSolution {
    pub x: DVector<f64>,
    pub multipliers: DVector<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Solves `min 1/2 x' H x + g' x  s.t.  C x + h >= 0` with the same interior
/// point method, posed as a single stage without state.
pub fn solve_dense(
    hess: &DMatrix<f64>,
    grad: &DVector<f64>,
    c: &DMatrix<f64>,
    h: &DVector<f64>,
    options: &SolverOptions,
) -> Result<DenseSolution, QpError> {
    let n = grad.len();
    let qp = QpSubproblem {
        stages: vec![QpStage {
            hess: hess.clone(),
            grad: grad.clone(),
            a: DMatrix::zeros(0, 0),
            b: DMatrix::zeros(0, n),
            r: DVector::zeros(0),
            c: DMatrix::zeros(h.len(), 0),
            d: c.clone(),
            h: h.clone(),
        }],
        terminal: QpTerminal::unconstrained(DMatrix::zeros(0, 0), DVector::zeros(0)),
        dx0: DVector::zeros(0),
    };
    let sol = solve(&qp, options)?;
    Ok(DenseSolution {
        x: sol.du[0].clone(),
        multipliers: sol.ineq_multipliers[0].clone(),
        kkt_residual: sol.kkt_residual,
        iterations: sol.iterations,
    })
}

/// KKT residual (max norm) of a primal-dual point, independent of the solver state.
pub fn kkt_residual(qp: &QpSubproblem, sol: &QpSolution) -> f64 {
    let blocks = constraint_blocks(qp);
    let it = Iterate {
        x: sol.dx.clone(),
        u: sol.du.clone(),
        pi: sol.eq_multipliers.clone(),
        lam: sol.ineq_multipliers.clone(),
        s: (0..=qp.horizon())
            .map(|k| {
                let (g, h) = &blocks[k];
                let z = if k < qp.horizon() { stack(&sol.dx[k], &sol.du[k]) } else { sol.dx[k].clone() };
                g * z + h
            })
            .collect(),
    };
    let res = residuals(qp, &blocks, &it);
    let mut m = kkt_norm(&res, &it);
    for (s, l) in it.s.iter().zip(&it.lam) {
        for i in 0..s.len() {
            m = m.max((-s[i]).max(0.0)).max((-l[i]).max(0.0));
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Plain-text dump format
//
//   qp-dump 1
//   horizon <N>
//   vector dx0 <n> v...
//   stage <k>
//   matrix hess <rows> <cols> v... (row-major)
//   vector grad <n> v...
//   matrix a ... / matrix b ... / vector r ... / matrix c ... / matrix d ... / vector h ...
//   terminal
//   matrix hess ... / vector grad ... / matrix c ... / vector h ...
//   end
// ---------------------------------------------------------------------------

fn write_matrix(out: &mut String, name: &str, m: &DMatrix<f64>) {
    let _ = write!(out, "matrix {name} {} {}", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        out.push('\n');
        for j in 0..m.ncols() {
            let _ = write!(out, "{:e} ", m[(i, j)]);
        }
    }
    out.push('\n');
}

fn write_vector(out: &mut String, name: &str, v: &DVector<f64>) {
    let _ = write!(out, "vector {name} {}", v.len());
    for x in v.iter() {
        let _ = write!(out, " {x:e}");
    }
    out.push('\n');
}

/// Serializes the QP into the plain-text dump format (lossless for `f64`).
pub fn dump_qp(qp: &QpSubproblem) -> String {
    let mut out = String::from("qp-dump 1\n");
    let _ = writeln!(out, "horizon {}", qp.horizon());
    write_vector(&mut out, "dx0", &qp.dx0);
    for (k, s) in qp.stages.iter().enumerate() {
        let _ = writeln!(out, "stage {k}");
        write_matrix(&mut out, "hess", &s.hess);
        write_vector(&mut out, "grad", &s.grad);
        write_matrix(&mut out, "a", &s.a);
        write_matrix(&mut out, "b", &s.b);
        write_vector(&mut out, "r", &s.r);
        write_matrix(&mut out, "c", &s.c);
        write_matrix(&mut out, "d", &s.d);
        write_vector(&mut out, "h", &s.h);
    }
    out.push_str("terminal\n");
    write_matrix(&mut out, "hess", &qp.terminal.hess);
    write_vector(&mut out, "grad", &qp.terminal.grad);
    write_matrix(&mut out, "c", &qp.terminal.c);
    write_vector(&mut out, "h", &qp.terminal.h);
    out.push_str("end\n");
    out
}

struct Tokens<'a> {
    inner: std::str::SplitWhitespace<'a>,
}

impl<'a> Tokens<'a> {
    fn word(&mut self) -> Result<&'a str, QpError> {
        self.inner.next().ok_or_else(|| QpError::Format("unexpected end of input".into()))
    }
    fn expect(&mut self, w: &str) -> Result<(), QpError> {
        let got = self.word()?;
        if got == w {
            Ok(())
        } else {
            Err(QpError::Format(format!("expected '{w}', found '{got}'")))
        }
    }
    fn usize(&mut self) -> Result<usize, QpError> {
        let w = self.word()?;
        w.parse().map_err(|_| QpError::Format(format!("invalid count '{w}'")))
    }
    fn f64(&mut self) -> Result<f64, QpError> {
        let w = self.word()?;
        w.parse().map_err(|_| QpError::Format(format!("invalid number '{w}'")))
    }
    fn matrix(&mut self, name: &str) -> Result<DMatrix<f64>, QpError> {
        self.expect("matrix")?;
        self.expect(name)?;
        let (r, c) = (self.usize()?, self.usize()?);
        let mut data = Vec::with_capacity(r * c);
        for _ in 0..r * c {
            data.push(self.f64()?);
        }
        Ok(DMatrix::from_row_slice(r, c, &data))
    }
    fn vector(&mut self, name: &str) -> Result<DVector<f64>, QpError> {
        self.expect("vector")?;
        self.expect(name)?;
        let n = self.usize()?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        Ok(DVector::from_vec(data))
    }
}

/// Parses the plain-text dump format.
pub fn load_qp(text: &str) -> Result<QpSubproblem, QpError> {
    let mut t = Tokens { inner: text.split_whitespace() };
    t.expect("qp-dump")?;
    t.expect("1")?;
    t.expect("horizon")?;
    let n = t.usize()?;
    let dx0 = t.vector("dx0")?;
    let mut stages = Vec::with_capacity(n);
    for k in 0..n {
        t.expect("stage")?;
        if t.usize()? != k {
            return Err(QpError::Format(format!("stage {k} out of order")));
        }
        stages.push(QpStage {
            hess: t.matrix("hess")?,
            grad: t.vector("grad")?,
            a: t.matrix("a")?,
            b: t.matrix("b")?,
            r: t.vector("r")?,
            c: t.matrix("c")?,
            d: t.matrix("d")?,
            h: t.vector("h")?,
        });
    }
    t.expect("terminal")?;
    let terminal = QpTerminal {
        hess: t.matrix("hess")?,
        grad: t.vector("grad")?,
        c: t.matrix("c")?,
        h: t.vector("h")?,
    };
    t.expect("end")?;
    let qp = QpSubproblem { stages, terminal, dx0 };
    qp.validate()?;
    Ok(qp)
}

pub fn write_qp_file(path: impl AsRef<Path>, qp: &QpSubproblem) -> std::io::Result<()> {
    std::fs::write(path, dump_qp(qp))
}

pub fn read_qp_file(path: impl AsRef<Path>) -> Result<QpSubproblem, QpError> {
    let text = std::fs::read_to_string(path).map_err(|e| QpError::Format(e.to_string()))?;
    load_qp(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_variable(bound: f64) -> QpSubproblem {
        // min 1/2 d^2 - d  s.t. bound - d >= 0
        QpSubproblem {
            stages: vec![QpStage {
                hess: DMatrix::from_element(1, 1, 1.0),
                grad: DVector::from_element(1, -1.0),
                a: DMatrix::zeros(0, 0),
                b: DMatrix::zeros(0, 1),
                r: DVector::zeros(0),
                c: DMatrix::zeros(1, 0),
                d: DMatrix::from_element(1, 1, -1.0),
                h: DVector::from_element(1, bound),
            }],
            terminal: QpTerminal::unconstrained(DMatrix::zeros(0, 0), DVector::zeros(0)),
            dx0: DVector::zeros(0),
        }
    }

    #[test]
    fn single_variable_active_bound() {
        let sol = solve(&single_variable(0.5), &SolverOptions::default()).unwrap();
        assert!((sol.du[0][0] - 0.5).abs() < 1e-6);
        assert!((sol.ineq_multipliers[0][0] - 0.5).abs() < 1e-6);
        assert!(sol.kkt_residual <= 1e-6);
    }

    #[test]
    fn inactive_bound_matches_unconstrained() {
        let sol = solve(&single_variable(5.0), &SolverOptions::default()).unwrap();
        assert!((sol.du[0][0] - 1.0).abs() < 1e-6);
        assert!(sol.ineq_multipliers[0][0].abs() < 1e-6);
    }

    #[test]
    fn equality_constrained_least_squares() {
        // N = 1, x0 = (1, 2), H = I over (x, u), grad = -1, A = B = I, r = 0, H_N = I.
        let n = 2;
        let qp = QpSubproblem {
            stages: vec![QpStage {
                hess: DMatrix::identity(2 * n, 2 * n),
                grad: DVector::from_element(2 * n, -1.0),
                a: DMatrix::identity(n, n),
                b: DMatrix::identity(n, n),
                r: DVector::zeros(n),
                c: DMatrix::zeros(0, n),
                d: DMatrix::zeros(0, n),
                h: DVector::zeros(0),
            }],
            terminal: QpTerminal::unconstrained(DMatrix::identity(n, n), DVector::zeros(n)),
            dx0: DVector::from_vec(vec![1.0, 2.0]),
        };
        let sol = solve(&qp, &SolverOptions::default()).unwrap();
        // minimize 1/2 u^2 - u + 1/2 (x0 + u)^2  =>  u = (1 - x0) / 2
        for i in 0..n {
            let u = (1.0 - qp.dx0[i]) / 2.0;
            assert!((sol.du[0][i] - u).abs() < 1e-9);
            assert!((sol.dx[1][i] - (qp.dx0[i] + u)).abs() < 1e-9);
        }
    }

    #[test]
    fn opposite_rows_without_interior_are_rejected() {
        let mut qp = single_variable(0.0);
        qp.stages[0].d = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        qp.stages[0].c = DMatrix::zeros(2, 0);
        qp.stages[0].h = DVector::from_vec(vec![-1.0, 0.5]);
        assert!(matches!(solve(&qp, &SolverOptions::default()), Err(QpError::InfeasibleQp(_))));
    }

    #[test]
    fn dump_round_trip_is_lossless() {
        let mut qp = single_variable(0.5);
        qp.stages[0].grad[0] = std::f64::consts::PI;
        let text = dump_qp(&qp);
        assert_eq!(load_qp(&text).unwrap(), qp);
        assert!(load_qp("qp-dump 2").is_err());
    }

    #[test]
    fn dense_mode() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g = DVector::from_vec(vec![-2.0, -1.0]);
        let c = DMatrix::from_row_slice(1, 2, &[-1.0, -1.0]);
        let hv = DVector::from_vec(vec![0.5]);
        let sol = solve_dense(&h, &g, &c, &hv, &SolverOptions::default()).unwrap();
        // stationarity: H x + g = C' lambda
        let r = &h * &sol.x + &g - c.transpose() * &sol.multipliers;
        assert!(r.amax() < 1e-6);
        assert!((sol.x.sum() - 0.5).abs() < 1e-6);
    }
}
