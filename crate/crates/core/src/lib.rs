//! Real-time-iteration nonlinear MPC for quadruped locomotion on rough terrain.
//!
//! The crate contains the single-rigid-body model, its discretization, leg
//! kinematics with the mobility factor, the optimal control problem and its
//! structured QP solver, the real-time iteration controller, the reference
//! generator, synthetic terrain, the whole-body control layer and a closed-loop
//! simulation harness.

// `!(x > 0.0)` guards reject NaN along with out-of-range values; fixed-size
// per-leg loops read better with an index.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod integrator;
pub mod leg;
pub mod model;
pub mod ocp;
pub mod qp;
pub mod reference;
pub mod rti;
pub mod sim;
pub mod terrain;
pub mod wbc;
