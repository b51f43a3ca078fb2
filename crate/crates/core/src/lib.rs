//! Time-parallel differentiable ODE solving with multiple shooting.
//!
//! An initial value problem on `[t_0, t_N]` is split into `N` sub-intervals
//! whose initial states (the shooting parameters `b_0..b_N`) are found as the
//! root of the matching function `g(B) = B − γ(B)`. Sub-interval flows are
//! integrated in parallel; the root is found by a direct Newton sweep using
//! forward sensitivities, or by the parareal approximation. Gradients come
//! from an interpolated adjoint or from implicit differentiation at the root.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod field;
pub mod ode;
pub mod sensitivity;
pub mod shooting;
pub mod adjoint;
pub mod problems;
pub mod tracking;

pub use error::{Error, Result};
pub use field::{
    Activation, BuiltinField, BuiltinSpec, ControlledField, MlpField, Plant, StackedField, VectorField,
};
pub use adjoint::{
    finite_difference_grad, finite_difference_grad_with, implicit_gradient, interpolated_adjoint_grad, AdjointOptions,
    CubicSpline, GradientMethod, GradientReport,
};
pub use ode::{
    integrate, integrate_batch, integrate_nodes, rollout, step_fixed, EvalCount, Method,
    NfeLedger, SolverSpec, TimeGrid, Trajectory,
};
pub use problems::{Curve, LimitCycleTask, LinearControlTask, LossEval, Objective};
pub use sensitivity::{batch_flow_with_sensitivity, flow_with_sensitivity, SensitivityResult};
pub use shooting::{
    init_shooting, matching_residual, msl_solve, InitStrategy, MslMethod, NewtonMode,
    ShootingState, SolveOutcome, SolveSpecs, StopRule,
};
pub use tracking::{BaselineTrainer, EpochRecord, Optimizer, TrackingSetup, TrainConfig, Trainer};
