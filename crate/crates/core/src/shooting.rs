//! Shooting parameters, the matching residual and the root-finding sweeps.
//!
//! `B = (b_0, …, b_N)` holds one candidate state per grid node with `b_0`
//! pinned to the initial condition. The matching residual is
//! `g_n = b_n − φ_{n−1}(b_{n−1})`. Every iteration updates only the rows from
//! `active_from` on; rows below it already equal the sequential solution
//! and are copied through unchanged.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::ode::{integrate, integrate_batch, rollout, NfeLedger, SolverSpec, TimeGrid};
use crate::sensitivity::{batch_flow_with_sensitivity, flow_with_jvp};

/// Row limit for the dense Newton system.
pub const DENSE_ROW_LIMIT: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct ShootingState {
    grid: TimeGrid,
    b: Vec<DVector<f64>>,
    active_from: usize,
    iteration: usize,
    residual: Option<f64>,
}

impl ShootingState {
    /// A fresh state with `b[0]` taken as the initial condition.
    pub fn new(grid: TimeGrid, b: Vec<DVector<f64>>) -> Result<Self> {
        if b.len() != grid.intervals() + 1 {
            return Err(Error::config(format!(
                "grid with {} sub-intervals needs {} shooting rows, got {}",
                grid.intervals(),
                grid.intervals() + 1,
                b.len()
            )));
        }
        let dim = b[0].len();
        if let Some(row) = b.iter().position(|r| r.len() != dim) {
            return Err(Error::config(format!(
                "shooting row {row} has dimension {}, expected {dim}",
                b[row].len()
            )));
        }
        Ok(Self {
            grid,
            b,
            active_from: 1,
            iteration: 0,
            residual: None,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn nodes(&self) -> &[DVector<f64>] {
        &self.b
    }

    pub fn z0(&self) -> &DVector<f64> {
        &self.b[0]
    }

    pub fn dim(&self) -> usize {
        self.b[0].len()
    }

    pub fn intervals(&self) -> usize {
        self.grid.intervals()
    }

    pub fn active_from(&self) -> usize {
        self.active_from
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Last measured `‖g‖_∞`, if any.
    pub fn residual(&self) -> Option<f64> {
        self.residual
    }

    pub fn is_exact(&self) -> bool {
        self.active_from > self.intervals()
    }

    pub fn set_residual(&mut self, residual: f64) {
        self.residual = Some(residual);
    }

    /// Forget the exact prefix and the residual, e.g. after a parameter update.
    pub fn invalidate(&mut self) {
        self.active_from = 1;
        self.residual = None;
    }

    /// `B` stacked row after row into one vector.
    pub fn stacked(&self) -> DVector<f64> {
        let n = self.dim();
        DVector::from_iterator(self.b.len() * n, self.b.iter().flat_map(|r| r.iter().copied()))
    }

    /// Error unless the state is converged to within `tolerance`.
    pub fn require_converged(&self, tolerance: f64) -> Result<()> {
        match self.residual {
            Some(r) if r <= tolerance => Ok(()),
            Some(r) => Err(Error::StaleSolution {
                residual: r,
                tolerance,
            }),
            None => Err(Error::StaleSolution {
                residual: f64::NAN,
                tolerance,
            }),
        }
    }

    fn successor(&self, b: Vec<DVector<f64>>, advance: bool) -> Self {
        Self {
            grid: self.grid.clone(),
            b,
            active_from: if advance {
                self.active_from + 1
            } else {
                self.active_from
            },
            iteration: self.iteration + 1,
            residual: None,
        }
    }

    fn check_active(&self) -> Result<()> {
        if self.active_from > self.intervals() {
            return Err(Error::config(format!(
                "all {} rows are already exact (active_from = {})",
                self.intervals(),
                self.active_from
            )));
        }
        Ok(())
    }
}

/// How the shooting parameters are first filled.
#[derive(Debug, Clone, PartialEq)]
pub enum InitStrategy {
    /// Sequential chain with a fixed-step solver.
    CoarseRollout(SolverSpec),
    /// Sequential chain with any solver, typically a tight adaptive one.
    FineRollout(SolverSpec),
    /// Every row set to `z0`.
    Broadcast,
}

pub fn init_shooting<F: VectorField + ?Sized>(
    field: &F,
    z0: &DVector<f64>,
    grid: &TimeGrid,
    strategy: &InitStrategy,
    ledger: &mut NfeLedger,
) -> Result<ShootingState> {
    if z0.len() != field.dim() {
        return Err(Error::config(format!(
            "initial state has dimension {}, field has {}",
            z0.len(),
            field.dim()
        )));
    }
    let b = match strategy {
        InitStrategy::Broadcast => vec![z0.clone(); grid.intervals() + 1],
        InitStrategy::CoarseRollout(spec) => {
            if !spec.method.is_fixed_step() {
                return Err(Error::config("coarse rollout needs a fixed-step method"));
            }
            rollout(field, z0, grid, spec, ledger)?
        }
        InitStrategy::FineRollout(spec) => rollout(field, z0, grid, spec, ledger)?,
    };
    ShootingState::new(grid.clone(), b)
}

/// A state built from an exact sequential solve with `spec`.
pub fn sequential_state<F: VectorField + ?Sized>(
    field: &F,
    z0: &DVector<f64>,
    grid: &TimeGrid,
    spec: &SolverSpec,
    ledger: &mut NfeLedger,
) -> Result<ShootingState> {
    let mut state = init_shooting(field, z0, grid, &InitStrategy::FineRollout(*spec), ledger)?;
    state.active_from = grid.intervals() + 1;
    state.residual = Some(0.0);
    Ok(state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResidual {
    pub g: Vec<DVector<f64>>,
    pub norm_inf: f64,
}

pub fn matching_residual<F: VectorField + ?Sized>(
    field: &F,
    state: &ShootingState,
    spec: &SolverSpec,
    ledger: &mut NfeLedger,
) -> Result<MatchResidual> {
    let n = state.intervals();
    let flows = integrate_batch(field, &state.b[..n], &state.grid.spans(), spec, ledger)?;
    let mut g = Vec::with_capacity(n + 1);
    g.push(DVector::zeros(state.dim()));
    for (k, traj) in flows.iter().enumerate() {
        g.push(&state.b[k + 1] - traj.final_state());
    }
    let norm_inf = g.iter().map(|r| r.amax()).fold(0.0, f64::max);
    Ok(MatchResidual { g, norm_inf })
}

/// How the Newton correction `Dφ_n (b_n^{k+1} − b_n^k)` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NewtonMode {
    /// Full sensitivity matrices in one parallel batch.
    #[default]
    FwSensitivity,
    /// Flows in parallel, then one jvp integration per row in the sweep.
    SequentialJvp,
}

/// One direct Newton sweep over the active rows.
pub fn newton_direct_iteration<F: VectorField + ?Sized>(
    field: &F,
    state: &ShootingState,
    spec: &SolverSpec,
    mode: NewtonMode,
    ledger: &mut NfeLedger,
) -> Result<ShootingState> {
    state.check_active()?;
    let a = state.active_from;
    let n = state.intervals();
    let old = &state.b;
    let spans: Vec<_> = (a - 1..n).map(|k| state.grid.span(k)).collect();
    let mut new = old.clone();
    match mode {
        NewtonMode::FwSensitivity => {
            let res = batch_flow_with_sensitivity(field, &old[a - 1..n], &spans, spec, ledger)?;
            new[a] = res.flows[0].clone();
            for k in a..n {
                let i = k - (a - 1);
                let delta = &new[k] - &old[k];
                new[k + 1] = &res.flows[i] + &res.sensitivities[i] * delta;
            }
        }
        NewtonMode::SequentialJvp => {
            let flows = integrate_batch(field, &old[a - 1..n], &spans, spec, ledger)?;
            new[a] = flows[0].final_state().clone();
            for k in a..n {
                let i = k - (a - 1);
                let delta = &new[k] - &old[k];
                let (_, jv) = flow_with_jvp(field, &old[k], spans[i], spec, &delta, ledger)
                    .map_err(|e| e.in_batch(k))?;
                new[k + 1] = flows[i].final_state() + jv;
            }
        }
    }
    Ok(state.successor(new, true))
}

/// One parareal sweep: fine flows in parallel, coarse corrections in sequence.
pub fn parareal_iteration<F: VectorField + ?Sized>(
    field: &F,
    state: &ShootingState,
    fine: &SolverSpec,
    coarse: &SolverSpec,
    ledger: &mut NfeLedger,
) -> Result<ShootingState> {
    if !coarse.method.is_fixed_step() {
        return Err(Error::config("parareal coarse solver must be fixed-step"));
    }
    state.check_active()?;
    let a = state.active_from;
    let n = state.intervals();
    let old = &state.b;
    let spans: Vec<_> = (a - 1..n).map(|k| state.grid.span(k)).collect();

    // The fine and coarse batches are independent, so they share one span.
    let mut fine_ledger = NfeLedger::new();
    let fine_flows = integrate_batch(field, &old[a - 1..n], &spans, fine, &mut fine_ledger)?;
    let mut coarse_ledger = NfeLedger::new();
    let coarse_old = integrate_batch(field, &old[a..n], &spans[1..], coarse, &mut coarse_ledger)?;
    ledger.absorb(&NfeLedger::merge_parallel([&fine_ledger, &coarse_ledger]));

    let mut new = old.clone();
    new[a] = fine_flows[0].final_state().clone();
    for k in a..n {
        let i = k - (a - 1);
        let g_new = if new[k] == old[k] {
            coarse_old[i - 1].final_state().clone()
        } else {
            integrate(field, &new[k], spans[i], coarse, ledger)
                .map_err(|e| e.in_batch(k))?
                .final_state()
                .clone()
        };
        new[k + 1] = fine_flows[i].final_state() + (g_new - coarse_old[i - 1].final_state());
    }
    Ok(state.successor(new, true))
}

/// Full Newton step on all rows with a dense LU solve, damped by `alpha`.
pub fn newton_dense_reference<F: VectorField + ?Sized>(
    field: &F,
    state: &ShootingState,
    spec: &SolverSpec,
    alpha: f64,
    ledger: &mut NfeLedger,
) -> Result<ShootingState> {
    let n = state.intervals();
    let d = state.dim();
    let rows = (n + 1) * d;
    if rows > DENSE_ROW_LIMIT {
        return Err(Error::SizeGuard {
            rows,
            limit: DENSE_ROW_LIMIT,
        });
    }
    if !alpha.is_finite() {
        return Err(Error::config(format!("damping must be finite, got {alpha}")));
    }
    let res = batch_flow_with_sensitivity(field, &state.b[..n], &state.grid.spans(), spec, ledger)?;

    let mut jac = DMatrix::<f64>::identity(rows, rows);
    let mut rhs = DVector::<f64>::zeros(rows);
    rhs.rows_mut(0, d).copy_from(&(state.z0() - &state.b[0]));
    for k in 0..n {
        let r = (k + 1) * d;
        jac.view_mut((r, k * d), (d, d)).copy_from(&(-&res.sensitivities[k]));
        rhs.rows_mut(r, d).copy_from(&(&res.flows[k] - &state.b[k + 1]));
    }
    let delta = jac
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::config("dense Newton system is singular"))?;
    let new: Vec<_> = (0..=n)
        .map(|k| &state.b[k] + delta.rows(k * d, d) * alpha)
        .collect();
    Ok(state.successor(new, alpha == 1.0 && state.active_from <= n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MslMethod {
    Newton { mode: NewtonMode },
    Parareal,
    DenseReference { alpha: f64 },
}

impl MslMethod {
    pub const NEWTON_FW: MslMethod = MslMethod::Newton {
        mode: NewtonMode::FwSensitivity,
    };
    pub const NEWTON_JVP: MslMethod = MslMethod::Newton {
        mode: NewtonMode::SequentialJvp,
    };

    pub fn name(&self) -> &'static str {
        match self {
            MslMethod::Newton {
                mode: NewtonMode::FwSensitivity,
            } => "newton-fw",
            MslMethod::Newton {
                mode: NewtonMode::SequentialJvp,
            } => "newton-jvp",
            MslMethod::Parareal => "parareal",
            MslMethod::DenseReference { .. } => "dense-ref",
        }
    }
}

impl std::str::FromStr for MslMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "newton-fw" => Ok(Self::NEWTON_FW),
            "newton-jvp" => Ok(Self::NEWTON_JVP),
            "parareal" => Ok(Self::Parareal),
            "dense-ref" => Ok(MslMethod::DenseReference { alpha: 1.0 }),
            other => Err(Error::config(format!("unknown method '{other}'"))),
        }
    }
}

/// Solvers used by [`msl_solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct SolveSpecs {
    /// Sub-interval flows.
    pub fine: SolverSpec,
    /// Parareal corrections.
    pub coarse: SolverSpec,
}

impl SolveSpecs {
    pub fn new(fine: SolverSpec) -> Self {
        Self {
            fine,
            coarse: SolverSpec::rk4(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub max_iters: usize,
    pub residual_tol: f64,
}

/// One row of a solve summary. NFE columns are the cost of that iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub residual_inf: f64,
    pub total_nfe: u64,
    pub span_nfe: u64,
    pub wall_clock_ms: f64,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub state: ShootingState,
    /// Solver work: every iteration (and the initialization in [`msl_solve`]).
    pub ledger: NfeLedger,
    /// Residual evaluations made only to decide when to stop.
    pub monitor: NfeLedger,
    pub records: Vec<IterationRecord>,
}

impl SolveOutcome {
    pub fn converged(&self, tol: f64) -> bool {
        self.state.residual.is_some_and(|r| r <= tol)
    }
}

/// Apply one iteration of `method`.
pub fn msl_iteration<F: VectorField + ?Sized>(
    field: &F,
    state: &ShootingState,
    method: MslMethod,
    specs: &SolveSpecs,
    ledger: &mut NfeLedger,
) -> Result<ShootingState> {
    match method {
        MslMethod::Newton { mode } => newton_direct_iteration(field, state, &specs.fine, mode, ledger),
        MslMethod::Parareal => parareal_iteration(field, state, &specs.fine, &specs.coarse, ledger),
        MslMethod::DenseReference { alpha } => newton_dense_reference(field, state, &specs.fine, alpha, ledger),
    }
}

/// Initialize with `init`, then iterate until `stop` is met.
pub fn msl_solve<F: VectorField + ?Sized>(
    field: &F,
    z0: &DVector<f64>,
    grid: &TimeGrid,
    init: &InitStrategy,
    method: MslMethod,
    specs: &SolveSpecs,
    stop: StopRule,
) -> Result<SolveOutcome> {
    if stop.max_iters == 0 {
        return Err(Error::config("max_iters must be at least 1"));
    }
    let clock = Instant::now();
    let mut ledger = NfeLedger::new();
    let mut state = init_shooting(field, z0, grid, init, &mut ledger)?;
    let mut monitor = NfeLedger::new();
    let r0 = matching_residual(field, &state, &specs.fine, &mut monitor)?.norm_inf;
    state.residual = Some(r0);
    let first = IterationRecord {
        iteration: 0,
        residual_inf: r0,
        total_nfe: ledger.total_nfe,
        span_nfe: ledger.span_nfe,
        wall_clock_ms: clock.elapsed().as_secs_f64() * 1e3,
    };
    let mut out = msl_solve_from(field, state, method, specs, stop)?;
    ledger.absorb(&out.ledger);
    out.ledger = ledger;
    out.monitor.absorb(&monitor);
    out.records.insert(0, first);
    Ok(out)
}

/// Iterate from an existing state. Stops when the residual reaches the
/// tolerance, when every row is exact, or after `max_iters` iterations.
pub fn msl_solve_from<F: VectorField + ?Sized>(
    field: &F,
    mut state: ShootingState,
    method: MslMethod,
    specs: &SolveSpecs,
    stop: StopRule,
) -> Result<SolveOutcome> {
    let mut ledger = NfeLedger::new();
    let mut monitor = NfeLedger::new();
    let mut records = Vec::new();
    for _ in 0..stop.max_iters {
        let clock = Instant::now();
        let mut step = NfeLedger::new();
        state = msl_iteration(field, &state, method, specs, &mut step)?;
        let r = matching_residual(field, &state, &specs.fine, &mut monitor)?.norm_inf;
        state.residual = Some(r);
        ledger.absorb(&step);
        records.push(IterationRecord {
            iteration: state.iteration,
            residual_inf: r,
            total_nfe: step.total_nfe,
            span_nfe: step.span_nfe,
            wall_clock_ms: clock.elapsed().as_secs_f64() * 1e3,
        });
        if r <= stop.residual_tol || state.is_exact() {
            break;
        }
    }
    Ok(SolveOutcome {
        state,
        ledger,
        monitor,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{BuiltinField, MlpField, Activation};
    use nalgebra::{dmatrix, dvector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn decay() -> BuiltinField {
        BuiltinField::linear(dmatrix![-1.0]).unwrap()
    }

    fn rel_nodes(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).norm() / y.norm().max(1e-300))
            .fold(0.0, f64::max)
    }

    #[test]
    fn broadcast_init() {
        let f = BuiltinField::vanderpol(1.0);
        let grid = TimeGrid::uniform(0.0, 1.0, 3).unwrap();
        let s = init_shooting(&f, &dvector![1.0, 2.0], &grid, &InitStrategy::Broadcast, &mut NfeLedger::new()).unwrap();
        assert_eq!(s.nodes().len(), 4);
        assert!(s.nodes().iter().all(|r| *r == dvector![1.0, 2.0]));
        assert_eq!(s.active_from(), 1);
    }

    #[test]
    fn fine_rollout_init() {
        let grid = TimeGrid::uniform(0.0, 1.0, 4).unwrap();
        let s = init_shooting(&decay(), &dvector![1.0], &grid, &InitStrategy::FineRollout(SolverSpec::dopri5(1e-8, 1e-8)), &mut NfeLedger::new()).unwrap();
        for (n, b) in s.nodes().iter().enumerate() {
            assert!((b[0] - (-(n as f64) / 4.0).exp()).abs() < 1e-7);
        }
    }

    #[test]
    fn coarse_rollout_init() {
        let grid = TimeGrid::uniform(0.0, 1.0, 2).unwrap();
        let s = init_shooting(&decay(), &dvector![1.0], &grid, &InitStrategy::CoarseRollout(SolverSpec::euler(1)), &mut NfeLedger::new()).unwrap();
        let got: Vec<f64> = s.nodes().iter().map(|b| b[0]).collect();
        assert_eq!(got, vec![1.0, 0.5, 0.25]);
        let bad = init_shooting(&decay(), &dvector![1.0], &grid, &InitStrategy::CoarseRollout(SolverSpec::dopri5(1e-6, 1e-6)), &mut NfeLedger::new());
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn residual_examples() {
        let grid = TimeGrid::uniform(0.0, 1.0, 2).unwrap();
        let spec = SolverSpec::dopri5(1e-10, 1e-10);
        let s = init_shooting(&decay(), &dvector![1.0], &grid, &InitStrategy::Broadcast, &mut NfeLedger::new()).unwrap();
        let r = matching_residual(&decay(), &s, &spec, &mut NfeLedger::new()).unwrap();
        assert_eq!(r.g[0][0], 0.0);
        assert!((r.g[1][0] - (1.0 - (-0.5f64).exp())).abs() < 1e-9);

        let fine = SolverSpec::dopri5(1e-9, 1e-9);
        let s = init_shooting(&decay(), &dvector![1.0], &grid, &InitStrategy::FineRollout(fine), &mut NfeLedger::new()).unwrap();
        let r = matching_residual(&decay(), &s, &fine, &mut NfeLedger::new()).unwrap();
        assert!(r.norm_inf <= 1e-8);

        let zero = BuiltinField::constant(dvector![0.0, 0.0]);
        let s = init_shooting(&zero, &dvector![3.0, 4.0], &grid, &InitStrategy::Broadcast, &mut NfeLedger::new()).unwrap();
        assert_eq!(matching_residual(&zero, &s, &spec, &mut NfeLedger::new()).unwrap().norm_inf, 0.0);
    }

    #[test]
    fn linear_newton_is_exact_in_one_iteration() {
        let a = dmatrix![0.0, 1.0; -4.0, -0.2];
        let f = BuiltinField::linear(a).unwrap();
        let grid = TimeGrid::uniform(0.0, 3.0, 6).unwrap();
        let spec = SolverSpec::rk4(4);
        let z0 = dvector![1.0, 0.0];
        for mode in [NewtonMode::FwSensitivity, NewtonMode::SequentialJvp] {
            let s = init_shooting(&f, &z0, &grid, &InitStrategy::Broadcast, &mut NfeLedger::new()).unwrap();
            let s = newton_direct_iteration(&f, &s, &spec, mode, &mut NfeLedger::new()).unwrap();
            let r = matching_residual(&f, &s, &spec, &mut NfeLedger::new()).unwrap();
            assert!(r.norm_inf <= 1e-10, "{mode:?}: {}", r.norm_inf);
            assert_eq!(s.active_from(), 2);
            assert_eq!(s.iteration(), 1);
        }
    }

    #[test]
    fn newton_at_solution_is_fixed_point() {
        let f = BuiltinField::vanderpol(1.0);
        let grid = TimeGrid::uniform(0.0, 2.0, 5).unwrap();
        let spec = SolverSpec::rk4(5);
        let s = init_shooting(&f, &dvector![2.0, 0.0], &grid, &InitStrategy::FineRollout(spec), &mut NfeLedger::new()).unwrap();
        let next = newton_direct_iteration(&f, &s, &spec, NewtonMode::FwSensitivity, &mut NfeLedger::new()).unwrap();
        assert_eq!(next.nodes(), s.nodes());
    }

    #[test]
    fn finite_step_convergence_and_frozen_prefix() {
        let f = BuiltinField::vanderpol(1.0);
        let grid = TimeGrid::uniform(0.0, 2.0, 4).unwrap();
        let spec = SolverSpec::dopri5(1e-9, 1e-9);
        let z0 = dvector![2.0, 0.0];
        let truth = rollout(&f, &z0, &grid, &spec, &mut NfeLedger::new()).unwrap();
        for mode in [NewtonMode::FwSensitivity, NewtonMode::SequentialJvp] {
            let mut s = init_shooting(&f, &z0, &grid, &InitStrategy::Broadcast, &mut NfeLedger::new()).unwrap();
            for k in 1..=4 {
                let prev = s.clone();
                s = newton_direct_iteration(&f, &s, &spec, mode, &mut NfeLedger::new()).unwrap();
                assert_eq!(&s.nodes()[..k], &prev.nodes()[..k]);
                assert!(rel_nodes(&s.nodes()[..=k], &truth[..=k]) < 1e-8);
            }
            assert!(s.is_exact());
            assert!(newton_direct_iteration(&f, &s, &spec, mode, &mut NfeLedger::new()).is_err());
        }
    }

    #[test]
    fn parareal_examples() {
        let grid = TimeGrid::uniform(0.0, 1.0, 2).unwrap();
        let fine = SolverSpec::dopri5(1e-8, 1e-8);
        let coarse = SolverSpec::euler(1);
        let z0 = dvector![1.0];
        let truth = rollout(&decay(), &z0, &grid, &fine, &mut NfeLedger::new()).unwrap();
        let s0 = init_shooting(&decay(), &z0, &grid, &InitStrategy::Broadcast, &mut NfeLedger::new()).unwrap();
        let s1 = parareal_iteration(&decay(), &s0, &fine, &coarse, &mut NfeLedger::new()).unwrap();
        assert_eq!(s1.nodes()[1], truth[1]);
        assert!((s1.nodes()[1][0] - (-0.5f64).exp()).abs() < 1e-8);
        assert!((s1.nodes()[2][0] - truth[2][0]).abs() > 1e-3);
        let s2 = parareal_iteration(&decay(), &s1, &fine, &coarse, &mut NfeLedger::new()).unwrap();
        assert!(rel_nodes(s2.nodes(), &truth) < 1e-7);

        let again = parareal_iteration(&decay(), &s0.successor(truth.clone(), false), &fine, &coarse, &mut NfeLedger::new()).unwrap();
        assert!(rel_nodes(again.nodes(), &truth) < 1e-10);
        assert!(parareal_iteration(&decay(), &s0, &fine, &fine, &mut NfeLedger::new()).is_err());
    }

    #[test]
    fn dense_matches_direct_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..8 {
            let d = 1 + trial % 3;
            let n = 2 + trial % 4;
            let net = MlpField::init_uniform(vec![d, 6, d], vec![Activation::Tanh, Activation::Identity], trial as u64).unwrap();
            let grid = TimeGrid::uniform(0.0, 1.0, n).unwrap();
            let z0 = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
            let mut b = vec![z0.clone()];
            b.extend((0..n).map(|_| DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0))));
            let s = ShootingState::new(grid, b).unwrap();
            let spec = SolverSpec::rk4(3);
            let direct = newton_direct_iteration(&net, &s, &spec, NewtonMode::FwSensitivity, &mut NfeLedger::new()).unwrap();
            let dense = newton_dense_reference(&net, &s, &spec, 1.0, &mut NfeLedger::new()).unwrap();
            let scale = direct.stacked().amax().max(1.0);
            assert!((direct.stacked() - dense.stacked()).amax() <= 1e-10 * scale);
            let still = newton_dense_reference(&net, &s, &spec, 0.0, &mut NfeLedger::new()).unwrap();
            assert_eq!(still.nodes(), s.nodes());
            assert_eq!(still.active_from(), 1);
        }
    }

    #[test]
    fn dense_linear_is_exact_and_guarded() {
        let f = BuiltinField::linear(dmatrix![0.0, 1.0; -1.0, 0.0]).unwrap();
        let grid = TimeGrid::uniform(0.0, 2.0, 4).unwrap();
        let spec = SolverSpec::rk4(5);
        let z0 = dvector![0.3, 1.0];
        let s = init_shooting(&f, &z0, &grid, &InitStrategy::Broadcast, &mut NfeLedger::new()).unwrap();
        let s = newton_dense_reference(&f, &s, &spec, 1.0, &mut NfeLedger::new()).unwrap();
        let truth = rollout(&f, &z0, &grid, &spec, &mut NfeLedger::new()).unwrap();
        assert!(rel_nodes(s.nodes(), &truth) < 1e-12);

        let big = TimeGrid::uniform(0.0, 1.0, 1000).unwrap();
        let s = init_shooting(&f, &z0, &big, &InitStrategy::Broadcast, &mut NfeLedger::new()).unwrap();
        let err = newton_dense_reference(&f, &s, &spec, 1.0, &mut NfeLedger::new()).unwrap_err();
        assert!(matches!(err, Error::SizeGuard { rows: 2002, limit: 2000 }));
    }

    #[test]
    fn one_iteration_span_is_eight() {
        let f = BuiltinField::vanderpol(1.0);
        let grid = TimeGrid::uniform(0.0, 10.0, 100).unwrap();
        let out = msl_solve(
            &f,
            &dvector![2.0, 0.0],
            &grid,
            &InitStrategy::Broadcast,
            MslMethod::NEWTON_FW,
            &SolveSpecs::new(SolverSpec::rk4(2)),
            StopRule { max_iters: 1, residual_tol: 1e300 },
        )
        .unwrap();
        assert_eq!(out.state.iteration(), 1);
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.records[1].span_nfe, 8);
        assert_eq!(out.records[1].total_nfe, 800);
        assert_eq!(out.ledger.total_jmp, 800);
    }

    #[test]
    fn per_iteration_cost_shrinks() {
        let f = BuiltinField::vanderpol(1.0);
        let grid = TimeGrid::uniform(0.0, 2.0, 6).unwrap();
        for method in [MslMethod::NEWTON_FW, MslMethod::NEWTON_JVP, MslMethod::Parareal] {
            let out = msl_solve(&f, &dvector![2.0, 0.0], &grid, &InitStrategy::Broadcast, method, &SolveSpecs::new(SolverSpec::rk4(2)), StopRule { max_iters: 10, residual_tol: 0.0 }).unwrap();
            // quadratic convergence may hit an exact zero before the last row is pinned
            assert!(out.records.len() <= 7, "{}", method.name());
            assert_eq!(out.state.residual(), Some(0.0));
            for w in out.records[1..].windows(2) {
                assert!(w[1].total_nfe <= w[0].total_nfe);
            }
        }
    }

    #[test]
    fn method_names_roundtrip() {
        for name in ["newton-fw", "newton-jvp", "parareal", "dense-ref"] {
            assert_eq!(name.parse::<MslMethod>().unwrap().name(), name);
        }
        assert!("broyden".parse::<MslMethod>().is_err());
    }

    #[test]
    fn staleness_guard() {
        let grid = TimeGrid::uniform(0.0, 1.0, 2).unwrap();
        let mut s = ShootingState::new(grid.clone(), vec![dvector![1.0]; 3]).unwrap();
        assert!(matches!(s.require_converged(1e-6), Err(Error::StaleSolution { .. })));
        s.set_residual(1e-9);
        assert!(s.require_converged(1e-6).is_ok());
        s.invalidate();
        assert!(s.require_converged(1e-6).is_err());
        assert!(ShootingState::new(grid, vec![dvector![1.0]; 2]).is_err());
    }
}
