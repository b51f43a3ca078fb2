//! Full-batch training with fixed-point tracking.
//!
//! The shooting parameters of every trajectory are kept from one training
//! step to the next. After each parameter update a single Newton iteration
//! (from a fully reset active window) moves them to the new root, which
//! keeps them within `O(η²)` of the exact solution.

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{interpolated_adjoint_grad, AdjointOptions};
use crate::error::{Error, Result};
use crate::field::{StackedField, VectorField};
use crate::ode::{integrate_nodes, rollout, NfeLedger, SolverSpec, TimeGrid};
use crate::problems::{smape, Objective};
use crate::shooting::{matching_residual, newton_direct_iteration, sequential_state, NewtonMode, ShootingState};

/// Smallest reference residual used to set the divergence guard.
pub const GUARD_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Gd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub epochs: usize,
    #[serde(default = "default_newton_iters")]
    pub newton_iters_per_step: usize,
    #[serde(default)]
    pub seed: u64,
    /// Abort once the residual exceeds this multiple of the larger of the
    /// initial residual and the one after the first step.
    #[serde(default = "default_divergence_factor")]
    pub divergence_factor: f64,
}

fn default_newton_iters() -> usize {
    1
}

fn default_divergence_factor() -> f64 {
    1e2
}

impl TrainConfig {
    pub fn gd(learning_rate: f64, epochs: usize) -> Self {
        Self {
            learning_rate,
            optimizer: Optimizer::Gd,
            epochs,
            newton_iters_per_step: 1,
            seed: 0,
            divergence_factor: default_divergence_factor(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.divergence_factor > 0.0) {
            return Err(Error::config("divergence factor must be positive"));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::config("adam needs 0 <= beta < 1 and eps > 0"));
            }
        }
        Ok(())
    }
}

/// Solvers used by a [`Trainer`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingSetup {
    /// Flows inside the Newton iterations.
    pub fine: SolverSpec,
    /// Sequential solve that fills the initial shooting parameters.
    pub init: SolverSpec,
    /// Fresh sequential solve the tracked parameters are compared to.
    pub reference: Option<SolverSpec>,
    pub adjoint: SolverSpec,
    pub mode: NewtonMode,
}

impl TrackingSetup {
    pub fn new(fine: SolverSpec) -> Self {
        Self {
            fine,
            init: SolverSpec::dopri5(1e-8, 1e-8),
            reference: None,
            adjoint: SolverSpec::dopri5(1e-7, 1e-7),
            mode: NewtonMode::FwSensitivity,
        }
    }
}

/// One epoch. NFE columns count the forward Newton work of that epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub tracking_error: Option<f64>,
    pub residual_inf: f64,
    pub total_nfe: u64,
    pub span_nfe: u64,
    pub wall_ms: f64,
    pub smape: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackingTrace {
    pub records: Vec<EpochRecord>,
}

/// Optimizer with its moment estimates.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    learning_rate: f64,
    m: DVector<f64>,
    v: DVector<f64>,
    t: i32,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, learning_rate: f64, params: usize) -> Self {
        Self {
            kind,
            learning_rate,
            m: DVector::zeros(params),
            v: DVector::zeros(params),
            t: 0,
        }
    }

    /// Descent step `Δθ` to subtract from the parameters.
    pub fn step(&mut self, grad: &DVector<f64>) -> DVector<f64> {
        let eta = self.learning_rate;
        match self.kind {
            Optimizer::Gd => grad * eta,
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                self.m = &self.m * beta1 + grad * (1.0 - beta1);
                self.v = &self.v * beta2 + grad.component_mul(grad) * (1.0 - beta2);
                let mhat = &self.m / (1.0 - beta1.powi(self.t));
                let vhat = &self.v / (1.0 - beta2.powi(self.t));
                mhat.zip_map(&vhat, |m, v| eta * m / (v.sqrt() + eps))
            }
        }
    }

    /// Apply one step to the parameters of `field`.
    pub fn apply<F: VectorField + ?Sized>(&mut self, field: &mut F, grad: &DVector<f64>) -> Result<()> {
        let theta = DVector::from_vec(field.params());
        let step = self.step(grad);
        field.set_params((theta - step).as_slice())
    }
}

/// Loss over all trajectories and its parameter gradient, with one adjoint
/// solve per trajectory running concurrently.
fn batch_gradient<F, L>(
    field: &F,
    objective: &L,
    states: &[ShootingState],
    opts: &AdjointOptions,
    ledger: &mut NfeLedger,
) -> Result<(f64, DVector<f64>)>
where
    F: VectorField,
    L: Objective<F>,
{
    let views: Vec<&[DVector<f64>]> = states.iter().map(|s| s.nodes()).collect();
    let eval = objective.evaluate(field, &views);
    let parts: Vec<(DVector<f64>, NfeLedger)> = states
        .par_iter()
        .zip(eval.node_grads.par_iter())
        .enumerate()
        .map(|(j, (s, g))| {
            let mut l = NfeLedger::new();
            interpolated_adjoint_grad(field, s, g, opts, &mut l)
                .map(|r| (r.grad, l))
                .map_err(|e| e.in_batch(j))
        })
        .collect::<Result<_>>()?;
    ledger.absorb(&NfeLedger::merge_parallel(parts.iter().map(|(_, l)| l)));
    let grad = parts.into_iter().fold(eval.param_grad, |acc, (g, _)| acc + g);
    Ok((eval.value, grad))
}

pub struct Trainer<F, L> {
    field: F,
    objective: L,
    states: Vec<ShootingState>,
    setup: TrackingSetup,
    cfg: TrainConfig,
    optimizer: OptimizerState,
    guard: f64,
    initial_residual: f64,
    epoch: usize,
    /// Newton iterations.
    pub forward: NfeLedger,
    /// Adjoint integrations.
    pub backward: NfeLedger,
    /// Initialization, residual checks and reference solves.
    pub monitor: NfeLedger,
}

/// Run `f` over the states in parallel, merging their ledgers as one batch.
fn per_state<T, G>(states: &[ShootingState], ledger: &mut NfeLedger, f: G) -> Result<Vec<T>>
where
    T: Send,
    G: Fn(&ShootingState, &mut NfeLedger) -> Result<T> + Sync,
{
    let out: Vec<(T, NfeLedger)> = states
        .par_iter()
        .enumerate()
        .map(|(j, s)| {
            let mut l = NfeLedger::new();
            f(s, &mut l).map(|v| (v, l)).map_err(|e| e.in_batch(j))
        })
        .collect::<Result<_>>()?;
    ledger.absorb(&NfeLedger::merge_parallel(out.iter().map(|(_, l)| l)));
    Ok(out.into_iter().map(|(v, _)| v).collect())
}

impl<F, L> Trainer<F, L>
where
    F: VectorField,
    L: Objective<F>,
{
    /// Solve every trajectory sequentially with `setup.init` and measure
    /// the residual under `setup.fine`.
    pub fn new(
        field: F,
        objective: L,
        z0s: &[DVector<f64>],
        grid: &TimeGrid,
        setup: TrackingSetup,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if z0s.is_empty() {
            return Err(Error::config("training needs at least one initial condition"));
        }
        let mut monitor = NfeLedger::new();
        let solved: Vec<(ShootingState, NfeLedger)> = z0s
            .par_iter()
            .enumerate()
            .map(|(j, z0)| {
                let mut l = NfeLedger::new();
                sequential_state(&field, z0, grid, &setup.init, &mut l)
                    .map(|s| (s, l))
                    .map_err(|e| e.in_batch(j))
            })
            .collect::<Result<_>>()?;
        monitor.absorb(&NfeLedger::merge_parallel(solved.iter().map(|(_, l)| l)));
        let mut states: Vec<ShootingState> = solved.into_iter().map(|(s, _)| s).collect();
        let residuals = per_state(&states, &mut monitor, |s, l| {
            Ok(matching_residual(&field, s, &setup.fine, l)?.norm_inf)
        })?;
        for (s, r) in states.iter_mut().zip(&residuals) {
            s.invalidate();
            s.set_residual(*r);
        }
        let initial_residual = residuals.iter().copied().fold(0.0, f64::max);
        let optimizer = OptimizerState::new(cfg.optimizer, cfg.learning_rate, field.param_count());
        Ok(Self {
            guard: cfg.divergence_factor * initial_residual.max(GUARD_FLOOR),
            initial_residual,
            field,
            objective,
            states,
            setup,
            cfg,
            optimizer,
            epoch: 0,
            forward: NfeLedger::new(),
            backward: NfeLedger::new(),
            monitor,
        })
    }

    pub fn field(&self) -> &F {
        &self.field
    }

    pub fn into_field(self) -> F {
        self.field
    }

    pub fn states(&self) -> &[ShootingState] {
        &self.states
    }

    pub fn guard(&self) -> f64 {
        self.guard
    }

    pub fn initial_residual(&self) -> f64 {
        self.initial_residual
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Current loss and its full parameter gradient.
    pub fn loss_and_gradient(&mut self) -> Result<(f64, DVector<f64>)> {
        let opts = AdjointOptions {
            backward: self.setup.adjoint,
            residual_tol: self.guard,
        };
        batch_gradient(&self.field, &self.objective, &self.states, &opts, &mut self.backward)
    }

    /// Gradient, parameter update, Newton re-tracking, residual check.
    pub fn train_step(&mut self) -> Result<EpochRecord> {
        let clock = Instant::now();
        let (loss, grad) = self.loss_and_gradient()?;
        self.optimizer.apply(&mut self.field, &grad)?;

        let mut step = NfeLedger::new();
        let field = &self.field;
        let setup = &self.setup;
        let iters = self.cfg.newton_iters_per_step;
        self.states = per_state(&self.states, &mut step, |s, l| {
            let mut s = s.clone();
            s.invalidate();
            for _ in 0..iters.min(s.intervals()) {
                s = newton_direct_iteration(field, &s, &setup.fine, setup.mode, l)?;
            }
            Ok(s)
        })?;
        self.forward.absorb(&step);

        let residuals = per_state(&self.states, &mut self.monitor, |s, l| {
            Ok(matching_residual(field, s, &setup.fine, l)?.norm_inf)
        })?;
        for (s, r) in self.states.iter_mut().zip(&residuals) {
            s.set_residual(*r);
        }
        let residual = residuals.iter().copied().fold(0.0, f64::max);
        if self.epoch == 0 {
            let reference = self.initial_residual.max(residual).max(GUARD_FLOOR);
            self.guard = self.cfg.divergence_factor * reference;
        }
        self.epoch += 1;
        if !(residual <= self.guard) {
            return Err(Error::StaleSolution {
                residual,
                tolerance: self.guard,
            });
        }

        let (tracking_error, smape_value) = match self.reference_gap()? {
            Some((e, s)) => (Some(e), Some(s)),
            None => (None, None),
        };
        Ok(EpochRecord {
            epoch: self.epoch,
            loss,
            tracking_error,
            residual_inf: residual,
            total_nfe: step.total_nfe,
            span_nfe: step.span_nfe,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            smape: smape_value,
        })
    }

    /// `‖B − B̄‖₂` over all trajectories and the SMAPE against a fresh
    /// sequential solve, if a reference solver is configured.
    pub fn reference_gap(&mut self) -> Result<Option<(f64, f64)>> {
        let Some(spec) = self.setup.reference else {
            return Ok(None);
        };
        let field = &self.field;
        let fresh = per_state(&self.states, &mut self.monitor, |s, l| {
            rollout(field, s.z0(), s.grid(), &spec, l)
        })?;
        let mut sq = 0.0;
        let mut tracked = Vec::new();
        let mut truth = Vec::new();
        for (s, f) in self.states.iter().zip(&fresh) {
            for (b, r) in s.nodes().iter().zip(f) {
                sq += (b - r).norm_squared();
            }
            tracked.extend_from_slice(s.nodes());
            truth.extend_from_slice(f);
        }
        Ok(Some((sq.sqrt(), smape(&truth, &tracked)?)))
    }

    /// Run the configured number of epochs.
    pub fn train(&mut self) -> Result<TrackingTrace> {
        let mut trace = TrackingTrace::default();
        for _ in 0..self.cfg.epochs {
            trace.records.push(self.train_step()?);
        }
        Ok(trace)
    }
}

/// Sequential reference trainer: every epoch solves the whole batch as one
/// stacked system through the grid nodes, then takes the same adjoint
/// gradient and optimizer step as [`Trainer`].
pub struct BaselineTrainer<F, L> {
    field: F,
    objective: L,
    z0s: Vec<DVector<f64>>,
    grid: TimeGrid,
    solver: SolverSpec,
    adjoint: SolverSpec,
    optimizer: OptimizerState,
    epochs: usize,
    epoch: usize,
    pub forward: NfeLedger,
    pub backward: NfeLedger,
}

impl<F, L> BaselineTrainer<F, L>
where
    F: VectorField + Clone,
    L: Objective<F>,
{
    pub fn new(
        field: F,
        objective: L,
        z0s: &[DVector<f64>],
        grid: &TimeGrid,
        solver: SolverSpec,
        adjoint: SolverSpec,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        solver.validate()?;
        if z0s.is_empty() {
            return Err(Error::config("training needs at least one initial condition"));
        }
        Ok(Self {
            optimizer: OptimizerState::new(cfg.optimizer, cfg.learning_rate, field.param_count()),
            field,
            objective,
            z0s: z0s.to_vec(),
            grid: grid.clone(),
            solver,
            adjoint,
            epochs: cfg.epochs,
            epoch: 0,
            forward: NfeLedger::new(),
            backward: NfeLedger::new(),
        })
    }

    pub fn field(&self) -> &F {
        &self.field
    }

    /// Node states of every trajectory under the current parameters.
    pub fn solve(&self, ledger: &mut NfeLedger) -> Result<Vec<ShootingState>> {
        let stacked = StackedField::new(self.field.clone(), self.z0s.len());
        let traj = integrate_nodes(
            &stacked,
            &StackedField::<F>::stack(&self.z0s),
            self.grid.boundaries(),
            &self.solver,
            ledger,
        )?;
        let per_node: Vec<Vec<DVector<f64>>> = traj.states.iter().map(|z| stacked.unstack(z)).collect();
        (0..self.z0s.len())
            .map(|j| {
                let nodes = per_node.iter().map(|row| row[j].clone()).collect();
                let mut s = ShootingState::new(self.grid.clone(), nodes)?;
                s.set_residual(0.0);
                Ok(s)
            })
            .collect()
    }

    pub fn train_step(&mut self) -> Result<EpochRecord> {
        let clock = Instant::now();
        let mut step = NfeLedger::new();
        let states = self.solve(&mut step)?;
        self.forward.absorb(&step);

        let opts = AdjointOptions {
            backward: self.adjoint,
            residual_tol: 0.0,
        };
        let (loss, grad) = batch_gradient(&self.field, &self.objective, &states, &opts, &mut self.backward)?;
        self.optimizer.apply(&mut self.field, &grad)?;
        self.epoch += 1;
        Ok(EpochRecord {
            epoch: self.epoch,
            loss,
            tracking_error: None,
            residual_inf: 0.0,
            total_nfe: step.total_nfe,
            span_nfe: step.span_nfe,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            smape: None,
        })
    }

    pub fn train(&mut self) -> Result<TrackingTrace> {
        let mut trace = TrackingTrace::default();
        for _ in 0..self.epochs {
            trace.records.push(self.train_step()?);
        }
        Ok(trace)
    }
}

/// Mean tracking error per learning rate and the fitted log-log slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub eta: f64,
    pub mean_tracking_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub slope: f64,
}

impl ScalingReport {
    /// Error ratio between consecutive rows, larger η over smaller.
    pub fn halving_ratios(&self) -> Vec<f64> {
        self.rows
            .windows(2)
            .map(|w| w[0].mean_tracking_error / w[1].mean_tracking_error)
            .collect()
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// For every η, train a fresh copy of `field` with gradient descent for
/// `epochs_per_eta` steps and average the tracking error against
/// `setup.reference`. Rows come back sorted by decreasing η; the slope is
/// fitted over the positive rates.
pub fn tracking_scaling_experiment<F, L>(
    field: &F,
    objective: &L,
    z0s: &[DVector<f64>],
    grid: &TimeGrid,
    setup: &TrackingSetup,
    etas: &[f64],
    epochs_per_eta: usize,
) -> Result<ScalingReport>
where
    F: VectorField + Clone,
    L: Objective<F> + Clone,
{
    let positive: Vec<f64> = etas.iter().copied().filter(|e| *e > 0.0).collect();
    if positive.len() < 3 {
        return Err(Error::config("scaling experiment needs at least 3 positive learning rates"));
    }
    let (lo, hi) = positive
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), e| (lo.min(*e), hi.max(*e)));
    if hi < 4.0 * lo {
        return Err(Error::config("learning rates must span at least a factor of 4"));
    }
    if setup.reference.is_none() {
        return Err(Error::config("scaling experiment needs a reference solver"));
    }
    let mut sorted = etas.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut rows = Vec::with_capacity(sorted.len());
    for eta in sorted {
        let mut trainer = Trainer::new(
            field.clone(),
            objective.clone(),
            z0s,
            grid,
            setup.clone(),
            TrainConfig::gd(eta, epochs_per_eta),
        )?;
        let trace = trainer.train()?;
        let errors: Vec<f64> = trace.records.iter().filter_map(|r| r.tracking_error).collect();
        rows.push(ScalingRow {
            eta,
            mean_tracking_error: errors.iter().sum::<f64>() / errors.len() as f64,
        });
    }
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.eta > 0.0)
        .map(|r| (r.eta, r.mean_tracking_error))
        .collect();
    Ok(ScalingReport {
        slope: loglog_slope(&points),
        rows,
    })
}
