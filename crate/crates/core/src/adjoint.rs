//! Parameter gradients of node-decomposed losses at a converged `B*`.
//!
//! Both analytic paths integrate the costate backward one sub-interval at a
//! time, reading `z(t)` from a natural cubic spline through the shooting
//! parameters instead of re-solving the forward problem:
//!
//! * the interpolated adjoint carries `λ` continuously and adds the node
//!   cost gradient at every node;
//! * the implicit path first forms `v = c (I + R + … + R^N)`, where `R` is the
//!   block shift built from the sub-interval sensitivities, and then starts
//!   every sub-interval from its own `v_{n+1}` independently.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::ode::{rollout, solve_system, EvalCount, NfeLedger, OdeSystem, SolverSpec, TimeGrid};
use crate::sensitivity::batch_flow_with_sensitivity;
use crate::shooting::ShootingState;

/// Natural cubic spline through vector-valued knots.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline {
    knots: Vec<f64>,
    values: Vec<DVector<f64>>,
    /// Second derivatives at the knots.
    moments: Vec<DVector<f64>>,
}

pub fn fit_natural_cubic(times: &[f64], values: &[DVector<f64>]) -> Result<CubicSpline> {
    CubicSpline::fit(times, values)
}

impl CubicSpline {
    pub fn fit(times: &[f64], values: &[DVector<f64>]) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::config(format!(
                "spline has {} times but {} values",
                times.len(),
                values.len()
            )));
        }
        if times.len() < 3 {
            return Err(Error::config("spline needs at least 3 nodes"));
        }
        if let Some(i) = times.windows(2).position(|w| !(w[0] < w[1])) {
            return Err(Error::config(format!(
                "spline times must be strictly increasing (nodes {i} and {}: {} then {})",
                i + 1,
                times[i],
                times[i + 1]
            )));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) {
            return Err(Error::config("spline values have mixed dimensions"));
        }

        // Thomas algorithm on the interior moments; natural ends M_0 = M_N = 0.
        let n = times.len() - 1;
        let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        let mut moments = vec![DVector::zeros(dim); n + 1];
        if n >= 2 {
            let m = n - 1;
            let mut diag = vec![0.0; m];
            let mut rhs: Vec<DVector<f64>> = Vec::with_capacity(m);
            for i in 1..n {
                diag[i - 1] = 2.0 * (h[i - 1] + h[i]);
                let slope_r = (&values[i + 1] - &values[i]) / h[i];
                let slope_l = (&values[i] - &values[i - 1]) / h[i - 1];
                rhs.push((slope_r - slope_l) * 6.0);
            }
            for k in 1..m {
                let w = h[k] / diag[k - 1];
                diag[k] -= w * h[k];
                let prev = rhs[k - 1].clone();
                rhs[k] -= prev * w;
            }
            moments[m] = &rhs[m - 1] / diag[m - 1];
            for k in (0..m - 1).rev() {
                moments[k + 1] = (&rhs[k] - &moments[k + 2] * h[k + 1]) / diag[k];
            }
        }
        Ok(Self {
            knots: times.to_vec(),
            values: values.to_vec(),
            moments,
        })
    }

    /// Spline through the shooting parameters on their grid.
    pub fn through_state(state: &ShootingState) -> Result<Self> {
        Self::fit(state.grid().boundaries(), state.nodes())
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn interval(&self, t: f64) -> usize {
        let last = self.knots.len() - 2;
        match self.knots.binary_search_by(|k| k.total_cmp(&t)) {
            Ok(i) => i.min(last),
            Err(0) => 0,
            Err(i) => (i - 1).min(last),
        }
    }

    /// Value at `t`; outside the knots the end pieces are extended.
    pub fn eval(&self, t: f64) -> DVector<f64> {
        if let Ok(i) = self.knots.binary_search_by(|k| k.total_cmp(&t)) {
            return self.values[i].clone();
        }
        let i = self.interval(t);
        let (t0, t1) = (self.knots[i], self.knots[i + 1]);
        let h = t1 - t0;
        let a = t1 - t;
        let b = t - t0;
        let (m0, m1) = (&self.moments[i], &self.moments[i + 1]);
        m0 * (a * a * a / (6.0 * h))
            + m1 * (b * b * b / (6.0 * h))
            + (&self.values[i] / h - m0 * (h / 6.0)) * a
            + (&self.values[i + 1] / h - m1 * (h / 6.0)) * b
    }

    pub fn derivative(&self, t: f64) -> DVector<f64> {
        let i = self.interval(t);
        let (t0, t1) = (self.knots[i], self.knots[i + 1]);
        let h = t1 - t0;
        let a = t1 - t;
        let b = t - t0;
        let (m0, m1) = (&self.moments[i], &self.moments[i + 1]);
        -m0 * (a * a / (2.0 * h)) + m1 * (b * b / (2.0 * h))
            + (&self.values[i + 1] - &self.values[i]) / h
            - (m1 - m0) * (h / 6.0)
    }

    pub fn second_derivative(&self, t: f64) -> DVector<f64> {
        let i = self.interval(t);
        let (t0, t1) = (self.knots[i], self.knots[i + 1]);
        let h = t1 - t0;
        (&self.moments[i] * (t1 - t) + &self.moments[i + 1] * (t - t0)) / h
    }

    /// Rough bound on the interpolation error: a spline through every other
    /// knot is compared with this one at the skipped knots, and the gap is
    /// scaled down by 16 for the halved spacing. `None` below 5 knots.
    pub fn error_estimate(&self) -> Option<f64> {
        if self.knots.len() < 5 {
            return None;
        }
        let mut idx: Vec<usize> = (0..self.knots.len()).step_by(2).collect();
        if *idx.last()? != self.knots.len() - 1 {
            idx.push(self.knots.len() - 1);
        }
        let times: Vec<f64> = idx.iter().map(|&i| self.knots[i]).collect();
        let values: Vec<_> = idx.iter().map(|&i| self.values[i].clone()).collect();
        let coarse = Self::fit(&times, &values).ok()?;
        let gap = (1..self.knots.len())
            .step_by(2)
            .map(|i| (coarse.eval(self.knots[i]) - &self.values[i]).amax())
            .fold(0.0, f64::max);
        Some(gap / 16.0)
    }
}

/// Costate and accumulated parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState {
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
}

struct AdjointSystem<'a, F: ?Sized> {
    field: &'a F,
    spline: &'a CubicSpline,
    n: usize,
    p: usize,
}

impl<F: VectorField + ?Sized> OdeSystem for AdjointSystem<'_, F> {
    fn len(&self) -> usize {
        self.n + self.p
    }

    fn cost(&self) -> EvalCount {
        EvalCount::new(0, 1, 0)
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let z = self.spline.eval(t);
        let lambda = DVector::from_column_slice(&y[..self.n]);
        let (gz, gp) = self.field.vjp(t, &z, &lambda);
        for (d, g) in dy[..self.n].iter_mut().zip(gz.as_slice()) {
            *d = -g;
        }
        for (d, g) in dy[self.n..].iter_mut().zip(gp.as_slice()) {
            *d = -g;
        }
    }
}

/// Integrate `(λ, μ)` from `span.1` back to `span.0`.
fn backward_sub_interval<F: VectorField + ?Sized>(
    field: &F,
    spline: &CubicSpline,
    start: &AdjointState,
    span: (f64, f64),
    spec: &SolverSpec,
) -> Result<(AdjointState, EvalCount)> {
    if start.lambda.iter().all(|v| *v == 0.0) {
        return Ok((start.clone(), EvalCount::default()));
    }
    let sys = AdjointSystem {
        field,
        spline,
        n: field.dim(),
        p: field.param_count(),
    };
    let mut y0 = start.lambda.as_slice().to_vec();
    y0.extend_from_slice(start.mu.as_slice());
    let raw = solve_system(&sys, &y0, span.1, &[span.0], spec)
        .map_err(|e| e.with_context("adjoint dynamics"))?;
    let y = raw.last();
    Ok((
        AdjointState {
            lambda: DVector::from_column_slice(&y[..sys.n]),
            mu: DVector::from_column_slice(&y[sys.n..]),
        },
        sys.cost().times(raw.calls),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    InterpolatedAdjoint,
    Implicit,
    FiniteDifference,
}

impl GradientMethod {
    pub fn name(self) -> &'static str {
        match self {
            GradientMethod::InterpolatedAdjoint => "interpolated_adjoint",
            GradientMethod::Implicit => "implicit",
            GradientMethod::FiniteDifference => "finite_difference",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub grad: DVector<f64>,
    pub method: GradientMethod,
    /// Residual of `B` the gradient was taken at.
    pub residual: Option<f64>,
    pub spline_error: Option<f64>,
    /// Gradient with respect to the initial state, where available.
    pub initial_state_grad: Option<DVector<f64>>,
}

impl GradientReport {
    pub fn relative_error(&self, reference: &GradientReport) -> f64 {
        relative_error(&self.grad, &reference.grad)
    }

    pub fn row(&self, reference: Option<&GradientReport>) -> GradientRow {
        GradientRow {
            method: self.method.name().to_string(),
            grad_norm: self.grad.norm(),
            max_component: self.grad.amax(),
            fd_relative_error: reference.map(|r| self.relative_error(r)),
        }
    }
}

/// `‖a − b‖ / ‖b‖`, or the absolute gap when `b` vanishes.
pub fn relative_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let gap = (a - b).norm();
    let scale = b.norm();
    if scale == 0.0 {
        gap
    } else {
        gap / scale
    }
}

/// One line of a gradient comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRow {
    pub method: String,
    pub grad_norm: f64,
    pub max_component: f64,
    pub fd_relative_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointOptions {
    pub backward: SolverSpec,
    /// Largest residual accepted as converged.
    pub residual_tol: f64,
}

impl Default for AdjointOptions {
    fn default() -> Self {
        Self {
            backward: SolverSpec::dopri5(1e-7, 1e-7),
            residual_tol: 1e-6,
        }
    }
}

fn check_node_grads(state: &ShootingState, grads: &[DVector<f64>]) -> Result<()> {
    if grads.len() != state.intervals() + 1 {
        return Err(Error::config(format!(
            "expected {} node cost gradients, got {}",
            state.intervals() + 1,
            grads.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| g.len() != state.dim()) {
        return Err(Error::config(format!(
            "node cost gradient {i} has dimension {}, expected {}",
            grads[i].len(),
            state.dim()
        )));
    }
    Ok(())
}

/// Backward adjoint with jumps at the nodes; returns `∇_θ L`.
pub fn interpolated_adjoint_grad<F: VectorField + ?Sized>(
    field: &F,
    state: &ShootingState,
    node_cost_grads: &[DVector<f64>],
    opts: &AdjointOptions,
    ledger: &mut NfeLedger,
) -> Result<GradientReport> {
    state.require_converged(opts.residual_tol)?;
    check_node_grads(state, node_cost_grads)?;
    let spline = CubicSpline::through_state(state)?;
    let n = state.intervals();
    let mut adj = AdjointState {
        lambda: node_cost_grads[n].clone(),
        mu: DVector::zeros(field.param_count()),
    };
    for k in (0..n).rev() {
        let (next, cost) = backward_sub_interval(field, &spline, &adj, state.grid().span(k), &opts.backward)
            .map_err(|e| e.in_batch(k))?;
        ledger.record_sequential(cost);
        adj = next;
        adj.lambda += &node_cost_grads[k];
    }
    Ok(GradientReport {
        grad: adj.mu,
        method: GradientMethod::InterpolatedAdjoint,
        residual: state.residual(),
        spline_error: spline.error_estimate(),
        initial_state_grad: Some(adj.lambda),
    })
}

/// Strictly lower block-bidiagonal operator with `R[n+1][n] = J_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockShift {
    blocks: Vec<DMatrix<f64>>,
    dim: usize,
}

impl BlockShift {
    pub fn new(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        let dim = blocks.first().map_or(0, |b| b.nrows());
        if blocks.iter().any(|b| b.nrows() != dim || b.ncols() != dim) {
            return Err(Error::config("block shift needs equal square blocks"));
        }
        Ok(Self { blocks, dim })
    }

    /// Number of block rows, `N + 1`.
    pub fn block_rows(&self) -> usize {
        self.blocks.len() + 1
    }

    /// `R x` on a stack of block rows.
    pub fn apply(&self, x: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut out = vec![DVector::zeros(self.dim); self.block_rows()];
        for (k, j) in self.blocks.iter().enumerate() {
            out[k + 1] = j * &x[k];
        }
        out
    }

    /// `(cᵀ R)ᵀ = Rᵀ c`.
    pub fn apply_transpose(&self, c: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut out = vec![DVector::zeros(self.dim); self.block_rows()];
        for (k, j) in self.blocks.iter().enumerate() {
            out[k] = j.tr_mul(&c[k + 1]);
        }
        out
    }

    /// `(I − R)^{-T} c` as the terminating series `Σ_k (Rᵀ)^k c`.
    pub fn neumann_transpose(&self, c: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut sum = c.to_vec();
        let mut term = c.to_vec();
        for _ in 0..self.blocks.len() {
            term = self.apply_transpose(&term);
            for (s, t) in sum.iter_mut().zip(&term) {
                *s += t;
            }
        }
        sum
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let rows = self.block_rows() * self.dim;
        let mut m = DMatrix::zeros(rows, rows);
        for (k, j) in self.blocks.iter().enumerate() {
            m.view_mut(((k + 1) * self.dim, k * self.dim), (self.dim, self.dim))
                .copy_from(j);
        }
        m
    }
}

/// Implicit-function gradient at `B*`; `loss_grad_b` holds `∂L/∂b_n` per row.
pub fn implicit_gradient<F: VectorField + ?Sized>(
    field: &F,
    state: &ShootingState,
    spec: &SolverSpec,
    loss_grad_b: &[DVector<f64>],
    opts: &AdjointOptions,
    ledger: &mut NfeLedger,
) -> Result<GradientReport> {
    state.require_converged(opts.residual_tol)?;
    check_node_grads(state, loss_grad_b)?;
    let n = state.intervals();
    let sens = batch_flow_with_sensitivity(field, &state.nodes()[..n], &state.grid().spans(), spec, ledger)?;
    let shift = BlockShift::new(sens.sensitivities)?;
    let v = shift.neumann_transpose(loss_grad_b);

    let spline = CubicSpline::through_state(state)?;
    let p = field.param_count();
    let parts: Vec<(DVector<f64>, EvalCount)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let start = AdjointState {
                lambda: v[k + 1].clone(),
                mu: DVector::zeros(p),
            };
            backward_sub_interval(field, &spline, &start, state.grid().span(k), &opts.backward)
                .map(|(s, c)| (s.mu, c))
                .map_err(|e| e.in_batch(k))
        })
        .collect::<Result<_>>()?;
    ledger.record_parallel(parts.iter().map(|(_, c)| *c));
    let grad = parts
        .into_iter()
        .fold(DVector::zeros(p), |acc, (mu, _)| acc + mu);
    Ok(GradientReport {
        grad,
        method: GradientMethod::Implicit,
        residual: state.residual(),
        spline_error: spline.error_estimate(),
        initial_state_grad: Some(v[0].clone()),
    })
}

/// Central differences of an arbitrary objective over every parameter.
pub fn finite_difference_grad_with<F, L>(field: &F, step: f64, objective: L) -> Result<GradientReport>
where
    F: VectorField + Clone,
    L: Fn(&F) -> Result<f64> + Sync,
    F: Sync,
{
    if !(step > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {step}")));
    }
    let theta = field.params();
    let grad: Vec<f64> = (0..theta.len())
        .into_par_iter()
        .map(|k| {
            let mut probe = field.clone();
            let mut shifted = theta.clone();
            shifted[k] = theta[k] + step;
            probe.set_params(&shifted)?;
            let up = objective(&probe)?;
            shifted[k] = theta[k] - step;
            probe.set_params(&shifted)?;
            let down = objective(&probe)?;
            Ok((up - down) / (2.0 * step))
        })
        .collect::<Result<_>>()?;
    Ok(GradientReport {
        grad: DVector::from_vec(grad),
        method: GradientMethod::FiniteDifference,
        residual: None,
        spline_error: None,
        initial_state_grad: None,
    })
}

/// Finite differences of `loss_fn(field, nodes)` with nodes from a
/// sequential solve on `grid`.
pub fn finite_difference_grad<F, L>(
    field: &F,
    z0: &DVector<f64>,
    grid: &TimeGrid,
    spec: &SolverSpec,
    step: f64,
    loss_fn: L,
) -> Result<GradientReport>
where
    F: VectorField + Clone + Sync,
    L: Fn(&F, &[DVector<f64>]) -> f64 + Sync,
{
    finite_difference_grad_with(field, step, |f| {
        let nodes = rollout(f, z0, grid, spec, &mut NfeLedger::new())?;
        Ok(loss_fn(f, &nodes))
    })
}
