//! Sub-interval flows with forward sensitivities.
//!
//! The state `z` and the sensitivity `v = ∂φ/∂b` are integrated as one
//! augmented system `ż = f(t, z)`, `v̇ = (∂f/∂z) v`, `v(s) = I`, so each stage
//! evaluates `f` once and shares it between both parts. Adaptive error
//! control looks at the state components only unless the spec asks for all,
//! which keeps the step sequence identical to a plain state integration.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::ode::{solve_system, EvalCount, NfeLedger, OdeSystem, SolverSpec};

/// How `(∂f/∂z) V` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JmpMode {
    /// One dense Jacobian-matrix product per stage.
    #[default]
    Fused,
    /// One Jacobian-vector product per column.
    Columns,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityResult {
    pub flows: Vec<DVector<f64>>,
    pub sensitivities: Vec<DMatrix<f64>>,
}

struct Augmented<'a, F: ?Sized> {
    field: &'a F,
    n: usize,
    cols: usize,
    mode: JmpMode,
}

impl<F: VectorField + ?Sized> OdeSystem for Augmented<'_, F> {
    fn len(&self) -> usize {
        self.n * (1 + self.cols)
    }

    fn error_len(&self) -> usize {
        self.n
    }

    fn cost(&self) -> EvalCount {
        match self.mode {
            JmpMode::Fused => EvalCount::new(1, 0, 1),
            JmpMode::Columns => EvalCount::new(1, self.cols as u64, 0),
        }
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let n = self.n;
        let z = DVector::from_column_slice(&y[..n]);
        let v = DMatrix::from_column_slice(n, self.cols, &y[n..]);
        match self.mode {
            JmpMode::Fused => {
                let (f, jac) = self.field.eval_with_jac(t, &z);
                dy[..n].copy_from_slice(f.as_slice());
                let dv = jac * v;
                dy[n..].copy_from_slice(dv.as_slice());
            }
            JmpMode::Columns => {
                if self.cols == 1 {
                    let (f, jv) = self.field.eval_with_jvp(t, &z, &v.column(0).into_owned());
                    dy[..n].copy_from_slice(f.as_slice());
                    dy[n..].copy_from_slice(jv.as_slice());
                } else {
                    dy[..n].copy_from_slice(self.field.eval(t, &z).as_slice());
                    for c in 0..self.cols {
                        let jv = self.field.jvp_z(t, &z, &v.column(c).into_owned());
                        dy[n * (1 + c)..n * (2 + c)].copy_from_slice(jv.as_slice());
                    }
                }
            }
        }
    }
}

/// Integrate `(z, v)` from `(b, v0)`; returns the flow, the propagated `v`
/// and the cost.
fn propagate<F: VectorField + ?Sized>(
    field: &F,
    b: &DVector<f64>,
    v0: &DMatrix<f64>,
    span: (f64, f64),
    spec: &SolverSpec,
    mode: JmpMode,
) -> Result<(DVector<f64>, DMatrix<f64>, EvalCount)> {
    let n = field.dim();
    if b.len() != n || v0.nrows() != n {
        return Err(Error::config(format!(
            "sensitivity input has dimension {} / {} rows, field has {n}",
            b.len(),
            v0.nrows()
        )));
    }
    if span.1 < span.0 {
        return Err(Error::config(format!(
            "sensitivity span needs t_a <= t_b, got ({}, {})",
            span.0, span.1
        )));
    }
    if span.0 == span.1 {
        return Ok((b.clone(), v0.clone(), EvalCount::default()));
    }
    let sys = Augmented {
        field,
        n,
        cols: v0.ncols(),
        mode,
    };
    let mut y0 = Vec::with_capacity(sys.len());
    y0.extend_from_slice(b.as_slice());
    y0.extend_from_slice(v0.as_slice());
    let raw = solve_system(&sys, &y0, span.0, &[span.1], spec)
        .map_err(|e| e.with_context("sensitivity dynamics"))?;
    let y = raw.last();
    let flow = DVector::from_column_slice(&y[..n]);
    let v = DMatrix::from_column_slice(n, v0.ncols(), &y[n..]);
    Ok((flow, v, sys.cost().times(raw.calls)))
}

/// `v` started from an arbitrary matrix `v0` instead of the identity.
pub fn flow_with_sensitivity_from<F: VectorField + ?Sized>(
    field: &F,
    b: &DVector<f64>,
    v0: &DMatrix<f64>,
    span: (f64, f64),
    spec: &SolverSpec,
    ledger: &mut NfeLedger,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (flow, v, cost) = propagate(field, b, v0, span, spec, JmpMode::Fused)?;
    ledger.record_sequential(cost);
    Ok((flow, v))
}

/// `(φ(b), Dφ(b))` over one span.
pub fn flow_with_sensitivity<F: VectorField + ?Sized>(
    field: &F,
    b: &DVector<f64>,
    span: (f64, f64),
    spec: &SolverSpec,
    ledger: &mut NfeLedger,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = field.dim();
    flow_with_sensitivity_from(field, b, &DMatrix::identity(n, n), span, spec, ledger)
}

/// Flows and sensitivities of many sub-intervals, concurrently.
pub fn batch_flow_with_sensitivity<F: VectorField + ?Sized>(
    field: &F,
    bs: &[DVector<f64>],
    spans: &[(f64, f64)],
    spec: &SolverSpec,
    ledger: &mut NfeLedger,
) -> Result<SensitivityResult> {
    batch_flow_with_sensitivity_mode(field, bs, spans, spec, JmpMode::Fused, ledger)
}

pub fn batch_flow_with_sensitivity_mode<F: VectorField + ?Sized>(
    field: &F,
    bs: &[DVector<f64>],
    spans: &[(f64, f64)],
    spec: &SolverSpec,
    mode: JmpMode,
    ledger: &mut NfeLedger,
) -> Result<SensitivityResult> {
    if bs.is_empty() {
        return Err(Error::config("sensitivity batch is empty"));
    }
    if bs.len() != spans.len() {
        return Err(Error::config(format!(
            "sensitivity batch has {} states but {} spans",
            bs.len(),
            spans.len()
        )));
    }
    let n = field.dim();
    let eye = DMatrix::identity(n, n);
    let out: Vec<_> = bs
        .par_iter()
        .zip(spans.par_iter())
        .enumerate()
        .map(|(i, (b, span))| propagate(field, b, &eye, *span, spec, mode).map_err(|e| e.in_batch(i)))
        .collect::<Result<_>>()?;
    ledger.record_parallel(out.iter().map(|o| o.2));
    let (flows, sensitivities) = out.into_iter().map(|(f, v, _)| (f, v)).unzip();
    Ok(SensitivityResult {
        flows,
        sensitivities,
    })
}

/// Flow and `Dφ(b)·direction` from a single-vector sensitivity integration.
pub fn flow_with_jvp<F: VectorField + ?Sized>(
    field: &F,
    b: &DVector<f64>,
    span: (f64, f64),
    spec: &SolverSpec,
    direction: &DVector<f64>,
    ledger: &mut NfeLedger,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let v0 = DMatrix::from_column_slice(direction.len(), 1, direction.as_slice());
    let (flow, v, cost) = propagate(field, b, &v0, span, spec, JmpMode::Columns)?;
    ledger.record_sequential(cost);
    Ok((flow, v.column(0).into_owned()))
}

/// `Dφ(b)·direction` without forming `Dφ`.
pub fn sequential_jvp_correction<F: VectorField + ?Sized>(
    field: &F,
    b: &DVector<f64>,
    span: (f64, f64),
    spec: &SolverSpec,
    direction: &DVector<f64>,
    ledger: &mut NfeLedger,
) -> Result<DVector<f64>> {
    flow_with_jvp(field, b, span, spec, direction, ledger).map(|(_, jv)| jv)
}
