//! Differentiable vector fields `f_θ(t, z)`.
//!
//! A field exposes its value, the state Jacobian `∂f/∂z` (dense or through
//! products) and the parameter cotangent `(∂f/∂θ)ᵀ w` in a canonical flat
//! parameter order.

mod builtin;
mod controlled;
mod mlp;
mod stacked;

pub use builtin::{BuiltinField, BuiltinKind, BuiltinSpec};
pub use controlled::{ControlledField, Plant};
pub use mlp::{Activation, MlpDocument, MlpField, MlpTape};
pub use stacked::StackedField;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub trait VectorField: Send + Sync {
    /// State dimension `n_z`.
    fn dim(&self) -> usize;

    /// Number of trainable parameters `n_θ`.
    fn param_count(&self) -> usize {
        0
    }

    fn params(&self) -> Vec<f64> {
        Vec::new()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "field has no parameters, got {}",
                params.len()
            )))
        }
    }

    fn eval(&self, t: f64, z: &DVector<f64>) -> DVector<f64>;

    /// Dense `∂f/∂z`, `n_z × n_z`.
    fn jac_z(&self, t: f64, z: &DVector<f64>) -> DMatrix<f64>;

    fn eval_with_jac(&self, t: f64, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (self.eval(t, z), self.jac_z(t, z))
    }

    /// `(∂f/∂z) v`
    fn jvp_z(&self, t: f64, z: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.jac_z(t, z) * v
    }

    fn eval_with_jvp(
        &self,
        t: f64,
        z: &DVector<f64>,
        v: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        (self.eval(t, z), self.jvp_z(t, z, v))
    }

    /// `(∂f/∂z)ᵀ w`
    fn vjp_z(&self, t: f64, z: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.jac_z(t, z).tr_mul(w)
    }

    /// `(∂f/∂θ)ᵀ w`, flat, length [`param_count`](Self::param_count).
    fn vjp_params(&self, _t: f64, _z: &DVector<f64>, _w: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.param_count())
    }

    /// Both cotangents at once.
    fn vjp(&self, t: f64, z: &DVector<f64>, w: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (self.vjp_z(t, z, w), self.vjp_params(t, z, w))
    }
}

pub(crate) fn check_len(what: &str, got: usize, expect: usize) -> Result<()> {
    if got == expect {
        Ok(())
    } else {
        Err(Error::config(format!(
            "{what} has length {got}, expected {expect}"
        )))
    }
}

/// Central-difference Jacobian of `f` at `z`; used by tests and diagnostics.
pub fn finite_difference_jacobian<F: VectorField + ?Sized>(
    field: &F,
    t: f64,
    z: &DVector<f64>,
    step: f64,
) -> DMatrix<f64> {
    let n = field.dim();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[j] += step;
        zm[j] -= step;
        let col = (field.eval(t, &zp) - field.eval(t, &zm)) / (2.0 * step);
        jac.set_column(j, &col);
    }
    jac
}
