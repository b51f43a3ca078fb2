use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_len, VectorField};
use crate::error::{Error, Result};

/// Closed-form fields with analytic Jacobians.
#[derive(Debug, Clone, PartialEq)]
pub enum BuiltinKind {
    /// `ṗ = q, q̇ = α(1 − p²)q − p`
    VanDerPol { alpha: f64 },
    /// `ṗ = q, q̇ = αp − 2p³ + (1 − q²)q`
    RayleighDuffing { alpha: f64 },
    /// `ż = A z + c`
    Affine { a: DMatrix<f64>, c: DVector<f64> },
    /// `ż = A z + B u` with the input `u` as trainable parameters.
    LinearControlled { a: DMatrix<f64>, b: DMatrix<f64>, u: DVector<f64> },
    /// `q̇ = p, ṗ = −k q − c p`
    Mechanical1Dof { stiffness: f64, damping: f64 },
    /// Scalar `ż = θ z` with the rate `θ` trainable.
    Growth { rate: f64 },
}

/// Serializable description used by presets and [`BuiltinField::make`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum BuiltinSpec {
    Vanderpol {
        #[serde(default = "one")]
        alpha: f64,
    },
    RayleighDuffing {
        #[serde(default = "one")]
        alpha: f64,
    },
    /// Row-major matrix entries.
    Linear { a: Vec<Vec<f64>> },
    LinearControlled {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        #[serde(default)]
        u: Vec<f64>,
    },
    Mechanical1dof {
        #[serde(default = "one")]
        stiffness: f64,
        #[serde(default)]
        damping: f64,
    },
    Growth {
        rate: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn matrix_from_rows(what: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(Error::config(format!("matrix {what} is empty")));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(Error::config(format!(
            "matrix {what} row {i} has {} entries, expected {ncols}",
            r.len()
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltinField {
    kind: BuiltinKind,
}

impl BuiltinField {
    pub fn make(spec: &BuiltinSpec) -> Result<Self> {
        match spec {
            BuiltinSpec::Vanderpol { alpha } => Ok(Self::vanderpol(*alpha)),
            BuiltinSpec::RayleighDuffing { alpha } => Ok(Self::rayleigh_duffing(*alpha)),
            BuiltinSpec::Linear { a } => Self::linear(matrix_from_rows("A", a)?),
            BuiltinSpec::LinearControlled { a, b, u } => {
                let b = matrix_from_rows("B", b)?;
                let u = if u.is_empty() {
                    DVector::zeros(b.ncols())
                } else {
                    DVector::from_column_slice(u)
                };
                Self::linear_controlled(matrix_from_rows("A", a)?, b, u)
            }
            BuiltinSpec::Mechanical1dof { stiffness, damping } => {
                Ok(Self::mechanical_1dof(*stiffness, *damping))
            }
            BuiltinSpec::Growth { rate } => Ok(Self::growth(*rate)),
        }
    }

    pub fn kind(&self) -> &BuiltinKind {
        &self.kind
    }

    pub fn vanderpol(alpha: f64) -> Self {
        Self {
            kind: BuiltinKind::VanDerPol { alpha },
        }
    }

    pub fn rayleigh_duffing(alpha: f64) -> Self {
        Self {
            kind: BuiltinKind::RayleighDuffing { alpha },
        }
    }

    pub fn linear(a: DMatrix<f64>) -> Result<Self> {
        let c = DVector::zeros(a.nrows());
        Self::affine(a, c)
    }

    pub fn affine(a: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::config(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        check_len("offset c", c.len(), a.nrows())?;
        Ok(Self {
            kind: BuiltinKind::Affine { a, c },
        })
    }

    /// `ż = c`
    pub fn constant(c: DVector<f64>) -> Self {
        let n = c.len();
        Self {
            kind: BuiltinKind::Affine {
                a: DMatrix::zeros(n, n),
                c,
            },
        }
    }

    pub fn linear_controlled(a: DMatrix<f64>, b: DMatrix<f64>, u: DVector<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::config(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::config(format!(
                "B has {} rows, A has {}",
                b.nrows(),
                a.nrows()
            )));
        }
        check_len("input u", u.len(), b.ncols())?;
        Ok(Self {
            kind: BuiltinKind::LinearControlled { a, b, u },
        })
    }

    pub fn mechanical_1dof(stiffness: f64, damping: f64) -> Self {
        Self {
            kind: BuiltinKind::Mechanical1Dof { stiffness, damping },
        }
    }

    pub fn growth(rate: f64) -> Self {
        Self {
            kind: BuiltinKind::Growth { rate },
        }
    }
}

impl VectorField for BuiltinField {
    fn dim(&self) -> usize {
        match &self.kind {
            BuiltinKind::VanDerPol { .. }
            | BuiltinKind::RayleighDuffing { .. }
            | BuiltinKind::Mechanical1Dof { .. } => 2,
            BuiltinKind::Affine { a, .. } | BuiltinKind::LinearControlled { a, .. } => a.nrows(),
            BuiltinKind::Growth { .. } => 1,
        }
    }

    fn param_count(&self) -> usize {
        match &self.kind {
            BuiltinKind::LinearControlled { u, .. } => u.len(),
            BuiltinKind::Growth { .. } => 1,
            _ => 0,
        }
    }

    fn params(&self) -> Vec<f64> {
        match &self.kind {
            BuiltinKind::LinearControlled { u, .. } => u.as_slice().to_vec(),
            BuiltinKind::Growth { rate } => vec![*rate],
            _ => Vec::new(),
        }
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_len("parameter vector", params.len(), self.param_count())?;
        match &mut self.kind {
            BuiltinKind::LinearControlled { u, .. } => u.copy_from_slice(params),
            BuiltinKind::Growth { rate } => *rate = params[0],
            _ => {}
        }
        Ok(())
    }

    fn eval(&self, _t: f64, z: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            BuiltinKind::VanDerPol { alpha } => {
                let (p, q) = (z[0], z[1]);
                DVector::from_vec(vec![q, alpha * (1.0 - p * p) * q - p])
            }
            BuiltinKind::RayleighDuffing { alpha } => {
                let (p, q) = (z[0], z[1]);
                DVector::from_vec(vec![q, alpha * p - 2.0 * p.powi(3) + (1.0 - q * q) * q])
            }
            BuiltinKind::Affine { a, c } => a * z + c,
            BuiltinKind::LinearControlled { a, b, u } => a * z + b * u,
            BuiltinKind::Mechanical1Dof { stiffness, damping } => {
                let (q, p) = (z[0], z[1]);
                DVector::from_vec(vec![p, -stiffness * q - damping * p])
            }
            BuiltinKind::Growth { rate } => z * *rate,
        }
    }

    fn jac_z(&self, _t: f64, z: &DVector<f64>) -> DMatrix<f64> {
        match &self.kind {
            BuiltinKind::VanDerPol { alpha } => {
                let (p, q) = (z[0], z[1]);
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[0.0, 1.0, -2.0 * alpha * p * q - 1.0, alpha * (1.0 - p * p)],
                )
            }
            BuiltinKind::RayleighDuffing { alpha } => {
                let (p, q) = (z[0], z[1]);
                DMatrix::from_row_slice(2, 2, &[0.0, 1.0, alpha - 6.0 * p * p, 1.0 - 3.0 * q * q])
            }
            BuiltinKind::Affine { a, .. } | BuiltinKind::LinearControlled { a, .. } => a.clone(),
            BuiltinKind::Mechanical1Dof { stiffness, damping } => {
                DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -stiffness, -damping])
            }
            BuiltinKind::Growth { rate } => DMatrix::identity(z.len(), z.len()) * *rate,
        }
    }

    fn vjp_params(&self, _t: f64, z: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            BuiltinKind::LinearControlled { b, .. } => b.tr_mul(w),
            BuiltinKind::Growth { .. } => DVector::from_element(1, w.dot(z)),
            _ => DVector::zeros(0),
        }
    }
}
