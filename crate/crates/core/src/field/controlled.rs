use nalgebra::{DMatrix, DVector};

use super::{MlpField, VectorField};
use crate::error::{Error, Result};

/// Plant dynamics `f(t, z, u)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Plant {
    /// `q̇ = p, ṗ = u`, state `z = [q, p]`.
    Mechanical1Dof,
    /// `ż = A z + B u`
    Linear { a: DMatrix<f64>, b: DMatrix<f64> },
}

impl Plant {
    pub fn state_dim(&self) -> usize {
        match self {
            Plant::Mechanical1Dof => 2,
            Plant::Linear { a, .. } => a.nrows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Plant::Mechanical1Dof => 1,
            Plant::Linear { b, .. } => b.ncols(),
        }
    }

    fn eval(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self {
            Plant::Mechanical1Dof => DVector::from_vec(vec![z[1], u[0]]),
            Plant::Linear { a, b } => a * z + b * u,
        }
    }

    fn jac_z(&self) -> DMatrix<f64> {
        match self {
            Plant::Mechanical1Dof => DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            Plant::Linear { a, .. } => a.clone(),
        }
    }

    fn jac_u(&self) -> DMatrix<f64> {
        match self {
            Plant::Mechanical1Dof => DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            Plant::Linear { b, .. } => b.clone(),
        }
    }

    fn jvp_z(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Plant::Mechanical1Dof => DVector::from_vec(vec![v[1], 0.0]),
            Plant::Linear { a, .. } => a * v,
        }
    }

    fn jvp_u(&self, du: &DVector<f64>) -> DVector<f64> {
        match self {
            Plant::Mechanical1Dof => DVector::from_vec(vec![0.0, du[0]]),
            Plant::Linear { b, .. } => b * du,
        }
    }

    fn vjp_z(&self, w: &DVector<f64>) -> DVector<f64> {
        match self {
            Plant::Mechanical1Dof => DVector::from_vec(vec![0.0, w[0]]),
            Plant::Linear { a, .. } => a.tr_mul(w),
        }
    }

    fn vjp_u(&self, w: &DVector<f64>) -> DVector<f64> {
        match self {
            Plant::Mechanical1Dof => DVector::from_vec(vec![w[1]]),
            Plant::Linear { b, .. } => b.tr_mul(w),
        }
    }
}

/// Closed loop `ż = f(t, z, π_θ(z))`; the parameters are the controller's.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlledField {
    plant: Plant,
    controller: MlpField,
}

impl ControlledField {
    pub fn new(plant: Plant, controller: MlpField) -> Result<Self> {
        if let Plant::Linear { a, b } = &plant {
            if !a.is_square() || b.nrows() != a.nrows() {
                return Err(Error::config(format!(
                    "plant matrices A {}x{} and B {}x{} are inconsistent",
                    a.nrows(),
                    a.ncols(),
                    b.nrows(),
                    b.ncols()
                )));
            }
        }
        if controller.input_dim() != plant.state_dim() {
            return Err(Error::config(format!(
                "controller input width {} does not match state dimension {}",
                controller.input_dim(),
                plant.state_dim()
            )));
        }
        if controller.output_dim() != plant.input_dim() {
            return Err(Error::config(format!(
                "controller output width {} does not match plant input dimension {}",
                controller.output_dim(),
                plant.input_dim()
            )));
        }
        Ok(Self { plant, controller })
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn controller(&self) -> &MlpField {
        &self.controller
    }

    pub fn control(&self, z: &DVector<f64>) -> DVector<f64> {
        self.controller.output(z)
    }
}

impl VectorField for ControlledField {
    fn dim(&self) -> usize {
        self.plant.state_dim()
    }

    fn param_count(&self) -> usize {
        self.controller.flat_len()
    }

    fn params(&self) -> Vec<f64> {
        self.controller.flat()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.controller.set_flat(params)
    }

    fn eval(&self, _t: f64, z: &DVector<f64>) -> DVector<f64> {
        self.plant.eval(z, &self.controller.output(z))
    }

    fn jac_z(&self, t: f64, z: &DVector<f64>) -> DMatrix<f64> {
        self.eval_with_jac(t, z).1
    }

    fn eval_with_jac(&self, _t: f64, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let tape = self.controller.forward(z);
        let du_dz = self.controller.jacobian(&tape);
        let f = self.plant.eval(z, tape.output());
        let jac = self.plant.jac_z() + self.plant.jac_u() * du_dz;
        (f, jac)
    }

    fn jvp_z(&self, t: f64, z: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.eval_with_jvp(t, z, v).1
    }

    fn eval_with_jvp(&self, _t: f64, z: &DVector<f64>, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let tape = self.controller.forward(z);
        let du = self.controller.jvp_input(&tape, v);
        let f = self.plant.eval(z, tape.output());
        (f, self.plant.jvp_z(v) + self.plant.jvp_u(&du))
    }

    fn vjp_z(&self, t: f64, z: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.vjp(t, z, w).0
    }

    fn vjp_params(&self, t: f64, z: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.vjp(t, z, w).1
    }

    fn vjp(&self, _t: f64, z: &DVector<f64>, w: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let tape = self.controller.forward(z);
        let wu = self.plant.vjp_u(w);
        let (gz, gtheta) = self.controller.vjp(&tape, &wu);
        (self.plant.vjp_z(w) + gz, gtheta)
    }
}
