use nalgebra::{DMatrix, DVector};

use super::VectorField;
use crate::error::Result;

/// `copies` independent states of one field integrated as a single system
/// with shared parameters, the way a batched solver sees them.
#[derive(Debug, Clone)]
pub struct StackedField<F> {
    inner: F,
    copies: usize,
}

impl<F: VectorField> StackedField<F> {
    pub fn new(inner: F, copies: usize) -> Self {
        Self { inner, copies }
    }

    pub fn inner(&self) -> &F {
        &self.inner
    }

    /// Concatenate per-copy states.
    pub fn stack(states: &[DVector<f64>]) -> DVector<f64> {
        let total = states.iter().map(|s| s.len()).sum();
        DVector::from_iterator(total, states.iter().flat_map(|s| s.iter().copied()))
    }

    /// Split a stacked state back into copies.
    pub fn unstack(&self, z: &DVector<f64>) -> Vec<DVector<f64>> {
        let n = self.inner.dim();
        (0..self.copies).map(|j| z.rows(j * n, n).into_owned()).collect()
    }

    fn blocks<'a>(&'a self, z: &'a DVector<f64>) -> impl Iterator<Item = DVector<f64>> + 'a {
        let n = self.inner.dim();
        (0..self.copies).map(move |j| z.rows(j * n, n).into_owned())
    }
}

impl<F: VectorField> VectorField for StackedField<F> {
    fn dim(&self) -> usize {
        self.inner.dim() * self.copies
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.inner.set_params(params)
    }

    fn eval(&self, t: f64, z: &DVector<f64>) -> DVector<f64> {
        let parts: Vec<_> = self.blocks(z).map(|b| self.inner.eval(t, &b)).collect();
        Self::stack(&parts)
    }

    fn jac_z(&self, t: f64, z: &DVector<f64>) -> DMatrix<f64> {
        let n = self.inner.dim();
        let mut jac = DMatrix::zeros(self.dim(), self.dim());
        for (j, b) in self.blocks(z).enumerate() {
            jac.view_mut((j * n, j * n), (n, n)).copy_from(&self.inner.jac_z(t, &b));
        }
        jac
    }

    fn jvp_z(&self, t: f64, z: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let n = self.inner.dim();
        let parts: Vec<_> = self
            .blocks(z)
            .enumerate()
            .map(|(j, b)| self.inner.jvp_z(t, &b, &v.rows(j * n, n).into_owned()))
            .collect();
        Self::stack(&parts)
    }

    fn vjp(&self, t: f64, z: &DVector<f64>, w: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = self.inner.dim();
        let mut gp = DVector::zeros(self.param_count());
        let mut gz = Vec::with_capacity(self.copies);
        for (j, b) in self.blocks(z).enumerate() {
            let (a, p) = self.inner.vjp(t, &b, &w.rows(j * n, n).into_owned());
            gz.push(a);
            gp += p;
        }
        (Self::stack(&gz), gp)
    }

    fn vjp_z(&self, t: f64, z: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.vjp(t, z, w).0
    }

    fn vjp_params(&self, t: f64, z: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.vjp(t, z, w).1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{finite_difference_jacobian, BuiltinField};
    use nalgebra::dvector;

    #[test]
    fn blocks_act_independently() {
        let f = StackedField::new(BuiltinField::vanderpol(1.0), 3);
        let parts = vec![dvector![1.0, 0.5], dvector![-2.0, 0.1], dvector![0.0, 0.0]];
        let z = StackedField::<BuiltinField>::stack(&parts);
        let out = f.unstack(&f.eval(0.0, &z));
        for (p, o) in parts.iter().zip(&out) {
            assert_eq!(o, &f.inner().eval(0.0, p));
        }
        let fd = finite_difference_jacobian(&f, 0.0, &z, 1e-6);
        assert!((f.jac_z(0.0, &z) - fd).amax() < 1e-6);
    }

    #[test]
    fn parameter_cotangents_add_up() {
        let f = StackedField::new(BuiltinField::growth(-0.5), 2);
        let z = dvector![1.0, 2.0];
        let w = dvector![3.0, -1.0];
        // Σ_j w_j z_j
        assert_eq!(f.vjp_params(0.0, &z, &w), dvector![1.0]);
        assert_eq!(f.vjp_z(0.0, &z, &w), dvector![-1.5, 0.5]);
    }
}
