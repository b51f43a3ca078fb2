//! Small fully connected network with analytic input Jacobian and manual
//! reverse pass for parameter cotangents.
//!
//! Parameters are flat-packed layer by layer in forward order, each layer's
//! weight matrix row-major followed by its bias.

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_len, VectorField};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => (-x.abs()).exp().ln_1p() + x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative at `x`, given `y = apply(x)`.
    fn slope(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Softplus => logistic(x),
            Activation::Identity => 1.0,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softplus => logistic(x),
            Activation::Identity => 1.0,
        }
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// JSON layout of a serialized network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpDocument {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpField {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
}

/// Per-layer inputs and activation slopes of one forward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    inputs: Vec<DVector<f64>>,
    slopes: Vec<DVector<f64>>,
    output: DVector<f64>,
}

impl MlpTape {
    pub fn output(&self) -> &DVector<f64> {
        &self.output
    }
}

impl MlpField {
    /// Zero-initialized network.
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("mlp needs at least input and output widths"));
        }
        if widths.contains(&0) {
            return Err(Error::config("mlp widths must be positive"));
        }
        check_len("activation list", activations.len(), widths.len() - 1)?;
        let weights = widths
            .windows(2)
            .map(|w| DMatrix::zeros(w[1], w[0]))
            .collect();
        let biases = widths[1..].iter().map(|&w| DVector::zeros(w)).collect();
        Ok(Self {
            widths,
            activations,
            weights,
            biases,
        })
    }

    /// Weights and biases uniform in `±1/√fan_in` from a seeded generator.
    pub fn init_uniform(widths: Vec<usize>, activations: Vec<Activation>, seed: u64) -> Result<Self> {
        let mut net = Self::new(widths, activations)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (w, b) in net.weights.iter_mut().zip(net.biases.iter_mut()) {
            let bound = 1.0 / (w.ncols() as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            // Row-major draw order so the stream matches the flat layout.
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    w[(i, j)] = dist.sample(&mut rng);
                }
            }
            for v in b.iter_mut() {
                *v = dist.sample(&mut rng);
            }
        }
        Ok(net)
    }

    pub fn from_document(doc: &MlpDocument) -> Result<Self> {
        let mut net = Self::new(doc.widths.clone(), doc.activations.clone())?;
        net.set_flat(&doc.params)?;
        Ok(net)
    }

    pub fn to_document(&self) -> MlpDocument {
        MlpDocument {
            widths: self.widths.clone(),
            activations: self.activations.clone(),
            params: self.flat(),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: MlpDocument =
            serde_json::from_str(s).map_err(|e| Error::config(format!("mlp json: {e}")))?;
        Self::from_document(&doc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("mlp document serializes")
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    pub fn flat_len(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    out.push(w[(i, j)]);
                }
            }
            out.extend(b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, params: &[f64]) -> Result<()> {
        check_len("mlp parameter vector", params.len(), self.flat_len())?;
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    w[(i, j)] = params[k];
                    k += 1;
                }
            }
            for v in b.iter_mut() {
                *v = params[k];
                k += 1;
            }
        }
        Ok(())
    }

    pub fn forward(&self, z: &DVector<f64>) -> MlpTape {
        debug_assert_eq!(z.len(), self.input_dim());
        let layers = self.weights.len();
        let mut inputs = Vec::with_capacity(layers);
        let mut slopes = Vec::with_capacity(layers);
        let mut x = z.clone();
        for ((w, b), act) in self.weights.iter().zip(&self.biases).zip(&self.activations) {
            let mut a = w * &x + b;
            let mut next = a.clone();
            for (y, v) in next.iter_mut().zip(a.iter_mut()) {
                *y = act.apply(*v);
                *v = act.slope(*v, *y);
            }
            inputs.push(x);
            slopes.push(a);
            x = next;
        }
        MlpTape {
            inputs,
            slopes,
            output: x,
        }
    }

    pub fn output(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut x = z.clone();
        for ((w, b), act) in self.weights.iter().zip(&self.biases).zip(&self.activations) {
            x = w * &x + b;
            x.apply(|v| *v = act.apply(*v));
        }
        x
    }

    /// Input Jacobian as the product of layer Jacobians `diag(σ'(a_l)) W_l`.
    pub fn jacobian(&self, tape: &MlpTape) -> DMatrix<f64> {
        let mut jac = DMatrix::identity(self.input_dim(), self.input_dim());
        for (w, d) in self.weights.iter().zip(&tape.slopes) {
            let mut layer = w * jac;
            for (i, di) in d.iter().enumerate() {
                layer.row_mut(i).scale_mut(*di);
            }
            jac = layer;
        }
        jac
    }

    /// `J v` without forming `J`.
    pub fn jvp_input(&self, tape: &MlpTape, v: &DVector<f64>) -> DVector<f64> {
        let mut x = v.clone();
        for (w, d) in self.weights.iter().zip(&tape.slopes) {
            x = (w * x).component_mul(d);
        }
        x
    }

    /// Reverse pass: `(Jᵀ w, (∂out/∂θ)ᵀ w)`.
    pub fn vjp(&self, tape: &MlpTape, w_out: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let layers = self.weights.len();
        let mut g_pre = Vec::with_capacity(layers);
        let mut g = w_out.clone();
        for l in (0..layers).rev() {
            let d = g.component_mul(&tape.slopes[l]);
            g = self.weights[l].tr_mul(&d);
            g_pre.push(d);
        }
        g_pre.reverse();
        let mut grad = Vec::with_capacity(self.flat_len());
        for (d, x) in g_pre.iter().zip(&tape.inputs) {
            let x = x.as_slice();
            for di in d.as_slice() {
                grad.extend(x.iter().map(|xj| di * xj));
            }
            grad.extend_from_slice(d.as_slice());
        }
        (g, DVector::from_vec(grad))
    }

    /// Output, input Jacobian and the tape for later cotangent passes.
    pub fn eval_with_derivatives(&self, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, MlpTape) {
        let tape = self.forward(z);
        let jac = self.jacobian(&tape);
        (tape.output.clone(), jac, tape)
    }
}

/// Autonomous field `ż = net(z)`; requires equal input and output widths.
impl VectorField for MlpField {
    fn dim(&self) -> usize {
        self.input_dim()
    }

    fn param_count(&self) -> usize {
        self.flat_len()
    }

    fn params(&self) -> Vec<f64> {
        self.flat()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.set_flat(params)
    }

    fn eval(&self, _t: f64, z: &DVector<f64>) -> DVector<f64> {
        self.output(z)
    }

    fn jac_z(&self, _t: f64, z: &DVector<f64>) -> DMatrix<f64> {
        self.jacobian(&self.forward(z))
    }

    fn eval_with_jac(&self, _t: f64, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (out, jac, _) = self.eval_with_derivatives(z);
        (out, jac)
    }

    fn jvp_z(&self, _t: f64, z: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.jvp_input(&self.forward(z), v)
    }

    fn eval_with_jvp(&self, _t: f64, z: &DVector<f64>, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let tape = self.forward(z);
        let jv = self.jvp_input(&tape, v);
        (tape.output, jv)
    }

    fn vjp_z(&self, _t: f64, z: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.vjp(&self.forward(z), w).0
    }

    fn vjp_params(&self, _t: f64, z: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.vjp(&self.forward(z), w).1
    }

    fn vjp(&self, _t: f64, z: &DVector<f64>, w: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        MlpField::vjp(self, &self.forward(z), w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::finite_difference_jacobian;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn two_layer(seed: u64) -> MlpField {
        MlpField::init_uniform(vec![3, 8, 3], vec![Activation::Tanh, Activation::Tanh], seed).unwrap()
    }

    #[test]
    fn affine_layer() {
        let mut net = MlpField::new(vec![2, 2], vec![Activation::Identity]).unwrap();
        net.set_flat(&[1.0, 2.0, 3.0, 4.0, 0.5, -0.5]).unwrap();
        let z = dvector![1.0, -1.0];
        let (out, jac, _) = net.eval_with_derivatives(&z);
        assert_eq!(out, dvector![-0.5, -1.5]);
        assert_eq!(jac, dmatrix![1.0, 2.0; 3.0, 4.0]);
    }

    #[test]
    fn tanh_at_origin_has_weight_jacobian() {
        let mut net = MlpField::new(vec![2, 2], vec![Activation::Tanh]).unwrap();
        net.set_flat(&[1.0, 2.0, 3.0, 4.0, 0.0, 0.0]).unwrap();
        let (_, jac, _) = net.eval_with_derivatives(&dvector![0.0, 0.0]);
        assert_eq!(jac, dmatrix![1.0, 2.0; 3.0, 4.0]);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for seed in 0..5 {
            let net = two_layer(seed);
            let z = dvector![0.3, -0.7, 1.1];
            let jac = net.jac_z(0.0, &z);
            let fd = finite_difference_jacobian(&net, 0.0, &z, 1e-5);
            assert!((&jac - &fd).norm() <= 1e-6 * jac.norm(), "seed {seed}");
        }
    }

    #[test]
    fn softplus_derivative_is_logistic() {
        for &x in &[-30.0, -2.0, -0.1, 0.0, 0.4, 3.0, 40.0] {
            let h = 1e-5;
            let fd = (Activation::Softplus.apply(x + h) - Activation::Softplus.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Softplus.derivative(x)).abs() < 1e-8, "x={x}");
        }
        assert!(Activation::Softplus.apply(800.0).is_finite());
        assert_eq!(Activation::Softplus.apply(-800.0), 0.0);
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let net = MlpField::init_uniform(
            vec![2, 5, 4, 1],
            vec![Activation::Softplus, Activation::Tanh, Activation::Identity],
            11,
        )
        .unwrap();
        let z = dvector![0.4, -1.2];
        let w = dvector![1.7];
        let (_, grad) = net.vjp(&net.forward(&z), &w);
        let theta = net.flat();
        let h = 1e-6;
        for k in 0..theta.len() {
            let mut plus = net.clone();
            let mut minus = net.clone();
            let mut tp = theta.clone();
            tp[k] += h;
            plus.set_flat(&tp).unwrap();
            tp[k] -= 2.0 * h;
            minus.set_flat(&tp).unwrap();
            let fd = (plus.output(&z).dot(&w) - minus.output(&z).dot(&w)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-7, "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn json_roundtrip() {
        let net = two_layer(3);
        let back = MlpField::from_json(&net.to_json()).unwrap();
        assert_eq!(back, net);
        assert!(MlpField::from_json(r#"{"widths":[2,2],"activations":["tanh"],"params":[1.0]}"#).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = two_layer(7);
        let b = two_layer(7);
        assert_eq!(a, b);
        assert_ne!(a, two_layer(8));
        let bound = 1.0 / 3f64.sqrt();
        assert!(a.flat()[..24].iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(MlpField::new(vec![2], vec![]).is_err());
        assert!(MlpField::new(vec![2, 3], vec![]).is_err());
        assert!(MlpField::new(vec![2, 0, 1], vec![Activation::Tanh, Activation::Tanh]).is_err());
    }

    proptest! {
        #[test]
        fn flat_roundtrip(params in prop::collection::vec(-10.0f64..10.0, 3 * 4 + 4 + 4 * 2 + 2)) {
            let mut net = MlpField::new(vec![3, 4, 2], vec![Activation::Tanh, Activation::Identity]).unwrap();
            net.set_flat(&params).unwrap();
            prop_assert_eq!(net.flat(), params);
        }

        #[test]
        fn jvp_vjp_adjoint_identity(
            seed in 0u64..1000,
            z in prop::collection::vec(-2.0f64..2.0, 3),
            v in prop::collection::vec(-1.0f64..1.0, 3),
            w in prop::collection::vec(-1.0f64..1.0, 3),
        ) {
            let net = two_layer(seed);
            let z = DVector::from_vec(z);
            let v = DVector::from_vec(v);
            let w = DVector::from_vec(w);
            let lhs = w.dot(&net.jvp_z(0.0, &z, &v));
            let rhs = net.vjp_z(0.0, &z, &w).dot(&v);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            let jac = net.jac_z(0.0, &z);
            let jv = net.jvp_z(0.0, &z, &v);
            prop_assert!((&jac * &v - &jv).norm() <= 1e-12 * (1.0 + jv.norm()));
        }
    }
}
