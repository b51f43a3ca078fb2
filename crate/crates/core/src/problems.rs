//! Benchmark problems: desired curves, node-decomposed losses, metrics and
//! the linear boundary-control system.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Activation, ControlledField, MlpField, Plant, VectorField};

/// Loss value with its gradients: one list of node gradients per
/// trajectory and the explicit parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub node_grads: Vec<Vec<DVector<f64>>>,
    pub param_grad: DVector<f64>,
}

/// A loss that is a sum of per-node terms over a batch of trajectories.
pub trait Objective<F: VectorField + ?Sized>: Sync {
    fn evaluate(&self, field: &F, trajectories: &[&[DVector<f64>]]) -> LossEval;

    fn value(&self, field: &F, trajectories: &[&[DVector<f64>]]) -> f64 {
        self.evaluate(field, trajectories).value
    }
}

/// `L = Σ_j Σ_n w_nᵀ b_{n,j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeWeights {
    pub weights: Vec<DVector<f64>>,
}

impl NodeWeights {
    /// `w_N = e`, zero elsewhere.
    pub fn terminal(nodes: usize, e: DVector<f64>) -> Self {
        let mut weights = vec![DVector::zeros(e.len()); nodes];
        weights[nodes - 1] = e;
        Self { weights }
    }
}

impl<F: VectorField + ?Sized> Objective<F> for NodeWeights {
    fn evaluate(&self, field: &F, trajectories: &[&[DVector<f64>]]) -> LossEval {
        let value = trajectories
            .iter()
            .flat_map(|t| t.iter().zip(&self.weights).map(|(b, w)| w.dot(b)))
            .sum();
        LossEval {
            value,
            node_grads: trajectories.iter().map(|_| self.weights.clone()).collect(),
            param_grad: DVector::zeros(field.param_count()),
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Curve {
    /// `q² + p² − 1`
    Circle,
    /// `√((q−α)² + p²) √((q+α)² + p²) − k`
    Circus {
        #[serde(default = "one")]
        alpha: f64,
        #[serde(default = "one")]
        k: f64,
    },
}

fn one() -> f64 {
    1.0
}

pub fn curve_value(curve: &Curve, q: f64, p: f64) -> f64 {
    match *curve {
        Curve::Circle => q * q + p * p - 1.0,
        Curve::Circus { alpha, k } => {
            ((q - alpha).powi(2) + p * p).sqrt() * ((q + alpha).powi(2) + p * p).sqrt() - k
        }
    }
}

/// `(∂s/∂q, ∂s/∂p)`; a factor whose radius vanishes contributes zero.
pub fn curve_gradient(curve: &Curve, q: f64, p: f64) -> (f64, f64) {
    match *curve {
        Curve::Circle => (2.0 * q, 2.0 * p),
        Curve::Circus { alpha, .. } => {
            let r1 = ((q - alpha).powi(2) + p * p).sqrt();
            let r2 = ((q + alpha).powi(2) + p * p).sqrt();
            let (mut gq, mut gp) = (0.0, 0.0);
            if r1 > 0.0 {
                gq += (q - alpha) / r1 * r2;
                gp += p / r1 * r2;
            }
            if r2 > 0.0 {
                gq += r1 * (q + alpha) / r2;
                gp += r1 * p / r2;
            }
            (gq, gp)
        }
    }
}

/// Stabilize a one degree-of-freedom mechanical system onto a closed curve.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitCycleTask {
    pub curve: Curve,
    /// Weight of the control effort term.
    pub control_weight: f64,
    pub z0_batch: Vec<DVector<f64>>,
    pub horizon: (f64, f64),
    pub intervals: usize,
}

impl LimitCycleTask {
    /// `count` initial conditions uniform in `[−2, 2]²`.
    pub fn sample_batch(count: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| DVector::from_vec(vec![rng.gen_range(-2.0..=2.0), rng.gen_range(-2.0..=2.0)]))
            .collect()
    }

    /// The controller used in the experiments: 2-32-32-1, tanh hidden layers.
    pub fn default_controller(seed: u64) -> MlpField {
        MlpField::init_uniform(
            vec![2, 32, 32, 1],
            vec![Activation::Tanh, Activation::Tanh, Activation::Identity],
            seed,
        )
        .expect("static controller shape is valid")
    }

    pub fn field(controller: MlpField) -> Result<ControlledField> {
        ControlledField::new(Plant::Mechanical1Dof, controller)
    }
}

/// Shared body of the control losses: `scale Σ (state_term(b) + α ‖π(b)‖₁)`.
fn control_loss<S>(
    field: &ControlledField,
    trajectories: &[&[DVector<f64>]],
    scale: f64,
    control_weight: f64,
    state_term: S,
) -> LossEval
where
    S: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    let net = field.controller();
    let mut value = 0.0;
    let mut param_grad = DVector::zeros(field.param_count());
    let node_grads = trajectories
        .iter()
        .map(|nodes| {
            nodes
                .iter()
                .map(|b| {
                    let (s, mut g) = state_term(b);
                    value += s;
                    if control_weight != 0.0 {
                        let tape = net.forward(b);
                        let u = tape.output();
                        value += control_weight * u.abs().sum();
                        let w = u.map(sign) * control_weight;
                        let (gz, gp) = net.vjp(&tape, &w);
                        g += gz;
                        param_grad += gp;
                    }
                    g * scale
                })
                .collect()
        })
        .collect();
    LossEval {
        value: value * scale,
        node_grads,
        param_grad: param_grad * scale,
    }
}

/// `1/(2N|Z₀|) Σ_j Σ_{n=0..N} |s_d(b_{n,j})| + α ‖π_θ(b_{n,j})‖₁`
pub fn limit_cycle_loss(
    task: &LimitCycleTask,
    field: &ControlledField,
    trajectories: &[&[DVector<f64>]],
) -> LossEval {
    let n = trajectories.first().map_or(1, |t| t.len().saturating_sub(1).max(1));
    let scale = 1.0 / (2.0 * n as f64 * trajectories.len().max(1) as f64);
    control_loss(field, trajectories, scale, task.control_weight, |b| {
        let s = curve_value(&task.curve, b[0], b[1]);
        let (gq, gp) = curve_gradient(&task.curve, b[0], b[1]);
        let sg = sign(s);
        (s.abs(), DVector::from_vec(vec![sg * gq, sg * gp]))
    })
}

impl Objective<ControlledField> for LimitCycleTask {
    fn evaluate(&self, field: &ControlledField, trajectories: &[&[DVector<f64>]]) -> LossEval {
        limit_cycle_loss(self, field, trajectories)
    }
}

/// Symmetric mean absolute percentage error over every component of every
/// sample: `mean 2|x − y| / (|x| + |y| + 1e−12)`, in `[0, 2]`.
pub fn smape(reference: &[DVector<f64>], test: &[DVector<f64>]) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(Error::config(format!(
            "smape needs equal lengths, got {} and {}",
            reference.len(),
            test.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, y) in reference.iter().zip(test) {
        if x.len() != y.len() {
            return Err(Error::config("smape samples have different dimensions"));
        }
        for (a, b) in x.iter().zip(y.iter()) {
            sum += 2.0 * (a - b).abs() / (a.abs() + b.abs() + 1e-12);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Linear plant `ż = A z + B u` driven to rest through a boundary controller.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearControlTask {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub sigma_r: Vec<usize>,
    pub sigma_t: Vec<usize>,
    pub control_weight: f64,
}

const BUNDLED_A: &str = include_str!("../data/linear20_A.csv");
const BUNDLED_B: &str = include_str!("../data/linear20_B.csv");

impl LinearControlTask {
    /// Validate shapes and partitions.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        sigma_r: Vec<usize>,
        sigma_t: Vec<usize>,
        control_weight: f64,
    ) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::config(format!("A must be square, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::config(format!(
                "B has {} rows but A has {}",
                b.nrows(),
                a.nrows()
            )));
        }
        let n = a.nrows();
        if let Some(i) = sigma_r.iter().chain(&sigma_t).find(|&&i| i >= n) {
            return Err(Error::config(format!("partition index {i} out of range for dimension {n}")));
        }
        if let Some(i) = sigma_r.iter().find(|i| sigma_t.contains(i)) {
            return Err(Error::config(format!("partition index {i} appears in both blocks")));
        }
        Ok(Self {
            a,
            b,
            sigma_r,
            sigma_t,
            control_weight,
        })
    }

    /// Default partition: first half of the state in `σ_r`, second half in `σ_t`.
    fn halves(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        Self::new(a, b, (0..n / 2).collect(), (n / 2..n).collect(), 0.0)
    }

    /// The 20-dimensional sample system shipped with the crate: a damped
    /// chain of ten unit masses, two forces acting at the free end.
    pub fn bundled() -> Result<Self> {
        Self::halves(parse_matrix(BUNDLED_A, "A")?, parse_matrix(BUNDLED_B, "B")?)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// The boundary controller: widths `n_z-16-16-16-n_u`, softplus, softplus,
    /// tanh and a configurable output activation.
    pub fn default_controller(&self, output: Activation, seed: u64) -> Result<MlpField> {
        MlpField::init_uniform(
            vec![self.state_dim(), 16, 16, 16, self.input_dim()],
            vec![Activation::Softplus, Activation::Softplus, Activation::Tanh, output],
            seed,
        )
    }

    pub fn field(&self, controller: MlpField) -> Result<ControlledField> {
        ControlledField::new(
            Plant::Linear {
                a: self.a.clone(),
                b: self.b.clone(),
            },
            controller,
        )
    }

    /// A smooth initial deflection of the first block.
    pub fn default_z0(&self) -> DVector<f64> {
        let n = self.sigma_r.len().max(1) as f64;
        let mut z = DVector::zeros(self.state_dim());
        for (k, &i) in self.sigma_r.iter().enumerate() {
            let x = (k + 1) as f64 / n;
            z[i] = (std::f64::consts::PI * x).sin() + 0.3 * (3.0 * std::f64::consts::PI * x).sin();
        }
        z
    }

    fn block_norm(&self, b: &DVector<f64>, idx: &[usize]) -> (f64, DVector<f64>) {
        let norm = idx.iter().map(|&i| b[i] * b[i]).sum::<f64>().sqrt();
        let mut g = DVector::zeros(b.len());
        if norm > 0.0 {
            for &i in idx {
                g[i] = b[i] / norm;
            }
        }
        (norm, g)
    }
}

/// `1/(N|Z₀|) Σ_j Σ_{n=0..N} ‖b_{σ_r}‖₂ + ‖b_{σ_t}‖₂ + α ‖π_θ(b)‖₁`
pub fn linear_control_loss(
    task: &LinearControlTask,
    field: &ControlledField,
    trajectories: &[&[DVector<f64>]],
) -> LossEval {
    let n = trajectories.first().map_or(1, |t| t.len().saturating_sub(1).max(1));
    let scale = 1.0 / (n as f64 * trajectories.len().max(1) as f64);
    control_loss(field, trajectories, scale, task.control_weight, |b| {
        let (r, gr) = task.block_norm(b, &task.sigma_r);
        let (t, gt) = task.block_norm(b, &task.sigma_t);
        (r + t, gr + gt)
    })
}

impl Objective<ControlledField> for LinearControlTask {
    fn evaluate(&self, field: &ControlledField, trajectories: &[&[DVector<f64>]]) -> LossEval {
        linear_control_loss(self, field, trajectories)
    }
}

/// Parse a matrix from CSV text with a leading `# rows cols` line.
pub fn parse_matrix(text: &str, name: &str) -> Result<DMatrix<f64>> {
    let mut lines = text.lines().enumerate();
    let (rows, cols) = loop {
        let Some((i, line)) = lines.next() else {
            return Err(Error::config(format!("{name}: missing '# rows cols' header")));
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let dims: Vec<_> = line
            .strip_prefix('#')
            .map(|s| s.split_whitespace().map(str::parse::<usize>).collect())
            .unwrap_or_default();
        match dims.as_slice() {
            [Ok(r), Ok(c)] if *r > 0 && *c > 0 => break (*r, *c),
            _ => {
                return Err(Error::config(format!(
                    "{name} line {}: expected header '# rows cols', got '{line}'",
                    i + 1
                )))
            }
        }
    };
    let header_lines = text.lines().take_while(|l| !l.trim_start().starts_with('#')).count() + 1;
    let body: String = text.lines().skip(header_lines).collect::<Vec<_>>().join("\n");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let mut data = Vec::with_capacity(rows * cols);
    let mut row = 0;
    for record in reader.records() {
        let record = record.map_err(|e| Error::config(format!("{name}: {e}")))?;
        let line = record.position().map_or(0, |p| p.line() as usize) + header_lines;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if row == rows {
            return Err(Error::config(format!("{name} line {line}: more than {rows} rows")));
        }
        if record.len() != cols {
            return Err(Error::config(format!(
                "{name} line {line}: expected {cols} values, found {}",
                record.len()
            )));
        }
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::config(format!("{name}[{row},{col}] (line {line}): cannot parse '{cell}'"))
            })?;
            if !v.is_finite() {
                return Err(Error::config(format!(
                    "{name}[{row},{col}] (line {line}): non-finite value {cell}"
                )));
            }
            data.push(v);
        }
        row += 1;
    }
    if row != rows {
        return Err(Error::config(format!("{name}: header declares {rows} rows, found {row}")));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn load_matrix(path: &Path, name: &str) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path)?;
    parse_matrix(&text, name)
}

/// Load `A` and `B` from matrix files; partitions default to the two halves
/// of the state.
pub fn load_linear_system(path_a: &Path, path_b: &Path) -> Result<LinearControlTask> {
    LinearControlTask::halves(load_matrix(path_a, "A")?, load_matrix(path_b, "B")?)
}
