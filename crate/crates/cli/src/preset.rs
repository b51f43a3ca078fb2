//! TOML experiment presets.
//!
//! A preset names one problem plus optional per-subcommand sections. Missing
//! sections fall back to defaults, so a preset only has to state what it
//! changes. Relative matrix paths are resolved against the preset file.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use timeshoot::problems::{load_linear_system, NodeWeights};
use timeshoot::shooting::NewtonMode;
use timeshoot::tracking::Optimizer;
use timeshoot::{
    Activation, BuiltinField, BuiltinSpec, ControlledField, Curve, LimitCycleTask, LinearControlTask, MslMethod,
    SolverSpec, TimeGrid, TrackingSetup, TrainConfig,
};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preset {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub problem: Problem,
    #[serde(default)]
    pub solve: SolveSection,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub scaling: ScalingSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Problem {
    /// A closed-form field from a single initial condition.
    Builtin {
        field: BuiltinSpec,
        z0: Vec<f64>,
        horizon: (f64, f64),
        intervals: usize,
        #[serde(default)]
        loss: NodeLoss,
    },
    /// Mechanical system with an MLP controller stabilizing a closed curve.
    LimitCycle {
        #[serde(default = "default_curve")]
        curve: Curve,
        #[serde(default)]
        control_weight: f64,
        initial_conditions: usize,
        horizon: (f64, f64),
        intervals: usize,
    },
    /// Linear plant with a boundary controller. Without paths the bundled
    /// 20-dimensional sample system is used.
    LinearControl {
        #[serde(default)]
        a_path: Option<PathBuf>,
        #[serde(default)]
        b_path: Option<PathBuf>,
        #[serde(default)]
        control_weight: f64,
        #[serde(default = "default_output_activation")]
        output_activation: Activation,
        horizon: (f64, f64),
        intervals: usize,
    },
}

fn default_curve() -> Curve {
    Curve::Circle
}

fn default_output_activation() -> Activation {
    Activation::Identity
}

/// Node cost for builtin problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NodeLoss {
    /// `wᵀ b_N`; an empty weight list means all ones.
    Terminal {
        #[serde(default)]
        weights: Vec<f64>,
    },
    Zero,
}

impl Default for NodeLoss {
    fn default() -> Self {
        NodeLoss::Terminal { weights: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Broadcast,
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSection {
    pub method: String,
    pub fine: SolverSpec,
    pub coarse: SolverSpec,
    /// Sequential solve the result is compared to; defaults to `fine`.
    pub reference: Option<SolverSpec>,
    pub init: InitKind,
    /// Defaults to the number of sub-intervals.
    pub max_iters: Option<usize>,
    pub residual_tol: f64,
    /// Damping of the dense reference step.
    pub alpha: f64,
}

impl Default for SolveSection {
    fn default() -> Self {
        Self {
            method: "newton-fw".into(),
            fine: SolverSpec::rk4(4),
            coarse: SolverSpec::rk4(1),
            reference: None,
            init: InitKind::Broadcast,
            max_iters: None,
            residual_tol: 1e-8,
            alpha: 1.0,
        }
    }
}

impl SolveSection {
    pub fn msl_method(&self) -> Result<MslMethod, CliError> {
        match self.method.parse::<MslMethod>()? {
            MslMethod::DenseReference { .. } => Ok(MslMethod::DenseReference { alpha: self.alpha }),
            m => Ok(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    /// Forward solver for the root and the finite differences.
    pub fine: SolverSpec,
    pub adjoint: SolverSpec,
    pub fd_step: f64,
    pub fd_tol: f64,
    pub implicit_tol: f64,
    pub residual_tol: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            fine: SolverSpec::dopri5(1e-11, 1e-11),
            adjoint: SolverSpec::dopri5(1e-10, 1e-10),
            fd_step: 1e-6,
            fd_tol: 1e-3,
            implicit_tol: 1e-4,
            residual_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub newton_iters_per_step: usize,
    pub divergence_factor: f64,
    pub fine: SolverSpec,
    pub init: SolverSpec,
    pub adjoint: SolverSpec,
    /// Fresh sequential solve for the SMAPE column; none skips it.
    pub reference: Option<SolverSpec>,
    pub mode: NewtonMode,
    /// Forward solver of the sequential baseline.
    pub baseline: SolverSpec,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            optimizer: Optimizer::adam(),
            epochs: 10,
            newton_iters_per_step: 1,
            divergence_factor: 1e2,
            fine: SolverSpec::rk4(1),
            init: SolverSpec::dopri5(1e-8, 1e-8),
            adjoint: SolverSpec::dopri5(1e-7, 1e-7),
            reference: Some(SolverSpec::dopri5(1e-8, 1e-8)),
            mode: NewtonMode::FwSensitivity,
            baseline: SolverSpec::dopri5(1e-5, 1e-5),
        }
    }
}

impl TrainingSection {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            epochs: self.epochs,
            newton_iters_per_step: self.newton_iters_per_step,
            seed,
            divergence_factor: self.divergence_factor,
        }
    }

    pub fn setup(&self) -> TrackingSetup {
        TrackingSetup {
            fine: self.fine,
            init: self.init,
            reference: self.reference,
            adjoint: self.adjoint,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingSection {
    pub etas: Vec<f64>,
    pub epochs_per_eta: usize,
    /// Used for the flows, the initial solve and the reference.
    pub solver: SolverSpec,
    pub adjoint: SolverSpec,
    pub slope_band: (f64, f64),
    pub ratio_band: (f64, f64),
}

impl Default for ScalingSection {
    fn default() -> Self {
        Self {
            etas: vec![1e-3, 5e-4, 2.5e-4],
            epochs_per_eta: 5,
            solver: SolverSpec::dopri5(1e-10, 1e-10),
            adjoint: SolverSpec::dopri5(1e-8, 1e-8),
            slope_band: (1.5, 2.5),
            ratio_band: (2.5, 6.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub threads: Vec<usize>,
    pub intervals: Vec<usize>,
    pub methods: Vec<String>,
    pub fine: SolverSpec,
    pub iterations: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            threads: vec![1, 2, 4, 8],
            intervals: vec![50, 100, 500],
            methods: vec!["newton-fw".into(), "parareal".into()],
            fine: SolverSpec::rk4(1),
            iterations: 1,
        }
    }
}

/// A preset together with the directory its relative paths refer to.
#[derive(Debug, Clone)]
pub struct LoadedPreset {
    pub preset: Preset,
    pub base_dir: PathBuf,
}

impl LoadedPreset {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read preset {}: {e}", path.display())))?;
        let preset = parse_preset(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self {
            preset,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    /// Hex SHA-256 of the effective preset, overrides included.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(&self.preset).expect("preset serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// The same preset with `n` sub-intervals.
    pub fn with_intervals(&self, n: usize) -> Self {
        let mut out = self.clone();
        match &mut out.preset.problem {
            Problem::Builtin { intervals, .. }
            | Problem::LimitCycle { intervals, .. }
            | Problem::LinearControl { intervals, .. } => *intervals = n,
        }
        out
    }

    pub fn build(&self) -> Result<Instance, CliError> {
        let p = &self.preset;
        match &p.problem {
            Problem::Builtin {
                field,
                z0,
                horizon,
                intervals,
                loss,
            } => {
                let field = BuiltinField::make(field)?;
                let grid = TimeGrid::uniform(horizon.0, horizon.1, *intervals)?;
                let z0 = DVector::from_column_slice(z0);
                if z0.len() != timeshoot::VectorField::dim(&field) {
                    return Err(CliError::Config(format!(
                        "z0 has {} entries, field dimension is {}",
                        z0.len(),
                        timeshoot::VectorField::dim(&field)
                    )));
                }
                let e = match loss {
                    NodeLoss::Zero => DVector::zeros(z0.len()),
                    NodeLoss::Terminal { weights } if weights.is_empty() => DVector::from_element(z0.len(), 1.0),
                    NodeLoss::Terminal { weights } if weights.len() == z0.len() => DVector::from_column_slice(weights),
                    NodeLoss::Terminal { weights } => {
                        return Err(CliError::Config(format!(
                            "terminal weights have {} entries, state has {}",
                            weights.len(),
                            z0.len()
                        )))
                    }
                };
                let objective = NodeWeights::terminal(*intervals + 1, e);
                Ok(Instance::Builtin {
                    field,
                    objective,
                    z0s: vec![z0],
                    grid,
                })
            }
            Problem::LimitCycle {
                curve,
                control_weight,
                initial_conditions,
                horizon,
                intervals,
            } => {
                if *initial_conditions == 0 {
                    return Err(CliError::Config("initial_conditions must be at least 1".into()));
                }
                let task = LimitCycleTask {
                    curve: *curve,
                    control_weight: *control_weight,
                    z0_batch: LimitCycleTask::sample_batch(*initial_conditions, p.seed),
                    horizon: *horizon,
                    intervals: *intervals,
                };
                let field = LimitCycleTask::field(LimitCycleTask::default_controller(controller_seed(p.seed)))?;
                let grid = TimeGrid::uniform(horizon.0, horizon.1, *intervals)?;
                Ok(Instance::Controlled {
                    field,
                    z0s: task.z0_batch.clone(),
                    objective: ControlObjective::LimitCycle(task),
                    grid,
                })
            }
            Problem::LinearControl {
                a_path,
                b_path,
                control_weight,
                output_activation,
                horizon,
                intervals,
            } => {
                let mut task = match (a_path, b_path) {
                    (Some(a), Some(b)) => load_linear_system(&self.base_dir.join(a), &self.base_dir.join(b))?,
                    (None, None) => LinearControlTask::bundled()?,
                    _ => return Err(CliError::Config("give both a_path and b_path or neither".into())),
                };
                task.control_weight = *control_weight;
                let field = task.field(task.default_controller(*output_activation, controller_seed(p.seed))?)?;
                let grid = TimeGrid::uniform(horizon.0, horizon.1, *intervals)?;
                Ok(Instance::Controlled {
                    field,
                    z0s: vec![task.default_z0()],
                    objective: ControlObjective::Linear(task),
                    grid,
                })
            }
        }
    }
}

pub fn parse_preset(text: &str) -> Result<Preset, toml::de::Error> {
    toml::from_str(text)
}

/// Controller initialization is seeded apart from the initial conditions.
fn controller_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

#[derive(Debug, Clone)]
pub enum ControlObjective {
    LimitCycle(LimitCycleTask),
    Linear(LinearControlTask),
}

impl timeshoot::Objective<ControlledField> for ControlObjective {
    fn evaluate(&self, field: &ControlledField, trajectories: &[&[DVector<f64>]]) -> timeshoot::LossEval {
        match self {
            ControlObjective::LimitCycle(t) => t.evaluate(field, trajectories),
            ControlObjective::Linear(t) => t.evaluate(field, trajectories),
        }
    }
}

/// A preset turned into concrete fields, objectives and initial conditions.
pub enum Instance {
    Builtin {
        field: BuiltinField,
        objective: NodeWeights,
        z0s: Vec<DVector<f64>>,
        grid: TimeGrid,
    },
    Controlled {
        field: ControlledField,
        objective: ControlObjective,
        z0s: Vec<DVector<f64>>,
        grid: TimeGrid,
    },
}

impl Instance {
    pub fn grid(&self) -> &TimeGrid {
        match self {
            Instance::Builtin { grid, .. } | Instance::Controlled { grid, .. } => grid,
        }
    }

    pub fn z0s(&self) -> &[DVector<f64>] {
        match self {
            Instance::Builtin { z0s, .. } | Instance::Controlled { z0s, .. } => z0s,
        }
    }
}
