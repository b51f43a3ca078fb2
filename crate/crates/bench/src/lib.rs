//! Problem fixtures shared by the benchmarks.

use nalgebra::DVector;
use timeshoot::shooting::sequential_state;
use timeshoot::{
    Activation, ControlledField, Curve, LimitCycleTask, LinearControlTask, NfeLedger, ShootingState, SolverSpec,
    TimeGrid,
};

/// The bundled 20-dimensional linear plant under an untrained controller.
pub struct LinearChain {
    pub field: ControlledField,
    pub z0: DVector<f64>,
    pub grid: TimeGrid,
}

impl LinearChain {
    pub fn new(intervals: usize) -> Self {
        let task = LinearControlTask::bundled().expect("bundled system loads");
        let controller = task
            .default_controller(Activation::Identity, 1)
            .expect("controller shape matches the plant");
        Self {
            field: task.field(controller).expect("controller shape matches the plant"),
            z0: task.default_z0(),
            grid: TimeGrid::uniform(0.0, 5.0, intervals).expect("valid grid"),
        }
    }
}

/// A batch of limit-cycle trajectories solved to their roots.
pub struct LimitCycle {
    pub task: LimitCycleTask,
    pub field: ControlledField,
    pub grid: TimeGrid,
    pub states: Vec<ShootingState>,
}

impl LimitCycle {
    pub fn new(trajectories: usize, intervals: usize, spec: &SolverSpec) -> Self {
        let task = LimitCycleTask {
            curve: Curve::Circle,
            control_weight: 0.01,
            z0_batch: LimitCycleTask::sample_batch(trajectories, 7),
            horizon: (0.0, 10.0),
            intervals,
        };
        let field = LimitCycleTask::field(LimitCycleTask::default_controller(11)).expect("controller fits the plant");
        let grid = TimeGrid::uniform(0.0, 10.0, intervals).expect("valid grid");
        let states = task
            .z0_batch
            .iter()
            .map(|z| sequential_state(&field, z, &grid, spec, &mut NfeLedger::new()).expect("smooth dynamics"))
            .collect();
        Self {
            task,
            field,
            grid,
            states,
        }
    }
}
