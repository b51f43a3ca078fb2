use std::time::Instant;

use nalgebra::DVector;
use timeshoot::problems::smape;
use timeshoot::shooting::IterationRecord;
use timeshoot::{
    init_shooting, matching_residual, msl_solve, rollout, InitStrategy, NfeLedger, ShootingState, SolveSpecs,
    StopRule, TimeGrid, VectorField,
};

use crate::output::{Cell, CsvOut};
use crate::preset::{InitKind, SolveSection};
use crate::{CliError, RunContext};

/// One trajectory solved by multiple shooting and compared with the
/// sequential reference.
pub struct TrajectorySolve {
    pub state: ShootingState,
    pub reference: Vec<DVector<f64>>,
    pub records: Vec<IterationRecord>,
    pub ledger: NfeLedger,
    /// Per-node `‖g_n‖_∞` of the final state.
    pub node_residuals: Vec<f64>,
    pub abs_errors: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub smape: f64,
}

impl TrajectorySolve {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn init_strategy(section: &SolveSection) -> InitStrategy {
    match section.init {
        InitKind::Broadcast => InitStrategy::Broadcast,
        InitKind::Coarse => InitStrategy::CoarseRollout(section.coarse),
        InitKind::Fine => InitStrategy::FineRollout(section.fine),
    }
}

/// Solve from `z0`. With `max_iters == 0` the state is only initialized and
/// its residual measured.
pub fn solve_trajectory<F: VectorField + ?Sized>(
    field: &F,
    z0: &DVector<f64>,
    grid: &TimeGrid,
    section: &SolveSection,
    max_iters: usize,
) -> Result<TrajectorySolve, CliError> {
    section.fine.validate()?;
    section.coarse.validate()?;
    let init = init_strategy(section);
    let specs = SolveSpecs {
        fine: section.fine,
        coarse: section.coarse,
    };
    let (state, records, ledger) = if max_iters == 0 {
        let clock = Instant::now();
        let mut ledger = NfeLedger::new();
        let mut state = init_shooting(field, z0, grid, &init, &mut ledger)?;
        let r = matching_residual(field, &state, &section.fine, &mut NfeLedger::new())?.norm_inf;
        state.set_residual(r);
        let record = IterationRecord {
            iteration: 0,
            residual_inf: r,
            total_nfe: ledger.total_nfe,
            span_nfe: ledger.span_nfe,
            wall_clock_ms: clock.elapsed().as_secs_f64() * 1e3,
        };
        (state, vec![record], ledger)
    } else {
        let stop = StopRule {
            max_iters,
            residual_tol: section.residual_tol,
        };
        let out = msl_solve(field, z0, grid, &init, section.msl_method()?, &specs, stop)?;
        (out.state, out.records, out.ledger)
    };

    let reference_spec = section.reference.unwrap_or(section.fine);
    let reference = rollout(field, z0, grid, &reference_spec, &mut NfeLedger::new())?;
    let g = matching_residual(field, &state, &section.fine, &mut NfeLedger::new())?;
    let (abs_errors, rel_errors) = state
        .nodes()
        .iter()
        .zip(&reference)
        .map(|(b, r)| {
            let gap = (b - r).norm();
            let scale = r.norm();
            (gap, if scale > 0.0 { gap / scale } else { gap })
        })
        .unzip();
    Ok(TrajectorySolve {
        smape: smape(&reference, state.nodes())?,
        node_residuals: g.g.iter().map(|r| r.amax()).collect(),
        state,
        reference,
        records,
        ledger,
        abs_errors,
        rel_errors,
    })
}

fn solve_all<F: VectorField + ?Sized>(
    field: &F,
    z0s: &[DVector<f64>],
    grid: &TimeGrid,
    section: &SolveSection,
    max_iters: usize,
) -> Result<Vec<TrajectorySolve>, CliError> {
    z0s.iter()
        .map(|z0| solve_trajectory(field, z0, grid, section, max_iters))
        .collect()
}

pub fn solve(ctx: &RunContext, max_iters: Option<usize>) -> Result<(), CliError> {
    let section = &ctx.preset.preset.solve;
    let inst = ctx.preset.build()?;
    let grid = inst.grid().clone();
    let iters = max_iters.or(section.max_iters).unwrap_or(grid.intervals());
    let solved = with_instance!(&inst, |field, _objective, z0s, grid| solve_all(
        field, z0s, grid, section, iters
    ))?;
    let hash = ctx.hash();
    let times = grid.boundaries();

    let mut summary = CsvOut::create(
        &ctx.path("solve_summary.csv"),
        &hash,
        &["trajectory", "node", "t", "abs_error", "rel_error", "residual_inf"],
    )?;
    let dim = solved[0].state.dim();
    let mut header: Vec<String> = ["trajectory", "node", "t"].map(String::from).to_vec();
    header.extend((0..dim).map(|i| format!("z{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut nodes = CsvOut::create(&ctx.path("B_final.csv"), &hash, &header)?;
    let mut iterations = CsvOut::create(
        &ctx.path("iterations.csv"),
        &hash,
        &["trajectory", "iteration", "residual_inf", "total_nfe", "span_nfe", "wall_clock_ms"],
    )?;
    for (j, s) in solved.iter().enumerate() {
        for (n, b) in s.state.nodes().iter().enumerate() {
            summary.row(&[
                j.into(),
                n.into(),
                times[n].into(),
                s.abs_errors[n].into(),
                s.rel_errors[n].into(),
                s.node_residuals[n].into(),
            ])?;
            let mut row: Vec<Cell> = vec![j.into(), n.into(), times[n].into()];
            row.extend(b.iter().map(|v| Cell::Float(*v)));
            nodes.row(&row)?;
        }
        for r in &s.records {
            iterations.row(&[
                j.into(),
                r.iteration.into(),
                r.residual_inf.into(),
                r.total_nfe.into(),
                r.span_nfe.into(),
                r.wall_clock_ms.into(),
            ])?;
        }
    }
    summary.finish()?;
    nodes.finish()?;
    iterations.finish()?;

    let residual = solved.iter().filter_map(|s| s.state.residual()).fold(0.0, f64::max);
    let max_rel = solved.iter().map(TrajectorySolve::max_rel_error).fold(0.0, f64::max);
    let mean_smape = solved.iter().map(|s| s.smape).sum::<f64>() / solved.len() as f64;
    let ledger = NfeLedger::merge_parallel(solved.iter().map(|s| &s.ledger));
    let iterations_run = solved.iter().map(|s| s.state.iteration()).max().unwrap_or(0);
    let status = if iters == 0 {
        "initialized"
    } else if residual <= section.residual_tol {
        "converged"
    } else {
        "max_iters"
    };
    println!(
        "solve method={} trajectories={} intervals={} iterations={} status={} residual_inf={:.3e} \
         max_rel_error={:.3e} smape={:.3e} total_nfe={} span_nfe={}",
        section.msl_method()?.name(),
        solved.len(),
        grid.intervals(),
        iterations_run,
        status,
        residual,
        max_rel,
        mean_smape,
        ledger.total_nfe,
        ledger.span_nfe
    );
    Ok(())
}
