use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DVector;
use timeshoot::shooting::msl_iteration;
use timeshoot::{init_shooting, InitStrategy, MslMethod, NfeLedger, SolveSpecs, SolverSpec, TimeGrid, VectorField};

use crate::output::CsvOut;
use crate::{CliError, RunContext};

pub struct BenchRun {
    pub total_nfe: u64,
    pub span_nfe: u64,
    pub wall_ms: f64,
    /// Final shooting parameters, flattened row by row.
    pub nodes: Vec<f64>,
}

/// `iterations` iterations of `method` from a broadcast start, on the
/// current rayon pool.
pub fn bench_run<F: VectorField + ?Sized>(
    field: &F,
    z0: &DVector<f64>,
    grid: &TimeGrid,
    method: MslMethod,
    fine: SolverSpec,
    iterations: usize,
) -> Result<BenchRun, CliError> {
    let specs = SolveSpecs::new(fine);
    let mut ledger = NfeLedger::new();
    let mut state = init_shooting(field, z0, grid, &InitStrategy::Broadcast, &mut ledger)?;
    let clock = Instant::now();
    for _ in 0..iterations {
        state = msl_iteration(field, &state, method, &specs, &mut ledger)?;
    }
    let wall_ms = clock.elapsed().as_secs_f64() * 1e3;
    Ok(BenchRun {
        total_nfe: ledger.total_nfe,
        span_nfe: ledger.span_nfe,
        wall_ms,
        nodes: state.nodes().iter().flat_map(|b| b.iter().copied()).collect(),
    })
}

pub fn bench(ctx: &RunContext) -> Result<(), CliError> {
    let section = &ctx.preset.preset.bench;
    if section.threads.is_empty() || section.threads.contains(&0) {
        return Err(CliError::Config("bench thread counts must be at least 1".into()));
    }
    if section.iterations == 0 {
        return Err(CliError::Config("bench needs at least one iteration".into()));
    }
    section.fine.validate()?;
    let methods: Vec<MslMethod> = section
        .methods
        .iter()
        .map(|m| m.parse::<MslMethod>())
        .collect::<Result<_, _>>()?;
    let mut csv = CsvOut::create(
        &ctx.path("bench.csv"),
        &ctx.hash(),
        &["method", "N", "threads", "total_nfe", "span_nfe", "wall_ms"],
    )?;
    let mut mismatches = Vec::new();
    for method in &methods {
        for &n in &section.intervals {
            let inst = ctx.preset.with_intervals(n).build()?;
            let mut runs: BTreeMap<usize, BenchRun> = BTreeMap::new();
            for &threads in &section.threads {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| CliError::Config(format!("cannot start {threads} worker threads: {e}")))?;
                let run = pool.install(|| {
                    with_instance!(&inst, |field, _objective, z0s, grid| bench_run(
                        field,
                        &z0s[0],
                        grid,
                        *method,
                        section.fine,
                        section.iterations
                    ))
                })?;
                csv.row(&[
                    method.name().into(),
                    n.into(),
                    threads.into(),
                    run.total_nfe.into(),
                    run.span_nfe.into(),
                    run.wall_ms.into(),
                ])?;
                runs.insert(threads, run);
            }
            let (lo_t, lo) = runs.first_key_value().expect("thread list is non-empty");
            let (hi_t, hi) = runs.last_key_value().expect("thread list is non-empty");
            let identical = runs.values().all(|r| r.nodes == lo.nodes);
            if section.fine.method.is_fixed_step() && !identical {
                mismatches.push(format!("{} N={n}", method.name()));
            }
            println!(
                "bench method={} N={n} span_nfe={} total_nfe={} speedup_{hi_t}_vs_{lo_t}={:.2} bitwise_identical={identical}",
                method.name(),
                lo.span_nfe,
                lo.total_nfe,
                lo.wall_ms / hi.wall_ms,
            );
        }
    }
    csv.finish()?;
    println!(
        "bench cpus={} (speedups are bounded by the available CPUs)",
        std::thread::available_parallelism().map_or(1, |n| n.get())
    );
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "fixed-step results differ across thread counts: {}",
            mismatches.join(", ")
        )))
    }
}
