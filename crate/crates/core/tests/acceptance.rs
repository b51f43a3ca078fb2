//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p timeshoot --test acceptance`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use timeshoot::field::{Activation, MlpField};
use timeshoot::problems::{limit_cycle_loss, LinearControlTask};
use timeshoot::shooting::{newton_dense_reference, newton_direct_iteration, parareal_iteration, sequential_state};
use timeshoot::tracking::{tracking_scaling_experiment, BaselineTrainer, Optimizer, TrainConfig};
use timeshoot::*;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// `max_n ‖a_n − b_n‖ / ‖b_n‖` with a floor on the denominator.
fn node_rel(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm() / y.norm().max(1e-12))
        .fold(0.0, f64::max)
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn timed(limit: Duration, v: Verdict, took: Duration) -> Verdict {
    let ok = took <= limit;
    Verdict::new(
        v.pass && ok,
        format!("{}; {:.2}s (limit {}s)", v.detail, took.as_secs_f64(), limit.as_secs()),
    )
}

fn criterion_1() -> Result<Verdict> {
    let f = BuiltinField::vanderpol(1.0);
    let z0 = DVector::from_vec(vec![2.0, 0.0]);
    let grid = TimeGrid::uniform(0.0, 4.0, 8)?;
    let fine = SolverSpec::dopri5(1e-8, 1e-8);
    let reference = rollout(&f, &z0, &grid, &SolverSpec::dopri5(1e-8, 1e-8), &mut NfeLedger::new())?;
    let mut state = init_shooting(&f, &z0, &grid, &InitStrategy::Broadcast, &mut NfeLedger::new())?;
    let mut worst_prefix = 0.0f64;
    for k in 1..=8 {
        state = newton_direct_iteration(&f, &state, &fine, shooting::NewtonMode::FwSensitivity, &mut NfeLedger::new())?;
        worst_prefix = worst_prefix.max(node_rel(&state.nodes()[..=k], &reference[..=k]));
    }
    let all = node_rel(state.nodes(), &reference);
    Ok(Verdict::new(
        worst_prefix <= 1e-6 && all <= 1e-6,
        format!("worst prefix rel err {worst_prefix:.2e}, all nodes after 8 iterations {all:.2e}"),
    ))
}

fn random_mlp(rng: &mut ChaCha8Rng, dim: usize) -> Result<MlpField> {
    let hidden = rng.gen_range(3..8);
    MlpField::init_uniform(vec![dim, hidden, dim], vec![Activation::Tanh, Activation::Identity], rng.gen())
}

fn criterion_2() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let dim = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=6);
        let f = random_mlp(&mut rng, dim)?;
        let grid = TimeGrid::uniform(0.0, rng.gen_range(0.5..2.0), n)?;
        let b: Vec<DVector<f64>> = (0..=n)
            .map(|_| DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let state = ShootingState::new(grid, b)?;
        let spec = SolverSpec::rk4(4);
        let dense = newton_dense_reference(&f, &state, &spec, 1.0, &mut NfeLedger::new())?;
        let direct = newton_direct_iteration(&f, &state, &spec, shooting::NewtonMode::FwSensitivity, &mut NfeLedger::new())?;
        worst = worst.max(node_rel(dense.nodes(), direct.nodes()));
    }
    Ok(Verdict::new(worst <= 1e-10, format!("worst rel gap over 20 instances {worst:.2e}")))
}

fn central_jacobian<F: VectorField>(f: &F, b: &DVector<f64>, span: (f64, f64), spec: &SolverSpec, h: f64) -> Result<DMatrix<f64>> {
    let n = b.len();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut up = b.clone();
        up[j] += h;
        let mut down = b.clone();
        down[j] -= h;
        let fu = integrate(f, &up, span, spec, &mut NfeLedger::new())?;
        let fd = integrate(f, &down, span, spec, &mut NfeLedger::new())?;
        jac.set_column(j, &((fu.final_state() - fd.final_state()) / (2.0 * h)));
    }
    Ok(jac)
}

/// `e^M` by scaling and squaring with a 20-term Taylor series.
fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = m.abs().row_sum().max();
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let a = m / 2f64.powi(s);
    let n = m.nrows();
    let mut term = DMatrix::identity(n, n);
    let mut sum = term.clone();
    for k in 1..=20 {
        term = &term * &a / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

fn criterion_3() -> Result<Verdict> {
    let spec = SolverSpec::rk4(50);
    let vdp = BuiltinField::vanderpol(1.0);
    let b = DVector::from_vec(vec![2.0, 0.0]);
    let (_, dphi) = flow_with_sensitivity(&vdp, &b, (0.0, 0.1), &spec, &mut NfeLedger::new())?;
    let fd = central_jacobian(&vdp, &b, (0.0, 0.1), &spec, 1e-6)?;
    let e_vdp = (&dphi - &fd).norm() / fd.norm();

    let mlp = LimitCycleTask::field(LimitCycleTask::default_controller(5))?;
    let b = DVector::from_vec(vec![0.7, -1.2]);
    let (_, dphi) = flow_with_sensitivity(&mlp, &b, (0.0, 0.5), &spec, &mut NfeLedger::new())?;
    let fd = central_jacobian(&mlp, &b, (0.0, 0.5), &spec, 1e-6)?;
    let e_mlp = (&dphi - &fd).norm() / fd.norm();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
    let lin = BuiltinField::linear(a.clone())?;
    let h = 0.8;
    let (_, dphi) = flow_with_sensitivity(&lin, &DVector::from_vec(vec![1.0, 0.0, -1.0]), (0.0, h), &SolverSpec::rk4(200), &mut NfeLedger::new())?;
    let exact = expm(&(a * h));
    let e_lin = (&dphi - &exact).norm() / exact.norm();
    Ok(Verdict::new(
        e_vdp <= 1e-5 && e_mlp <= 1e-5 && e_lin <= 1e-6,
        format!("vanderpol vs fd {e_vdp:.2e}, mlp vs fd {e_mlp:.2e}, linear vs expm {e_lin:.2e}"),
    ))
}

fn criterion_4() -> Result<Verdict> {
    let tight = SolverSpec::dopri5(1e-11, 1e-11);
    let opts = AdjointOptions {
        backward: SolverSpec::dopri5(1e-10, 1e-10),
        residual_tol: 1e-8,
    };

    let growth = BuiltinField::growth(-0.7);
    let z0 = DVector::from_vec(vec![1.0]);
    let grid = TimeGrid::uniform(0.0, 1.0, 20)?;
    let state = sequential_state(&growth, &z0, &grid, &tight, &mut NfeLedger::new())?;
    let mut w = vec![DVector::zeros(1); 21];
    w[20] = DVector::from_vec(vec![1.0]);
    let adj = interpolated_adjoint_grad(&growth, &state, &w, &opts, &mut NfeLedger::new())?;
    let imp = implicit_gradient(&growth, &state, &tight, &w, &opts, &mut NfeLedger::new())?;
    let fd = finite_difference_grad(&growth, &z0, &grid, &tight, 1e-5, |_, nodes| nodes[20][0])?;
    let exact = (-0.7f64).exp();
    let g_fd = adj.relative_error(&fd);
    let g_imp = adj.relative_error(&imp);
    let g_exact = (adj.grad[0] - exact).abs() / exact;

    let task = LimitCycleTask {
        curve: Curve::Circle,
        control_weight: 0.1,
        z0_batch: LimitCycleTask::sample_batch(4, 3),
        horizon: (0.0, 2.0),
        intervals: 20,
    };
    let field = LimitCycleTask::field(LimitCycleTask::default_controller(8))?;
    let grid = TimeGrid::uniform(0.0, 2.0, 20)?;
    let states: Vec<ShootingState> = task
        .z0_batch
        .iter()
        .map(|z| sequential_state(&field, z, &grid, &tight, &mut NfeLedger::new()))
        .collect::<Result<_>>()?;
    let views: Vec<&[DVector<f64>]> = states.iter().map(|s| s.nodes()).collect();
    let eval = limit_cycle_loss(&task, &field, &views);
    let mut g_adj = eval.param_grad.clone();
    let mut g_imp_lc = eval.param_grad.clone();
    for (s, g) in states.iter().zip(&eval.node_grads) {
        g_adj += interpolated_adjoint_grad(&field, s, g, &opts, &mut NfeLedger::new())?.grad;
        g_imp_lc += implicit_gradient(&field, s, &tight, g, &opts, &mut NfeLedger::new())?.grad;
    }
    let fd_lc = finite_difference_grad_with(&field, 1e-6, |f| {
        let nodes: Vec<Vec<DVector<f64>>> = task
            .z0_batch
            .iter()
            .map(|z| rollout(f, z, &grid, &tight, &mut NfeLedger::new()))
            .collect::<Result<_>>()?;
        let views: Vec<&[DVector<f64>]> = nodes.iter().map(|n| n.as_slice()).collect();
        Ok(limit_cycle_loss(&task, f, &views).value)
    })?;
    let lc_fd = rel(&g_adj, &fd_lc.grad);
    let lc_imp = rel(&g_adj, &g_imp_lc);
    Ok(Verdict::new(
        g_fd <= 1e-3 && g_imp <= 1e-4 && lc_fd <= 1e-3 && lc_imp <= 1e-4,
        format!(
            "growth: adjoint vs fd {g_fd:.2e}, vs implicit {g_imp:.2e}, vs closed form {g_exact:.4e}; \
             limit cycle N=20: adjoint vs fd {lc_fd:.4e}, vs implicit {lc_imp:.2e}"
        ),
    ))
}

fn criterion_5() -> Result<Verdict> {
    let task = LimitCycleTask {
        curve: Curve::Circle,
        control_weight: 0.1,
        z0_batch: LimitCycleTask::sample_batch(8, 7),
        horizon: (0.0, 2.0),
        intervals: 20,
    };
    let grid = TimeGrid::uniform(0.0, 2.0, 20)?;
    let spec = SolverSpec::dopri5(1e-10, 1e-10);
    let mut setup = TrackingSetup::new(spec);
    setup.init = spec;
    setup.reference = Some(spec);
    setup.adjoint = SolverSpec::dopri5(1e-8, 1e-8);
    let field = LimitCycleTask::field(LimitCycleTask::default_controller(11))?;
    let report = tracking_scaling_experiment(&field, &task, &task.z0_batch, &grid, &setup, &[1e-3, 5e-4, 2.5e-4], 5)?;
    let ratios = report.halving_ratios();
    let slope_ok = (report.slope - 2.0).abs() <= 0.5;
    let ratios_ok = ratios.iter().all(|r| (2.5..=6.0).contains(r));
    Ok(Verdict::new(
        slope_ok && ratios_ok,
        format!("slope {:.3}, halving ratios {:?}", report.slope, ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>()),
    ))
}

/// The desk-scale control preset: 64 initial conditions, N=100 on [0, 10],
/// two rk4 steps per sub-interval, Adam at 1e-4.
struct Desk {
    task: LimitCycleTask,
    grid: TimeGrid,
    field: ControlledField,
    setup: TrackingSetup,
    cfg: TrainConfig,
}

fn desk(epochs: usize) -> Result<Desk> {
    let task = LimitCycleTask {
        curve: Curve::Circle,
        control_weight: 0.01,
        z0_batch: LimitCycleTask::sample_batch(64, 7),
        horizon: (0.0, 10.0),
        intervals: 100,
    };
    let mut setup = TrackingSetup::new(SolverSpec::rk4(2));
    setup.reference = Some(SolverSpec::dopri5(1e-8, 1e-8));
    setup.adjoint = SolverSpec::rk4(2);
    Ok(Desk {
        grid: TimeGrid::uniform(0.0, 10.0, 100)?,
        field: LimitCycleTask::field(LimitCycleTask::default_controller(11))?,
        task,
        setup,
        cfg: TrainConfig {
            learning_rate: 1e-4,
            optimizer: Optimizer::adam(),
            epochs,
            newton_iters_per_step: 1,
            seed: 0,
            divergence_factor: 1e2,
        },
    })
}

fn criterion_6() -> Result<Verdict> {
    let d = desk(3)?;
    let mut msl = Trainer::new(d.field.clone(), d.task.clone(), &d.task.z0_batch, &d.grid, d.setup.clone(), d.cfg.clone())?;
    let msl_trace = msl.train()?;
    let msl_span = msl_trace.records.iter().map(|r| r.span_nfe).max().unwrap_or(0);
    let mut base = BaselineTrainer::new(
        d.field,
        d.task.clone(),
        &d.task.z0_batch,
        &d.grid,
        SolverSpec::dopri5(1e-5, 1e-5),
        SolverSpec::rk4(2),
        &d.cfg,
    )?;
    let base_trace = base.train()?;
    let base_nfe = base_trace.records.iter().map(|r| r.span_nfe).min().unwrap_or(0);
    let ratio = base_nfe as f64 / msl_span as f64;
    let spans_ok = msl_trace.records.iter().all(|r| r.span_nfe == 8);
    Ok(Verdict::new(
        spans_ok && ratio >= 10.0,
        format!(
            "msl span/epoch {msl_span} (total {} over {} trajectories), sequential dopri5 NFE/epoch {base_nfe}, ratio {ratio:.1}",
            msl_trace.records[0].total_nfe,
            d.task.z0_batch.len()
        ),
    ))
}

fn criterion_7() -> Result<Verdict> {
    let d = desk(200)?;
    let mut trainer = Trainer::new(d.field, d.task.clone(), &d.task.z0_batch, &d.grid, d.setup, d.cfg)?;
    let trace = trainer.train()?;
    let worst_smape = trace.records.iter().filter_map(|r| r.smape).fold(0.0, f64::max);
    let losses: Vec<f64> = trace.records.iter().take(50).map(|r| r.loss).collect();
    let decreasing = losses.windows(2).all(|w| w[1] < w[0]);
    let first = trace.records.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let last = trace.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    let smape_ok = trace.records.iter().all(|r| r.smape.is_some_and(|s| s < 0.05));
    Ok(Verdict::new(
        smape_ok && decreasing,
        format!("max SMAPE {worst_smape:.2e}, loss {first:.4} -> {last:.4}, strictly decreasing over first 50: {decreasing}"),
    ))
}

/// Wall-clock ratio on the 20-dim linear task, N=500; reported only.
fn multithread_speedup() -> Result<String> {
    let task = LinearControlTask::bundled()?;
    let field = task.field(task.default_controller(Activation::Identity, 4)?)?;
    let z0 = task.default_z0();
    let grid = TimeGrid::uniform(0.0, 5.0, 500)?;
    let specs = SolveSpecs::new(SolverSpec::rk4(1));
    let stop = StopRule {
        max_iters: 3,
        residual_tol: 0.0,
    };
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).max(2);
    let run = |n: usize| -> Result<f64> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config(e.to_string()))?;
        let clock = Instant::now();
        pool.install(|| msl_solve(&field, &z0, &grid, &InitStrategy::Broadcast, MslMethod::NEWTON_FW, &specs, stop))?;
        Ok(clock.elapsed().as_secs_f64())
    };
    let one = run(1)?;
    let many = run(threads)?;
    Ok(format!(
        "1 thread {one:.2}s, {threads} threads {many:.2}s, speedup {:.2}x on {} cpu(s)",
        one / many,
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    ))
}

fn criterion_8() -> Result<Verdict> {
    let f = BuiltinField::vanderpol(1.0);
    let z0 = DVector::from_vec(vec![2.0, 0.0]);
    let grid = TimeGrid::uniform(0.0, 4.0, 8)?;
    let fine = SolverSpec::rk4(20);
    let coarse = SolverSpec::rk4(1);

    let mut exact = sequential_state(&f, &z0, &grid, &fine, &mut NfeLedger::new())?;
    exact.invalidate();
    let after = parareal_iteration(&f, &exact, &fine, &coarse, &mut NfeLedger::new())?;
    let e_exact = node_rel(after.nodes(), exact.nodes());

    let solved = msl_solve(
        &f,
        &z0,
        &grid,
        &InitStrategy::Broadcast,
        MslMethod::NEWTON_FW,
        &SolveSpecs::new(fine),
        StopRule {
            max_iters: 8,
            residual_tol: 1e-13,
        },
    )?;
    let mut state = solved.state;
    state.invalidate();
    let after = parareal_iteration(&f, &state, &fine, &coarse, &mut NfeLedger::new())?;
    let e_newton = node_rel(after.nodes(), state.nodes());
    Ok(Verdict::new(
        e_exact <= 1e-10 && e_newton <= 1e-10,
        format!("max rel change at sequential root {e_exact:.2e}, at Newton root {e_newton:.2e}"),
    ))
}

/// Everything a fixed-step pipeline produces, flattened for bitwise comparison.
fn fixed_step_fingerprint() -> Result<Vec<u64>> {
    let mut out = Vec::new();
    let mut push = |v: &[DVector<f64>]| out.extend(v.iter().flat_map(|r| r.iter().map(|x| x.to_bits())));

    let task = LinearControlTask::bundled()?;
    let field = task.field(task.default_controller(Activation::Identity, 4)?)?;
    let grid = TimeGrid::uniform(0.0, 2.0, 40)?;
    let specs = SolveSpecs::new(SolverSpec::rk4(2));
    let stop = StopRule {
        max_iters: 4,
        residual_tol: 0.0,
    };
    for method in [MslMethod::NEWTON_FW, MslMethod::NEWTON_JVP, MslMethod::Parareal] {
        let s = msl_solve(&field, &task.default_z0(), &grid, &InitStrategy::Broadcast, method, &specs, stop)?;
        push(s.state.nodes());
    }

    let lc = LimitCycleTask {
        curve: Curve::Circle,
        control_weight: 0.01,
        z0_batch: LimitCycleTask::sample_batch(12, 9),
        horizon: (0.0, 3.0),
        intervals: 30,
    };
    let lgrid = TimeGrid::uniform(0.0, 3.0, 30)?;
    let mut setup = TrackingSetup::new(SolverSpec::rk4(2));
    setup.init = SolverSpec::rk4(4);
    setup.adjoint = SolverSpec::rk4(2);
    setup.reference = Some(SolverSpec::rk4(4));
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        optimizer: Optimizer::adam(),
        epochs: 3,
        newton_iters_per_step: 1,
        seed: 0,
        divergence_factor: 1e2,
    };
    let f = LimitCycleTask::field(LimitCycleTask::default_controller(2))?;
    let mut trainer = Trainer::new(f.clone(), lc.clone(), &lc.z0_batch, &lgrid, setup, cfg.clone())?;
    let trace = trainer.train()?;
    for s in trainer.states() {
        push(s.nodes());
    }
    push(&[DVector::from_vec(trainer.field().params())]);
    push(&[DVector::from_iterator(trace.records.len(), trace.records.iter().map(|r| r.loss))]);

    let mut base = BaselineTrainer::new(f, lc.clone(), &lc.z0_batch, &lgrid, SolverSpec::rk4(2), SolverSpec::rk4(2), &cfg)?;
    base.train()?;
    push(&[DVector::from_vec(base.field().params())]);
    Ok(out)
}

fn criterion_9() -> Result<Verdict> {
    let in_pool = |n: usize| -> Result<Vec<u64>> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config(e.to_string()))?
            .install(fixed_step_fingerprint)
    };
    let one = in_pool(1)?;
    let four = in_pool(4)?;
    let rerun = in_pool(4)?;
    Ok(Verdict::new(
        one == four && four == rerun,
        format!(
            "{} values; 1 vs 4 threads identical: {}, rerun identical: {}",
            one.len(),
            one == four,
            four == rerun
        ),
    ))
}

type Criterion = fn() -> Result<Verdict>;

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(usize, &str, u64, Criterion); 9] = [
        (1, "finite-step convergence", 5, criterion_1),
        (2, "dense reference equals direct sweep", 10, criterion_2),
        (3, "forward sensitivity", 5, criterion_3),
        (4, "gradient triangle", 30, criterion_4),
        (5, "fixed-point tracking scaling", 120, criterion_5),
        (6, "NFE economics", 300, criterion_6),
        (7, "control training", 300, criterion_7),
        (8, "parareal fixed-point invariance", 2, criterion_8),
        (9, "determinism", 300, criterion_9),
    ];
    let mut failed = 0;
    for (id, name, limit, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == &id.to_string()) {
            continue;
        }
        let clock = Instant::now();
        let verdict = match run() {
            Ok(v) => timed(Duration::from_secs(limit), v, clock.elapsed()),
            Err(e) => Verdict::new(false, format!("error: {e}")),
        };
        if !verdict.pass {
            failed += 1;
        }
        println!(
            "criterion {id} [{name}]: {} ({})",
            if verdict.pass { "PASS" } else { "FAIL" },
            verdict.detail
        );
        if id == 7 {
            match multithread_speedup() {
                Ok(s) => println!("criterion 7 [multi-thread speedup, reported only]: {s}"),
                Err(e) => println!("criterion 7 [multi-thread speedup, reported only]: error: {e}"),
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
