//! Fast checks of the core guarantees on small built-in problems.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use timeshoot::shooting::parareal_iteration;
use timeshoot::{Error, MslMethod, NfeLedger, SolverSpec, TimeGrid, VectorField};

use crate::commands::{bench_run, gradcheck_instance, solve_trajectory, with_instance};
use crate::output::CsvOut;
use crate::preset::{parse_preset, Instance, LoadedPreset, SolveSection};
use crate::CliError;

const VANDERPOL: &str = r#"
name = "selftest-vanderpol"
[problem]
kind = "builtin"
field = { name = "vanderpol", alpha = 1.0 }
z0 = [2.0, 0.0]
horizon = [0.0, 4.0]
intervals = 8
[solve]
fine = { method = "rk4", steps = 4 }
residual_tol = 0.0
"#;

const LINEAR: &str = r#"
name = "selftest-linear"
[problem]
kind = "builtin"
field = { name = "linear", a = [[-0.5, 1.0, 0.0], [-1.0, -0.5, 0.2], [0.0, 0.3, -1.0]] }
z0 = [1.0, -1.0, 0.5]
horizon = [0.0, 3.0]
intervals = 12
[solve]
fine = { method = "rk4", steps = 8 }
max_iters = 1
"#;

const GROWTH: &str = r#"
name = "selftest-growth"
[problem]
kind = "builtin"
field = { name = "growth", rate = -0.7 }
z0 = [1.0]
horizon = [0.0, 1.0]
intervals = 20
"#;

const ZERO_COST: &str = r#"
name = "selftest-zero"
[problem]
kind = "builtin"
field = { name = "growth", rate = 0.4 }
z0 = [1.5]
horizon = [0.0, 1.0]
intervals = 6
loss = { kind = "zero" }
"#;

const LINEAR_CONTROL: &str = r#"
name = "selftest-linear-control"
seed = 5
[problem]
kind = "linear_control"
horizon = [0.0, 2.0]
intervals = 50
"#;

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn build(text: &str) -> Result<Instance, CliError> {
    let preset = parse_preset(text).map_err(|e| CliError::Config(e.to_string()))?;
    LoadedPreset {
        preset,
        base_dir: PathBuf::new(),
    }
    .build()
}

fn solve_rel_error(text: &str) -> Result<(f64, usize), CliError> {
    let preset = parse_preset(text).map_err(|e| CliError::Config(e.to_string()))?;
    let inst = build(text)?;
    let iters = preset.solve.max_iters.unwrap_or(inst.grid().intervals());
    let s = with_instance!(&inst, |field, _l, z0s, grid| solve_trajectory(
        field,
        &z0s[0],
        grid,
        &preset.solve,
        iters
    ))?;
    Ok((s.max_rel_error(), s.state.iteration()))
}

fn vanderpol_exact() -> Result<(bool, String), CliError> {
    let (err, iters) = solve_rel_error(VANDERPOL)?;
    Ok((err <= 1e-12, format!("max rel error {err:.3e} after {iters} iterations")))
}

fn linear_one_step() -> Result<(bool, String), CliError> {
    let (err, iters) = solve_rel_error(LINEAR)?;
    Ok((err <= 1e-8 && iters == 1, format!("max rel error {err:.3e} after {iters} iteration")))
}

fn growth_gradcheck() -> Result<(bool, String), CliError> {
    let preset = parse_preset(GROWTH).map_err(|e| CliError::Config(e.to_string()))?;
    let r = with_instance!(&build(GROWTH)?, |f, l, z, g| gradcheck_instance(
        f,
        l,
        z,
        g,
        &preset.gradcheck,
        false
    ))?;
    let exact = (-0.7f64).exp();
    let closed = (r.adjoint[0] - exact).abs() / exact;
    Ok((
        r.pass && closed <= 1e-4,
        format!(
            "adjoint vs fd {:.2e}, vs implicit {:.2e}, vs closed form {closed:.2e}",
            r.adjoint_vs_fd, r.adjoint_vs_implicit
        ),
    ))
}

fn zero_cost_gradcheck() -> Result<(bool, String), CliError> {
    let preset = parse_preset(ZERO_COST).map_err(|e| CliError::Config(e.to_string()))?;
    let r = with_instance!(&build(ZERO_COST)?, |f, l, z, g| gradcheck_instance(
        f,
        l,
        z,
        g,
        &preset.gradcheck,
        false
    ))?;
    let largest = r.adjoint.amax().max(r.implicit.amax()).max(r.finite_difference.amax());
    Ok((r.pass && largest == 0.0, format!("largest gradient entry {largest:e}")))
}

fn stale_rejected() -> Result<(bool, String), CliError> {
    let preset = parse_preset(GROWTH).map_err(|e| CliError::Config(e.to_string()))?;
    let r = with_instance!(&build(GROWTH)?, |f, l, z, g| gradcheck_instance(
        f,
        l,
        z,
        g,
        &preset.gradcheck,
        true
    ));
    Ok(match r {
        Err(CliError::Core(e)) if matches!(e.root(), Error::StaleSolution { .. }) => (true, e.to_string()),
        Err(e) => (false, format!("unexpected error: {e}")),
        Ok(_) => (false, "unconverged state was accepted".into()),
    })
}

fn parareal_rows_moved<F: VectorField + ?Sized>(
    field: &F,
    z0: &DVector<f64>,
    grid: &TimeGrid,
    section: &SolveSection,
) -> Result<usize, CliError> {
    let mut root = solve_trajectory(field, z0, grid, section, grid.intervals())?.state;
    root.invalidate();
    let next = parareal_iteration(field, &root, &section.fine, &section.coarse, &mut NfeLedger::new())?;
    Ok(root.nodes().iter().zip(next.nodes()).filter(|(a, b)| a != b).count())
}

fn parareal_fixed_point() -> Result<(bool, String), CliError> {
    let preset = parse_preset(VANDERPOL).map_err(|e| CliError::Config(e.to_string()))?;
    let moved = with_instance!(&build(VANDERPOL)?, |field, _l, z0s, grid| parareal_rows_moved(
        field,
        &z0s[0],
        grid,
        &preset.solve
    ))?;
    Ok((moved == 0, format!("{moved} rows moved")))
}

fn thread_determinism() -> Result<(bool, String), CliError> {
    let inst = build(LINEAR_CONTROL)?;
    let mut outputs = Vec::new();
    for threads in [1, 3] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let run = pool.install(|| {
            with_instance!(&inst, |field, _l, z0s, grid| bench_run(
                field,
                &z0s[0],
                grid,
                MslMethod::NEWTON_FW,
                SolverSpec::rk4(1),
                2
            ))
        })?;
        outputs.push(run.nodes);
    }
    let same = outputs[0] == outputs[1];
    Ok((same, format!("{} values, bitwise identical: {same}", outputs[0].len())))
}

fn span_independent_of_n() -> Result<(bool, String), CliError> {
    let mut spans = Vec::new();
    for n in [10, 40] {
        let text = LINEAR_CONTROL.replace("intervals = 50", &format!("intervals = {n}"));
        let inst = build(&text)?;
        let run = with_instance!(&inst, |field, _l, z0s, grid| bench_run(
            field,
            &z0s[0],
            grid,
            MslMethod::NEWTON_FW,
            SolverSpec::rk4(1),
            1
        ))?;
        spans.push(run.span_nfe);
    }
    Ok((spans[0] == spans[1], format!("span NFE {spans:?} for N = [10, 40]")))
}

pub fn run(out: &Path) -> Result<(), CliError> {
    type CheckFn = fn() -> Result<(bool, String), CliError>;
    let checks: [(&'static str, CheckFn); 8] = [
        ("vanderpol_exact_after_n_iterations", vanderpol_exact),
        ("linear_exact_after_one_iteration", linear_one_step),
        ("growth_gradient_paths_agree", growth_gradcheck),
        ("zero_cost_gradients_vanish", zero_cost_gradcheck),
        ("stale_state_rejected", stale_rejected),
        ("parareal_fixed_point", parareal_fixed_point),
        ("thread_count_determinism", thread_determinism),
        ("span_nfe_independent_of_n", span_independent_of_n),
    ];
    let results: Vec<Check> = checks
        .iter()
        .map(|(name, f)| {
            let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
            Check { name, pass, detail }
        })
        .collect();

    let mut csv = CsvOut::create(&out.join("selftest.csv"), "selftest", &["check", "result", "detail"])?;
    for c in &results {
        let verdict = if c.pass { "PASS" } else { "FAIL" };
        println!("selftest {} {verdict} ({})", c.name, c.detail);
        csv.row(&[c.name.into(), verdict.into(), c.detail.clone().into()])?;
    }
    csv.finish()?;

    let failed: Vec<&str> = results.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("selftest failed: {}", failed.join(", "))))
    }
}
