use nalgebra::DVector;
use timeshoot::adjoint::relative_error;
use timeshoot::shooting::sequential_state;
use timeshoot::{
    finite_difference_grad_with, implicit_gradient, init_shooting, interpolated_adjoint_grad, matching_residual,
    rollout, AdjointOptions, InitStrategy, NfeLedger, Objective, ShootingState, TimeGrid, VectorField,
};

use crate::output::CsvOut;
use crate::preset::GradcheckSection;
use crate::{CliError, RunContext};

pub struct GradcheckReport {
    pub adjoint: DVector<f64>,
    pub implicit: DVector<f64>,
    pub finite_difference: DVector<f64>,
    pub residual: f64,
    pub adjoint_vs_fd: f64,
    pub implicit_vs_fd: f64,
    pub adjoint_vs_implicit: f64,
    pub pass: bool,
}

/// Gradients of the objective by all three paths. The root comes from a
/// sequential solve with `section.fine`; with `stale` a broadcast state is
/// used, which the gradient paths must reject.
pub fn gradcheck_instance<F, L>(
    field: &F,
    objective: &L,
    z0s: &[DVector<f64>],
    grid: &TimeGrid,
    section: &GradcheckSection,
    stale: bool,
) -> Result<GradcheckReport, CliError>
where
    F: VectorField + Clone,
    L: Objective<F>,
{
    let mut monitor = NfeLedger::new();
    let mut states: Vec<ShootingState> = z0s
        .iter()
        .map(|z0| {
            if stale {
                init_shooting(field, z0, grid, &InitStrategy::Broadcast, &mut monitor)
            } else {
                sequential_state(field, z0, grid, &section.fine, &mut monitor)
            }
        })
        .collect::<Result<_, _>>()?;
    let mut residual = 0.0f64;
    for s in &mut states {
        let r = matching_residual(field, s, &section.fine, &mut monitor)?.norm_inf;
        s.set_residual(r);
        residual = residual.max(r);
    }

    let views: Vec<&[DVector<f64>]> = states.iter().map(ShootingState::nodes).collect();
    let eval = objective.evaluate(field, &views);
    let opts = AdjointOptions {
        backward: section.adjoint,
        residual_tol: section.residual_tol,
    };
    let mut adjoint = eval.param_grad.clone();
    let mut implicit = eval.param_grad.clone();
    for (s, g) in states.iter().zip(&eval.node_grads) {
        adjoint += interpolated_adjoint_grad(field, s, g, &opts, &mut monitor)?.grad;
        implicit += implicit_gradient(field, s, &section.fine, g, &opts, &mut monitor)?.grad;
    }
    let fd = finite_difference_grad_with(field, section.fd_step, |f| {
        let nodes: Vec<Vec<DVector<f64>>> = z0s
            .iter()
            .map(|z0| rollout(f, z0, grid, &section.fine, &mut NfeLedger::new()))
            .collect::<Result<_, _>>()?;
        let views: Vec<&[DVector<f64>]> = nodes.iter().map(Vec::as_slice).collect();
        Ok(objective.value(f, &views))
    })?
    .grad;

    let adjoint_vs_fd = relative_error(&adjoint, &fd);
    let implicit_vs_fd = relative_error(&implicit, &fd);
    let adjoint_vs_implicit = relative_error(&adjoint, &implicit);
    Ok(GradcheckReport {
        pass: adjoint_vs_fd <= section.fd_tol
            && implicit_vs_fd <= section.fd_tol
            && adjoint_vs_implicit <= section.implicit_tol,
        adjoint,
        implicit,
        finite_difference: fd,
        residual,
        adjoint_vs_fd,
        implicit_vs_fd,
        adjoint_vs_implicit,
    })
}

pub fn gradcheck(ctx: &RunContext, stale: bool) -> Result<(), CliError> {
    let section = &ctx.preset.preset.gradcheck;
    let inst = ctx.preset.build()?;
    let report = with_instance!(&inst, |field, objective, z0s, grid| gradcheck_instance(
        field, objective, z0s, grid, section, stale
    ))?;

    let mut csv = CsvOut::create(
        &ctx.path("gradcheck.csv"),
        &ctx.hash(),
        &["method", "grad_norm", "max_component", "fd_relative_error"],
    )?;
    for (name, g, err) in [
        ("interpolated_adjoint", &report.adjoint, Some(report.adjoint_vs_fd)),
        ("implicit", &report.implicit, Some(report.implicit_vs_fd)),
        ("finite_difference", &report.finite_difference, None),
    ] {
        csv.row(&[name.into(), g.norm().into(), g.amax().into(), err.into()])?;
    }
    csv.finish()?;

    let verdict = if report.pass { "PASS" } else { "FAIL" };
    println!(
        "gradcheck {verdict} params={} residual_inf={:.3e} adjoint_vs_fd={:.3e} implicit_vs_fd={:.3e} \
         adjoint_vs_implicit={:.3e} (limits {:.0e}, {:.0e})",
        report.adjoint.len(),
        report.residual,
        report.adjoint_vs_fd,
        report.implicit_vs_fd,
        report.adjoint_vs_implicit,
        section.fd_tol,
        section.implicit_tol
    );
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "gradient paths disagree: adjoint vs fd {:.3e}, implicit vs fd {:.3e}, adjoint vs implicit {:.3e}",
            report.adjoint_vs_fd, report.implicit_vs_fd, report.adjoint_vs_implicit
        )))
    }
}
