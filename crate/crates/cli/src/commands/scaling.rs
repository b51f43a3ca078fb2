use timeshoot::tracking::tracking_scaling_experiment;
use timeshoot::{NewtonMode, TrackingSetup};

use super::sci_list;
use crate::output::CsvOut;
use crate::{CliError, RunContext};

pub fn track_scaling(ctx: &RunContext) -> Result<(), CliError> {
    let section = &ctx.preset.preset.scaling;
    let setup = TrackingSetup {
        fine: section.solver,
        init: section.solver,
        reference: Some(section.solver),
        adjoint: section.adjoint,
        mode: NewtonMode::FwSensitivity,
    };
    let inst = ctx.preset.build()?;
    let report = with_instance!(&inst, |field, objective, z0s, grid| tracking_scaling_experiment(
        field,
        objective,
        z0s,
        grid,
        &setup,
        &section.etas,
        section.epochs_per_eta
    ))?;

    let mut csv = CsvOut::create(&ctx.path("scaling.csv"), &ctx.hash(), &["eta", "mean_tracking_error"])?;
    for row in &report.rows {
        csv.row(&[row.eta.into(), row.mean_tracking_error.into()])?;
    }
    csv.finish()?;

    let ratios = report.halving_ratios();
    let (lo, hi) = section.slope_band;
    let slope_ok = (lo..=hi).contains(&report.slope);
    let ratios_ok = ratios.iter().all(|r| (section.ratio_band.0..=section.ratio_band.1).contains(r));
    let pass = slope_ok && ratios_ok;
    println!(
        "track-scaling {} slope={:.3} (band {lo}..{hi}) ratios={} errors={}",
        if pass { "PASS" } else { "FAIL" },
        report.slope,
        sci_list(&ratios),
        sci_list(&report.rows.iter().map(|r| r.mean_tracking_error).collect::<Vec<_>>()),
    );
    if pass {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "tracking error slope {:.3} or ratios {} outside the configured bands",
            report.slope,
            sci_list(&ratios)
        )))
    }
}
