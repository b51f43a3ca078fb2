use nalgebra::DVector;
use timeshoot::{BaselineTrainer, EpochRecord, Objective, TimeGrid, Trainer, VectorField};

use crate::output::CsvOut;
use crate::preset::{Instance, TrainingSection};
use crate::{CliError, RunContext};

const TRACE_HEADER: [&str; 8] = [
    "epoch",
    "loss",
    "tracking_error",
    "residual_inf",
    "total_nfe",
    "span_nfe",
    "wall_ms",
    "smape",
];

struct Trace {
    csv: CsvOut,
    records: Vec<EpochRecord>,
    print_every: usize,
}

impl Trace {
    fn new(csv: CsvOut, epochs: usize) -> Self {
        Self {
            csv,
            records: Vec::with_capacity(epochs),
            print_every: (epochs / 20).max(1),
        }
    }

    fn push(&mut self, r: EpochRecord, epochs: usize) -> Result<(), CliError> {
        self.csv.row(&[
            r.epoch.into(),
            r.loss.into(),
            r.tracking_error.into(),
            r.residual_inf.into(),
            r.total_nfe.into(),
            r.span_nfe.into(),
            r.wall_ms.into(),
            r.smape.into(),
        ])?;
        self.csv.flush()?;
        if r.epoch.is_multiple_of(self.print_every) || r.epoch == epochs || r.epoch == 1 {
            let smape = r.smape.map_or("-".to_string(), |s| format!("{s:.3e}"));
            println!(
                "epoch {:>5} loss={:.6e} residual_inf={:.3e} smape={smape} span_nfe={} wall_ms={:.1}",
                r.epoch, r.loss, r.residual_inf, r.span_nfe, r.wall_ms
            );
        }
        self.records.push(r);
        Ok(())
    }

    fn summary(self, mode: &str) -> Result<(), CliError> {
        self.csv.finish()?;
        let n = self.records.len() as f64;
        let first = self.records.first().map_or(f64::NAN, |r| r.loss);
        let last = self.records.last().map_or(f64::NAN, |r| r.loss);
        let max_smape = self.records.iter().filter_map(|r| r.smape).fold(None, |m: Option<f64>, s| {
            Some(m.map_or(s, |m| m.max(s)))
        });
        let span = self.records.iter().map(|r| r.span_nfe as f64).sum::<f64>() / n;
        let total = self.records.iter().map(|r| r.total_nfe as f64).sum::<f64>() / n;
        println!(
            "control mode={mode} epochs={} loss_first={first:.6e} loss_last={last:.6e} max_smape={} \
             span_nfe_per_epoch={span:.1} total_nfe_per_epoch={total:.1}",
            self.records.len(),
            max_smape.map_or("-".to_string(), |s| format!("{s:.3e}")),
        );
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn train<F, L>(
    ctx: &RunContext,
    field: F,
    objective: L,
    z0s: &[DVector<f64>],
    grid: &TimeGrid,
    section: &TrainingSection,
    epochs: usize,
    baseline: bool,
) -> Result<F, CliError>
where
    F: VectorField + Clone,
    L: Objective<F>,
{
    let mut cfg = section.config(ctx.preset.preset.seed);
    cfg.epochs = epochs;
    let (file, mode) = if baseline {
        ("baseline_trace.csv", "baseline")
    } else {
        ("control_trace.csv", "msl")
    };
    let mut trace = Trace::new(CsvOut::create(&ctx.path(file), &ctx.hash(), &TRACE_HEADER)?, epochs);
    let field = if baseline {
        let mut trainer = BaselineTrainer::new(field, objective, z0s, grid, section.baseline, section.adjoint, &cfg)?;
        for _ in 0..epochs {
            trace.push(trainer.train_step()?, epochs)?;
        }
        trainer.field().clone()
    } else {
        let mut trainer = Trainer::new(field, objective, z0s, grid, section.setup(), cfg)?;
        for _ in 0..epochs {
            trace.push(trainer.train_step()?, epochs)?;
        }
        trainer.into_field()
    };
    trace.summary(mode)?;
    Ok(field)
}

pub fn control(ctx: &RunContext, baseline: bool, epochs: Option<usize>) -> Result<(), CliError> {
    let section = &ctx.preset.preset.training;
    let epochs = epochs.unwrap_or(section.epochs);
    let suffix = if baseline { "_baseline" } else { "" };
    match ctx.preset.build()? {
        Instance::Controlled {
            field,
            objective,
            z0s,
            grid,
        } => {
            let trained = train(ctx, field, objective, &z0s, &grid, section, epochs, baseline)?;
            let path = ctx.path(&format!("controller{suffix}.json"));
            std::fs::write(&path, trained.controller().to_json())?;
        }
        Instance::Builtin {
            field,
            objective,
            z0s,
            grid,
        } => {
            let trained = train(ctx, field, objective, &z0s, &grid, section, epochs, baseline)?;
            let path = ctx.path(&format!("params{suffix}.json"));
            let json = serde_json::to_string(&trained.params()).expect("floats serialize");
            std::fs::write(&path, json)?;
        }
    }
    Ok(())
}
