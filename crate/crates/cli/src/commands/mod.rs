//! Subcommand implementations. Each has a generic core that works on any
//! field and objective, and a thin entry point that writes the artifacts.

/// Run `$body` with the field, objective, initial conditions and grid of
/// either instance variant bound to the given names.
macro_rules! with_instance {
    ($inst:expr, |$f:ident, $l:ident, $z:ident, $g:ident| $body:expr) => {
        match $inst {
            $crate::preset::Instance::Builtin {
                field: $f,
                objective: $l,
                z0s: $z,
                grid: $g,
            } => $body,
            $crate::preset::Instance::Controlled {
                field: $f,
                objective: $l,
                z0s: $z,
                grid: $g,
            } => $body,
        }
    };
}
pub(crate) use with_instance;

mod bench;
mod control;
mod gradcheck;
mod scaling;
mod solve;

pub use bench::{bench, bench_run, BenchRun};
pub use control::control;
pub use gradcheck::{gradcheck, gradcheck_instance, GradcheckReport};
pub use scaling::track_scaling;
pub use solve::{solve, solve_trajectory, TrajectorySolve};

/// Compact `{:.3e}` list for console lines.
pub(crate) fn sci_list(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.3e}")).collect();
    format!("[{}]", parts.join(","))
}
