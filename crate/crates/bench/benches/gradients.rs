use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DVector;
use timeshoot::{implicit_gradient, interpolated_adjoint_grad, AdjointOptions, NfeLedger, Objective, SolverSpec};
use timeshoot_bench::LimitCycle;

fn gradients(c: &mut Criterion) {
    let spec = SolverSpec::rk4(2);
    let lc = LimitCycle::new(4, 100, &spec);
    let views: Vec<&[DVector<f64>]> = lc.states.iter().map(|s| s.nodes()).collect();
    let eval = lc.task.evaluate(&lc.field, &views);
    let opts = AdjointOptions {
        backward: spec,
        residual_tol: 1e-6,
    };

    let mut group = c.benchmark_group("gradient_n100");
    group.sample_size(10);
    group.bench_function("loss", |b| b.iter(|| lc.task.evaluate(&lc.field, &views)));
    group.bench_function("interpolated_adjoint", |b| {
        b.iter(|| {
            lc.states
                .iter()
                .zip(&eval.node_grads)
                .map(|(s, g)| interpolated_adjoint_grad(&lc.field, s, g, &opts, &mut NfeLedger::new()).unwrap().grad)
                .fold(eval.param_grad.clone(), |acc, g| acc + g)
        })
    });
    group.bench_function("implicit", |b| {
        b.iter(|| {
            lc.states
                .iter()
                .zip(&eval.node_grads)
                .map(|(s, g)| implicit_gradient(&lc.field, s, &spec, g, &opts, &mut NfeLedger::new()).unwrap().grad)
                .fold(eval.param_grad.clone(), |acc, g| acc + g)
        })
    });
    group.finish();
}

criterion_group!(benches, gradients);
criterion_main!(benches);
