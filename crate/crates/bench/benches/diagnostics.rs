use std::hint::black_box;

use cqa_core::cases::{builtin, radial5};
use cqa_core::{
    build_ybus, kkt_solve, licq_check, newton_pf, pf_jacobian, run_genericity_experiment, ModelKind, NewtonOptions,
    PerturbationModel, Tolerances,
};
use criterion::{criterion_group, criterion_main, Criterion};

fn network_kernels(c: &mut Criterion) {
    let net = radial5().unwrap();
    let y = build_ybus(&net).unwrap();
    let x = newton_pf(&net, &y, &NewtonOptions::default(), None).unwrap().state;

    c.bench_function("ybus/radial5", |b| b.iter(|| build_ybus(black_box(&net)).unwrap()));
    c.bench_function("pf_jacobian/radial5", |b| b.iter(|| pf_jacobian(&net, &y, black_box(&x)).unwrap()));
    c.bench_function("newton_pf/radial5", |b| {
        b.iter(|| newton_pf(black_box(&net), &y, &NewtonOptions::default(), None).unwrap())
    });
}

fn diagnostics(c: &mut Criterion) {
    let tol = Tolerances::default();
    let fx = builtin("ex1", 1.0).unwrap();
    let cs = fx.system(&tol).unwrap();
    let x = fx.truth.point.clone();

    c.bench_function("licq_check/ex1", |b| b.iter(|| licq_check(&cs, black_box(&x)).unwrap()));
    c.bench_function("kkt_solve/ex1", |b| b.iter(|| kkt_solve(&cs, black_box(&x), &fx.case.cost).unwrap()));

    let model = PerturbationModel::default_for(ModelKind::Load, &fx.case.network).unwrap();
    let mut group = c.benchmark_group("genericity");
    group.sample_size(10);
    group.bench_function("ex1/load/100", |b| {
        b.iter(|| run_genericity_experiment(&fx.case, &model, 100, black_box(42), &tol).unwrap())
    });
    group.finish();
}

criterion_group!(benches, network_kernels, diagnostics);
criterion_main!(benches);
