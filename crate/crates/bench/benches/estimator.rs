use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DVector;
use quasigee_core::estimator::newton_solve;
use quasigee_core::simulation::{CovariateSpec, GeneratorConfig};
use quasigee_core::{
    estimating_function, estimating_jacobian, CorrelationModel, CorrelationSpec, EstimatingContext, Link, Simulator,
};

fn dataset(n: usize) -> (Simulator, quasigee_core::LongitudinalDataset) {
    let sim = Simulator::new(GeneratorConfig {
        n,
        m: 4,
        p: 3,
        link: Link::Logistic,
        beta0: vec![0.3, -0.2, 0.5],
        covariates: CovariateSpec::default(),
        correlation: CorrelationSpec::Exchangeable { alpha: 0.5 },
        mixing: None,
        seed: 1,
    })
    .unwrap();
    let ds = sim.replicate(0).unwrap();
    (sim, ds)
}

fn estimating(c: &mut Criterion) {
    let mut group = c.benchmark_group("aqs");
    for n in [200, 1000, 5000] {
        let (sim, ds) = dataset(n);
        let model = CorrelationModel::aqs(4);
        let ctx = EstimatingContext::new(&ds, Link::Logistic, &model);
        let beta: DVector<f64> = sim.beta0().clone();
        group.bench_with_input(BenchmarkId::new("estimating_function", n), &n, |b, _| {
            b.iter(|| estimating_function(&ctx, &beta).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("jacobian", n), &n, |b, _| {
            b.iter(|| estimating_jacobian(&ctx, &beta).unwrap())
        });
        if n <= 1000 {
            group.bench_with_input(BenchmarkId::new("newton", n), &n, |b, _| {
                b.iter(|| newton_solve(&ctx, None).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, estimating);
criterion_main!(benches);
