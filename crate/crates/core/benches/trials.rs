use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qpt_core::harness::{point_fixture, run_trials, Exec, ExperimentSpec, TesterId};
use qpt_core::testers::Setting;

fn trials(c: &mut Criterion) {
    let cases = [
        (TesterId::Identity, Setting::Independent, vec![4], 0.5, 0),
        (TesterId::Independence, Setting::Collective, vec![2, 2], 0.5, 0),
        (TesterId::CollectionIdentity, Setting::Independent, vec![2], 0.5, 8),
    ];
    let mut group = c.benchmark_group("run_trials");
    group.sample_size(10);
    for (tester, setting, layout, eps, n) in cases {
        let spec = ExperimentSpec { trials: 100, n, ..ExperimentSpec::new(tester, setting, layout, vec![eps]) };
        let layout = spec.validate().expect("valid bench spec");
        let fixture = point_fixture(&spec, &layout, 0).expect("fixture");
        for (label, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
            group.bench_with_input(BenchmarkId::new(label, format!("{tester}-{setting}")), &exec, |b, &exec| {
                b.iter(|| run_trials(&spec, &fixture, 0, eps, exec).expect("trials run"))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, trials);
criterion_main!(benches);
