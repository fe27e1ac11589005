//! Serial versus rayon execution of the data-parallel hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use botpa::aggregators::{aggregate, AggregatorKind, AggregatorSpec};
use botpa::data::synth_blobs;
use botpa::fl::ClientUpdate;
use botpa::metrics::evaluate;
use botpa::nn::{Architecture, Model, ParamVector};
use botpa::ExecMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [ExecMode; 2] = [ExecMode::Serial, ExecMode::Parallel];

fn updates(n: usize, d: usize) -> Vec<ClientUpdate> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|i| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            ClientUpdate::new(i, ParamVector::flat(v), 10)
        })
        .collect()
}

fn aggregation(c: &mut Criterion) {
    let ups = updates(20, 20_000);
    let mut group = c.benchmark_group("aggregate");
    group.sample_size(10);
    for kind in [AggregatorKind::Median, AggregatorKind::Krum, AggregatorKind::Flame] {
        let mut spec = AggregatorSpec::new(kind);
        spec.f_byzantine = Some(2);
        for mode in MODES {
            group.bench_with_input(BenchmarkId::new(format!("{kind:?}"), format!("{mode:?}")), &mode, |b, &m| {
                b.iter(|| aggregate(&spec, &ups, 3, m).unwrap())
            });
        }
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let test = synth_blobs(10, 200, 32, 1.0, 2).unwrap();
    let model = Model::init(Architecture::mlp(32, &[64], 10).unwrap(), 3);
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for mode in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &m| {
            b.iter(|| evaluate(&model, &test, Some((0, 1)), m).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, aggregation, evaluation);
criterion_main!(benches);
