use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use fedpost::dataio::simulate_nb;
use fedpost::models::{fit, Model1};
use fedpost::sampler::{Execution, SamplerConfig};

fn pooled_sites() -> Vec<Vec<u64>> {
    let y = simulate_nb(500, 9.0, 10.0, 7).expect("valid simulation");
    let sizes = [21, 53, 64, 24, 58, 52, 45, 27, 47, 34, 33, 42];
    let mut start = 0;
    sizes
        .iter()
        .map(|&n| {
            let s = y[start..start + n].to_vec();
            start += n;
            s
        })
        .collect()
}

fn chains(c: &mut Criterion) {
    let model = Model1::new(&pooled_sites()).expect("valid data");
    let mut group = c.benchmark_group("nb_pooled_fit");
    group.sample_size(10);
    for n_chains in [4usize, 8] {
        for (label, execution) in [
            ("sequential", Execution::Sequential),
            ("parallel", Execution::Parallel { threads: None }),
        ] {
            let cfg = SamplerConfig {
                n_chains,
                execution,
                ..SamplerConfig::default().with_seed(1)
            };
            group.bench_with_input(BenchmarkId::new(label, n_chains), &cfg, |b, cfg| {
                b.iter(|| fit(&model, cfg).expect("fit succeeds"))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, chains);
criterion_main!(benches);
