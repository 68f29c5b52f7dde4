use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use divemb::params::uniform_matrix;
use divemb::predictor::{init_params, predict_set, predictor_backward, SampleFeatures, SetPredictorConfig};
use divemb::Matrix;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn predictor(c: &mut Criterion) {
    let mut group = c.benchmark_group("predictor");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for t in [1, 4] {
        let cfg = SetPredictorConfig {
            t,
            ..Default::default()
        };
        let params = init_params(&cfg, &mut rng).unwrap();
        let feats = SampleFeatures::new(
            uniform_matrix(&mut rng, 8, cfg.d, 1.0),
            uniform_matrix(&mut rng, 1, cfg.d, 1.0),
        )
        .unwrap();
        group.bench_function(format!("forward_t{t}"), |b| {
            b.iter(|| predict_set(black_box(&feats), &params, &cfg).unwrap())
        });
        let up = Matrix::filled(cfg.k, cfg.d, 0.1);
        group.bench_function(format!("backward_t{t}"), |b| {
            b.iter(|| predictor_backward(black_box(&feats), &params, &cfg, &up, None).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, predictor);
criterion_main!(benches);
