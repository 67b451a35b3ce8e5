//! Rayon row-parallel path vs the sequential fallback on the matmul
//! kernel and on a full loss/grad step of the tiny backend.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use concept_tokens::adapter::{EmbeddingInit, LanguageModel};
use concept_tokens::par;
use concept_tokens::tinylm::{TinyLm, TinyLmConfig};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &n in &[64usize, 128, 256] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |bench, _| {
            bench.iter(|| par::matmul_seq(a.view(), b.view()))
        });
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |bench, _| {
            bench.iter(|| par::matmul_par(a.view(), b.view()))
        });
    }
    group.finish();
}

fn bench_loss_and_grad(c: &mut Criterion) {
    let corpus = "the tower is tall and made of iron near the river in the old city \
                  where people walk along the shore every evening after work"
        .to_string();
    let cfg = TinyLmConfig {
        model_id: "bench".into(),
        dim: 64,
        layers: 2,
        context_length: 256,
        seed: 3,
        ff_mult: 4,
    };
    let mut lm = TinyLm::from_texts(cfg, &[corpus.as_str()]);
    let handle = lm
        .extend_vocab("<CT:bench>", EmbeddingInit::MeanOfEmbeddings)
        .unwrap();
    let seq = lm
        .tokenize(&format!("<CT:bench> {corpus} <CT:bench> {corpus}"))
        .unwrap();

    let mut group = c.benchmark_group("loss_and_grad");
    for (label, parallel) in [("sequential", false), ("parallel", true)] {
        group.bench_function(label, |bench| {
            par::set_parallel(parallel);
            bench.iter(|| lm.loss_and_grad(&seq, &handle).unwrap())
        });
    }
    par::set_parallel(true);
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_loss_and_grad);
criterion_main!(benches);
