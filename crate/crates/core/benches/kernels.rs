use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPool;

use mbrec::config::{Ablation, Hyperparams};
use mbrec::data::{generate_synthetic, split_leave_one_out, SyntheticSpec};
use mbrec::diff::{Tape, Tensor};
use mbrec::evaluation::{evaluate, Protocol};
use mbrec::graph::build_global_graph;
use mbrec::model::{Embeddings, Model, ModelParams};
use mbrec::objectives::hsic_empirical;

fn pools() -> Vec<(&'static str, ThreadPool)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    vec![("sequential", one), ("parallel", all)]
}

fn kernels(c: &mut Criterion) {
    let spec = SyntheticSpec {
        num_users: 2000,
        num_items: 3000,
        densities: vec![0.01, 0.006, 0.003],
        ..SyntheticSpec::default()
    };
    let ds = split_leave_one_out(&generate_synthetic(&spec).unwrap(), 0).unwrap().0;
    let graph = build_global_graph(&ds);
    let dim = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(ds.num_nodes(), dim, 0.1, &mut rng);
    let a = Tensor::randn(512, dim, 0.1, &mut rng);
    let b = Tensor::randn(512, dim, 0.1, &mut rng);

    let hyper = Hyperparams {
        dim,
        ..Hyperparams::default()
    };
    let model = Model::new(&ds.without_test(), &hyper, Ablation::None).unwrap();
    let params = ModelParams::init(ds.num_nodes(), 2, dim, 0.1, &mut rng);
    let emb: Embeddings = model.embed(&params).unwrap();

    let mut group = c.benchmark_group("kernels");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("propagate", name), |bch| {
            bch.iter(|| pool.install(|| graph.propagate(black_box(&x.data), dim, None).unwrap()))
        });
        group.bench_function(BenchmarkId::new("hsic_512", name), |bch| {
            bch.iter(|| {
                pool.install(|| {
                    let mut t = Tape::new();
                    let va = t.param(a.clone());
                    let vb = t.constant(b.clone());
                    let h = hsic_empirical(&mut t, va, vb, 0.25).unwrap();
                    t.backward(h).unwrap()
                })
            })
        });
        group.bench_function(BenchmarkId::new("evaluate", name), |bch| {
            bch.iter(|| pool.install(|| evaluate(&emb, &ds, &[10, 20], Protocol::Full).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
