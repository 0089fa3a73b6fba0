use std::hint::black_box;
use std::sync::Arc;

use contig_bench::{small_config, stream};
use contig_core::autodiff::{AdamConfig, AdamState, Tape};
use contig_core::config::{Ablation, AdjacencyKind, Solver};
use contig_core::graph::NodeId;
use contig_core::metrics::{average_precision, roc_auc};
use contig_core::model::{ContigModel, StreamContext};
use contig_core::train::train_epoch;
use contig_core::update::{build_adjacency, ode_solve, OdeSystem};
use contig_core::Tensor;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random(&mut rng, 200, 172), random(&mut rng, 172, 172));
    c.bench_function("matmul 200x172x172 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let x = tape.leaf(a.clone(), true);
            let w = tape.leaf(b.clone(), true);
            let y = tape.matmul(x, w).unwrap();
            let loss = tape.sum(y).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn ode(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 400;
    let active: Vec<NodeId> = (1..=n).map(NodeId).collect();
    let partners: Vec<NodeId> = (0..n).map(|_| NodeId(rng.gen_range(1..=n))).collect();
    let a = Arc::new(build_adjacency(&active, &partners, 0.95, AdjacencyKind::Symmetric).matrix().clone());
    let h0 = random(&mut rng, n, 32);
    let mut group = c.benchmark_group("ode 400x32");
    for (name, solver) in [("euler", Solver::Euler), ("rk4", Solver::Rk4)] {
        group.bench_function(name, |bench| {
            bench.iter(|| {
                let mut tape = Tape::inference();
                let h = tape.constant(h0.clone());
                let sys = OdeSystem::new(&mut tape, a.clone(), h, None, &Ablation::default()).unwrap();
                black_box(ode_solve(&mut tape, &sys, solver, 4, 1.0).unwrap());
            })
        });
    }
    group.finish();
}

// Per-epoch cost should grow linearly with the number of edges.
fn epoch(c: &mut Criterion) {
    let cfg = small_config();
    let full = stream(4000);
    let mut group = c.benchmark_group("train epoch");
    group.sample_size(10);
    for edges in [1000, 2000, 4000] {
        let ds = full.prefix(edges).unwrap();
        let ctx = StreamContext::new(&ds);
        group.throughput(Throughput::Elements(edges as u64));
        group.bench_with_input(BenchmarkId::from_parameter(edges), &edges, |bench, &edges| {
            bench.iter(|| {
                let mut model = ContigModel::for_dataset(&cfg.model, &ds, 0).unwrap();
                let mut adam = AdamState::for_store(AdamConfig::default(), model.store());
                let mut memory = model.new_memory(ds.node_capacity());
                black_box(train_epoch(&mut model, &mut adam, &ctx, &mut memory, 0..edges, &cfg.train, 0).unwrap());
            })
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let preds: Vec<(f64, bool)> = (0..20_000).map(|i| (rng.gen::<f64>(), i % 2 == 0)).collect();
    c.bench_function("average precision 20k", |b| b.iter(|| average_precision(black_box(&preds)).unwrap()));
    c.bench_function("roc auc 20k", |b| b.iter(|| roc_auc(black_box(&preds)).unwrap()));
}

criterion_group!(benches, matmul_backward, ode, epoch, metrics);
criterion_main!(benches);
