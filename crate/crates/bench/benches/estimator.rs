use criterion::{black_box, criterion_group, criterion_main, Criterion};
use miss_bench::fixture;
use miss_core::estimator::{backward, forward, Gradients, SequenceContext};
use miss_core::training::{instance_loss, TrainConfig};
use miss_core::{seed, NodeId};

fn estimator(c: &mut Criterion) {
    let f = fixture(4096, 50);
    let inst = f.logs.train.last().expect("instances");
    let user = &f.logs.users[inst.user as usize].user_feat;
    let seq = &inst.sequence.items;
    let node = NodeId(4000);
    let ctx = SequenceContext::new(&f.params, &f.tree, &f.store, user, seq).unwrap();

    c.bench_function("sequence_context", |b| {
        b.iter(|| SequenceContext::new(&f.params, &f.tree, &f.store, black_box(user), seq).unwrap())
    });
    c.bench_function("forward_node", |b| {
        b.iter(|| forward(&f.params, &ctx, &f.tree, black_box(node)).unwrap())
    });
    let trace = forward(&f.params, &ctx, &f.tree, node).unwrap();
    let labels = vec![1.0, 0.0, 1.0];
    let mut grads = Gradients::zeros(&f.params);
    c.bench_function("backward_node", |b| {
        b.iter(|| backward(&f.params, &ctx, black_box(&trace), &labels, &mut grads).unwrap())
    });
    let cfg = TrainConfig::default();
    c.bench_function("instance_loss", |b| {
        let mut rng = seed::rng(1, 1);
        b.iter(|| instance_loss(black_box(inst), user, &f.tree, &f.store, &f.params, &cfg, &mut rng).unwrap())
    });
}

criterion_group!(benches, estimator);
criterion_main!(benches);
