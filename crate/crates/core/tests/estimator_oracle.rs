mod oracle;

use miss_core::estimator::{forward, node_loss_and_grad, Gradients, SequenceContext};
use miss_core::linalg::softmax;
use miss_core::seed;
use miss_core::NodeId;
use rand::Rng;

fn random_node<R: Rng>(inst: &oracle::Instance, rng: &mut R) -> NodeId {
    loop {
        let n = NodeId(rng.random_range(0..inst.tree.n_nodes() as u32));
        if !inst.tree.is_placeholder(n) {
            return n;
        }
    }
}

#[test]
fn forward_matches_naive_reimplementation() {
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let inst = oracle::instance(case, 40);
        let mut rng = seed::rng(7, case);
        let ctx = SequenceContext::new(&inst.params, &inst.tree, &inst.store, &inst.user_feat, &inst.seq)
            .unwrap();
        let node = random_node(&inst, &mut rng);
        let got = forward(&inst.params, &ctx, &inst.tree, node).unwrap();
        let want = oracle::forward(&inst.params, &inst.tree, &inst.store, &inst.user_feat, &inst.seq, node, None);
        assert_eq!(got.co_selected, want.co_sel, "case {case}");
        assert_eq!(got.mm_selected, want.mm_sel, "case {case}");
        for (a, b) in got.co_scores.iter().zip(&want.co_scores) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in got.mm_scores.iter().zip(&want.mm_scores) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in got.x.iter().zip(&want.x) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in got.probs().iter().zip(&want.probs) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst <= 1e-6, "case {case}: deviation {worst}");
    }
}

#[test]
fn backward_matches_finite_differences() {
    for case in 0..60 {
        let inst = oracle::instance(10_000 + case, 12);
        let mut rng = seed::rng(8, case);
        let ctx = SequenceContext::new(&inst.params, &inst.tree, &inst.store, &inst.user_feat, &inst.seq)
            .unwrap();
        let n_tasks = inst.params.config.n_tasks;
        let targets: Vec<(NodeId, Vec<f64>)> = (0..rng.random_range(1..=3))
            .map(|_| {
                let labels = (0..n_tasks).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
                (random_node(&inst, &mut rng), labels)
            })
            .collect();
        let mut grads = Gradients::zeros(&inst.params);
        for (n, y) in &targets {
            node_loss_and_grad(&inst.params, &ctx, &inst.tree, *n, y, &mut grads).unwrap();
        }
        let numeric = oracle::fd_gradient(
            &inst.params,
            &inst.tree,
            &inst.store,
            &inst.user_feat,
            &inst.seq,
            &targets,
            1e-3,
        );
        let mut analytic = vec![grads.dense_node_emb(inst.params.n_nodes(), inst.params.config.d_id)];
        analytic.extend(grads.dense.tensors().into_iter().map(|t| t.data.to_vec()));
        let names: Vec<String> = inst.params.tensors().into_iter().map(|t| t.name).collect();
        for ((name, a), n) in names.iter().zip(&analytic).zip(&numeric) {
            let err = oracle::rel_err(a, n);
            assert!(err < 1e-4, "case {case} tensor {name}: relative error {err}");
        }
    }
}

#[test]
fn collaborative_attention_reuses_search_scores() {
    for case in 0..200 {
        let inst = oracle::instance(20_000 + case, 30);
        let mut rng = seed::rng(9, case);
        let ctx = SequenceContext::new(&inst.params, &inst.tree, &inst.store, &inst.user_feat, &inst.seq)
            .unwrap();
        let t = forward(&inst.params, &ctx, &inst.tree, random_node(&inst, &mut rng)).unwrap();
        let picked: Vec<f64> = t.co_selected.iter().map(|&i| t.co_scores[i]).collect();
        assert_eq!(t.co_attn, softmax(&picked));
    }
}

#[test]
fn multimodal_scores_ignore_trainable_parameters() {
    for case in 0..200 {
        let inst = oracle::instance(30_000 + case, 30);
        let mut rng = seed::rng(10, case);
        let node = random_node(&inst, &mut rng);
        let ctx = SequenceContext::new(&inst.params, &inst.tree, &inst.store, &inst.user_feat, &inst.seq)
            .unwrap();
        let before = forward(&inst.params, &ctx, &inst.tree, node).unwrap();
        let mut p = inst.params.clone();
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-1.0..1.0);
            }
        }
        let ctx = SequenceContext::new(&p, &inst.tree, &inst.store, &inst.user_feat, &inst.seq).unwrap();
        let after = forward(&p, &ctx, &inst.tree, node).unwrap();
        assert_eq!(before.mm_scores, after.mm_scores);
        assert_eq!(before.mm_selected, after.mm_selected);
    }
}

#[test]
fn output_depends_only_on_selected_behaviours() {
    let mut checked = 0;
    for case in 0..400 {
        let inst = oracle::instance(40_000 + case, 30);
        let cfg = &inst.params.config;
        let mut rng = seed::rng(11, case);
        let node = random_node(&inst, &mut rng);
        let ctx = SequenceContext::new(&inst.params, &inst.tree, &inst.store, &inst.user_feat, &inst.seq)
            .unwrap();
        let t = forward(&inst.params, &ctx, &inst.tree, node).unwrap();
        let co_start = inst.seq.len().saturating_sub(cfg.m_co);
        let mm_start = inst.seq.len().saturating_sub(cfg.m_mm);
        let used: Vec<_> = t
            .co_selected
            .iter()
            .map(|&i| inst.seq[co_start + i])
            .chain(t.mm_selected.iter().map(|&i| inst.seq[mm_start + i]))
            .collect();
        // An unselected item whose leaf is not the scored node: moving its
        // ID embedding only changes search scores.
        let Some(&victim) = inst.seq.iter().find(|i| {
            !used.contains(i) && inst.tree.leaf_of(**i).unwrap() != node
        }) else {
            continue;
        };
        let mut p = inst.params.clone();
        let leaf = inst.tree.leaf_of(victim).unwrap().index();
        let d = cfg.d_id;
        for v in &mut p.node_emb.as_mut_slice()[leaf * d..(leaf + 1) * d] {
            *v *= 1.0 + 1e-9;
        }
        let ctx = SequenceContext::new(&p, &inst.tree, &inst.store, &inst.user_feat, &inst.seq).unwrap();
        let u = forward(&p, &ctx, &inst.tree, node).unwrap();
        if u.co_selected != t.co_selected {
            continue;
        }
        assert_eq!(u.probs(), t.probs(), "case {case}");
        checked += 1;
    }
    assert!(checked >= 50, "only {checked} usable cases");
}
