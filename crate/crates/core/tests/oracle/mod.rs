//! Straight-line reference implementations used as test oracles.
//!
//! Nothing here calls into the estimator, retrieval or tree internals
//! beyond reading parameters and node embeddings; every quantity is
//! recomputed with explicit index loops.
#![allow(dead_code)]

use miss_core::estimator::{EstimatorConfig, EstimatorParams};
use miss_core::linalg::Matrix;
use miss_core::mmembed::EmbeddingStore;
use miss_core::seed;
use miss_core::tree::{build_tree, random_tree, IndexTree};
use miss_core::{ItemId, NodeId};
use rand::Rng;

pub const CLIP: f64 = 1e-7;

fn mv(m: &Matrix, x: &[f64]) -> Vec<f64> {
    assert_eq!(m.cols(), x.len());
    let mut out = vec![0.0; m.rows()];
    for r in 0..m.rows() {
        let mut s = 0.0;
        for c in 0..m.cols() {
            s += m.get(r, c) * x[c];
        }
        out[r] = s;
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn emb(p: &EstimatorParams, n: usize) -> Vec<f64> {
    let d = p.config.d_id;
    p.node_emb.as_slice()[n * d..(n + 1) * d].to_vec()
}

fn leaf_index(tree: &IndexTree, item: ItemId) -> usize {
    // Linear scan over the leaf level; avoids the tree's own inverse map.
    let h = tree.height();
    let start = (1usize << h) - 1;
    (start..start + (1 << h))
        .find(|&n| tree.item_at(NodeId(n as u32)) == Some(item))
        .expect("item placed in the tree")
}

/// Top-k by a full stable sort: descending score, earlier position first.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    idx.truncate(k);
    idx.sort();
    idx
}

/// The discrete choices of one forward pass: both top-k selections and the
/// ReLU activity of every expert and tower hidden unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Pattern {
    pub co_sel: Vec<usize>,
    pub mm_sel: Vec<usize>,
    pub experts: Vec<Vec<bool>>,
    pub towers: Vec<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct Naive {
    pub co_scores: Vec<f64>,
    pub mm_scores: Vec<f64>,
    pub co_sel: Vec<usize>,
    pub mm_sel: Vec<usize>,
    pub x: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub pattern: Pattern,
}

fn relu(pre: Vec<f64>, mask: Option<&[bool]>) -> (Vec<f64>, Vec<bool>) {
    let on: Vec<bool> = match mask {
        Some(m) => m.to_vec(),
        None => pre.iter().map(|&v| v > 0.0).collect(),
    };
    let h = pre.iter().zip(&on).map(|(&v, &a)| if a { v } else { 0.0 }).collect();
    (h, on)
}

/// Full forward pass. `fixed` pins every discrete choice, which makes the
/// output a smooth function of the parameters around the pinned point.
pub fn forward(
    p: &EstimatorParams,
    tree: &IndexTree,
    store: &EmbeddingStore,
    user_feat: &[f64],
    seq: &[ItemId],
    node: NodeId,
    fixed: Option<&Pattern>,
) -> Naive {
    let c: &EstimatorConfig = &p.config;
    let d = c.d_id;
    let dp = &p.dense;
    let n = node.index();
    let e_n = emb(p, n);
    let scale = (d as f64).sqrt();

    let co_win: &[ItemId] = if c.use_co_gsu {
        &seq[seq.len().saturating_sub(c.m_co)..]
    } else {
        &[]
    };
    let mm_win: &[ItemId] = if c.use_mm_gsu {
        &seq[seq.len().saturating_sub(c.m_mm)..]
    } else {
        &[]
    };

    let q = mv(&dp.co_wq, &e_n);
    let co_scores: Vec<f64> = co_win
        .iter()
        .map(|&i| dot(&q, &mv(&dp.co_wk, &emb(p, leaf_index(tree, i)))) / scale)
        .collect();
    let z: Vec<f64> = tree.z(node).iter().map(|&v| v as f64).collect();
    let mm_scores: Vec<f64> = mm_win
        .iter()
        .map(|&i| {
            let ci: Vec<f64> = store.get(i).unwrap().iter().map(|&v| v as f64).collect();
            dot(&z, &ci)
        })
        .collect();
    let (co_sel, mm_sel) = match fixed {
        Some(f) => (f.co_sel.clone(), f.mm_sel.clone()),
        None => (top_k(&co_scores, c.k_esu), top_k(&mm_scores, c.k_esu)),
    };

    let mut x_co = vec![0.0; d];
    let a = softmax(&co_sel.iter().map(|&i| co_scores[i]).collect::<Vec<_>>());
    for (w, &i) in a.iter().zip(&co_sel) {
        let v = mv(&dp.co_wv, &emb(p, leaf_index(tree, co_win[i])));
        for k in 0..d {
            x_co[k] += w * v[k];
        }
    }
    let qm = mv(&dp.mm_wq, &e_n);
    let logits: Vec<f64> = mm_sel
        .iter()
        .map(|&i| dot(&qm, &mv(&dp.mm_wk, &emb(p, leaf_index(tree, mm_win[i])))) / scale)
        .collect();
    let a = softmax(&logits);
    let mut x_mm = vec![0.0; d];
    for (w, &i) in a.iter().zip(&mm_sel) {
        let v = mv(&dp.mm_wv, &emb(p, leaf_index(tree, mm_win[i])));
        for k in 0..d {
            x_mm[k] += w * v[k];
        }
    }
    let mut x_user = mv(&dp.user_w, user_feat);
    for k in 0..d {
        x_user[k] += dp.user_b[k];
    }
    let mut x = Vec::with_capacity(4 * d + 1);
    x.extend(&e_n);
    x.extend(&x_user);
    x.extend(&x_co);
    x.extend(&x_mm);
    x.push(if seq.is_empty() { 1.0 } else { 0.0 });

    let mut expert_masks = Vec::new();
    let mut experts: Vec<Vec<f64>> = Vec::new();
    for (l, e) in dp.experts.iter().enumerate() {
        let pre: Vec<f64> = mv(&e.w1, &x).iter().zip(&e.b1).map(|(a, b)| a + b).collect();
        let (h, on) = relu(pre, fixed.map(|f| f.experts[l].as_slice()));
        experts.push(mv(&e.w2, &h).iter().zip(&e.b2).map(|(a, b)| a + b).collect());
        expert_masks.push(on);
    }
    let mut tower_masks = Vec::new();
    let mut out_logits = Vec::new();
    for t in 0..c.n_tasks {
        let g = &dp.gates[t];
        let gl: Vec<f64> = mv(&g.w, &x).iter().zip(&g.b).map(|(a, b)| a + b).collect();
        let gw = softmax(&gl);
        let mut f = vec![0.0; c.expert_out];
        for (l, o) in experts.iter().enumerate() {
            for k in 0..f.len() {
                f[k] += gw[l] * o[k];
            }
        }
        let tw = &dp.towers[t];
        let pre: Vec<f64> = mv(&tw.w1, &f).iter().zip(&tw.b1).map(|(a, b)| a + b).collect();
        let (h, on) = relu(pre, fixed.map(|f| f.towers[t].as_slice()));
        tower_masks.push(on);
        out_logits.push(mv(&tw.w2, &h)[0] + tw.b2[0]);
    }
    let probs = out_logits.iter().map(|&l| sigmoid(l)).collect();
    let pattern = Pattern {
        co_sel: co_sel.clone(),
        mm_sel: mm_sel.clone(),
        experts: expert_masks,
        towers: tower_masks,
    };
    Naive {
        co_scores,
        mm_scores,
        co_sel,
        mm_sel,
        x,
        logits: out_logits,
        probs,
        pattern,
    }
}

/// Summed clipped BCE over objectives.
pub fn bce(probs: &[f64], labels: &[f64]) -> f64 {
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(CLIP, 1.0 - CLIP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum()
}

/// Five-point central-difference gradient of the summed loss over
/// `(node, labels)`, one vector per tensor in `EstimatorParams::tensors`
/// order.
///
/// Every discrete choice (top-k selections, ReLU activity, probability
/// clipping) is held at its unperturbed value, so the differentiated
/// function is smooth and a step large enough to keep roundoff far below
/// gradients of order 1e-7 stays exact to fourth order. The analytic
/// gradient is defined on the same piece.
pub fn fd_gradient(
    p: &EstimatorParams,
    tree: &IndexTree,
    store: &EmbeddingStore,
    user_feat: &[f64],
    seq: &[ItemId],
    targets: &[(NodeId, Vec<f64>)],
    h: f64,
) -> Vec<Vec<f64>> {
    let base: Vec<Naive> = targets
        .iter()
        .map(|(n, _)| forward(p, tree, store, user_feat, seq, *n, None))
        .collect();
    let loss = |q: &EstimatorParams| -> f64 {
        let mut total = 0.0;
        for ((n, y), b) in targets.iter().zip(&base) {
            let r = forward(q, tree, store, user_feat, seq, *n, Some(&b.pattern));
            for t in 0..y.len() {
                // A clipped probability contributes a constant.
                if b.probs[t] > CLIP && b.probs[t] < 1.0 - CLIP {
                    total += bce(&r.probs[t..t + 1], &y[t..t + 1]);
                }
            }
        }
        total
    };
    let sizes: Vec<usize> = p.tensors().iter().map(|t| t.data.len()).collect();
    let mut out = Vec::new();
    let mut q = p.clone();
    for (t, &len) in sizes.iter().enumerate() {
        let mut g = vec![0.0; len];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = q.tensors_mut()[t][j];
            let mut at = |step: f64| {
                q.tensors_mut()[t][j] = orig + step;
                loss(&q)
            };
            let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            q.tensors_mut()[t][j] = orig;
            *gj = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        }
        out.push(g);
    }
    out
}

/// `||a - b|| / max(||a||, ||b||, REL_FLOOR)`.
///
/// The floor keeps tensors whose true gradient vanishes (a single-element
/// attention, an unused branch) from dividing roundoff by roundoff.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(REL_FLOOR)
}

pub const REL_FLOOR: f64 = 1e-8;

/// Item ids placed under `n`, by walking the explicit subtree.
pub fn subtree_items(tree: &IndexTree, n: NodeId) -> Vec<ItemId> {
    let mut stack = vec![n.index()];
    let mut out = Vec::new();
    let n_nodes = (1usize << (tree.height() + 1)) - 1;
    while let Some(m) = stack.pop() {
        if 2 * m + 1 >= n_nodes {
            if let Some(i) = tree.item_at(NodeId(m as u32)) {
                out.push(i);
            }
        } else {
            stack.push(2 * m + 1);
            stack.push(2 * m + 2);
        }
    }
    out
}

/// Worst deviation of any non-placeholder internal `z` from the mean of
/// its subtree's item embeddings.
pub fn mean_pool_error(tree: &IndexTree, store: &EmbeddingStore) -> f64 {
    let h = tree.height();
    let mut worst: f64 = 0.0;
    for n in 0..(1usize << h) - 1 {
        let node = NodeId(n as u32);
        let items = subtree_items(tree, node);
        if items.is_empty() {
            continue;
        }
        let d = store.dim();
        let mut mean = vec![0.0; d];
        for &i in &items {
            for (k, v) in store.get(i).unwrap().iter().enumerate() {
                mean[k] += *v as f64 / items.len() as f64;
            }
        }
        for (k, z) in tree.z(node).iter().enumerate() {
            worst = worst.max((*z as f64 - mean[k]).abs());
        }
    }
    worst
}

/// Random frozen unit-norm store.
pub fn random_store<R: Rng>(n: usize, dim: usize, rng: &mut R) -> EmbeddingStore {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut s = EmbeddingStore::from_rows(&rows).unwrap();
    s.freeze();
    s
}

pub fn small_config<R: Rng>(rng: &mut R) -> EstimatorConfig {
    let m_co = rng.random_range(1..=6);
    EstimatorConfig {
        d_id: rng.random_range(2..=5),
        d_user: rng.random_range(1..=3),
        k_esu: rng.random_range(1..=4),
        m_co,
        m_mm: rng.random_range(m_co..=8),
        n_experts: rng.random_range(1..=3),
        n_tasks: rng.random_range(1..=3),
        expert_hidden: rng.random_range(2..=5),
        expert_out: rng.random_range(2..=4),
        tower_hidden: rng.random_range(2..=4),
        use_co_gsu: rng.random_bool(0.85),
        use_mm_gsu: rng.random_bool(0.85),
    }
}

/// One random estimator instance over a random corpus.
pub struct Instance {
    pub tree: IndexTree,
    pub store: EmbeddingStore,
    pub params: EstimatorParams,
    pub user_feat: Vec<f64>,
    pub seq: Vec<ItemId>,
}

pub fn instance(case: u64, max_items: usize) -> Instance {
    let mut rng = seed::rng(0x0AC1E, case);
    let n = rng.random_range(2..=max_items);
    let store = random_store(n, rng.random_range(2..=4), &mut rng);
    let tree = if rng.random_bool(0.5) {
        build_tree(&store, case).unwrap()
    } else {
        random_tree(&store, case).unwrap()
    };
    let cfg = small_config(&mut rng);
    let mut params = EstimatorParams::init(&cfg, tree.n_nodes(), case).unwrap();
    // Spread the biases so hidden units sit away from zero.
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let user_feat = (0..cfg.d_user).map(|_| rng.random_range(-1.0..1.0)).collect();
    let len = rng.random_range(0..=10);
    let seq = (0..len).map(|_| ItemId(rng.random_range(0..n as u32))).collect();
    Instance {
        tree,
        store,
        params,
        user_feat,
        seq,
    }
}

/// Every non-placeholder leaf scored with `node_score`, ranked by score
/// descending then node id, mapped to items and cut at `m`.
pub fn brute_force_top(inst: &Instance, params: &EstimatorParams, m: usize) -> Vec<(ItemId, f64)> {
    use miss_core::estimator::{node_score, SequenceContext};
    let ctx = SequenceContext::new(params, &inst.tree, &inst.store, &inst.user_feat, &inst.seq).unwrap();
    let h = inst.tree.height();
    let start = (1usize << h) - 1;
    let mut scored: Vec<(usize, f64)> = (start..start + (1 << h))
        .filter(|&n| inst.tree.item_at(NodeId(n as u32)).is_some())
        .map(|n| (n, node_score(params, &ctx, &inst.tree, NodeId(n as u32)).unwrap()))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored
        .into_iter()
        .take(m)
        .map(|(n, s)| (inst.tree.item_at(NodeId(n as u32)).unwrap(), s))
        .collect()
}

/// A few optimiser steps on random logs, so beam tests also see
/// parameters that have moved away from their initialisation.
pub fn briefly_trained(inst: &Instance, case: u64) -> EstimatorParams {
    use miss_core::corpus::{BehaviorSequence, TrainingInstance, UserProfile};
    use miss_core::training::{train, TrainConfig, TrainSink};
    let mut rng = seed::rng(0x7A1, case);
    let n_tasks = inst.params.config.n_tasks;
    let users = vec![UserProfile {
        user: 0,
        user_feat: inst.user_feat.clone(),
        affinity: Vec::new(),
    }];
    let instances: Vec<TrainingInstance> = (0..24)
        .map(|ts| TrainingInstance {
            user: 0,
            ts,
            sequence: BehaviorSequence {
                user: 0,
                items: inst.seq.clone(),
            },
            target: ItemId(rng.random_range(0..inst.store.len() as u32)),
            labels: (0..n_tasks).map(|_| u8::from(rng.random_bool(0.6))).collect(),
        })
        .collect();
    let mut cfg = TrainConfig {
        batch_size: 8,
        ..TrainConfig::default()
    };
    cfg.adam.lr = 0.05;
    let sink = TrainSink {
        dir: None,
        meta: None,
    };
    train(&instances, &users, &inst.tree, &inst.store, inst.params.clone(), &cfg, case, sink)
        .unwrap()
        .params
}
