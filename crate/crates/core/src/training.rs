//! Level-wise estimator training.
//!
//! Every instance contributes, at each level below the root, the ancestor of
//! its target (a positive for the objectives that fired) plus uniformly
//! drawn negatives from the same level. Losses are binary cross-entropies
//! summed over objectives and sampled nodes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TrainingInstance, UserProfile};
use crate::error::{Error, Result};
use crate::estimator::{self, bce_head, checkpoint, EstimatorParams, Gradients, SequenceContext};
use crate::ids::{ItemId, NodeId};
use crate::mmembed::EmbeddingStore;
use crate::optim::{Adam, AdamConfig};
use crate::seed;
use crate::tree::IndexTree;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_negatives")]
    pub negatives_per_level: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Write `ckpt_{step}.bin` every this many steps; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_negatives() -> usize {
    2
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            negatives_per_level: default_negatives(),
            adam: AdamConfig::default(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config("train.adam.lr must be positive".into()));
        }
        Ok(())
    }
}

/// `1` for every node whose subtree holds at least one of `positives`,
/// indexed by node.
pub fn pseudo_labels(tree: &IndexTree, positives: &[ItemId]) -> Result<Vec<u8>> {
    let mut labels = vec![0u8; tree.n_nodes()];
    for &item in positives {
        let mut cur = Some(tree.leaf_of(item)?);
        while let Some(n) = cur {
            if labels[n.index()] == 1 {
                break;
            }
            labels[n.index()] = 1;
            cur = n.parent();
        }
    }
    Ok(labels)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelSampleSet {
    pub level: usize,
    pub positives: Vec<NodeId>,
    pub negatives: Vec<NodeId>,
}

impl LevelSampleSet {
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.positives.iter().chain(&self.negatives).copied()
    }
}

/// Positives of level `h` plus `k_neg` negatives per positive, drawn
/// uniformly without replacement from unlabelled, non-placeholder nodes.
pub fn sample_level<R: Rng + ?Sized>(
    tree: &IndexTree,
    labels: &[u8],
    h: usize,
    k_neg: usize,
    rng: &mut R,
) -> LevelSampleSet {
    let positives: Vec<NodeId> = tree
        .level_nodes(h)
        .filter(|n| labels[n.index()] == 1 && !tree.is_placeholder(*n))
        .collect();
    let want = k_neg * positives.len();
    let mut negatives = Vec::new();
    if want > 0 {
        let pool: Vec<NodeId> = tree
            .level_nodes(h)
            .filter(|n| labels[n.index()] == 0 && !tree.is_placeholder(*n))
            .collect();
        if want >= pool.len() {
            negatives = pool;
        } else {
            negatives = index::sample(rng, pool.len(), want)
                .into_iter()
                .map(|i| pool[i])
                .collect();
        }
    }
    LevelSampleSet {
        level: h,
        positives,
        negatives,
    }
}

/// Loss of one instance and its gradient.
#[derive(Clone, Debug)]
pub struct InstanceLoss {
    pub total: f64,
    pub per_task: Vec<f64>,
    pub n_nodes: usize,
    pub grads: Gradients,
}

/// Sampled nodes with their per-objective labels for one instance.
///
/// Ancestors of the target carry the instance's label vector; sampled
/// negatives carry zeros. An instance where no objective fired has no
/// positive node and therefore contributes nothing.
pub fn instance_nodes<R: Rng + ?Sized>(
    instance: &TrainingInstance,
    tree: &IndexTree,
    k_neg: usize,
    rng: &mut R,
) -> Result<Vec<(NodeId, Vec<f64>)>> {
    let positives: &[ItemId] = if instance.is_positive() {
        std::slice::from_ref(&instance.target)
    } else {
        &[]
    };
    let labels = pseudo_labels(tree, positives)?;
    let on_path: Vec<f64> = instance.labels.iter().map(|&l| l as f64).collect();
    let zeros = vec![0.0; instance.labels.len()];
    let mut out = Vec::new();
    for h in 1..=tree.height() {
        let set = sample_level(tree, &labels, h, k_neg, rng);
        out.extend(set.positives.iter().map(|&n| (n, on_path.clone())));
        out.extend(set.negatives.iter().map(|&n| (n, zeros.clone())));
    }
    Ok(out)
}

/// Summed BCE over objectives, levels and sampled nodes, with gradients.
pub fn instance_loss<R: Rng + ?Sized>(
    instance: &TrainingInstance,
    user_feat: &[f64],
    tree: &IndexTree,
    store: &EmbeddingStore,
    params: &EstimatorParams,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<InstanceLoss> {
    let n_tasks = params.config.n_tasks;
    if instance.labels.len() != n_tasks {
        return Err(Error::shape(n_tasks, instance.labels.len()));
    }
    let nodes = instance_nodes(instance, tree, cfg.negatives_per_level, rng)?;
    let mut grads = Gradients::zeros(params);
    let mut per_task = vec![0.0; n_tasks];
    let mut total = 0.0;
    if !nodes.is_empty() {
        let ctx = SequenceContext::new(params, tree, store, user_feat, &instance.sequence.items)?;
        for (node, labels) in &nodes {
            let trace = estimator::forward(params, &ctx, tree, *node)?;
            for (t, acc) in per_task.iter_mut().enumerate() {
                *acc += bce_head(&trace.mmoe.logits[t..t + 1], &labels[t..t + 1]).0;
            }
            total += estimator::backward(params, &ctx, &trace, labels, &mut grads)?;
        }
    }
    Ok(InstanceLoss {
        total,
        per_task,
        n_nodes: nodes.len(),
        grads,
    })
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    /// Mean over the batch of the summed instance loss.
    pub mean_loss: f64,
    pub per_task: Vec<f64>,
    pub wall_ms: u64,
}

pub struct TrainOutput {
    pub params: EstimatorParams,
    pub metrics: Vec<MetricRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Where and how to persist training artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainSink<'a> {
    pub dir: Option<&'a Path>,
    /// Embedded in every checkpoint.
    pub meta: Option<&'a str>,
}

fn lookup_user(users: &[UserProfile], user: u32) -> Result<&[f64]> {
    users
        .get(user as usize)
        .filter(|u| u.user == user)
        .map(|u| u.user_feat.as_slice())
        .ok_or_else(|| Error::Lookup(format!("user {user} has no profile")))
}

/// Mini-batch Adam over `instances`, in stream order, for `cfg.epochs`
/// passes.
///
/// Per-instance gradients are computed in parallel and reduced in stream
/// order, so the result only depends on `seed` and the inputs.
#[allow(clippy::too_many_arguments)]
pub fn train(
    instances: &[TrainingInstance],
    users: &[UserProfile],
    tree: &IndexTree,
    store: &EmbeddingStore,
    init: EstimatorParams,
    cfg: &TrainConfig,
    seed: u64,
    sink: TrainSink<'_>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if init.n_nodes() != tree.n_nodes() {
        return Err(Error::shape(tree.n_nodes(), init.n_nodes()));
    }
    let mut params = init;
    let mut opt = Adam::new(cfg.adam);
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut log = match sink.dir {
        Some(dir) => {
            let path = dir.join("metrics.csv");
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            let tasks: Vec<String> = (0..params.config.n_tasks).map(|t| format!("loss_t{t}")).collect();
            writeln!(w, "step,mean_loss,{},wall_ms", tasks.join(",")).map_err(|e| Error::io(&path, e))?;
            Some((path, w))
        }
        None => None,
    };
    let start = Instant::now();
    let (n_nodes, dim) = (params.n_nodes(), params.config.d_id);
    for epoch in 0..cfg.epochs {
        for (b, batch) in instances.chunks(cfg.batch_size).enumerate() {
            let step = opt.steps() + 1;
            let base = epoch * instances.len() + b * cfg.batch_size;
            let losses: Vec<InstanceLoss> = batch
                .par_iter()
                .enumerate()
                .map(|(k, inst)| {
                    let mut rng = seed::rng(seed, (base + k) as u64);
                    let feat = lookup_user(users, inst.user)?;
                    instance_loss(inst, feat, tree, store, &params, cfg, &mut rng)
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads = Gradients::zeros(&params);
            let mut mean_loss = 0.0;
            let mut per_task = vec![0.0; params.config.n_tasks];
            for l in &losses {
                mean_loss += l.total * scale;
                for (acc, v) in per_task.iter_mut().zip(&l.per_task) {
                    *acc += v * scale;
                }
                grads.add_scaled(scale, &l.grads);
            }
            if !mean_loss.is_finite() {
                return Err(Error::Training {
                    batch: step as usize,
                    reason: format!("non-finite loss {mean_loss} in epoch {epoch}"),
                });
            }
            let emb_grad = grads.dense_node_emb(n_nodes, dim);
            let mut g: Vec<&[f64]> = vec![&emb_grad];
            g.extend(grads.dense.tensors().into_iter().map(|t| t.data));
            opt.step(params.tensors_mut(), g);
            if !params.all_finite() {
                return Err(Error::Training {
                    batch: step as usize,
                    reason: "parameters became non-finite".into(),
                });
            }
            let row = MetricRow {
                step,
                mean_loss,
                per_task,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            if let Some((path, w)) = log.as_mut() {
                let tasks: Vec<String> = row.per_task.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{},{},{},{}", row.step, row.mean_loss, tasks.join(","), row.wall_ms)
                    .map_err(|e| Error::io(path.as_path(), e))?;
            }
            log::debug!("step {step} loss {mean_loss:.4}");
            metrics.push(row);
            if let (Some(dir), true) = (sink.dir, cfg.checkpoint_every > 0) {
                if step.is_multiple_of(cfg.checkpoint_every as u64) {
                    let path = dir.join(format!("ckpt_{step}.bin"));
                    checkpoint::save_checkpoint(&params, &path, sink.meta)?;
                    checkpoints.push(path);
                }
            }
        }
    }
    if let Some((path, mut w)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = sink.dir {
        let path = dir.join(format!("ckpt_{}.bin", opt.steps()));
        if checkpoints.last() != Some(&path) {
            checkpoint::save_checkpoint(&params, &path, sink.meta)?;
            checkpoints.push(path);
        }
    }
    Ok(TrainOutput {
        params,
        metrics,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::EstimatorConfig;
    use crate::tree::build_tree;

    fn line_store(n: usize) -> EmbeddingStore {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let a = i as f64 * 0.7;
                vec![a.cos(), a.sin()]
            })
            .collect();
        let mut s = EmbeddingStore::from_rows(&rows).unwrap();
        s.freeze();
        s
    }

    #[test]
    fn single_positive_labels_its_root_path() {
        let tree = build_tree(&line_store(40), 0).unwrap();
        let leaf = tree.leaf_of(ItemId(17)).unwrap();
        let labels = pseudo_labels(&tree, &[ItemId(17)]).unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), tree.height() + 1);
        for n in tree.ancestors(leaf).unwrap() {
            assert_eq!(labels[n.index()], 1);
        }
        assert!(pseudo_labels(&tree, &[]).unwrap().iter().all(|&l| l == 0));
        assert!(pseudo_labels(&tree, &[ItemId(40)]).is_err());
    }

    #[test]
    fn sampling_respects_labels_and_caps() {
        let tree = build_tree(&line_store(5), 0).unwrap();
        let mut rng = seed::rng(0, 0);
        let all: Vec<ItemId> = (0..5).map(ItemId).collect();
        let labels = pseudo_labels(&tree, &all).unwrap();
        for h in 1..=tree.height() {
            let s = sample_level(&tree, &labels, h, 3, &mut rng);
            assert!(s.negatives.is_empty(), "level {h}");
        }
        let labels = pseudo_labels(&tree, &[ItemId(2)]).unwrap();
        let s = sample_level(&tree, &labels, 2, 0, &mut rng);
        assert_eq!(s.negatives, vec![]);
        assert_eq!(s.positives.len(), 1);
        for _ in 0..50 {
            let s = sample_level(&tree, &labels, tree.height(), 2, &mut rng);
            assert_eq!(s.negatives.len(), 2);
            for n in &s.negatives {
                assert_eq!(labels[n.index()], 0);
                assert_eq!(n.level(), tree.height());
                assert!(!tree.is_placeholder(*n));
            }
            assert!(s.negatives[0] != s.negatives[1]);
        }
    }

    fn small_params(tree: &IndexTree) -> EstimatorParams {
        let cfg = EstimatorConfig {
            d_id: 4,
            d_user: 2,
            k_esu: 2,
            m_co: 3,
            m_mm: 4,
            n_experts: 2,
            n_tasks: 2,
            expert_hidden: 4,
            expert_out: 3,
            tower_hidden: 3,
            ..Default::default()
        };
        EstimatorParams::init(&cfg, tree.n_nodes(), 3).unwrap()
    }

    fn instance(target: u32, labels: Vec<u8>) -> TrainingInstance {
        TrainingInstance {
            user: 0,
            ts: 0,
            sequence: crate::corpus::BehaviorSequence {
                user: 0,
                items: vec![ItemId(1), ItemId(3), ItemId(6)],
            },
            target: ItemId(target),
            labels,
        }
    }

    #[test]
    fn instance_loss_at_half_is_ln2_per_node_and_task() {
        let store = line_store(8);
        let tree = build_tree(&store, 0).unwrap();
        let mut params = small_params(&tree);
        for t in params.dense.towers.iter_mut() {
            t.w2.fill(0.0);
            t.b2[0] = 0.0;
        }
        let cfg = TrainConfig::default();
        let mut rng = seed::rng(1, 1);
        let l = instance_loss(&instance(5, vec![1, 1]), &[0.1, 0.2], &tree, &store, &params, &cfg, &mut rng)
            .unwrap();
        // level 1 has a single negative available
        assert_eq!(l.n_nodes, 2 + 3 + 3);
        let expect = l.n_nodes as f64 * 2.0 * std::f64::consts::LN_2;
        assert!((l.total - expect).abs() < 1e-12);
        assert!((l.per_task.iter().sum::<f64>() - l.total).abs() < 1e-12);

        let l = instance_loss(&instance(5, vec![0, 0]), &[0.1, 0.2], &tree, &store, &params, &cfg, &mut rng)
            .unwrap();
        assert_eq!((l.n_nodes, l.total), (0, 0.0));
        assert!(l.grads.node_emb.is_empty());
    }

    fn tiny_run(epochs: usize) -> (EstimatorParams, TrainOutput) {
        let store = line_store(8);
        let tree = build_tree(&store, 0).unwrap();
        let params = small_params(&tree);
        let users = vec![UserProfile {
            user: 0,
            user_feat: vec![0.5, -0.5],
            affinity: vec![1.0],
        }];
        let data: Vec<TrainingInstance> = (0..10).map(|i| instance(i % 8, vec![1, (i % 2) as u8])).collect();
        let cfg = TrainConfig {
            batch_size: 4,
            epochs,
            ..Default::default()
        };
        let out = train(&data, &users, &tree, &store, params.clone(), &cfg, 9, TrainSink::default()).unwrap();
        (params, out)
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let (init, out) = tiny_run(0);
        assert_eq!(init, out.params);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (_, a) = tiny_run(2);
        let (_, b) = tiny_run(2);
        assert_eq!(a.params, b.params);
        assert_eq!(a.metrics.len(), 6);
        let la: Vec<f64> = a.metrics.iter().map(|m| m.mean_loss).collect();
        let lb: Vec<f64> = b.metrics.iter().map(|m| m.mean_loss).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn writes_metrics_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let store = line_store(8);
        let tree = build_tree(&store, 0).unwrap();
        let params = small_params(&tree);
        let users = vec![UserProfile {
            user: 0,
            user_feat: vec![0.5, -0.5],
            affinity: vec![1.0],
        }];
        let data: Vec<TrainingInstance> = (0..9).map(|i| instance(i % 8, vec![1, 0])).collect();
        let cfg = TrainConfig {
            batch_size: 2,
            checkpoint_every: 2,
            ..Default::default()
        };
        let sink = TrainSink {
            dir: Some(dir.path()),
            meta: Some("x"),
        };
        let out = train(&data, &users, &tree, &store, params, &cfg, 1, sink).unwrap();
        let names: Vec<String> = out
            .checkpoints
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["ckpt_2.bin", "ckpt_4.bin", "ckpt_5.bin"]);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("step,mean_loss,loss_t0,loss_t1,wall_ms"));
        let (p, meta) = checkpoint::load_checkpoint(&out.checkpoints[2]).unwrap();
        assert_eq!(meta.as_deref(), Some("x"));
        assert_eq!(p.config, out.params.config);
    }

    #[test]
    fn unknown_user_is_an_error() {
        let store = line_store(8);
        let tree = build_tree(&store, 0).unwrap();
        let params = small_params(&tree);
        let mut inst = instance(1, vec![1, 1]);
        inst.user = 4;
        let r = train(&[inst], &[], &tree, &store, params, &TrainConfig::default(), 0, TrainSink::default());
        assert!(matches!(r, Err(Error::Lookup(_))));
    }
}
