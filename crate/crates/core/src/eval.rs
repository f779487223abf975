//! Recall metrics, search-unit analyses and the ablation runner.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TrainingInstance, UserProfile};
use crate::error::{Error, Result};
use crate::estimator::{forward, EstimatorConfig, EstimatorParams, SequenceContext};
use crate::ids::{ItemId, NodeId};
use crate::linalg;
use crate::mmembed::EmbeddingStore;
use crate::retrieval::{beam_search_memo, BeamState};
use crate::seed;
use crate::training::{train, TrainConfig, TrainSink};
use crate::tree::{build_tree, random_tree, IndexTree};

/// `|retrieved ∩ relevant| / |relevant|`; `None` when nothing is relevant.
pub fn recall_at_k(retrieved: &[ItemId], relevant: &BTreeSet<ItemId>) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hit: BTreeSet<ItemId> = retrieved.iter().copied().filter(|i| relevant.contains(i)).collect();
    Some(hit.len() as f64 / relevant.len() as f64)
}

/// Ancestor-set recall at level `h`: the share of distinct level-`h`
/// ancestors of the relevant items that appear in the level-`h` beam.
pub fn hier_recall(
    beams: &[BeamState],
    relevant: &BTreeSet<ItemId>,
    tree: &IndexTree,
    h: usize,
) -> Result<Option<f64>> {
    if relevant.is_empty() {
        return Ok(None);
    }
    let beam = beams
        .iter()
        .find(|b| b.level == h)
        .ok_or_else(|| Error::Lookup(format!("no beam recorded for level {h}")))?;
    let targets: BTreeSet<NodeId> = relevant
        .iter()
        .map(|&i| tree.ancestor_at(tree.leaf_of(i)?, h))
        .collect::<Result<_>>()?;
    let hit = targets.iter().filter(|&&n| beam.contains(n)).count();
    Ok(Some(hit as f64 / targets.len() as f64))
}

/// Mean of `|a ∩ b| / k` over paired selections.
pub fn overlap_rate(co: &[Vec<usize>], mm: &[Vec<usize>], k: usize) -> Result<f64> {
    if co.len() != mm.len() {
        return Err(Error::Config(format!(
            "overlap_rate needs paired selections, got {} and {}",
            co.len(),
            mm.len()
        )));
    }
    if k == 0 || co.is_empty() {
        return Err(Error::Config("overlap_rate needs k >= 1 and at least one pair".into()));
    }
    let total: f64 = co
        .iter()
        .zip(mm)
        .map(|(a, b)| {
            let a: BTreeSet<usize> = a.iter().copied().collect();
            b.iter().filter(|i| a.contains(i)).count() as f64 / k as f64
        })
        .sum();
    Ok(total / co.len() as f64)
}

/// A held-out user: the history before the test window and the items the
/// user engaged with inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalQuery {
    pub user: u32,
    pub sequence: Vec<ItemId>,
    pub relevant: BTreeSet<ItemId>,
}

/// Queries for users with at least one positive test event, by user id,
/// and the number of users skipped for having none.
pub fn build_queries(test: &[TrainingInstance]) -> (Vec<EvalQuery>, usize) {
    let mut by_user: BTreeMap<u32, (u64, &[ItemId], BTreeSet<ItemId>)> = BTreeMap::new();
    for inst in test {
        let e = by_user
            .entry(inst.user)
            .or_insert((inst.ts, &inst.sequence.items, BTreeSet::new()));
        if inst.ts < e.0 {
            e.0 = inst.ts;
            e.1 = &inst.sequence.items;
        }
        if inst.is_positive() {
            e.2.insert(inst.target);
        }
    }
    let mut excluded = 0;
    let mut out = Vec::new();
    for (user, (_, seq, relevant)) in by_user {
        if relevant.is_empty() {
            excluded += 1;
        } else {
            out.push(EvalQuery {
                user,
                sequence: seq.to_vec(),
                relevant,
            });
        }
    }
    (out, excluded)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Cut-offs `m` for Recall@m, each at most `beam`.
    pub recall_ks: Vec<usize>,
    pub beam: usize,
    pub hier_levels: Vec<usize>,
    /// Beam widths for the hierarchical-recall grid.
    pub hier_beams: Vec<usize>,
    #[serde(default = "default_splits")]
    pub n_splits: usize,
    #[serde(default = "default_attention_users")]
    pub attention_users: usize,
}

fn default_splits() -> usize {
    5
}
fn default_attention_users() -> usize {
    32
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            recall_ks: vec![10, 25, 50],
            beam: 64,
            hier_levels: vec![6, 9, 12],
            hier_beams: vec![16, 32, 64],
            n_splits: default_splits(),
            attention_users: default_attention_users(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, height: Option<usize>) -> Result<()> {
        if self.beam == 0 || self.n_splits == 0 {
            return Err(Error::Config("eval.beam and eval.n_splits must be positive".into()));
        }
        if let Some(&k) = self.recall_ks.iter().find(|&&k| k == 0 || k > self.beam) {
            return Err(Error::Config(format!("eval.recall_ks entry {k} must be in 1..=beam")));
        }
        if self.hier_beams.contains(&0) {
            return Err(Error::Config("eval.hier_beams must be positive".into()));
        }
        if let Some(h) = height {
            if let Some(&l) = self.hier_levels.iter().find(|&&l| l > h) {
                return Err(Error::Config(format!("eval.hier_levels entry {l} exceeds tree height {h}")));
            }
        }
        Ok(())
    }

    fn beam_widths(&self) -> Vec<usize> {
        let mut w: BTreeSet<usize> = self.hier_beams.iter().copied().collect();
        w.insert(self.beam);
        w.into_iter().collect()
    }
}

/// Per-user metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct UserEval {
    pub user: u32,
    /// Recall@m for each `recall_ks` entry.
    pub recall: Vec<f64>,
    /// `(level, beam, H@level Recall@beam)`.
    pub hier: Vec<(usize, usize, f64)>,
    /// Beams of the `beam`-wide search.
    pub beams: Vec<BeamState>,
}

pub fn evaluate_user(
    params: &EstimatorParams,
    tree: &IndexTree,
    store: &EmbeddingStore,
    user_feat: &[f64],
    query: &EvalQuery,
    cfg: &EvalConfig,
) -> Result<UserEval> {
    let ctx = SequenceContext::new(params, tree, store, user_feat, &query.sequence)?;
    let mut main = None;
    let mut hier = Vec::new();
    let mut memo = HashMap::new();
    for width in cfg.beam_widths() {
        let beams = beam_search_memo(params, &ctx, tree, width, &mut memo)?;
        if cfg.hier_beams.contains(&width) {
            for &h in &cfg.hier_levels {
                let r = hier_recall(&beams, &query.relevant, tree, h)?.unwrap_or(0.0);
                hier.push((h, width, r));
            }
        }
        if width == cfg.beam {
            main = Some(beams);
        }
    }
    let beams = main.expect("beam width is always searched");
    let ranked: Vec<ItemId> = beams
        .last()
        .expect("root beam")
        .ids()
        .filter_map(|n| tree.item_at(n))
        .collect();
    let recall = cfg
        .recall_ks
        .iter()
        .map(|&m| recall_at_k(&ranked[..m.min(ranked.len())], &query.relevant).unwrap_or(0.0))
        .collect();
    hier.sort_by_key(|&(h, k, _)| (h, k));
    Ok(UserEval {
        user: query.user,
        recall,
        hier,
        beams,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation of the split means.
    pub std: f64,
    pub splits: Vec<f64>,
}

/// Mean and spread of per-user values over disjoint user splits.
///
/// Users are assigned round-robin after a seeded shuffle of positions.
pub fn summarize(values: &[f64], n_splits: usize, seed: u64) -> MetricSummary {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.shuffle(&mut seed::rng(seed, 0x5E_0001));
    let n = n_splits.max(1);
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for (k, &i) in order.iter().enumerate() {
        sums[k % n] += values[i];
        counts[k % n] += 1;
    }
    let splits: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(s, &c)| s / c as f64)
        .collect();
    let mean = if splits.is_empty() {
        0.0
    } else {
        splits.iter().sum::<f64>() / splits.len() as f64
    };
    let std = if splits.len() < 2 {
        0.0
    } else {
        (splits.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (splits.len() - 1) as f64).sqrt()
    };
    MetricSummary { mean, std, splits }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub eval_ms: u64,
    pub users_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    /// Resolved configuration of the run that produced this report.
    pub config: serde_json::Value,
    pub n_users: usize,
    pub n_excluded: usize,
    /// Keyed by the cut-off `m`.
    pub recall: BTreeMap<usize, MetricSummary>,
    /// Keyed by level, then beam width.
    pub hier_recall: BTreeMap<usize, BTreeMap<usize, MetricSummary>>,
    pub overlap_rate: Option<f64>,
    /// Wall-clock figures; the only non-reproducible part of a report.
    pub runtime: RuntimeStats,
}

/// Everything evaluation reads, shared across runs and variants.
#[derive(Clone, Copy)]
pub struct EvalData<'a> {
    pub users: &'a [UserProfile],
    pub queries: &'a [EvalQuery],
    pub n_excluded: usize,
}

fn user_feat(users: &[UserProfile], user: u32) -> Result<&[f64]> {
    users
        .get(user as usize)
        .filter(|u| u.user == user)
        .map(|u| u.user_feat.as_slice())
        .ok_or_else(|| Error::Lookup(format!("user {user} has no profile")))
}

/// Recall and hierarchical recall over every query.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    label: &str,
    params: &EstimatorParams,
    tree: &IndexTree,
    store: &EmbeddingStore,
    data: EvalData<'_>,
    cfg: &EvalConfig,
    config_echo: serde_json::Value,
    seed: u64,
) -> Result<EvalReport> {
    cfg.validate(Some(tree.height()))?;
    let start = Instant::now();
    let per_user: Vec<UserEval> = data
        .queries
        .par_iter()
        .map(|q| evaluate_user(params, tree, store, user_feat(data.users, q.user)?, q, cfg))
        .collect::<Result<_>>()?;
    let mut recall = BTreeMap::new();
    for (k, &m) in cfg.recall_ks.iter().enumerate() {
        let vals: Vec<f64> = per_user.iter().map(|u| u.recall[k]).collect();
        recall.insert(m, summarize(&vals, cfg.n_splits, seed));
    }
    let mut hier_recall: BTreeMap<usize, BTreeMap<usize, MetricSummary>> = BTreeMap::new();
    if let Some(first) = per_user.first() {
        for (j, &(h, k, _)) in first.hier.iter().enumerate() {
            let vals: Vec<f64> = per_user.iter().map(|u| u.hier[j].2).collect();
            hier_recall
                .entry(h)
                .or_default()
                .insert(k, summarize(&vals, cfg.n_splits, seed));
        }
    }
    let overlap = overlap_for_queries(params, tree, store, data)?;
    let ms = start.elapsed().as_millis() as u64;
    Ok(EvalReport {
        label: label.to_string(),
        config: config_echo,
        n_users: data.queries.len(),
        n_excluded: data.n_excluded,
        recall,
        hier_recall,
        overlap_rate: overlap,
        runtime: RuntimeStats {
            eval_ms: ms,
            users_per_sec: data.queries.len() as f64 / (ms.max(1) as f64 / 1000.0),
        },
    })
}

/// Recall@m of `m` items drawn uniformly per user.
pub fn random_recall(queries: &[EvalQuery], n_items: usize, m: usize, n_splits: usize, seed: u64) -> MetricSummary {
    let vals: Vec<f64> = queries
        .iter()
        .map(|q| {
            let mut rng = seed::rng(seed, 0xA0_0000 + q.user as u64);
            let picks: Vec<ItemId> = index::sample(&mut rng, n_items, m.min(n_items))
                .into_iter()
                .map(|i| ItemId(i as u32))
                .collect();
            recall_at_k(&picks, &q.relevant).unwrap_or(0.0)
        })
        .collect();
    summarize(&vals, n_splits, seed)
}

/// Selections of both search units for the leaf of every relevant item,
/// with collaborative positions translated into the multi-modal window.
/// Paired co and mm selections, one entry per scored node.
pub type SelectionPairs = (Vec<Vec<usize>>, Vec<Vec<usize>>);

/// Only pairs where both units fill all `k_esu` slots are kept.
pub fn selection_pairs(
    params: &EstimatorParams,
    tree: &IndexTree,
    store: &EmbeddingStore,
    data: EvalData<'_>,
) -> Result<SelectionPairs> {
    let k = params.config.k_esu;
    let per_query: Vec<Vec<(Vec<usize>, Vec<usize>)>> = data
        .queries
        .par_iter()
        .map(|q| {
            let ctx = SequenceContext::new(params, tree, store, user_feat(data.users, q.user)?, &q.sequence)?;
            let mut out = Vec::new();
            for &item in &q.relevant {
                let tr = forward(params, &ctx, tree, tree.leaf_of(item)?)?;
                if tr.co_selected.len() == k && tr.mm_selected.len() == k {
                    let co = tr.co_selected.iter().map(|&i| ctx.co_to_mm_position(i)).collect();
                    out.push((co, tr.mm_selected.clone()));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_query.into_iter().flatten().unzip())
}

fn overlap_for_queries(
    params: &EstimatorParams,
    tree: &IndexTree,
    store: &EmbeddingStore,
    data: EvalData<'_>,
) -> Result<Option<f64>> {
    if !(params.config.use_co_gsu && params.config.use_mm_gsu) {
        return Ok(None);
    }
    let (co, mm) = selection_pairs(params, tree, store, data)?;
    if co.is_empty() {
        return Ok(None);
    }
    overlap_rate(&co, &mm, params.config.k_esu).map(Some)
}

/// Search-unit softmax rows for one user, oldest position first.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRow {
    pub user: u32,
    pub target: ItemId,
    pub co: Vec<f64>,
    pub mm: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub users: usize,
    pub mean_entropy_co: f64,
    pub mean_entropy_mm: f64,
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Softmax of both search units' scores over their full windows, for a
/// seeded sample of queries scored against their smallest relevant item.
pub fn attention_rows(
    params: &EstimatorParams,
    tree: &IndexTree,
    store: &EmbeddingStore,
    data: EvalData<'_>,
    n_users: usize,
    seed: u64,
) -> Result<Vec<AttentionRow>> {
    let mut picks: Vec<usize> = index::sample(
        &mut seed::rng(seed, 0xA7_0001),
        data.queries.len(),
        n_users.min(data.queries.len()),
    )
    .into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|i| {
            let q = &data.queries[i];
            let target = *q.relevant.iter().next().expect("queries have relevant items");
            let ctx = SequenceContext::new(params, tree, store, user_feat(data.users, q.user)?, &q.sequence)?;
            let tr = forward(params, &ctx, tree, tree.leaf_of(target)?)?;
            Ok(AttentionRow {
                user: q.user,
                target,
                co: linalg::softmax(&tr.co_scores),
                mm: linalg::softmax(&tr.mm_scores),
            })
        })
        .collect()
}

const HIST_BINS: usize = 50;

/// Counts over 50 uniform bins on `[0, max]`.
pub fn histogram(values: impl Iterator<Item = f64> + Clone) -> (f64, Vec<usize>) {
    let max = values.clone().fold(0.0f64, f64::max);
    let mut bins = vec![0usize; HIST_BINS];
    for v in values {
        let b = if max > 0.0 {
            ((v / max) * HIST_BINS as f64).floor() as usize
        } else {
            0
        };
        bins[b.min(HIST_BINS - 1)] += 1;
    }
    (max, bins)
}

fn write_rows(path: &Path, rows: &[AttentionRow], width: usize, pick: fn(&AttentionRow) -> &[f64]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let header: Vec<String> = (0..width).map(|p| format!("p{p}")).collect();
    writeln!(w, "user,target,{}", header.join(",")).map_err(io)?;
    for r in rows {
        let v = pick(r);
        // Short histories are right-aligned so the last column is always the most recent.
        let cells: Vec<String> = std::iter::repeat_n(String::new(), width - v.len())
            .chain(v.iter().map(|x| x.to_string()))
            .collect();
        writeln!(w, "{},{},{}", r.user, r.target, cells.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes `attention_co.csv`, `attention_mm.csv` and
/// `attention_hist.csv` into `dir`.
pub fn export_attention(
    params: &EstimatorParams,
    tree: &IndexTree,
    store: &EmbeddingStore,
    data: EvalData<'_>,
    n_users: usize,
    seed: u64,
    dir: &Path,
) -> Result<AttentionSummary> {
    let rows = attention_rows(params, tree, store, data, n_users, seed)?;
    let cfg = &params.config;
    write_rows(&dir.join("attention_co.csv"), &rows, cfg.m_co, |r| &r.co)?;
    write_rows(&dir.join("attention_mm.csv"), &rows, cfg.m_mm, |r| &r.mm)?;
    let path = dir.join("attention_hist.csv");
    let io = |e| Error::io(&path, e);
    let mut w = BufWriter::new(File::create(&path).map_err(io)?);
    writeln!(w, "branch,bin,lo,hi,count").map_err(io)?;
    type Pick = fn(&AttentionRow) -> &[f64];
    let branches: [(&str, Pick); 2] = [("co", |r| &r.co), ("mm", |r| &r.mm)];
    for (name, pick) in branches {
        let (max, bins) = histogram(rows.iter().flat_map(|r| pick(r).iter().copied()));
        let width = max / HIST_BINS as f64;
        for (b, c) in bins.iter().enumerate() {
            writeln!(w, "{name},{b},{},{},{c}", b as f64 * width, (b + 1) as f64 * width).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    let with_co: Vec<&AttentionRow> = rows.iter().filter(|r| !r.co.is_empty()).collect();
    let with_mm: Vec<&AttentionRow> = rows.iter().filter(|r| !r.mm.is_empty()).collect();
    Ok(AttentionSummary {
        users: rows.len(),
        mean_entropy_co: linalg::mean_f64(with_co.iter().map(|r| entropy(&r.co))),
        mean_entropy_mm: linalg::mean_f64(with_mm.iter().map(|r| entropy(&r.mm))),
    })
}

/// Model variants compared by the ablation runner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Without the multi-modal search unit.
    NoMmGsu,
    /// Without either search unit.
    NoBothGsu,
    /// Without either search unit, on a tree clustered from trained ID
    /// embeddings instead of multi-modal ones.
    IdTree,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoMmGsu, Variant::NoBothGsu, Variant::IdTree];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMmGsu => "no_mm_gsu",
            Variant::NoBothGsu => "no_both_gsu",
            Variant::IdTree => "id_tree",
        }
    }

    pub fn estimator_config(self, base: &EstimatorConfig) -> EstimatorConfig {
        let (co, mm) = match self {
            Variant::Full => (true, true),
            Variant::NoMmGsu => (true, false),
            Variant::NoBothGsu | Variant::IdTree => (false, false),
        };
        EstimatorConfig {
            use_co_gsu: co,
            use_mm_gsu: mm,
            ..base.clone()
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Shared inputs of every ablation run.
pub struct AblationInputs<'a> {
    pub store: &'a EmbeddingStore,
    pub tree: &'a IndexTree,
    pub train: &'a [TrainingInstance],
    pub eval: EvalData<'a>,
    pub estimator: &'a EstimatorConfig,
    pub train_cfg: &'a TrainConfig,
    pub eval_cfg: &'a EvalConfig,
    pub config_echo: serde_json::Value,
    pub seed: u64,
}

/// Item embeddings taken from the ID-embedding rows of their leaves.
pub fn leaf_id_store(params: &EstimatorParams, tree: &IndexTree) -> Result<EmbeddingStore> {
    let rows: Vec<Vec<f64>> = (0..tree.n_items())
        .map(|i| Ok(params.emb(tree.leaf_of(ItemId(i as u32))?).to_vec()))
        .collect::<Result<_>>()?;
    let mut store = EmbeddingStore::from_rows(&rows)?;
    store.freeze();
    Ok(store)
}

/// Trains and evaluates each variant on identical data and seeds.
pub fn run_ablation(variants: &[Variant], inp: &AblationInputs<'_>) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::with_capacity(variants.len());
    for &v in variants {
        let cfg = v.estimator_config(inp.estimator);
        let train_on = |tree: &IndexTree, store: &EmbeddingStore| -> Result<EstimatorParams> {
            let init = EstimatorParams::init(&cfg, tree.n_nodes(), inp.seed)?;
            Ok(train(inp.train, inp.eval.users, tree, store, init, inp.train_cfg, inp.seed, TrainSink::default())?.params)
        };
        log::info!("ablation: training {}", v.name());
        let report = if v == Variant::IdTree {
            let warm_tree = random_tree(inp.store, inp.seed)?;
            let warm = train_on(&warm_tree, inp.store)?;
            let id_store = leaf_id_store(&warm, &warm_tree)?;
            let id_tree = build_tree(&id_store, inp.seed)?;
            let params = train_on(&id_tree, &id_store)?;
            evaluate(v.name(), &params, &id_tree, &id_store, inp.eval, inp.eval_cfg, inp.config_echo.clone(), inp.seed)?
        } else {
            let params = train_on(inp.tree, inp.store)?;
            evaluate(v.name(), &params, inp.tree, inp.store, inp.eval, inp.eval_cfg, inp.config_echo.clone(), inp.seed)?
        };
        reports.push(report);
    }
    Ok(reports)
}
