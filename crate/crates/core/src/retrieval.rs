//! Beam search over the index tree.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{node_score, EstimatorParams, SequenceContext};
use crate::ids::{ItemId, NodeId};
use crate::mmembed::EmbeddingStore;
use crate::tree::IndexTree;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Beam width.
    pub beam: usize,
    /// Items returned from the final beam.
    pub m_ret: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { beam: 64, m_ret: 50 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("retrieval.beam must be positive".into()));
        }
        if self.m_ret > self.beam {
            return Err(Error::Config(format!(
                "retrieval.m_ret ({}) exceeds the beam width ({})",
                self.m_ret, self.beam
            )));
        }
        Ok(())
    }
}

/// Nodes kept at one level, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamState {
    pub level: usize,
    pub nodes: Vec<(NodeId, f64)>,
}

impl BeamState {
    pub fn contains(&self, n: NodeId) -> bool {
        self.nodes.iter().any(|&(m, _)| m == n)
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().map(|&(n, _)| n)
    }
}

/// Orders by score descending, ties by the lower node id.
pub fn rank(scored: &mut [(NodeId, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// One query: a user's features and behaviour history.
#[derive(Clone, Copy, Debug)]
pub struct Query<'a> {
    pub user: u32,
    pub user_feat: &'a [f64],
    pub sequence: &'a [ItemId],
}

/// Beam of every level, root first.
pub fn beam_search(
    params: &EstimatorParams,
    ctx: &SequenceContext,
    tree: &IndexTree,
    beam: usize,
) -> Result<Vec<BeamState>> {
    beam_search_memo(params, ctx, tree, beam, &mut HashMap::new())
}

/// [`beam_search`] reading and filling a cache of node scores for the same
/// query, so searches at several widths score each node once.
pub fn beam_search_memo(
    params: &EstimatorParams,
    ctx: &SequenceContext,
    tree: &IndexTree,
    beam: usize,
    memo: &mut HashMap<NodeId, f64>,
) -> Result<Vec<BeamState>> {
    if beam == 0 {
        return Err(Error::Config("beam width must be positive".into()));
    }
    let mut score = |n: NodeId| -> Result<f64> {
        if let Some(&s) = memo.get(&n) {
            return Ok(s);
        }
        let s = node_score(params, ctx, tree, n)?;
        memo.insert(n, s);
        Ok(s)
    };
    let root = score(NodeId::ROOT)?;
    let mut beams = vec![BeamState {
        level: 0,
        nodes: vec![(NodeId::ROOT, root)],
    }];
    for level in 1..=tree.height() {
        let prev = beams.last().expect("root beam");
        let mut scored = Vec::with_capacity(2 * prev.nodes.len());
        for n in prev.ids() {
            for c in n.children() {
                if !tree.is_placeholder(c) {
                    scored.push((c, score(c)?));
                }
            }
        }
        rank(&mut scored);
        scored.truncate(beam);
        beams.push(BeamState { level, nodes: scored });
    }
    Ok(beams)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub user: u32,
    /// Best first; scores non-increasing.
    pub items: Vec<(ItemId, f64)>,
    pub beams: Vec<BeamState>,
}

/// Top `cfg.m_ret` leaves of the final beam, mapped to items.
pub fn retrieve(
    params: &EstimatorParams,
    tree: &IndexTree,
    store: &EmbeddingStore,
    query: Query<'_>,
    cfg: RetrievalConfig,
) -> Result<RetrievalResult> {
    cfg.validate()?;
    let ctx = SequenceContext::new(params, tree, store, query.user_feat, query.sequence)?;
    let beams = beam_search(params, &ctx, tree, cfg.beam)?;
    let last = beams.last().expect("at least the root beam");
    let items = last
        .nodes
        .iter()
        .take(cfg.m_ret)
        .map(|&(n, s)| {
            tree.item_at(n)
                .map(|i| (i, s))
                .ok_or_else(|| Error::Lookup(format!("final beam node {n} holds no item")))
        })
        .collect::<Result<_>>()?;
    Ok(RetrievalResult {
        user: query.user,
        items,
        beams,
    })
}

#[derive(Serialize)]
struct ScoredItem {
    id: u32,
    score: f64,
}

#[derive(Serialize)]
struct ResultLine<'a> {
    user: u32,
    items: &'a [ScoredItem],
    beams: BTreeMap<usize, Vec<u32>>,
}

/// Writes one `{user, items:[{id,score}], beams:{level:[ids]}}` line.
pub fn write_jsonl<W: Write>(w: &mut W, r: &RetrievalResult) -> std::io::Result<()> {
    let items: Vec<ScoredItem> = r
        .items
        .iter()
        .map(|&(i, score)| ScoredItem { id: i.0, score })
        .collect();
    let beams = r
        .beams
        .iter()
        .map(|b| (b.level, b.ids().map(|n| n.0).collect()))
        .collect();
    let line = ResultLine {
        user: r.user,
        items: &items,
        beams,
    };
    serde_json::to_writer(&mut *w, &line)?;
    w.write_all(b"\n")
}
