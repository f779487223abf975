use crate::error::{Error, Result};
use crate::ids::{ItemId, NodeId};
use crate::linalg::{self, Matrix};
use crate::mmembed::EmbeddingStore;
use crate::tree::IndexTree;

use super::EstimatorParams;

/// Indices of the `k` largest scores, ascending by position.
///
/// Ties prefer the earlier position; all indices are returned when fewer
/// than `k` scores exist.
pub fn top_k_select(scores: &[f64], k: usize) -> Vec<usize> {
    if k >= scores.len() {
        return (0..scores.len()).collect();
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let by_score = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    idx.select_nth_unstable_by(k - 1, by_score);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn leaf_rows(tree: &IndexTree, items: &[ItemId]) -> Result<Vec<NodeId>> {
    items.iter().map(|&i| tree.leaf_of(i)).collect()
}

fn check_node(params: &EstimatorParams, tree: &IndexTree, n: NodeId) -> Result<()> {
    if !tree.contains(n) || n.index() >= params.n_nodes() {
        return Err(Error::Lookup(format!("node {n} has no ID embedding")));
    }
    Ok(())
}

/// Collaborative relevance `r_i = (Wq e_n) . (Wk e_i) / sqrt(d)` for every
/// behaviour in `seq`, evaluated directly from the parameters.
pub fn co_gsu_scores(
    params: &EstimatorParams,
    tree: &IndexTree,
    seq: &[ItemId],
    target: NodeId,
) -> Result<Vec<f64>> {
    check_node(params, tree, target)?;
    let p = &params.dense;
    let scale = (params.config.d_id as f64).sqrt();
    let q = p.co_wq.matvec(params.emb(target));
    leaf_rows(tree, seq)?
        .into_iter()
        .map(|row| Ok(linalg::dot(&q, &p.co_wk.matvec(params.emb(row))) / scale))
        .collect()
}

/// Multi-modal relevance `r_i = z_n . z_i` against the frozen store.
pub fn mm_gsu_scores(
    seq: &[ItemId],
    target: NodeId,
    tree: &IndexTree,
    store: &EmbeddingStore,
) -> Result<Vec<f64>> {
    if !tree.contains(target) {
        return Err(Error::Lookup(format!("node {target} not in tree")));
    }
    let z = tree.z(target);
    seq.iter()
        .map(|&i| {
            let c = store.get(i)?;
            Ok(z.iter().zip(c).map(|(&a, &b)| a as f64 * b as f64).sum())
        })
        .collect()
}

/// Result of the exact search unit for one candidate node.
#[derive(Clone, Debug, PartialEq)]
pub struct EsuOutput {
    pub co_attn: Vec<f64>,
    pub x_co: Vec<f64>,
    pub mm_logits: Vec<f64>,
    pub mm_attn: Vec<f64>,
    pub x_mm: Vec<f64>,
}

/// Target attention over both shortlists, evaluated directly from the
/// parameters.
///
/// `co_scores` are the reused collaborative search scores of the selected
/// behaviours `co_rows`; the multi-modal branch recomputes attention over
/// the ID embeddings of `mm_rows` with its own projections. An empty
/// shortlist yields a zero vector.
pub fn esu(
    params: &EstimatorParams,
    target: NodeId,
    co_scores: &[f64],
    co_rows: &[NodeId],
    mm_rows: &[NodeId],
) -> Result<EsuOutput> {
    if co_scores.len() != co_rows.len() {
        return Err(Error::shape(co_rows.len(), co_scores.len()));
    }
    let d = params.config.d_id;
    let p = &params.dense;
    let co_attn = linalg::softmax(co_scores);
    let mut x_co = vec![0.0; d];
    for (a, &row) in co_attn.iter().zip(co_rows) {
        linalg::axpy(*a, &p.co_wv.matvec(params.emb(row)), &mut x_co);
    }
    let q = p.mm_wq.matvec(params.emb(target));
    let scale = (d as f64).sqrt();
    let mm_logits: Vec<f64> = mm_rows
        .iter()
        .map(|&r| linalg::dot(&q, &p.mm_wk.matvec(params.emb(r))) / scale)
        .collect();
    let mm_attn = linalg::softmax(&mm_logits);
    let mut x_mm = vec![0.0; d];
    for (a, &row) in mm_attn.iter().zip(mm_rows) {
        linalg::axpy(*a, &p.mm_wv.matvec(params.emb(row)), &mut x_mm);
    }
    Ok(EsuOutput {
        co_attn,
        x_co,
        mm_logits,
        mm_attn,
        x_mm,
    })
}

/// Intermediates of the mixture-of-experts head.
#[derive(Clone, Debug, PartialEq)]
pub struct MmoeTrace {
    /// Post-ReLU hidden layer per expert.
    pub expert_hidden: Vec<Vec<f64>>,
    pub expert_out: Vec<Vec<f64>>,
    /// Softmax gate weights per objective (length `n_experts`).
    pub gates: Vec<Vec<f64>>,
    /// Gate-weighted expert mixture per objective.
    pub mixed: Vec<Vec<f64>>,
    pub tower_hidden: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

fn mlp_hidden(w: &Matrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut h = w.matvec(x);
    linalg::axpy(1.0, b, &mut h);
    linalg::relu_in_place(&mut h);
    h
}

pub fn mmoe_forward(params: &EstimatorParams, x: &[f64]) -> Result<MmoeTrace> {
    let cfg = &params.config;
    if x.len() != cfg.input_dim() {
        return Err(Error::shape(cfg.input_dim(), x.len()));
    }
    let p = &params.dense;
    let mut expert_hidden = Vec::with_capacity(cfg.n_experts);
    let mut expert_out = Vec::with_capacity(cfg.n_experts);
    for e in &p.experts {
        let h = mlp_hidden(&e.w1, &e.b1, x);
        let mut o = e.w2.matvec(&h);
        linalg::axpy(1.0, &e.b2, &mut o);
        expert_hidden.push(h);
        expert_out.push(o);
    }
    let mut gates = Vec::with_capacity(cfg.n_tasks);
    let mut mixed = Vec::with_capacity(cfg.n_tasks);
    let mut tower_hidden = Vec::with_capacity(cfg.n_tasks);
    let mut logits = Vec::with_capacity(cfg.n_tasks);
    for (gate, tower) in p.gates.iter().zip(&p.towers) {
        let mut gl = gate.w.matvec(x);
        linalg::axpy(1.0, &gate.b, &mut gl);
        let g = linalg::softmax(&gl);
        let mut f = vec![0.0; cfg.expert_out];
        for (gi, o) in g.iter().zip(&expert_out) {
            linalg::axpy(*gi, o, &mut f);
        }
        let th = mlp_hidden(&tower.w1, &tower.b1, &f);
        logits.push(linalg::dot(tower.w2.row(0), &th) + tower.b2[0]);
        gates.push(g);
        mixed.push(f);
        tower_hidden.push(th);
    }
    let probs = logits.iter().map(|&l| linalg::sigmoid(l)).collect();
    Ok(MmoeTrace {
        expert_hidden,
        expert_out,
        gates,
        mixed,
        tower_hidden,
        logits,
        probs,
    })
}

/// Target-independent sequence features for one (user, sequence) query.
///
/// Keys and values of both attention units and the multi-modal embeddings
/// of the behaviours depend only on the sequence, so they are computed once
/// and shared by every node scored for the query.
#[derive(Clone, Debug)]
pub struct SequenceContext {
    pub(crate) user_feat: Vec<f64>,
    pub(crate) x_user: Vec<f64>,
    pub(crate) empty: bool,
    pub(crate) co_rows: Vec<NodeId>,
    pub(crate) co_keys: Matrix,
    pub(crate) co_values: Matrix,
    pub(crate) mm_rows: Vec<NodeId>,
    pub(crate) mm_emb: Matrix,
    pub(crate) mm_keys: Matrix,
    pub(crate) mm_values: Matrix,
    /// Offset of the collaborative window inside the multi-modal window.
    pub(crate) co_offset: usize,
}

fn project_rows(params: &EstimatorParams, w: &Matrix, rows: &[NodeId]) -> Matrix {
    let d = params.config.d_id;
    let mut out = Matrix::zeros(rows.len(), d);
    for (k, &r) in rows.iter().enumerate() {
        w.matvec_into(params.emb(r), out.row_mut(k));
    }
    out
}

impl SequenceContext {
    pub fn new(
        params: &EstimatorParams,
        tree: &IndexTree,
        store: &EmbeddingStore,
        user_feat: &[f64],
        seq: &[ItemId],
    ) -> Result<Self> {
        let cfg = &params.config;
        if user_feat.len() != cfg.d_user {
            return Err(Error::shape(cfg.d_user, user_feat.len()));
        }
        let p = &params.dense;
        let mut x_user = p.user_w.matvec(user_feat);
        linalg::axpy(1.0, &p.user_b, &mut x_user);

        let co_items = &seq[seq.len().saturating_sub(cfg.m_co)..];
        let mm_items = &seq[seq.len().saturating_sub(cfg.m_mm)..];
        let (co_rows, co_keys, co_values) = if cfg.use_co_gsu {
            let rows = leaf_rows(tree, co_items)?;
            let k = project_rows(params, &p.co_wk, &rows);
            let v = project_rows(params, &p.co_wv, &rows);
            (rows, k, v)
        } else {
            (Vec::new(), Matrix::zeros(0, cfg.d_id), Matrix::zeros(0, cfg.d_id))
        };
        let (mm_rows, mm_emb, mm_keys, mm_values) = if cfg.use_mm_gsu {
            let rows = leaf_rows(tree, mm_items)?;
            let mut emb = Matrix::zeros(mm_items.len(), store.dim());
            for (k, &i) in mm_items.iter().enumerate() {
                for (dst, &src) in emb.row_mut(k).iter_mut().zip(store.get(i)?) {
                    *dst = src as f64;
                }
            }
            let k = project_rows(params, &p.mm_wk, &rows);
            let v = project_rows(params, &p.mm_wv, &rows);
            (rows, emb, k, v)
        } else {
            (
                Vec::new(),
                Matrix::zeros(0, store.dim()),
                Matrix::zeros(0, cfg.d_id),
                Matrix::zeros(0, cfg.d_id),
            )
        };
        Ok(Self {
            user_feat: user_feat.to_vec(),
            x_user,
            empty: seq.is_empty(),
            co_rows,
            co_keys,
            co_values,
            mm_rows,
            mm_emb,
            mm_keys,
            mm_values,
            co_offset: mm_items.len() - co_items.len(),
        })
    }

    pub fn co_len(&self) -> usize {
        self.co_rows.len()
    }

    pub fn mm_len(&self) -> usize {
        self.mm_rows.len()
    }

    /// Position of collaborative-window index `i` inside the multi-modal window.
    pub fn co_to_mm_position(&self, i: usize) -> usize {
        i + self.co_offset
    }

    pub fn co_scores(&self, params: &EstimatorParams, target: NodeId) -> Vec<f64> {
        let q = params.dense.co_wq.matvec(params.emb(target));
        self.co_scores_with_query(params, &q)
    }

    fn co_scores_with_query(&self, params: &EstimatorParams, q: &[f64]) -> Vec<f64> {
        let scale = (params.config.d_id as f64).sqrt();
        (0..self.co_rows.len())
            .map(|i| linalg::dot(q, self.co_keys.row(i)) / scale)
            .collect()
    }

    pub fn mm_scores(&self, tree: &IndexTree, target: NodeId) -> Vec<f64> {
        let z = tree.z_f64(target);
        (0..self.mm_rows.len())
            .map(|i| linalg::dot(&z, self.mm_emb.row(i)))
            .collect()
    }
}

/// Everything a backward pass needs, plus the quantities the analyses read.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub node: NodeId,
    /// Collaborative search scores over the `m_co` most recent behaviours.
    pub co_scores: Vec<f64>,
    /// Multi-modal search scores over the `m_mm` most recent behaviours.
    pub mm_scores: Vec<f64>,
    /// Selected positions in the collaborative window (ascending).
    pub co_selected: Vec<usize>,
    /// Selected positions in the multi-modal window (ascending).
    pub mm_selected: Vec<usize>,
    pub co_attn: Vec<f64>,
    pub mm_logits: Vec<f64>,
    pub mm_attn: Vec<f64>,
    pub(crate) q_co: Vec<f64>,
    pub(crate) q_mm: Vec<f64>,
    /// `concat(x_video, x_user, x_co, x_mm, no_history)`.
    pub x: Vec<f64>,
    pub mmoe: MmoeTrace,
}

impl ForwardTrace {
    fn part(&self, k: usize) -> &[f64] {
        let d = (self.x.len() - 1) / 4;
        &self.x[k * d..(k + 1) * d]
    }

    pub fn x_video(&self) -> &[f64] {
        self.part(0)
    }

    pub fn x_user(&self) -> &[f64] {
        self.part(1)
    }

    pub fn x_co(&self) -> &[f64] {
        self.part(2)
    }

    pub fn x_mm(&self) -> &[f64] {
        self.part(3)
    }

    pub fn probs(&self) -> &[f64] {
        &self.mmoe.probs
    }

    /// Mean of the per-objective probabilities.
    pub fn score(&self) -> f64 {
        linalg::mean_f64(self.mmoe.probs.iter().copied())
    }
}

/// `F(u, n; .)` for every objective.
pub fn forward(
    params: &EstimatorParams,
    ctx: &SequenceContext,
    tree: &IndexTree,
    node: NodeId,
) -> Result<ForwardTrace> {
    check_node(params, tree, node)?;
    let cfg = &params.config;
    let d = cfg.d_id;
    let p = &params.dense;
    let e_n = params.emb(node);

    let q_co = p.co_wq.matvec(e_n);
    let co_scores = ctx.co_scores_with_query(params, &q_co);
    let co_selected = top_k_select(&co_scores, cfg.k_esu);
    // Attention logits reuse the search scores of the selected behaviours.
    let co_logits: Vec<f64> = co_selected.iter().map(|&i| co_scores[i]).collect();
    let co_attn = linalg::softmax(&co_logits);
    let mut x = vec![0.0; cfg.input_dim()];
    x[..d].copy_from_slice(e_n);
    x[d..2 * d].copy_from_slice(&ctx.x_user);
    for (a, &i) in co_attn.iter().zip(&co_selected) {
        linalg::axpy(*a, ctx.co_values.row(i), &mut x[2 * d..3 * d]);
    }

    let mm_scores = if ctx.mm_rows.is_empty() {
        Vec::new()
    } else {
        ctx.mm_scores(tree, node)
    };
    let mm_selected = top_k_select(&mm_scores, cfg.k_esu);
    let q_mm = p.mm_wq.matvec(e_n);
    let scale = (d as f64).sqrt();
    let mm_logits: Vec<f64> = mm_selected
        .iter()
        .map(|&i| linalg::dot(&q_mm, ctx.mm_keys.row(i)) / scale)
        .collect();
    let mm_attn = linalg::softmax(&mm_logits);
    for (a, &i) in mm_attn.iter().zip(&mm_selected) {
        linalg::axpy(*a, ctx.mm_values.row(i), &mut x[3 * d..4 * d]);
    }
    x[4 * d] = if ctx.empty { 1.0 } else { 0.0 };

    let mmoe = mmoe_forward(params, &x)?;
    Ok(ForwardTrace {
        node,
        co_scores,
        mm_scores,
        co_selected,
        mm_selected,
        co_attn,
        mm_logits,
        mm_attn,
        q_co,
        q_mm,
        x,
        mmoe,
    })
}

/// Retrieval score: the mean over objectives of `F(u, n; t)`.
pub fn node_score(
    params: &EstimatorParams,
    ctx: &SequenceContext,
    tree: &IndexTree,
    node: NodeId,
) -> Result<f64> {
    Ok(forward(params, ctx, tree, node)?.score())
}
