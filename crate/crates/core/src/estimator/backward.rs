use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ids::NodeId;
use crate::linalg::{self, Matrix};
use crate::tree::IndexTree;

use super::forward::{forward, ForwardTrace, SequenceContext};
use super::{EstimatorParams, Gradients};

/// Probabilities are clipped to `[PROB_EPS, 1 - PROB_EPS]` inside the loss.
pub const PROB_EPS: f64 = 1e-7;

/// Summed binary cross-entropy over objectives and its gradient with
/// respect to the logits.
///
/// The gradient is `p - y`, except where the clip is active, where the loss
/// is locally constant and the gradient is zero.
pub fn bce_head(logits: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&l, &y)| {
            let p = linalg::sigmoid(l);
            let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            if pc == p {
                p - y
            } else {
                0.0
            }
        })
        .collect();
    (loss, grad)
}

/// Gradient of one attention branch: `x = sum_j a_j Wv e_j`, `a = softmax(q . Wk e_j / sqrt(d))`,
/// `q = Wq e_n`.
struct Branch<'a> {
    wq: &'a Matrix,
    wk: &'a Matrix,
    wv: &'a Matrix,
    q: &'a [f64],
    keys: &'a Matrix,
    values: &'a Matrix,
    rows: &'a [NodeId],
    selected: &'a [usize],
    attn: &'a [f64],
}

struct BranchGrads<'a> {
    wq: &'a mut Matrix,
    wk: &'a mut Matrix,
    wv: &'a mut Matrix,
}

fn emb_row(m: &mut BTreeMap<NodeId, Vec<f64>>, n: NodeId, d: usize) -> &mut Vec<f64> {
    m.entry(n).or_insert_with(|| vec![0.0; d])
}

fn branch_backward(
    params: &EstimatorParams,
    b: Branch<'_>,
    dx: &[f64],
    target: NodeId,
    g: BranchGrads<'_>,
    emb: &mut BTreeMap<NodeId, Vec<f64>>,
) {
    if b.selected.is_empty() {
        return;
    }
    let d = params.config.d_id;
    let scale = (d as f64).sqrt();
    let da: Vec<f64> = b
        .selected
        .iter()
        .map(|&i| linalg::dot(b.values.row(i), dx))
        .collect();
    let dr = linalg::softmax_backward(b.attn, &da);
    // Both weight gradients are rank one: dWv = dx (sum a_j e_j)^T and
    // dWk = q (sum s_j e_j)^T with s_j = dr_j / sqrt(d). Row gradients are
    // a_j Wv^T dx + s_j Wk^T q.
    let mut wv_t_dx = vec![0.0; d];
    b.wv.matvec_t_acc(dx, &mut wv_t_dx);
    let mut wk_t_q = vec![0.0; d];
    b.wk.matvec_t_acc(b.q, &mut wk_t_q);
    let mut pooled_v = vec![0.0; d];
    let mut pooled_k = vec![0.0; d];
    let mut dq = vec![0.0; d];
    for ((&i, &a), &dri) in b.selected.iter().zip(b.attn).zip(&dr) {
        let row = b.rows[i];
        let e = params.emb(row);
        let s = dri / scale;
        linalg::axpy(a, e, &mut pooled_v);
        linalg::axpy(s, e, &mut pooled_k);
        linalg::axpy(s, b.keys.row(i), &mut dq);
        let de = emb_row(emb, row, d);
        linalg::axpy(a, &wv_t_dx, de);
        linalg::axpy(s, &wk_t_q, de);
    }
    g.wv.add_outer(1.0, dx, &pooled_v);
    g.wk.add_outer(1.0, b.q, &pooled_k);
    g.wq.add_outer(1.0, &dq, params.emb(target));
    let mut de = vec![0.0; d];
    b.wq.matvec_t_acc(&dq, &mut de);
    linalg::axpy(1.0, &de, emb_row(emb, target, d));
}

/// Accumulates the exact gradient of the summed BCE of one node into
/// `grads` and returns the loss.
///
/// Top-k selections recorded in the trace are treated as constants. The
/// frozen multi-modal embeddings have no gradient entry at all.
pub fn backward(
    params: &EstimatorParams,
    ctx: &SequenceContext,
    trace: &ForwardTrace,
    labels: &[f64],
    grads: &mut Gradients,
) -> Result<f64> {
    let cfg = &params.config;
    if labels.len() != cfg.n_tasks {
        return Err(Error::shape(cfg.n_tasks, labels.len()));
    }
    if trace.x.len() != cfg.input_dim() {
        return Err(Error::shape(cfg.input_dim(), trace.x.len()));
    }
    let d = cfg.d_id;
    let p = &params.dense;
    let m = &trace.mmoe;
    let x = &trace.x;
    let (loss, dlogits) = bce_head(&m.logits, labels);

    let mut dx = vec![0.0; x.len()];
    let mut d_out: Vec<Vec<f64>> = vec![vec![0.0; cfg.expert_out]; cfg.n_experts];
    let g = &mut grads.dense;
    for t in 0..cfg.n_tasks {
        let tower = &p.towers[t];
        let gt = &mut g.towers[t];
        let dl = dlogits[t];
        if dl == 0.0 {
            continue;
        }
        let th = &m.tower_hidden[t];
        gt.w2.add_outer(dl, &[1.0], th);
        gt.b2[0] += dl;
        let dpre: Vec<f64> = tower
            .w2
            .row(0)
            .iter()
            .zip(th)
            .map(|(&w, &h)| if h > 0.0 { w * dl } else { 0.0 })
            .collect();
        gt.w1.add_outer(1.0, &dpre, &m.mixed[t]);
        linalg::axpy(1.0, &dpre, &mut gt.b1);
        let mut df = vec![0.0; cfg.expert_out];
        tower.w1.matvec_t_acc(&dpre, &mut df);

        let gates = &m.gates[t];
        let dg: Vec<f64> = m.expert_out.iter().map(|o| linalg::dot(o, &df)).collect();
        for (acc, &gi) in d_out.iter_mut().zip(gates) {
            linalg::axpy(gi, &df, acc);
        }
        let dgl = linalg::softmax_backward(gates, &dg);
        g.gates[t].w.add_outer(1.0, &dgl, x);
        linalg::axpy(1.0, &dgl, &mut g.gates[t].b);
        p.gates[t].w.matvec_t_acc(&dgl, &mut dx);
    }
    for (i, dout) in d_out.iter().enumerate() {
        let e = &p.experts[i];
        let ge = &mut g.experts[i];
        let h = &m.expert_hidden[i];
        ge.w2.add_outer(1.0, dout, h);
        linalg::axpy(1.0, dout, &mut ge.b2);
        let mut dh = vec![0.0; cfg.expert_hidden];
        e.w2.matvec_t_acc(dout, &mut dh);
        for (v, &hv) in dh.iter_mut().zip(h) {
            if hv <= 0.0 {
                *v = 0.0;
            }
        }
        ge.w1.add_outer(1.0, &dh, x);
        linalg::axpy(1.0, &dh, &mut ge.b1);
        e.w1.matvec_t_acc(&dh, &mut dx);
    }

    let node = trace.node;
    linalg::axpy(1.0, &dx[..d], grads.emb_row(node, d));
    let dxu = &dx[d..2 * d];
    grads.dense.user_w.add_outer(1.0, dxu, &ctx.user_feat);
    linalg::axpy(1.0, dxu, &mut grads.dense.user_b);

    let Gradients { node_emb, dense } = grads;
    branch_backward(
        params,
        Branch {
            wq: &p.co_wq,
            wk: &p.co_wk,
            wv: &p.co_wv,
            q: &trace.q_co,
            keys: &ctx.co_keys,
            values: &ctx.co_values,
            rows: &ctx.co_rows,
            selected: &trace.co_selected,
            attn: &trace.co_attn,
        },
        &dx[2 * d..3 * d],
        node,
        BranchGrads {
            wq: &mut dense.co_wq,
            wk: &mut dense.co_wk,
            wv: &mut dense.co_wv,
        },
        node_emb,
    );
    branch_backward(
        params,
        Branch {
            wq: &p.mm_wq,
            wk: &p.mm_wk,
            wv: &p.mm_wv,
            q: &trace.q_mm,
            keys: &ctx.mm_keys,
            values: &ctx.mm_values,
            rows: &ctx.mm_rows,
            selected: &trace.mm_selected,
            attn: &trace.mm_attn,
        },
        &dx[3 * d..4 * d],
        node,
        BranchGrads {
            wq: &mut dense.mm_wq,
            wk: &mut dense.mm_wk,
            wv: &mut dense.mm_wv,
        },
        node_emb,
    );
    Ok(loss)
}

/// Forward and backward for one node; returns the summed BCE.
pub fn node_loss_and_grad(
    params: &EstimatorParams,
    ctx: &SequenceContext,
    tree: &IndexTree,
    node: NodeId,
    labels: &[f64],
    grads: &mut Gradients,
) -> Result<f64> {
    let trace = forward(params, ctx, tree, node)?;
    backward(params, ctx, &trace, labels, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_at_half_is_ln2() {
        let (l, g) = bce_head(&[0.0, 0.0], &[1.0, 0.0]);
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g, vec![-0.5, 0.5]);
    }

    #[test]
    fn bce_is_clipped() {
        let (l, g) = bce_head(&[100.0, -100.0], &[0.0, 1.0]);
        let bound = -(PROB_EPS.ln());
        assert!(l.is_finite());
        assert!((l - 2.0 * bound).abs() < 1e-6);
        assert_eq!(g, vec![0.0, 0.0]);
        let (l, _) = bce_head(&[100.0], &[1.0]);
        assert!(l <= -(1.0 - PROB_EPS).ln() + 1e-15);
    }
}
