//! Node estimator `F(u, n; t)`.
//!
//! Two general search units shortlist behaviours from the user's lifelong
//! sequence for a candidate tree node: the collaborative unit scores with
//! bilinear attention over learned ID embeddings, the multi-modal unit with
//! dot products of frozen multi-modal embeddings. An exact search unit
//! attends over each shortlist, and a multi-gate mixture of experts turns
//! `concat(x_video, x_user, x_co, x_mm, no_history)` into one probability per
//! objective.

mod backward;
pub mod checkpoint;
mod forward;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::NodeId;
use crate::linalg::Matrix;
use crate::seed;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use backward::{backward, bce_head, node_loss_and_grad, PROB_EPS};
pub use forward::{
    co_gsu_scores, esu, forward, mm_gsu_scores, mmoe_forward, node_score, top_k_select,
    EsuOutput, ForwardTrace, MmoeTrace, SequenceContext,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub d_id: usize,
    pub d_user: usize,
    pub k_esu: usize,
    pub m_co: usize,
    pub m_mm: usize,
    pub n_experts: usize,
    pub n_tasks: usize,
    pub expert_hidden: usize,
    pub expert_out: usize,
    pub tower_hidden: usize,
    #[serde(default = "yes")]
    pub use_co_gsu: bool,
    #[serde(default = "yes")]
    pub use_mm_gsu: bool,
}

fn yes() -> bool {
    true
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            d_id: 32,
            d_user: 8,
            k_esu: 8,
            m_co: 64,
            m_mm: 128,
            n_experts: 4,
            n_tasks: 3,
            expert_hidden: 32,
            expert_out: 16,
            tower_hidden: 16,
            use_co_gsu: true,
            use_mm_gsu: true,
        }
    }
}

impl EstimatorConfig {
    /// Width of the MMoE input vector.
    pub fn input_dim(&self) -> usize {
        4 * self.d_id + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_id", self.d_id),
            ("d_user", self.d_user),
            ("k_esu", self.k_esu),
            ("m_co", self.m_co),
            ("m_mm", self.m_mm),
            ("n_experts", self.n_experts),
            ("n_tasks", self.n_tasks),
            ("expert_hidden", self.expert_hidden),
            ("expert_out", self.expert_out),
            ("tower_hidden", self.tower_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("estimator.{name} must be positive")));
            }
        }
        if self.m_co > self.m_mm {
            return Err(Error::Config("estimator.m_co must not exceed m_mm".into()));
        }
        Ok(())
    }
}

/// Two-layer perceptron `W2 relu(W1 x + b1) + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl Mlp {
    fn init<R: Rng + ?Sized>(input: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Self {
            w1: Matrix::glorot(hidden, input, rng),
            b1: vec![0.0; hidden],
            w2: Matrix::glorot(out, hidden, rng),
            b2: vec![0.0; out],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: vec![0.0; self.b1.len()],
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: vec![0.0; self.b2.len()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// Every trainable tensor except the node ID-embedding table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub user_w: Matrix,
    pub user_b: Vec<f64>,
    pub co_wq: Matrix,
    pub co_wk: Matrix,
    pub co_wv: Matrix,
    pub mm_wq: Matrix,
    pub mm_wk: Matrix,
    pub mm_wv: Matrix,
    pub experts: Vec<Mlp>,
    pub gates: Vec<Gate>,
    /// Towers end in a single logit (`w2` is `1 x tower_hidden`).
    pub towers: Vec<Mlp>,
}

/// A named view of one parameter tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl DenseParams {
    fn init<R: Rng + ?Sized>(cfg: &EstimatorConfig, rng: &mut R) -> Self {
        let d = cfg.d_id;
        let input = cfg.input_dim();
        Self {
            user_w: Matrix::glorot(d, cfg.d_user, rng),
            user_b: vec![0.0; d],
            co_wq: Matrix::glorot(d, d, rng),
            co_wk: Matrix::glorot(d, d, rng),
            co_wv: Matrix::glorot(d, d, rng),
            mm_wq: Matrix::glorot(d, d, rng),
            mm_wk: Matrix::glorot(d, d, rng),
            mm_wv: Matrix::glorot(d, d, rng),
            experts: (0..cfg.n_experts)
                .map(|_| Mlp::init(input, cfg.expert_hidden, cfg.expert_out, rng))
                .collect(),
            gates: (0..cfg.n_tasks)
                .map(|_| Gate {
                    w: Matrix::glorot(cfg.n_experts, input, rng),
                    b: vec![0.0; cfg.n_experts],
                })
                .collect(),
            towers: (0..cfg.n_tasks)
                .map(|_| Mlp::init(cfg.expert_out, cfg.tower_hidden, 1, rng))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            user_w: z(&self.user_w),
            user_b: vec![0.0; self.user_b.len()],
            co_wq: z(&self.co_wq),
            co_wk: z(&self.co_wk),
            co_wv: z(&self.co_wv),
            mm_wq: z(&self.mm_wq),
            mm_wk: z(&self.mm_wk),
            mm_wv: z(&self.mm_wv),
            experts: self.experts.iter().map(Mlp::zeros_like).collect(),
            gates: self
                .gates
                .iter()
                .map(|g| Gate {
                    w: z(&g.w),
                    b: vec![0.0; g.b.len()],
                })
                .collect(),
            towers: self.towers.iter().map(Mlp::zeros_like).collect(),
        }
    }

    /// Tensors in a fixed order with stable names.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        fn mat<'a>(name: String, x: &'a Matrix) -> TensorRef<'a> {
            TensorRef {
                name,
                shape: vec![x.rows(), x.cols()],
                data: x.as_slice(),
            }
        }
        fn vector<'a>(name: String, x: &'a [f64]) -> TensorRef<'a> {
            TensorRef {
                name,
                shape: vec![x.len()],
                data: x,
            }
        }
        let mut out = vec![
            mat("user_w".into(), &self.user_w),
            vector("user_b".into(), &self.user_b),
            mat("co_wq".into(), &self.co_wq),
            mat("co_wk".into(), &self.co_wk),
            mat("co_wv".into(), &self.co_wv),
            mat("mm_wq".into(), &self.mm_wq),
            mat("mm_wk".into(), &self.mm_wk),
            mat("mm_wv".into(), &self.mm_wv),
        ];
        let mlps = self
            .experts
            .iter()
            .enumerate()
            .map(|(i, e)| (format!("expert{i}"), e))
            .chain(self.towers.iter().enumerate().map(|(i, e)| (format!("tower{i}"), e)));
        for (prefix, e) in mlps {
            out.push(mat(format!("{prefix}.w1"), &e.w1));
            out.push(vector(format!("{prefix}.b1"), &e.b1));
            out.push(mat(format!("{prefix}.w2"), &e.w2));
            out.push(vector(format!("{prefix}.b2"), &e.b2));
        }
        for (i, g) in self.gates.iter().enumerate() {
            out.push(mat(format!("gate{i}.w"), &g.w));
            out.push(vector(format!("gate{i}.b"), &g.b));
        }
        out
    }

    /// Mutable tensors in the same order as [`DenseParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.user_w.as_mut_slice(),
            &mut self.user_b,
            self.co_wq.as_mut_slice(),
            self.co_wk.as_mut_slice(),
            self.co_wv.as_mut_slice(),
            self.mm_wq.as_mut_slice(),
            self.mm_wk.as_mut_slice(),
            self.mm_wv.as_mut_slice(),
        ];
        for e in self.experts.iter_mut().chain(self.towers.iter_mut()) {
            out.push(e.w1.as_mut_slice());
            out.push(&mut e.b1);
            out.push(e.w2.as_mut_slice());
            out.push(&mut e.b2);
        }
        for g in self.gates.iter_mut() {
            out.push(g.w.as_mut_slice());
            out.push(&mut g.b);
        }
        out
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &DenseParams) {
        let theirs: Vec<&[f64]> = other.tensors().into_iter().map(|t| t.data).collect();
        for (mine, theirs) in self.tensors_mut().into_iter().zip(theirs) {
            crate::linalg::axpy(alpha, theirs, mine);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorParams {
    pub config: EstimatorConfig,
    /// One row per tree node, internal nodes included; item behaviours use
    /// the row of their leaf.
    pub node_emb: Matrix,
    pub dense: DenseParams,
}

impl EstimatorParams {
    pub fn init(config: &EstimatorConfig, n_nodes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, 0xE5_0001);
        let node_emb = Matrix::uniform(n_nodes, config.d_id, 0.1, &mut rng);
        let dense = DenseParams::init(config, &mut rng);
        Ok(Self {
            config: config.clone(),
            node_emb,
            dense,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_emb.rows()
    }

    pub fn emb(&self, n: NodeId) -> &[f64] {
        self.node_emb.row(n.index())
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![TensorRef {
            name: "node_emb".into(),
            shape: vec![self.node_emb.rows(), self.node_emb.cols()],
            data: self.node_emb.as_slice(),
        }];
        out.extend(self.dense.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.node_emb.as_mut_slice()];
        out.extend(self.dense.tensors_mut());
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradients with a sparse node-embedding part: only rows touched by a
/// forward pass appear.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub node_emb: BTreeMap<NodeId, Vec<f64>>,
    pub dense: DenseParams,
}

impl Gradients {
    pub fn zeros(params: &EstimatorParams) -> Self {
        Self {
            node_emb: BTreeMap::new(),
            dense: params.dense.zeros_like(),
        }
    }

    pub(crate) fn emb_row(&mut self, n: NodeId, dim: usize) -> &mut Vec<f64> {
        self.node_emb.entry(n).or_insert_with(|| vec![0.0; dim])
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Gradients) {
        for (n, g) in &other.node_emb {
            let row = self.emb_row(*n, g.len());
            crate::linalg::axpy(alpha, g, row);
        }
        self.dense.add_scaled(alpha, &other.dense);
    }

    /// Dense node-embedding gradient (`n_nodes x d_id`, row-major).
    pub fn dense_node_emb(&self, n_nodes: usize, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_nodes * dim];
        for (n, g) in &self.node_emb {
            out[n.index() * dim..(n.index() + 1) * dim].copy_from_slice(g);
        }
        out
    }
}
