//! Item-alignment training of frozen multi-modal item embeddings.
//!
//! A two-layer content encoder maps `concat(text, image)` features to a
//! unit-norm vector and is trained with in-batch InfoNCE over same-cluster
//! item pairs. The resulting [`EmbeddingStore`] is frozen and read by the
//! tree builder and by the multi-modal search unit.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ItemCorpus;
use crate::error::{Error, Result};
use crate::ids::ItemId;
use crate::linalg::{self, Matrix};
use crate::optim::{Adam, AdamConfig};
use crate::seed;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairDataset {
    pub pairs: Vec<(ItemId, ItemId)>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Samples `pairs_per_item` same-cluster partners for every item.
///
/// Singleton clusters cannot form pairs and are skipped with a warning.
pub fn build_pairs(corpus: &ItemCorpus, pairs_per_item: usize, seed: u64) -> PairDataset {
    let mut rng = seed::rng(seed, 0xE0_0001);
    let members = corpus.cluster_members();
    let mut pairs = Vec::with_capacity(corpus.len() * pairs_per_item);
    for (c, group) in members.iter().enumerate() {
        if group.len() < 2 {
            if !group.is_empty() {
                log::warn!("latent cluster {c} has a single item; it contributes no pairs");
            }
            continue;
        }
        for &i in group {
            for _ in 0..pairs_per_item {
                // Uniform over the other members.
                let mut k = rng.random_range(0..group.len() - 1);
                if group[k] == i {
                    k = group.len() - 1;
                }
                pairs.push((i, group[k]));
            }
        }
    }
    PairDataset { pairs }
}

/// InfoNCE with dot-product similarity:
/// `-log(exp(a.p/t) / (exp(a.p/t) + sum_n exp(a.n/t)))`.
pub fn info_nce_loss(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    temperature: f64,
) -> Result<f64> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    if negatives.is_empty() {
        return Err(Error::Config("info_nce_loss needs at least one negative".into()));
    }
    let d = anchor.len();
    if positive.len() != d {
        return Err(Error::shape(d, positive.len()));
    }
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(linalg::dot(anchor, positive) / temperature);
    for n in negatives {
        if n.len() != d {
            return Err(Error::shape(d, n.len()));
        }
        logits.push(linalg::dot(anchor, n) / temperature);
    }
    Ok(linalg::log_sum_exp(&logits) - logits[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedTrainConfig {
    pub dim: usize,
    pub hidden: usize,
    pub temperature: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub pairs_per_item: usize,
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            hidden: 64,
            temperature: 0.1,
            lr: 1e-3,
            batch_size: 64,
            epochs: 10,
            pairs_per_item: 2,
        }
    }
}

/// Weights of the content encoder: `W2 relu(W1 x + b1) + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

struct EncoderPass {
    hidden: Vec<f64>,
    raw_norm: f64,
    unit: Vec<f64>,
}

const NORM_FLOOR: f64 = 1e-12;

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            w1: Matrix::glorot(hidden, input, rng),
            b1: vec![0.0; hidden],
            w2: Matrix::glorot(dim, hidden, rng),
            b2: vec![0.0; dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: vec![0.0; self.b1.len()],
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: vec![0.0; self.b2.len()],
        }
    }

    pub fn dim(&self) -> usize {
        self.b2.len()
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("w1", self.w1.as_slice()),
            ("b1", &self.b1),
            ("w2", self.w2.as_slice()),
            ("b2", &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
        ]
    }

    fn pass(&self, x: &[f64]) -> EncoderPass {
        let mut hidden = self.w1.matvec(x);
        linalg::axpy(1.0, &self.b1, &mut hidden);
        linalg::relu_in_place(&mut hidden);
        let mut out = self.w2.matvec(&hidden);
        linalg::axpy(1.0, &self.b2, &mut out);
        let raw_norm = linalg::norm(&out).max(NORM_FLOOR);
        out.iter_mut().for_each(|v| *v /= raw_norm);
        EncoderPass {
            hidden,
            raw_norm,
            unit: out,
        }
    }

    /// Unit-norm embedding of one content vector.
    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        self.pass(x).unit
    }

    fn backward(&self, x: &[f64], pass: &EncoderPass, d_unit: &[f64], grads: &mut EncoderParams) {
        // d(o/|o|) = (I - u u^T) / |o|
        let proj = linalg::dot(&pass.unit, d_unit);
        let d_out: Vec<f64> = d_unit
            .iter()
            .zip(&pass.unit)
            .map(|(g, u)| (g - u * proj) / pass.raw_norm)
            .collect();
        grads.w2.add_outer(1.0, &d_out, &pass.hidden);
        linalg::axpy(1.0, &d_out, &mut grads.b2);
        let mut d_hidden = vec![0.0; pass.hidden.len()];
        self.w2.matvec_t_acc(&d_out, &mut d_hidden);
        for (dh, h) in d_hidden.iter_mut().zip(&pass.hidden) {
            if *h <= 0.0 {
                *dh = 0.0;
            }
        }
        grads.w1.add_outer(1.0, &d_hidden, x);
        linalg::axpy(1.0, &d_hidden, &mut grads.b1);
    }
}

/// Mean in-batch InfoNCE over `batch` and its gradient w.r.t. the encoder.
///
/// For pair `b`, the positives of every other pair in the batch act as negatives.
pub fn batch_loss_and_grad(
    encoder: &EncoderParams,
    corpus: &ItemCorpus,
    batch: &[(ItemId, ItemId)],
    temperature: f64,
) -> (f64, EncoderParams) {
    let b = batch.len();
    let anchor_x: Vec<Vec<f64>> = batch.iter().map(|p| corpus.content_vector(p.0)).collect();
    let pos_x: Vec<Vec<f64>> = batch.iter().map(|p| corpus.content_vector(p.1)).collect();
    let anchors: Vec<EncoderPass> = anchor_x.iter().map(|x| encoder.pass(x)).collect();
    let positives: Vec<EncoderPass> = pos_x.iter().map(|x| encoder.pass(x)).collect();

    let d = encoder.dim();
    let mut loss = 0.0;
    let mut d_anchor = vec![vec![0.0; d]; b];
    let mut d_pos = vec![vec![0.0; d]; b];
    for r in 0..b {
        let logits: Vec<f64> = positives
            .iter()
            .map(|p| linalg::dot(&anchors[r].unit, &p.unit) / temperature)
            .collect();
        loss += linalg::log_sum_exp(&logits) - logits[r];
        let mut probs = linalg::softmax(&logits);
        probs[r] -= 1.0;
        for (c, g) in probs.iter().enumerate() {
            let g = g / (b as f64 * temperature);
            linalg::axpy(g, &positives[c].unit, &mut d_anchor[r]);
            linalg::axpy(g, &anchors[r].unit, &mut d_pos[c]);
        }
    }
    let mut grads = encoder.zeros_like();
    for r in 0..b {
        encoder.backward(&anchor_x[r], &anchors[r], &d_anchor[r], &mut grads);
        encoder.backward(&pos_x[r], &positives[r], &d_pos[r], &mut grads);
    }
    (loss / b as f64, grads)
}

/// Frozen-after-training map from item to unit-norm embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    data: Vec<f32>,
    frozen: bool,
}

impl EmbeddingStore {
    pub fn new(n_items: usize, dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; n_items * dim],
            frozen: false,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut store = Self::new(rows.len(), dim);
        for (i, r) in rows.iter().enumerate() {
            store.set(ItemId(i as u32), r)?;
        }
        Ok(store)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn get(&self, item: ItemId) -> Result<&[f32]> {
        let i = item.index();
        if i >= self.len() {
            return Err(Error::Lookup(format!("item {item} not in embedding store")));
        }
        Ok(&self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn get_f64(&self, item: ItemId) -> Result<Vec<f64>> {
        Ok(self.get(item)?.iter().map(|&v| v as f64).collect())
    }

    pub fn set(&mut self, item: ItemId, v: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        if v.len() != self.dim {
            return Err(Error::shape(self.dim, v.len()));
        }
        let i = item.index();
        if i >= self.len() {
            return Err(Error::Lookup(format!("item {item} not in embedding store")));
        }
        for (dst, &src) in self.data[i * self.dim..(i + 1) * self.dim].iter_mut().zip(v) {
            *dst = src as f32;
        }
        Ok(())
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }
}

const EMB_MAGIC: &[u8; 5] = b"MMEB1";

/// Binary layout: `MMEB1`, u32 n_items, u32 d, then per item a u32 id and
/// `d` little-endian f32 values, then an optional u32-length-prefixed
/// UTF-8 metadata trailer.
pub fn save_store(store: &EmbeddingStore, path: &Path, meta: Option<&str>) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(EMB_MAGIC).map_err(io)?;
    w.write_all(&(store.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(store.dim as u32).to_le_bytes()).map_err(io)?;
    for i in 0..store.len() {
        w.write_all(&(i as u32).to_le_bytes()).map_err(io)?;
        for v in store.get(ItemId(i as u32))? {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    crate::binfmt::write_meta(&mut w, meta).map_err(io)?;
    w.flush().map_err(io)
}

/// Loads a store; the result is always frozen.
pub fn load_store(path: &Path) -> Result<(EmbeddingStore, Option<String>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = crate::binfmt::Reader::new(&bytes);
    if r.take(EMB_MAGIC.len())? != EMB_MAGIC {
        return Err(Error::Format("not an MMEB1 embedding file".into()));
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let mut store = EmbeddingStore::new(n, d);
    for expected in 0..n {
        let id = r.u32()? as usize;
        if id != expected {
            return Err(Error::Format(format!("item id {id} out of order (expected {expected})")));
        }
        for k in 0..d {
            store.data[id * d + k] = r.f32()?;
        }
    }
    let meta = r.meta()?;
    store.freeze();
    Ok((store, meta))
}

pub fn export_store_csv(store: &EmbeddingStore, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let header: Vec<String> = std::iter::once("item_id".to_string())
        .chain((0..store.dim).map(|k| format!("v{k}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for i in 0..store.len() {
        let row: Vec<String> = store
            .get(ItemId(i as u32))?
            .iter()
            .map(|v| v.to_string())
            .collect();
        writeln!(w, "{i},{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Clone, Debug)]
pub struct TrainedEmbeddings {
    pub store: EmbeddingStore,
    pub encoder: EncoderParams,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn encode_all(encoder: &EncoderParams, corpus: &ItemCorpus) -> Result<EmbeddingStore> {
    let rows: Vec<Vec<f64>> = (0..corpus.len())
        .map(|i| encoder.encode(&corpus.content_vector(ItemId(i as u32))))
        .collect();
    let mut store = EmbeddingStore::from_rows(&rows)?;
    store.freeze();
    Ok(store)
}

pub fn train_embeddings(
    corpus: &ItemCorpus,
    pairs: &PairDataset,
    cfg: &EmbedTrainConfig,
    seed: u64,
) -> Result<TrainedEmbeddings> {
    if cfg.batch_size < 2 {
        return Err(Error::Config("embedding batch_size must be >= 2".into()));
    }
    if cfg.dim == 0 || cfg.hidden == 0 {
        return Err(Error::Config("encoder dims must be positive".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Config("empty corpus".into()));
    }
    let mut rng = seed::rng(seed, 0xE0_0002);
    let mut encoder =
        EncoderParams::init(corpus.d_text + corpus.d_image, cfg.hidden, cfg.dim, &mut rng);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut order = pairs.pairs.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut batch_index = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n = 0usize;
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
            let (loss, grads) = batch_loss_and_grad(&encoder, corpus, batch, cfg.temperature);
            if !loss.is_finite() {
                return Err(Error::Training {
                    batch: batch_index,
                    reason: format!("non-finite InfoNCE loss {loss}"),
                });
            }
            let g: Vec<&[f64]> = grads.tensors().into_iter().map(|(_, t)| t).collect();
            opt.step(encoder.tensors_mut(), g);
            sum += loss;
            n += 1;
            batch_index += 1;
        }
        let mean = if n == 0 { f64::NAN } else { sum / n as f64 };
        log::info!("embed epoch {}: mean InfoNCE {mean:.4}", epoch_losses.len());
        epoch_losses.push(mean);
    }
    let store = encode_all(&encoder, corpus)?;
    Ok(TrainedEmbeddings {
        store,
        encoder,
        epoch_losses,
    })
}

/// Mean dot product over `pairs` and over `n_random` uniformly drawn
/// cross-cluster pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSeparation {
    pub positive: f64,
    pub cross_cluster: f64,
}

pub fn pair_separation(
    store: &EmbeddingStore,
    corpus: &ItemCorpus,
    pairs: &PairDataset,
    n_random: usize,
    seed: u64,
) -> Result<PairSeparation> {
    let dot = |a: ItemId, b: ItemId| -> Result<f64> {
        Ok(store.get(a)?.iter().zip(store.get(b)?).map(|(&x, &y)| x as f64 * y as f64).sum())
    };
    let mut pos = 0.0;
    for &(a, b) in &pairs.pairs {
        pos += dot(a, b)?;
    }
    let mut rng = seed::rng(seed, 0xE0_0003);
    let n = corpus.len();
    let mut cross = 0.0;
    let mut drawn = 0usize;
    // Bounded so a single-cluster corpus cannot loop forever.
    for _ in 0..n_random.saturating_mul(100) {
        if drawn == n_random {
            break;
        }
        let a = ItemId(rng.random_range(0..n) as u32);
        let b = ItemId(rng.random_range(0..n) as u32);
        if corpus.cluster_of(a) != corpus.cluster_of(b) {
            cross += dot(a, b)?;
            drawn += 1;
        }
    }
    if pairs.is_empty() || drawn == 0 {
        return Err(Error::Config("pair separation needs pairs and at least two clusters".into()));
    }
    Ok(PairSeparation {
        positive: pos / pairs.len() as f64,
        cross_cluster: cross / drawn as f64,
    })
}

/// Encodes the corpus with a freshly initialised encoder (what training
/// starts from).
pub fn initial_store(corpus: &ItemCorpus, cfg: &EmbedTrainConfig, seed: u64) -> Result<EmbeddingStore> {
    let mut rng = seed::rng(seed, 0xE0_0002);
    let encoder =
        EncoderParams::init(corpus.d_text + corpus.d_image, cfg.hidden, cfg.dim, &mut rng);
    encode_all(&encoder, corpus)
}
