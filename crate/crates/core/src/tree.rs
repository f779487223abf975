//! Multi-modal index tree: balanced recursive 2-means over item embeddings.
//!
//! The tree is a complete binary tree of height `H = ceil(log2 n_items)` in
//! level-order layout. When `n_items` is not a power of two some leaves (and
//! whole subtrees) hold no item; those are placeholders and are never scored,
//! sampled or retrieved. Every non-placeholder internal node carries the mean
//! of its leaves' item embeddings.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ids::{ItemId, NodeId};
use crate::mmembed::EmbeddingStore;
use crate::seed;

const MAX_LLOYD_ITERS: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of(points: &[Vec<f64>], idx: impl Iterator<Item = usize>) -> Option<Vec<f64>> {
    let dim = points.first()?.len();
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for i in idx {
        crate::linalg::axpy(1.0, &points[i], &mut acc);
        n += 1;
    }
    (n > 0).then(|| {
        acc.iter_mut().for_each(|v| *v /= n as f64);
        acc
    })
}

/// Balanced 2-means split of `points`.
///
/// Lloyd iterations from a k-means++ start run until the assignment is a
/// fixpoint (or 100 iterations), then points with the smallest distance
/// margin are moved out of the larger cluster until the sizes are
/// `ceil(k/2)` and `floor(k/2)`. The first returned set is the larger one, or
/// the one holding index 0's cluster when sizes tie. Both are sorted.
pub fn two_means(points: &[Vec<f64>], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let k = points.len();
    match k {
        0 => return (Vec::new(), Vec::new()),
        1 => return (vec![0], Vec::new()),
        _ => {}
    }
    let mut rng = seed::rng(seed, 0x7E_0001);

    // k-means++ seeding.
    let first = rng.random_range(0..k);
    let d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    let total: f64 = d2.iter().sum();
    let second = if total > 0.0 {
        let mut x = rng.random::<f64>() * total;
        let mut pick = k - 1;
        for (i, &w) in d2.iter().enumerate() {
            if x < w {
                pick = i;
                break;
            }
            x -= w;
        }
        // Guard against rounding landing on a zero-weight point.
        if d2[pick] == 0.0 {
            d2.iter()
                .enumerate()
                .filter(|(_, &w)| w > 0.0)
                .map(|(i, _)| i)
                .next_back()
                .unwrap_or(pick)
        } else {
            pick
        }
    } else {
        (first + 1) % k
    };
    let mut centers = [points[first].clone(), points[second].clone()];

    let mut assign = vec![usize::MAX; k];
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let c = usize::from(sq_dist(p, &centers[1]) < sq_dist(p, &centers[0]));
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            if let Some(m) = mean_of(points, (0..k).filter(|&i| assign[i] == c)) {
                *center = m;
            }
        }
    }

    let mut clusters: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &c) in assign.iter().enumerate() {
        clusters[c].push(i);
    }
    let big = usize::from(clusters[1].len() > clusters[0].len());
    let small = 1 - big;
    let keep = k.div_ceil(2);
    let excess = clusters[big].len().saturating_sub(keep);
    if excess > 0 {
        let mut by_margin: Vec<(f64, usize)> = clusters[big]
            .iter()
            .map(|&i| {
                let near = sq_dist(&points[i], &centers[big]).sqrt();
                let far = sq_dist(&points[i], &centers[small]).sqrt();
                ((far - near).abs(), i)
            })
            .collect();
        by_margin.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let moved: Vec<usize> = by_margin[..excess].iter().map(|&(_, i)| i).collect();
        clusters[big].retain(|i| !moved.contains(i));
        clusters[small].extend(moved);
        clusters[small].sort_unstable();
    }
    let [a, b] = clusters;
    let a_first = match a.len().cmp(&b.len()) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => a.first() < b.first() || b.is_empty(),
    };
    if a_first {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexTree {
    height: usize,
    dim: usize,
    n_items: usize,
    placeholder: Vec<bool>,
    z: Vec<f32>,
    leaf_item: Vec<Option<ItemId>>,
    item_leaf: Vec<NodeId>,
}

fn height_for(n_items: usize) -> usize {
    n_items.next_power_of_two().trailing_zeros() as usize
}

impl IndexTree {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_nodes(&self) -> usize {
        (1usize << (self.height + 1)) - 1
    }

    pub fn contains(&self, n: NodeId) -> bool {
        n.index() < self.n_nodes()
    }

    fn check(&self, n: NodeId) -> Result<()> {
        if self.contains(n) {
            Ok(())
        } else {
            Err(Error::Bounds(format!("node {n} not in tree of {} nodes", self.n_nodes())))
        }
    }

    pub fn is_leaf(&self, n: NodeId) -> bool {
        n.level() == self.height
    }

    pub fn is_placeholder(&self, n: NodeId) -> bool {
        self.placeholder[n.index()]
    }

    pub fn children(&self, n: NodeId) -> Option<[NodeId; 2]> {
        (self.contains(n) && !self.is_leaf(n)).then(|| n.children())
    }

    /// Multi-modal node embedding `z_n`.
    pub fn z(&self, n: NodeId) -> &[f32] {
        &self.z[n.index() * self.dim..(n.index() + 1) * self.dim]
    }

    pub fn z_f64(&self, n: NodeId) -> Vec<f64> {
        self.z(n).iter().map(|&v| v as f64).collect()
    }

    /// Item at a leaf, `None` for internal nodes and placeholder leaves.
    pub fn item_at(&self, n: NodeId) -> Option<ItemId> {
        if !self.contains(n) || !self.is_leaf(n) {
            return None;
        }
        self.leaf_item[n.index() - NodeId::level_start(self.height)]
    }

    pub fn leaf_of(&self, item: ItemId) -> Result<NodeId> {
        self.item_leaf
            .get(item.index())
            .copied()
            .ok_or_else(|| Error::Lookup(format!("item {item} not in tree")))
    }

    /// Root-to-`n` path, length `level(n) + 1`.
    pub fn ancestors(&self, n: NodeId) -> Result<Vec<NodeId>> {
        self.check(n)?;
        let mut path = Vec::with_capacity(n.level() + 1);
        let mut cur = Some(n);
        while let Some(c) = cur {
            path.push(c);
            cur = c.parent();
        }
        path.reverse();
        Ok(path)
    }

    /// `Anc(n; h)`.
    pub fn ancestor_at(&self, n: NodeId, h: usize) -> Result<NodeId> {
        self.check(n)?;
        let level = n.level();
        if h > level {
            return Err(Error::Bounds(format!("level {h} below node {n} at level {level}")));
        }
        Ok(NodeId(((n.index() + 1) >> (level - h)) as u32 - 1))
    }

    /// All node ids at level `h`, placeholders included.
    pub fn level_nodes(&self, h: usize) -> impl Iterator<Item = NodeId> {
        let start = NodeId::level_start(h);
        (start..2 * start + 1).map(|i| NodeId(i as u32))
    }

    /// Non-placeholder leaves under `n`, ascending.
    pub fn leaves(&self, n: NodeId) -> Vec<NodeId> {
        let depth = self.height - n.level();
        let first = ((n.index() + 1) << depth) - 1;
        (first..first + (1 << depth))
            .map(|i| NodeId(i as u32))
            .filter(|&l| !self.is_placeholder(l))
            .collect()
    }
}

/// Builds the index tree over every item in `store`.
pub fn build_tree(store: &EmbeddingStore, seed: u64) -> Result<IndexTree> {
    let n_items = store.len();
    if n_items == 0 {
        return Err(Error::Config("cannot build a tree over an empty store".into()));
    }
    let height = height_for(n_items);
    let points: Vec<Vec<f64>> = (0..n_items)
        .map(|i| store.get_f64(ItemId(i as u32)))
        .collect::<Result<_>>()?;

    // Top-down: item sets per node of the current level.
    let mut frontier: Vec<(NodeId, Vec<usize>)> = vec![(NodeId::ROOT, (0..n_items).collect())];
    for _ in 0..height {
        frontier = frontier
            .into_par_iter()
            .flat_map_iter(|(node, items)| {
                let [l, r] = node.children();
                let (left, right) = match items.len() {
                    0 => (Vec::new(), Vec::new()),
                    1 => (items, Vec::new()),
                    _ => {
                        let pts: Vec<Vec<f64>> = items.iter().map(|&i| points[i].clone()).collect();
                        let (a, b) = two_means(&pts, seed::mix(seed, node.0 as u64));
                        (
                            a.into_iter().map(|k| items[k]).collect(),
                            b.into_iter().map(|k| items[k]).collect(),
                        )
                    }
                };
                [(l, left), (r, right)]
            })
            .collect();
    }

    let leaf_start = NodeId::level_start(height);
    let mut leaf_item = vec![None; 1 << height];
    let mut item_leaf = vec![NodeId::ROOT; n_items];
    for (node, items) in frontier {
        debug_assert!(items.len() <= 1);
        if let Some(&i) = items.first() {
            leaf_item[node.index() - leaf_start] = Some(ItemId(i as u32));
            item_leaf[i] = node;
        }
    }
    from_layout(store, height, leaf_item, item_leaf)
}

/// Leaf slots (relative to the first leaf) filled when `k` items are split
/// `ceil/floor` at every level, in left-to-right order.
fn balanced_slots(k: usize, depth: usize, offset: usize, out: &mut Vec<usize>) {
    if k == 0 {
        return;
    }
    if depth == 0 {
        out.push(offset);
        return;
    }
    let half = 1 << (depth - 1);
    balanced_slots(k.div_ceil(2), depth - 1, offset, out);
    balanced_slots(k / 2, depth - 1, offset + half, out);
}

/// Builds a tree with items laid out on leaves in a seeded random order;
/// internal embeddings still follow the mean-pooling rule.
pub fn random_tree(store: &EmbeddingStore, seed: u64) -> Result<IndexTree> {
    use rand::seq::SliceRandom;
    let n = store.len();
    if n == 0 {
        return Err(Error::Config("cannot build a tree over an empty store".into()));
    }
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(&mut seed::rng(seed, 0x7E_0002));
    let height = height_for(n);
    let mut slots = Vec::with_capacity(n);
    balanced_slots(n, height, 0, &mut slots);
    let leaf_start = NodeId::level_start(height);
    let mut leaf_item = vec![None; 1 << height];
    let mut item_leaf = vec![NodeId::ROOT; n];
    for (&slot, &item) in slots.iter().zip(&order) {
        leaf_item[slot] = Some(ItemId(item));
        item_leaf[item as usize] = NodeId((leaf_start + slot) as u32);
    }
    from_layout(store, height, leaf_item, item_leaf)
}

fn from_layout(
    store: &EmbeddingStore,
    height: usize,
    leaf_item: Vec<Option<ItemId>>,
    item_leaf: Vec<NodeId>,
) -> Result<IndexTree> {
    let dim = store.dim();
    let n_nodes = (1usize << (height + 1)) - 1;
    let leaf_start = NodeId::level_start(height);
    let mut sums = vec![0.0f64; n_nodes * dim];
    let mut counts = vec![0usize; n_nodes];
    let mut z = vec![0.0f32; n_nodes * dim];
    for (slot, item) in leaf_item.iter().enumerate() {
        if let Some(item) = item {
            let n = leaf_start + slot;
            let v = store.get(*item)?;
            z[n * dim..(n + 1) * dim].copy_from_slice(v);
            for k in 0..dim {
                sums[n * dim + k] = v[k] as f64;
            }
            counts[n] = 1;
        }
    }
    for n in (0..leaf_start).rev() {
        let (l, r) = (2 * n + 1, 2 * n + 2);
        counts[n] = counts[l] + counts[r];
        for k in 0..dim {
            sums[n * dim + k] = sums[l * dim + k] + sums[r * dim + k];
        }
        if counts[n] > 0 {
            for k in 0..dim {
                z[n * dim + k] = (sums[n * dim + k] / counts[n] as f64) as f32;
            }
        }
    }
    Ok(IndexTree {
        height,
        dim,
        n_items: store.len(),
        placeholder: counts.iter().map(|&c| c == 0).collect(),
        z,
        leaf_item,
        item_leaf,
    })
}

const TREE_MAGIC: &[u8; 6] = b"MTREE1";
const NO_PARENT: u32 = u32::MAX;
const NO_ITEM: u32 = u32::MAX;

/// Binary layout: `MTREE1`, u32 H, u32 n_items, u32 d; per node in level
/// order a u32 parent, u8 has-children flag, u8 placeholder flag and `d`
/// f32 values of `z`; then the leaf-to-item table (u32, `u32::MAX` for
/// placeholders); then an optional metadata trailer. All little-endian.
pub fn save_tree(tree: &IndexTree, path: &Path, meta: Option<&str>) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(TREE_MAGIC).map_err(io)?;
    for v in [tree.height, tree.n_items, tree.dim] {
        w.write_all(&(v as u32).to_le_bytes()).map_err(io)?;
    }
    for n in 0..tree.n_nodes() {
        let node = NodeId(n as u32);
        let parent = node.parent().map_or(NO_PARENT, |p| p.0);
        w.write_all(&parent.to_le_bytes()).map_err(io)?;
        w.write_all(&[u8::from(!tree.is_leaf(node)), u8::from(tree.placeholder[n])])
            .map_err(io)?;
        for v in tree.z(node) {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    for item in &tree.leaf_item {
        w.write_all(&item.map_or(NO_ITEM, |i| i.0).to_le_bytes()).map_err(io)?;
    }
    crate::binfmt::write_meta(&mut w, meta).map_err(io)?;
    w.flush().map_err(io)
}

pub fn load_tree(path: &Path) -> Result<(IndexTree, Option<String>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = crate::binfmt::Reader::new(&bytes);
    if r.take(TREE_MAGIC.len())? != TREE_MAGIC {
        return Err(Error::Format("not an MTREE1 tree file".into()));
    }
    let height = r.u32()? as usize;
    let n_items = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if height > 30 || n_items == 0 || n_items > 1 << height {
        return Err(Error::Format(format!("implausible header H={height} n_items={n_items}")));
    }
    let n_nodes = (1usize << (height + 1)) - 1;
    let mut placeholder = vec![false; n_nodes];
    let mut z = vec![0.0f32; n_nodes * dim];
    for n in 0..n_nodes {
        let node = NodeId(n as u32);
        let parent = r.u32()?;
        if parent != node.parent().map_or(NO_PARENT, |p| p.0) {
            return Err(Error::Format(format!("node {n}: bad parent {parent}")));
        }
        let has_children = r.u8()?;
        if (has_children == 1) != (node.level() < height) {
            return Err(Error::Format(format!("node {n}: bad child flag")));
        }
        placeholder[n] = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(Error::Format(format!("node {n}: bad placeholder flag {f}"))),
        };
        for k in 0..dim {
            z[n * dim + k] = r.f32()?;
        }
    }
    let leaf_start = NodeId::level_start(height);
    let mut leaf_item = vec![None; 1 << height];
    let mut item_leaf = vec![None; n_items];
    for (slot, entry) in leaf_item.iter_mut().enumerate() {
        let raw = r.u32()?;
        let node = NodeId((leaf_start + slot) as u32);
        if raw == NO_ITEM {
            if !placeholder[node.index()] {
                return Err(Error::Format(format!("leaf {node} has no item but is not a placeholder")));
            }
            continue;
        }
        let idx = raw as usize;
        if idx >= n_items || item_leaf[idx].is_some() || placeholder[node.index()] {
            return Err(Error::Format(format!("leaf table is not a bijection at item {raw}")));
        }
        item_leaf[idx] = Some(node);
        *entry = Some(ItemId(raw));
    }
    let item_leaf = item_leaf
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Format("leaf table misses items".into()))?;
    let meta = r.meta()?;
    Ok((
        IndexTree {
            height,
            dim,
            n_items,
            placeholder,
            z,
            leaf_item,
            item_leaf,
        },
        meta,
    ))
}
