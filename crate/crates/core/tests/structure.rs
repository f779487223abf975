mod oracle;

use std::collections::BTreeSet;

use miss_core::seed;
use miss_core::training::pseudo_labels;
use miss_core::tree::{build_tree, load_tree, save_tree};
use miss_core::{ItemId, NodeId};
use rand::seq::index::sample;
use rand::Rng;

#[test]
fn internal_nodes_are_subtree_means_after_build_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    for case in 0..40u64 {
        let mut rng = seed::rng(1, case);
        let n = rng.random_range(1..=300);
        let store = oracle::random_store(n, rng.random_range(1..=8), &mut rng);
        let tree = build_tree(&store, case).unwrap();
        assert!(oracle::mean_pool_error(&tree, &store) <= 1e-6, "case {case}");
        let path = dir.path().join(format!("t{case}.bin"));
        save_tree(&tree, &path, Some("{}")).unwrap();
        let (back, _) = load_tree(&path).unwrap();
        assert_eq!(back, tree);
        assert!(oracle::mean_pool_error(&back, &store) <= 1e-6, "case {case}");
    }
}

#[test]
fn leaf_assignment_is_a_bijection() {
    for case in 0..40u64 {
        let mut rng = seed::rng(2, case);
        let n = rng.random_range(1..=300);
        let store = oracle::random_store(n, 3, &mut rng);
        let tree = build_tree(&store, case).unwrap();
        let h = tree.height();
        assert!(1usize << h >= n);
        assert!(h == 0 || 1usize << (h - 1) < n);
        let leaves: BTreeSet<NodeId> = (0..n as u32).map(|i| tree.leaf_of(ItemId(i)).unwrap()).collect();
        assert_eq!(leaves.len(), n);
        for i in 0..n as u32 {
            let leaf = tree.leaf_of(ItemId(i)).unwrap();
            assert_eq!(leaf.level(), h);
            assert_eq!(tree.item_at(leaf), Some(ItemId(i)));
        }
        let start = (1u32 << h) - 1;
        let occupied = (start..start + (1 << h)).filter(|&m| tree.item_at(NodeId(m)).is_some()).count();
        assert_eq!(occupied, n);
    }
}

#[test]
fn pseudo_labels_match_subtree_enumeration() {
    let mut rng = seed::rng(3, 0);
    let mut store = oracle::random_store(150, 4, &mut rng);
    let mut tree = build_tree(&store, 3).unwrap();
    for case in 0..1000u64 {
        if case % 250 == 0 {
            let n = rng.random_range(2..=150);
            store = oracle::random_store(n, 4, &mut rng);
            tree = build_tree(&store, case).unwrap();
        }
        let k = rng.random_range(0..=store.len().min(12));
        let positives: Vec<ItemId> = sample(&mut rng, store.len(), k)
            .into_iter()
            .map(|i| ItemId(i as u32))
            .collect();
        let labels = pseudo_labels(&tree, &positives).unwrap();
        for m in 0..tree.n_nodes() {
            let node = NodeId(m as u32);
            let want = oracle::subtree_items(&tree, node).iter().any(|i| positives.contains(i));
            assert_eq!(labels[m] == 1, want, "case {case} node {m}");
            if let Some(p) = node.parent() {
                assert!(labels[p.index()] >= labels[m]);
            }
        }
    }
}
