mod oracle;

use std::collections::BTreeSet;

use miss_core::estimator::top_k_select;
use miss_core::eval::{overlap_rate, recall_at_k};
use miss_core::linalg::softmax;
use miss_core::seed;
use miss_core::training::pseudo_labels;
use miss_core::tree::build_tree;
use miss_core::ItemId;
use proptest::prelude::*;

proptest! {
    #[test]
    fn top_k_matches_stable_sort(scores in prop::collection::vec(-3i8..3, 0..40), k in 1usize..12) {
        // Small integer scores force many ties.
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        prop_assert_eq!(top_k_select(&s, k), oracle::top_k(&s, k));
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..30)) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn recall_grows_with_the_prefix(
        ranked in prop::collection::vec(0u32..60, 0..40),
        relevant in prop::collection::btree_set(0u32..60, 1..10),
    ) {
        let ranked: Vec<ItemId> = ranked.into_iter().map(ItemId).collect();
        let relevant: BTreeSet<ItemId> = relevant.into_iter().map(ItemId).collect();
        let mut last = 0.0;
        for m in 0..=ranked.len() {
            let r = recall_at_k(&ranked[..m], &relevant).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn overlap_is_symmetric_and_bounded(
        pairs in prop::collection::vec(
            (prop::collection::btree_set(0usize..20, 4), prop::collection::btree_set(0usize..20, 4)),
            1..10,
        ),
    ) {
        let a: Vec<Vec<usize>> = pairs.iter().map(|(x, _)| x.iter().copied().collect()).collect();
        let b: Vec<Vec<usize>> = pairs.iter().map(|(_, y)| y.iter().copied().collect()).collect();
        let ab = overlap_rate(&a, &b, 4).unwrap();
        prop_assert_eq!(ab, overlap_rate(&b, &a, 4).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn pseudo_labels_are_ancestor_closed(n in 2usize..120, picks in prop::collection::vec(any::<u32>(), 0..8)) {
        let mut rng = seed::rng(5, n as u64);
        let store = oracle::random_store(n, 3, &mut rng);
        let tree = build_tree(&store, 5).unwrap();
        let pos: Vec<ItemId> = picks.iter().map(|&p| ItemId(p % n as u32)).collect();
        let labels = pseudo_labels(&tree, &pos).unwrap();
        for &i in &pos {
            for a in tree.ancestors(tree.leaf_of(i).unwrap()).unwrap() {
                prop_assert_eq!(labels[a.index()], 1);
            }
        }
        let expected: usize = (0..tree.n_nodes())
            .filter(|&m| oracle::subtree_items(&tree, miss_core::NodeId(m as u32)).iter().any(|i| pos.contains(i)))
            .count();
        prop_assert_eq!(labels.iter().filter(|&&l| l == 1).count(), expected);
    }
}
