//! Shared fixtures for the criterion benches.

use miss_core::corpus::{generate_corpus, generate_logs, CorpusConfig, GeneratedLogs, LogConfig};
use miss_core::estimator::{EstimatorConfig, EstimatorParams};
use miss_core::mmembed::{initial_store, EmbedTrainConfig, EmbeddingStore};
use miss_core::tree::{build_tree, IndexTree};

pub struct Fixture {
    pub store: EmbeddingStore,
    pub tree: IndexTree,
    pub params: EstimatorParams,
    pub logs: GeneratedLogs,
}

/// Reference-sized corpus and estimator with untrained parameters.
pub fn fixture(n_items: usize, n_users: usize) -> Fixture {
    let corpus = generate_corpus(
        &CorpusConfig {
            n_items,
            n_clusters: 64.min(n_items),
            ..Default::default()
        },
        1,
    )
    .expect("corpus");
    let logs = generate_logs(
        &corpus,
        &LogConfig {
            n_users,
            ..Default::default()
        },
        2,
    )
    .expect("logs");
    let mut store = initial_store(&corpus, &EmbedTrainConfig::default(), 3).expect("store");
    store.freeze();
    let tree = build_tree(&store, 4).expect("tree");
    let params = EstimatorParams::init(&EstimatorConfig::default(), tree.n_nodes(), 5).expect("params");
    Fixture {
        store,
        tree,
        params,
        logs,
    }
}
