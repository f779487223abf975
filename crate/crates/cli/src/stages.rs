//! Pipeline stages. Each reads and writes only its declared artifacts in
//! the run directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use miss_core::corpus::{
    generate_corpus, generate_logs, ingest_logs, write_logs, ItemCorpus, LogSchema, TrainingInstance,
    UserProfile,
};
use miss_core::estimator::{load_checkpoint, save_checkpoint, EstimatorParams};
use miss_core::eval::{
    build_queries, evaluate, export_attention, random_recall, run_ablation, AblationInputs, AttentionSummary,
    EvalConfig, EvalData, EvalQuery, EvalReport, MetricSummary,
};
use miss_core::mmembed::{
    build_pairs, load_store, pair_separation, save_store, train_embeddings, EmbeddingStore, PairSeparation,
};
use miss_core::retrieval::{retrieve, write_jsonl, Query};
use miss_core::training::{train, TrainSink};
use miss_core::tree::{build_tree, load_tree, save_tree, IndexTree};
use miss_core::{seed, Error};

use crate::config::RunConfig;

pub const CORPUS: &str = "corpus.json";
pub const USERS: &str = "users.json";
pub const TRAIN_LOGS: &str = "train_logs.csv";
pub const TEST_LOGS: &str = "test_logs.csv";
pub const EMBEDDINGS: &str = "embeddings.bin";
pub const EMBED_REPORT: &str = "embed_report.json";
pub const TREE: &str = "tree.bin";
pub const TRAIN_DIR: &str = "train";
pub const MODEL: &str = "model.bin";
pub const RETRIEVAL: &str = "retrieval.jsonl";
pub const RETRIEVAL_META: &str = "retrieval.meta.json";
pub const REPORT: &str = "report.json";
pub const ATTENTION_SUMMARY: &str = "attention_summary.json";
pub const ABLATION: &str = "ablation.json";

/// Stream identifiers for per-stage seeds.
mod streams {
    pub const CORPUS: u64 = 1;
    pub const LOGS: u64 = 2;
    pub const EMBED: u64 = 3;
    pub const TREE: u64 = 4;
    pub const INIT: u64 = 5;
    pub const TRAIN: u64 = 6;
    pub const EVAL: u64 = 7;
}

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("missing artifact {path}: run `miss {stage}` first")]
    Missing { path: PathBuf, stage: &'static str },
}

pub type StageResult<T> = std::result::Result<T, StageError>;

impl StageError {
    /// Process exit code per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            StageError::Missing { .. } => 3,
            StageError::Core(e) => match e {
                Error::Config(_) => 2,
                Error::Io { .. } => 4,
                Error::Format(_) | Error::Ingestion { .. } => 5,
                Error::Lookup(_) | Error::Shape { .. } | Error::Bounds(_) => 5,
                Error::Training { .. } => 6,
                Error::Frozen => 1,
            },
        }
    }
}

/// A validated configuration bound to its run directory.
pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    echo: String,
}

#[derive(Serialize)]
struct Wrapped<T> {
    config: serde_json::Value,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    corpus: ItemCorpus,
}

#[derive(Serialize, Deserialize)]
struct UsersFile {
    users: Vec<UserProfile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbedReport {
    pub epoch_losses: Vec<f64>,
    pub separation: PairSeparation,
}

/// Model report plus the two reference retrievers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineReport {
    pub model: EvalReport,
    pub untrained: EvalReport,
    /// Recall@m of uniformly random items, keyed by `m`.
    pub random: std::collections::BTreeMap<usize, MetricSummary>,
}

impl Run {
    pub fn new(cfg: RunConfig) -> StageResult<Self> {
        cfg.validate()?;
        let dir = cfg.out_dir.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let echo = cfg.echo_string();
        Ok(Self { cfg, dir, echo })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn seed(&self, stream: u64) -> u64 {
        seed::mix(self.cfg.seed, stream)
    }

    fn require(&self, name: &str, stage: &'static str) -> StageResult<PathBuf> {
        let path = self.path(name);
        if path.exists() {
            Ok(path)
        } else {
            Err(StageError::Missing { path, stage })
        }
    }

    fn write_json<T: Serialize>(&self, name: &str, body: &T) -> StageResult<()> {
        let path = self.path(name);
        let wrapped = Wrapped {
            config: self.cfg.echo(),
            body,
        };
        let io = |e| Error::io(&path, e);
        let mut w = BufWriter::new(File::create(&path).map_err(io)?);
        serde_json::to_writer_pretty(&mut w, &wrapped).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
        w.flush().map_err(io)?;
        Ok(())
    }

    fn read_json<T: DeserializeOwned>(&self, name: &str, stage: &'static str) -> StageResult<T> {
        let path = self.require(name, stage)?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(unwrap_body(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?)
    }

    pub fn gen_data(&self) -> StageResult<()> {
        let corpus = generate_corpus(&self.cfg.corpus, self.seed(streams::CORPUS))?;
        let logs = generate_logs(&corpus, &self.cfg.logs, self.seed(streams::LOGS))?;
        log::info!(
            "gen-data: {} items, {} users, {} train / {} test events",
            corpus.len(),
            logs.users.len(),
            logs.train.len(),
            logs.test.len()
        );
        self.write_json(CORPUS, &CorpusFile { corpus })?;
        self.write_json(USERS, &UsersFile { users: logs.users })?;
        let t = self.cfg.logs.n_tasks;
        write_logs(&self.path(TRAIN_LOGS), &logs.train, t, Some(&self.echo))?;
        write_logs(&self.path(TEST_LOGS), &logs.test, t, Some(&self.echo))?;
        Ok(())
    }

    pub fn corpus(&self) -> StageResult<ItemCorpus> {
        Ok(self.read_json::<CorpusFile>(CORPUS, "gen-data")?.corpus)
    }

    pub fn users(&self) -> StageResult<Vec<UserProfile>> {
        Ok(self.read_json::<UsersFile>(USERS, "gen-data")?.users)
    }

    fn logs(&self, name: &str) -> StageResult<Vec<TrainingInstance>> {
        let path = self.require(name, "gen-data")?;
        let schema = LogSchema {
            n_tasks: Some(self.cfg.logs.n_tasks),
            n_items: Some(self.cfg.corpus.n_items),
        };
        Ok(ingest_logs(&path, schema)?.instances)
    }

    pub fn train_logs(&self) -> StageResult<Vec<TrainingInstance>> {
        self.logs(TRAIN_LOGS)
    }

    pub fn test_logs(&self) -> StageResult<Vec<TrainingInstance>> {
        self.logs(TEST_LOGS)
    }

    pub fn train_embed(&self) -> StageResult<EmbedReport> {
        let corpus = self.corpus()?;
        let s = self.seed(streams::EMBED);
        let pairs = build_pairs(&corpus, self.cfg.embed.pairs_per_item, s);
        let trained = train_embeddings(&corpus, &pairs, &self.cfg.embed, s)?;
        let separation = pair_separation(&trained.store, &corpus, &pairs, pairs.len(), s)?;
        save_store(&trained.store, &self.path(EMBEDDINGS), Some(&self.echo))?;
        let report = EmbedReport {
            epoch_losses: trained.epoch_losses,
            separation,
        };
        log::info!(
            "train-embed: positive dot {:.3}, cross-cluster dot {:.3}",
            separation.positive,
            separation.cross_cluster
        );
        self.write_json(EMBED_REPORT, &report)?;
        Ok(report)
    }

    pub fn store(&self) -> StageResult<EmbeddingStore> {
        let path = self.require(EMBEDDINGS, "train-embed")?;
        Ok(load_store(&path)?.0)
    }

    pub fn build_tree(&self) -> StageResult<IndexTree> {
        let store = self.store()?;
        let tree = build_tree(&store, self.seed(streams::TREE))?;
        save_tree(&tree, &self.path(TREE), Some(&self.echo))?;
        log::info!("build-tree: height {}, {} nodes", tree.height(), tree.n_nodes());
        Ok(tree)
    }

    pub fn tree(&self) -> StageResult<IndexTree> {
        let path = self.require(TREE, "build-tree")?;
        Ok(load_tree(&path)?.0)
    }

    pub fn init_params(&self, tree: &IndexTree) -> StageResult<EstimatorParams> {
        Ok(EstimatorParams::init(&self.cfg.estimator, tree.n_nodes(), self.seed(streams::INIT))?)
    }

    pub fn train(&self) -> StageResult<EstimatorParams> {
        let tree = self.tree()?;
        let store = self.store()?;
        let users = self.users()?;
        let data = self.train_logs()?;
        let dir = self.path(TRAIN_DIR);
        if dir.exists() {
            // Stale checkpoints from an earlier run would otherwise survive.
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let init = self.init_params(&tree)?;
        let sink = TrainSink {
            dir: Some(&dir),
            meta: Some(&self.echo),
        };
        let out = train(
            &data,
            &users,
            &tree,
            &store,
            init,
            &self.cfg.train,
            self.seed(streams::TRAIN),
            sink,
        )?;
        if let (Some(first), Some(last)) = (out.metrics.first(), out.metrics.last()) {
            log::info!(
                "train: {} steps, loss {:.3} -> {:.3}",
                out.metrics.len(),
                first.mean_loss,
                last.mean_loss
            );
        }
        save_checkpoint(&out.params, &self.path(MODEL), Some(&self.echo))?;
        Ok(out.params)
    }

    pub fn model(&self) -> StageResult<EstimatorParams> {
        let path = self.require(MODEL, "train")?;
        Ok(load_checkpoint(&path)?.0)
    }

    pub fn queries(&self) -> StageResult<(Vec<EvalQuery>, usize)> {
        Ok(build_queries(&self.test_logs()?))
    }

    pub fn retrieve(&self) -> StageResult<()> {
        let params = self.model()?;
        let tree = self.tree()?;
        let store = self.store()?;
        let users = self.users()?;
        let (queries, _) = self.queries()?;
        let results = queries
            .iter()
            .map(|q| {
                let feat = user_feat(&users, q.user)?;
                let query = Query {
                    user: q.user,
                    user_feat: feat,
                    sequence: &q.sequence,
                };
                retrieve(&params, &tree, &store, query, self.cfg.retrieval)
            })
            .collect::<Result<Vec<_>, Error>>()?;
        let path = self.path(RETRIEVAL);
        let io = |e| Error::io(&path, e);
        let mut w = BufWriter::new(File::create(&path).map_err(io)?);
        for r in &results {
            write_jsonl(&mut w, r).map_err(io)?;
        }
        w.flush().map_err(io)?;
        self.write_json(RETRIEVAL_META, &serde_json::json!({ "users": results.len() }))?;
        Ok(())
    }

    pub fn eval(&self) -> StageResult<PipelineReport> {
        let params = self.model()?;
        let tree = self.tree()?;
        let store = self.store()?;
        let users = self.users()?;
        let (queries, n_excluded) = self.queries()?;
        let data = EvalData {
            users: &users,
            queries: &queries,
            n_excluded,
        };
        let s = self.seed(streams::EVAL);
        let echo = self.cfg.echo();
        let model = evaluate("model", &params, &tree, &store, data, &self.cfg.eval, echo.clone(), s)?;
        let untrained = self.init_params(&tree)?;
        // The baseline only needs the main beam; hierarchical recall is reported at that width.
        let baseline_cfg = EvalConfig {
            hier_beams: vec![self.cfg.eval.beam],
            ..self.cfg.eval.clone()
        };
        let untrained = evaluate("untrained", &untrained, &tree, &store, data, &baseline_cfg, echo, s)?;
        let random = self
            .cfg
            .eval
            .recall_ks
            .iter()
            .map(|&m| {
                (
                    m,
                    random_recall(&queries, tree.n_items(), m, self.cfg.eval.n_splits, s),
                )
            })
            .collect();
        let report = PipelineReport {
            model,
            untrained,
            random,
        };
        for (m, r) in &report.model.recall {
            log::info!(
                "eval: Recall@{m} {:.4} ± {:.4} (untrained {:.4}, random {:.4})",
                r.mean,
                r.std,
                report.untrained.recall[m].mean,
                report.random[m].mean
            );
        }
        self.write_json(REPORT, &report)?;
        Ok(report)
    }

    pub fn export_attention(&self) -> StageResult<AttentionSummary> {
        let params = self.model()?;
        let tree = self.tree()?;
        let store = self.store()?;
        let users = self.users()?;
        let (queries, n_excluded) = self.queries()?;
        let data = EvalData {
            users: &users,
            queries: &queries,
            n_excluded,
        };
        let summary = export_attention(
            &params,
            &tree,
            &store,
            data,
            self.cfg.eval.attention_users,
            self.seed(streams::EVAL),
            &self.dir,
        )?;
        log::info!(
            "export-attention: mean entropy co {:.3}, mm {:.3}",
            summary.mean_entropy_co,
            summary.mean_entropy_mm
        );
        self.write_json(ATTENTION_SUMMARY, &summary)?;
        Ok(summary)
    }

    pub fn ablate(&self) -> StageResult<Vec<EvalReport>> {
        let tree = self.tree()?;
        let store = self.store()?;
        let users = self.users()?;
        let train_data = self.train_logs()?;
        let (queries, n_excluded) = self.queries()?;
        let inputs = AblationInputs {
            store: &store,
            tree: &tree,
            train: &train_data,
            eval: EvalData {
                users: &users,
                queries: &queries,
                n_excluded,
            },
            estimator: &self.cfg.estimator,
            train_cfg: &self.cfg.train,
            eval_cfg: &self.cfg.eval,
            config_echo: self.cfg.echo(),
            seed: self.seed(streams::TRAIN),
        };
        let reports = run_ablation(&self.cfg.ablation.variants, &inputs)?;
        for r in &reports {
            let line: Vec<String> = r.recall.iter().map(|(m, s)| format!("R@{m} {:.4}", s.mean)).collect();
            log::info!("ablate: {:<12} {}", r.label, line.join("  "));
        }
        self.write_json(ABLATION, &serde_json::json!({ "reports": reports }))?;
        Ok(reports)
    }

    /// Every stage except the ablation, in dependency order.
    pub fn pipeline(&self) -> StageResult<PipelineReport> {
        self.gen_data()?;
        self.train_embed()?;
        self.build_tree()?;
        self.train()?;
        self.retrieve()?;
        let report = self.eval()?;
        self.export_attention()?;
        Ok(report)
    }
}

fn user_feat(users: &[UserProfile], user: u32) -> Result<&[f64], Error> {
    users
        .get(user as usize)
        .filter(|u| u.user == user)
        .map(|u| u.user_feat.as_slice())
        .ok_or_else(|| Error::Lookup(format!("user {user} has no profile")))
}

/// Removes the wall-clock fields that legitimately differ between runs.
pub fn strip_runtime(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.remove("runtime");
            map.values_mut().for_each(strip_runtime);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_runtime),
        _ => {}
    }
}

/// Drops the config echo and decodes the rest. Decoding through a `Value`
/// keeps integer map keys readable, which a flattened struct does not.
fn unwrap_body<T: DeserializeOwned>(text: &str) -> serde_json::Result<T> {
    let mut v: serde_json::Value = serde_json::from_str(text)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("config");
    }
    serde_json::from_value(v)
}

pub fn read_report(path: &Path) -> StageResult<PipelineReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(unwrap_body(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?)
}
