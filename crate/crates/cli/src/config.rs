use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use miss_core::corpus::{CorpusConfig, LogConfig};
use miss_core::estimator::EstimatorConfig;
use miss_core::eval::{EvalConfig, Variant};
use miss_core::mmembed::EmbedTrainConfig;
use miss_core::retrieval::RetrievalConfig;
use miss_core::training::TrainConfig;
use miss_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default = "all_variants")]
    pub variants: Vec<Variant>,
}

fn all_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: all_variants(),
        }
    }
}

/// Every stage's configuration, resolved from one TOML file plus flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Artifact directory; relative paths resolve against the working
    /// directory. Left out of the echo so runs in different directories
    /// produce identical artifacts.
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub logs: LogConfig,
    pub embed: EmbedTrainConfig,
    pub estimator: EstimatorConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalConfig,
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Tree height implied by the corpus size.
    pub fn tree_height(&self) -> usize {
        self.corpus.n_items.next_power_of_two().trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let e = |m: String| Err(Error::Config(m));
        self.estimator.validate()?;
        self.train.validate()?;
        self.retrieval.validate()?;
        self.eval.validate(Some(self.tree_height()))?;
        if self.logs.n_tasks != self.estimator.n_tasks {
            return e(format!(
                "logs.n_tasks ({}) must equal estimator.n_tasks ({})",
                self.logs.n_tasks, self.estimator.n_tasks
            ));
        }
        if self.logs.d_user != self.estimator.d_user {
            return e(format!(
                "logs.d_user ({}) must equal estimator.d_user ({})",
                self.logs.d_user, self.estimator.d_user
            ));
        }
        if self.logs.max_seq < self.estimator.m_mm {
            return e(format!(
                "logs.max_seq ({}) is shorter than estimator.m_mm ({})",
                self.logs.max_seq, self.estimator.m_mm
            ));
        }
        if self.corpus.n_clusters == 0 || self.corpus.n_clusters > self.corpus.n_items {
            return e("corpus.n_clusters must be in 1..=n_items".into());
        }
        if self.ablation.variants.is_empty() {
            return e("ablation.variants must not be empty".into());
        }
        Ok(())
    }

    /// Canonical JSON echo embedded in every artifact.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }

    pub fn echo_string(&self) -> String {
        self.echo().to_string()
    }
}
