//! Item universe, synthetic user behaviour, and behaviour-log I/O.
//!
//! The generator plants a latent cluster structure in item content so that
//! every downstream stage (embedding alignment, tree quality, retrieval) has a
//! measurable ground truth. Latent clusters and user affinities never reach
//! the models; they only feed the generator and the tests.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::ItemId;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemContent {
    pub item: ItemId,
    pub text_feat: Vec<f64>,
    pub image_feat: Vec<f64>,
    /// Generator provenance, hidden from every model.
    pub latent_cluster: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemCorpus {
    pub n_clusters: usize,
    pub d_text: usize,
    pub d_image: usize,
    pub items: Vec<ItemContent>,
}

impl ItemCorpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, id: ItemId) -> Option<&ItemContent> {
        self.items.get(id.index())
    }

    pub fn cluster_of(&self, id: ItemId) -> u32 {
        self.items[id.index()].latent_cluster
    }

    /// Item ids grouped by latent cluster, ascending within each group.
    pub fn cluster_members(&self) -> Vec<Vec<ItemId>> {
        let mut members = vec![Vec::new(); self.n_clusters];
        for it in &self.items {
            members[it.latent_cluster as usize].push(it.item);
        }
        members
    }

    /// `concat(text_feat, image_feat)` for one item.
    pub fn content_vector(&self, id: ItemId) -> Vec<f64> {
        let it = &self.items[id.index()];
        let mut v = Vec::with_capacity(self.d_text + self.d_image);
        v.extend_from_slice(&it.text_feat);
        v.extend_from_slice(&it.image_feat);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_items: usize,
    pub n_clusters: usize,
    #[serde(default = "default_d_feat")]
    pub d_text: usize,
    #[serde(default = "default_d_feat")]
    pub d_image: usize,
    /// Standard deviation of the isotropic noise around each cluster centroid.
    #[serde(default = "default_content_noise")]
    pub noise: f64,
}

fn default_d_feat() -> usize {
    16
}
fn default_content_noise() -> f64 {
    1.0
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_items: 4096,
            n_clusters: 64,
            d_text: default_d_feat(),
            d_image: default_d_feat(),
            noise: default_content_noise(),
        }
    }
}

pub fn generate_corpus(cfg: &CorpusConfig, seed: u64) -> Result<ItemCorpus> {
    if cfg.n_items < 2 {
        return Err(Error::Config(format!("n_items must be >= 2, got {}", cfg.n_items)));
    }
    if cfg.n_clusters < 1 || cfg.n_clusters > cfg.n_items {
        return Err(Error::Config(format!(
            "n_clusters must be in [1, n_items], got {}",
            cfg.n_clusters
        )));
    }
    if cfg.d_text + cfg.d_image == 0 || !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Config("content dims must be positive and noise finite".into()));
    }
    let dim = cfg.d_text + cfg.d_image;
    let mut rng = seed::rng(seed, 0xC0_0001);

    let centroids: Vec<Vec<f64>> = (0..cfg.n_clusters)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();

    // Round-robin over a shuffled order keeps cluster sizes within one of each other.
    let mut order: Vec<usize> = (0..cfg.n_items).collect();
    order.shuffle(&mut rng);
    let mut cluster_of = vec![0u32; cfg.n_items];
    for (slot, &item) in order.iter().enumerate() {
        cluster_of[item] = (slot % cfg.n_clusters) as u32;
    }

    let items = (0..cfg.n_items)
        .map(|i| {
            let c = &centroids[cluster_of[i] as usize];
            let feat: Vec<f64> = c
                .iter()
                .map(|&mu| mu + cfg.noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            ItemContent {
                item: ItemId(i as u32),
                text_feat: feat[..cfg.d_text].to_vec(),
                image_feat: feat[cfg.d_text..].to_vec(),
                latent_cluster: cluster_of[i],
            }
        })
        .collect();

    Ok(ItemCorpus {
        n_clusters: cfg.n_clusters,
        d_text: cfg.d_text,
        d_image: cfg.d_image,
        items,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user: u32,
    pub user_feat: Vec<f64>,
    /// Generator-only distribution over latent clusters.
    pub affinity: Vec<f64>,
}

/// Input history for one instance, ordered oldest to most recent.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorSequence {
    pub user: u32,
    pub items: Vec<ItemId>,
}

impl BehaviorSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// The `m` most recent behaviours.
    pub fn recent(&self, m: usize) -> &[ItemId] {
        &self.items[self.items.len().saturating_sub(m)..]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub user: u32,
    pub ts: u64,
    pub sequence: BehaviorSequence,
    pub target: ItemId,
    pub labels: Vec<u8>,
}

impl TrainingInstance {
    /// True when at least one objective fired for the target.
    pub fn is_positive(&self) -> bool {
        self.labels.contains(&1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogConfig {
    pub n_users: usize,
    /// Events per user in the training window.
    pub events_per_user: usize,
    /// Events per user in the held-out future window.
    #[serde(default)]
    pub test_events: usize,
    pub n_tasks: usize,
    #[serde(default = "default_interests")]
    pub interests_per_user: usize,
    /// Probability that an event is drawn uniformly from the corpus instead of
    /// from the user's affinity.
    #[serde(default = "default_event_noise")]
    pub noise: f64,
    /// Per-objective label rates for affinity-matched items; cycled when
    /// `n_tasks` exceeds its length.
    #[serde(default = "default_label_rates")]
    pub label_rates: Vec<f64>,
    /// Label-rate multiplier for mismatched items.
    #[serde(default = "default_mismatch")]
    pub mismatch_factor: f64,
    #[serde(default = "default_d_user")]
    pub d_user: usize,
    /// Input sequences keep at most this many recent events.
    pub max_seq: usize,
}

fn default_interests() -> usize {
    3
}
fn default_event_noise() -> f64 {
    0.1
}
fn default_label_rates() -> Vec<f64> {
    vec![0.5, 0.3, 0.1]
}
fn default_mismatch() -> f64 {
    0.1
}
fn default_d_user() -> usize {
    8
}

impl Default for LogConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            events_per_user: 60,
            test_events: 20,
            n_tasks: 3,
            interests_per_user: default_interests(),
            noise: default_event_noise(),
            label_rates: default_label_rates(),
            mismatch_factor: default_mismatch(),
            d_user: default_d_user(),
            max_seq: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedLogs {
    pub users: Vec<UserProfile>,
    /// Training window, ordered by `(ts, user)`.
    pub train: Vec<TrainingInstance>,
    /// Held-out future window, ordered by `(ts, user)`.
    pub test: Vec<TrainingInstance>,
}

fn generate_user<R: Rng>(
    user: u32,
    n_clusters: usize,
    cfg: &LogConfig,
    rng: &mut R,
) -> UserProfile {
    let k = cfg.interests_per_user.clamp(1, n_clusters);
    let mut clusters: Vec<usize> = (0..n_clusters).collect();
    clusters.shuffle(rng);
    let gamma = Gamma::new(1.0, 1.0).expect("valid gamma");
    let mut affinity = vec![0.0; n_clusters];
    for &c in &clusters[..k] {
        affinity[c] = gamma.sample(rng) + 1e-3;
    }
    let total: f64 = affinity.iter().sum();
    affinity.iter_mut().for_each(|a| *a /= total);
    let user_feat = (0..cfg.d_user).map(|_| rng.sample(StandardNormal)).collect();
    UserProfile {
        user,
        user_feat,
        affinity,
    }
}

fn sample_weighted<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let mut x: f64 = rng.random::<f64>();
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    // Rounding leftovers land on the last positive weight.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Synthesises users and their behaviour streams.
///
/// Every event becomes one instance whose input sequence is the user's full
/// history before it, truncated to `max_seq` most recent events.
pub fn generate_logs(corpus: &ItemCorpus, cfg: &LogConfig, seed: u64) -> Result<GeneratedLogs> {
    if corpus.is_empty() {
        return Err(Error::Config("cannot generate logs for an empty corpus".into()));
    }
    if cfg.n_tasks < 1 {
        return Err(Error::Config("n_tasks must be >= 1".into()));
    }
    if cfg.label_rates.is_empty() || cfg.label_rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::Config("label_rates must be non-empty probabilities".into()));
    }
    if !(0.0..=1.0).contains(&cfg.noise) || !(0.0..=1.0).contains(&cfg.mismatch_factor) {
        return Err(Error::Config("noise and mismatch_factor must be in [0, 1]".into()));
    }
    if cfg.max_seq == 0 {
        return Err(Error::Config("max_seq must be >= 1".into()));
    }
    let members = corpus.cluster_members();
    let mut users = Vec::with_capacity(cfg.n_users);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let total_events = cfg.events_per_user + cfg.test_events;

    for u in 0..cfg.n_users {
        let mut rng = seed::rng(seed, 0x10_0000 + u as u64);
        let profile = generate_user(u as u32, corpus.n_clusters, cfg, &mut rng);
        let mut history: Vec<ItemId> = Vec::with_capacity(total_events);
        for step in 0..total_events {
            let item = if rng.random::<f64>() < cfg.noise {
                ItemId(rng.random_range(0..corpus.len()) as u32)
            } else {
                let c = sample_weighted(&profile.affinity, &mut rng);
                let pool = &members[c];
                pool[rng.random_range(0..pool.len())]
            };
            let matched = profile.affinity[corpus.cluster_of(item) as usize] > 0.0;
            let labels = (0..cfg.n_tasks)
                .map(|t| {
                    let base = cfg.label_rates[t % cfg.label_rates.len()];
                    let rate = if matched { base } else { base * cfg.mismatch_factor };
                    u8::from(rng.random::<f64>() < rate)
                })
                .collect();
            let ts = step as u64 * 1000 + rng.random_range(0..1000u64);
            let start = history.len().saturating_sub(cfg.max_seq);
            let inst = TrainingInstance {
                user: u as u32,
                ts,
                sequence: BehaviorSequence {
                    user: u as u32,
                    items: history[start..].to_vec(),
                },
                target: item,
                labels,
            };
            if step < cfg.events_per_user {
                train.push(inst);
            } else {
                test.push(inst);
            }
            history.push(item);
        }
        users.push(profile);
    }
    train.sort_by_key(|i| (i.ts, i.user));
    test.sort_by_key(|i| (i.ts, i.user));
    Ok(GeneratedLogs { users, train, test })
}

/// Expected layout of a behaviour-log file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LogSchema {
    /// Required label count; `None` accepts whatever the header declares.
    pub n_tasks: Option<usize>,
    /// When set, item ids at or above this bound count as malformed.
    pub n_items: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub instances: Vec<TrainingInstance>,
    pub n_tasks: usize,
    pub malformed: usize,
    pub total_lines: usize,
}

pub const LOG_COLUMNS: [&str; 5] = ["user_id", "ts", "target_item", "labels", "seq_item_ids"];

fn header_line(n_tasks: usize) -> String {
    format!("user_id,ts,target_item,labels:{n_tasks},seq_item_ids")
}

/// Writes instances in the log format. `comment`, when given, is emitted as a
/// leading `#` line (used for config echo).
pub fn write_logs(
    path: &Path,
    instances: &[TrainingInstance],
    n_tasks: usize,
    comment: Option<&str>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(w, "# {line}").map_err(io)?;
        }
    }
    writeln!(w, "{}", header_line(n_tasks)).map_err(io)?;
    let mut line = String::new();
    for inst in instances {
        if inst.labels.len() != n_tasks {
            return Err(Error::shape(n_tasks, inst.labels.len()));
        }
        line.clear();
        use std::fmt::Write as _;
        let _ = write!(line, "{},{},{}", inst.user, inst.ts, inst.target);
        for l in &inst.labels {
            let _ = write!(line, ",{l}");
        }
        line.push(',');
        for (k, it) in inst.sequence.items.iter().enumerate() {
            if k > 0 {
                line.push(';');
            }
            let _ = write!(line, "{it}");
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn parse_header(line: &str) -> Option<usize> {
    let cols: Vec<&str> = line.split(',').map(str::trim).collect();
    if cols.len() != 5 || cols[0] != "user_id" || cols[1] != "ts" || cols[2] != "target_item" {
        return None;
    }
    if cols[4] != "seq_item_ids" {
        return None;
    }
    cols[3].strip_prefix("labels:")?.parse().ok().filter(|&t| t >= 1)
}

fn parse_line(line: &str, n_tasks: usize, n_items: Option<usize>) -> Option<TrainingInstance> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 4 + n_tasks {
        return None;
    }
    let user: u32 = fields[0].trim().parse().ok()?;
    let ts: u64 = fields[1].trim().parse().ok()?;
    let item_ok = |id: u32| n_items.is_none_or(|n| (id as usize) < n);
    let target: u32 = fields[2].trim().parse().ok().filter(|&id| item_ok(id))?;
    let labels = fields[3..3 + n_tasks]
        .iter()
        .map(|f| match f.trim() {
            "0" => Some(0u8),
            "1" => Some(1u8),
            _ => None,
        })
        .collect::<Option<Vec<u8>>>()?;
    let seq_field = fields[3 + n_tasks].trim();
    let items = if seq_field.is_empty() {
        Vec::new()
    } else {
        seq_field
            .split(';')
            .map(|s| s.trim().parse::<u32>().ok().filter(|&id| item_ok(id)).map(ItemId))
            .collect::<Option<Vec<_>>>()?
    };
    Some(TrainingInstance {
        user,
        ts,
        sequence: BehaviorSequence { user, items },
        target: ItemId(target),
        labels,
    })
}

/// Reads a behaviour log, skipping (and counting) malformed lines.
///
/// Fails when more than 1% of the data lines are malformed.
pub fn ingest_logs(path: &Path, schema: LogSchema) -> Result<IngestReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut n_tasks: Option<usize> = None;
    let mut report = IngestReport::default();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let Some(t) = n_tasks else {
            let t = parse_header(&line)
                .ok_or_else(|| Error::Format(format!("bad log header: {line:?}")))?;
            if let Some(expected) = schema.n_tasks {
                if expected != t {
                    return Err(Error::shape(expected, t));
                }
            }
            n_tasks = Some(t);
            continue;
        };
        report.total_lines += 1;
        match parse_line(&line, t, schema.n_items) {
            Some(inst) => report.instances.push(inst),
            None => report.malformed += 1,
        }
    }
    report.n_tasks = n_tasks.or(schema.n_tasks).unwrap_or(0);
    if report.malformed * 100 > report.total_lines {
        return Err(Error::Ingestion {
            malformed: report.malformed,
            total: report.total_lines,
        });
    }
    if report.malformed > 0 {
        log::warn!(
            "{}: skipped {} malformed of {} lines",
            path.display(),
            report.malformed,
            report.total_lines
        );
    }
    Ok(report)
}
