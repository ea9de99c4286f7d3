//! Experiment drivers.
//!
//! A suite is a set of synthetic heads, each with training prompts (used to
//! fit partitions and query models) and held-out evaluation prompts. Drivers
//! return typed rows; [`Csv`] renders them with a leading schema line.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::attention::{
    attention_span_fraction, bucket_mass, full_attention, restricted_attention, sparse_attention, AttnResult, DenseWindow,
    Router, SparseAttnConfig, SparseStore,
};
use crate::baselines::{random_sample_select, KdeformerIndex, LshEnsemble, ReformerIndex};
use crate::error::{Result, SaapError};
use crate::partition::{
    bucket_balance_deviation, kmeans_train_traced, relative_size_deviation, top_k_desc, KeyAssignment, KmeansReport, Partition,
};
use crate::qmodel::{attention_target, sample_long_range, train_step_on, QModel, TrainerState};
use crate::rng::SeededRng;
use crate::synth::{generate_ood_queries, generate_prompt, HeadSpec, SyntheticPrompt};
use crate::tensor::{Matrix, TensorBlock};

/// Key-selection strategy under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Kmeans,
    KmeansRoped,
    Saap,
    Streaming,
    MagicPig,
    Kdeformer,
    Reformer,
    Random,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Kmeans,
        Method::KmeansRoped,
        Method::Saap,
        Method::Streaming,
        Method::MagicPig,
        Method::Kdeformer,
        Method::Reformer,
        Method::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Kmeans => "kmeans",
            Method::KmeansRoped => "kmeans_roped",
            Method::Saap => "saap",
            Method::Streaming => "streaming",
            Method::MagicPig => "magicpig",
            Method::Kdeformer => "kdeformer",
            Method::Reformer => "reformer",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = SaapError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| SaapError::invalid(format!("unknown method {s:?}")))
    }
}

/// How a bucket set is chosen for a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Assigner {
    /// Nearest centroid, roped keys and queries.
    CentroidRoped,
    /// Nearest centroid, de-roped keys and queries.
    CentroidDeroped,
    /// Trained query model over the de-roped partition.
    QModel,
}

impl Assigner {
    pub fn name(self) -> &'static str {
        match self {
            Assigner::CentroidRoped => "centroid_roped",
            Assigner::CentroidDeroped => "centroid_deroped",
            Assigner::QModel => "qmodel",
        }
    }
}

/// Which frame keys are clustered in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyFrame {
    Deroped,
    Roped,
}

// ---------------------------------------------------------------------------
// CSV

/// Shortest round-tripping decimal, switching to exponent notation for very
/// small or very large magnitudes.
pub fn real(x: f64) -> String {
    if x != 0.0 && x.is_finite() && !(1e-4..1e15).contains(&x.abs()) {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

/// A table with a schema tag and a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Csv {
    pub schema: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(schema: &str, header: &[&str]) -> Self {
        Self { schema: schema.to_string(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }
}

impl fmt::Display for Csv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "#schema={}", self.schema)?;
        writeln!(f, "{}", self.header.join(","))?;
        for r in &self.rows {
            writeln!(f, "{}", r.join(","))?;
        }
        Ok(())
    }
}

pub const MSE_SCHEMA: &str = "saap.mse_selectivity.v1";
pub const MSE_HEADER: [&str; 4] = ["method", "param", "selectivity", "mse"];
pub const PROBE_SCHEMA: &str = "saap.probe_sweep.v1";
pub const PROBE_HEADER: [&str; 5] = ["C", "ell", "selectivity", "coverage", "max_visited_bucket"];
pub const ASSIGN_SCHEMA: &str = "saap.assignment_comparison.v1";
pub const ASSIGN_HEADER: [&str; 3] = ["assigner", "ell", "coverage"];
pub const SPAN_SCHEMA: &str = "saap.attention_span.v1";
pub const SPAN_HEADER: [&str; 3] = ["head", "k", "span_fraction"];
pub const BALANCE_SCHEMA: &str = "saap.bucket_balance.v1";
pub const BALANCE_HEADER: [&str; 4] = ["head", "regime", "mean_deviation", "std_deviation"];
pub const OVERLAP_SCHEMA: &str = "saap.assignment_overlap.v1";
pub const OVERLAP_HEADER: [&str; 4] = ["head", "shift", "tv_distance", "top5pct_query_share"];

// ---------------------------------------------------------------------------
// Suites and artifacts

/// Shape of a synthetic suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub base: HeadSpec,
    pub n_heads: usize,
    pub train_prompts: usize,
    pub eval_prompts: usize,
    pub n_keys: usize,
    pub n_queries: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { base: HeadSpec::default(), n_heads: 4, train_prompts: 8, eval_prompts: 4, n_keys: 16384, n_queries: 512, seed: 0 }
    }
}

impl SuiteConfig {
    /// Spec of head `h`; geometry depends on the suite seed and `h`.
    pub fn head_spec(&self, h: usize) -> HeadSpec {
        self.base.clone().with_seed(self.seed.wrapping_mul(1_000_003).wrapping_add(self.base.seed).wrapping_add(h as u64))
    }
}

/// Prompts of one head.
#[derive(Debug, Clone)]
pub struct HeadData {
    pub spec: HeadSpec,
    pub train: Vec<SyntheticPrompt>,
    pub eval: Vec<SyntheticPrompt>,
}

pub fn generate_head(spec: &HeadSpec, cfg: &SuiteConfig) -> Result<HeadData> {
    let gen = |p: usize| generate_prompt(&spec.clone().with_prompt(p as u64), cfg.n_keys, cfg.n_queries);
    let train = (0..cfg.train_prompts).map(gen).collect::<Result<Vec<_>>>()?;
    let eval = (cfg.train_prompts..cfg.train_prompts + cfg.eval_prompts).map(gen).collect::<Result<Vec<_>>>()?;
    Ok(HeadData { spec: spec.clone(), train, eval })
}

pub fn generate_suite(cfg: &SuiteConfig) -> Result<Vec<HeadData>> {
    (0..cfg.n_heads).map(|h| generate_head(&cfg.head_spec(h), cfg)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansConfig {
    pub c: usize,
    pub iters: usize,
    /// Cap on training points per centroid; larger pools are subsampled.
    pub max_points_per_centroid: usize,
    pub sink_count: usize,
    pub seed: u64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self { c: 256, iters: 10, max_points_per_centroid: 256, sink_count: 1, seed: 0 }
    }
}

/// Pools non-sink keys of `prompts` in the chosen frame and clusters them.
pub fn train_partition(prompts: &[SyntheticPrompt], cfg: &KmeansConfig, frame: KeyFrame) -> Result<(Partition, KmeansReport)> {
    if prompts.is_empty() {
        return Err(SaapError::Empty("training prompts".into()));
    }
    let mut rng = SeededRng::new(cfg.seed).fork(frame as u64);
    let cap = cfg.max_points_per_centroid.saturating_mul(cfg.c).max(cfg.c);
    let per_prompt = cap.div_ceil(prompts.len());
    let mut blocks = Vec::with_capacity(prompts.len());
    for p in prompts {
        let keys = match frame {
            KeyFrame::Deroped => &p.keys_deroped,
            KeyFrame::Roped => &p.keys_roped,
        };
        let start = cfg.sink_count.min(keys.rows());
        let avail = keys.rows() - start;
        let take = per_prompt.min(avail);
        let mut ids: Vec<usize> = rng.sample_indices(avail, take).into_iter().map(|i| i + start).collect();
        ids.sort_unstable();
        blocks.push(keys.select_rows(&ids));
    }
    let pooled = TensorBlock::concat(&blocks.iter().collect::<Vec<_>>())?;
    kmeans_train_traced(&pooled, cfg.c, cfg.iters, &mut rng)
}

/// Indexes one prompt under `partition`, assigning keys in `frame`.
pub fn build_store(prompt: &SyntheticPrompt, partition: &Partition, frame: KeyFrame, sink_count: usize) -> Result<SparseStore> {
    let assign_keys = match frame {
        KeyFrame::Deroped => &prompt.keys_deroped,
        KeyFrame::Roped => &prompt.keys_roped,
    };
    SparseStore::build(prompt.keys_roped.clone(), prompt.values.clone(), partition.clone(), assign_keys, sink_count)
}

/// Store over random centroids with perfectly balanced buckets: key `i` of
/// the shuffled non-sink ids goes to bucket `i mod C`.
pub fn balanced_store(keys_roped: &TensorBlock, values: &TensorBlock, c: usize, sink_count: usize, rng: &mut SeededRng) -> Result<SparseStore> {
    let d = keys_roped.dim();
    let dirs: Vec<f64> = (0..c).flat_map(|_| rng.unit_vector(d)).collect();
    let partition = Partition::from_directions(&TensorBlock::from_f64(c, d, &dirs)?)?;
    let n = keys_roped.rows();
    let sink_count = sink_count.min(n);
    let mut order: Vec<usize> = (0..n - sink_count).collect();
    rng.shuffle(&mut order);
    let mut bucket_of = vec![0u32; n - sink_count];
    for (slot, &i) in order.iter().enumerate() {
        bucket_of[i] = (slot % c) as u32;
    }
    let assignment = KeyAssignment { bucket_of, first_id: sink_count, zero_keys: 0 };
    SparseStore::from_assignment(keys_roped.clone(), values.clone(), partition, &assignment)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub long_range_threshold: usize,
    /// Keys in this window are left out of the targets.
    pub dense: DenseWindow,
    pub seed: u64,
}

impl Default for QTrainConfig {
    fn default() -> Self {
        Self { hidden: 1024, lr: 1e-5, epochs: 10, batch_size: 1000, long_range_threshold: 1024, dense: DenseWindow::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTrainReport {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub retained_queries: usize,
    pub total_queries: usize,
}

/// Retained de-roped queries and their bucket-mass targets for one prompt.
pub fn qmodel_examples(
    prompt: &SyntheticPrompt,
    partition: &Partition,
    threshold: usize,
    dense: DenseWindow,
) -> Result<(TensorBlock, Matrix)> {
    let n = prompt.len();
    let sink = dense.sink_count.max(1).min(n);
    let end = if dense.covers(n) { n } else { n - dense.recent_count };
    if end <= sink {
        return Err(SaapError::invalid("no keys outside the dense window"));
    }
    // top-1 search skips the sink, which every query attends
    let keys = prompt.keys_roped.slice_rows(sink, n);
    let key_pos: Vec<usize> = prompt.positions[sink..n].to_vec();
    let probs = crate::qmodel::attention_probs(&prompt.queries_roped, &keys)?;
    let kept = sample_long_range(&prompt.query_positions, &key_pos, &probs, threshold)?;
    drop(probs);
    let q_roped = prompt.queries_roped.select_rows(&kept);
    let target_keys = prompt.keys_roped.slice_rows(sink, end);
    let assignment = partition.assign_block(&prompt.keys_deroped.slice_rows(sink, end), sink)?;
    let target = attention_target(&q_roped, &target_keys, &assignment, partition.n_buckets())?;
    Ok((prompt.queries_deroped.select_rows(&kept), target))
}

/// Trains a query model on the long-range queries of `prompts`; each batch
/// comes from a single prompt.
pub fn train_qmodel(prompts: &[SyntheticPrompt], partition: &Partition, cfg: &QTrainConfig) -> Result<(QModel, QTrainReport)> {
    let mut examples = Vec::with_capacity(prompts.len());
    let mut total = 0;
    for p in prompts {
        total += p.n_queries();
        let (q, t) = qmodel_examples(p, partition, cfg.long_range_threshold, cfg.dense)?;
        if q.rows() >= 2 {
            examples.push((q, t));
        }
    }
    let retained = examples.iter().map(|e| e.0.rows()).sum();
    if examples.is_empty() {
        return Err(SaapError::Empty("no prompt has two or more long-range queries".into()));
    }
    let mut rng = SeededRng::new(cfg.seed).fork(7);
    let d = examples[0].0.dim();
    let mut model = QModel::new(d, cfg.hidden, partition.n_buckets(), &mut rng)?;
    let mut state = TrainerState::new(&model, cfg.lr);
    let bs = cfg.batch_size.max(2);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        rng.shuffle(&mut order);
        let (mut sum, mut count) = (0.0, 0usize);
        for &e in &order {
            let (q, t) = &examples[e];
            let mut rows: Vec<usize> = (0..q.rows()).collect();
            rng.shuffle(&mut rows);
            for chunk in rows.chunks(bs) {
                if chunk.len() < 2 {
                    continue;
                }
                let tq = q.select_rows(chunk);
                let tt = Matrix::from_rows(&chunk.iter().map(|&i| t.row(i)).collect::<Vec<_>>())?;
                sum += train_step_on(&mut model, &mut state, &tq, &tt)?;
                count += 1;
            }
        }
        epoch_losses.push(if count > 0 { sum / count as f64 } else { f64::NAN });
    }
    Ok((model, QTrainReport { epoch_losses, retained_queries: retained, total_queries: total }))
}

/// Trained artifacts of one head.
#[derive(Debug, Clone)]
pub struct HeadArtifacts {
    pub data: HeadData,
    pub partition: Partition,
    pub partition_roped: Option<Partition>,
    pub qmodel: Option<QModel>,
}

impl HeadArtifacts {
    pub fn train(data: HeadData, kmeans: &KmeansConfig, roped: bool, qtrain: Option<&QTrainConfig>) -> Result<Self> {
        let (partition, _) = train_partition(&data.train, kmeans, KeyFrame::Deroped)?;
        let partition_roped = if roped { Some(train_partition(&data.train, kmeans, KeyFrame::Roped)?.0) } else { None };
        let qmodel = match qtrain {
            Some(cfg) => Some(train_qmodel(&data.train, &partition, cfg)?.0),
            None => None,
        };
        Ok(Self { data, partition, partition_roped, qmodel })
    }
}

// ---------------------------------------------------------------------------
// Experiment configuration

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Probe counts for partition methods.
    pub ells: Vec<usize>,
    /// Sampled fractions of the non-dense keys for random sampling.
    pub fractions: Vec<f64>,
    /// Bin counts for the sorted-bucket hashing methods.
    pub bins: Vec<usize>,
    /// `(tables, bits)` pairs for multi-table hashing.
    pub lsh: Vec<(usize, usize)>,
    pub lsh_threshold: usize,
    /// Recent-window sizes for the streaming method.
    pub windows: Vec<usize>,
    pub hash_bits: usize,
    pub reformer_buckets: usize,
    pub reformer_rounds: usize,
    pub dense: DenseWindow,
    pub group_size: usize,
    pub block_size: usize,
    pub max_queries: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            ells: vec![1, 2, 4, 8, 16, 32, 64],
            fractions: vec![0.01, 0.02, 0.04, 0.08, 0.16, 0.32],
            bins: vec![4, 8, 16, 32, 64],
            lsh: vec![(20, 8), (50, 10), (100, 12), (200, 14)],
            lsh_threshold: 2,
            windows: vec![64, 256, 1024, 2047],
            hash_bits: 16,
            reformer_buckets: 64,
            reformer_rounds: 1,
            dense: DenseWindow::new(1, 0),
            group_size: 1,
            block_size: 128,
            max_queries: 128,
            repetitions: 1,
            seed: 0,
        }
    }

    /// Checks that the parameters the method needs are present and in range.
    pub fn validate(&self, c: usize) -> Result<()> {
        let bad = |msg: String| Err(SaapError::invalid(format!("{}: {msg}", self.method)));
        if self.group_size == 0 || self.block_size == 0 || self.repetitions == 0 || self.max_queries == 0 {
            return bad("group_size, block_size, repetitions and max_queries must be positive".into());
        }
        match self.method {
            Method::Kmeans | Method::KmeansRoped | Method::Saap => {
                if self.ells.is_empty() {
                    return bad("needs at least one ell".into());
                }
                if let Some(e) = self.ells.iter().find(|&&e| e > c) {
                    return bad(format!("ell = {e} exceeds C = {c}"));
                }
            }
            Method::Streaming => {
                if self.windows.is_empty() {
                    return bad("needs at least one window size".into());
                }
            }
            Method::Random => {
                if self.fractions.is_empty() || self.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
                    return bad("fractions must be non-empty and within [0, 1]".into());
                }
            }
            Method::Kdeformer | Method::Reformer => {
                if self.bins.is_empty() || self.bins.contains(&0) {
                    return bad("bin counts must be non-empty and positive".into());
                }
                if self.method == Method::Kdeformer && !(1..=63).contains(&self.hash_bits) {
                    return bad(format!("hash_bits = {} outside 1..=63", self.hash_bits));
                }
                if self.method == Method::Reformer && (self.reformer_buckets == 0 || self.reformer_rounds == 0) {
                    return bad("reformer_buckets and reformer_rounds must be positive".into());
                }
            }
            Method::MagicPig => {
                if self.lsh.is_empty() {
                    return bad("needs at least one (tables, bits) pair".into());
                }
                if let Some(&(l, r)) = self.lsh.iter().find(|&&(l, r)| l < self.lsh_threshold || !(1..=63).contains(&r)) {
                    return bad(format!("invalid (tables, bits) = ({l}, {r}) for threshold {}", self.lsh_threshold));
                }
            }
        }
        Ok(())
    }

    /// Sets a field from a config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            v.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse::<T>().map_err(|_| SaapError::invalid(format!("{key}: cannot parse {s:?}"))))
                .collect()
        }
        fn one<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse::<T>().map_err(|_| SaapError::invalid(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "method" => self.method = value.trim().parse()?,
            "ells" | "ell" => self.ells = list(key, value)?,
            "fractions" => self.fractions = list(key, value)?,
            "bins" => self.bins = list(key, value)?,
            "lsh" => {
                self.lsh = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|pair| {
                        let (l, r) = pair.trim().split_once('x').ok_or_else(|| SaapError::invalid(format!("lsh: expected LxR, got {pair:?}")))?;
                        Ok((one(key, l)?, one(key, r)?))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            "lsh_threshold" => self.lsh_threshold = one(key, value)?,
            "windows" => self.windows = list(key, value)?,
            "hash_bits" => self.hash_bits = one(key, value)?,
            "reformer_buckets" => self.reformer_buckets = one(key, value)?,
            "reformer_rounds" => self.reformer_rounds = one(key, value)?,
            "sink" => self.dense.sink_count = one(key, value)?,
            "recent" => self.dense.recent_count = one(key, value)?,
            "group_size" => self.group_size = one(key, value)?,
            "block_size" => self.block_size = one(key, value)?,
            "max_queries" => self.max_queries = one(key, value)?,
            "repetitions" => self.repetitions = one(key, value)?,
            "seed" => self.seed = one(key, value)?,
            _ => return Err(SaapError::invalid(format!("unknown experiment parameter {key:?}"))),
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// MSE vs selectivity

#[derive(Debug, Clone, PartialEq)]
pub struct MseRow {
    pub method: Method,
    pub param: String,
    pub selectivity: f64,
    pub mse: f64,
}

/// Running mean of selectivity and MSE for one parameter point.
#[derive(Default, Clone)]
struct Acc {
    sel: f64,
    mse: f64,
    n: usize,
}

impl Acc {
    fn add(&mut self, sel: f64, mse: f64) {
        self.sel += sel;
        self.mse += mse;
        self.n += 1;
    }
}

fn row_mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

fn union_with(mut ids: Vec<usize>, dense: &[usize]) -> Vec<usize> {
    ids.extend_from_slice(dense);
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Query groups of consecutive rows, `max_queries` rows at most.
fn groups(n_q: usize, g: usize, max_queries: usize) -> Vec<Vec<usize>> {
    let n = n_q.min(max_queries);
    (0..n).collect::<Vec<_>>().chunks(g).map(|c| c.to_vec()).collect()
}

/// MSE and selectivity of one method over every head and evaluation prompt,
/// averaged per parameter point; rows ordered by selectivity.
pub fn run_mse_selectivity(cfg: &ExperimentConfig, heads: &[HeadArtifacts]) -> Result<Vec<MseRow>> {
    let c = heads.first().map_or(0, |h| h.partition.n_buckets());
    cfg.validate(c)?;
    let params: Vec<String> = match cfg.method {
        Method::Kmeans | Method::KmeansRoped | Method::Saap => cfg.ells.iter().map(|e| e.to_string()).collect(),
        Method::Streaming => cfg.windows.iter().map(|w| w.to_string()).collect(),
        Method::Random => cfg.fractions.iter().map(|f| f.to_string()).collect(),
        Method::Kdeformer | Method::Reformer => cfg.bins.iter().map(|b| b.to_string()).collect(),
        Method::MagicPig => cfg.lsh.iter().map(|(l, r)| format!("{l}x{r}")).collect(),
    };
    let mut accs = vec![Acc::default(); params.len()];
    for (h, head) in heads.iter().enumerate() {
        for (p, prompt) in head.data.eval.iter().enumerate() {
            let mut rng = SeededRng::new(cfg.seed).fork((h * 10_000 + p) as u64);
            mse_one_prompt(cfg, head, prompt, &mut rng, &mut accs)?;
        }
    }
    let mut rows: Vec<MseRow> = params
        .into_iter()
        .zip(accs)
        .filter(|(_, a)| a.n > 0)
        .map(|(param, a)| MseRow { method: cfg.method, param, selectivity: a.sel / a.n as f64, mse: a.mse / a.n as f64 })
        .collect();
    rows.sort_by(|a, b| a.selectivity.total_cmp(&b.selectivity).then_with(|| a.param.cmp(&b.param)));
    Ok(rows)
}

fn mse_one_prompt(
    cfg: &ExperimentConfig,
    head: &HeadArtifacts,
    prompt: &SyntheticPrompt,
    rng: &mut SeededRng,
    accs: &mut [Acc],
) -> Result<()> {
    let n = prompt.len();
    let nf = n as f64;
    let gs = groups(prompt.n_queries(), cfg.group_size, cfg.max_queries);
    let all_q: Vec<usize> = gs.iter().flatten().copied().collect();
    let exact = full_attention(&prompt.queries_roped.select_rows(&all_q), &prompt.keys_roped, &prompt.values)?;
    let exact_row = |qid: usize| exact.row(all_q.iter().position(|&x| x == qid).expect("query evaluated"));
    let dense_ids = cfg.dense.ids(n);
    let sink = cfg.dense.sink_count.min(n);

    // error of one restricted selection for a whole group
    let score_group = |group: &[usize], ids: &[usize]| -> Result<(f64, f64)> {
        let q = prompt.queries_roped.select_rows(group);
        let (out, _) = restricted_attention(&q, &prompt.keys_roped, &prompt.values, ids)?;
        let err = group.iter().enumerate().map(|(r, &qid)| row_mse(out.row(r), exact_row(qid))).sum::<f64>() / group.len() as f64;
        Ok((ids.len() as f64 / nf, err))
    };
    let score_result = |group: &[usize], res: &AttnResult| -> f64 {
        group.iter().enumerate().map(|(r, &qid)| row_mse(res.output.row(r), exact_row(qid))).sum::<f64>() / group.len() as f64
    };

    match cfg.method {
        Method::Kmeans | Method::KmeansRoped | Method::Saap => {
            let (frame, partition) = match cfg.method {
                Method::KmeansRoped => (
                    KeyFrame::Roped,
                    head.partition_roped.as_ref().ok_or_else(|| SaapError::invalid("kmeans_roped needs a roped partition"))?,
                ),
                _ => (KeyFrame::Deroped, &head.partition),
            };
            let store = build_store(prompt, partition, frame, sink.max(1))?;
            let router = match cfg.method {
                Method::Saap => Router::QModel(head.qmodel.as_ref().ok_or_else(|| SaapError::invalid("saap needs a trained query model"))?),
                _ => Router::NearestCentroid,
            };
            for group in &gs {
                let q = prompt.queries_roped.select_rows(group);
                let route = match frame {
                    KeyFrame::Roped => q.clone(),
                    KeyFrame::Deroped => prompt.queries_deroped.select_rows(group),
                };
                for (k, &ell) in cfg.ells.iter().enumerate() {
                    let sc = SparseAttnConfig { ell, block_size: cfg.block_size, dense: cfg.dense };
                    let res = sparse_attention(&q, &route, &store, router, &sc)?;
                    accs[k].add(res.keys_scored as f64 / nf, score_result(group, &res));
                }
            }
        }
        Method::Streaming => {
            for group in &gs {
                for (k, &w) in cfg.windows.iter().enumerate() {
                    let ids = DenseWindow::new(cfg.dense.sink_count, w).ids(n);
                    let (s, e) = score_group(group, &ids)?;
                    accs[k].add(s, e);
                }
            }
        }
        Method::Random => {
            let pool: Vec<usize> = (0..n).filter(|&i| !cfg.dense.contains(i, n)).collect();
            for group in &gs {
                for _ in 0..cfg.repetitions {
                    for (k, &f) in cfg.fractions.iter().enumerate() {
                        let m = ((f * pool.len() as f64).round() as usize).min(pool.len());
                        let picked: Vec<usize> = random_sample_select(pool.len(), m, rng)?.into_iter().map(|i| pool[i]).collect();
                        let (s, e) = score_group(group, &union_with(picked, &dense_ids))?;
                        accs[k].add(s, e);
                    }
                }
            }
        }
        Method::Kdeformer => {
            for _ in 0..cfg.repetitions {
                for (k, &bins) in cfg.bins.iter().enumerate() {
                    let index = KdeformerIndex::build(&prompt.keys_roped, cfg.hash_bits, bins, rng)?;
                    for group in &gs {
                        let mut ids = Vec::new();
                        for &qid in group {
                            ids.extend(index.select(prompt.queries_roped.row(qid))?);
                        }
                        let (s, e) = score_group(group, &union_with(ids, &dense_ids))?;
                        accs[k].add(s, e);
                    }
                }
            }
        }
        Method::Reformer => {
            for _ in 0..cfg.repetitions {
                for (k, &bins) in cfg.bins.iter().enumerate() {
                    let bin_size = n.div_ceil(bins);
                    let index = ReformerIndex::build(&prompt.keys_roped, cfg.reformer_buckets, cfg.reformer_rounds, bin_size, rng)?;
                    for group in &gs {
                        let mut ids = Vec::new();
                        for &qid in group {
                            ids.extend(index.select(prompt.queries_roped.row(qid))?);
                        }
                        let (s, e) = score_group(group, &union_with(ids, &dense_ids))?;
                        accs[k].add(s, e);
                    }
                }
            }
        }
        Method::MagicPig => {
            for _ in 0..cfg.repetitions {
                for (k, &(l, r)) in cfg.lsh.iter().enumerate() {
                    let ens = LshEnsemble::build(&prompt.keys_roped, l, r, cfg.lsh_threshold, rng)?;
                    for group in &gs {
                        let mut ids = Vec::new();
                        for &qid in group {
                            ids.extend(ens.candidates(prompt.queries_roped.row(qid))?);
                        }
                        let (s, e) = score_group(group, &union_with(ids, &dense_ids))?;
                        accs[k].add(s, e);
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn mse_csv(rows: &[MseRow]) -> Csv {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.method.cmp(&b.method).then(a.selectivity.total_cmp(&b.selectivity)));
    let mut csv = Csv::new(MSE_SCHEMA, &MSE_HEADER);
    for r in sorted {
        csv.push(vec![r.method.to_string(), r.param, real(r.selectivity), real(r.mse)]);
    }
    csv
}

/// Log-log interpolation of a curve given as `(selectivity, mse)` points
/// sorted by selectivity. `None` outside the sampled range.
pub fn interpolate_loglog(curve: &[(f64, f64)], x: f64) -> Option<f64> {
    let i = curve.windows(2).position(|w| w[0].0 <= x && x <= w[1].0)?;
    let ((x0, y0), (x1, y1)) = (curve[i], curve[i + 1]);
    if x1 == x0 {
        return Some(y0.min(y1));
    }
    if y0 <= 0.0 || y1 <= 0.0 {
        let t = (x - x0) / (x1 - x0);
        return Some(y0 + t * (y1 - y0));
    }
    let t = (x.ln() - x0.ln()) / (x1.ln() - x0.ln());
    Some((y0.ln() + t * (y1.ln() - y0.ln())).exp())
}

// ---------------------------------------------------------------------------
// Probe sweep

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub c: usize,
    pub ell: usize,
    pub selectivity: f64,
    pub coverage: f64,
    pub max_visited_bucket: f64,
}

/// Selectivity, coverage and largest visited bucket for each `ell`, over the
/// query groups of `prompts` indexed in `stores`.
pub fn probe_sweep_stores(
    stores: &[(SparseStore, &TensorBlock, &TensorBlock)],
    router: Router<'_>,
    ells: &[usize],
    dense: DenseWindow,
    group_size: usize,
    max_queries: usize,
) -> Result<Vec<ProbeRow>> {
    let c = stores.first().map_or(0, |s| s.0.n_buckets());
    let mut sums = vec![(0.0, 0.0, 0.0, 0usize); ells.len()];
    for (store, q_roped, q_route) in stores {
        let n = store.len();
        for group in groups(q_roped.rows(), group_size.max(1), max_queries) {
            let q = q_roped.select_rows(&group);
            let r = q_route.select_rows(&group);
            let masses = group.iter().map(|&i| bucket_mass(q_roped.row(i), store, dense)).collect::<Result<Vec<_>>>()?;
            for (k, &ell) in ells.iter().enumerate() {
                let sc = SparseAttnConfig { ell, block_size: 128, dense };
                let res = sparse_attention(&q, &r, store, router, &sc)?;
                let cov = masses.iter().map(|m| res.buckets.iter().map(|&b| m[b]).sum::<f64>()).sum::<f64>() / group.len() as f64;
                let s = &mut sums[k];
                s.0 += res.keys_scored as f64 / n as f64;
                s.1 += cov;
                s.2 += res.max_visited_bucket as f64;
                s.3 += 1;
            }
        }
    }
    Ok(ells
        .iter()
        .zip(sums)
        .map(|(&ell, (s, cov, mx, cnt))| {
            let cnt = cnt.max(1) as f64;
            ProbeRow { c, ell, selectivity: s / cnt, coverage: cov / cnt, max_visited_bucket: mx / cnt }
        })
        .collect())
}

/// Trains a partition per `C` and sweeps `ells` over the evaluation prompts
/// with nearest-centroid routing on de-roped queries.
pub fn run_probe_sweep(
    heads: &[HeadData],
    cs: &[usize],
    ells: &[usize],
    kmeans: &KmeansConfig,
    dense: DenseWindow,
    group_size: usize,
    max_queries: usize,
) -> Result<Vec<ProbeRow>> {
    let mut rows = Vec::new();
    for &c in cs {
        let usable: Vec<usize> = ells.iter().copied().filter(|&e| e <= c).collect();
        let mut per_c: Vec<ProbeRow> = Vec::new();
        for head in heads {
            let (partition, _) = train_partition(&head.train, &KmeansConfig { c, ..kmeans.clone() }, KeyFrame::Deroped)?;
            let stores = head
                .eval
                .iter()
                .map(|p| Ok((build_store(p, &partition, KeyFrame::Deroped, dense.sink_count.max(1))?, &p.queries_roped, &p.queries_deroped)))
                .collect::<Result<Vec<_>>>()?;
            let r = probe_sweep_stores(&stores, Router::NearestCentroid, &usable, dense, group_size, max_queries)?;
            if per_c.is_empty() {
                per_c = r;
            } else {
                for (a, b) in per_c.iter_mut().zip(r) {
                    a.selectivity += b.selectivity;
                    a.coverage += b.coverage;
                    a.max_visited_bucket += b.max_visited_bucket;
                }
            }
        }
        let h = heads.len().max(1) as f64;
        for mut r in per_c {
            r.selectivity /= h;
            r.coverage /= h;
            r.max_visited_bucket /= h;
            rows.push(r);
        }
    }
    Ok(rows)
}

pub fn probe_csv(rows: &[ProbeRow]) -> Csv {
    let mut csv = Csv::new(PROBE_SCHEMA, &PROBE_HEADER);
    for r in rows {
        csv.push(vec![
            r.c.to_string(),
            r.ell.to_string(),
            real(r.selectivity),
            real(r.coverage),
            real(r.max_visited_bucket),
        ]);
    }
    csv
}

// ---------------------------------------------------------------------------
// Assigner comparison

/// Mean coverage of one assigner at one `ell` on one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRow {
    pub assigner: Assigner,
    pub ell: usize,
    pub head: usize,
    pub prompt: usize,
    pub coverage: f64,
}

/// Coverage of every available assigner at each `ell` on each evaluation
/// prompt. Roped routing needs `partition_roped`, the model route needs
/// `qmodel`.
pub fn assignment_coverages(heads: &[HeadArtifacts], ells: &[usize], dense: DenseWindow, max_queries: usize) -> Result<Vec<CoverageRow>> {
    let mut rows = Vec::new();
    for (h, head) in heads.iter().enumerate() {
        let c = head.partition.n_buckets();
        if let Some(e) = ells.iter().find(|&&e| e > c) {
            return Err(SaapError::invalid(format!("ell = {e} exceeds C = {c}")));
        }
        for (p, prompt) in head.data.eval.iter().enumerate() {
            let n_q = prompt.n_queries().min(max_queries);
            let store = build_store(prompt, &head.partition, KeyFrame::Deroped, dense.sink_count.max(1))?;
            let mut ranked: Vec<(Assigner, &SparseStore, Vec<Vec<usize>>)> = Vec::new();
            let centroid_rank = |store: &SparseStore, q: &TensorBlock| -> Vec<Vec<usize>> {
                (0..n_q).map(|i| top_k_desc(&store.partition.scores(&q.row_f64(i)), c)).collect()
            };
            ranked.push((Assigner::CentroidDeroped, &store, centroid_rank(&store, &prompt.queries_deroped)));
            let roped_store;
            if let Some(pr) = &head.partition_roped {
                roped_store = build_store(prompt, pr, KeyFrame::Roped, dense.sink_count.max(1))?;
                let r = centroid_rank(&roped_store, &prompt.queries_roped);
                ranked.push((Assigner::CentroidRoped, &roped_store, r));
            }
            if let Some(m) = &head.qmodel {
                let probs = m.forward(&prompt.queries_deroped.slice_rows(0, n_q), crate::qmodel::Mode::Eval)?;
                ranked.push((Assigner::QModel, &store, (0..n_q).map(|i| top_k_desc(probs.row(i), c)).collect()));
            }
            for (assigner, st, order) in ranked {
                let masses = (0..n_q).map(|i| bucket_mass(prompt.queries_roped.row(i), st, dense)).collect::<Result<Vec<_>>>()?;
                for &ell in ells {
                    let cov = masses.iter().zip(&order).map(|(m, o)| o[..ell].iter().map(|&b| m[b]).sum::<f64>()).sum::<f64>() / n_q as f64;
                    rows.push(CoverageRow { assigner, ell, head: h, prompt: p, coverage: cov });
                }
            }
        }
    }
    Ok(rows)
}

/// Per-assigner, per-`ell` means of [`assignment_coverages`].
pub fn run_assignment_comparison(heads: &[HeadArtifacts], ells: &[usize], dense: DenseWindow, max_queries: usize) -> Result<Csv> {
    let rows = assignment_coverages(heads, ells, dense, max_queries)?;
    let mut keys: Vec<(Assigner, usize)> = rows.iter().map(|r| (r.assigner, r.ell)).collect();
    keys.sort();
    keys.dedup();
    let mut csv = Csv::new(ASSIGN_SCHEMA, &ASSIGN_HEADER);
    for (a, ell) in keys {
        let sel: Vec<f64> = rows.iter().filter(|r| r.assigner == a && r.ell == ell).map(|r| r.coverage).collect();
        csv.push(vec![a.name().to_string(), ell.to_string(), real(sel.iter().sum::<f64>() / sel.len() as f64)]);
    }
    Ok(csv)
}

// ---------------------------------------------------------------------------
// Diagnostics

#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub span: Csv,
    pub balance: Csv,
    pub overlap: Csv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsConfig {
    pub span_k: usize,
    pub dense: DenseWindow,
    /// Keys per bucket-balance sample.
    pub sample_size: usize,
    pub repetitions: usize,
    pub shifts: Vec<f64>,
    pub n_ood_queries: usize,
    pub max_queries: usize,
    pub seed: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            span_k: 256,
            dense: DenseWindow::default(),
            sample_size: 4096,
            repetitions: 10,
            shifts: vec![0.0, 100.0, 1000.0],
            n_ood_queries: 2000,
            max_queries: 128,
            seed: 0,
        }
    }
}

/// Relative bucket-size deviation of key samples under three regimes:
/// positions uniform over one held-out prompt, a contiguous position range of
/// the same prompt, and keys pooled uniformly from the training prompts.
pub fn balance_samples(head: &HeadArtifacts, cfg: &DiagnosticsConfig) -> Result<Vec<(&'static str, Vec<f64>)>> {
    let mut rng = SeededRng::new(cfg.seed).fork(11);
    let m = cfg.sample_size;
    let mut uniform = Vec::new();
    let mut temporal = Vec::new();
    let mut training = Vec::new();
    let eval = head.data.eval.first().ok_or_else(|| SaapError::Empty("evaluation prompts".into()))?;
    let n = eval.len();
    if n <= m + 1 {
        return Err(SaapError::invalid(format!("sample size {m} needs prompts longer than {}", m + 1)));
    }
    for _ in 0..cfg.repetitions.max(2) {
        let mut ids: Vec<usize> = rng.sample_indices(n - 1, m).into_iter().map(|i| i + 1).collect();
        ids.sort_unstable();
        uniform.push(eval.keys_deroped.select_rows(&ids));
        let start = 1 + rng.below(n - m);
        temporal.push(eval.keys_deroped.slice_rows(start, start + m));
        let mut rows = Vec::with_capacity(m);
        for _ in 0..m {
            let p = &head.data.train[rng.below(head.data.train.len())];
            rows.push(p.keys_deroped.row(1 + rng.below(p.len() - 1)).to_vec());
        }
        training.push(TensorBlock::from_rows(&rows)?);
    }
    Ok(vec![
        ("uniform", bucket_balance_deviation(&head.partition, &uniform)?),
        ("temporal", bucket_balance_deviation(&head.partition, &temporal)?),
        ("training", bucket_balance_deviation(&head.partition, &training)?),
    ])
}

/// Total-variation distance between key and query bucket frequencies, and the
/// share of queries landing in the 5% most query-popular buckets.
pub fn assignment_overlap(partition: &Partition, keys: &TensorBlock, queries: &TensorBlock) -> Result<(f64, f64)> {
    let c = partition.n_buckets();
    let kf = partition.assign_block(keys, 0)?.bucket_sizes(c);
    let qf = partition.assign_block(queries, 0)?.bucket_sizes(c);
    let (kn, qn) = (keys.rows().max(1) as f64, queries.rows().max(1) as f64);
    let tv = 0.5 * kf.iter().zip(&qf).map(|(&a, &b)| (a as f64 / kn - b as f64 / qn).abs()).sum::<f64>();
    let mut sorted = qf.clone();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let top = (c as f64 * 0.05).ceil().max(1.0) as usize;
    let share = sorted[..top].iter().sum::<usize>() as f64 / qn;
    Ok((tv, share))
}

pub fn run_diagnostics(heads: &[HeadArtifacts], cfg: &DiagnosticsConfig) -> Result<Diagnostics> {
    let mut span = Csv::new(SPAN_SCHEMA, &SPAN_HEADER);
    let mut balance = Csv::new(BALANCE_SCHEMA, &BALANCE_HEADER);
    let mut overlap = Csv::new(OVERLAP_SCHEMA, &OVERLAP_HEADER);
    for (h, head) in heads.iter().enumerate() {
        let mut total = 0.0;
        for p in &head.data.eval {
            let q = p.queries_roped.slice_rows(0, p.n_queries().min(cfg.max_queries));
            total += attention_span_fraction(&q, &p.keys_roped, cfg.span_k, cfg.dense)?;
        }
        span.push(vec![h.to_string(), cfg.span_k.to_string(), real(total / head.data.eval.len().max(1) as f64)]);

        for (regime, devs) in balance_samples(head, cfg)? {
            let mean = devs.iter().sum::<f64>() / devs.len() as f64;
            let var = devs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (devs.len() as f64 - 1.0).max(1.0);
            balance.push(vec![h.to_string(), regime.to_string(), real(mean), real(var.sqrt())]);
        }

        let eval = &head.data.eval[0];
        let keys = eval.keys_deroped.slice_rows(1, eval.len());
        for &shift in &cfg.shifts {
            let q = generate_ood_queries(&head.data.spec, cfg.n_ood_queries, shift)?;
            let (tv, share) = assignment_overlap(&head.partition, &keys, &q)?;
            overlap.push(vec![h.to_string(), real(shift), real(tv), real(share)]);
        }
    }
    Ok(Diagnostics { span, balance, overlap })
}

/// Relative deviation of bucket sizes from an explicit assignment.
pub fn assignment_deviation(a: &KeyAssignment, c: usize) -> f64 {
    relative_size_deviation(&a.bucket_sizes(c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_round_trip() {
        for x in [0.0, 1.0, 0.125, 3.99e-29, -2.5e-7, 1e20, 0.000123] {
            assert_eq!(real(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(real(3.99e-29), "3.99e-29");
        assert_eq!(real(0.5), "0.5");
    }

    #[test]
    fn csv_layout() {
        let mut csv = Csv::new("x.v1", &["a", "b"]);
        csv.push(vec!["1".into(), "2".into()]);
        assert_eq!(csv.to_string(), "#schema=x.v1\na,b\n1,2\n");
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("lsh".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ExperimentConfig::new(Method::Kmeans);
        cfg.ells = vec![4, 300];
        assert!(cfg.validate(256).is_err());
        cfg.ells = vec![4];
        assert!(cfg.validate(256).is_ok());
        let mut cfg = ExperimentConfig::new(Method::Random);
        cfg.set("fractions", "0.1,1.5").unwrap();
        assert!(cfg.validate(256).is_err());
        let mut cfg = ExperimentConfig::new(Method::MagicPig);
        cfg.set("lsh", "1x8").unwrap();
        assert!(cfg.validate(256).is_err());
        cfg.set("lsh", "10x8,20x9").unwrap();
        assert_eq!(cfg.lsh, vec![(10, 8), (20, 9)]);
        assert!(cfg.set("nonsense", "1").is_err());
    }

    #[test]
    fn loglog_interpolation() {
        let curve = [(0.01, 1.0), (0.1, 0.1)];
        let y = interpolate_loglog(&curve, 0.0316227766).unwrap();
        assert!((y - 0.316227766).abs() < 1e-6);
        assert!(interpolate_loglog(&curve, 0.2).is_none());
    }
}
