//! Experiment runner: load or generate a workload, cluster it, evaluate a
//! method on every (layer, query head, step) against the full-attention
//! oracle, and aggregate the records.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use serde::Serialize;
use thiserror::Error;

use crate::clustering::{self, ClusterCountPolicy, ClusterError, ClusteredCache, DEFAULT_MAX_ITERS};
use crate::engine::{self, DoublePConfig, EngineError, HeadContext, DEFAULT_SINK, DEFAULT_WINDOW};
use crate::kvcache::{self, DumpError, KvCache, QueryTrace};
use crate::metrics::{self, ExperimentRecord, MetricsError};
use crate::par::{self, Execution};
use crate::workload::{self, WorkloadError, WorkloadSpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error("{}: {error}", path.display())]
    Input { path: PathBuf, error: DumpError },
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("usage: {0}")]
    Usage(String),
    #[error("serialization: {0}")]
    Serialize(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Input {
    Dump(PathBuf),
    Workload(WorkloadSpec),
}

/// Token budget of the token top-k baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenBudget {
    Fixed(usize),
    /// Per step, the exact top-p token count at the run's target mass.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Full,
    Doublep { p1: f64, p2: f64 },
    TokenTopk { k: TokenBudget },
    ClusterTopk { m: usize },
    TokenToppFixed { budget: usize, p: f64 },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Doublep { .. } => "doublep",
            Self::TokenTopk { k: TokenBudget::Fixed(_) } => "token_topk",
            Self::TokenTopk { k: TokenBudget::Adaptive } => "token_topk_adaptive",
            Self::ClusterTopk { .. } => "cluster_topk",
            Self::TokenToppFixed { .. } => "token_topp_fixed",
        }
    }

    pub fn needs_clusters(&self) -> bool {
        matches!(self, Self::Doublep { .. } | Self::ClusterTopk { .. })
    }
}

pub const METHOD_NAMES: [&str; 5] = ["full", "doublep", "token_topk", "cluster_topk", "token_topp_fixed"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub input: Input,
    pub method: Method,
    /// Mass a method's exact tokens must recover to avoid a violation.
    pub target_p: f64,
    pub clusters: ClusterCountPolicy,
    pub sink: usize,
    pub window: usize,
    /// Clustering seed.
    pub seed: u64,
    pub max_iters: usize,
}

impl RunConfig {
    pub fn new(input: Input, method: Method) -> Self {
        Self {
            input,
            method,
            target_p: 0.95,
            clusters: ClusterCountPolicy::default(),
            sink: DEFAULT_SINK,
            window: DEFAULT_WINDOW,
            seed: 0,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }

    fn prep_key(&self) -> String {
        serde_json::to_string(&(&self.input, &self.clusters, self.sink, self.window, self.seed, self.max_iters))
            .expect("config serializes")
    }
}

/// A loaded workload with its clustering built on first use.
pub struct Prepared {
    pub cache: KvCache,
    pub trace: QueryTrace,
    clusters: ClusterCountPolicy,
    sink: usize,
    window: usize,
    seed: u64,
    max_iters: usize,
    clustered: OnceLock<std::result::Result<ClusteredCache, ClusterError>>,
}

impl Prepared {
    pub fn load(config: &RunConfig) -> Result<Self> {
        let (cache, trace) = match &config.input {
            Input::Dump(path) => kvcache::read_dump(path).map_err(|error| ExperimentError::Input {
                path: path.clone(),
                error,
            })?,
            Input::Workload(spec) => workload::generate(spec)?,
        };
        Ok(Self::from_parts(cache, trace, config))
    }

    pub fn from_parts(cache: KvCache, trace: QueryTrace, config: &RunConfig) -> Self {
        Self {
            cache,
            trace,
            clusters: config.clusters,
            sink: config.sink,
            window: config.window,
            seed: config.seed,
            max_iters: config.max_iters,
            clustered: OnceLock::new(),
        }
    }

    pub fn clustered(&self) -> Result<&ClusteredCache> {
        self.clustered
            .get_or_init(|| {
                clustering::build_clustered_cache_with(
                    &self.cache,
                    self.clusters,
                    self.sink,
                    self.window,
                    self.seed,
                    self.max_iters,
                    Execution::default(),
                )
            })
            .as_ref()
            .map_err(|e| e.clone().into())
    }

    /// `(layer, query head, step)` in emission order.
    pub fn work_items(&self) -> Vec<(usize, usize, usize)> {
        let (l, h, s) = (self.trace.num_layers(), self.trace.num_query_heads(), self.trace.num_steps());
        (0..l)
            .flat_map(|layer| (0..h).flat_map(move |head| (0..s).map(move |step| (layer, head, step))))
            .collect()
    }

    pub fn query(&self, layer: usize, head: usize, step: usize) -> &[f32] {
        self.trace.query(step, layer, head)
    }

    /// Head context with clusters, sink and window.
    pub fn clustered_context(&self, layer: usize, head: usize) -> Result<HeadContext<'_>> {
        let kv = self.trace.kv_head_of(head);
        Ok(HeadContext::from_cache(&self.cache, self.clustered()?, layer, kv)?)
    }

    /// Head context over raw tokens only.
    pub fn token_context(&self, layer: usize, head: usize) -> Result<HeadContext<'_>> {
        let kv = self.trace.kv_head_of(head);
        Ok(HeadContext::new(
            self.cache.keys(layer, kv),
            self.cache.values(layer, kv),
            self.cache.head_dim(),
            &[],
            0..0,
            0..0,
        )?)
    }
}

fn blank_record(layer: usize, head: usize, step: usize, method: &Method) -> ExperimentRecord {
    ExperimentRecord {
        layer,
        head,
        step,
        method: method.name().to_string(),
        p1: None,
        p2: None,
        k: None,
        m: None,
        budget: None,
        clusters_total: 0,
        clusters_selected: 0,
        clusters_exact: 0,
        exact_tokens: 0,
        est_mass: None,
        recovered_mass: 0.0,
        violation: false,
        rel_err: 0.0,
    }
}

/// Evaluate one work item.
pub fn evaluate(
    prep: &Prepared,
    config: &RunConfig,
    (layer, head, step): (usize, usize, usize),
) -> Result<ExperimentRecord> {
    let q = prep.query(layer, head, step);
    let tokens = prep.token_context(layer, head)?;
    let full = engine::full_attention(q, &tokens)?;
    let weights = tokens.attention_weights(q)?;
    let mut rec = blank_record(layer, head, step, &config.method);
    let (output, exact_tokens) = match config.method {
        Method::Full => {
            let all: Vec<usize> = (0..tokens.context_len()).collect();
            (full.clone(), all)
        }
        Method::Doublep { p1, p2 } => {
            let ctx = prep.clustered_context(layer, head)?;
            let cfg = DoublePConfig {
                p1,
                p2,
                sink: config.sink,
                window: config.window,
                clusters: config.clusters,
            };
            let r = engine::decode_step(q, &ctx, &cfg)?;
            rec.p1 = Some(p1);
            rec.p2 = Some(p2);
            rec.clusters_total = r.plan.num_clusters;
            rec.clusters_selected = r.plan.stage1.len();
            rec.clusters_exact = r.plan.exact_clusters.len();
            rec.est_mass = Some(r.plan.estimated_mass());
            (r.output, r.plan.exact_tokens)
        }
        Method::TokenTopk { k } => {
            let k = match k {
                TokenBudget::Fixed(k) => k,
                TokenBudget::Adaptive => engine::adaptive_token_budget(q, &tokens, config.target_p)?,
            };
            rec.k = Some(k);
            let b = engine::baseline_token_topk(q, &tokens, k)?;
            (b.attention, b.exact_tokens)
        }
        Method::ClusterTopk { m } => {
            let ctx = prep.clustered_context(layer, head)?;
            let (b, plan) = engine::baseline_cluster_topk(q, &ctx, m)?;
            rec.m = Some(m);
            rec.clusters_total = plan.num_clusters;
            rec.clusters_selected = plan.stage1.len();
            rec.clusters_exact = plan.exact_clusters.len();
            rec.est_mass = Some(plan.estimated_mass());
            (b.attention, b.exact_tokens)
        }
        Method::TokenToppFixed { budget, p } => {
            rec.budget = Some(budget);
            let b = engine::baseline_token_topp_fixed_budget(q, &tokens, budget, p)?;
            (b.attention, b.exact_tokens)
        }
    };
    rec.exact_tokens = exact_tokens.len();
    rec.recovered_mass = metrics::recovered_mass(&exact_tokens, &weights);
    rec.violation = metrics::is_violation(rec.recovered_mass, config.target_p);
    rec.rel_err = metrics::output_error(&output, &full)?;
    Ok(rec)
}

fn validate(config: &RunConfig) -> Result<()> {
    if !(config.target_p > 0.0 && config.target_p <= 1.0) {
        return Err(ExperimentError::Usage(format!("target p {} outside (0, 1]", config.target_p)));
    }
    Ok(())
}

pub fn run_prepared(prep: &Prepared, config: &RunConfig, exec: Execution) -> Result<Vec<ExperimentRecord>> {
    validate(config)?;
    if config.method.needs_clusters() {
        prep.clustered()?;
    }
    par::map(exec, &prep.work_items(), |&item| evaluate(prep, config, item))
        .into_iter()
        .collect()
}

/// One record per (layer, query head, step), in that order.
pub fn run(config: &RunConfig) -> Result<Vec<ExperimentRecord>> {
    let prep = Prepared::load(config)?;
    run_prepared(&prep, config, Execution::default())
}

/// Aggregate over one config's records.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub method: String,
    pub p1: Option<f64>,
    pub p2: Option<f64>,
    pub k: Option<usize>,
    pub m: Option<usize>,
    #[serde(rename = "B")]
    pub budget: Option<usize>,
    pub p: Option<f64>,
    pub target_p: f64,
    pub records: usize,
    pub mean_rel_err: f64,
    pub p50_rel_err: f64,
    pub p90_rel_err: f64,
    pub p99_rel_err: f64,
    pub max_rel_err: f64,
    pub mean_exact_tokens: f64,
    pub mean_recovered_mass: f64,
    pub min_est_mass: Option<f64>,
    pub violation_rate: f64,
}

pub fn aggregate(config: &RunConfig, records: &[ExperimentRecord]) -> Result<SweepRow> {
    let errs: Vec<f64> = records.iter().map(|r| r.rel_err).collect();
    let tokens: Vec<f64> = records.iter().map(|r| r.exact_tokens as f64).collect();
    let mass: Vec<f64> = records.iter().map(|r| r.recovered_mass).collect();
    let est = records.iter().filter_map(|r| r.est_mass).fold(None, |acc: Option<f64>, x| {
        Some(acc.map_or(x, |a| a.min(x)))
    });
    let (p1, p2, k, m, budget, p) = match config.method {
        Method::Full => (None, None, None, None, None, None),
        Method::Doublep { p1, p2 } => (Some(p1), Some(p2), None, None, None, None),
        Method::TokenTopk { k: TokenBudget::Fixed(k) } => (None, None, Some(k), None, None, None),
        Method::TokenTopk { k: TokenBudget::Adaptive } => (None, None, None, None, None, Some(config.target_p)),
        Method::ClusterTopk { m } => (None, None, None, Some(m), None, None),
        Method::TokenToppFixed { budget, p } => (None, None, None, None, Some(budget), Some(p)),
    };
    Ok(SweepRow {
        method: config.method.name().to_string(),
        p1,
        p2,
        k,
        m,
        budget,
        p,
        target_p: config.target_p,
        records: records.len(),
        mean_rel_err: metrics::mean(&errs),
        p50_rel_err: metrics::percentile(&errs, 0.5),
        p90_rel_err: metrics::percentile(&errs, 0.9),
        p99_rel_err: metrics::percentile(&errs, 0.99),
        max_rel_err: errs.iter().copied().fold(0.0, f64::max),
        mean_exact_tokens: metrics::mean(&tokens),
        mean_recovered_mass: metrics::mean(&mass),
        min_est_mass: est,
        violation_rate: metrics::violation_rate(records, config.target_p)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Records per config, in config order.
    #[serde(skip)]
    pub records: Vec<Vec<ExperimentRecord>>,
}

/// Run every config and aggregate each. Configs sharing input and
/// clustering settings share one loaded workload and clustering.
pub fn sweep(configs: &[RunConfig]) -> Result<SweepReport> {
    if configs.is_empty() {
        return Err(ExperimentError::Usage("empty sweep".into()));
    }
    let mut prepared: HashMap<String, Arc<Prepared>> = HashMap::new();
    let mut rows = Vec::with_capacity(configs.len());
    let mut all = Vec::with_capacity(configs.len());
    for config in configs {
        let prep = match prepared.get(&config.prep_key()) {
            Some(p) => p.clone(),
            None => {
                let p = Arc::new(Prepared::load(config)?);
                prepared.insert(config.prep_key(), p.clone());
                p
            }
        };
        let records = run_prepared(&prep, config, Execution::default())?;
        rows.push(aggregate(config, &records)?);
        all.push(records);
    }
    Ok(SweepReport { rows, records: all })
}

/// Clustering summary of one (layer, kv head).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadClusterStats {
    pub layer: usize,
    pub kv_head: usize,
    pub clusters: usize,
    pub iterations: usize,
    pub objective: f64,
    pub min_size: usize,
    pub mean_size: f64,
    pub max_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterReport {
    pub context_len: usize,
    pub head_dim: usize,
    pub sink: usize,
    pub window: usize,
    pub middle_tokens: usize,
    pub requested_clusters: usize,
    pub policy: ClusterCountPolicy,
    pub seed: u64,
    pub heads: Vec<HeadClusterStats>,
}

pub fn cluster_report(prep: &Prepared) -> Result<ClusterReport> {
    let cc = prep.clustered()?;
    let mut heads = Vec::new();
    for layer in 0..cc.num_layers() {
        for kv_head in 0..cc.num_kv_heads() {
            let h = cc.head(layer, kv_head);
            let sizes: Vec<usize> = h.clusters.iter().map(|c| c.size()).collect();
            heads.push(HeadClusterStats {
                layer,
                kv_head,
                clusters: sizes.len(),
                iterations: h.iterations,
                objective: h.objective_history.last().copied().unwrap_or(0.0),
                min_size: sizes.iter().copied().min().unwrap_or(0),
                mean_size: metrics::mean(&sizes.iter().map(|&s| s as f64).collect::<Vec<_>>()),
                max_size: sizes.iter().copied().max().unwrap_or(0),
            });
        }
    }
    Ok(ClusterReport {
        context_len: cc.context_len(),
        head_dim: cc.head_dim(),
        sink: cc.sink(),
        window: cc.window(),
        middle_tokens: cc.middle_range().len(),
        requested_clusters: cc.requested_clusters(),
        policy: prep.clusters,
        seed: prep.seed,
        heads,
    })
}

/// Fixed token budgets against the per-step adaptive budget.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetRow {
    pub method: String,
    pub k: Option<usize>,
    pub target_p: f64,
    pub records: usize,
    pub violation_rate: f64,
    /// Fraction of (layer, head) pairs with at least one violating step.
    pub heads_violating: f64,
    pub mean_budget: f64,
    pub min_budget: usize,
    pub max_budget: usize,
}

pub fn budget_table(prep: &Prepared, base: &RunConfig, ks: &[usize]) -> Result<Vec<BudgetRow>> {
    let budgets = ks.iter().map(|&k| TokenBudget::Fixed(k)).chain([TokenBudget::Adaptive]);
    let steps = prep.trace.num_steps().max(1);
    budgets
        .map(|k| {
            let config = RunConfig {
                method: Method::TokenTopk { k },
                ..base.clone()
            };
            let records = run_prepared(prep, &config, Execution::default())?;
            let sizes: Vec<usize> = records.iter().map(|r| r.exact_tokens).collect();
            let heads: Vec<bool> = records.chunks(steps).map(|c| c.iter().any(|r| r.violation)).collect();
            Ok(BudgetRow {
                method: config.method.name().to_string(),
                k: match k {
                    TokenBudget::Fixed(k) => Some(k),
                    TokenBudget::Adaptive => None,
                },
                target_p: base.target_p,
                records: records.len(),
                violation_rate: metrics::violation_rate(&records, base.target_p)?,
                heads_violating: heads.iter().filter(|&&v| v).count() as f64 / heads.len().max(1) as f64,
                mean_budget: metrics::mean(&sizes.iter().map(|&s| s as f64).collect::<Vec<_>>()),
                min_budget: sizes.iter().copied().min().unwrap_or(0),
                max_budget: sizes.iter().copied().max().unwrap_or(0),
            })
        })
        .collect()
}

/// Mass a fixed budget recovers, per (layer, head).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedBudgetMassRow {
    pub layer: usize,
    pub head: usize,
    #[serde(rename = "B")]
    pub budget: usize,
    pub budget_ratio: f64,
    pub p: f64,
    pub mean_recovered_mass: f64,
    pub min_recovered_mass: f64,
    /// Fraction of steps recovering at least `p`.
    pub reach_rate: f64,
}

pub fn fixed_budget_mass(prep: &Prepared, base: &RunConfig, ratios: &[f64], p: f64) -> Result<Vec<FixedBudgetMassRow>> {
    let n = prep.cache.context_len();
    let steps = prep.trace.num_steps().max(1);
    let mut rows = Vec::new();
    for &ratio in ratios {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(ExperimentError::Usage(format!("budget ratio {ratio} outside (0, 1]")));
        }
        let budget = ((ratio * n as f64).round() as usize).clamp(1, n);
        let config = RunConfig {
            method: Method::TokenToppFixed { budget, p },
            ..base.clone()
        };
        for chunk in run_prepared(prep, &config, Execution::default())?.chunks(steps) {
            let mass: Vec<f64> = chunk.iter().map(|r| r.recovered_mass).collect();
            rows.push(FixedBudgetMassRow {
                layer: chunk[0].layer,
                head: chunk[0].head,
                budget,
                budget_ratio: budget as f64 / n as f64,
                p,
                mean_recovered_mass: metrics::mean(&mass),
                min_recovered_mass: mass.iter().copied().fold(f64::INFINITY, f64::min),
                reach_rate: mass.iter().filter(|&&m| !metrics::is_violation(m, p)).count() as f64 / mass.len() as f64,
            });
        }
    }
    Ok(rows)
}

/// Centroid-approximation error by cluster rank.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankErrorRow {
    pub rank: usize,
    /// `|Zᵢ − Ẑᵢ| / Z`, the cluster's mass error normalized by the full
    /// partition function.
    pub metric: &'static str,
    pub samples: usize,
    pub mean_error: f64,
    pub p90_error: f64,
    pub max_error: f64,
}

pub fn rank_error(prep: &Prepared, ranks: usize) -> Result<Vec<RankErrorRow>> {
    let per_step = par::map(Execution::default(), &prep.work_items(), |&(layer, head, step)| {
        let ctx = prep.clustered_context(layer, head)?;
        Ok(metrics::cluster_approx_error(prep.query(layer, head, step), &ctx)?)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok((0..ranks)
        .map_while(|rank| {
            let errs: Vec<f64> = per_step.iter().filter_map(|e| e.get(rank).copied()).collect();
            (!errs.is_empty()).then(|| RankErrorRow {
                rank,
                metric: "normalized_mass_error",
                samples: errs.len(),
                mean_error: metrics::mean(&errs),
                p90_error: metrics::percentile(&errs, 0.9),
                max_error: errs.iter().copied().fold(0.0, f64::max),
            })
        })
        .collect())
}

/// Exact clusters Double-P picks against the fewest that reach its error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactClusterRow {
    pub layer: usize,
    pub head: usize,
    pub step: usize,
    pub p1: f64,
    pub p2: f64,
    /// Relative L2 output error; `epsilon` is Double-P's realized value.
    pub metric: &'static str,
    pub epsilon: f64,
    pub clusters_exact: usize,
    pub min_clusters: usize,
    pub attainable: bool,
    /// `clusters_exact / max(min_clusters, 1)`.
    pub ratio: f64,
}

pub fn exact_cluster_tracking(prep: &Prepared, base: &RunConfig, p1: f64, p2: f64) -> Result<Vec<ExactClusterRow>> {
    let cfg = DoublePConfig {
        p1,
        p2,
        sink: base.sink,
        window: base.window,
        clusters: base.clusters,
    };
    par::map(Execution::default(), &prep.work_items(), |&(layer, head, step)| {
        let q = prep.query(layer, head, step);
        let ctx = prep.clustered_context(layer, head)?;
        let decoded = engine::decode_step(q, &ctx, &cfg)?;
        let epsilon = metrics::output_error(&decoded.output, &engine::full_attention(q, &ctx)?)?;
        let min = metrics::min_clusters_for_error(q, &ctx, epsilon)?;
        let exact = decoded.plan.exact_clusters.len();
        Ok(ExactClusterRow {
            layer,
            head,
            step,
            p1,
            p2,
            metric: "rel_l2",
            epsilon,
            clusters_exact: exact,
            min_clusters: min.count,
            attainable: min.attainable,
            ratio: exact as f64 / min.count.max(1) as f64,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "csv" => Some(Self::Csv),
            "json" => Some(Self::Json),
            _ => None,
        }
    }
}

/// Serialize rows as CSV (header + one line each) or a JSON array.
pub fn render<T: Serialize>(rows: &[T], format: Format) -> Result<Vec<u8>> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for row in rows {
                w.serialize(row).map_err(|e| ExperimentError::Serialize(e.to_string()))?;
            }
            w.into_inner().map_err(|e| ExperimentError::Serialize(e.to_string()))
        }
        Format::Json => {
            let mut out = serde_json::to_vec_pretty(rows).map_err(|e| ExperimentError::Serialize(e.to_string()))?;
            out.push(b'\n');
            Ok(out)
        }
    }
}

/// Write `bytes` to `out` all at once, or to stdout when `out` is `None`.
pub fn emit(bytes: &[u8], out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => Ok(kvcache::write_atomic(path, bytes)?),
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes)?;
            Ok(stdout.flush()?)
        }
    }
}
