//! Hierarchical top-p decode step.
//!
//! For one query and one kv head:
//!
//! 1. every cluster gets an approximate log-mass `x̄ᵢ + ln sᵢ` from its
//!    centroid logit and size, and the softmax of those is the estimated
//!    cluster distribution `Â`;
//! 2. stage 1 keeps the top-p₁ clusters of `Â`; stage 2 renormalizes `Â`
//!    over the kept clusters and takes the top-p₂ of those for exact
//!    token-level attention, approximating the rest by their centroids;
//! 3. exact tokens (plus sink and window tokens) and approximate clusters
//!    are gathered into one buffer and attended in a single weighted pass
//!    that shares one normalizer.
//!
//! Clusters outside the stage-1 set contribute nothing.

use std::ops::Range;

use serde::Serialize;
use thiserror::Error;

use crate::clustering::{Cluster, ClusterCountPolicy, ClusteredCache};
use crate::kvcache::KvCache;
use crate::numerics::{self, NumericsError};
use crate::selection::{self, SelectionError, TopPResult};

pub const DEFAULT_SINK: usize = 4;
pub const DEFAULT_WINDOW: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("plan does not match clustering: {0}")]
    PlanMismatch(String),
    #[error("budget {budget} out of range 1..={max}")]
    BudgetOutOfRange { budget: usize, max: usize },
    #[error("invalid head context: {0}")]
    InvalidContext(String),
}

/// Double-P thresholds and exact-region sizes. `p2 > p1` is allowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DoublePConfig {
    pub p1: f64,
    pub p2: f64,
    pub sink: usize,
    pub window: usize,
    pub clusters: ClusterCountPolicy,
}

impl Default for DoublePConfig {
    fn default() -> Self {
        Preset::LlamaDefault.config()
    }
}

impl DoublePConfig {
    pub fn with_thresholds(p1: f64, p2: f64) -> Self {
        Self { p1, p2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        selection::check_threshold(self.p1)?;
        selection::check_threshold(self.p2)?;
        Ok(())
    }
}

/// Named threshold presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// `(p1, p2) = (0.95, 0.7)`
    LlamaDefault,
    /// `(p1, p2) = (0.99, 0.8)`
    QwenDefault,
}

impl Preset {
    pub fn thresholds(self) -> (f64, f64) {
        match self {
            Self::LlamaDefault => (0.95, 0.7),
            Self::QwenDefault => (0.99, 0.8),
        }
    }

    pub fn config(self) -> DoublePConfig {
        let (p1, p2) = self.thresholds();
        DoublePConfig {
            p1,
            p2,
            sink: DEFAULT_SINK,
            window: DEFAULT_WINDOW,
            clusters: ClusterCountPolicy::default(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LlamaDefault => "llama-default",
            Self::QwenDefault => "qwen-default",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "llama-default" => Some(Self::LlamaDefault),
            "qwen-default" => Some(Self::QwenDefault),
            _ => None,
        }
    }
}

/// Everything one decode step needs about one kv head.
#[derive(Debug, Clone)]
pub struct HeadContext<'a> {
    keys: &'a [f32],
    values: &'a [f32],
    head_dim: usize,
    clusters: &'a [Cluster],
    sink: Range<usize>,
    window: Range<usize>,
}

impl<'a> HeadContext<'a> {
    /// `keys`/`values` are `N×d` row-major; clusters index into them; the
    /// sink and window ranges are always attended exactly and must not
    /// overlap any cluster.
    pub fn new(
        keys: &'a [f32],
        values: &'a [f32],
        head_dim: usize,
        clusters: &'a [Cluster],
        sink: Range<usize>,
        window: Range<usize>,
    ) -> Result<Self, EngineError> {
        if head_dim == 0 || !keys.len().is_multiple_of(head_dim) || keys.len() != values.len() || keys.is_empty() {
            return Err(EngineError::InvalidContext("keys/values shape".into()));
        }
        let n = keys.len() / head_dim;
        if sink.end > n || window.end > n || window.start < sink.end && !window.is_empty() {
            return Err(EngineError::InvalidContext("sink/window ranges".into()));
        }
        for c in clusters {
            if c.members.is_empty() || c.centroid.len() != head_dim || c.value_mean.len() != head_dim {
                return Err(EngineError::InvalidContext("malformed cluster".into()));
            }
            if c.members.iter().any(|&t| t >= n || sink.contains(&t) || window.contains(&t)) {
                return Err(EngineError::InvalidContext("cluster member out of range".into()));
            }
        }
        Ok(Self {
            keys,
            values,
            head_dim,
            clusters,
            sink,
            window,
        })
    }

    pub fn from_cache(
        cache: &'a KvCache,
        cc: &'a ClusteredCache,
        layer: usize,
        kv_head: usize,
    ) -> Result<Self, EngineError> {
        if !cc.matches(cache) {
            return Err(EngineError::PlanMismatch(
                "clustered cache was built for a different cache shape".into(),
            ));
        }
        let n = cache.context_len();
        Ok(Self {
            keys: cache.keys(layer, kv_head),
            values: cache.values(layer, kv_head),
            head_dim: cache.head_dim(),
            clusters: cc.clusters(layer, kv_head),
            sink: 0..cc.sink(),
            window: n - cc.window()..n,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn context_len(&self) -> usize {
        self.keys.len() / self.head_dim
    }

    pub fn clusters(&self) -> &'a [Cluster] {
        self.clusters
    }

    pub fn key(&self, t: usize) -> &'a [f32] {
        &self.keys[t * self.head_dim..(t + 1) * self.head_dim]
    }

    pub fn value(&self, t: usize) -> &'a [f32] {
        &self.values[t * self.head_dim..(t + 1) * self.head_dim]
    }

    /// Sink then window token indices.
    pub fn pinned_tokens(&self) -> impl Iterator<Item = usize> + 'a {
        self.sink.clone().chain(self.window.clone())
    }

    fn check_query(&self, q: &[f32]) -> Result<(), EngineError> {
        if q.len() != self.head_dim {
            return Err(EngineError::DimensionMismatch {
                expected: self.head_dim,
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Exact logits `q·kⱼ/√d` for every token.
    pub fn logits(&self, q: &[f32]) -> Result<Vec<f64>, EngineError> {
        self.check_query(q)?;
        let scale = numerics::logit_scale(self.head_dim);
        Ok(self
            .keys
            .chunks_exact(self.head_dim)
            .map(|k| numerics::dot(q, k) * scale)
            .collect())
    }

    /// True attention weights over all tokens.
    pub fn attention_weights(&self, q: &[f32]) -> Result<Vec<f64>, EngineError> {
        Ok(numerics::stable_softmax(&self.logits(q)?)?)
    }

    fn token_logit(&self, q: &[f32], t: usize, scale: f64) -> f64 {
        numerics::dot(q, self.key(t)) * scale
    }
}

/// Estimated cluster-level attention distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterEstimate {
    /// `ln Ẑᵢ = x̄ᵢ + ln sᵢ`.
    pub log_mass: Vec<f64>,
    /// `Â`, the softmax of `log_mass`.
    pub probs: Vec<f64>,
    /// Cluster indices by descending `Â`, ties to the lower index.
    pub order: Vec<usize>,
}

impl ClusterEstimate {
    pub fn num_clusters(&self) -> usize {
        self.probs.len()
    }
}

pub fn estimate_cluster_distribution(q: &[f32], ctx: &HeadContext) -> Result<ClusterEstimate, EngineError> {
    ctx.check_query(q)?;
    if ctx.clusters.is_empty() {
        return Err(EngineError::InvalidContext("no clusters".into()));
    }
    let scale = numerics::logit_scale(ctx.head_dim);
    let log_mass: Vec<f64> = ctx
        .clusters
        .iter()
        .map(|c| numerics::dot_mixed(q, &c.centroid) * scale + (c.size() as f64).ln())
        .collect();
    let probs = numerics::stable_softmax(&log_mass)?;
    let order = selection::descending_order(&probs);
    Ok(ClusterEstimate { log_mass, probs, order })
}

/// Stage-1 set and its stage-2 split, in cluster indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSelection {
    pub stage1: TopPResult,
    /// Prefix of `stage1.selected`.
    pub exact: Vec<usize>,
    /// The remainder of `stage1.selected`.
    pub approx: Vec<usize>,
}

/// Two-stage cluster selection over an estimated distribution.
///
/// Stage 2 runs on `probs` restricted to the stage-1 set and renormalized,
/// so `p2` is the fraction of retained estimated mass computed exactly.
pub fn select_clusters(probs: &[f64], p1: f64, p2: f64) -> Result<ClusterSelection, EngineError> {
    selection::check_threshold(p2)?;
    let stage1 = selection::top_p_select(probs, p1)?;
    let restricted: Vec<f64> = stage1.selected.iter().map(|&i| probs[i]).collect();
    let stage2 = selection::top_p_select(&restricted, p2)?;
    // restricted is already descending, so stage 2 is a prefix
    let cut = stage2.len();
    let exact = stage1.selected[..cut].to_vec();
    let approx = stage1.selected[cut..].to_vec();
    Ok(ClusterSelection { stage1, exact, approx })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionPlan {
    pub stage1: TopPResult,
    pub exact_clusters: Vec<usize>,
    pub approx_clusters: Vec<usize>,
    /// Sink, window and exact-cluster tokens, ascending.
    pub exact_tokens: Vec<usize>,
    pub num_clusters: usize,
}

impl SelectionPlan {
    /// `Σ Â` over the stage-1 set.
    pub fn estimated_mass(&self) -> f64 {
        self.stage1.cumulative_mass
    }

    /// Plan that computes `exact` clusters exactly and approximates
    /// `approx`, with a stage-1 record covering both.
    pub fn from_partition(
        est: &ClusterEstimate,
        exact: Vec<usize>,
        approx: Vec<usize>,
        ctx: &HeadContext,
    ) -> Self {
        let mut selected: Vec<usize> = exact.iter().chain(&approx).copied().collect();
        let mut rank = vec![0; est.order.len()];
        for (r, &c) in est.order.iter().enumerate() {
            rank[c] = r;
        }
        selected.sort_by_key(|&i| rank[i]);
        let cumulative_mass = selected.iter().map(|&i| est.probs[i]).sum();
        let exact_tokens = exact_token_set(ctx, &exact);
        Self {
            stage1: TopPResult {
                selected,
                cumulative_mass,
                threshold: 1.0,
            },
            exact_clusters: exact,
            approx_clusters: approx,
            exact_tokens,
            num_clusters: est.num_clusters(),
        }
    }
}

fn exact_token_set(ctx: &HeadContext, exact_clusters: &[usize]) -> Vec<usize> {
    let mut tokens: Vec<usize> = ctx
        .pinned_tokens()
        .chain(exact_clusters.iter().flat_map(|&c| ctx.clusters[c].members.iter().copied()))
        .collect();
    tokens.sort_unstable();
    tokens
}

pub fn plan_selection(
    est: &ClusterEstimate,
    cfg: &DoublePConfig,
    ctx: &HeadContext,
) -> Result<SelectionPlan, EngineError> {
    cfg.validate()?;
    if est.num_clusters() != ctx.clusters.len() {
        return Err(EngineError::PlanMismatch(format!(
            "estimate has {} clusters, head has {}",
            est.num_clusters(),
            ctx.clusters.len()
        )));
    }
    let sel = select_clusters(&est.probs, cfg.p1, cfg.p2)?;
    let exact_tokens = exact_token_set(ctx, &sel.exact);
    Ok(SelectionPlan {
        stage1: sel.stage1,
        exact_clusters: sel.exact,
        approx_clusters: sel.approx,
        exact_tokens,
        num_clusters: est.num_clusters(),
    })
}

/// Contiguous buffer of mixture entries: exact tokens carry their logit
/// and value, approximate clusters carry `ln Ẑᵢ` and their value mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureBuffer {
    head_dim: usize,
    log_weights: Vec<f64>,
    values: Vec<f64>,
    exact_tokens: usize,
    approx_clusters: usize,
}

impl MixtureBuffer {
    fn with_capacity(head_dim: usize, entries: usize) -> Self {
        Self {
            head_dim,
            log_weights: Vec::with_capacity(entries),
            values: Vec::with_capacity(entries * head_dim),
            exact_tokens: 0,
            approx_clusters: 0,
        }
    }

    fn push_token(&mut self, logit: f64, value: &[f32]) {
        self.log_weights.push(logit);
        self.values.extend(value.iter().map(|&v| f64::from(v)));
        self.exact_tokens += 1;
    }

    fn push_cluster(&mut self, log_mass: f64, value_mean: &[f64]) {
        self.log_weights.push(log_mass);
        self.values.extend_from_slice(value_mean);
        self.approx_clusters += 1;
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.head_dim..(i + 1) * self.head_dim]
    }

    /// Normalized mixture weights.
    pub fn weights(&self) -> Result<Vec<f64>, EngineError> {
        Ok(numerics::stable_softmax(&self.log_weights)?)
    }

    /// Single online-softmax pass over the buffer.
    pub fn attend(&self) -> Result<AttentionOutput, EngineError> {
        if self.is_empty() {
            return Err(EngineError::InvalidContext("empty mixture".into()));
        }
        let d = self.head_dim;
        let mut running_max = f64::NEG_INFINITY;
        let mut denom = 0.0f64;
        let mut acc = vec![0.0f64; d];
        for (i, &w) in self.log_weights.iter().enumerate() {
            if !w.is_finite() {
                return Err(NumericsError::NonFiniteLogit(i).into());
            }
            let v = self.value(i);
            if w > running_max {
                let rescale = (running_max - w).exp();
                denom = denom * rescale + 1.0;
                for (a, &x) in acc.iter_mut().zip(v) {
                    *a = *a * rescale + x;
                }
                running_max = w;
            } else {
                let e = (w - running_max).exp();
                denom += e;
                for (a, &x) in acc.iter_mut().zip(v) {
                    *a += e * x;
                }
            }
        }
        for a in &mut acc {
            *a /= denom;
        }
        Ok(AttentionOutput {
            output: acc,
            log_normalizer: running_max + denom.ln(),
            exact_token_count: self.exact_tokens,
            approx_cluster_count: self.approx_clusters,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionOutput {
    pub output: Vec<f64>,
    /// `ln Z̃`; kept in log form so large logits cannot overflow.
    pub log_normalizer: f64,
    pub exact_token_count: usize,
    pub approx_cluster_count: usize,
}

impl AttentionOutput {
    pub fn normalizer(&self) -> f64 {
        self.log_normalizer.exp()
    }
}

/// Gather exact tokens (ascending) then approximate clusters (ascending)
/// into one buffer.
pub fn gather_mixture(
    q: &[f32],
    ctx: &HeadContext,
    exact_tokens: &[usize],
    approx_clusters: &[usize],
) -> Result<MixtureBuffer, EngineError> {
    ctx.check_query(q)?;
    let n = ctx.context_len();
    let scale = numerics::logit_scale(ctx.head_dim);
    let mut buf = MixtureBuffer::with_capacity(ctx.head_dim, exact_tokens.len() + approx_clusters.len());
    for &t in exact_tokens {
        if t >= n {
            return Err(EngineError::PlanMismatch(format!("token {t} out of range")));
        }
        buf.push_token(ctx.token_logit(q, t, scale), ctx.value(t));
    }
    let mut approx = approx_clusters.to_vec();
    approx.sort_unstable();
    for c in approx {
        let cluster = ctx
            .clusters
            .get(c)
            .ok_or_else(|| EngineError::PlanMismatch(format!("cluster {c} out of range")))?;
        let log_mass = numerics::dot_mixed(q, &cluster.centroid) * scale + (cluster.size() as f64).ln();
        buf.push_cluster(log_mass, &cluster.value_mean);
    }
    Ok(buf)
}

/// Exact softmax attention over every token of the head.
pub fn full_attention(q: &[f32], ctx: &HeadContext) -> Result<AttentionOutput, EngineError> {
    let all: Vec<usize> = (0..ctx.context_len()).collect();
    gather_mixture(q, ctx, &all, &[])?.attend()
}

pub fn sparse_attention(q: &[f32], ctx: &HeadContext, plan: &SelectionPlan) -> Result<AttentionOutput, EngineError> {
    if plan.num_clusters != ctx.clusters.len() {
        return Err(EngineError::PlanMismatch(format!(
            "plan built for {} clusters, head has {}",
            plan.num_clusters,
            ctx.clusters.len()
        )));
    }
    gather_mixture(q, ctx, &plan.exact_tokens, &plan.approx_clusters)?.attend()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub output: AttentionOutput,
    pub plan: SelectionPlan,
    pub estimate: ClusterEstimate,
}

/// Estimate, plan and attend for one query.
pub fn decode_step(q: &[f32], ctx: &HeadContext, cfg: &DoublePConfig) -> Result<DecodeResult, EngineError> {
    let estimate = estimate_cluster_distribution(q, ctx)?;
    let plan = plan_selection(&estimate, cfg, ctx)?;
    let output = sparse_attention(q, ctx, &plan)?;
    Ok(DecodeResult { output, plan, estimate })
}

/// Output of a fixed-budget baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetedOutput {
    pub attention: AttentionOutput,
    /// Tokens attended exactly, ascending.
    pub exact_tokens: Vec<usize>,
    /// True attention mass of `exact_tokens` under full attention.
    pub recovered_mass: f64,
}

fn mass_of(weights: &[f64], tokens: &[usize]) -> f64 {
    tokens.iter().map(|&t| weights[t]).sum()
}

/// Exact attention over the `k` tokens with the largest true weight,
/// renormalized over that subset.
pub fn baseline_token_topk(q: &[f32], ctx: &HeadContext, k: usize) -> Result<BudgetedOutput, EngineError> {
    let n = ctx.context_len();
    if k == 0 || k > n {
        return Err(EngineError::BudgetOutOfRange { budget: k, max: n });
    }
    let weights = ctx.attention_weights(q)?;
    let chosen = selection::top_k_select(&weights, k)?;
    // descending order, same accumulation as the top-p prefix scan
    let recovered_mass = mass_of(&weights, &chosen);
    let mut exact_tokens = chosen;
    exact_tokens.sort_unstable();
    let attention = gather_mixture(q, ctx, &exact_tokens, &[])?.attend()?;
    Ok(BudgetedOutput {
        attention,
        exact_tokens,
        recovered_mass,
    })
}

/// Smallest token count whose true mass reaches `p`.
pub fn adaptive_token_budget(q: &[f32], ctx: &HeadContext, p: f64) -> Result<usize, EngineError> {
    Ok(selection::top_p_select(&ctx.attention_weights(q)?, p)?.len())
}

/// Exact attention over the `m` clusters with the largest `Â` (plus sink
/// and window), centroid approximation for every other cluster.
pub fn baseline_cluster_topk(q: &[f32], ctx: &HeadContext, m: usize) -> Result<(BudgetedOutput, SelectionPlan), EngineError> {
    let est = estimate_cluster_distribution(q, ctx)?;
    let k = est.num_clusters();
    if m == 0 || m > k {
        return Err(EngineError::BudgetOutOfRange { budget: m, max: k });
    }
    let exact = est.order[..m].to_vec();
    let approx = est.order[m..].to_vec();
    let plan = SelectionPlan::from_partition(&est, exact, approx, ctx);
    let attention = sparse_attention(q, ctx, &plan)?;
    let weights = ctx.attention_weights(q)?;
    let recovered_mass = mass_of(&weights, &plan.exact_tokens);
    Ok((
        BudgetedOutput {
            attention,
            exact_tokens: plan.exact_tokens.clone(),
            recovered_mass,
        },
        plan,
    ))
}

/// Fixed-budget select-then-prune: candidates are the top-`budget` tokens
/// of the true distribution; within them, the shortest descending prefix
/// whose (full-context) mass reaches `p` is kept, or every candidate if
/// the candidates never reach `p`.
pub fn baseline_token_topp_fixed_budget(
    q: &[f32],
    ctx: &HeadContext,
    budget: usize,
    p: f64,
) -> Result<BudgetedOutput, EngineError> {
    let n = ctx.context_len();
    if budget == 0 || budget > n {
        return Err(EngineError::BudgetOutOfRange { budget, max: n });
    }
    let weights = ctx.attention_weights(q)?;
    let candidates = selection::top_k_select(&weights, budget)?;
    let sorted: Vec<f64> = candidates.iter().map(|&t| weights[t]).collect();
    let keep = selection::top_p_select_sorted(&sorted, p)?;
    let recovered_mass = sorted[..keep].iter().sum();
    let mut exact_tokens = candidates[..keep].to_vec();
    exact_tokens.sort_unstable();
    let attention = gather_mixture(q, ctx, &exact_tokens, &[])?.attend()?;
    Ok(BudgetedOutput {
        attention,
        exact_tokens,
        recovered_mass,
    })
}

/// One kv head's cache across decode steps.
///
/// Appended tokens enter the sliding window; a token pushed out of the
/// window joins a residual pool of singleton clusters and is never
/// re-clustered. Sink tokens and prefill clusters stay fixed. A session is
/// single-writer: only its owner appends.
#[derive(Debug, Clone)]
pub struct DecodeSession {
    head_dim: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    clusters: Vec<Cluster>,
    prefill_clusters: usize,
    sink: usize,
    window: usize,
}

impl DecodeSession {
    pub fn new(cache: &KvCache, cc: &ClusteredCache, layer: usize, kv_head: usize) -> Result<Self, EngineError> {
        if !cc.matches(cache) {
            return Err(EngineError::PlanMismatch(
                "clustered cache was built for a different cache shape".into(),
            ));
        }
        let clusters = cc.clusters(layer, kv_head).to_vec();
        Ok(Self {
            head_dim: cache.head_dim(),
            keys: cache.keys(layer, kv_head).to_vec(),
            values: cache.values(layer, kv_head).to_vec(),
            prefill_clusters: clusters.len(),
            clusters,
            sink: cc.sink(),
            window: cc.window(),
        })
    }

    pub fn context_len(&self) -> usize {
        self.keys.len() / self.head_dim
    }

    /// Singleton clusters created from tokens that left the window.
    pub fn residual_pool(&self) -> &[Cluster] {
        &self.clusters[self.prefill_clusters..]
    }

    pub fn append(&mut self, key: &[f32], value: &[f32]) -> Result<(), EngineError> {
        for v in [key, value] {
            if v.len() != self.head_dim {
                return Err(EngineError::DimensionMismatch {
                    expected: self.head_dim,
                    got: v.len(),
                });
            }
        }
        if key.iter().chain(value).any(|x| !x.is_finite()) {
            return Err(EngineError::InvalidContext("non-finite key or value".into()));
        }
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        let n = self.context_len();
        // the token that just slid out of the window, if any
        if n > self.window {
            let leaving = n - self.window - 1;
            // prefill clusters end where the prefill window began, so the
            // leaving token is never already clustered
            if leaving >= self.sink {
                self.clusters.push(Cluster::from_members(
                    vec![leaving],
                    &self.keys,
                    &self.values,
                    self.head_dim,
                ));
            }
        }
        Ok(())
    }

    pub fn context(&self) -> Result<HeadContext<'_>, EngineError> {
        let n = self.context_len();
        HeadContext::new(
            &self.keys,
            &self.values,
            self.head_dim,
            &self.clusters,
            0..self.sink.min(n),
            n.saturating_sub(self.window).max(self.sink)..n,
        )
    }

    pub fn step(&self, q: &[f32], cfg: &DoublePConfig) -> Result<DecodeResult, EngineError> {
        decode_step(q, &self.context()?, cfg)
    }
}
