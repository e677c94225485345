//! Prefill k-means over key vectors and per-cluster metadata.
//!
//! Clustering runs independently for every (layer, kv head) over the middle
//! tokens `[sink, N - window)`; sink and window tokens stay outside every
//! cluster and are always attended exactly.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::kvcache::KvCache;
use crate::par;

pub const DEFAULT_MAX_ITERS: usize = 25;
pub const DEFAULT_TOKENS_PER_CLUSTER: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("more clusters than points ({k} > {n})")]
    TooManyClusters { k: usize, n: usize },
    #[error("no middle tokens to cluster (sink {sink} + window {window} >= N {n})")]
    NoMiddleTokens { sink: usize, window: usize, n: usize },
    #[error("invalid k-means input: {0}")]
    InvalidInput(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// Cluster index per point, into `centroids`.
    pub assignments: Vec<usize>,
    /// Surviving centroids, row-major `k'×d` with `k' <= k`.
    pub centroids: Vec<Vec<f64>>,
    /// Objective after every assign/update round.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansFit {
    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist(point: &[f32], centroid: &[f64]) -> f64 {
    point
        .iter()
        .zip(centroid)
        .map(|(&x, &c)| {
            let diff = f64::from(x) - c;
            diff * diff
        })
        .sum()
}

fn kmeans_pp_init(points: &[f32], n: usize, d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let row = |i: usize| &points[i * d..(i + 1) * d];
    let to_f64 = |i: usize| row(i).iter().map(|&x| f64::from(x)).collect::<Vec<f64>>();

    let mut centroids = Vec::with_capacity(k);
    centroids.push(to_f64(rng.random_range(0..n)));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 {
                    chosen = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            chosen.expect("positive total has a positive weight")
        } else {
            // every point coincides with a centroid already
            rng.random_range(0..n)
        };
        let c = to_f64(pick);
        for (i, slot) in nearest.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's k-means with k-means++ seeding.
///
/// `points` is `N×d` row-major. Distance ties go to the lower centroid
/// index. Iteration stops when no assignment changes or after `max_iters`
/// rounds; empty clusters are dropped, so fewer than `k` may survive.
/// The returned centroids are the means of their assigned points.
pub fn kmeans_fit(
    points: &[f32],
    d: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KMeansFit, ClusterError> {
    if d == 0 || !points.len().is_multiple_of(d) {
        return Err(ClusterError::InvalidInput("points length is not a multiple of d"));
    }
    let n = points.len() / d;
    if n == 0 {
        return Err(ClusterError::InvalidInput("no points"));
    }
    if k == 0 {
        return Err(ClusterError::InvalidInput("k must be at least 1"));
    }
    if max_iters == 0 {
        return Err(ClusterError::InvalidInput("max_iters must be at least 1"));
    }
    if k > n {
        return Err(ClusterError::TooManyClusters { k, n });
    }
    let row = |i: usize| &points[i * d..(i + 1) * d];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(points, n, d, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    while iterations < max_iters {
        let mut changed = false;
        for (i, slot) in assignments.iter_mut().enumerate() {
            let p = row(i);
            let mut best = 0;
            let mut best_d = sq_dist(p, &centroids[0]);
            for (c, centroid) in centroids.iter().enumerate().skip(1) {
                let dist = sq_dist(p, centroid);
                if dist < best_d {
                    best = c;
                    best_d = dist;
                }
            }
            if *slot != best {
                *slot = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        iterations += 1;

        let mut sums = vec![vec![0.0f64; d]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(row(i)) {
                *s += f64::from(x);
            }
        }
        let mut remap = vec![usize::MAX; centroids.len()];
        let mut next = Vec::with_capacity(centroids.len());
        for (c, (mut sum, count)) in sums.into_iter().zip(counts).enumerate() {
            if count == 0 {
                continue;
            }
            let inv = count as f64;
            for s in &mut sum {
                *s /= inv;
            }
            remap[c] = next.len();
            next.push(sum);
        }
        for a in &mut assignments {
            *a = remap[*a];
        }
        centroids = next;
        let objective: f64 = assignments
            .iter()
            .enumerate()
            .map(|(i, &a)| sq_dist(row(i), &centroids[a]))
            .sum();
        history.push(objective);
    }

    Ok(KMeansFit {
        assignments,
        centroids,
        objective_history: history,
        iterations,
    })
}

/// One cluster of middle tokens with its summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Token indices into the head's cache, ascending.
    pub members: Vec<usize>,
    /// Mean of the member keys.
    pub centroid: Vec<f64>,
    pub value_sum: Vec<f64>,
    pub value_mean: Vec<f64>,
}

impl Cluster {
    /// Build a cluster and its metadata directly from the member tokens.
    pub fn from_members(members: Vec<usize>, keys: &[f32], values: &[f32], d: usize) -> Self {
        assert!(!members.is_empty(), "clusters are never empty");
        let mut centroid = vec![0.0f64; d];
        let mut value_sum = vec![0.0f64; d];
        for &t in &members {
            for j in 0..d {
                centroid[j] += f64::from(keys[t * d + j]);
                value_sum[j] += f64::from(values[t * d + j]);
            }
        }
        let s = members.len() as f64;
        for c in &mut centroid {
            *c /= s;
        }
        let value_mean = value_sum.iter().map(|v| v / s).collect();
        Self {
            members,
            centroid,
            value_sum,
            value_mean,
        }
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// How many clusters to request per head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterCountPolicy {
    Explicit(usize),
    TokensPerCluster(usize),
}

impl Default for ClusterCountPolicy {
    fn default() -> Self {
        Self::TokensPerCluster(DEFAULT_TOKENS_PER_CLUSTER)
    }
}

impl ClusterCountPolicy {
    /// Requested cluster count for `middle` tokens, clamped to `1..=middle`.
    pub fn cluster_count(&self, middle: usize) -> usize {
        let k = match *self {
            Self::Explicit(k) => k,
            Self::TokensPerCluster(t) => middle.div_ceil(t.max(1)),
        };
        k.clamp(1, middle.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadClusters {
    pub clusters: Vec<Cluster>,
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

/// Clusters for every (layer, kv head) of a cache.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredCache {
    num_layers: usize,
    num_kv_heads: usize,
    head_dim: usize,
    context_len: usize,
    sink: usize,
    window: usize,
    requested: usize,
    heads: Vec<HeadClusters>,
}

/// Per-head seed derived from the run seed (splitmix64 finalizer).
pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Cluster one head's middle tokens.
pub fn cluster_head(
    keys: &[f32],
    values: &[f32],
    d: usize,
    middle: Range<usize>,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<HeadClusters, ClusterError> {
    let fit = kmeans_fit(&keys[middle.start * d..middle.end * d], d, k, max_iters, seed)?;
    let mut members = vec![Vec::new(); fit.num_clusters()];
    for (offset, &a) in fit.assignments.iter().enumerate() {
        members[a].push(middle.start + offset);
    }
    let clusters = members
        .into_iter()
        .map(|m| Cluster::from_members(m, keys, values, d))
        .collect();
    Ok(HeadClusters {
        clusters,
        objective_history: fit.objective_history,
        iterations: fit.iterations,
    })
}

pub fn build_clustered_cache(
    cache: &KvCache,
    policy: ClusterCountPolicy,
    sink: usize,
    window: usize,
    seed: u64,
) -> Result<ClusteredCache, ClusterError> {
    build_clustered_cache_with(cache, policy, sink, window, seed, DEFAULT_MAX_ITERS, par::Execution::default())
}

pub fn build_clustered_cache_with(
    cache: &KvCache,
    policy: ClusterCountPolicy,
    sink: usize,
    window: usize,
    seed: u64,
    max_iters: usize,
    exec: par::Execution,
) -> Result<ClusteredCache, ClusterError> {
    let n = cache.context_len();
    if sink + window >= n {
        return Err(ClusterError::NoMiddleTokens { sink, window, n });
    }
    let middle = sink..n - window;
    let k = policy.cluster_count(middle.len());
    let d = cache.head_dim();
    let kv_heads = cache.num_kv_heads();
    let jobs: Vec<(usize, usize)> = (0..cache.num_layers())
        .flat_map(|l| (0..kv_heads).map(move |h| (l, h)))
        .collect();
    let heads = par::map(exec, &jobs, |&(layer, head)| {
        cluster_head(
            cache.keys(layer, head),
            cache.values(layer, head),
            d,
            middle.clone(),
            k,
            max_iters,
            mix_seed(seed, layer as u64, head as u64),
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(ClusteredCache {
        num_layers: cache.num_layers(),
        num_kv_heads: kv_heads,
        head_dim: d,
        context_len: n,
        sink,
        window,
        requested: k,
        heads,
    })
}

impl ClusteredCache {
    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_kv_heads(&self) -> usize {
        self.num_kv_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn sink(&self) -> usize {
        self.sink
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Cluster count requested per head (heads may keep fewer).
    pub fn requested_clusters(&self) -> usize {
        self.requested
    }

    pub fn middle_range(&self) -> Range<usize> {
        self.sink..self.context_len - self.window
    }

    pub fn head(&self, layer: usize, kv_head: usize) -> &HeadClusters {
        &self.heads[layer * self.num_kv_heads + kv_head]
    }

    pub fn clusters(&self, layer: usize, kv_head: usize) -> &[Cluster] {
        &self.head(layer, kv_head).clusters
    }

    /// Whether this clustering was built for a cache of `cache`'s shape.
    pub fn matches(&self, cache: &KvCache) -> bool {
        self.num_layers == cache.num_layers()
            && self.num_kv_heads == cache.num_kv_heads()
            && self.head_dim == cache.head_dim()
            && self.context_len == cache.context_len()
    }
}
