//! Per-step measurements and their aggregates: recovered mass, violation
//! rate, per-cluster mass error and the minimum exact-cluster prefix for
//! an error bound.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{self, AttentionOutput, ClusterEstimate, EngineError, HeadContext, SelectionPlan};
use crate::numerics;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no records")]
    Empty,
    #[error("output dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// One (layer, head, step) measurement. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub layer: usize,
    pub head: usize,
    pub step: usize,
    pub method: String,
    pub p1: Option<f64>,
    pub p2: Option<f64>,
    pub k: Option<usize>,
    pub m: Option<usize>,
    #[serde(rename = "B")]
    pub budget: Option<usize>,
    pub clusters_total: usize,
    pub clusters_selected: usize,
    pub clusters_exact: usize,
    pub exact_tokens: usize,
    /// `Σ Â` over the stage-1 set, when the method estimates one.
    pub est_mass: Option<f64>,
    /// True attention mass of the exactly computed tokens.
    pub recovered_mass: f64,
    pub violation: bool,
    /// Relative L2 error against full attention.
    pub rel_err: f64,
}

impl ExperimentRecord {
    pub fn clusters_approx(&self) -> usize {
        self.clusters_selected - self.clusters_exact
    }
}

/// True attention mass of `exact_tokens`, summed in the given order.
pub fn recovered_mass(exact_tokens: &[usize], true_weights: &[f64]) -> f64 {
    exact_tokens.iter().map(|&t| true_weights[t]).sum()
}

/// True attention mass of a plan's exact tokens for query `q`.
pub fn plan_recovered_mass(plan: &SelectionPlan, q: &[f32], ctx: &HeadContext) -> Result<f64, MetricsError> {
    Ok(recovered_mass(&plan.exact_tokens, &ctx.attention_weights(q)?))
}

/// Slack for summation order when comparing a recovered mass with its target.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// `mass` misses the target `p` by more than rounding.
pub fn is_violation(mass: f64, p: f64) -> bool {
    mass < p - MASS_TOLERANCE
}

/// Fraction of records whose recovered mass is below `p`.
pub fn violation_rate(records: &[ExperimentRecord], p: f64) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let bad = records.iter().filter(|r| is_violation(r.recovered_mass, p)).count();
    Ok(bad as f64 / records.len() as f64)
}

/// `‖a − b‖₂ / max(‖b‖₂, 1e-12)`.
pub fn output_error(a: &AttentionOutput, b: &AttentionOutput) -> Result<f64, MetricsError> {
    rel_l2(&a.output, &b.output)
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::DimensionMismatch(a.len(), b.len()));
    }
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let norm: f64 = b.iter().map(|y| y * y).sum();
    Ok(diff.sqrt() / norm.sqrt().max(1e-12))
}

/// Exact and estimated log-masses of every cluster plus the full log
/// normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMasses {
    pub log_exact: Vec<f64>,
    pub log_estimated: Vec<f64>,
    pub log_total: f64,
}

pub fn cluster_masses(q: &[f32], ctx: &HeadContext, est: &ClusterEstimate) -> Result<ClusterMasses, MetricsError> {
    let logits = ctx.logits(q)?;
    let log_total = numerics::log_sum_exp(&logits).map_err(EngineError::from)?;
    let mut log_exact = Vec::with_capacity(ctx.clusters().len());
    for c in ctx.clusters() {
        let member_logits: Vec<f64> = c.members.iter().map(|&t| logits[t]).collect();
        log_exact.push(numerics::log_sum_exp(&member_logits).map_err(EngineError::from)?);
    }
    Ok(ClusterMasses {
        log_exact,
        log_estimated: est.log_mass.clone(),
        log_total,
    })
}

/// `|Zᵢ − Ẑᵢ| / Z_total` per cluster, listed in descending-`Â` rank order.
pub fn cluster_approx_error(q: &[f32], ctx: &HeadContext) -> Result<Vec<f64>, MetricsError> {
    let est = engine::estimate_cluster_distribution(q, ctx)?;
    let masses = cluster_masses(q, ctx, &est)?;
    Ok(est
        .order
        .iter()
        .map(|&i| {
            let exact = (masses.log_exact[i] - masses.log_total).exp();
            let approx = (masses.log_estimated[i] - masses.log_total).exp();
            (exact - approx).abs()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MinClusters {
    pub count: usize,
    /// False when even all-exact evaluation misses the bound; `count` is
    /// then the cluster total.
    pub attainable: bool,
}

/// Error of the mixture that computes the top `prefix` clusters (by `Â`)
/// exactly and approximates every other cluster.
pub fn prefix_error(
    q: &[f32],
    ctx: &HeadContext,
    est: &ClusterEstimate,
    prefix: usize,
    full: &AttentionOutput,
) -> Result<f64, MetricsError> {
    let plan = SelectionPlan::from_partition(est, est.order[..prefix].to_vec(), est.order[prefix..].to_vec(), ctx);
    let out = engine::sparse_attention(q, ctx, &plan)?;
    output_error(&out, full)
}

/// Smallest exact-cluster prefix whose output error is within `epsilon`.
/// Linear scan with a full re-evaluation per prefix.
pub fn min_clusters_for_error(q: &[f32], ctx: &HeadContext, epsilon: f64) -> Result<MinClusters, MetricsError> {
    let full = engine::full_attention(q, ctx)?;
    let est = engine::estimate_cluster_distribution(q, ctx)?;
    let total = est.num_clusters();
    for prefix in 0..=total {
        if prefix_error(q, ctx, &est, prefix, &full)? <= epsilon {
            return Ok(MinClusters {
                count: prefix,
                attainable: true,
            });
        }
    }
    Ok(MinClusters {
        count: total,
        attainable: false,
    })
}

/// Nearest-rank percentile, `q` in `[0, 1]`. NaN for empty input.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{build_clustered_cache, Cluster, ClusterCountPolicy};
    use crate::engine::{decode_step, full_attention, DoublePConfig};
    use crate::kvcache::KvCache;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(mass: f64) -> ExperimentRecord {
        ExperimentRecord {
            layer: 0,
            head: 0,
            step: 0,
            method: "full".into(),
            p1: None,
            p2: None,
            k: None,
            m: None,
            budget: None,
            clusters_total: 0,
            clusters_selected: 0,
            clusters_exact: 0,
            exact_tokens: 1,
            est_mass: None,
            recovered_mass: mass,
            violation: false,
            rel_err: 0.0,
        }
    }

    fn random_setup(n: usize, d: usize, tpc: usize, seed: u64) -> (KvCache, crate::clustering::ClusteredCache) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys = (0..n * d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let values = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let cache = KvCache::new(1, 1, d, n, keys, values).unwrap();
        let cc = build_clustered_cache(&cache, ClusterCountPolicy::TokensPerCluster(tpc), 2, 4, seed).unwrap();
        (cache, cc)
    }

    fn query(d: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..d).map(|_| rng.random_range(-2.0f32..2.0)).collect()
    }

    #[test]
    fn violation_rate_examples() {
        let all_full = vec![record(1.0); 4];
        assert_eq!(violation_rate(&all_full, 0.95).unwrap(), 0.0);
        let half = vec![record(0.5), record(0.99), record(0.9), record(1.0)];
        assert_eq!(violation_rate(&half, 0.95).unwrap(), 0.5);
        assert_eq!(violation_rate(&[], 0.95), Err(MetricsError::Empty));
        // non-decreasing in p
        let mut last = 0.0;
        for p in [0.1, 0.5, 0.9, 0.95, 0.999, 1.0] {
            let r = violation_rate(&half, p).unwrap();
            assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn output_error_examples() {
        let a = AttentionOutput {
            output: vec![0.6, 0.8],
            log_normalizer: 0.0,
            exact_token_count: 1,
            approx_cluster_count: 0,
        };
        assert_eq!(output_error(&a, &a).unwrap(), 0.0);
        let b = AttentionOutput {
            output: vec![1.2, 1.6],
            ..a.clone()
        };
        assert!((output_error(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert!(rel_l2(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn output_error_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut diff = 0.0;
            let mut nb = 0.0;
            for i in 0..16 {
                diff += (a[i] - b[i]).powi(2);
                nb += b[i] * b[i];
            }
            let want = diff.sqrt() / nb.sqrt();
            assert!((rel_l2(&a, &b).unwrap() - want).abs() < 1e-12);
            // symmetric numerator
            let back = rel_l2(&b, &a).unwrap() * a.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((back - diff.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn recovered_mass_examples() {
        // two-token uniform cache, plan with only the argmax (token 0)
        let cache = KvCache::new(1, 1, 1, 2, vec![1.0, 1.0], vec![0.0, 1.0]).unwrap();
        let ctx = HeadContext::new(cache.keys(0, 0), cache.values(0, 0), 1, &[], 0..0, 0..0).unwrap();
        let w = ctx.attention_weights(&[0.3]).unwrap();
        assert_eq!(recovered_mass(&[0], &w), 0.5);
        assert_eq!(recovered_mass(&[0, 1], &w), 1.0);
    }

    #[test]
    fn recovered_mass_matches_naive_and_grows() {
        let (cache, cc) = random_setup(120, 4, 8, 1);
        let ctx = HeadContext::from_cache(&cache, &cc, 0, 0).unwrap();
        for seed in 0..10 {
            let q = query(4, seed);
            let r = decode_step(&q, &ctx, &DoublePConfig::with_thresholds(0.8, 0.5)).unwrap();
            let got = plan_recovered_mass(&r.plan, &q, &ctx).unwrap();
            // naive: exponentiate every logit directly
            let logits = ctx.logits(&q).unwrap();
            let z: f64 = logits.iter().map(|x| x.exp()).sum();
            let want: f64 = r.plan.exact_tokens.iter().map(|&t| logits[t].exp() / z).sum();
            assert!((got - want).abs() < 1e-6);
            assert!((0.0..=1.0 + 1e-6).contains(&got));
            let bigger = decode_step(&q, &ctx, &DoublePConfig::with_thresholds(0.8, 0.9)).unwrap();
            assert!(plan_recovered_mass(&bigger.plan, &q, &ctx).unwrap() >= got - 1e-15);
        }
    }

    #[test]
    fn singleton_clusters_have_zero_error() {
        let (cache, cc) = random_setup(60, 4, 1, 3);
        let ctx = HeadContext::from_cache(&cache, &cc, 0, 0).unwrap();
        let q = query(4, 5);
        let errs = cluster_approx_error(&q, &ctx).unwrap();
        assert!(errs.iter().all(|&e| e < 1e-15));
        let mc = min_clusters_for_error(&q, &ctx, 1e-9).unwrap();
        assert_eq!(mc, MinClusters { count: 0, attainable: true });
    }

    #[test]
    fn two_token_cluster_error() {
        // cluster {0, 1} with logits {0, 2}; one extra pinned token with logit 0
        let cache = KvCache::new(1, 1, 1, 3, vec![0.0, 0.0, 2.0], vec![1.0, 1.0, -1.0]).unwrap();
        let cl = vec![Cluster::from_members(vec![1, 2], cache.keys(0, 0), cache.values(0, 0), 1)];
        let ctx = HeadContext::new(cache.keys(0, 0), cache.values(0, 0), 1, &cl, 0..1, 0..0).unwrap();
        let errs = cluster_approx_error(&[1.0], &ctx).unwrap();
        let z_total = 2.0 + 2f64.exp();
        let want = ((1.0 + 2f64.exp()) - 2.0 * 1f64.exp()).abs() / z_total;
        assert!((errs[0] - want).abs() < 1e-12);
        assert!((want * z_total - (8.3891 - 5.4366)).abs() < 1e-3);
    }

    #[test]
    fn approx_error_triangle_bound() {
        let (cache, cc) = random_setup(200, 6, 16, 8);
        let ctx = HeadContext::from_cache(&cache, &cc, 0, 0).unwrap();
        for seed in 0..10 {
            let q = query(6, seed);
            let errs = cluster_approx_error(&q, &ctx).unwrap();
            assert!(errs.iter().all(|&e| e >= 0.0));
            let est = engine::estimate_cluster_distribution(&q, &ctx).unwrap();
            let m = cluster_masses(&q, &ctx, &est).unwrap();
            let signed: f64 = (0..est.num_clusters())
                .map(|i| (m.log_exact[i] - m.log_total).exp() - (m.log_estimated[i] - m.log_total).exp())
                .sum();
            assert!(errs.iter().sum::<f64>() >= signed.abs() - 1e-12);
        }
    }

    #[test]
    fn min_clusters_scan() {
        let (cache, cc) = random_setup(200, 6, 16, 4);
        let ctx = HeadContext::from_cache(&cache, &cc, 0, 0).unwrap();
        let q = query(6, 1);
        let full = full_attention(&q, &ctx).unwrap();
        let est = engine::estimate_cluster_distribution(&q, &ctx).unwrap();
        let e0 = prefix_error(&q, &ctx, &est, 0, &full).unwrap();
        assert_eq!(min_clusters_for_error(&q, &ctx, e0).unwrap().count, 0);
        let mut last = usize::MAX;
        for eps in [1e-6, 1e-4, 1e-3, 1e-2, 1e-1] {
            let mc = min_clusters_for_error(&q, &ctx, eps).unwrap();
            assert!(mc.attainable);
            assert!(mc.count <= last);
            last = mc.count;
        }
    }

    #[test]
    fn percentiles() {
        let v = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert_eq!(percentile(&v, 1.0), 5.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(mean(&v), 3.0);
        assert!(mean(&[]).is_nan());
    }
}
