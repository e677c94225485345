//! Synthetic KV caches with blob-structured keys and queries whose
//! attention is peaked, heavy-tailed or uniform on demand.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::mix_seed;
use crate::kvcache::{DumpError, KvCache, QueryTrace};
use crate::par::{self, Execution};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dump(#[from] DumpError),
}

/// How queries align with the key blobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailProfile {
    /// Aligned with one blob centroid; attention concentrates there.
    Peaked,
    /// Equidistant from several blobs; attention spreads across them.
    Heavy,
    /// Zero query; attention is uniform.
    Uniform,
    /// Per query head, cycling peaked, heavy, uniform.
    Mixed,
}

impl TailProfile {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "peaked" => Some(Self::Peaked),
            "heavy" => Some(Self::Heavy),
            "uniform" => Some(Self::Uniform),
            "mixed" => Some(Self::Mixed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub context_len: usize,
    pub head_dim: usize,
    pub num_blobs: usize,
    /// Per-coordinate std-dev of keys around their blob center.
    pub blob_spread: f64,
    /// Norm of every blob center.
    pub blob_separation: f64,
    pub tail_profile: TailProfile,
    /// Logit of an aligned blob's center for peaked queries; heavy queries
    /// use half of it per blob.
    pub query_strength: f64,
    pub seed: u64,
    pub layers: usize,
    pub kv_heads: usize,
    pub gqa_group: usize,
    pub steps: usize,
    pub sink: usize,
    pub window: usize,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            context_len: 2048,
            head_dim: 64,
            num_blobs: 32,
            blob_spread: 1.0,
            blob_separation: 10.0,
            tail_profile: TailProfile::Peaked,
            query_strength: 12.0,
            seed: 0,
            layers: 1,
            kv_heads: 2,
            gqa_group: 4,
            steps: 8,
            sink: 4,
            window: 64,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let positive = [
            ("context_len", self.context_len),
            ("head_dim", self.head_dim),
            ("num_blobs", self.num_blobs),
            ("layers", self.layers),
            ("kv_heads", self.kv_heads),
            ("gqa_group", self.gqa_group),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(WorkloadError::Invalid(format!("{name} must be positive")));
        }
        if self.context_len < self.sink + self.window + self.num_blobs {
            return Err(WorkloadError::Invalid(format!(
                "context_len {} < sink {} + window {} + num_blobs {}",
                self.context_len, self.sink, self.window, self.num_blobs
            )));
        }
        for (name, v) in [
            ("blob_spread", self.blob_spread),
            ("blob_separation", self.blob_separation),
            ("query_strength", self.query_strength),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(WorkloadError::Invalid(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn num_query_heads(&self) -> usize {
        self.kv_heads * self.gqa_group
    }

    /// Profile used by query head `head` of `layer`.
    pub fn profile_of(&self, layer: usize, head: usize) -> TailProfile {
        match self.tail_profile {
            TailProfile::Mixed => {
                [TailProfile::Peaked, TailProfile::Heavy, TailProfile::Uniform][(layer * self.num_query_heads() + head) % 3]
            }
            p => p,
        }
    }
}

/// Blob centers plus generated keys and values of one kv head.
struct HeadBlobs {
    centers: Vec<Vec<f64>>,
    keys: Vec<f32>,
    values: Vec<f32>,
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn generate_head(spec: &WorkloadSpec, layer: usize, kv_head: usize) -> HeadBlobs {
    let (n, d, b) = (spec.context_len, spec.head_dim, spec.num_blobs);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 1 + layer as u64, kv_head as u64));
    let centers: Vec<Vec<f64>> = (0..b)
        .map(|_| unit_vector(&mut rng, d).into_iter().map(|x| x * spec.blob_separation).collect())
        .collect();
    // uneven blob sizes: Dirichlet(1) weights
    let weights: Vec<f64> = (0..b).map(|_| Exp1.sample(&mut rng)).collect();
    let total: f64 = weights.iter().sum();
    let mut cdf = Vec::with_capacity(b);
    let mut acc = 0.0;
    for w in &weights {
        acc += w / total;
        cdf.push(acc);
    }
    let draw = |rng: &mut ChaCha8Rng| {
        let u: f64 = rng.random();
        cdf.iter().position(|&c| u < c).unwrap_or(b - 1)
    };
    let mut labels: Vec<usize> = (0..n).map(|_| draw(&mut rng)).collect();
    // every blob owns at least one middle token
    let mut seeded: Vec<usize> = (spec.sink..n - spec.window).collect();
    seeded.shuffle(&mut rng);
    for (blob, &t) in seeded.iter().take(b).enumerate() {
        labels[t] = blob;
    }
    let mut keys = Vec::with_capacity(n * d);
    let mut values = Vec::with_capacity(n * d);
    for &label in &labels {
        for &c in &centers[label] {
            let z: f64 = StandardNormal.sample(&mut rng);
            keys.push((c + spec.blob_spread * z) as f32);
        }
        for _ in 0..d {
            let z: f32 = StandardNormal.sample(&mut rng);
            values.push(z);
        }
    }
    HeadBlobs { centers, keys, values }
}

fn make_query(
    spec: &WorkloadSpec,
    profile: TailProfile,
    centers: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let d = spec.head_dim;
    let sqrt_d = (d as f64).sqrt();
    // scale so that q·center/√d equals `logit` for a center of norm `separation`
    let toward = |dir: &[f64], logit: f64| -> Vec<f64> {
        let scale = if spec.blob_separation > 0.0 {
            logit * sqrt_d / spec.blob_separation
        } else {
            0.0
        };
        dir.iter().map(|x| x * scale).collect()
    };
    let jitter = 0.05;
    match profile {
        TailProfile::Uniform => vec![0.0; d],
        TailProfile::Peaked => {
            let b = rng.random_range(0..centers.len());
            let mut dir = unit_dir(&centers[b]);
            for x in &mut dir {
                let z: f64 = StandardNormal.sample(rng);
                *x += jitter * z / sqrt_d;
            }
            to_f32(&toward(&dir, spec.query_strength))
        }
        TailProfile::Heavy => {
            let count = (centers.len() / 4).max(centers.len().min(8));
            let mut idx: Vec<usize> = (0..centers.len()).collect();
            idx.shuffle(rng);
            let mut q = vec![0.0; d];
            for &b in &idx[..count] {
                for (acc, x) in q.iter_mut().zip(toward(&unit_dir(&centers[b]), spec.query_strength / 2.0)) {
                    *acc += x;
                }
            }
            to_f32(&q)
        }
        TailProfile::Mixed => unreachable!("resolved per head"),
    }
}

fn unit_dir(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| x / norm).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn generate(spec: &WorkloadSpec) -> Result<(KvCache, QueryTrace), WorkloadError> {
    generate_with(spec, Execution::default())
}

pub fn generate_with(spec: &WorkloadSpec, exec: Execution) -> Result<(KvCache, QueryTrace), WorkloadError> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.layers)
        .flat_map(|l| (0..spec.kv_heads).map(move |h| (l, h)))
        .collect();
    let heads = par::map(exec, &jobs, |&(l, h)| generate_head(spec, l, h));

    let q_heads = spec.num_query_heads();
    let mut keys = Vec::with_capacity(jobs.len() * spec.context_len * spec.head_dim);
    let mut values = Vec::with_capacity(keys.capacity());
    for h in &heads {
        keys.extend_from_slice(&h.keys);
        values.extend_from_slice(&h.values);
    }
    let mut queries = Vec::with_capacity(spec.steps * spec.layers * q_heads * spec.head_dim);
    for step in 0..spec.steps {
        for layer in 0..spec.layers {
            for head in 0..q_heads {
                let kv = head / spec.gqa_group;
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                    spec.seed ^ 0x5157_4552_5953,
                    (step * spec.layers + layer) as u64,
                    head as u64,
                ));
                let centers = &heads[layer * spec.kv_heads + kv].centers;
                queries.extend(make_query(spec, spec.profile_of(layer, head), centers, &mut rng));
            }
        }
    }
    let cache = KvCache::new(spec.layers, spec.kv_heads, spec.head_dim, spec.context_len, keys, values)?;
    let trace = QueryTrace::new(spec.steps, spec.layers, q_heads, spec.gqa_group, spec.head_dim, queries)?;
    Ok((cache, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::kmeans_fit;
    use crate::engine::{full_attention, HeadContext};

    fn small(profile: TailProfile, seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            context_len: 512,
            head_dim: 16,
            num_blobs: 8,
            tail_profile: profile,
            seed,
            kv_heads: 1,
            gqa_group: 2,
            steps: 2,
            window: 16,
            ..WorkloadSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let spec = small(TailProfile::Mixed, 3);
        let a = generate_with(&spec, Execution::Sequential).unwrap();
        let b = generate_with(&spec, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(TailProfile::Mixed, 4)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn uniform_queries_give_uniform_attention() {
        let (cache, trace) = generate(&small(TailProfile::Uniform, 1)).unwrap();
        let q = trace.query(0, 0, 1);
        assert!(q.iter().all(|&x| x == 0.0));
        let ctx = HeadContext::new(cache.keys(0, 0), cache.values(0, 0), 16, &[], 0..0, 0..0).unwrap();
        let w = ctx.attention_weights(q).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0 / 512.0).abs() < 1e-6));
        let _ = full_attention(q, &ctx).unwrap();
    }

    #[test]
    fn single_blob_mean_is_recovered() {
        let spec = WorkloadSpec {
            num_blobs: 1,
            ..small(TailProfile::Peaked, 9)
        };
        let (cache, _) = generate(&spec).unwrap();
        let fit = kmeans_fit(cache.keys(0, 0), 16, 1, 5, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(9, 1, 0));
        let center: Vec<f64> = unit_vector(&mut rng, 16).into_iter().map(|x| x * 10.0).collect();
        // sampling error of a 512-point mean with unit spread
        for (c, m) in fit.centroids[0].iter().zip(&center) {
            assert!((c - m).abs() < 4.0 / (512f64).sqrt(), "{c} vs {m}");
        }
    }

    #[test]
    fn validation() {
        let mut spec = small(TailProfile::Peaked, 0);
        spec.context_len = spec.sink + spec.window + spec.num_blobs - 1;
        assert!(generate(&spec).is_err());
        let spec = WorkloadSpec {
            kv_heads: 0,
            ..small(TailProfile::Peaked, 0)
        };
        assert!(generate(&spec).is_err());
        assert_eq!(TailProfile::parse("heavy"), Some(TailProfile::Heavy));
        assert_eq!(TailProfile::parse("nope"), None);
    }

    #[test]
    fn mixed_profile_cycles_by_head() {
        let spec = WorkloadSpec {
            gqa_group: 4,
            ..small(TailProfile::Mixed, 0)
        };
        let got: Vec<TailProfile> = (0..4).map(|h| spec.profile_of(0, h)).collect();
        assert_eq!(
            got,
            vec![TailProfile::Peaked, TailProfile::Heavy, TailProfile::Uniform, TailProfile::Peaked]
        );
    }
}
