//! Hierarchical top-p sparse attention over a clustered KV cache.
//!
//! Keys of each head are grouped by k-means. At decode time the query scores
//! cluster centroids, keeps the smallest set of clusters covering `p1` of the
//! estimated mass, attends exactly to the tokens of the clusters covering
//! `p2` of that, and treats the rest of the kept clusters as one weighted
//! value mean each.

pub mod clustering;
pub mod engine;
pub mod experiment;
pub mod kvcache;
pub mod metrics;
pub mod numerics;
pub mod par;
pub mod selection;
pub mod workload;
