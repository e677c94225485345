//! Dense per-head KV cache, decode query traces and the DPKV dump format.
//!
//! DPKV layout (little-endian throughout):
//!
//! ```text
//! magic      "DPKV"
//! version    u32 = 1
//! header     num_layers, num_kv_heads, num_query_heads, head_dim,
//!            context_len, num_steps                     (u32 each)
//! payload    for layer, for kv head: keys (N×d f32, row-major),
//!                                    values (N×d f32, row-major)
//!            for step, for layer, for query head: query (d f32)
//! trailer    CRC32 of the payload bytes (u32)
//! ```

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"DPKV";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 6 * 4;
const TRAILER_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("not a DPKV file")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt payload: checksum {stored:#010x} != computed {computed:#010x}")]
    CorruptPayload { stored: u32, computed: u32 },
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("invalid cache: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Keys and values for every (layer, kv head), each an `N×d` row-major
/// block of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    num_layers: usize,
    num_kv_heads: usize,
    head_dim: usize,
    context_len: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl KvCache {
    pub fn new(
        num_layers: usize,
        num_kv_heads: usize,
        head_dim: usize,
        context_len: usize,
        keys: Vec<f32>,
        values: Vec<f32>,
    ) -> Result<Self, DumpError> {
        if num_layers == 0 || num_kv_heads == 0 || head_dim == 0 || context_len == 0 {
            return Err(DumpError::Validation(
                "num_layers, num_kv_heads, head_dim and context_len must be positive".into(),
            ));
        }
        let want = num_layers * num_kv_heads * context_len * head_dim;
        if keys.len() != want || values.len() != want {
            return Err(DumpError::Validation(format!(
                "expected {want} key and value entries, got {} and {}",
                keys.len(),
                values.len()
            )));
        }
        if keys.iter().chain(&values).any(|x| !x.is_finite()) {
            return Err(DumpError::Validation("non-finite key or value entry".into()));
        }
        Ok(Self {
            num_layers,
            num_kv_heads,
            head_dim,
            context_len,
            keys,
            values,
        })
    }

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

    fn head_range(&self, layer: usize, kv_head: usize) -> std::ops::Range<usize> {
        assert!(layer < self.num_layers && kv_head < self.num_kv_heads);
        let block = self.context_len * self.head_dim;
        let start = (layer * self.num_kv_heads + kv_head) * block;
        start..start + block
    }

    /// `N×d` keys of one head.
    pub fn keys(&self, layer: usize, kv_head: usize) -> &[f32] {
        &self.keys[self.head_range(layer, kv_head)]
    }

    /// `N×d` values of one head.
    pub fn values(&self, layer: usize, kv_head: usize) -> &[f32] {
        &self.values[self.head_range(layer, kv_head)]
    }

    pub fn key(&self, layer: usize, kv_head: usize, token: usize) -> &[f32] {
        let d = self.head_dim;
        &self.keys(layer, kv_head)[token * d..(token + 1) * d]
    }

    pub fn value(&self, layer: usize, kv_head: usize, token: usize) -> &[f32] {
        let d = self.head_dim;
        &self.values(layer, kv_head)[token * d..(token + 1) * d]
    }
}

/// Decode-time queries, one `d`-vector per (step, layer, query head).
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTrace {
    num_steps: usize,
    num_layers: usize,
    num_query_heads: usize,
    gqa_group: usize,
    head_dim: usize,
    queries: Vec<f32>,
}

impl QueryTrace {
    pub fn new(
        num_steps: usize,
        num_layers: usize,
        num_query_heads: usize,
        gqa_group: usize,
        head_dim: usize,
        queries: Vec<f32>,
    ) -> Result<Self, DumpError> {
        if num_layers == 0 || num_query_heads == 0 || gqa_group == 0 || head_dim == 0 {
            return Err(DumpError::Validation(
                "num_layers, num_query_heads, gqa_group and head_dim must be positive".into(),
            ));
        }
        if !num_query_heads.is_multiple_of(gqa_group) {
            return Err(DumpError::Validation(format!(
                "{num_query_heads} query heads is not a multiple of group size {gqa_group}"
            )));
        }
        let want = num_steps * num_layers * num_query_heads * head_dim;
        if queries.len() != want {
            return Err(DumpError::Validation(format!(
                "expected {want} query entries, got {}",
                queries.len()
            )));
        }
        if queries.iter().any(|x| !x.is_finite()) {
            return Err(DumpError::Validation("non-finite query entry".into()));
        }
        Ok(Self {
            num_steps,
            num_layers,
            num_query_heads,
            gqa_group,
            head_dim,
            queries,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_query_heads(&self) -> usize {
        self.num_query_heads
    }

    pub fn gqa_group(&self) -> usize {
        self.gqa_group
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// KV head that query head `head` reads from.
    pub fn kv_head_of(&self, head: usize) -> usize {
        head / self.gqa_group
    }

    pub fn query(&self, step: usize, layer: usize, head: usize) -> &[f32] {
        assert!(step < self.num_steps && layer < self.num_layers && head < self.num_query_heads);
        let d = self.head_dim;
        let idx = (step * self.num_layers + layer) * self.num_query_heads + head;
        &self.queries[idx * d..(idx + 1) * d]
    }
}

fn check_pair(cache: &KvCache, trace: &QueryTrace) -> Result<(), DumpError> {
    if cache.num_layers != trace.num_layers || cache.head_dim != trace.head_dim {
        return Err(DumpError::Validation(
            "cache and trace disagree on num_layers or head_dim".into(),
        ));
    }
    if cache.num_kv_heads * trace.gqa_group != trace.num_query_heads {
        return Err(DumpError::Validation(format!(
            "num_query_heads {} != num_kv_heads {} x gqa_group {}",
            trace.num_query_heads, cache.num_kv_heads, trace.gqa_group
        )));
    }
    Ok(())
}

fn to_u32(x: usize, what: &str) -> Result<u32, DumpError> {
    u32::try_from(x).map_err(|_| DumpError::Validation(format!("{what} does not fit in u32")))
}

/// Serialize a cache and trace into DPKV bytes.
pub fn encode_dump(cache: &KvCache, trace: &QueryTrace) -> Result<Vec<u8>, DumpError> {
    check_pair(cache, trace)?;
    let header = [
        to_u32(cache.num_layers, "num_layers")?,
        to_u32(cache.num_kv_heads, "num_kv_heads")?,
        to_u32(trace.num_query_heads, "num_query_heads")?,
        to_u32(cache.head_dim, "head_dim")?,
        to_u32(cache.context_len, "context_len")?,
        to_u32(trace.num_steps, "num_steps")?,
    ];
    let payload_len = 4 * (2 * cache.keys.len() + trace.queries.len());
    let mut out = Vec::with_capacity(HEADER_LEN + payload_len + TRAILER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for h in header {
        out.extend_from_slice(&h.to_le_bytes());
    }
    for layer in 0..cache.num_layers {
        for head in 0..cache.num_kv_heads {
            for x in cache.keys(layer, head).iter().chain(cache.values(layer, head)) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    for x in &trace.queries {
        out.extend_from_slice(&x.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Parse DPKV bytes. Either both structures come back valid or an error does.
pub fn decode_dump(bytes: &[u8]) -> Result<(KvCache, QueryTrace), DumpError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(DumpError::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(DumpError::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(DumpError::UnsupportedVersion(version));
    }
    if bytes.len() < HEADER_LEN {
        return Err(DumpError::Truncated {
            expected: (HEADER_LEN + TRAILER_LEN) as u64,
            found: bytes.len() as u64,
        });
    }
    let h: Vec<u64> = (0..6).map(|i| u64::from(read_u32(bytes, 8 + 4 * i))).collect();
    let (layers, kv_heads, q_heads, d, n, steps) = (h[0], h[1], h[2], h[3], h[4], h[5]);
    if layers == 0 || kv_heads == 0 || q_heads == 0 || d == 0 || n == 0 {
        return Err(DumpError::Validation("zero dimension in header".into()));
    }
    if q_heads % kv_heads != 0 {
        return Err(DumpError::Validation(format!(
            "num_query_heads {q_heads} is not a multiple of num_kv_heads {kv_heads}"
        )));
    }
    let product = |xs: &[u64]| xs.iter().try_fold(1u64, |acc, &x| acc.checked_mul(x));
    let expected = product(&[layers, kv_heads, n, d, 2])
        .zip(product(&[steps, layers, q_heads, d]))
        .and_then(|(kv, q)| kv.checked_add(q))
        .and_then(|floats| floats.checked_mul(4))
        .and_then(|payload| payload.checked_add((HEADER_LEN + TRAILER_LEN) as u64))
        .unwrap_or(u64::MAX);
    if bytes.len() as u64 != expected {
        return Err(DumpError::Truncated {
            expected,
            found: bytes.len() as u64,
        });
    }
    let payload_end = bytes.len() - TRAILER_LEN;
    let payload = &bytes[HEADER_LEN..payload_end];
    let stored = read_u32(bytes, payload_end);
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(DumpError::CorruptPayload { stored, computed });
    }

    let (layers, kv_heads, q_heads, d, n, steps) = (
        layers as usize,
        kv_heads as usize,
        q_heads as usize,
        d as usize,
        n as usize,
        steps as usize,
    );
    let block = n * d;
    let mut keys = Vec::with_capacity(layers * kv_heads * block);
    let mut values = Vec::with_capacity(layers * kv_heads * block);
    let mut at = 0;
    for _ in 0..layers * kv_heads {
        keys.extend(read_f32s(&payload[at..at + 4 * block]));
        at += 4 * block;
        values.extend(read_f32s(&payload[at..at + 4 * block]));
        at += 4 * block;
    }
    let queries = read_f32s(&payload[at..]);
    let cache = KvCache::new(layers, kv_heads, d, n, keys, values)?;
    let trace = QueryTrace::new(steps, layers, q_heads, q_heads / kv_heads, d, queries)?;
    Ok((cache, trace))
}

/// Write a DPKV file. The bytes go to a sibling temp file first and are
/// renamed into place, so a failed write leaves nothing at `path`.
pub fn write_dump(cache: &KvCache, trace: &QueryTrace, path: &Path) -> Result<(), DumpError> {
    let bytes = encode_dump(cache, trace)?;
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<(KvCache, QueryTrace), DumpError> {
    decode_dump(&fs::read(path)?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    if let Err(e) = fs::write(&tmp, bytes) {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}
