//! `.slamtrace` binary format.
//!
//! ```text
//! magic        8 bytes  "SLAMTRC\0"
//! version      u32 LE
//! model_id     u32 LE byte length, then UTF-8 bytes
//! n_layers     u32 LE, then n_layers × u32 LE layer ids (strictly increasing)
//! d_model      u32 LE
//! num_tokens   u32 LE
//! prompt_len   u32 LE
//! tokens       num_tokens × u32 LE
//! payload      n_layers × (num_tokens × d_model) f32 LE, row-major, layer order as above
//! ```
//!
//! The header is fully validated before any matrix is read, and the payload
//! must have exactly the size the header implies.

use std::io::Write;
use std::path::Path;

use super::ActivationTrace;
use crate::error::{Error, Result};

pub const TRACE_MAGIC: &[u8; 8] = b"SLAMTRC\0";
pub const TRACE_VERSION: u32 = 1;

pub fn encode_trace(trace: &ActivationTrace) -> Vec<u8> {
    let n = trace.num_tokens();
    let d = trace.d_model();
    let mut out = Vec::with_capacity(64 + trace.layer_ids().len() * n * d * 4);
    out.extend_from_slice(TRACE_MAGIC);
    out.extend_from_slice(&TRACE_VERSION.to_le_bytes());
    let id = trace.model_id().as_bytes();
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&(trace.layer_ids().len() as u32).to_le_bytes());
    for &l in trace.layer_ids() {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(trace.prompt_len() as u32).to_le_bytes());
    for &t in trace.tokens() {
        out.extend_from_slice(&t.to_le_bytes());
    }
    for m in trace.matrices() {
        for v in m {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Parse {
                offset: self.pos,
                message: format!("truncated while reading {what}"),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode_trace(bytes: &[u8]) -> Result<ActivationTrace> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != TRACE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic, not a .slamtrace file".into(),
        });
    }
    let version = r.u32("version")?;
    if version != TRACE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: TRACE_VERSION,
        });
    }
    let id_len = r.u32("model_id length")? as usize;
    let id_off = r.pos;
    let id = std::str::from_utf8(r.take(id_len, "model_id")?)
        .map_err(|e| Error::Parse {
            offset: id_off + e.valid_up_to(),
            message: "model_id is not UTF-8".into(),
        })?
        .to_string();
    let n_layers = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(4096));
    for _ in 0..n_layers {
        layers.push(r.u32("layer id")? as usize);
    }
    let d_model = r.u32("d_model")? as usize;
    let num_tokens = r.u32("token count")? as usize;
    let prompt_len = r.u32("prompt_len")? as usize;
    let tokens_off = r.pos;
    let tok_bytes = r.take(num_tokens * 4, "tokens")?;
    let tokens: Vec<u32> = tok_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();

    // Header is complete; validate it before touching the payload.
    if d_model == 0 {
        return Err(Error::Parse {
            offset: tokens_off,
            message: "d_model must be positive".into(),
        });
    }
    if layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invariant("layer ids not strictly increasing".into()));
    }
    if prompt_len > num_tokens {
        return Err(Error::Invariant(format!(
            "prompt_len {prompt_len} exceeds token count {num_tokens}"
        )));
    }
    let per_layer = num_tokens * d_model * 4;
    let expected = per_layer * n_layers;
    let remaining = bytes.len() - r.pos;
    if remaining != expected {
        let rows_found = if num_tokens * d_model == 0 || n_layers == 0 {
            0
        } else {
            remaining / (4 * d_model * n_layers)
        };
        return Err(Error::Dimension(format!(
            "header declares {n_layers} layers x {num_tokens} tokens x {d_model} dims \
             ({expected} payload bytes) but payload has {remaining} bytes (~{rows_found} rows per layer)"
        )));
    }
    let mut mats = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let b = r.take(per_layer, "activations")?;
        mats.push(
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        );
    }
    ActivationTrace::new(id, layers, d_model, tokens, mats, prompt_len)
}

pub fn save_trace(trace: &ActivationTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_trace(trace);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<ActivationTrace> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_trace(&bytes)
}

/// Per-layer mean/std sidecar written next to bridge traces for cross-language checks.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceChecksum {
    pub layer: usize,
    pub mean: f64,
    pub std: f64,
}

/// Mean and population std over every value of each layer matrix.
pub fn trace_checksums(trace: &ActivationTrace) -> Vec<TraceChecksum> {
    trace
        .layer_ids()
        .iter()
        .map(|&l| {
            let m = trace.layer(l).expect("listed layer");
            let n = m.len().max(1) as f64;
            let mean = m.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = m.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            TraceChecksum {
                layer: l,
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}
