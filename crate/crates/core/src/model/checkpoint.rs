//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SDLMCKPT" | version u32
//! header: field count u32, then u64 fields (model config)
//! meta:   count u32, then (key: u16 len + utf8, value: u32 len + utf8)
//! tensors: count u32, then (name: u16 len + utf8, ndim u8, dims u32 * ndim, f32 data)
//! SHA-256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::ArrayViewMutD;
use sha2::{Digest, Sha256};

use super::params::{AbsentSelfCond, DenoiserParams, ModelConfig};
use crate::{Error, Result, Scalar};

const MAGIC: &[u8; 8] = b"SDLMCKPT";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Weights plus optional optimizer moments and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub params: DenoiserParams<S>,
    /// First and second moment buffers of the optimizer.
    pub moments: Option<(DenoiserParams<S>, DenoiserParams<S>)>,
    pub meta: BTreeMap<String, String>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(params: DenoiserParams<S>) -> Self {
        Checkpoint {
            params,
            moments: None,
            meta: BTreeMap::new(),
        }
    }
}

fn header_fields(c: &ModelConfig) -> Vec<u64> {
    vec![
        c.vocab as u64,
        c.d_model as u64,
        c.n_layers as u64,
        c.n_heads as u64,
        c.d_ff as u64,
        c.max_len as u64,
        c.time_steps as u64,
        c.time_quantum as u64,
        c.tie_embeddings as u64,
        matches!(c.absent_self_cond, AbsentSelfCond::Uniform) as u64,
        c.input_temperature.to_bits(),
    ]
}

fn config_from_fields(f: &[u64], offset: u64) -> Result<ModelConfig> {
    if f.len() != 11 {
        return Err(Error::Format {
            offset,
            detail: format!("expected 11 header fields, found {}", f.len()),
        });
    }
    let cfg = ModelConfig {
        vocab: f[0] as usize,
        d_model: f[1] as usize,
        n_layers: f[2] as usize,
        n_heads: f[3] as usize,
        d_ff: f[4] as usize,
        max_len: f[5] as usize,
        time_steps: f[6] as usize,
        time_quantum: f[7] as usize,
        tie_embeddings: f[8] != 0,
        absent_self_cond: if f[9] != 0 {
            AbsentSelfCond::Uniform
        } else {
            AbsentSelfCond::Zero
        },
        input_temperature: f64::from_bits(f[10]),
    };
    cfg.validate().map_err(|e| Error::Format {
        offset,
        detail: format!("invalid model header: {e}"),
    })?;
    Ok(cfg)
}

pub fn encode<S: Scalar>(ckpt: &Checkpoint<S>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let fields = header_fields(&ckpt.params.config);
    buf.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    for f in fields {
        buf.extend_from_slice(&f.to_le_bytes());
    }
    buf.extend_from_slice(&(ckpt.meta.len() as u32).to_le_bytes());
    for (k, v) in &ckpt.meta {
        buf.extend_from_slice(&(k.len() as u16).to_le_bytes());
        buf.extend_from_slice(k.as_bytes());
        buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
        buf.extend_from_slice(v.as_bytes());
    }
    let mut tensors: Vec<(String, ndarray::ArrayViewD<'_, S>)> = ckpt.params.tensors();
    if let Some((m, v)) = &ckpt.moments {
        tensors.extend(m.tensors().into_iter().map(|(n, t)| (format!("opt.m.{n}"), t)));
        tensors.extend(v.tensors().into_iter().map(|(n, t)| (format!("opt.v.{n}"), t)));
    }
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.ndim() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.iter() {
            buf.extend_from_slice(&v.to_f32_bits().to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let start = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: start as u64,
            detail: format!("{what} is not valid UTF-8"),
        })
    }
}

fn fill<S: Scalar>(
    slot: &mut ArrayViewMutD<'_, S>,
    name: &str,
    shape: &[usize],
    data: &[u8],
    offset: usize,
) -> Result<()> {
    if slot.shape() != shape {
        return Err(Error::Format {
            offset: offset as u64,
            detail: format!("tensor `{name}` has shape {shape:?}, expected {:?}", slot.shape()),
        });
    }
    for (dst, chunk) in slot.iter_mut().zip(data.chunks_exact(4)) {
        *dst = S::from_f32_bits(u32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(())
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Checkpoint<S>> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: "file too short to be a checkpoint".into(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic".into(),
        });
    }
    let body_len = bytes.len() - DIGEST_LEN;
    if Sha256::digest(&bytes[..body_len]).as_slice() != &bytes[body_len..] {
        return Err(Error::Format {
            offset: body_len as u64,
            detail: "checksum mismatch (corrupt or truncated file)".into(),
        });
    }
    let mut r = Reader {
        bytes: &bytes[..body_len],
        pos: 8,
    };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 8,
            detail: format!("unsupported version {version}"),
        });
    }
    let header_at = r.pos as u64;
    let n_fields = r.u32("header length")? as usize;
    let fields = (0..n_fields)
        .map(|_| r.u64("header field"))
        .collect::<Result<Vec<_>>>()?;
    let config = config_from_fields(&fields, header_at)?;

    let mut meta = BTreeMap::new();
    for _ in 0..r.u32("meta count")? {
        let kl = r.u16("meta key length")? as usize;
        let k = r.string(kl, "meta key")?;
        let vl = r.u32("meta value length")? as usize;
        let v = r.string(vl, "meta value")?;
        meta.insert(k, v);
    }

    let template = DenoiserParams::<S>::init(&config, 0)?.zeros_like();
    let mut params = template.clone();
    let mut m = template.clone();
    let mut v = template;
    let mut seen = BTreeMap::new();
    let mut has_moments = false;
    let count = r.u32("tensor count")?;
    for _ in 0..count {
        let entry_at = r.pos;
        let nl = r.u16("tensor name length")? as usize;
        let name = r.string(nl, "tensor name")?;
        let ndim = r.u8("tensor rank")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32("tensor dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r.take(numel * 4, "tensor data")?;
        let (target, key) = if let Some(rest) = name.strip_prefix("opt.m.") {
            has_moments = true;
            (&mut m, rest.to_string())
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            has_moments = true;
            (&mut v, rest.to_string())
        } else {
            (&mut params, name.clone())
        };
        let mut slots = target.tensors_mut();
        let Some((_, slot)) = slots.iter_mut().find(|(n, _)| *n == key) else {
            return Err(Error::Format {
                offset: entry_at as u64,
                detail: format!("unknown tensor `{name}`"),
            });
        };
        fill(slot, &name, &shape, data, entry_at)?;
        seen.insert(name, ());
    }
    if r.pos != body_len {
        return Err(Error::Format {
            offset: r.pos as u64,
            detail: "trailing bytes after the tensor table".into(),
        });
    }
    for (name, _) in params.tensors() {
        if !seen.contains_key(&name) {
            return Err(Error::Format {
                offset: r.pos as u64,
                detail: format!("missing tensor `{name}`"),
            });
        }
    }
    Ok(Checkpoint {
        params,
        moments: has_moments.then_some((m, v)),
        meta,
    })
}

/// Write atomically: a temporary sibling file is renamed into place.
pub fn save_checkpoint<S: Scalar>(path: &Path, ckpt: &Checkpoint<S>) -> Result<()> {
    let bytes = encode(ckpt);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
