//! Versioned binary checkpoints.
//!
//! Layout: magic `FMCK`, `u16` version, `u32` length + UTF-8 JSON header
//! (config, counters, rng state), then named blobs until end of file:
//! `u16` name length, name, `u8` dtype (0 = f32, 1 = f64), `u8` rank,
//! `u32` extents, little-endian payload. All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::sampler::RngState;
use crate::tensor::{Precision, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: RunConfig,
    pub step: u64,
    pub epoch: u64,
    pub sampler_rng: RngState,
    pub optimizer_t: u64,
    pub precision: Precision,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub header: CheckpointHeader,
    pub params: ParamStore<T>,
    pub adam_m: Vec<Tensor<T>>,
    pub adam_v: Vec<Tensor<T>>,
}

fn put_blob<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    let name = name.as_bytes();
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name);
    out.push(T::PRECISION.dtype_code());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode_checkpoint<T: Real>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&ck.header)?;
    let mut out = Vec::with_capacity(16 + header.len() + 3 * ck.params.num_elements() * T::PRECISION.byte_width());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (id, name, t) in ck.params.iter() {
        put_blob(&mut out, &format!("{PARAM}{name}"), t);
        put_blob(&mut out, &format!("{ADAM_M}{name}"), &ck.adam_m[id.index()]);
        put_blob(&mut out, &format!("{ADAM_V}{name}"), &ck.adam_v[id.index()]);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                field,
                format!("truncated: need {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn read_blob<T: Real>(r: &mut Reader) -> Result<(String, Tensor<T>)> {
    let len = r.u16("blob name length")? as usize;
    let name = std::str::from_utf8(r.take(len, "blob name")?)
        .map_err(|_| Error::format("blob name", "not UTF-8"))?
        .to_string();
    let dtype = Precision::from_dtype_code(r.take(1, "blob dtype")?[0])
        .ok_or_else(|| Error::format("blob dtype", format!("unknown dtype in `{name}`")))?;
    let rank = r.take(1, "blob rank")?[0] as usize;
    let shape = (0..rank)
        .map(|_| r.u32("blob extents").map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let w = dtype.byte_width();
    let payload = r.take(n * w, "blob payload")?;
    let data: Vec<T> = match dtype {
        Precision::F32 => payload.chunks_exact(w).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        Precision::F64 => payload.chunks_exact(w).map(|c| T::of(f64::read_le(c))).collect(),
    };
    Ok((name, Tensor::new(shape, data)?))
}

/// Decodes a checkpoint, converting blobs to `T` when the stored dtype differs.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format("magic", "not an FMCK checkpoint"));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.u32("header length")? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len, "header")?)
        .map_err(|e| Error::format("header", e.to_string()))?;
    let mut params = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    while !r.done() {
        let (name, t) = read_blob::<T>(&mut r)?;
        if let Some(p) = name.strip_prefix(PARAM) {
            params.add(p, t).map_err(|e| Error::format("blob name", e.to_string()))?;
        } else if let Some(p) = name.strip_prefix(ADAM_M) {
            m.push((p.to_string(), t));
        } else if let Some(p) = name.strip_prefix(ADAM_V) {
            v.push((p.to_string(), t));
        } else {
            return Err(Error::format("blob name", format!("unknown blob `{name}`")));
        }
    }
    let order = |moments: Vec<(String, Tensor<T>)>, kind: &str| -> Result<Vec<Tensor<T>>> {
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; params.len()];
        for (name, t) in moments {
            let id = params
                .id(&name)
                .map_err(|_| Error::format("blob name", format!("{kind} for unknown parameter `{name}`")))?;
            if t.shape() != params.get(id).shape() {
                return Err(Error::format("blob extents", format!("{kind} of `{name}` has the wrong shape")));
            }
            slots[id.index()] = Some(t);
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.ok_or_else(|| {
                    Error::format("blob name", format!("missing {kind} for `{}`", params.name(crate::params::ParamId(i))))
                })
            })
            .collect()
    };
    let adam_m = order(m, "first moment")?;
    let adam_v = order(v, "second moment")?;
    Ok(Checkpoint {
        header,
        params,
        adam_m,
        adam_v,
    })
}

pub fn save_checkpoint<T: Real>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    std::fs::write(path, bytes).map_err(|e| Error::storage(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode_checkpoint(&bytes)
}

/// Reads only the header, e.g. to pick the precision before a full load.
pub fn peek_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format("magic", "not an FMCK checkpoint"));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.u32("header length")? as usize;
    serde_json::from_slice(r.take(len, "header")?).map_err(|e| Error::format("header", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mae::ModelConfig;
    use crate::train::Trainer;

    fn tiny() -> Checkpoint<f64> {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            dim: 8,
            depth: 1,
            heads: 2,
            decoder_depth: 1,
            decoder_width: 8,
            decoder_heads: 2,
            ..ModelConfig::default()
        };
        Trainer::<f64>::new(cfg).unwrap().checkpoint()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = tiny();
        let bytes = encode_checkpoint(&ck).unwrap();
        assert_eq!(&bytes[..4], b"FMCK");
        let back = decode_checkpoint::<f64>(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert_eq!(back.params.hash(), ck.params.hash());
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode_checkpoint(&tiny()).unwrap();
        bytes[4] = 9;
        let err = decode_checkpoint::<f64>(&bytes).unwrap_err();
        assert!(matches!(err, Error::Version { found: 9, expected: 1 }));
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let bytes = encode_checkpoint(&tiny()).unwrap();
        assert!(matches!(
            decode_checkpoint::<f64>(&bytes[..bytes.len() - 3]),
            Err(Error::Format { field: "blob payload", .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint::<f64>(&bad), Err(Error::Format { field: "magic", .. })));
        assert!(matches!(decode_checkpoint::<f64>(&bytes[..10]), Err(Error::Format { .. })));
    }

    #[test]
    fn precision_conversion_on_load() {
        let ck = tiny();
        let bytes = encode_checkpoint(&ck).unwrap();
        let single = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(single.params.len(), ck.params.len());
        let again = decode_checkpoint::<f32>(&encode_checkpoint(&single).unwrap()).unwrap();
        assert_eq!(again.params.hash(), single.params.hash());
    }
}
