//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic      8 bytes  "DPTFSNET"
//! version    u32      1
//! config_len u32      followed by config_len bytes of key=value text
//! n_tensors  u32
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   rank     u32, dims (u64 each)
//!   data     f64 * prod(dims)
//! ```
//!
//! Tensors are written in parameter registration order. Loading rebuilds the
//! network from the stored config and then requires every stored name and
//! shape to match it exactly.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::network::DptFsNet;
use crate::error::{Error, Result};
use crate::kv;

pub const MAGIC: &[u8; 8] = b"DPTFSNET";
pub const VERSION: u32 = 1;

pub fn encode(net: &DptFsNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = kv::render(&net.config.to_kv());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(net.params.len() as u32).to_le_bytes());
    for (name, t) in net.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
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
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.bytes(n)?).map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

/// Reads only the stored configuration.
pub fn decode_config(buf: &[u8]) -> Result<ModelConfig> {
    let mut r = Reader { buf, pos: 0 };
    read_header(&mut r)
}

fn read_header(r: &mut Reader<'_>) -> Result<ModelConfig> {
    if r.bytes(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    ModelConfig::from_kv_text(r.string()?)
}

/// Rebuilds a network from checkpoint bytes. `expected`, when given, must
/// equal the stored configuration.
pub fn decode(buf: &[u8], expected: Option<&ModelConfig>) -> Result<DptFsNet> {
    let mut r = Reader { buf, pos: 0 };
    let config = read_header(&mut r)?;
    if let Some(e) = expected {
        if *e != config {
            return Err(Error::Checkpoint(format!(
                "stored config differs from requested config:\n{}",
                describe_diff(e, &config)
            )));
        }
    }
    let mut net = DptFsNet::new(config, 0)?;
    let n = r.u32()? as usize;
    let mut seen = vec![false; net.params.len()];
    for _ in 0..n {
        let name = r.string()?.to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let id = net.params.id(&name).ok_or_else(|| Error::Parameter {
            name: name.clone(),
            reason: "not part of this architecture".into(),
        })?;
        let target = net.params.get_mut(id);
        if target.shape() != dims.as_slice() {
            return Err(Error::Parameter {
                name,
                reason: format!("stored shape {dims:?}, expected {:?}", target.shape()),
            });
        }
        let raw = r.bytes(8 * target.numel())?;
        for (dst, chunk) in target.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::Parameter {
                name,
                reason: "stored twice".into(),
            });
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let id = net.params.ids().nth(missing).expect("index in range");
        return Err(Error::Parameter {
            name: net.params.name(id).to_string(),
            reason: "missing from checkpoint".into(),
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(net)
}

fn describe_diff(a: &ModelConfig, b: &ModelConfig) -> String {
    let (ka, kb) = (a.to_kv(), b.to_kv());
    ka.iter()
        .filter(|(k, v)| kb.get(*k) != Some(v))
        .map(|(k, v)| format!("  {k}: requested {v}, stored {}", kb.get(k).map(String::as_str).unwrap_or("-")))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn save(net: &DptFsNet, path: &Path) -> Result<()> {
    fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<DptFsNet> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let net = DptFsNet::new(ModelConfig::toy(), 3).unwrap();
        let bytes = encode(&net);
        let back = decode(&bytes, Some(&net.config)).unwrap();
        assert_eq!(encode(&back), bytes);
        for (a, b) in net.params.tensors().iter().zip(back.params.tensors()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let net = DptFsNet::new(ModelConfig::toy(), 3).unwrap();
        let mut bytes = encode(&net);
        // Corrupt the first dim of the first tensor (encoder.conv_in.conv.weight).
        let cfg_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let first = 16 + cfg_len + 4;
        let name_len = u32::from_le_bytes(bytes[first..first + 4].try_into().unwrap()) as usize;
        let dim0 = first + 4 + name_len + 4;
        bytes[dim0] = 9;
        match decode(&bytes, None) {
            Err(Error::Parameter { name, .. }) => assert_eq!(name, "encoder.conv_in.conv.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_config_mismatch_and_garbage() {
        let net = DptFsNet::new(ModelConfig::toy(), 3).unwrap();
        let bytes = encode(&net);
        let mut other = ModelConfig::toy();
        other.blocks = 2;
        assert!(decode(&bytes, Some(&other)).is_err());
        assert!(decode(b"NOTACKPT", None).is_err());
        assert!(decode(&bytes[..bytes.len() - 3], None).is_err());
    }
}
