//! Binary checkpoint files: magic, version, JSON header with a tensor
//! manifest, little-endian f64 payload and a trailing CRC32.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::HyperParams;
use crate::error::{Error, Result};
use crate::model::SelfGnn;
use crate::numerics::adam::AdamMeta;
use crate::numerics::{AdamState, Tensor};
use crate::params::ParamStore;
use crate::pipeline::DataConfig;
use crate::training::{Checkpoint, Progress};

pub const MAGIC: &[u8; 4] = b"SGNN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    hp: HyperParams,
    users: usize,
    items: usize,
    progress: Progress,
    adam: AdamMeta,
    data: Option<DataConfig>,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let params = &ckpt.model.params;
    let mut tensors: Vec<(String, &Tensor)> = params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    for (prefix, moments) in [("adam.m", &ckpt.adam.m), ("adam.v", &ckpt.adam.v)] {
        if moments.len() != params.len() {
            return Err(Error::Format("optimizer state does not match parameters".into()));
        }
        for (name, t) in params.names().iter().zip(moments) {
            tensors.push((format!("{prefix}.{name}"), t));
        }
    }
    let mut offset = 0;
    let manifest = tensors
        .iter()
        .map(|(name, t)| {
            let entry = ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel() * 8;
            entry
        })
        .collect();
    let header = Header {
        hp: ckpt.model.hp.clone(),
        users: ckpt.model.users,
        items: ckpt.model.items,
        progress: ckpt.progress,
        adam: ckpt.adam.meta(),
        data: ckpt.data.clone(),
        tensors: manifest,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| Error::Format("truncated checkpoint".into()))
}

/// Parses checkpoint bytes, verifying magic, version and checksum.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = read_u32(bytes, bytes.len() - 4)?;
    if crc32fast::hash(body) != stored {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let header_len = read_u32(bytes, 8)? as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[12..header_end])?;
    let payload = &body[header_end..];

    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected = 0;
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        if entry.offset != expected || entry.offset + numel * 8 > payload.len() {
            return Err(Error::Format(format!("bad offset for tensor `{}`", entry.name)));
        }
        let data = payload[entry.offset..entry.offset + numel * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        expected += numel * 8;
    }
    if expected != payload.len() {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    if tensors.len() % 3 != 0 {
        return Err(Error::Format("manifest is not parameters plus two moment sets".into()));
    }
    let n = tensors.len() / 3;
    let mut iter = tensors.into_iter();
    let mut params = ParamStore::new();
    for (name, t) in iter.by_ref().take(n) {
        params.insert(name, t)?;
    }
    let mut moments = |prefix: &str| -> Result<Vec<Tensor>> {
        let names = params.names().to_vec();
        names
            .iter()
            .map(|name| {
                let (got, t) = iter.next().ok_or_else(|| Error::Format("missing moment tensor".into()))?;
                if got != format!("{prefix}.{name}") {
                    return Err(Error::Format(format!("unexpected tensor `{got}`")));
                }
                Ok(t)
            })
            .collect()
    };
    let m = moments("adam.m")?;
    let v = moments("adam.v")?;
    let model = SelfGnn::from_params(&header.hp, header.users, header.items, params)?;
    let adam = AdamState {
        beta1: header.adam.beta1,
        beta2: header.adam.beta2,
        eps: header.adam.eps,
        step: header.adam.step,
        m,
        v,
    };
    Ok(Checkpoint {
        model,
        adam,
        progress: header.progress,
        data: header.data,
    })
}

/// Writes `ckpt` to `path` through a temporary file in the same directory.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn sample() -> Checkpoint {
        let hp = HyperParams {
            dim: 4,
            heads: 2,
            periods: 2,
            max_seq: 3,
            d_sal: 2,
            ..HyperParams::default()
        };
        let model = SelfGnn::new(&hp, 3, 4).unwrap();
        let adam = AdamState::new(model.params.tensors().iter().map(Tensor::shape));
        Checkpoint {
            model,
            adam,
            progress: Progress::default(),
            data: Some(DataConfig::default()),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ckpt = sample();
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(m)) if m.contains("version")));
        let mut bad = bytes.clone();
        let mid = bytes.len() - 20;
        bad[mid] ^= 1;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(m)) if m.contains("checksum")));
    }
}
