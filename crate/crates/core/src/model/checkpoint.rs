//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (config, tensor names and shapes, sampler state, free-form
//! metadata), then every tensor as little-endian `f64` in header order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"INVICLCK";
pub const FORMAT_VERSION: u32 = 1;

/// Position of the episode sampler: episode `k` of a run is drawn from
/// stream `k` of a ChaCha8 generator seeded with `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_episode: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub rng: RngState,
    pub step: u64,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    rng: RngState,
    step: u64,
    meta: serde_json::Value,
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

pub fn write_checkpoint(ck: &Checkpoint, out: &mut impl Write) -> Result<()> {
    let header = Header {
        config: ck.state.config,
        tensors: ck
            .state
            .names()
            .iter()
            .zip(ck.state.params())
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        rng: ck.rng,
        step: ck.step,
        meta: ck.meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for t in ck.state.params() {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    input
        .read_exact(&mut json)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut named = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; 8];
    for entry in header.tensors {
        let numel: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            input
                .read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("truncated data in {}", entry.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        named.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    let state = ModelState::from_parts(header.config, named).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(Checkpoint {
        state,
        rng: header.rng,
        step: header.step,
        meta: header.meta,
    })
}

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let tmp = temp_path(path);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_checkpoint(ck, &mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::PeScheme;
    use crate::masks::SchemeId;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            scheme: SchemeId::InvIcl,
            pe: PeScheme::Symmetric,
            d: 3,
            layers: 2,
            heads: 2,
            embed_dim: 8,
            max_examples: 4,
        };
        Checkpoint {
            state: ModelState::random(cfg, 7).unwrap(),
            rng: RngState {
                seed: 7,
                next_episode: 640,
            },
            step: 10,
            meta: serde_json::json!({"lr": 1e-4}),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ck");
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.state.params().iter().zip(ck.state.params()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(!temp_path(&path).exists());
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut bytes = Vec::new();
        write_checkpoint(&sample(), &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
        let mut newer = bytes.clone();
        newer[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(read_checkpoint(&mut newer.as_slice()), Err(Error::Checkpoint(_))));
        let short = &bytes[..bytes.len() - 3];
        assert!(read_checkpoint(&mut &short[..]).is_err());
    }
}
