//! Binary checkpoints: `GFCK` magic, `u32` format version, `u32` header length,
//! a JSON header, then little-endian `f64` parameter blocks (student, teacher,
//! first and second optimizer moments). Writes go through a temporary file and
//! a rename so a crash never leaves a truncated checkpoint behind.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PixelScorer, NUM_PARAMS};

const MAGIC: &[u8; 4] = b"GFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Number of completed optimizer steps.
    pub step: usize,
    pub seed: u64,
    pub num_params: usize,
    pub adam_t: u64,
    /// Training configuration, kept opaque so old checkpoints stay readable.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub student: PixelScorer,
    pub teacher: PixelScorer,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(12 + header.len() + 4 * 8 * NUM_PARAMS);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for block in [
            self.student.weights(),
            self.teacher.weights(),
            &self.adam_m[..],
            &self.adam_v[..],
        ] {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing GFCK magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + header_len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.num_params != NUM_PARAMS {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model needs {NUM_PARAMS}",
                header.num_params
            )));
        }
        let floats = &bytes[12 + header_len..];
        if floats.len() != 4 * 8 * NUM_PARAMS {
            return Err(bad("parameter block has the wrong length"));
        }
        let mut blocks = floats
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect::<Vec<_>>()
            .chunks(NUM_PARAMS)
            .map(<[f64]>::to_vec)
            .collect::<Vec<_>>()
            .into_iter();
        let mut next = || blocks.next().expect("four blocks");
        Ok(Checkpoint {
            header,
            student: PixelScorer::from_weights(next())?,
            teacher: PixelScorer::from_weights(next())?,
            adam_m: next(),
            adam_v: next(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let ctx = |what: &str| format!("{what} {}", tmp.display());
        let mut file = fs::File::create(&tmp).map_err(|e| Error::io(ctx("creating"), e))?;
        file.write_all(&bytes).map_err(|e| Error::io(ctx("writing"), e))?;
        file.sync_all().map_err(|e| Error::io(ctx("syncing"), e))?;
        drop(file);
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
