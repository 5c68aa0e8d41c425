//! Head checkpoint file.
//!
//! ```text
//! b"MCLHEAD\n" | u32 LE header length | JSON header | f32 LE payload
//! ```
//!
//! The payload is `w1, b1, w2, b2` in that order, row-major. Weights are
//! stored at 32-bit precision.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HeadParams, TrainConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MCLHEAD\n";
const FORMAT: &str = "miniclass-head/1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    backbone: String,
    feature_dim: usize,
    hidden: usize,
    num_classes: usize,
    seed: u64,
    config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadCheckpoint {
    pub backbone: String,
    pub config: TrainConfig,
    pub params: HeadParams,
}

impl HeadCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.validate()?;
        let header = Header {
            format: FORMAT.into(),
            backbone: self.backbone.clone(),
            feature_dim: self.params.feature_dim,
            hidden: self.params.hidden(),
            num_classes: self.params.num_classes,
            seed: self.config.seed,
            config: self.config.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(12 + json.len() + self.params.param_count() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            for &w in t {
                out.extend_from_slice(&(w as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a head checkpoint (bad magic)"));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = bytes
            .get(12..12 + header_len)
            .ok_or_else(|| bad("truncated checkpoint header"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {:?}",
                header.format
            )));
        }
        let (d, h, k) = (header.feature_dim, header.hidden, header.num_classes);
        let sizes = [h * d, h, k * h, k];
        let payload = &bytes[12 + header_len..];
        if payload.len() != sizes.iter().sum::<usize>() * 4 {
            return Err(bad("checkpoint payload size does not match its header"));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        let mut take = |n: usize| values.by_ref().take(n).collect::<Vec<f64>>();
        let params = HeadParams {
            feature_dim: d,
            num_classes: k,
            w1: take(sizes[0]),
            b1: take(sizes[1]),
            w2: take(sizes[2]),
            b2: take(sizes[3]),
        };
        params.validate()?;
        Ok(HeadCheckpoint {
            backbone: header.backbone,
            config: header.config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
