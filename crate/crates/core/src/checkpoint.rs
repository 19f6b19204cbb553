//! Binary container for parameter checkpoints and Fisher diagonals.
//!
//! Layout: the 8-byte magic `CLTUNE01`, a little-endian `u32` header length,
//! that many bytes of UTF-8 JSON header, then `param_count` little-endian
//! `f32` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamVector};
use crate::strategies::FisherDiagonal;

pub const MAGIC: &[u8; 8] = b"CLTUNE01";
pub const FORMAT_VERSION: u32 = 1;
/// Headers beyond this size are rejected before allocation.
pub const MAX_HEADER_LEN: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Checkpoint,
    Fisher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub version: u32,
    pub kind: ArtifactKind,
    pub model_config: ModelConfig,
    pub param_count: usize,
    /// Digest of the experiment config that produced the artifact.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    #[serde(default)]
    pub strategy_metadata: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_batches_used: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_seed: Option<u64>,
}

impl Header {
    pub fn checkpoint(model_config: &ModelConfig, config_digest: Option<String>, metadata: serde_json::Value) -> Self {
        Self {
            version: FORMAT_VERSION,
            kind: ArtifactKind::Checkpoint,
            model_config: model_config.clone(),
            param_count: model_config.param_count(),
            config_digest,
            strategy_metadata: metadata,
            n_batches_used: None,
            source_seed: None,
        }
    }

    pub fn fisher(model_config: &ModelConfig, config_digest: Option<String>, fisher: &FisherDiagonal) -> Self {
        Self {
            kind: ArtifactKind::Fisher,
            n_batches_used: Some(fisher.n_batches_used),
            source_seed: Some(fisher.source_seed),
            ..Self::checkpoint(model_config, config_digest, serde_json::Value::Null)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub header: Header,
    pub values: Vec<f32>,
}

impl Artifact {
    pub fn checkpoint(params: &ParamVector, model_config: &ModelConfig, config_digest: Option<String>, metadata: serde_json::Value) -> Result<Self> {
        params.check_compatible(model_config)?;
        Ok(Self {
            header: Header::checkpoint(model_config, config_digest, metadata),
            values: params.values.clone(),
        })
    }

    pub fn fisher(fisher: &FisherDiagonal, model_config: &ModelConfig, config_digest: Option<String>) -> Result<Self> {
        if fisher.values.len() != model_config.param_count() {
            return Err(Error::LengthMismatch {
                what: "fisher vs config",
                left: fisher.values.len(),
                right: model_config.param_count(),
            });
        }
        Ok(Self {
            header: Header::fisher(model_config, config_digest, fisher),
            values: fisher.values.clone(),
        })
    }

    pub fn params(&self) -> Result<ParamVector> {
        self.expect_kind(ArtifactKind::Checkpoint)?;
        ParamVector::new(&self.header.model_config, self.values.clone())
    }

    pub fn to_fisher(&self) -> Result<FisherDiagonal> {
        self.expect_kind(ArtifactKind::Fisher)?;
        FisherDiagonal::new(
            self.values.clone(),
            self.header.n_batches_used.unwrap_or(0),
            self.header.source_seed.unwrap_or(0),
        )
    }

    fn expect_kind(&self, kind: ArtifactKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::format("artifact", format!("expected {kind:?}, found {:?}", self.header.kind)));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::format("checkpoint", reason.to_string());
        let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or_else(|| bad("bad magic"))?;
        if rest.len() < 4 {
            return Err(bad("truncated header length"));
        }
        let (len_bytes, rest) = rest.split_at(4);
        let header_len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
        if header_len > MAX_HEADER_LEN || header_len > rest.len() {
            return Err(bad("header length out of range"));
        }
        let (header_bytes, payload) = rest.split_at(header_len);
        let header_text = std::str::from_utf8(header_bytes).map_err(|_| bad("header is not UTF-8"))?;
        let header: Header = serde_json::from_str(header_text)?;
        if header.version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        header.model_config.validate()?;
        let expected = header.model_config.param_count();
        if header.param_count != expected {
            return Err(Error::LengthMismatch {
                what: "header param_count vs model config",
                left: header.param_count,
                right: expected,
            });
        }
        if payload.len() != expected * 4 {
            return Err(Error::LengthMismatch {
                what: "payload bytes vs param_count",
                left: payload.len(),
                right: expected * 4,
            });
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { header, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
