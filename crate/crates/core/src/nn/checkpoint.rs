//! Binary checkpoint format.
//!
//! Layout: the magic line `MINET-CKPT\n`, a little-endian `u64` header
//! length, a JSON header, then every tensor's values as little-endian `f64`
//! in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::builders::{build_architecture, Architecture};
use super::model::Model;
use super::params::ParameterStore;
use super::spec::{HeadKind, HeadSpec};
use crate::data::StandardizationStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"MINET-CKPT\n";
pub const FORMAT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub tool_version: String,
    pub architecture: Architecture,
    pub num_classes: usize,
    pub head: HeadSpec,
    pub input_shape: (usize, usize, usize),
    pub class_names: Vec<String>,
    pub stats: Option<StandardizationStats>,
    pub fold: Option<usize>,
    /// Run configuration that produced the weights, verbatim.
    pub config: Option<serde_json::Value>,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

fn fail(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn new(
        model: Model,
        class_names: Vec<String>,
        stats: Option<StandardizationStats>,
        fold: Option<usize>,
        config: Option<serde_json::Value>,
    ) -> Result<Self> {
        let spec = model.spec();
        if class_names.len() != spec.num_classes {
            return Err(Error::Model(format!(
                "{} class names for a {}-class model",
                class_names.len(),
                spec.num_classes
            )));
        }
        let tensors = model
            .params()
            .iter()
            .map(|(name, e)| TensorRecord {
                name: name.to_string(),
                shape: e.tensor.shape().to_vec(),
                trainable: e.trainable,
            })
            .collect();
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            architecture: spec.architecture.clone(),
            num_classes: spec.num_classes,
            head: spec.head.clone(),
            input_shape: spec.input_shape,
            class_names,
            stats,
            fold,
            config,
            tensors,
        };
        Ok(Checkpoint { header, model })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + 8 * self.model.params().len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, e) in self.model.params().iter() {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| fail(path, e.to_string()))?;
        f.write_all(&bytes).map_err(|e| fail(path, e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| fail(path, e.to_string()))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint { reason, .. } => fail(path, reason),
            other => fail(path, other.to_string()),
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let here = Path::new("<memory>");
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| fail(here, "not a checkpoint (bad magic)"))?;
        if rest.len() < 8 {
            return Err(fail(here, "truncated header length"));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < len {
            return Err(fail(here, "truncated header"));
        }
        // Check the version before full deserialization so newer files give
        // a clear message even if their schema changed.
        let raw: serde_json::Value = serde_json::from_slice(&rest[..len])?;
        let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0);
        if version > u64::from(FORMAT_VERSION) {
            return Err(fail(
                here,
                format!("format version {version} is newer than supported version {FORMAT_VERSION}"),
            ));
        }
        let header: CheckpointHeader = serde_json::from_value(raw)?;
        let mut payload = &rest[len..];

        let spec = build_architecture(&header.architecture, header.num_classes, header.head.clone(), header.input_shape)?;
        let decls = spec.parameter_decls();
        if decls.len() != header.tensors.len() {
            return Err(fail(
                here,
                format!(
                    "architecture declares {} tensors, file has {}",
                    decls.len(),
                    header.tensors.len()
                ),
            ));
        }
        let mut store = ParameterStore::new();
        for (decl, rec) in decls.iter().zip(&header.tensors) {
            if decl.name != rec.name || decl.shape != rec.shape {
                return Err(fail(
                    here,
                    format!(
                        "tensor mismatch: expected {} {:?}, file has {} {:?}",
                        decl.name, decl.shape, rec.name, rec.shape
                    ),
                ));
            }
            let n: usize = rec.shape.iter().product();
            if payload.len() < 8 * n {
                return Err(fail(here, format!("truncated data for {}", rec.name)));
            }
            let data = payload[..8 * n]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            payload = &payload[8 * n..];
            store.insert(rec.name.clone(), Tensor::new(&rec.shape, data)?, decl.role.trainable())?;
        }
        if !payload.is_empty() {
            return Err(fail(here, format!("{} trailing bytes", payload.len())));
        }
        let model = Model::from_parts(spec, store)?;
        Ok(Checkpoint { header, model })
    }

    /// Fails unless the stored model matches the requested layout.
    pub fn ensure_compatible(&self, architecture: &Architecture, num_classes: usize, head: HeadKind) -> Result<()> {
        let h = &self.header;
        let what = if &h.architecture != architecture {
            format!("architecture {:?}, requested {:?}", h.architecture, architecture)
        } else if h.num_classes != num_classes {
            format!("{} classes, requested {num_classes}", h.num_classes)
        } else if h.head.kind != head {
            format!("head {}, requested {head}", h.head.kind)
        } else {
            return Ok(());
        };
        Err(Error::Model(format!("incompatible checkpoint: it has {what}")))
    }
}
