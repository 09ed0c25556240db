//! Single-file checkpoint container.
//!
//! Layout: an 8-byte little-endian header length, the UTF-8 JSON header, zero
//! padding up to a 64-byte boundary, then the payload. Each tensor occupies
//! `byte_length` little-endian bytes at a 64-byte aligned `byte_offset` from
//! the payload start, and carries a CRC-64/XZ of those bytes in the header.

use std::fs;
use std::path::{Path, PathBuf};

use crc::{Crc, CRC_64_XZ};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{Category, Model, ModelConfig, ParamEntry, ParameterRegistry};
use crate::selection::SelectionHistory;
use crate::tensor::{DType, Element, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const ALIGN: usize = 64;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunMetadata {
    pub seeds: Vec<u64>,
    pub strategy: String,
    pub round: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tool_version: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorInfo {
    pub category: Category,
    pub layer: Option<usize>,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub byte_offset: u64,
    pub byte_length: u64,
    pub crc64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub tensors: IndexMap<String, TensorInfo>,
    pub selection_history: SelectionHistory,
    pub run_metadata: RunMetadata,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub history: SelectionHistory,
    pub metadata: RunMetadata,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Convert tensors stored in another dtype instead of failing.
    pub allow_conversion: bool,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn ck(path: &Path, kind: CheckpointError) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), kind }
}

/// Serializes a checkpoint to bytes. Identical inputs give identical bytes.
pub fn encode_checkpoint<T: Element>(
    model: &Model<T>,
    history: &SelectionHistory,
    metadata: &RunMetadata,
) -> std::result::Result<Vec<u8>, CheckpointError> {
    let mut payload = Vec::new();
    let mut tensors = IndexMap::new();
    for e in model.registry.iter() {
        if e.tensor.has_nan() {
            return Err(CheckpointError::NanTensor { name: e.name.clone() });
        }
        payload.resize(align_up(payload.len()), 0);
        let bytes = e.tensor.to_le_bytes();
        tensors.insert(
            e.name.clone(),
            TensorInfo {
                category: e.category,
                layer: e.layer,
                shape: e.tensor.shape().to_vec(),
                dtype: T::DTYPE,
                byte_offset: payload.len() as u64,
                byte_length: bytes.len() as u64,
                crc64: format!("{:016x}", CRC64.checksum(&bytes)),
            },
        );
        payload.extend_from_slice(&bytes);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        model_config: model.config.clone(),
        tensors,
        selection_history: history.clone(),
        run_metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let start = align_up(8 + json.len());
    let mut out = Vec::with_capacity(start + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(start, 0);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes the container to `path`; returns the number of bytes written.
pub fn save_checkpoint<T: Element>(
    model: &Model<T>,
    history: &SelectionHistory,
    metadata: &RunMetadata,
    path: impl AsRef<Path>,
) -> Result<u64> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, history, metadata).map_err(|k| ck(path, k))?;
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

/// Parses the header and returns it with the payload start offset.
pub fn decode_header(bytes: &[u8]) -> std::result::Result<(Header, usize), CheckpointError> {
    let found = bytes.len() as u64;
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated { expected: 8, found });
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let end = 8u64.saturating_add(len);
    if found < end {
        return Err(CheckpointError::Truncated { expected: end, found });
    }
    let raw = &bytes[8..end as usize];
    let value: serde_json::Value =
        serde_json::from_slice(raw).map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
    let version = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version, supported: FORMAT_VERSION });
    }
    let header: Header = serde_json::from_value(value).map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
    Ok((header, align_up(end as usize)))
}

pub fn decode_checkpoint<T: Element>(bytes: &[u8], opts: LoadOptions) -> std::result::Result<Checkpoint<T>, CheckpointError> {
    let (header, start) = decode_header(bytes)?;
    let payload = bytes.get(start..).unwrap_or(&[]);
    let mut registry = ParameterRegistry::new();
    let mut next_free = 0u64;
    for (name, info) in &header.tensors {
        if info.byte_offset % ALIGN as u64 != 0 || info.byte_offset < next_free {
            return Err(CheckpointError::Malformed(format!("tensor `{name}` has a misaligned or overlapping offset")));
        }
        let numel: usize = info.shape.iter().product();
        if info.byte_length != (numel * info.dtype.size_of()) as u64 {
            return Err(CheckpointError::Malformed(format!("tensor `{name}` byte length disagrees with its shape")));
        }
        let end = info.byte_offset + info.byte_length;
        if end > payload.len() as u64 {
            return Err(CheckpointError::Truncated { expected: start as u64 + end, found: bytes.len() as u64 });
        }
        next_free = end;
        let raw = &payload[info.byte_offset as usize..end as usize];
        if format!("{:016x}", CRC64.checksum(raw)) != info.crc64 {
            return Err(CheckpointError::Checksum { name: name.clone() });
        }
        if info.dtype != T::DTYPE && !opts.allow_conversion {
            return Err(CheckpointError::DtypeMismatch { file: info.dtype.to_string(), session: T::DTYPE.to_string() });
        }
        let malformed = |e: Error| CheckpointError::Malformed(format!("tensor `{name}`: {e}"));
        let tensor: Tensor<T> = match info.dtype {
            DType::F32 => Tensor::<f32>::from_le_bytes(info.shape.clone(), raw).map_err(malformed)?.cast(),
            DType::F64 => Tensor::<f64>::from_le_bytes(info.shape.clone(), raw).map_err(malformed)?.cast(),
        };
        registry
            .push(ParamEntry { name: name.clone(), category: info.category, layer: info.layer, tensor })
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    let config = ModelConfig { dtype: T::DTYPE, ..header.model_config };
    if header.model_config.dtype != T::DTYPE && !opts.allow_conversion {
        return Err(CheckpointError::DtypeMismatch {
            file: header.model_config.dtype.to_string(),
            session: T::DTYPE.to_string(),
        });
    }
    let model = Model::from_registry(config, registry).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok(Checkpoint { model, history: header.selection_history, metadata: header.run_metadata })
}

pub fn load_checkpoint<T: Element>(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes, opts).map_err(|k| ck(path, k))
}

/// Reads only the header of a checkpoint file.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let bytes = fs::read(&path)?;
    decode_header(&bytes).map(|(h, _)| h).map_err(|k| ck(&path, k))
}
