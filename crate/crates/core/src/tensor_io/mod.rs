//! The `.fkv` interchange container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FOCUSKV1"            8 bytes magic
//! header_len: u32       length of the JSON header in bytes
//! header: [u8]          UTF-8 JSON, right-padded with spaces so the payload starts 64-byte aligned
//! payload: [u8]         raw f32 LE tensors at `tensor_index` offsets, 64-byte aligned, zero padded
//! ```

mod header;
mod token_dump;

use std::path::Path;

use thiserror::Error;

pub use header::{
    relevance_tensor_name, target_tensor_name, visual_tensor_name, DumpHeader, FeatureKind,
    InvariantError, LocalDims, QuestionMeta, QuestionType, TargetMeta, TensorEntry, TensorRole,
    ViewKind, Violation, FORMAT_VERSION,
};
pub use token_dump::TokenDump;

pub const MAGIC: &[u8; 8] = b"FOCUSKV1";
pub const ALIGNMENT: usize = 64;
const PREAMBLE: usize = MAGIC.len() + 4;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("bad magic")]
    BadMagic,
    #[error("truncated {what}: need {needed} bytes, have {available}")]
    Truncated {
        what: &'static str,
        needed: u64,
        available: u64,
    },
    #[error("header is not valid JSON: {0}")]
    HeaderJson(#[from] serde_json::Error),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
    #[error("tensor `{name}`: shape {shape:?} needs {expected} values, got {actual}")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor list does not match header index: {0}")]
    IndexMismatch(String),
    #[error("tensor `{0}` not found")]
    MissingTensor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DumpError {
    pub fn violation(&self) -> Option<&Violation> {
        match self {
            DumpError::Invariant(e) => Some(&e.violation),
            _ => None,
        }
    }
}

/// Dense row-major float32 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, DumpError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DumpError::ShapeMismatch {
                name: String::new(),
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn byte_len(&self) -> u64 {
        self.data.len() as u64 * 4
    }

    /// Equality on the raw bit patterns, so NaN payloads compare too.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn align_up(n: u64) -> u64 {
    n.div_ceil(ALIGNMENT as u64) * ALIGNMENT as u64
}

/// Fills `header.tensor_index` with densely packed, aligned entries for `tensors`.
pub fn index_tensors(header: &mut DumpHeader, tensors: &[(String, Tensor)]) {
    let mut offset = 0u64;
    header.tensor_index = tensors
        .iter()
        .map(|(name, t)| {
            let entry = TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                byte_offset: offset,
                byte_length: t.byte_len(),
            };
            offset = align_up(offset + t.byte_len());
            entry
        })
        .collect();
}

/// Serializes a dump. `header.tensor_index` must describe `tensors` in order.
pub fn write_dump(header: &DumpHeader, tensors: &[(String, Tensor)]) -> Result<Vec<u8>, DumpError> {
    if header.tensor_index.len() != tensors.len() {
        return Err(DumpError::IndexMismatch(format!(
            "{} index entries for {} tensors",
            header.tensor_index.len(),
            tensors.len()
        )));
    }
    for (entry, (name, t)) in header.tensor_index.iter().zip(tensors) {
        if &entry.name != name {
            return Err(DumpError::IndexMismatch(format!(
                "index names `{}` but tensor is `{name}`",
                entry.name
            )));
        }
        let expected: usize = t.shape.iter().product();
        if entry.shape != t.shape || expected != t.data.len() {
            return Err(DumpError::ShapeMismatch {
                name: name.clone(),
                shape: entry.shape.clone(),
                expected: entry.shape.iter().product(),
                actual: t.data.len(),
            });
        }
    }
    header.validate()?;

    let mut json = serde_json::to_vec(header)?;
    let padded = align_up((PREAMBLE + json.len()) as u64) as usize - PREAMBLE;
    json.resize(padded, b' ');

    let payload_len = header
        .tensor_index
        .iter()
        .map(|e| align_up(e.end()))
        .max()
        .unwrap_or(0) as usize;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let start = out.len();
    out.resize(start + payload_len, 0);
    for (entry, (_, t)) in header.tensor_index.iter().zip(tensors) {
        let mut at = start + entry.byte_offset as usize;
        for v in &t.data {
            out[at..at + 4].copy_from_slice(&v.to_le_bytes());
            at += 4;
        }
    }
    Ok(out)
}

/// Indexes and serializes in one step.
pub fn pack_dump(
    mut header: DumpHeader,
    tensors: &[(String, Tensor)],
) -> Result<Vec<u8>, DumpError> {
    index_tensors(&mut header, tensors);
    write_dump(&header, tensors)
}

/// A parsed container; tensors are decoded on access.
#[derive(Debug, Clone)]
pub struct Dump {
    pub header: DumpHeader,
    bytes: Vec<u8>,
    payload_start: usize,
}

pub fn read_dump(bytes: Vec<u8>) -> Result<Dump, DumpError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(DumpError::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(DumpError::Truncated {
            what: "header length",
            needed: PREAMBLE as u64,
            available: bytes.len() as u64,
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let payload_start = PREAMBLE + header_len;
    if bytes.len() < payload_start {
        return Err(DumpError::Truncated {
            what: "header",
            needed: payload_start as u64,
            available: bytes.len() as u64,
        });
    }
    let header: DumpHeader = serde_json::from_slice(&bytes[PREAMBLE..payload_start])?;
    header.validate()?;

    let payload = (bytes.len() - payload_start) as u64;
    for (i, e) in header.tensor_index.iter().enumerate() {
        if e.end() > payload {
            return Err(InvariantError {
                field: format!("tensor_index[{i}]"),
                violation: Violation::TensorOutOfBounds {
                    end: e.end(),
                    payload,
                },
            }
            .into());
        }
    }
    Ok(Dump {
        header,
        bytes,
        payload_start,
    })
}

impl Dump {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, DumpError> {
        read_dump(std::fs::read(path)?)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.header.tensor_index.iter().map(|e| e.name.as_str())
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor, DumpError> {
        let entry = self
            .header
            .tensor_entry(name)
            .ok_or_else(|| DumpError::MissingTensor(name.to_string()))?;
        let start = self.payload_start + entry.byte_offset as usize;
        let raw = &self.bytes[start..start + entry.byte_length as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor {
            shape: entry.shape.clone(),
            data,
        })
    }

    /// All tensors in index order.
    pub fn tensors(&self) -> Result<Vec<(String, Tensor)>, DumpError> {
        self.header
            .tensor_index
            .iter()
            .map(|e| Ok((e.name.clone(), self.tensor(&e.name)?)))
            .collect()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }
}
