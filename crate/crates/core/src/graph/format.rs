//! `.fpm` model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic          8 bytes   "FPMODEL\0"
//! version        u32
//! manifest_len   u64
//! manifest       UTF-8 JSON, manifest_len bytes
//! blob_len       u64
//! blob           raw little-endian IEEE-754 tensor data, blob_len bytes
//! ```
//!
//! The manifest lists every node (kind, attributes, inputs, tags, parameter
//! names) and every tensor (name, shape, dtype, byte offset, byte length),
//! and carries the SHA-256 of the blob. Tensors are laid out in the blob in
//! manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Graph, GraphError, Node, Op};
use crate::tensor::{DType, Shape, Tensor, TensorError};

pub const MAGIC: &[u8; 8] = b"FPMODEL\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0} (supported: {VERSION})")]
    UnsupportedVersion(u32),
    #[error("container truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("blob length mismatch: manifest declares {expected} bytes, found {found}")]
    BlobLength { expected: u64, found: u64 },
    #[error("blob checksum mismatch")]
    Checksum,
    #[error("manifest references absent tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` does not fit its declared byte range: {detail}")]
    TensorRange { name: String, detail: String },
    #[error("invalid tensor `{name}`: {source}")]
    Tensor {
        name: String,
        #[source]
        source: TensorError,
    },
    #[error("invalid graph: {0}")]
    Graph(#[from] GraphError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: DType,
    input_shape: [usize; 4],
    blob_length: u64,
    blob_sha256: String,
    nodes: Vec<NodeEntry>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeEntry {
    id: String,
    op: Op,
    inputs: Vec<String>,
    #[serde(default)]
    tags: Vec<String>,
    /// Parameter role → tensor name.
    #[serde(default)]
    params: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
    dtype: DType,
    offset: u64,
    length: u64,
}

fn tensor_name(node: &str, param: &str) -> String {
    format!("{node}/{param}")
}

/// Serializes a validated graph into container bytes.
pub fn to_bytes(g: &Graph) -> Result<Vec<u8>, FormatError> {
    g.validate()?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut nodes = Vec::new();
    for node in g.nodes() {
        let mut params = BTreeMap::new();
        for (role, t) in &node.params {
            let name = tensor_name(&node.id, role);
            let bytes = t.to_le_bytes();
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().dims(),
                dtype: t.dtype(),
                offset: blob.len() as u64,
                length: bytes.len() as u64,
            });
            blob.extend_from_slice(&bytes);
            params.insert(role.clone(), name);
        }
        nodes.push(NodeEntry {
            id: node.id.clone(),
            op: node.op.clone(),
            inputs: node.inputs.clone(),
            tags: node.tags.clone(),
            params,
        });
    }
    let manifest = Manifest {
        format: "fpm".into(),
        version: VERSION,
        dtype: g.dtype(),
        input_shape: g.input_shape().dims(),
        blob_length: blob.len() as u64,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        nodes,
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| FormatError::Manifest(e.to_string()))?;

    let mut out = Vec::with_capacity(8 + 4 + 8 + text.len() + 8 + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(&blob);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or(FormatError::Truncated(what))?;
        if end > self.buf.len() {
            return Err(FormatError::Truncated(what));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }
}

/// Parses container bytes back into a validated graph.
pub fn from_bytes(bytes: &[u8]) -> Result<Graph, FormatError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic").map_err(|_| FormatError::BadMagic)? != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let manifest_len = r.u64("manifest length")? as usize;
    let text = r.take(manifest_len, "manifest")?;
    let text = std::str::from_utf8(text).map_err(|e| FormatError::Manifest(e.to_string()))?;
    let manifest: Manifest =
        serde_json::from_str(text).map_err(|e| FormatError::Manifest(e.to_string()))?;
    if manifest.version != VERSION {
        return Err(FormatError::UnsupportedVersion(manifest.version));
    }
    if manifest.format != "fpm" {
        return Err(FormatError::Manifest(format!(
            "unknown format tag `{}`",
            manifest.format
        )));
    }
    let declared = r.u64("blob length")?;
    let blob = r.rest();
    if declared != manifest.blob_length || blob.len() as u64 != declared {
        return Err(FormatError::BlobLength {
            expected: manifest.blob_length,
            found: blob.len() as u64,
        });
    }
    if hex::encode(Sha256::digest(blob)) != manifest.blob_sha256 {
        return Err(FormatError::Checksum);
    }

    let mut tensors: BTreeMap<&str, Tensor> = BTreeMap::new();
    for e in &manifest.tensors {
        if e.dtype != manifest.dtype {
            return Err(FormatError::TensorRange {
                name: e.name.clone(),
                detail: format!(
                    "dtype {} differs from model dtype {}",
                    e.dtype, manifest.dtype
                ),
            });
        }
        let shape = Shape::from_dims(e.shape);
        let want = shape.len() as u64 * e.dtype.size_of() as u64;
        let end = e.offset.checked_add(e.length);
        if e.length != want || end.is_none_or(|end| end > blob.len() as u64) {
            return Err(FormatError::TensorRange {
                name: e.name.clone(),
                detail: format!(
                    "offset {} length {} (shape needs {want}, blob has {})",
                    e.offset,
                    e.length,
                    blob.len()
                ),
            });
        }
        let bytes = &blob[e.offset as usize..(e.offset + e.length) as usize];
        let t =
            Tensor::from_le_bytes(shape, e.dtype, bytes).map_err(|source| FormatError::Tensor {
                name: e.name.clone(),
                source,
            })?;
        tensors.insert(e.name.as_str(), t);
    }

    let mut g = Graph::empty(Shape::from_dims(manifest.input_shape), manifest.dtype);
    for entry in manifest.nodes {
        let mut node = Node {
            id: entry.id,
            op: entry.op,
            inputs: entry.inputs,
            params: BTreeMap::new(),
            tags: entry.tags,
        };
        for (role, name) in entry.params {
            let t = tensors
                .get(name.as_str())
                .ok_or_else(|| FormatError::MissingTensor(name.clone()))?;
            node.params.insert(role, t.clone());
        }
        g.add(node)?;
    }
    g.validate()?;
    Ok(g)
}

pub fn save(g: &Graph, path: impl AsRef<Path>) -> Result<(), FormatError> {
    fs::write(path, to_bytes(g)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Graph, FormatError> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvSpec;

    fn tiny() -> Graph {
        let mut g = Graph::new("x", Shape::new(1, 2, 4, 4), DType::F32);
        let mut conv = Node::conv(
            "c",
            "x",
            ConvSpec::new(3, 2, 3, 1, 1).with_bias(true),
            DType::F32,
        )
        .with_tag("stage1.block1.conv1");
        let w: Vec<f64> = (0..54).map(|i| (i as f64 * 0.731).sin()).collect();
        conv.params.insert(
            "weight".into(),
            Tensor::from_f64(Shape::new(3, 2, 3, 3), DType::F32, &w).unwrap(),
        );
        g.add(conv).unwrap();
        g.add(Node::bn("b", "c", 3, DType::F32, 1e-5)).unwrap();
        g.add(Node::new("y", Op::Output, &["b"])).unwrap();
        g
    }

    fn replace_manifest(bytes: &[u8], f: impl FnOnce(&str) -> String) -> Vec<u8> {
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[20..20 + len]).unwrap();
        let new_text = f(text);
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(&(new_text.len() as u64).to_le_bytes());
        out.extend_from_slice(new_text.as_bytes());
        out.extend_from_slice(&bytes[20 + len..]);
        out
    }

    #[test]
    fn round_trip_is_exact() {
        let g = tiny();
        let bytes = to_bytes(&g).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_blob() {
        let bytes = to_bytes(&tiny()).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, FormatError::BlobLength { .. }), "{err}");
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let mut bytes = to_bytes(&tiny()).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(from_bytes(&bytes), Err(FormatError::Checksum)));
    }

    #[test]
    fn absent_tensor_is_named() {
        let bytes = to_bytes(&tiny()).unwrap();
        let bad = replace_manifest(&bytes, |t| t.replacen("\"c/weight\"\n", "\"c/ghost\"\n", 1));
        match from_bytes(&bad) {
            Err(FormatError::MissingTensor(name)) => assert_eq!(name, "c/ghost"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_and_magic() {
        let mut bytes = to_bytes(&tiny()).unwrap();
        bytes[8] = 9;
        assert!(matches!(
            from_bytes(&bytes),
            Err(FormatError::UnsupportedVersion(9))
        ));
        assert!(matches!(
            from_bytes(b"nonsense"),
            Err(FormatError::BadMagic)
        ));
        let bytes = to_bytes(&tiny()).unwrap();
        let bad = replace_manifest(&bytes, |t| t.replacen("{", "[", 1));
        assert!(matches!(from_bytes(&bad), Err(FormatError::Manifest(_))));
    }
}
