//! Portable model format: a JSON manifest plus a little-endian f64 blob.
//!
//! Manifest fields: `format`, `version`, `input_shape`, `output`, `nodes`
//! (each with `id`, `layer`, `inputs`, `params`), and `blob` (`bytes`,
//! `sha256`). Every param entry records `name`, `shape`, `offset` and `len`
//! in f64 units plus `trainable`. Params are laid out in manifest order,
//! row-major.
//!
//! The single-file container is `SQZM` magic, u32 LE version, u64 LE
//! manifest length, the manifest bytes, then the blob.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LayerKind, ModelGraph, Node, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "squeeze-model";
const MAGIC: &[u8; 4] = b"SQZM";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SerializedModel {
    pub manifest: String,
    pub blob: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    input_shape: Vec<usize>,
    output: String,
    nodes: Vec<NodeEntry>,
    blob: BlobEntry,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeEntry {
    id: String,
    layer: LayerKind,
    inputs: Vec<String>,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    bytes: usize,
    sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes the node structure and parameters. Graphs with live hooks must
/// be exported through the compression API first.
pub fn serialize_model(graph: &ModelGraph) -> Result<SerializedModel> {
    if !graph.hooks().is_empty() {
        return Err(Error::Graph(
            "graph has live hooks; export it to materialize them before serializing".into(),
        ));
    }
    let mut blob = Vec::new();
    let mut offset = 0;
    let mut nodes = Vec::with_capacity(graph.nodes().len());
    for n in graph.nodes() {
        let mut params = Vec::new();
        for (name, p) in &n.params {
            let t = p.read();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            params.push(ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
                trainable: t.requires_grad,
            });
            offset += t.len();
        }
        nodes.push(NodeEntry {
            id: n.id.clone(),
            layer: n.kind.clone(),
            inputs: n.inputs.clone(),
            params,
        });
    }
    let manifest = Manifest {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        input_shape: graph.input_shape().to_vec(),
        output: graph.output().to_string(),
        nodes,
        blob: BlobEntry {
            bytes: blob.len(),
            sha256: sha256_hex(&blob),
        },
    };
    Ok(SerializedModel {
        manifest: serde_json::to_string_pretty(&manifest)?,
        blob,
    })
}

pub fn deserialize_model(manifest: &str, blob: &[u8]) -> Result<ModelGraph> {
    let raw: serde_json::Value = serde_json::from_str(manifest)?;
    if raw.get("format").and_then(|f| f.as_str()) != Some(FORMAT_NAME) {
        return Err(Error::Format("not a squeeze model manifest".into()));
    }
    let found = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("manifest has no version".into()))?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(Error::Version {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    let m: Manifest = serde_path_to_error::deserialize(raw)
        .map_err(|e| Error::Format(format!("at `{}`: {}", e.path(), e.inner())))?;
    if blob.len() < m.blob.bytes {
        return Err(Error::Truncated(format!(
            "blob has {} bytes, manifest expects {}",
            blob.len(),
            m.blob.bytes
        )));
    }
    if blob.len() > m.blob.bytes {
        return Err(Error::Format(format!(
            "blob has {} trailing bytes",
            blob.len() - m.blob.bytes
        )));
    }
    let actual = sha256_hex(blob);
    if actual != m.blob.sha256 {
        return Err(Error::Checksum {
            expected: m.blob.sha256,
            actual,
        });
    }

    let mut graph = ModelGraph::new(m.input_shape);
    for entry in m.nodes {
        let mut params = BTreeMap::new();
        for p in entry.params {
            let end = (p.offset + p.len) * 8;
            if end > blob.len() {
                return Err(Error::Truncated(format!(
                    "`{}.{}` runs past the blob",
                    entry.id, p.name
                )));
            }
            let data = blob[p.offset * 8..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(p.shape, data)?.with_requires_grad(p.trainable);
            params.insert(p.name, Param::new(t));
        }
        graph.push_node(Node {
            id: entry.id,
            kind: entry.layer,
            inputs: entry.inputs,
            params,
            out_shape: vec![],
        })?;
    }
    graph.set_output(&m.output)?;
    Ok(graph)
}

impl SerializedModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.manifest.len() + self.blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(self.manifest.as_bytes());
        out.extend_from_slice(&self.blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated("model file header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let manifest_end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Truncated("manifest".into()))?;
        let manifest = std::str::from_utf8(&bytes[16..manifest_end])
            .map_err(|e| Error::Format(format!("manifest is not UTF-8: {e}")))?
            .to_string();
        Ok(SerializedModel {
            manifest,
            blob: bytes[manifest_end..].to_vec(),
        })
    }
}

pub fn save_model(graph: &ModelGraph, path: &Path) -> Result<()> {
    std::fs::write(path, serialize_model(graph)?.to_bytes())?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let s = SerializedModel::from_bytes(&std::fs::read(path)?)?;
    deserialize_model(&s.manifest, &s.blob)
}
