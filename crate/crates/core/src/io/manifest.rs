//! JSON manifest plus raw little-endian `f64` blobs.
//!
//! ```json
//! {
//!   "version": 1,
//!   "input_id": "input",
//!   "output_id": "fc",
//!   "layers": [
//!     {"id": "conv1", "kind": "conv2d", "params": {"stride": 1, "padding": 1},
//!      "weights": "conv1.weights.bin", "weights_shape": [8, 1, 3, 3],
//!      "bias": "conv1.bias.bin", "bias_shape": [8], "inputs": ["input"]}
//!   ]
//! }
//! ```
//!
//! Blob paths are resolved relative to the manifest's directory. An optional
//! `meta` object of string pairs carries provenance such as a config hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Layer};
use crate::kernels::LayerKind;
use crate::tensor::{numel, Tensor};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    input_id: String,
    output_id: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    id: String,
    #[serde(flatten)]
    kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_shape: Option<Vec<usize>>,
    inputs: Vec<String>,
}

/// Reads a graph from a manifest file.
pub fn load_model(manifest_path: impl AsRef<Path>) -> Result<Graph> {
    load_model_with_meta(manifest_path).map(|(g, _)| g)
}

/// [`load_model`], also returning the manifest's `meta` object.
pub fn load_model_with_meta(manifest_path: impl AsRef<Path>) -> Result<(Graph, BTreeMap<String, String>)> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Parse {
            what: path.display().to_string(),
            reason: format!("unsupported manifest version {}", manifest.version),
        });
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in manifest.layers {
        let weights = read_blob(dir, &entry.id, "weights", entry.weights.as_deref(), entry.weights_shape)?;
        let bias = read_blob(dir, &entry.id, "bias", entry.bias.as_deref(), entry.bias_shape)?;
        layers.push(Layer {
            id: entry.id,
            kind: entry.kind,
            inputs: entry.inputs,
            weights,
            bias,
        });
    }
    Ok((
        Graph::new(layers, manifest.input_id, manifest.output_id)?,
        manifest.meta,
    ))
}

fn read_blob(
    dir: &Path,
    layer: &str,
    what: &str,
    file: Option<&str>,
    shape: Option<Vec<usize>>,
) -> Result<Option<Tensor>> {
    let (file, shape) = match (file, shape) {
        (None, None) => return Ok(None),
        (Some(f), Some(s)) => (f, s),
        _ => {
            return Err(Error::Parse {
                what: format!("layer {layer}"),
                reason: format!("{what} needs both a file and a shape"),
            })
        }
    };
    if file.contains('/') || file.contains('\\') || file.starts_with('.') {
        return Err(Error::Parse {
            what: format!("layer {layer}"),
            reason: format!("blob name {file:?} must be a plain file name"),
        });
    }
    let path = dir.join(file);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::DanglingRef(format!(
                "layer {layer} {what} blob {}",
                path.display()
            )))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let expected = numel(&shape) * 8;
    if bytes.len() != expected || shape.contains(&0) {
        return Err(Error::BlobSizeMismatch {
            file: file.to_string(),
            shape,
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data).map(Some)
}

fn write_blob(dir: &Path, name: &str, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `graph` as a manifest at `manifest_path` with blobs alongside it.
pub fn save_model(graph: &Graph, manifest_path: impl AsRef<Path>) -> Result<()> {
    save_model_with_meta(graph, manifest_path, &BTreeMap::new())
}

/// [`save_model`] with a `meta` object in the manifest.
pub fn save_model_with_meta(
    graph: &Graph,
    manifest_path: impl AsRef<Path>,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let path = manifest_path.as_ref();
    let dir: PathBuf = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut entries = Vec::with_capacity(graph.layers().len());
    for layer in graph.layers() {
        let mut entry = LayerEntry {
            id: layer.id.clone(),
            kind: layer.kind.clone(),
            weights: None,
            weights_shape: None,
            bias: None,
            bias_shape: None,
            inputs: layer.inputs.clone(),
        };
        if let Some(w) = &layer.weights {
            let name = format!("{}.weights.bin", layer.id);
            write_blob(&dir, &name, w)?;
            entry.weights = Some(name);
            entry.weights_shape = Some(w.shape().to_vec());
        }
        if let Some(b) = &layer.bias {
            let name = format!("{}.bias.bin", layer.id);
            write_blob(&dir, &name, b)?;
            entry.bias = Some(name);
            entry.bias_shape = Some(b.shape().to_vec());
        }
        entries.push(entry);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        input_id: graph.input_id().to_string(),
        output_id: graph.output_id().to_string(),
        meta: meta.clone(),
        layers: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{PoolParams, SpatialParams};

    fn toy() -> Graph {
        let w1 = Tensor::new(vec![2, 1, 3, 3], (0..18).map(|i| i as f64 * 0.1 - 0.7).collect()).unwrap();
        let b1 = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        let bn = Tensor::new(vec![4, 2], vec![1.0, 2.0, 0.0, 0.5, 0.1, 0.2, 1.0, 3.0]).unwrap();
        let wf = Tensor::new(vec![3, 8], (0..24).map(|i| (i as f64).sin()).collect()).unwrap();
        let layers = vec![
            Layer::new(
                "conv",
                LayerKind::Conv2d(SpatialParams { stride: 1, padding: 1 }),
                &["input"],
            )
            .with_weights(w1)
            .with_bias(b1),
            Layer::new("bn", LayerKind::BatchNorm { eps: 1e-5 }, &["conv"]).with_weights(bn),
            Layer::new("act", LayerKind::Relu6, &["bn"]),
            Layer::new("pool", LayerKind::AvgPool(PoolParams { size: 2, stride: 2 }), &["act"]),
            Layer::new("fc", LayerKind::FullyConnected, &["pool"]).with_weights(wf),
        ];
        Graph::new(layers, "input", "fc").unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let g = toy();
        let path = dir.path().join("model.json");
        save_model(&g, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, g);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"kind\": \"batch_norm\""));
        assert!(text.contains("\"params\""));
        assert!(!text.contains("meta"));
    }

    #[test]
    fn meta_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let meta = BTreeMap::from([("config_hash".to_string(), "ab12".to_string())]);
        save_model_with_meta(&toy(), &path, &meta).unwrap();
        let (g, back) = load_model_with_meta(&path).unwrap();
        assert_eq!(g, toy());
        assert_eq!(back, meta);
    }

    #[test]
    fn missing_blob_is_dangling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&toy(), &path).unwrap();
        std::fs::remove_file(dir.path().join("fc.weights.bin")).unwrap();
        assert!(matches!(load_model(&path), Err(Error::DanglingRef(_))));
    }

    #[test]
    fn short_blob_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("w.bin"), [0u8; 7]).unwrap();
        let manifest = r#"{"version":1,"input_id":"x","output_id":"fc","layers":[
            {"id":"fc","kind":"fully_connected","weights":"w.bin","weights_shape":[2],"inputs":["x"]}]}"#;
        let path = dir.path().join("m.json");
        std::fs::write(&path, manifest).unwrap();
        match load_model(&path) {
            Err(Error::BlobSizeMismatch { expected, actual, .. }) => assert_eq!((expected, actual), (16, 7)),
            other => panic!("expected BlobSizeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(&path, "{\"version\": 1, \"layers\": [").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Parse { .. })));
        std::fs::write(&path, r#"{"version":9,"input_id":"x","output_id":"a","layers":[]}"#).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn forward_reference_in_manifest_is_cyclic() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = r#"{"version":1,"input_id":"x","output_id":"b","layers":[
            {"id":"a","kind":"relu","inputs":["b"]},
            {"id":"b","kind":"relu","inputs":["a"]}]}"#;
        let path = dir.path().join("m.json");
        std::fs::write(&path, manifest).unwrap();
        assert!(matches!(load_model(&path), Err(Error::CyclicGraph(_))));
    }
}
