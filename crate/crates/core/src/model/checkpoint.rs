use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::state::{Edges, GcnLayer, MlpHead, ModelState};
use crate::data::NodeIndex;
use crate::error::{Error, Result};
use crate::structure::StructureParams;
use crate::tensor::{BatchNorm, Sgd, Shape, Tensor};

const FORMAT: &str = "graphino-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum EdgesMeta {
    Learned { alpha1: f64, alpha2: f64, max_edges: usize },
    Fixed,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerMeta {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BatchNormMeta {
    eps: f64,
    momentum: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    seed: u64,
    edges: EdgesMeta,
    batchnorm: Vec<BatchNormMeta>,
    optimizer: Option<OptimizerMeta>,
    nodes: Option<NodeIndex>,
    blob_file: String,
    tensors: Vec<TensorEntry>,
}

/// Blob written next to a checkpoint manifest: `<path>.bin`.
pub fn blob_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".bin");
    path.with_file_name(name)
}

struct BlobWriter {
    bytes: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl BlobWriter {
    fn push(&mut self, name: impl Into<String>, shape: Shape, data: &[f64]) {
        self.entries.push(TensorEntry {
            name: name.into(),
            shape: shape.as_vec(),
            offset: self.bytes.len() as u64,
        });
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.push(name, t.shape(), t.data());
    }

    fn vector(&mut self, name: impl Into<String>, v: &[f64]) {
        self.push(name, Shape::Vector(v.len()), v);
    }
}

struct BlobReader {
    tensors: HashMap<String, Tensor>,
}

impl BlobReader {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name:?}")))
    }

    fn param(&mut self, name: &str) -> Result<Tensor> {
        Ok(self.take(name)?.into_param())
    }

    fn vector(&mut self, name: &str) -> Result<Vec<f64>> {
        Ok(self.take(name)?.into_data())
    }

    fn batchnorm(&mut self, prefix: &str, meta: &BatchNormMeta) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: self.param(&format!("{prefix}/gamma"))?,
            beta: self.param(&format!("{prefix}/beta"))?,
            running_mean: self.vector(&format!("{prefix}/running_mean"))?,
            running_var: self.vector(&format!("{prefix}/running_var"))?,
            eps: meta.eps,
            momentum: meta.momentum,
        })
    }
}

fn write_bn(w: &mut BlobWriter, prefix: &str, bn: &BatchNorm) {
    w.tensor(format!("{prefix}/gamma"), &bn.gamma);
    w.tensor(format!("{prefix}/beta"), &bn.beta);
    w.vector(format!("{prefix}/running_mean"), &bn.running_mean);
    w.vector(format!("{prefix}/running_var"), &bn.running_var);
}

impl ModelState {
    /// Writes a JSON manifest to `path` and the tensor blob to `<path>.bin`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BlobWriter {
            bytes: Vec::new(),
            entries: Vec::new(),
        };
        let edges = match &self.edges {
            Edges::Learned(p) => {
                w.tensor("structure/static", &p.static_features);
                w.tensor("structure/w1", &p.w1);
                w.tensor("structure/w2", &p.w2);
                EdgesMeta::Learned {
                    alpha1: p.alpha1,
                    alpha2: p.alpha2,
                    max_edges: p.max_edges,
                }
            }
            Edges::Fixed(m) => {
                w.tensor("structure/adjacency", m);
                EdgesMeta::Fixed
            }
        };
        for (l, layer) in self.layers.iter().enumerate() {
            w.tensor(format!("gcn/{l}/weight"), &layer.weight);
            write_bn(&mut w, &format!("gcn/{l}/bn"), &layer.bn);
        }
        let m = &self.mlp;
        w.tensor("mlp/hidden/weight", &m.hidden_weight);
        w.tensor("mlp/hidden/bias", &m.hidden_bias);
        write_bn(&mut w, "mlp/bn", &m.bn);
        w.tensor("mlp/out/weight", &m.out_weight);
        w.tensor("mlp/out/bias", &m.out_bias);
        let optimizer = self.optimizer.as_ref().map(|opt| {
            let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
            for (name, v) in names.iter().zip(opt.velocities()) {
                w.vector(format!("optim/velocity/{name}"), v);
            }
            OptimizerMeta {
                lr: opt.lr,
                momentum: opt.momentum,
                weight_decay: opt.weight_decay,
            }
        });
        let batchnorm = self
            .layers
            .iter()
            .map(|l| &l.bn)
            .chain(std::iter::once(&self.mlp.bn))
            .map(|bn| BatchNormMeta {
                eps: bn.eps,
                momentum: bn.momentum,
            })
            .collect();
        let blob = blob_path(path);
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config.clone(),
            seed: self.seed,
            edges,
            batchnorm,
            optimizer,
            nodes: self.nodes.clone(),
            blob_file: blob
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            tensors: w.entries,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
        fs::write(&blob, &w.bytes).map_err(|e| Error::io(&blob, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                m.format,
                m.version
            )));
        }
        let blob = path.with_file_name(&m.blob_file);
        let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
        let mut expected = 0u64;
        let mut tensors = HashMap::new();
        for e in &m.tensors {
            let shape = Shape::from_dims(&e.shape)
                .ok_or_else(|| Error::Format(format!("tensor {:?} has rank {}", e.name, e.shape.len())))?;
            if e.offset != expected {
                return Err(Error::Format(format!(
                    "tensor {:?} starts at byte {}, expected {expected}",
                    e.name, e.offset
                )));
            }
            let len = shape.numel() as u64 * 8;
            let end = e.offset + len;
            if end > bytes.len() as u64 {
                return Err(Error::Format(format!(
                    "{}: blob has {} bytes, manifest needs at least {end}",
                    blob.display(),
                    bytes.len()
                )));
            }
            let data = bytes[e.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.insert(e.name.clone(), Tensor::new(shape, data)?);
            expected = end;
        }
        if expected != bytes.len() as u64 {
            return Err(Error::Format(format!(
                "{}: blob has {} bytes, manifest describes {expected}",
                blob.display(),
                bytes.len()
            )));
        }
        let mut r = BlobReader { tensors };
        let n_layers = m.config.gcn.layer_dims.len();
        if m.batchnorm.len() != n_layers + 1 {
            return Err(Error::Format(format!(
                "checkpoint lists {} batchnorm entries, expected {}",
                m.batchnorm.len(),
                n_layers + 1
            )));
        }

        let edges = match m.edges {
            EdgesMeta::Learned {
                alpha1,
                alpha2,
                max_edges,
            } => Edges::Learned(StructureParams::new(
                r.take("structure/static")?,
                r.param("structure/w1")?,
                r.param("structure/w2")?,
                alpha1,
                alpha2,
                max_edges,
            )?),
            EdgesMeta::Fixed => Edges::Fixed(r.take("structure/adjacency")?),
        };
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            layers.push(GcnLayer {
                weight: r.param(&format!("gcn/{l}/weight"))?,
                bn: r.batchnorm(&format!("gcn/{l}/bn"), &m.batchnorm[l])?,
            });
        }
        let mlp = MlpHead {
            hidden_weight: r.param("mlp/hidden/weight")?,
            hidden_bias: r.param("mlp/hidden/bias")?,
            bn: r.batchnorm("mlp/bn", &m.batchnorm[n_layers])?,
            out_weight: r.param("mlp/out/weight")?,
            out_bias: r.param("mlp/out/bias")?,
        };
        let mut state = ModelState {
            config: m.config,
            seed: m.seed,
            edges,
            layers,
            mlp,
            optimizer: None,
            nodes: m.nodes,
        };
        state.check_shapes()?;
        if let Some(o) = m.optimizer {
            let mut opt = Sgd::new(o.lr, o.momentum, o.weight_decay)?;
            let names: Vec<String> = state.named_params().into_iter().map(|(n, _)| n).collect();
            let key = |n: &String| format!("optim/velocity/{n}");
            if r.tensors.contains_key(&key(&names[0])) {
                let v = names.iter().map(|n| r.vector(&key(n))).collect::<Result<Vec<_>>>()?;
                opt.set_velocities(v);
            }
            state.optimizer = Some(opt);
        }
        if let Some(extra) = r.tensors.keys().next() {
            return Err(Error::Format(format!("checkpoint has unexpected tensor {extra:?}")));
        }
        Ok(state)
    }
}
