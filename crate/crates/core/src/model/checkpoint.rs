//! Checkpoint directories: a `manifest` (JSON) describing the model and the
//! tensor layout, and `weights.bin` holding little-endian `f64` values of
//! every tensor in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec, ModelWeights, ParamStore};
use crate::error::{Error, Result};
use crate::kvcache::KvMode;
use crate::routing::RouterConfig;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest";
pub const WEIGHTS: &str = "weights.bin";
const FORMAT: &str = "recursor-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub spec: ModelSpec,
    pub router: Option<RouterConfig>,
    pub kv_mode: KvMode,
    /// Unique-block id for every unrolled layer.
    pub sharing_map: Vec<usize>,
    /// LoRA deltas are added unscaled (`W'x + BAx`).
    pub lora_scale: f64,
    pub tensors: Vec<TensorEntry>,
}

pub fn manifest(model: &Model) -> Result<Manifest> {
    Ok(Manifest {
        format: FORMAT.to_string(),
        spec: model.weights.spec.clone(),
        router: model.router.clone(),
        kv_mode: model.kv_mode,
        sharing_map: model.weights.spec.unrolled()?,
        lora_scale: 1.0,
        tensors: model
            .weights
            .params
            .iter()
            .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() })
            .collect(),
    })
}

pub fn save(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let m = manifest(model)?;
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(dir.join(MANIFEST), text + "\n")?;
    let mut bytes = Vec::with_capacity(model.weights.params.n_values() * 8);
    for (_, t) in model.weights.params.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(WEIGHTS), bytes)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Model> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
    if m.format != FORMAT {
        return Err(Error::Parse(format!("unsupported checkpoint format `{}`", m.format)));
    }
    if m.lora_scale != 1.0 {
        return Err(Error::Parse(format!("unsupported lora_scale {}", m.lora_scale)));
    }
    m.spec.validate()?;
    if m.sharing_map != m.spec.unrolled()? {
        return Err(Error::Parse("sharing map does not match the spec's strategy".into()));
    }
    let bytes = fs::read(dir.join(WEIGHTS))?;
    let total: usize = m.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * 8 {
        return Err(Error::Parse(format!("weights.bin has {} bytes, manifest needs {}", bytes.len(), total * 8)));
    }
    let mut params = ParamStore::new();
    let mut off = 0;
    for e in &m.tensors {
        let n: usize = e.shape.iter().product();
        let data = bytes[off * 8..(off + n) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        off += n;
    }
    let weights = ModelWeights { spec: m.spec, params };
    weights.validate()?;
    if let Some(r) = &m.router {
        r.validate()?;
    }
    Ok(Model { weights, router: m.router, kv_mode: m.kv_mode })
}
