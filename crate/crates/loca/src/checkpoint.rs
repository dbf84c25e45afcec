//! Checkpoints: a named-tensor container (manifest with name/shape/offset,
//! then concatenated tensor records) plus training metadata. Writes go
//! through a temporary file and an atomic rename, so a crash never leaves
//! a partial checkpoint behind.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use loca_tensor::{io as tio, Tensor};

use crate::error::LocaError;
use crate::layers::ParamWalk;
use crate::model::LocaModel;
use crate::optim::AdamW;

pub const MAGIC: &[u8; 4] = b"LCKP";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Epochs completed so far.
    pub epoch: usize,
    pub adam_step: u64,
    pub config_hash: u64,
    /// Rendered model configuration (key=value lines).
    pub model_config: String,
    pub mode: String,
    pub variant: String,
    pub seed: u64,
    pub best_val_mae: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: CheckpointMeta,
    entries: Vec<ManifestEntry>,
}

/// Everything read back from disk; tensors indexed by name.
pub struct CheckpointData {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &LocaModel<f32>,
    optimizer: Option<&AdamW<f32>>,
    meta: &CheckpointMeta,
) -> Result<(), LocaError> {
    let mut named: Vec<(String, Tensor<f32>)> = Vec::new();
    model.walk("model", &mut |name, p| named.push((name, p.value.clone())));
    if let Some(opt) = optimizer {
        let param_names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
        for ((m, v), pname) in opt.export_moments().into_iter().zip(param_names.iter()) {
            let shape = named
                .iter()
                .find(|(n, _)| n == pname)
                .map(|(_, t)| t.shape().to_vec())
                .expect("moment aligned with parameter");
            named.push((format!("optim.m.{pname}"), Tensor::from_vec(&shape, m).unwrap()));
            named.push((format!("optim.v.{pname}"), Tensor::from_vec(&shape, v).unwrap()));
        }
    }

    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(named.len());
    for (name, tensor) in &named {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset: blob.len(),
        });
        tio::write_tensor(&mut blob, tensor)?;
    }
    let manifest = Manifest { meta: meta.clone(), entries };
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| LocaError::Checkpoint(format!("manifest encode: {e}")))?;

    let tmp = path.with_extension("tmp");
    {
        let file = std::fs::File::create(&tmp)
            .map_err(|e| LocaError::io(tmp.display().to_string(), e))?;
        let mut w = std::io::BufWriter::new(file);
        let io_err = |e| LocaError::io(tmp.display().to_string(), e);
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_all(&(manifest_json.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&manifest_json).map_err(io_err)?;
        w.write_all(&blob).map_err(io_err)?;
        w.flush().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| LocaError::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData, LocaError> {
    let bytes = std::fs::read(path).map_err(|e| LocaError::io(path.display().to_string(), e))?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(LocaError::Checkpoint(format!("{}: not a checkpoint", path.display())));
    }
    let mlen = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if bytes.len() < 8 + mlen {
        return Err(LocaError::Checkpoint(format!("{}: truncated manifest", path.display())));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[8..8 + mlen])
        .map_err(|e| LocaError::Checkpoint(format!("manifest decode: {e}")))?;
    let blob = &bytes[8 + mlen..];
    let mut tensors = BTreeMap::new();
    for entry in manifest.entries {
        if entry.offset >= blob.len() {
            return Err(LocaError::Checkpoint(format!(
                "entry {} offset {} beyond blob",
                entry.name, entry.offset
            )));
        }
        let mut slice = &blob[entry.offset..];
        let tensor = tio::read_tensor(&mut slice)?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(LocaError::Checkpoint(format!(
                "entry {}: shape {:?} does not match manifest {:?}",
                entry.name,
                tensor.shape(),
                entry.shape
            )));
        }
        tensors.insert(entry.name, tensor);
    }
    Ok(CheckpointData { meta: manifest.meta, tensors })
}

/// Load parameters into an existing model; every parameter must be present
/// with a matching shape.
pub fn apply_parameters(model: &mut LocaModel<f32>, data: &CheckpointData) -> Result<(), LocaError> {
    let mut missing = Vec::new();
    let mut applied = 0usize;
    model.walk_mut("model", &mut |name, p| {
        match data.tensors.get(&name) {
            Some(t) if t.shape() == p.value.shape() => {
                p.value.data_mut().copy_from_slice(t.data());
                applied += 1;
            }
            Some(t) => missing.push(format!(
                "{name}: shape {:?} vs checkpoint {:?}",
                p.value.shape(),
                t.shape()
            )),
            None => missing.push(format!("{name}: absent from checkpoint")),
        }
    });
    if !missing.is_empty() {
        return Err(LocaError::Checkpoint(missing.join("; ")));
    }
    if applied == 0 {
        return Err(LocaError::Checkpoint("checkpoint holds no parameters".into()));
    }
    Ok(())
}

/// Rebuild a model from a checkpoint: architecture from the embedded
/// config, weights from the tensor blob.
pub fn load_model(path: &Path) -> Result<(LocaModel<f32>, CheckpointMeta), LocaError> {
    use rand::SeedableRng;
    let data = load_checkpoint(path)?;
    let (model_cfg, _) = crate::config::ConfigFile::parse(&data.meta.model_config)?.into_configs()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(data.meta.seed);
    let mut model = LocaModel::new(&model_cfg, &mut rng)?;
    apply_parameters(&mut model, &data)?;
    Ok((model, data.meta))
}

/// Restore optimizer moments in the model's canonical parameter order.
pub fn extract_moments(
    model: &LocaModel<f32>,
    data: &CheckpointData,
) -> Result<Option<Vec<(Vec<f32>, Vec<f32>)>>, LocaError> {
    let mut names = Vec::new();
    model.walk("model", &mut |name, _| names.push(name));
    let mut moments = Vec::with_capacity(names.len());
    for name in &names {
        let m = data.tensors.get(&format!("optim.m.{name}"));
        let v = data.tensors.get(&format!("optim.v.{name}"));
        match (m, v) {
            (Some(m), Some(v)) => moments.push((m.data().to_vec(), v.data().to_vec())),
            _ => return Ok(None), // checkpoint without optimizer state
        }
    }
    Ok(Some(moments))
}
