//! Model checkpoints: `model.bin` (f32 payload) plus `model.manifest.json`
//! holding the training config, epoch, best validation loss and tensor layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::layers::Tensors;
use crate::model::AnomalyModel;
use crate::tensor_io::{self, StoredTensor, TensorEntry};

const FORMAT: &str = "fsad-checkpoint/1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    pub tensors: Vec<StoredTensor>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: TrainConfig,
    epoch: usize,
    best_val_loss: Option<f64>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Snapshot the trainable parameters and batch-norm buffers of a model.
    /// Values are stored in single precision.
    pub fn from_model(model: &AnomalyModel, config: &TrainConfig, epoch: usize, best_val_loss: Option<f64>) -> Self {
        let tensors = model
            .tensors("")
            .into_iter()
            .map(|t| StoredTensor {
                name: t.name,
                shape: t.shape,
                data: t.data.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self {
            config: config.clone(),
            epoch,
            best_val_loss: best_val_loss.filter(|v| v.is_finite()),
            tensors,
        }
    }

    pub fn save(&self, bin: &Path) -> Result<()> {
        let (payload, entries) = tensor_io::encode(&self.tensors);
        let manifest = Manifest {
            format: FORMAT.into(),
            config: self.config.clone(),
            epoch: self.epoch,
            best_val_loss: self.best_val_loss,
            tensors: entries,
        };
        fs::write(bin, payload).map_err(|e| Error::io(bin, e))?;
        let path = tensor_io::manifest_path(bin);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(bin: &Path) -> Result<Self> {
        let path = tensor_io::manifest_path(bin);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
        if manifest.format != FORMAT {
            return Err(Error::Corrupt(format!("unknown checkpoint format '{}'", manifest.format)));
        }
        let payload = fs::read(bin).map_err(|e| Error::io(bin, e))?;
        let expected: usize = manifest.tensors.iter().map(|e| e.length * 4).sum();
        if payload.len() != expected {
            return Err(Error::Corrupt(format!(
                "payload has {} bytes but the manifest describes {expected}",
                payload.len()
            )));
        }
        let tensors = tensor_io::decode(&payload, &manifest.tensors)?;
        Ok(Self {
            config: manifest.config,
            epoch: manifest.epoch,
            best_val_loss: manifest.best_val_loss,
            tensors,
        })
    }

    /// Rebuild the model described by the stored config and copy the tensors in.
    pub fn to_model(&self) -> Result<AnomalyModel> {
        let mut model = AnomalyModel::new(&self.config)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }

    /// Copy stored tensors into a structurally matching model.
    pub fn apply_to(&self, model: &mut AnomalyModel) -> Result<()> {
        let targets = model.tensors_mut("");
        if targets.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} tensors but the model has {}",
                self.tensors.len(),
                targets.len()
            )));
        }
        for target in targets {
            let stored = self
                .tensors
                .iter()
                .find(|t| t.name == target.name)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks tensor {}", target.name)))?;
            if stored.shape != target.shape {
                return Err(Error::Contract(format!(
                    "tensor {}: checkpoint shape {:?}, config implies {:?}",
                    target.name, stored.shape, target.shape
                )));
            }
            for (dst, &src) in target.data.iter_mut().zip(&stored.data) {
                *dst = f64::from(src);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> TrainConfig {
        TrainConfig {
            image_size: 16,
            d_prime: 4,
            reduction_width: 6,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("model.bin");
        let cfg = small_config();
        let model = AnomalyModel::new(&cfg).unwrap();
        let ck = Checkpoint::from_model(&model, &cfg, 7, Some(0.25));
        ck.save(&bin).unwrap();
        let back = Checkpoint::load(&bin).unwrap();
        assert_eq!(back, ck);
        let bits = |c: &Checkpoint| -> Vec<u32> {
            c.tensors.iter().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&back), bits(&ck));

        let rebuilt = back.to_model().unwrap();
        let again = Checkpoint::from_model(&rebuilt, &cfg, 7, Some(0.25));
        assert_eq!(again, ck);
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("model.bin");
        let cfg = small_config();
        Checkpoint::from_model(&AnomalyModel::new(&cfg).unwrap(), &cfg, 0, None)
            .save(&bin)
            .unwrap();
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 6]).unwrap();
        assert!(matches!(Checkpoint::load(&bin), Err(Error::Corrupt(_))));
    }

    #[test]
    fn mismatched_d_prime_is_contract_error() {
        let cfg = small_config();
        let mut ck = Checkpoint::from_model(&AnomalyModel::new(&cfg).unwrap(), &cfg, 0, None);
        ck.config.d_prime = 5;
        assert!(matches!(ck.to_model(), Err(Error::Contract(_))));
    }
}
