//! Head checkpoints: weights plus a JSON metadata blob in one container.

use std::path::Path;

use ndarray::{Array1, Ix1, Ix4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::heads::{AffinityHead, Heads, ObjectnessHead};
use crate::error::{Error, Result};
use crate::tensors::{TensorStore, TensorWriter};
use crate::training::trainer::{EpochMetrics, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const META_KEY: &str = "dinoiser";
const FORMAT_KEY: &str = "format";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    /// 1-based block index the heads read from.
    pub input_tap: usize,
    pub d_in: usize,
    pub d_g: usize,
    pub gamma_default: f64,
    pub delta_default: f64,
    pub backbone_id: String,
    #[serde(default)]
    pub teacher_id: Option<String>,
    #[serde(default)]
    pub config: Option<TrainConfig>,
    #[serde(default)]
    pub history: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub heads: Heads,
    pub meta: CheckpointMeta,
}

fn incompatible(msg: impl Into<String>) -> Error {
    Error::IncompatibleCheckpoint(msg.into())
}

impl Checkpoint {
    /// Wrap `heads` with default metadata and no training history.
    pub fn from_heads(heads: Heads, backbone_id: impl Into<String>) -> Self {
        Self {
            meta: CheckpointMeta {
                version: CHECKPOINT_VERSION,
                input_tap: heads.input_tap(),
                d_in: heads.affinity.d_in(),
                d_g: heads.affinity.d_g(),
                gamma_default: crate::denoiser::pipeline::DEFAULT_GAMMA,
                delta_default: crate::denoiser::pipeline::DEFAULT_DELTA,
                backbone_id: backbone_id.into(),
                teacher_id: None,
                config: None,
                history: Vec::new(),
            },
            heads,
        }
    }

    fn writer(&self, portable: bool) -> Result<TensorWriter> {
        let mut w = TensorWriter::new();
        let h = &self.heads;
        let (d_in, d_g) = (h.affinity.d_in(), h.affinity.d_g());
        let k = h.affinity.kernel();
        let ok = h.objectness.kernel();
        let ob = [h.objectness.bias()];
        let k = k.as_standard_layout();
        let kernel = k.as_slice().expect("standard layout");
        let bias = h.affinity.bias().to_vec();
        let ok = ok.to_vec();
        if portable {
            let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
            w.insert_f32("affinity_head.kernel", &[3, 3, d_in, d_g], &f(kernel));
            w.insert_f32("affinity_head.bias", &[d_g], &f(&bias));
            w.insert_f32("objectness_head.kernel", &[1, 1, d_in, 1], &f(&ok));
            w.insert_f32("objectness_head.bias", &[1], &f(&ob));
        } else {
            w.insert_f64("affinity_head.kernel", &[3, 3, d_in, d_g], kernel);
            w.insert_f64("affinity_head.bias", &[d_g], &bias);
            w.insert_f64("objectness_head.kernel", &[1, 1, d_in, 1], &ok);
            w.insert_f64("objectness_head.bias", &[1], &ob);
        }
        let mut meta = self.meta.clone();
        if portable {
            meta.history.clear();
            meta.config = None;
        }
        w.set_metadata(META_KEY, serde_json::to_string(&meta)?);
        w.set_metadata(FORMAT_KEY, if portable { "dinoiser-heads-f32" } else { "dinoiser-heads" });
        Ok(w)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.writer(false)?.to_bytes()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.writer(false)?.write(path)
    }

    /// Heads as `f32` with metadata but without training history.
    pub fn export_bytes(&self) -> Result<Vec<u8>> {
        self.writer(true)?.to_bytes()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], origin: impl AsRef<Path>) -> Result<Self> {
        let origin = origin.as_ref();
        let store = TensorStore::from_bytes(bytes, origin)
            .map_err(|e| incompatible(format!("{}: {e}", origin.display())))?;
        let raw = store
            .metadata()
            .get(META_KEY)
            .ok_or_else(|| incompatible("missing checkpoint metadata"))?;
        let version = serde_json::from_str::<serde_json::Value>(raw)
            .ok()
            .and_then(|v| v.get("version").and_then(|x| x.as_u64()))
            .ok_or_else(|| incompatible("metadata has no version"))?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(incompatible(format!(
                "version {version}, this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let meta: CheckpointMeta =
            serde_json::from_str(raw).map_err(|e| incompatible(format!("metadata: {e}")))?;
        let (d_in, d_g) = (meta.d_in, meta.d_g);
        let tensor = |name: &str, shape: &[usize]| {
            store
                .f64(name, Some(shape))
                .map_err(|e| incompatible(e.to_string()))
        };
        let kernel = tensor("affinity_head.kernel", &[3, 3, d_in, d_g])?
            .into_dimensionality::<Ix4>()
            .expect("rank checked");
        let bias = tensor("affinity_head.bias", &[d_g])?
            .into_dimensionality::<Ix1>()
            .expect("rank checked");
        let ok = tensor("objectness_head.kernel", &[1, 1, d_in, 1])?;
        let ob = tensor("objectness_head.bias", &[1])?;
        let affinity = AffinityHead::new(kernel, bias, meta.input_tap).map_err(|e| incompatible(e.to_string()))?;
        let objectness = ObjectnessHead::new(Array1::from(ok.iter().copied().collect::<Vec<_>>()), ob[[0]])
            .map_err(|e| incompatible(e.to_string()))?;
        Ok(Self {
            heads: Heads { affinity, objectness },
            meta,
        })
    }

    /// Short content hash of the serialized checkpoint.
    pub fn id(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?))[..16].to_string())
    }

    /// Refuse to run against a backbone tapped at a different block unless
    /// `allow_mismatch` is set.
    pub fn check_tap(&self, backbone_tap: usize, allow_mismatch: bool) -> Result<()> {
        if self.meta.input_tap != backbone_tap && !allow_mismatch {
            return Err(incompatible(format!(
                "heads were trained on block {} but the backbone taps block {backbone_tap}",
                self.meta.input_tap
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let heads = Heads::init(6, 3, 10, &mut rng).unwrap();
        Checkpoint {
            meta: CheckpointMeta {
                version: CHECKPOINT_VERSION,
                input_tap: 10,
                d_in: 6,
                d_g: 3,
                gamma_default: 0.2,
                delta_default: 0.98,
                backbone_id: "test".into(),
                teacher_id: None,
                config: Some(TrainConfig::default()),
                history: vec![EpochMetrics {
                    epoch: 0,
                    loss_c: 0.1 + 0.2,
                    loss_m: 1.0 / 3.0,
                    lr: 5e-4,
                }],
            },
            heads,
        }
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_and_version_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(Checkpoint::from_bytes(cut, "mem"), Err(Error::IncompatibleCheckpoint(_))));
        let mut c = sample();
        c.meta.version = 99;
        let bytes = c.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes, "mem"), Err(Error::IncompatibleCheckpoint(_))));
    }

    #[test]
    fn tap_guard() {
        let c = sample();
        assert!(c.check_tap(10, false).is_ok());
        assert!(matches!(c.check_tap(9, false), Err(Error::IncompatibleCheckpoint(_))));
        assert!(c.check_tap(9, true).is_ok());
    }

    #[test]
    fn export_loads_as_f32_precision() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.export_bytes().unwrap(), "mem").unwrap();
        assert!(back.meta.history.is_empty());
        let a = c.heads.affinity.kernel();
        let b = back.heads.affinity.kernel();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-6));
    }
}
