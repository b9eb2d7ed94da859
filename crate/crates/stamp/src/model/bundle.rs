//! Self-contained model archive (`export.stamp`): an 8-byte magic, a
//! little-endian u64 manifest length, a JSON manifest (model configuration,
//! categories, extractor id, tabular schema, train fingerprint, tensor
//! table) and the raw little-endian f32 tensor data.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{Cohort, TabularSchema};
use crate::error::{Result, StampError};
use crate::model::transformer::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"STAMPMDL";

/// Per-dimension standardization of the model input, fit on the training
/// tiles. Keeping it in the bundle makes deployment self-contained and turns
/// gradient×input attribution into a deviation-from-baseline measure, where
/// the baseline is the mean training tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn apply(&self, bag: &mut ndarray::Array2<f64>) {
        assert_eq!(bag.ncols(), self.mean.len());
        for mut row in bag.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainFingerprint {
    pub seed: u64,
    /// SHA-256 over the sorted training patients' ids, labels and feature
    /// file names.
    pub data_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    target_label: String,
    categories: Vec<String>,
    extractor_id: String,
    tabular: TabularSchema,
    scaler: FeatureScaler,
    fingerprint: TrainFingerprint,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub model: Model,
    pub target_label: String,
    pub categories: Vec<String>,
    pub extractor_id: String,
    pub tabular: TabularSchema,
    pub scaler: FeatureScaler,
    pub fingerprint: TrainFingerprint,
}

/// Fingerprint of the training data: stable across runs, sensitive to any
/// change in membership, labels or slide composition.
pub fn data_fingerprint(cohort: &Cohort, patient_ids: &[String]) -> String {
    let mut ids: Vec<&String> = patient_ids.iter().collect();
    ids.sort();
    let mut hasher = Sha256::new();
    for id in ids {
        let Some(p) = cohort.patient(id) else { continue };
        hasher.update(p.patient_id.as_bytes());
        hasher.update([0u8]);
        hasher.update(cohort.categories[p.label].as_bytes());
        hasher.update([0u8]);
        for f in &p.feature_files {
            if let Some(name) = f.file_name() {
                hasher.update(name.to_string_lossy().as_bytes());
                hasher.update([0u8]);
            }
        }
        hasher.update([0xff]);
    }
    format!("{:x}", hasher.finalize())
}

pub fn save_bundle(path: &Path, bundle: &ModelBundle) -> Result<()> {
    let mut tensors = Vec::new();
    let mut offset = 0usize;
    for (name, shape, _) in bundle.model.layout.tensors() {
        let len: usize = shape.iter().product();
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
            len,
        });
        offset += len;
    }
    let manifest = Manifest {
        format_version: 1,
        model: bundle.model.cfg.clone(),
        target_label: bundle.target_label.clone(),
        categories: bundle.categories.clone(),
        extractor_id: bundle.extractor_id.clone(),
        tabular: bundle.tabular.clone(),
        scaler: bundle.scaler.clone(),
        fingerprint: bundle.fingerprint.clone(),
        tensors,
    };
    let manifest_json = serde_json::to_vec(&manifest)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    f.write_all(&manifest_json)?;
    for &p in &bundle.model.params {
        f.write_all(&(p as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let malformed = |detail: &str| StampError::MalformedBundle {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut f = File::open(path).map_err(|_| StampError::ConfigFileNotFound(path.to_path_buf()))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| malformed("truncated header"))?;
    if &magic != MAGIC {
        return Err(malformed("bad magic"));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes).map_err(|_| malformed("truncated header"))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    if manifest_len > 64 << 20 {
        return Err(malformed("implausible manifest length"));
    }
    let mut manifest_json = vec![0u8; manifest_len];
    f.read_exact(&mut manifest_json).map_err(|_| malformed("truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(&manifest_json).map_err(|_| malformed("invalid manifest JSON"))?;
    if manifest.format_version != 1 {
        return Err(malformed("unsupported format version"));
    }
    let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
    let mut raw = vec![0u8; total * 4];
    f.read_exact(&mut raw).map_err(|_| malformed("truncated tensor data"))?;
    let mut params = vec![0.0f64; total];
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        params[i] = f32::from_le_bytes(chunk.try_into().expect("chunk of 4")) as f64;
    }
    let model = Model::from_params(manifest.model.clone(), params);
    for ((name, shape, off), entry) in model.layout.tensors().zip(&manifest.tensors) {
        if name != entry.name || shape != entry.shape.as_slice() || off != entry.offset {
            return Err(malformed("tensor table does not match the model configuration"));
        }
    }
    Ok(ModelBundle {
        model,
        target_label: manifest.target_label,
        categories: manifest.categories,
        extractor_id: manifest.extractor_id,
        tabular: manifest.tabular,
        scaler: manifest.scaler,
        fingerprint: manifest.fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_bundle() -> ModelBundle {
        let cfg = ModelConfig {
            dim_input: 6,
            dim_model: 8,
            n_layers: 1,
            n_heads: 2,
            mlp_ratio: 2,
            dropout: 0.1,
            n_classes: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ModelBundle {
            model: Model::init(cfg, &mut rng),
            target_label: "isSignal".into(),
            categories: vec!["NEG".into(), "POS".into()],
            extractor_id: "toy-v1-d48".into(),
            tabular: TabularSchema {
                cat_labels: vec!["SEX".into()],
                cat_categories: vec![vec!["F".into(), "M".into()]],
                cont_labels: vec!["AGE".into()],
                cont_mean: vec![61.5],
                cont_sd: vec![8.25],
            },
            scaler: FeatureScaler::identity(6),
            fingerprint: TrainFingerprint {
                seed: 7,
                data_sha256: "ab".repeat(32),
            },
        }
    }

    #[test]
    fn round_trip_preserves_everything_up_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("export.stamp");
        let bundle = sample_bundle();
        save_bundle(&path, &bundle).unwrap();
        let loaded = load_bundle(&path).unwrap();
        assert_eq!(loaded.model.cfg, bundle.model.cfg);
        assert_eq!(loaded.categories, bundle.categories);
        assert_eq!(loaded.extractor_id, bundle.extractor_id);
        assert_eq!(loaded.tabular, bundle.tabular);
        assert_eq!(loaded.fingerprint, bundle.fingerprint);
        for (a, b) in loaded.model.params.iter().zip(&bundle.model.params) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = sample_bundle();
        let p1 = dir.path().join("a.stamp");
        let p2 = dir.path().join("b.stamp");
        save_bundle(&p1, &bundle).unwrap();
        save_bundle(&p2, &bundle).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected_with_detail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("export.stamp");
        std::fs::write(&path, b"not a bundle").unwrap();
        assert!(matches!(
            load_bundle(&path),
            Err(StampError::MalformedBundle { .. })
        ));
        save_bundle(&path, &sample_bundle()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 10);
        std::fs::write(&path, bytes).unwrap();
        match load_bundle(&path) {
            Err(StampError::MalformedBundle { detail, .. }) => {
                assert!(detail.contains("truncated"))
            }
            other => panic!("unexpected: {other:?}"),
        }
    }
}
