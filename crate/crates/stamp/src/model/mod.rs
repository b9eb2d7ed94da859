//! Weakly-supervised aggregation model: a small pre-norm transformer over a
//! patient's tile features with a learned class token and no positional
//! encoding, trained with class-weighted cross-entropy.

mod bundle;
mod train;
mod transformer;

pub use bundle::{data_fingerprint, load_bundle, save_bundle, FeatureScaler, ModelBundle, TrainFingerprint};
pub use train::{
    crossval, deploy, predict_patients, train_full, write_patient_preds, ArchConfig,
    PatientPrediction, TrainConfig,
};
pub use transformer::{gradcheck, softmax, weighted_ce, Cache, Model, ModelConfig};
