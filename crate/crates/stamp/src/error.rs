//! Error taxonomy shared by every pipeline stage.
//!
//! Each user-facing error carries an optional one-line remediation which the
//! CLI prints below the error message.

use std::path::PathBuf;
use thiserror::Error;

fn key_list(keys: &[String]) -> String {
    keys.iter()
        .map(|k| format!("'{k}'"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Error)]
pub enum StampError {
    #[error("Config file not found: {0}")]
    ConfigFileNotFound(PathBuf),

    #[error("Config parse error at line {line}, column {column}: {message}")]
    ConfigParse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("Missing required configuration keys: [{}]", key_list(.0))]
    MissingKeys(Vec<String>),

    #[error("Type mismatch for configuration key '{key}': expected {expected}")]
    TypeMismatch { key: String, expected: String },

    #[error("Invalid value for configuration key '{key}': {reason}")]
    InvalidValue { key: String, reason: String },

    #[error("Unknown command '{0}'")]
    UnknownCommand(String),

    #[error("Unsupported format error: {0}")]
    UnsupportedFormat(PathBuf),

    #[error("Slide skipped due to missing resolution information: {0}")]
    MissingResolution(PathBuf),

    #[error("Corrupt slide file {path}: {detail}")]
    CorruptFile { path: PathBuf, detail: String },

    #[error("Upscaling requested: target MPP {target_mpp} is finer than the slide's base MPP {mpp_base}")]
    UpscaleRequested { target_mpp: f64, mpp_base: f64 },

    #[error("Insufficient tissue for stain estimation: {0}")]
    InsufficientTissue(String),

    #[error("Key error: ['{0}']")]
    KeyError(String),

    #[error("Duplicate patient '{0}' in clinical table")]
    DuplicatePatient(String),

    #[error("No features found in feature_dir: {0}")]
    NoFeaturesFound(PathBuf),

    #[error("Empty cohort: no patient has both a label and at least one feature file")]
    EmptyCohort,

    #[error("The least populated class in y has only 1 member, which is too few. The minimum number of groups for any class cannot be less than 2. (class '{0}')")]
    TooFewClassMembers(String),

    #[error("n_splits={n_splits} cannot be greater than the number of members in each class. (class '{class}' has {size})")]
    TooManySplits {
        n_splits: usize,
        class: String,
        size: usize,
    },

    #[error("Key error: '{0} not in index'")]
    StaleFolds(String),

    #[error("This DataLoader does not contain any batches: the cohort is empty")]
    EmptyBatch,

    #[error("Feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("Extractor backend failure: {0}")]
    BackendFailure(String),

    #[error("Malformed feature file {path}: {detail}")]
    MalformedFeatureFile { path: PathBuf, detail: String },

    #[error("Extractor mismatch: model was trained on '{expected}' but features carry '{got}'")]
    ExtractorMismatch { expected: String, got: String },

    #[error("Malformed model bundle {path}: {detail}")]
    MalformedBundle { path: PathBuf, detail: String },

    #[error("Only one class present in the scored cohort; AUROC is undefined")]
    SingleClass,

    #[error("No positive samples present; AUPRC is undefined")]
    NoPositives,

    #[error("Schema error in {path}: {detail}")]
    SchemaError { path: PathBuf, detail: String },

    #[error("Missing cache thumbnail: {0}")]
    MissingThumbnail(PathBuf),

    #[error("No slide matching '{0}' found in wsi_dir")]
    SlideUnavailable(String),

    #[error("Truth file does not match the cohort: {0}")]
    CohortMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Hdf5(#[from] hdf5::Error),

    #[error("Image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl StampError {
    /// One-line remediation hint, mirroring the troubleshooting table the
    /// CLI prints under the error message.
    pub fn remediation(&self) -> Option<&'static str> {
        use StampError::*;
        match self {
            ConfigFileNotFound(_) => Some(
                "Use the --config flag to specify an absolute path to the configuration file.",
            ),
            MissingKeys(_) => {
                Some("Fill in the required arguments in the section that is indicated in the error message.")
            }
            UnsupportedFormat(_) => {
                Some("Rescan the slides into .tiff, or convert the file to .ome.tiff using a conversion tool.")
            }
            MissingResolution(_) => Some(
                "Rescan the slide ensuring resolution info to be present, otherwise the slide cannot be processed and should be skipped. Estimating resolution is considered bad practice.",
            ),
            CorruptFile { .. } => {
                Some("Re-download the file and try again. Otherwise the scan needs to be redone.")
            }
            TooFewClassMembers(_) => Some(
                "Manually specify the categories in the categories argument of the modeling section so that no table artifacts (\"None\", \"NA\", \"-\") are counted as classes, or transform the data so every category has more than one occurrence.",
            ),
            TooManySplits { .. } => {
                Some("Reduce the number of splits through the n_splits argument.")
            }
            NoFeaturesFound(_) => Some(
                "Manually check the feature directory if there are .h5 files present with names that are put in the slide table (without file extensions).",
            ),
            KeyError(_) => Some(
                "The biomarker name in target_label needs to be exactly the same as how it is defined in the clinical table.",
            ),
            StaleFolds(_) => Some(
                "Remove the output of previous runs which failed or were abruptly stopped, so that a new folds.json file is generated.",
            ),
            EmptyBatch => Some(
                "Gather more data; sample sizes this small cannot support weakly-supervised modeling.",
            ),
            _ => None,
        }
    }
}

pub type Result<T, E = StampError> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_keys_message_uses_bracketed_list() {
        let e = StampError::MissingKeys(vec!["heatmaps.model_path".into()]);
        assert_eq!(
            e.to_string(),
            "Missing required configuration keys: ['heatmaps.model_path']"
        );
    }

    #[test]
    fn key_error_message_matches_convention() {
        let e = StampError::KeyError("isMSIH".into());
        assert_eq!(e.to_string(), "Key error: ['isMSIH']");
    }

    #[test]
    fn table_errors_carry_remediation() {
        assert!(StampError::ConfigFileNotFound("x".into())
            .remediation()
            .unwrap()
            .contains("--config"));
        assert!(StampError::NoFeaturesFound("x".into())
            .remediation()
            .unwrap()
            .contains(".h5"));
    }
}
