//! Slide and clinical table loading, patient-level cohort assembly against a
//! feature directory, and tabular covariate encoding.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StampError};
use crate::features::{read_feature_file, FeatureMatrix};

/// Slide-to-patient mapping. FILENAME entries carry no file extension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlideTable {
    /// (patient id, feature-file stem) pairs, de-duplicated.
    pub rows: Vec<(String, String)>,
}

/// Clinical table keyed by patient id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliniTable {
    pub columns: Vec<String>,
    /// Per patient: column name to raw cell value. Missing cells are "".
    pub rows: BTreeMap<String, BTreeMap<String, String>>,
    /// Ordered label categories for the target column.
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    /// Index into Cohort::categories.
    pub label: usize,
    pub feature_files: Vec<PathBuf>,
    /// Raw values of the configured categorical covariates, in order.
    pub cat_values: Vec<String>,
    /// Raw values of the configured continuous covariates; None when empty
    /// or unparsable.
    pub cont_values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
    pub categories: Vec<String>,
    pub target_label: String,
    pub cat_labels: Vec<String>,
    pub cont_labels: Vec<String>,
}

fn find_header(headers: &csv::StringRecord, names: &[&str]) -> Option<usize> {
    for name in names {
        if let Some(i) = headers.iter().position(|h| h.trim() == *name) {
            return Some(i);
        }
    }
    None
}

/// Either header spelling is accepted; the singular form is canonical.
const PATIENT_HEADERS: [&str; 2] = ["PATIENT", "PATIENTS"];
const FILENAME_HEADERS: [&str; 2] = ["FILENAME", "FILENAMES"];

pub fn load_slide_table(path: &Path) -> Result<SlideTable> {
    if !path.exists() {
        return Err(StampError::ConfigFileNotFound(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let p_col = find_header(&headers, &PATIENT_HEADERS)
        .ok_or_else(|| StampError::KeyError("PATIENT".into()))?;
    let f_col = find_header(&headers, &FILENAME_HEADERS)
        .ok_or_else(|| StampError::KeyError("FILENAME".into()))?;
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for record in reader.records() {
        let record = record?;
        let patient = record.get(p_col).unwrap_or("").trim().to_string();
        let mut filename = record.get(f_col).unwrap_or("").trim().to_string();
        if patient.is_empty() || filename.is_empty() {
            continue;
        }
        // stems only: a trailing slide extension is stripped if present
        for ext in [".h5", ".svs", ".tif", ".tiff"] {
            if let Some(stripped) = filename.strip_suffix(ext) {
                filename = stripped.to_string();
                break;
            }
        }
        if seen.insert((patient.clone(), filename.clone())) {
            rows.push((patient, filename));
        }
    }
    Ok(SlideTable { rows })
}

pub fn load_clini_table(
    path: &Path,
    target_label: &str,
    categories: Option<&[String]>,
) -> Result<CliniTable> {
    if !path.exists() {
        return Err(StampError::ConfigFileNotFound(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let p_col = find_header(&headers, &PATIENT_HEADERS)
        .ok_or_else(|| StampError::KeyError("PATIENT".into()))?;
    if !headers.iter().any(|h| h.trim() == target_label) {
        return Err(StampError::KeyError(target_label.to_string()));
    }
    let columns: Vec<String> = headers.iter().map(|h| h.trim().to_string()).collect();
    let mut rows: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let patient = record.get(p_col).unwrap_or("").trim().to_string();
        if patient.is_empty() {
            continue;
        }
        let mut cells = BTreeMap::new();
        for (i, col) in columns.iter().enumerate() {
            cells.insert(col.clone(), record.get(i).unwrap_or("").trim().to_string());
        }
        if rows.insert(patient.clone(), cells).is_some() {
            return Err(StampError::DuplicatePatient(patient));
        }
    }
    let categories = match categories {
        Some(c) => c.to_vec(),
        None => {
            // inferred: sorted distinct non-empty target values
            let distinct: BTreeSet<String> = rows
                .values()
                .filter_map(|cells| cells.get(target_label))
                .filter(|v| !v.is_empty())
                .cloned()
                .collect();
            distinct.into_iter().collect()
        }
    };
    Ok(CliniTable {
        columns,
        rows,
        categories,
    })
}

/// Join the tables against `feature_dir`. Patients without a label inside
/// `categories` or without any existing `.h5` feature file are dropped with
/// a warning.
pub fn build_cohort(
    slide_table: &SlideTable,
    clini_table: &CliniTable,
    feature_dir: &Path,
    target_label: &str,
    cat_labels: &[String],
    cont_labels: &[String],
) -> Result<Cohort> {
    let categories = &clini_table.categories;
    let mut files_per_patient: BTreeMap<&str, Vec<PathBuf>> = BTreeMap::new();
    let mut any_file = false;
    let mut missing_files = 0usize;
    for (patient, stem) in &slide_table.rows {
        let path = feature_dir.join(format!("{stem}.h5"));
        if path.exists() {
            any_file = true;
            files_per_patient.entry(patient).or_default().push(path);
        } else {
            missing_files += 1;
        }
    }
    if !any_file {
        return Err(StampError::NoFeaturesFound(feature_dir.to_path_buf()));
    }
    if missing_files > 0 {
        log::warn!("dropped {missing_files} slide table rows without a feature file");
    }

    let mut patients = Vec::new();
    let mut unlabeled = 0usize;
    for (patient, files) in files_per_patient {
        let Some(cells) = clini_table.rows.get(patient) else {
            unlabeled += 1;
            continue;
        };
        let value = cells.get(target_label).map(String::as_str).unwrap_or("");
        let Some(label) = categories.iter().position(|c| c == value) else {
            unlabeled += 1;
            continue;
        };
        let cat_values = cat_labels
            .iter()
            .map(|l| cells.get(l).cloned().unwrap_or_default())
            .collect();
        let cont_values = cont_labels
            .iter()
            .map(|l| cells.get(l).and_then(|v| v.parse::<f64>().ok()))
            .collect();
        patients.push(PatientRecord {
            patient_id: patient.to_string(),
            label,
            feature_files: files,
            cat_values,
            cont_values,
        });
    }
    if unlabeled > 0 {
        log::warn!("dropped {unlabeled} patients without a usable '{target_label}' label");
    }
    if patients.is_empty() {
        return Err(StampError::EmptyCohort);
    }
    Ok(Cohort {
        patients,
        categories: categories.clone(),
        target_label: target_label.to_string(),
        cat_labels: cat_labels.to_vec(),
        cont_labels: cont_labels.to_vec(),
    })
}

impl Cohort {
    pub fn patient(&self, id: &str) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.patient_id == id)
    }

    /// Per-category patient counts, indexed like `categories`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.categories.len()];
        for p in &self.patients {
            counts[p.label] += 1;
        }
        counts
    }
}

/// Frozen encoding of tabular covariates: one-hot per categorical label
/// (observed training categories, sorted), z-score per continuous label
/// with training-cohort statistics. Missing values encode to zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularSchema {
    pub cat_labels: Vec<String>,
    pub cat_categories: Vec<Vec<String>>,
    pub cont_labels: Vec<String>,
    pub cont_mean: Vec<f64>,
    pub cont_sd: Vec<f64>,
}

impl TabularSchema {
    pub fn fit(cohort: &Cohort, patient_ids: &[String]) -> Self {
        let records: Vec<&PatientRecord> = patient_ids
            .iter()
            .filter_map(|id| cohort.patient(id))
            .collect();
        let cat_categories = (0..cohort.cat_labels.len())
            .map(|i| {
                let distinct: BTreeSet<String> = records
                    .iter()
                    .map(|r| r.cat_values[i].clone())
                    .filter(|v| !v.is_empty())
                    .collect();
                distinct.into_iter().collect()
            })
            .collect();
        let mut cont_mean = Vec::new();
        let mut cont_sd = Vec::new();
        for i in 0..cohort.cont_labels.len() {
            let values: Vec<f64> = records.iter().filter_map(|r| r.cont_values[i]).collect();
            let mean = if values.is_empty() {
                0.0
            } else {
                values.iter().sum::<f64>() / values.len() as f64
            };
            let var = if values.len() > 1 {
                values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64
            } else {
                0.0
            };
            cont_mean.push(mean);
            cont_sd.push(var.sqrt());
        }
        Self {
            cat_labels: cohort.cat_labels.clone(),
            cat_categories,
            cont_labels: cohort.cont_labels.clone(),
            cont_mean,
            cont_sd,
        }
    }

    pub fn dim(&self) -> usize {
        self.cat_categories.iter().map(Vec::len).sum::<usize>() + self.cont_labels.len()
    }

    pub fn encode(&self, record: &PatientRecord) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for (i, cats) in self.cat_categories.iter().enumerate() {
            let value = record.cat_values.get(i).map(String::as_str).unwrap_or("");
            for c in cats {
                out.push(if c == value { 1.0 } else { 0.0 });
            }
        }
        for i in 0..self.cont_labels.len() {
            let z = match record.cont_values.get(i).copied().flatten() {
                Some(v) if self.cont_sd[i] > 0.0 => (v - self.cont_mean[i]) / self.cont_sd[i],
                Some(v) => v - self.cont_mean[i],
                None => 0.0,
            };
            out.push(z);
        }
        out
    }
}

/// One patient's tile features concatenated across slides, with per-tile
/// slide provenance for explanation rendering.
#[derive(Debug, Clone)]
pub struct PatientBag {
    pub feats: Array2<f32>,
    /// (slide stem, tile x, tile y) for each feature row.
    pub tiles: Vec<(String, i32, i32)>,
    pub extractor_id: String,
}

/// Load and concatenate a patient's feature files. All files must carry the
/// same extractor id; when `expected_extractor` is given it is enforced too.
pub fn load_patient_bag(
    record: &PatientRecord,
    expected_extractor: Option<&str>,
) -> Result<PatientBag> {
    let mut parts: Vec<FeatureMatrix> = Vec::new();
    let mut stems: Vec<String> = Vec::new();
    for path in &record.feature_files {
        let fm = read_feature_file(path)?;
        stems.push(
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        parts.push(fm);
    }
    assert!(!parts.is_empty(), "cohort invariant: >=1 feature file");
    let extractor_id = parts[0].extractor_id.clone();
    for fm in &parts {
        if fm.extractor_id != extractor_id {
            return Err(StampError::ExtractorMismatch {
                expected: extractor_id,
                got: fm.extractor_id.clone(),
            });
        }
    }
    if let Some(expected) = expected_extractor {
        if extractor_id != expected {
            return Err(StampError::ExtractorMismatch {
                expected: expected.to_string(),
                got: extractor_id,
            });
        }
    }
    let dim = parts[0].feats.ncols();
    let mut feats = Array2::zeros((0, dim));
    let mut tiles = Vec::new();
    for (fm, stem) in parts.iter().zip(&stems) {
        if fm.feats.ncols() != dim {
            return Err(StampError::DimensionMismatch {
                expected: dim,
                got: fm.feats.ncols(),
            });
        }
        feats.append(Axis(0), fm.feats.view()).expect("same width");
        for row in fm.coords.rows() {
            tiles.push((stem.clone(), row[0], row[1]));
        }
    }
    Ok(PatientBag {
        feats,
        tiles,
        extractor_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{write_feature_file, FeatureMatrix};
    use ndarray::Array2;
    use std::fs;

    fn write_csv(path: &Path, body: &str) {
        fs::write(path, body).unwrap();
    }

    fn fake_features(path: &Path, n: usize, fill: f32) {
        let fm = FeatureMatrix {
            feats: Array2::from_elem((n, 4), fill),
            coords: Array2::from_shape_fn((n, 2), |(i, j)| (i * 224 * (1 + j)) as i32),
            extractor_id: "toy-v1-d48".into(),
            tile_px: 224,
            target_mpp: 1.1428571428571428,
            norm: "macenko".into(),
        };
        write_feature_file(path, &fm).unwrap();
    }

    #[test]
    fn slide_table_accepts_both_header_spellings_and_strips_extensions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("slide.csv");
        write_csv(&p, "PATIENTS,FILENAMES\nID_1337,slide_a.svs\nID_1337,slide_b\nID_2,slide_c.h5\nID_1337,slide_a\n");
        let t = load_slide_table(&p).unwrap();
        assert_eq!(
            t.rows,
            vec![
                ("ID_1337".into(), "slide_a".into()),
                ("ID_1337".into(), "slide_b".into()),
                ("ID_2".into(), "slide_c".into()),
            ]
        );
    }

    #[test]
    fn slide_table_missing_patient_column_is_key_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("slide.csv");
        write_csv(&p, "ID,FILENAME\na,b\n");
        match load_slide_table(&p) {
            Err(StampError::KeyError(k)) => assert_eq!(k, "PATIENT"),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn clini_table_infers_sorted_categories_and_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clini.csv");
        write_csv(&p, "PATIENT,isMSIH\nID_2,MSS\nID_1,MSI-H\nID_3,\n");
        let t = load_clini_table(&p, "isMSIH", None).unwrap();
        assert_eq!(t.categories, vec!["MSI-H".to_string(), "MSS".to_string()]);

        write_csv(&p, "PATIENT,isMSIH\nID_1,MSS\nID_1,MSI-H\n");
        assert!(matches!(
            load_clini_table(&p, "isMSIH", None),
            Err(StampError::DuplicatePatient(p)) if p == "ID_1"
        ));
    }

    #[test]
    fn misspelled_target_is_key_error_with_bracket_style() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clini.csv");
        write_csv(&p, "PATIENT,isMSIH\nID_1,MSS\n");
        let err = load_clini_table(&p, "isMSIh", None).unwrap_err();
        assert_eq!(err.to_string(), "Key error: ['isMSIh']");
    }

    fn fixture(dir: &Path) -> (SlideTable, CliniTable, PathBuf) {
        let slide_csv = dir.join("slide.csv");
        write_csv(
            &slide_csv,
            "PATIENT,FILENAME\nID_1,s1\nID_1,s2\nID_2,s3\nID_3,s4\nID_4,s5\n",
        );
        let clini_csv = dir.join("clini.csv");
        write_csv(
            &clini_csv,
            "PATIENT,isMSIH,AGE,SEX\nID_1,MSI-H,60,F\nID_2,MSS,70,M\nID_3,NA,65,F\nID_4,MSS,,M\n",
        );
        let feat_dir = dir.join("feats");
        fs::create_dir(&feat_dir).unwrap();
        fake_features(&feat_dir.join("s1.h5"), 3, 0.1);
        fake_features(&feat_dir.join("s2.h5"), 2, 0.2);
        fake_features(&feat_dir.join("s3.h5"), 4, 0.3);
        // s4 intentionally absent; s5 exists but ID_4 is used for covariates
        fake_features(&feat_dir.join("s5.h5"), 1, 0.5);
        let slides = load_slide_table(&slide_csv).unwrap();
        let clini = load_clini_table(
            &clini_csv,
            "isMSIH",
            Some(&["MSI-H".to_string(), "MSS".to_string()]),
        )
        .unwrap();
        (slides, clini, feat_dir)
    }

    #[test]
    fn cohort_join_drops_missing_files_and_out_of_category_labels() {
        let dir = tempfile::tempdir().unwrap();
        let (slides, clini, feat_dir) = fixture(dir.path());
        let cohort = build_cohort(
            &slides,
            &clini,
            &feat_dir,
            "isMSIH",
            &["SEX".to_string()],
            &["AGE".to_string()],
        )
        .unwrap();
        // ID_3 has label NA (outside categories) and its only file is missing anyway
        let ids: Vec<&str> = cohort.patients.iter().map(|p| p.patient_id.as_str()).collect();
        assert_eq!(ids, vec!["ID_1", "ID_2", "ID_4"]);
        let p1 = cohort.patient("ID_1").unwrap();
        assert_eq!(p1.feature_files.len(), 2);
        assert_eq!(p1.label, 0);
        assert_eq!(cohort.class_counts(), vec![1, 2]);
    }

    #[test]
    fn empty_feature_dir_is_no_features_found() {
        let dir = tempfile::tempdir().unwrap();
        let (slides, clini, _) = fixture(dir.path());
        let empty = dir.path().join("empty");
        fs::create_dir(&empty).unwrap();
        assert!(matches!(
            build_cohort(&slides, &clini, &empty, "isMSIH", &[], &[]),
            Err(StampError::NoFeaturesFound(_))
        ));
    }

    #[test]
    fn tabular_schema_one_hot_and_z_score() {
        let dir = tempfile::tempdir().unwrap();
        let (slides, clini, feat_dir) = fixture(dir.path());
        let cohort = build_cohort(
            &slides,
            &clini,
            &feat_dir,
            "isMSIH",
            &["SEX".to_string()],
            &["AGE".to_string()],
        )
        .unwrap();
        let ids: Vec<String> = cohort.patients.iter().map(|p| p.patient_id.clone()).collect();
        let schema = TabularSchema::fit(&cohort, &ids);
        assert_eq!(schema.cat_categories, vec![vec!["F".to_string(), "M".to_string()]]);
        assert_eq!(schema.dim(), 3);
        // AGE observed on ID_1 (60) and ID_2 (70); ID_4 missing
        assert_eq!(schema.cont_mean, vec![65.0]);
        let v1 = schema.encode(cohort.patient("ID_1").unwrap());
        assert_eq!(v1[0..2], [1.0, 0.0]);
        assert!(v1[2] < 0.0);
        let v4 = schema.encode(cohort.patient("ID_4").unwrap());
        assert_eq!(v4, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn bag_concatenates_slides_in_table_order() {
        let dir = tempfile::tempdir().unwrap();
        let (slides, clini, feat_dir) = fixture(dir.path());
        let cohort =
            build_cohort(&slides, &clini, &feat_dir, "isMSIH", &[], &[]).unwrap();
        let bag = load_patient_bag(cohort.patient("ID_1").unwrap(), Some("toy-v1-d48")).unwrap();
        assert_eq!(bag.feats.nrows(), 5);
        assert_eq!(bag.tiles.len(), 5);
        assert_eq!(bag.tiles[0].0, "s1");
        assert_eq!(bag.tiles[3].0, "s2");
        assert_eq!(bag.feats[[0, 0]], 0.1);
        assert_eq!(bag.feats[[3, 0]], 0.2);
    }

    #[test]
    fn bag_with_wrong_extractor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (slides, clini, feat_dir) = fixture(dir.path());
        let cohort =
            build_cohort(&slides, &clini, &feat_dir, "isMSIH", &[], &[]).unwrap();
        match load_patient_bag(cohort.patient("ID_1").unwrap(), Some("other-v9")) {
            Err(StampError::ExtractorMismatch { expected, got }) => {
                assert_eq!(expected, "other-v9");
                assert_eq!(got, "toy-v1-d48");
            }
            other => panic!("unexpected: {other:?}"),
        }
    }
}
