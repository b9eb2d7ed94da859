//! Stratified cross-validation splits persisted as folds.json.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::error::{Result, StampError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub n_splits: usize,
    pub categories: Vec<String>,
    /// Per-fold test-patient ids. Folds partition the cohort.
    pub folds: Vec<Vec<String>>,
}

impl SplitPlan {
    /// Patients not in fold `i`, in cohort order.
    pub fn train_patients(&self, cohort: &Cohort, fold: usize) -> Vec<String> {
        let test: BTreeSet<&String> = self.folds[fold].iter().collect();
        cohort
            .patients
            .iter()
            .map(|p| p.patient_id.clone())
            .filter(|id| !test.contains(id))
            .collect()
    }
}

fn check_class_sizes(cohort: &Cohort, n_splits: usize) -> Result<()> {
    for (class, &count) in cohort.categories.iter().zip(&cohort.class_counts()) {
        if count < 2 {
            return Err(StampError::TooFewClassMembers(class.clone()));
        }
        if count < n_splits {
            return Err(StampError::TooManySplits {
                n_splits,
                class: class.clone(),
                size: count,
            });
        }
    }
    Ok(())
}

/// Stratified assignment: per class, sort ids, shuffle with a class-specific
/// stream of the seed, then deal round-robin starting at a rotating fold so
/// remainders spread across folds instead of piling on fold 0.
fn assign_folds(cohort: &Cohort, n_splits: usize, seed: u64) -> Vec<Vec<String>> {
    let mut folds = vec![Vec::new(); n_splits];
    let mut start = 0usize;
    for class in 0..cohort.categories.len() {
        let mut ids: Vec<&str> = cohort
            .patients
            .iter()
            .filter(|p| p.label == class)
            .map(|p| p.patient_id.as_str())
            .collect();
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(class as u64));
        ids.shuffle(&mut rng);
        for (i, id) in ids.iter().enumerate() {
            folds[(start + i) % n_splits].push(id.to_string());
        }
        start = (start + ids.len()) % n_splits;
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    folds
}

/// Create (or reuse) a stratified split plan. An existing `folds.json` in
/// `output_dir` is validated against the cohort and reused so interrupted
/// runs resume with identical folds.
pub fn make_splits(
    cohort: &Cohort,
    n_splits: usize,
    seed: u64,
    output_dir: &Path,
) -> Result<SplitPlan> {
    assert!(n_splits >= 2, "need at least 2 folds");
    let path = output_dir.join("folds.json");
    if path.exists() {
        let plan: SplitPlan = serde_json::from_str(&fs::read_to_string(&path)?)?;
        let known: BTreeSet<&str> = cohort.patients.iter().map(|p| p.patient_id.as_str()).collect();
        for fold in &plan.folds {
            for id in fold {
                if !known.contains(id.as_str()) {
                    return Err(StampError::StaleFolds(id.clone()));
                }
            }
        }
        log::info!("reusing existing split plan at {}", path.display());
        return Ok(plan);
    }
    check_class_sizes(cohort, n_splits)?;
    let plan = SplitPlan {
        seed,
        n_splits,
        categories: cohort.categories.clone(),
        folds: assign_folds(cohort, n_splits, seed),
    };
    fs::create_dir_all(output_dir)?;
    fs::write(&path, serde_json::to_string_pretty(&plan)?)?;
    Ok(plan)
}

/// Stratified single split holding out `holdout_frac` of each class
/// (rounded, at least 1 member when the class has >= 2). Returns
/// (train ids, holdout ids). Used for train/validation carve-outs.
pub fn stratified_holdout(
    patient_labels: &[(String, usize)],
    n_classes: usize,
    holdout_frac: f64,
    seed: u64,
) -> (Vec<String>, Vec<String>) {
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for class in 0..n_classes {
        let mut ids: Vec<&str> = patient_labels
            .iter()
            .filter(|(_, l)| *l == class)
            .map(|(id, _)| id.as_str())
            .collect();
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(class as u64) ^ 0x5eed);
        ids.shuffle(&mut rng);
        let mut n_hold = (ids.len() as f64 * holdout_frac).round() as usize;
        if ids.len() >= 2 {
            n_hold = n_hold.clamp(1, ids.len() - 1);
        } else {
            n_hold = 0;
        }
        for (i, id) in ids.iter().enumerate() {
            if i < n_hold {
                holdout.push(id.to_string());
            } else {
                train.push(id.to_string());
            }
        }
    }
    train.sort_unstable();
    holdout.sort_unstable();
    (train, holdout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::PatientRecord;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn toy_cohort(labels: &[(&str, usize)], n_classes: usize) -> Cohort {
        let categories = (0..n_classes).map(|i| format!("C{i}")).collect();
        Cohort {
            patients: labels
                .iter()
                .map(|(id, l)| PatientRecord {
                    patient_id: id.to_string(),
                    label: *l,
                    feature_files: vec![format!("{id}.h5").into()],
                    cat_values: vec![],
                    cont_values: vec![],
                })
                .collect(),
            categories,
            target_label: "t".into(),
            cat_labels: vec![],
            cont_labels: vec![],
        }
    }

    #[test]
    fn balanced_ten_patients_five_folds_one_of_each() {
        let labels: Vec<(String, usize)> =
            (0..10).map(|i| (format!("p{i}"), i % 2)).collect();
        let refs: Vec<(&str, usize)> = labels.iter().map(|(s, l)| (s.as_str(), *l)).collect();
        let cohort = toy_cohort(&refs, 2);
        let dir = tempfile::tempdir().unwrap();
        let plan = make_splits(&cohort, 5, 42, dir.path()).unwrap();
        for fold in &plan.folds {
            assert_eq!(fold.len(), 2);
            let pos = fold
                .iter()
                .filter(|id| cohort.patient(id).unwrap().label == 0)
                .count();
            assert_eq!(pos, 1);
        }
    }

    #[test]
    fn single_member_class_is_rejected() {
        let cohort = toy_cohort(&[("a", 0), ("b", 0), ("c", 0), ("d", 1)], 2);
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            make_splits(&cohort, 2, 0, dir.path()),
            Err(StampError::TooFewClassMembers(c)) if c == "C1"
        ));
    }

    #[test]
    fn class_smaller_than_n_splits_is_rejected() {
        let labels: Vec<(String, usize)> = (0..8)
            .map(|i| (format!("p{i}"), usize::from(i >= 5)))
            .collect();
        let refs: Vec<(&str, usize)> = labels.iter().map(|(s, l)| (s.as_str(), *l)).collect();
        let cohort = toy_cohort(&refs, 2);
        let dir = tempfile::tempdir().unwrap();
        match make_splits(&cohort, 5, 0, dir.path()) {
            Err(StampError::TooManySplits { n_splits, class, size }) => {
                assert_eq!((n_splits, class.as_str(), size), (5, "C1", 3));
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn folds_json_bytes_are_seed_deterministic() {
        let labels: Vec<(String, usize)> =
            (0..23).map(|i| (format!("p{i:02}"), i % 3)).collect();
        let refs: Vec<(&str, usize)> = labels.iter().map(|(s, l)| (s.as_str(), *l)).collect();
        let cohort = toy_cohort(&refs, 3);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        make_splits(&cohort, 3, 7, d1.path()).unwrap();
        make_splits(&cohort, 3, 7, d2.path()).unwrap();
        let a = std::fs::read(d1.path().join("folds.json")).unwrap();
        let b = std::fs::read(d2.path().join("folds.json")).unwrap();
        assert_eq!(a, b);
        let d3 = tempfile::tempdir().unwrap();
        make_splits(&cohort, 3, 8, d3.path()).unwrap();
        assert_ne!(a, std::fs::read(d3.path().join("folds.json")).unwrap());
    }

    #[test]
    fn existing_plan_is_reused_and_stale_plan_rejected() {
        let labels: Vec<(String, usize)> =
            (0..12).map(|i| (format!("p{i:02}"), i % 2)).collect();
        let refs: Vec<(&str, usize)> = labels.iter().map(|(s, l)| (s.as_str(), *l)).collect();
        let cohort = toy_cohort(&refs, 2);
        let dir = tempfile::tempdir().unwrap();
        let plan = make_splits(&cohort, 3, 1, dir.path()).unwrap();
        // reuse ignores a different requested seed
        let again = make_splits(&cohort, 3, 999, dir.path()).unwrap();
        assert_eq!(plan, again);

        let smaller_refs: Vec<(&str, usize)> =
            refs.iter().filter(|(id, _)| *id != "p00").cloned().collect();
        let smaller = toy_cohort(&smaller_refs, 2);
        match make_splits(&smaller, 3, 1, dir.path()) {
            Err(StampError::StaleFolds(id)) => assert_eq!(id, "p00"),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn holdout_keeps_both_sides_stratified() {
        let labels: Vec<(String, usize)> =
            (0..20).map(|i| (format!("p{i:02}"), i % 2)).collect();
        let (train, hold) = stratified_holdout(&labels, 2, 0.2, 3);
        assert_eq!(train.len(), 16);
        assert_eq!(hold.len(), 4);
        let count = |ids: &[String], class: usize| {
            ids.iter()
                .filter(|id| {
                    let i: usize = id[1..].parse().unwrap();
                    i % 2 == class
                })
                .count()
        };
        assert_eq!(count(&hold, 0), 2);
        assert_eq!(count(&hold, 1), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn partition_and_stratification_bound_hold(
            n_patients in 10usize..10_000,
            n_classes in 2usize..4,
            n_splits in 2usize..6,
            seed in any::<u64>(),
        ) {
            let labels: Vec<(String, usize)> = (0..n_patients)
                .map(|i| (format!("p{i:05}"), i % n_classes))
                .collect();
            let refs: Vec<(&str, usize)> =
                labels.iter().map(|(s, l)| (s.as_str(), *l)).collect();
            let cohort = toy_cohort(&refs, n_classes);
            prop_assume!(cohort.class_counts().iter().all(|&c| c >= n_splits.max(2)));
            let folds = assign_folds(&cohort, n_splits, seed);

            let mut seen = BTreeMap::new();
            for (i, fold) in folds.iter().enumerate() {
                for id in fold {
                    prop_assert!(seen.insert(id.clone(), i).is_none(), "patient in two folds");
                }
            }
            prop_assert_eq!(seen.len(), n_patients);

            let totals = cohort.class_counts();
            for fold in &folds {
                for class in 0..n_classes {
                    let count = fold
                        .iter()
                        .filter(|id| cohort.patient(id).unwrap().label == class)
                        .count() as f64;
                    let ideal = totals[class] as f64 / n_splits as f64;
                    prop_assert!((count - ideal).abs() <= 1.0,
                        "fold class count {count} vs ideal {ideal}");
                }
            }
        }
    }
}
