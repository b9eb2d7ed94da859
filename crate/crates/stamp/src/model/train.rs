//! Training (cross-validated and full), deployment and prediction-file
//! emission for the bag-level transformer.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cohort::{load_patient_bag, Cohort, PatientBag, PatientRecord, TabularSchema};
use crate::error::{Result, StampError};
use crate::model::bundle::{
    data_fingerprint, save_bundle, FeatureScaler, ModelBundle, TrainFingerprint,
};
use crate::model::transformer::{softmax, weighted_ce, Model, ModelConfig};
use crate::splits::{stratified_holdout, SplitPlan};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Training-time subsample cap per bag; inference always uses all tiles.
    pub max_bag_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience on validation loss.
    pub patience: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_bag_size: 512,
            max_epochs: 32,
            patience: 8,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            seed: 0,
        }
    }
}

/// Architecture knobs without the data-dependent input/output dims.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub dim_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            dim_model: 512,
            n_layers: 2,
            n_heads: 8,
            mlp_ratio: 2,
            dropout: 0.1,
        }
    }
}

impl ArchConfig {
    pub fn model_config(&self, dim_input: usize, n_classes: usize) -> ModelConfig {
        ModelConfig {
            dim_input,
            dim_model: self.dim_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            mlp_ratio: self.mlp_ratio,
            dropout: self.dropout,
            n_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub truth: Option<usize>,
    pub scores: Vec<f64>,
    /// Argmax over scores; ties resolve to the lower category index.
    pub pred: usize,
    pub loss: Option<f64>,
}

struct AdamW {
    lr: f64,
    wd: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64, wd: f64) -> Self {
        Self {
            lr,
            wd,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            // decoupled weight decay
            params[i] -= self.lr * self.wd * params[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grads[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

fn fnv_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Per-bag deterministic stream: independent of iteration order so parallel
/// and sequential evaluation agree.
fn bag_rng(seed: u64, epoch: usize, patient_id: &str, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(epoch as u64)
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(fnv_hash(patient_id))
            .wrapping_add(salt),
    )
}

/// Tile features as f64 with the encoded tabular vector appended to every
/// row (multimodal fusion happens before the input projection).
fn encode_bag(bag: &PatientBag, record: &PatientRecord, schema: &TabularSchema) -> Array2<f64> {
    let tab = schema.encode(record);
    let (n, d) = (bag.feats.nrows(), bag.feats.ncols());
    let mut out = Array2::zeros((n, d + tab.len()));
    for i in 0..n {
        for j in 0..d {
            out[[i, j]] = bag.feats[[i, j]] as f64;
        }
        for (j, &t) in tab.iter().enumerate() {
            out[[i, d + j]] = t;
        }
    }
    out
}

fn subsample_rows(bag: &Array2<f64>, cap: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    if bag.nrows() <= cap {
        return bag.clone();
    }
    let picked = rand::seq::index::sample(rng, bag.nrows(), cap).into_vec();
    let mut out = Array2::zeros((cap, bag.ncols()));
    for (i, &r) in picked.iter().enumerate() {
        out.row_mut(i).assign(&bag.row(r));
    }
    out
}

/// Inverse-frequency class weights over the training subset.
fn class_weights(cohort: &Cohort, ids: &[String]) -> Vec<f64> {
    let mut counts = vec![0usize; cohort.categories.len()];
    for id in ids {
        if let Some(p) = cohort.patient(id) {
            counts[p.label] += 1;
        }
    }
    counts
        .iter()
        .map(|&c| 1.0 / c.max(1) as f64)
        .collect()
}

struct BagStore<'a> {
    cohort: &'a Cohort,
    raw: BTreeMap<String, PatientBag>,
}

impl<'a> BagStore<'a> {
    fn load(cohort: &'a Cohort, ids: &[String], extractor: Option<&str>) -> Result<Self> {
        let mut raw = BTreeMap::new();
        for id in ids {
            let record = cohort
                .patient(id)
                .ok_or_else(|| StampError::StaleFolds(id.clone()))?;
            raw.insert(id.clone(), load_patient_bag(record, extractor)?);
        }
        Ok(Self { cohort, raw })
    }

    fn encoded(
        &self,
        id: &str,
        schema: &TabularSchema,
        scaler: &FeatureScaler,
    ) -> (Array2<f64>, usize) {
        let record = self.cohort.patient(id).expect("loaded ids only");
        let mut bag = encode_bag(&self.raw[id], record, schema);
        scaler.apply(&mut bag);
        (bag, record.label)
    }

    fn feat_dim(&self) -> usize {
        self.raw.values().next().map(|b| b.feats.ncols()).unwrap_or(0)
    }

    fn extractor_id(&self) -> String {
        self.raw
            .values()
            .next()
            .map(|b| b.extractor_id.clone())
            .unwrap_or_default()
    }
}

/// Per-dimension mean and standard deviation of the encoded training tiles.
fn fit_scaler(store: &BagStore, schema: &TabularSchema, ids: &[String]) -> FeatureScaler {
    let dim = store.feat_dim() + schema.dim();
    let identity = FeatureScaler::identity(dim);
    let mut sum = vec![0.0f64; dim];
    let mut sumsq = vec![0.0f64; dim];
    let mut n = 0usize;
    for id in ids {
        let (bag, _) = store.encoded(id, schema, &identity);
        for row in bag.rows() {
            for (j, &v) in row.iter().enumerate() {
                sum[j] += v;
                sumsq[j] += v * v;
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std: Vec<f64> = sumsq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| {
            let var = (sq / n - m * m).max(0.0);
            let sd = var.sqrt();
            if sd < 1e-8 { 1.0 } else { sd }
        })
        .collect();
    FeatureScaler { mean, std }
}

fn mean_val_loss(
    model: &Model,
    store: &BagStore,
    schema: &TabularSchema,
    scaler: &FeatureScaler,
    ids: &[String],
    weights: &[f64],
) -> f64 {
    let parts: Vec<(f64, f64)> = ids
        .par_iter()
        .map(|id| {
            let (bag, label) = store.encoded(id, schema, scaler);
            let (logits, _) = model.forward(&bag, None).expect("dims fixed");
            let (loss, w, _) = weighted_ce(&logits, label, weights);
            (loss, w)
        })
        .collect();
    let (num, den) = parts
        .iter()
        .fold((0.0, 0.0), |(n, d), (l, w)| (n + l, d + w));
    num / den.max(1e-12)
}

/// Train one model on `train_ids`, early-stopping on `val_ids`.
fn train_one(
    store: &BagStore,
    schema: &TabularSchema,
    scaler: &FeatureScaler,
    model_cfg: ModelConfig,
    tc: &TrainConfig,
    train_ids: &[String],
    val_ids: &[String],
) -> Result<Model> {
    if train_ids.is_empty() {
        return Err(StampError::EmptyBatch);
    }
    let weights = class_weights(store.cohort, train_ids);
    let mut init_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut model = Model::init(model_cfg, &mut init_rng);
    let mut opt = AdamW::new(model.params.len(), tc.learning_rate, tc.weight_decay);

    let mut best_params = model.params.clone();
    let mut best_val = f64::INFINITY;
    let mut bad_epochs = 0usize;

    for epoch in 0..tc.max_epochs {
        let mut order = train_ids.to_vec();
        let mut epoch_rng = bag_rng(tc.seed, epoch, "epoch-order", 1);
        order.shuffle(&mut epoch_rng);
        // final short batch is trained on rather than dropped
        for batch in order.chunks(tc.batch_size) {
            let per_bag: Vec<(Vec<f64>, f64, f64)> = batch
                .par_iter()
                .map(|id| {
                    let (bag, label) = store.encoded(id, schema, scaler);
                    let mut sub_rng = bag_rng(tc.seed, epoch, id, 2);
                    let bag = subsample_rows(&bag, tc.max_bag_size, &mut sub_rng);
                    let mut drop_rng = bag_rng(tc.seed, epoch, id, 3);
                    let (logits, cache) = model
                        .forward(&bag, Some(&mut drop_rng))
                        .expect("dims fixed");
                    let (loss, w, dlogits) = weighted_ce(&logits, label, &weights);
                    let (grads, _) = model.backward(&cache, &dlogits);
                    (grads, loss, w)
                })
                .collect();
            let mut grads = vec![0.0; model.params.len()];
            let mut weight_sum = 0.0;
            // reduce in batch order so the sum is deterministic
            for (g, _, w) in &per_bag {
                for (acc, v) in grads.iter_mut().zip(g) {
                    *acc += v;
                }
                weight_sum += w;
            }
            let inv = 1.0 / weight_sum.max(1e-12);
            for g in &mut grads {
                *g *= inv;
            }
            opt.step(&mut model.params, &grads);
        }

        let val = if val_ids.is_empty() {
            mean_val_loss(&model, store, schema, scaler, train_ids, &weights)
        } else {
            mean_val_loss(&model, store, schema, scaler, val_ids, &weights)
        };
        log::debug!("epoch {epoch}: validation loss {val:.6}");
        if val < best_val {
            best_val = val;
            best_params = model.params.clone();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= tc.patience {
                log::info!("early stop after epoch {epoch} (best validation loss {best_val:.6})");
                break;
            }
        }
    }
    model.params = best_params;
    Ok(model)
}

fn predict_with(
    model: &Model,
    store: &BagStore,
    schema: &TabularSchema,
    scaler: &FeatureScaler,
    ids: &[String],
) -> Vec<PatientPrediction> {
    ids.par_iter()
        .map(|id| {
            let (bag, label) = store.encoded(id, schema, scaler);
            let (logits, _) = model.forward(&bag, None).expect("dims fixed");
            let scores = softmax(&logits).to_vec();
            prediction_from_scores(id.clone(), Some(label), scores)
        })
        .collect()
}

fn prediction_from_scores(
    patient_id: String,
    truth: Option<usize>,
    scores: Vec<f64>,
) -> PatientPrediction {
    let pred = scores
        .iter()
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0;
    let loss = truth.map(|t| -scores[t].max(1e-300).ln());
    PatientPrediction {
        patient_id,
        truth,
        scores,
        pred,
        loss,
    }
}

/// Score arbitrary bags with a deployed bundle. Truth entries may be absent.
pub fn predict_patients(
    bundle: &ModelBundle,
    bags: &[(String, PatientBag, PatientRecord, Option<usize>)],
) -> Result<Vec<PatientPrediction>> {
    for (_, bag, _, _) in bags {
        if bag.extractor_id != bundle.extractor_id {
            return Err(StampError::ExtractorMismatch {
                expected: bundle.extractor_id.clone(),
                got: bag.extractor_id.clone(),
            });
        }
        let dim = bag.feats.ncols() + bundle.tabular.dim();
        if dim != bundle.model.cfg.dim_input {
            return Err(StampError::ExtractorMismatch {
                expected: format!("{}-dim input", bundle.model.cfg.dim_input),
                got: format!("{dim}-dim input"),
            });
        }
    }
    Ok(bags
        .par_iter()
        .map(|(id, bag, record, truth)| {
            let mut x = encode_bag(bag, record, &bundle.tabular);
            bundle.scaler.apply(&mut x);
            let (logits, _) = bundle.model.forward(&x, None).expect("dims checked");
            prediction_from_scores(id.clone(), *truth, softmax(&logits).to_vec())
        })
        .collect())
}

/// Emit patient-preds.csv. Rows with a ground truth sort ascending by loss
/// (best predictions first); rows without truth follow, sorted by patient id.
pub fn write_patient_preds(
    path: &Path,
    preds: &[PatientPrediction],
    target_label: &str,
    categories: &[String],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut rows: Vec<&PatientPrediction> = preds.iter().collect();
    rows.sort_by(|a, b| match (a.loss, b.loss) {
        (Some(x), Some(y)) => x
            .partial_cmp(&y)
            .unwrap()
            .then_with(|| a.patient_id.cmp(&b.patient_id)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.patient_id.cmp(&b.patient_id),
    });
    let mut f = fs::File::create(path)?;
    let score_cols: Vec<String> = categories
        .iter()
        .map(|c| format!("{target_label}_{c}"))
        .collect();
    writeln!(f, "PATIENT,{target_label},pred,{},loss", score_cols.join(","))?;
    for p in rows {
        let truth = p.truth.map(|t| categories[t].as_str()).unwrap_or("");
        let scores: Vec<String> = p.scores.iter().map(|s| format!("{s}")).collect();
        let loss = p.loss.map(|l| format!("{l}")).unwrap_or_default();
        writeln!(
            f,
            "{},{},{},{},{}",
            p.patient_id,
            truth,
            categories[p.pred],
            scores.join(","),
            loss
        )?;
    }
    Ok(())
}

/// Fraction of the training portion held out for early stopping.
const VAL_FRAC: f64 = 0.2;

fn fold_model_bundle(
    model: Model,
    cohort: &Cohort,
    schema: TabularSchema,
    scaler: FeatureScaler,
    extractor_id: String,
    train_ids: &[String],
    seed: u64,
) -> ModelBundle {
    ModelBundle {
        model,
        target_label: cohort.target_label.clone(),
        categories: cohort.categories.clone(),
        extractor_id,
        tabular: schema,
        scaler,
        fingerprint: TrainFingerprint {
            seed,
            data_sha256: data_fingerprint(cohort, train_ids),
        },
    }
}

/// Cross-validated training: one model per fold, each evaluated on its held
/// out fold. Writes `fold-<i>/patient-preds.csv` and `fold-<i>/export.stamp`;
/// returns the prediction file paths.
pub fn crossval(
    cohort: &Cohort,
    plan: &SplitPlan,
    arch: &ArchConfig,
    tc: &TrainConfig,
    output_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let all_ids: Vec<String> = cohort.patients.iter().map(|p| p.patient_id.clone()).collect();
    let store = BagStore::load(cohort, &all_ids, None)?;
    let mut pred_paths = Vec::new();
    for (fold, test_ids) in plan.folds.iter().enumerate() {
        let pool = plan.train_patients(cohort, fold);
        let labels: Vec<(String, usize)> = pool
            .iter()
            .map(|id| (id.clone(), cohort.patient(id).unwrap().label))
            .collect();
        let (train_ids, val_ids) = stratified_holdout(
            &labels,
            cohort.categories.len(),
            VAL_FRAC,
            tc.seed.wrapping_add(fold as u64),
        );
        let schema = TabularSchema::fit(cohort, &train_ids);
        let scaler = fit_scaler(&store, &schema, &train_ids);
        let dim_input = store.feat_dim() + schema.dim();
        let model_cfg = arch.model_config(dim_input, cohort.categories.len());
        let fold_tc = TrainConfig {
            seed: tc.seed.wrapping_add(fold as u64),
            ..tc.clone()
        };
        log::info!(
            "fold {fold}: {} train / {} val / {} test patients",
            train_ids.len(),
            val_ids.len(),
            test_ids.len()
        );
        let model = train_one(&store, &schema, &scaler, model_cfg, &fold_tc, &train_ids, &val_ids)?;
        let preds = predict_with(&model, &store, &schema, &scaler, test_ids);
        let fold_dir = output_dir.join(format!("fold-{fold}"));
        let pred_path = fold_dir.join("patient-preds.csv");
        write_patient_preds(&pred_path, &preds, &cohort.target_label, &cohort.categories)?;
        let bundle = fold_model_bundle(
            model,
            cohort,
            schema,
            scaler,
            store.extractor_id(),
            &train_ids,
            fold_tc.seed,
        );
        save_bundle(&fold_dir.join("export.stamp"), &bundle)?;
        pred_paths.push(pred_path);
    }
    Ok(pred_paths)
}

/// Full training on the whole cohort with a stratified 80-20 train/val
/// split. Writes `export.stamp` plus the validation predictions.
pub fn train_full(
    cohort: &Cohort,
    arch: &ArchConfig,
    tc: &TrainConfig,
    output_dir: &Path,
) -> Result<PathBuf> {
    let all_ids: Vec<String> = cohort.patients.iter().map(|p| p.patient_id.clone()).collect();
    let store = BagStore::load(cohort, &all_ids, None)?;
    let labels: Vec<(String, usize)> = cohort
        .patients
        .iter()
        .map(|p| (p.patient_id.clone(), p.label))
        .collect();
    let (train_ids, val_ids) = stratified_holdout(&labels, cohort.categories.len(), VAL_FRAC, tc.seed);
    let schema = TabularSchema::fit(cohort, &train_ids);
    let scaler = fit_scaler(&store, &schema, &train_ids);
    let dim_input = store.feat_dim() + schema.dim();
    let model_cfg = arch.model_config(dim_input, cohort.categories.len());
    let model = train_one(&store, &schema, &scaler, model_cfg, tc, &train_ids, &val_ids)?;
    let preds = predict_with(&model, &store, &schema, &scaler, &val_ids);
    write_patient_preds(
        &output_dir.join("patient-preds.csv"),
        &preds,
        &cohort.target_label,
        &cohort.categories,
    )?;
    let bundle = fold_model_bundle(
        model,
        cohort,
        schema,
        scaler,
        store.extractor_id(),
        &train_ids,
        tc.seed,
    );
    let path = output_dir.join("export.stamp");
    save_bundle(&path, &bundle)?;
    Ok(path)
}

/// Deploy a trained bundle on an external cohort. Weights are untouched and
/// bags are scored in full. Patients without a usable label still get
/// predictions; their truth and loss cells stay empty.
pub fn deploy(
    bundle: &ModelBundle,
    slide_table: &crate::cohort::SlideTable,
    clini_table: Option<&crate::cohort::CliniTable>,
    feature_dir: &Path,
    output_dir: &Path,
) -> Result<PathBuf> {
    let mut files_per_patient: BTreeMap<&str, Vec<PathBuf>> = BTreeMap::new();
    for (patient, stem) in &slide_table.rows {
        let path = feature_dir.join(format!("{stem}.h5"));
        if path.exists() {
            files_per_patient.entry(patient).or_default().push(path);
        }
    }
    if files_per_patient.is_empty() {
        return Err(StampError::NoFeaturesFound(feature_dir.to_path_buf()));
    }
    let mut bags = Vec::new();
    for (patient, files) in files_per_patient {
        let cells = clini_table.and_then(|t| t.rows.get(patient));
        let truth = cells
            .and_then(|c| c.get(&bundle.target_label))
            .and_then(|v| bundle.categories.iter().position(|c| c == v));
        let record = PatientRecord {
            patient_id: patient.to_string(),
            label: truth.unwrap_or(0),
            feature_files: files.clone(),
            cat_values: bundle
                .tabular
                .cat_labels
                .iter()
                .map(|l| cells.and_then(|c| c.get(l)).cloned().unwrap_or_default())
                .collect(),
            cont_values: bundle
                .tabular
                .cont_labels
                .iter()
                .map(|l| cells.and_then(|c| c.get(l)).and_then(|v| v.parse().ok()))
                .collect(),
        };
        let bag = load_patient_bag(&record, Some(&bundle.extractor_id))?;
        bags.push((patient.to_string(), bag, record, truth));
    }
    let preds = predict_patients(bundle, &bags)?;
    let path = output_dir.join("patient-preds.csv");
    write_patient_preds(&path, &preds, &bundle.target_label, &bundle.categories)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{write_feature_file, FeatureMatrix};
    use crate::splits::make_splits;
    use ndarray::Array2 as A2;
    use rand::Rng;

    /// Synthetic feature cohort: positives carry a shifted mean in the first
    /// feature coordinates, negatives do not.
    fn synth_cohort(dir: &Path, n_patients: usize, dim: usize, shift: f64) -> Cohort {
        let feat_dir = dir.join("feats");
        fs::create_dir_all(&feat_dir).unwrap();
        let mut patients = Vec::new();
        for i in 0..n_patients {
            let positive = i % 2 == 0;
            let id = format!("p{i:03}");
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
            let n_tiles = 12 + (i % 5);
            let feats = A2::from_shape_fn((n_tiles, dim), |(r, c)| {
                let base: f64 = rng.gen::<f64>();
                // a third of tiles in positive bags carry signal
                if positive && r % 3 == 0 && c < 4 {
                    (base + shift) as f32
                } else {
                    base as f32
                }
            });
            let coords = A2::from_shape_fn((n_tiles, 2), |(r, c)| (r * 224 * (c + 1)) as i32);
            let path = feat_dir.join(format!("s{i:03}.h5"));
            write_feature_file(
                &path,
                &FeatureMatrix {
                    feats,
                    coords,
                    extractor_id: "toy-v1-d48".into(),
                    tile_px: 224,
                    target_mpp: 1.0,
                    norm: "macenko".into(),
                },
            )
            .unwrap();
            patients.push(PatientRecord {
                patient_id: id,
                label: usize::from(!positive),
                feature_files: vec![path],
                cat_values: vec![],
                cont_values: vec![],
            });
        }
        Cohort {
            patients,
            categories: vec!["POS".into(), "NEG".into()],
            target_label: "isSignal".into(),
            cat_labels: vec![],
            cont_labels: vec![],
        }
    }

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            dim_model: 16,
            n_layers: 1,
            n_heads: 2,
            mlp_ratio: 2,
            dropout: 0.1,
        }
    }

    fn fast_tc(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            max_bag_size: 64,
            max_epochs: 24,
            patience: 8,
            learning_rate: 3e-3,
            weight_decay: 1e-2,
            seed,
        }
    }

    #[test]
    fn eight_patient_cohort_overfits_to_perfect_training_accuracy() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = synth_cohort(dir.path(), 8, 8, 2.0);
        let ids: Vec<String> = cohort.patients.iter().map(|p| p.patient_id.clone()).collect();
        let store = BagStore::load(&cohort, &ids, None).unwrap();
        let schema = TabularSchema::fit(&cohort, &ids);
        let cfg = tiny_arch().model_config(8, 2);
        let scaler = fit_scaler(&store, &schema, &ids);
        let model = train_one(&store, &schema, &scaler, cfg, &fast_tc(1), &ids, &[]).unwrap();
        let preds = predict_with(&model, &store, &schema, &scaler, &ids);
        assert!(preds.iter().all(|p| Some(p.pred) == p.truth));
    }

    #[test]
    fn crossval_writes_fold_outputs_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = synth_cohort(dir.path(), 12, 8, 2.0);
        let tc = fast_tc(5);
        let out1 = dir.path().join("run1");
        let out2 = dir.path().join("run2");
        let plan = make_splits(&cohort, 2, 3, &out1).unwrap();
        let paths = crossval(&cohort, &plan, &tiny_arch(), &tc, &out1).unwrap();
        assert_eq!(paths.len(), 2);
        make_splits(&cohort, 2, 3, &out2).unwrap();
        crossval(&cohort, &plan, &tiny_arch(), &tc, &out2).unwrap();
        for fold in 0..2 {
            let a = fs::read(out1.join(format!("fold-{fold}/patient-preds.csv"))).unwrap();
            let b = fs::read(out2.join(format!("fold-{fold}/patient-preds.csv"))).unwrap();
            assert_eq!(a, b, "fold {fold} predictions differ across reruns");
            let ba = fs::read(out1.join(format!("fold-{fold}/export.stamp"))).unwrap();
            let bb = fs::read(out2.join(format!("fold-{fold}/export.stamp"))).unwrap();
            assert_eq!(ba, bb, "fold {fold} bundles differ across reruns");
        }
        // header and shape of the prediction file
        let text = fs::read_to_string(&paths[0]).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "PATIENT,isSignal,pred,isSignal_POS,isSignal_NEG,loss"
        );
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 6);
            let pos: f64 = cols[3].parse().unwrap();
            let neg: f64 = cols[4].parse().unwrap();
            assert!((pos + neg - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn prediction_rows_sort_ascending_by_loss() {
        let preds = vec![
            prediction_from_scores("b".into(), Some(0), vec![0.2, 0.8]),
            prediction_from_scores("a".into(), Some(0), vec![0.9, 0.1]),
            prediction_from_scores("c".into(), None, vec![0.5, 0.5]),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.csv");
        write_patient_preds(&path, &preds, "t", &["X".into(), "Y".into()]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let order: Vec<&str> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap())
            .collect();
        assert_eq!(order, vec!["a", "b", "c"]);
        assert!(text.lines().last().unwrap().ends_with(','), "no-truth row has empty loss");
    }

    #[test]
    fn train_then_deploy_round_trip_keeps_scores() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = synth_cohort(dir.path(), 10, 8, 2.0);
        let out = dir.path().join("model");
        let bundle_path = train_full(&cohort, &tiny_arch(), &fast_tc(2), &out).unwrap();
        let bundle = crate::model::bundle::load_bundle(&bundle_path).unwrap();
        assert_eq!(bundle.categories, vec!["POS".to_string(), "NEG".to_string()]);

        // deploy on the same feature files via a slide/clini table pair
        let slide_rows: Vec<(String, String)> = (0..10)
            .map(|i| (format!("p{i:03}"), format!("s{i:03}")))
            .collect();
        let slide_table = crate::cohort::SlideTable { rows: slide_rows };
        let deploy_dir = dir.path().join("deploy");
        let p1 = deploy(&bundle, &slide_table, None, &dir.path().join("feats"), &deploy_dir).unwrap();
        let text = fs::read_to_string(&p1).unwrap();
        assert_eq!(text.lines().count(), 11);
        // no clinical table: truth and loss stay empty, sorted by patient id
        let first = text.lines().nth(1).unwrap();
        assert!(first.starts_with("p000,,"));
        // deploying twice is byte-identical
        let deploy2 = dir.path().join("deploy2");
        let p2 = deploy(&bundle, &slide_table, None, &dir.path().join("feats"), &deploy2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn deploy_rejects_wrong_extractor_dim() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = synth_cohort(dir.path(), 8, 8, 2.0);
        let out = dir.path().join("model");
        let bundle_path = train_full(&cohort, &tiny_arch(), &fast_tc(3), &out).unwrap();
        let mut bundle = crate::model::bundle::load_bundle(&bundle_path).unwrap();
        bundle.extractor_id = "other-v9-d768".into();
        let slide_table = crate::cohort::SlideTable {
            rows: vec![("p000".into(), "s000".into())],
        };
        let err = deploy(
            &bundle,
            &slide_table,
            None,
            &dir.path().join("feats"),
            &dir.path().join("d"),
        )
        .unwrap_err();
        assert!(matches!(err, StampError::ExtractorMismatch { .. }));
    }
}
