//! Configuration file loading and per-command validation.
//!
//! One YAML file with four sections (preprocessing, modeling, statistics,
//! heatmaps). A section is only required once a command that uses it runs.
//! Relative paths are resolved against the configuration file's directory
//! at load time, so printing and re-parsing the config is lossless.

use std::path::{Path, PathBuf};

use serde_yaml::{Mapping, Value};

use crate::error::{Result, StampError};

pub const SECTIONS: [&str; 4] = ["preprocessing", "modeling", "statistics", "heatmaps"];

/// Keys holding paths, resolved against the config file's directory.
const PATH_KEYS: [(&str, &str); 16] = [
    ("preprocessing", "output_dir"),
    ("preprocessing", "wsi_dir"),
    ("preprocessing", "cache_dir"),
    ("preprocessing", "normalization_template"),
    ("preprocessing", "model_path"),
    ("modeling", "clini_table"),
    ("modeling", "slide_table"),
    ("modeling", "feature_dir"),
    ("modeling", "output_dir"),
    ("modeling", "model_path"),
    ("modeling", "deploy_feature_dir"),
    ("statistics", "output_dir"),
    ("heatmaps", "feature_dir"),
    ("heatmaps", "wsi_dir"),
    ("heatmaps", "model_path"),
    ("heatmaps", "output_dir"),
];

const KNOWN_KEYS: [(&str, &[&str]); 4] = [
    (
        "preprocessing",
        &[
            "output_dir",
            "wsi_dir",
            "cache_dir",
            "microns",
            "norm",
            "normalization_template",
            "model_path",
            "del_slide",
            "only_feature_extraction",
            "cores",
            "device",
            "qc_brightness_max",
            "qc_edge_min",
            "seed",
        ],
    ),
    (
        "modeling",
        &[
            "clini_table",
            "slide_table",
            "feature_dir",
            "output_dir",
            "target_label",
            "categories",
            "cat_labels",
            "cont_labels",
            "n_splits",
            "model_path",
            "deploy_feature_dir",
            "seed",
            "advanced",
        ],
    ),
    (
        "statistics",
        &["pred_csvs", "target_label", "true_class", "output_dir", "seed"],
    ),
    (
        "heatmaps",
        &[
            "slide_name",
            "feature_dir",
            "wsi_dir",
            "model_path",
            "output_dir",
            "n_toptiles",
            "cache_dir",
        ],
    ),
];

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Top-level mapping with all path keys already absolute.
    pub raw: Mapping,
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    if !path.exists() {
        return Err(StampError::ConfigFileNotFound(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let value: Value = serde_yaml::from_str(&text).map_err(|e| {
        let loc = e.location();
        StampError::ConfigParse {
            line: loc.as_ref().map(|l| l.line()).unwrap_or(0),
            column: loc.as_ref().map(|l| l.column()).unwrap_or(0),
            message: e.to_string(),
        }
    })?;
    let mut raw = match value {
        Value::Mapping(m) => m,
        Value::Null => Mapping::new(),
        _ => {
            return Err(StampError::ConfigParse {
                line: 1,
                column: 1,
                message: "top level must be a mapping of sections".into(),
            })
        }
    };
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    resolve_paths(&mut raw, base);
    warn_unknown_keys(&raw);
    Ok(PipelineConfig { raw })
}

fn resolve_one(value: &mut Value, base: &Path) {
    if let Value::String(s) = value {
        let p = Path::new(s);
        if !p.is_absolute() {
            *s = base.join(p).to_string_lossy().into_owned();
        }
    }
}

fn resolve_paths(raw: &mut Mapping, base: &Path) {
    for (section, key) in PATH_KEYS {
        if let Some(Value::Mapping(sec)) = raw.get_mut(section) {
            if let Some(v) = sec.get_mut(key) {
                resolve_one(v, base);
            }
        }
    }
    if let Some(Value::Mapping(sec)) = raw.get_mut("statistics") {
        if let Some(Value::Sequence(seq)) = sec.get_mut("pred_csvs") {
            for v in seq {
                resolve_one(v, base);
            }
        }
    }
}

fn warn_unknown_keys(raw: &Mapping) {
    for (section, _) in raw {
        let name = section.as_str().unwrap_or("<non-string>");
        if !SECTIONS.contains(&name) {
            log::warn!("ignoring unknown configuration section '{name}'");
        }
    }
    for (section, known) in KNOWN_KEYS {
        if let Some(Value::Mapping(sec)) = raw.get(section) {
            for (key, _) in sec {
                let name = key.as_str().unwrap_or("<non-string>");
                if !known.contains(&name) {
                    log::warn!("ignoring unknown configuration key '{section}.{name}'");
                }
            }
        }
    }
}

impl PipelineConfig {
    /// YAML rendering of the resolved configuration. Parsing it again yields
    /// an equal config.
    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(&Value::Mapping(self.raw.clone())).expect("mapping serializes")
    }

    fn section(&self, name: &str) -> Option<&Mapping> {
        match self.raw.get(name) {
            Some(Value::Mapping(m)) => Some(m),
            _ => None,
        }
    }

    pub fn preprocessing(&self) -> Result<PreprocessingConfig> {
        let mut r = SectionReader::new("preprocessing", self.section("preprocessing"));
        let cfg = PreprocessingConfig {
            output_dir: r.req_path("output_dir"),
            wsi_dir: r.req_path("wsi_dir"),
            cache_dir: r.req_path("cache_dir"),
            microns: r.req_f64("microns"),
            norm: r.opt_bool("norm")?.unwrap_or(false),
            normalization_template: r.opt_path("normalization_template")?,
            model_path: r.opt_path("model_path")?,
            del_slide: r.opt_bool("del_slide")?.unwrap_or(false),
            only_feature_extraction: r.opt_bool("only_feature_extraction")?.unwrap_or(false),
            cores: r.opt_usize("cores")?.unwrap_or(8),
            device: r.opt_str("device")?.unwrap_or_else(|| "cpu".into()),
            qc_brightness_max: r.opt_f64("qc_brightness_max")?,
            qc_edge_min: r.opt_f64("qc_edge_min")?,
            seed: r.opt_u64("seed")?.unwrap_or(0),
        };
        r.finish()?;
        if cfg.microns <= 0.0 {
            return Err(StampError::InvalidValue {
                key: "preprocessing.microns".into(),
                reason: "must be greater than zero".into(),
            });
        }
        if cfg.cores == 0 {
            return Err(StampError::InvalidValue {
                key: "preprocessing.cores".into(),
                reason: "must be at least 1".into(),
            });
        }
        Ok(cfg)
    }

    pub fn modeling(&self, command: ModelingCommand) -> Result<ModelingConfig> {
        let mut r = SectionReader::new("modeling", self.section("modeling"));
        let cfg = ModelingConfig {
            clini_table: r.req_path("clini_table"),
            slide_table: r.req_path("slide_table"),
            feature_dir: r.req_path("feature_dir"),
            output_dir: r.req_path("output_dir"),
            target_label: r.req_str("target_label"),
            categories: r.opt_str_list("categories")?,
            cat_labels: r.opt_str_list("cat_labels")?.unwrap_or_default(),
            cont_labels: r.opt_str_list("cont_labels")?.unwrap_or_default(),
            n_splits: if command == ModelingCommand::Crossval {
                r.req_usize("n_splits")
            } else {
                r.opt_usize("n_splits")?.unwrap_or(5)
            },
            model_path: if command == ModelingCommand::Deploy {
                Some(r.req_path("model_path"))
            } else {
                r.opt_path("model_path")?
            },
            deploy_feature_dir: if command == ModelingCommand::Deploy {
                Some(r.req_path("deploy_feature_dir"))
            } else {
                r.opt_path("deploy_feature_dir")?
            },
            seed: r.opt_u64("seed")?.unwrap_or(0),
            advanced: r.advanced()?,
        };
        r.finish()?;
        if cfg.n_splits < 2 {
            return Err(StampError::InvalidValue {
                key: "modeling.n_splits".into(),
                reason: "must be at least 2".into(),
            });
        }
        if let Some(cats) = &cfg.categories {
            let distinct: std::collections::BTreeSet<&String> = cats.iter().collect();
            if cats.is_empty() || distinct.len() != cats.len() || cats.iter().any(String::is_empty)
            {
                return Err(StampError::InvalidValue {
                    key: "modeling.categories".into(),
                    reason: "must be a non-empty list of distinct non-empty strings".into(),
                });
            }
        }
        Ok(cfg)
    }

    pub fn statistics(&self) -> Result<StatisticsConfig> {
        let mut r = SectionReader::new("statistics", self.section("statistics"));
        let cfg = StatisticsConfig {
            pred_csvs: r.req_path_list("pred_csvs"),
            target_label: r.req_str("target_label"),
            true_class: r.req_str("true_class"),
            output_dir: r.req_path("output_dir"),
            seed: r.opt_u64("seed")?.unwrap_or(0),
        };
        r.finish()?;
        if cfg.pred_csvs.is_empty() {
            return Err(StampError::InvalidValue {
                key: "statistics.pred_csvs".into(),
                reason: "must list at least one predictions file".into(),
            });
        }
        Ok(cfg)
    }

    pub fn heatmaps(&self) -> Result<HeatmapsConfig> {
        let mut r = SectionReader::new("heatmaps", self.section("heatmaps"));
        let cfg = HeatmapsConfig {
            slide_name: r.req_str("slide_name"),
            feature_dir: r.req_path("feature_dir"),
            wsi_dir: r.req_path("wsi_dir"),
            model_path: r.req_path("model_path"),
            output_dir: r.req_path("output_dir"),
            n_toptiles: r.opt_usize("n_toptiles")?.unwrap_or(8),
            cache_dir: r.opt_path("cache_dir")?,
        };
        r.finish()?;
        if cfg.n_toptiles == 0 {
            return Err(StampError::InvalidValue {
                key: "heatmaps.n_toptiles".into(),
                reason: "must be at least 1".into(),
            });
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelingCommand {
    Crossval,
    Train,
    Deploy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessingConfig {
    pub output_dir: PathBuf,
    pub wsi_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub microns: f64,
    pub norm: bool,
    pub normalization_template: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub del_slide: bool,
    pub only_feature_extraction: bool,
    pub cores: usize,
    pub device: String,
    pub qc_brightness_max: Option<f64>,
    pub qc_edge_min: Option<f64>,
    pub seed: u64,
}

/// Optional hyperparameter overrides under `modeling.advanced`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdvancedModeling {
    pub dim_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub dropout: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_bag_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelingConfig {
    pub clini_table: PathBuf,
    pub slide_table: PathBuf,
    pub feature_dir: PathBuf,
    pub output_dir: PathBuf,
    pub target_label: String,
    pub categories: Option<Vec<String>>,
    pub cat_labels: Vec<String>,
    pub cont_labels: Vec<String>,
    pub n_splits: usize,
    pub model_path: Option<PathBuf>,
    pub deploy_feature_dir: Option<PathBuf>,
    pub seed: u64,
    pub advanced: AdvancedModeling,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatisticsConfig {
    pub pred_csvs: Vec<PathBuf>,
    pub target_label: String,
    pub true_class: String,
    pub output_dir: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapsConfig {
    pub slide_name: String,
    pub feature_dir: PathBuf,
    pub wsi_dir: PathBuf,
    pub model_path: PathBuf,
    pub output_dir: PathBuf,
    pub n_toptiles: usize,
    pub cache_dir: Option<PathBuf>,
}

/// Typed accessors over one section. Missing required keys accumulate so the
/// error lists all of them at once; type mismatches fail fast.
struct SectionReader<'a> {
    section: &'a str,
    map: Option<&'a Mapping>,
    missing: Vec<String>,
    mismatch: Option<StampError>,
}

impl<'a> SectionReader<'a> {
    fn new(section: &'a str, map: Option<&'a Mapping>) -> Self {
        Self {
            section,
            map,
            missing: Vec::new(),
            mismatch: None,
        }
    }

    fn qualified(&self, key: &str) -> String {
        format!("{}.{key}", self.section)
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.map.and_then(|m| m.get(key)).filter(|v| !v.is_null())
    }

    fn mark_missing(&mut self, key: &str) {
        self.missing.push(self.qualified(key));
    }

    fn mismatch_err(&self, key: &str, expected: &str) -> StampError {
        StampError::TypeMismatch {
            key: self.qualified(key),
            expected: expected.to_string(),
        }
    }

    fn record_mismatch(&mut self, key: &str, expected: &str) {
        if self.mismatch.is_none() {
            self.mismatch = Some(self.mismatch_err(key, expected));
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(e) = self.mismatch {
            Err(e)
        } else if self.missing.is_empty() {
            Ok(())
        } else {
            Err(StampError::MissingKeys(self.missing))
        }
    }

    fn req_str(&mut self, key: &str) -> String {
        match self.get(key) {
            Some(Value::String(s)) => s.clone(),
            Some(_) => {
                self.record_mismatch(key, "string");
                String::new()
            }
            None => {
                self.mark_missing(key);
                String::new()
            }
        }
    }

    fn req_path(&mut self, key: &str) -> PathBuf {
        PathBuf::from(self.req_str(key))
    }

    fn req_f64(&mut self, key: &str) -> f64 {
        match self.get(key) {
            Some(v) => match v.as_f64() {
                Some(n) => n,
                None => {
                    self.record_mismatch(key, "number");
                    f64::NAN
                }
            },
            None => {
                self.mark_missing(key);
                f64::NAN
            }
        }
    }

    fn req_usize(&mut self, key: &str) -> usize {
        match self.get(key) {
            Some(v) => match v.as_u64() {
                Some(n) => n as usize,
                None => {
                    self.record_mismatch(key, "non-negative integer");
                    0
                }
            },
            None => {
                self.mark_missing(key);
                0
            }
        }
    }

    fn req_path_list(&mut self, key: &str) -> Vec<PathBuf> {
        match self.get(key) {
            Some(Value::Sequence(seq)) => seq
                .iter()
                .filter_map(|v| v.as_str())
                .map(PathBuf::from)
                .collect(),
            Some(_) => {
                self.record_mismatch(key, "list of paths");
                Vec::new()
            }
            None => {
                self.mark_missing(key);
                Vec::new()
            }
        }
    }

    fn opt_str(&self, key: &str) -> Result<Option<String>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(self.mismatch_err(key, "string")),
        }
    }

    fn opt_path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.opt_str(key)?.map(PathBuf::from))
    }

    fn opt_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Bool(b)) => Ok(Some(*b)),
            // YAML 1.1 spellings like yes/no parse as strings and are rejected
            Some(_) => Err(self.mismatch_err(key, "boolean (true or false)")),
        }
    }

    fn opt_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_f64()
                .map(Some)
                .ok_or_else(|| self.mismatch_err(key, "number")),
        }
    }

    fn opt_usize(&self, key: &str) -> Result<Option<usize>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(|v| Some(v as usize))
                .ok_or_else(|| self.mismatch_err(key, "non-negative integer")),
        }
    }

    fn opt_u64(&self, key: &str) -> Result<Option<u64>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| self.mismatch_err(key, "non-negative integer")),
        }
    }

    fn opt_str_list(&self, key: &str) -> Result<Option<Vec<String>>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Sequence(seq)) => {
                let mut out = Vec::with_capacity(seq.len());
                for v in seq {
                    match v.as_str() {
                        Some(s) => out.push(s.to_string()),
                        None => return Err(self.mismatch_err(key, "list of strings")),
                    }
                }
                Ok(Some(out))
            }
            Some(_) => Err(self.mismatch_err(key, "list of strings")),
        }
    }

    fn advanced(&self) -> Result<AdvancedModeling> {
        let Some(Value::Mapping(m)) = self.get("advanced") else {
            if self.get("advanced").is_some() {
                return Err(self.mismatch_err("advanced", "mapping"));
            }
            return Ok(AdvancedModeling::default());
        };
        let sub = SectionReader::new("modeling.advanced", Some(m));
        let known = [
            "dim_model",
            "n_layers",
            "n_heads",
            "dropout",
            "batch_size",
            "max_bag_size",
            "max_epochs",
            "patience",
            "learning_rate",
            "weight_decay",
        ];
        for (key, _) in m {
            let name = key.as_str().unwrap_or("<non-string>");
            if !known.contains(&name) {
                log::warn!("ignoring unknown configuration key 'modeling.advanced.{name}'");
            }
        }
        Ok(AdvancedModeling {
            dim_model: sub.opt_usize("dim_model")?,
            n_layers: sub.opt_usize("n_layers")?,
            n_heads: sub.opt_usize("n_heads")?,
            dropout: sub.opt_f64("dropout")?,
            batch_size: sub.opt_usize("batch_size")?,
            max_bag_size: sub.opt_usize("max_bag_size")?,
            max_epochs: sub.opt_usize("max_epochs")?,
            patience: sub.opt_usize("patience")?,
            learning_rate: sub.opt_f64("learning_rate")?,
            weight_decay: sub.opt_f64("weight_decay")?,
        })
    }
}
