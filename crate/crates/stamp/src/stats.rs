//! Classification metrics over patient predictions: AUROC, AUPRC,
//! bootstrap confidence intervals, cross-fold aggregation and curve files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, StampError};
use crate::stain::percentile_sorted;

/// Per-patient positive-class scores with binary labels
/// (1 iff ground truth equals the configured true_class).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCohort {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredCohort {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Self {
        assert_eq!(scores.len(), labels.len());
        Self { scores, labels }
    }

    fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn prevalence(&self) -> f64 {
        self.n_pos() as f64 / self.labels.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub auroc: f64,
    pub auroc_ci95: (f64, f64),
    pub auprc: f64,
    pub auprc_ci95: (f64, f64),
    pub n_patients: usize,
    pub prevalence: f64,
    pub n_folds: usize,
}

/// Points of a curve in sweep order.
type Curve = Vec<(f64, f64)>;

/// ROC points (fpr, tpr) over descending unique score thresholds,
/// starting at (0,0) and ending at (1,1). Tied scores form one point.
pub fn roc_curve(sc: &ScoredCohort) -> Result<Curve> {
    let n_pos = sc.n_pos();
    let n_neg = sc.labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(StampError::SingleClass);
    }
    let mut order: Vec<usize> = (0..sc.scores.len()).collect();
    order.sort_by(|&a, &b| sc.scores[b].partial_cmp(&sc.scores[a]).unwrap());
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = sc.scores[order[i]];
        while i < order.len() && sc.scores[order[i]] == threshold {
            if sc.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(curve)
}

/// Trapezoid area under the ROC curve. With tied scores this equals the
/// Mann-Whitney pairwise concordance with half credit for ties.
pub fn auroc(sc: &ScoredCohort) -> Result<f64> {
    let curve = roc_curve(sc)?;
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    Ok(area)
}

/// Precision-recall points (recall, precision) over descending unique
/// score thresholds.
pub fn pr_curve(sc: &ScoredCohort) -> Result<Curve> {
    let n_pos = sc.n_pos();
    if n_pos == 0 {
        return Err(StampError::NoPositives);
    }
    let mut order: Vec<usize> = (0..sc.scores.len()).collect();
    order.sort_by(|&a, &b| sc.scores[b].partial_cmp(&sc.scores[a]).unwrap());
    let mut curve = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = sc.scores[order[i]];
        while i < order.len() && sc.scores[order[i]] == threshold {
            if sc.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push((tp as f64 / n_pos as f64, tp as f64 / (tp + fp) as f64));
    }
    Ok(curve)
}

/// Average precision: sum over descending thresholds of
/// delta-recall times precision (step-sum, not trapezoid).
pub fn auprc(sc: &ScoredCohort) -> Result<f64> {
    let curve = pr_curve(sc)?;
    let mut ap = 0.0;
    for pair in curve.windows(2) {
        let (r0, _) = pair[0];
        let (r1, p1) = pair[1];
        ap += (r1 - r0) * p1;
    }
    Ok(ap)
}

/// Percentile bootstrap over patients. Resamples yielding a single class
/// are redrawn up to 10 times, then skipped with a warning.
pub fn bootstrap_ci(
    sc: &ScoredCohort,
    metric: impl Fn(&ScoredCohort) -> Result<f64>,
    n_resamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    metric(sc)?;
    let n = sc.scores.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n_resamples);
    let mut skipped = 0usize;
    for _ in 0..n_resamples {
        let mut value = None;
        for _attempt in 0..10 {
            let mut resample = ScoredCohort {
                scores: Vec::with_capacity(n),
                labels: Vec::with_capacity(n),
            };
            for _ in 0..n {
                let i = rng.gen_range(0..n);
                resample.scores.push(sc.scores[i]);
                resample.labels.push(sc.labels[i]);
            }
            match metric(&resample) {
                Ok(v) => {
                    value = Some(v);
                    break;
                }
                Err(StampError::SingleClass) | Err(StampError::NoPositives) => continue,
                Err(e) => return Err(e),
            }
        }
        match value {
            Some(v) => values.push(v),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("bootstrap: skipped {skipped} single-class resamples after 10 redraws each");
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((
        percentile_sorted(&values, 2.5),
        percentile_sorted(&values, 97.5),
    ))
}

pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 1000;

/// One parsed patient-preds.csv restricted to rows with ground truth.
pub fn load_pred_csv(path: &Path, target_label: &str, true_class: &str) -> Result<ScoredCohort> {
    let schema_err = |detail: String| StampError::SchemaError {
        path: path.to_path_buf(),
        detail,
    };
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let truth_col = col(target_label)
        .ok_or_else(|| schema_err(format!("missing ground-truth column '{target_label}'")))?;
    let score_name = format!("{target_label}_{true_class}");
    let score_col = col(&score_name)
        .ok_or_else(|| schema_err(format!("missing score column '{score_name}'")))?;
    let mut sc = ScoredCohort {
        scores: Vec::new(),
        labels: Vec::new(),
    };
    for record in reader.records() {
        let record = record?;
        let truth = record.get(truth_col).unwrap_or("");
        if truth.is_empty() {
            continue;
        }
        let score: f64 = record
            .get(score_col)
            .unwrap_or("")
            .parse()
            .map_err(|_| schema_err(format!("non-numeric score in column '{score_name}'")))?;
        sc.scores.push(score);
        sc.labels.push(truth == true_class);
    }
    if sc.scores.is_empty() {
        return Err(schema_err("no rows with ground truth".into()));
    }
    Ok(sc)
}

fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Aggregate one or more prediction files into a metrics report plus curve
/// artifacts. With k > 1 files the 95% CI is mean +/- 1.96 times the
/// across-fold sample standard deviation; with k = 1 it is a patient
/// bootstrap with 1000 resamples.
pub fn aggregate_folds(
    pred_csvs: &[PathBuf],
    target_label: &str,
    true_class: &str,
    output_dir: &Path,
    seed: u64,
) -> Result<MetricsReport> {
    assert!(!pred_csvs.is_empty());
    let cohorts: Vec<ScoredCohort> = pred_csvs
        .iter()
        .map(|p| load_pred_csv(p, target_label, true_class))
        .collect::<Result<_>>()?;
    let k = cohorts.len();

    let pooled = ScoredCohort {
        scores: cohorts.iter().flat_map(|c| c.scores.clone()).collect(),
        labels: cohorts.iter().flat_map(|c| c.labels.clone()).collect(),
    };

    let per_fold_auroc: Vec<f64> = cohorts.iter().map(auroc).collect::<Result<_>>()?;
    let per_fold_auprc: Vec<f64> = cohorts.iter().map(auprc).collect::<Result<_>>()?;

    let clamp01 = |v: f64| v.clamp(0.0, 1.0);
    let (auroc_point, auroc_ci, auprc_point, auprc_ci);
    if k > 1 {
        let (m, s) = mean_and_sd(&per_fold_auroc);
        auroc_point = m;
        auroc_ci = (clamp01(m - 1.96 * s), clamp01(m + 1.96 * s));
        let (m, s) = mean_and_sd(&per_fold_auprc);
        auprc_point = m;
        auprc_ci = (clamp01(m - 1.96 * s), clamp01(m + 1.96 * s));
    } else {
        auroc_point = per_fold_auroc[0];
        auroc_ci = bootstrap_ci(&pooled, auroc, DEFAULT_BOOTSTRAP_RESAMPLES, seed)?;
        auprc_point = per_fold_auprc[0];
        auprc_ci = bootstrap_ci(&pooled, auprc, DEFAULT_BOOTSTRAP_RESAMPLES, seed.wrapping_add(1))?;
    }

    fs::create_dir_all(output_dir)?;
    let stats_path = output_dir.join(format!("{target_label}-stats.csv"));
    let mut stats = fs::File::create(&stats_path)?;
    writeln!(stats, "# AUROC: trapezoid ROC area; ties receive half credit")?;
    writeln!(stats, "# AUPRC: average precision (step-sum over descending thresholds)")?;
    if k > 1 {
        writeln!(stats, "# CI: mean +/- 1.96 * sample standard deviation across folds, clamped to [0, 1]")?;
    } else {
        writeln!(stats, "# CI: percentile bootstrap over patients, {DEFAULT_BOOTSTRAP_RESAMPLES} resamples")?;
    }
    writeln!(stats, "metric,point,lower,upper,n_folds")?;
    writeln!(stats, "auroc,{auroc_point},{},{},{k}", auroc_ci.0, auroc_ci.1)?;
    writeln!(stats, "auprc,{auprc_point},{},{},{k}", auprc_ci.0, auprc_ci.1)?;
    for (i, v) in per_fold_auroc.iter().enumerate() {
        writeln!(stats, "auroc-fold-{i},{v},,,1")?;
    }
    for (i, v) in per_fold_auprc.iter().enumerate() {
        writeln!(stats, "auprc-fold-{i},{v},,,1")?;
    }

    let mut roc_points: Vec<(String, Curve)> = Vec::new();
    let mut pr_points: Vec<(String, Curve)> = Vec::new();
    for (i, c) in cohorts.iter().enumerate() {
        roc_points.push((format!("fold-{i}"), roc_curve(c)?));
        pr_points.push((format!("fold-{i}"), pr_curve(c)?));
    }
    if k > 1 {
        roc_points.push(("pooled".into(), roc_curve(&pooled)?));
        pr_points.push(("pooled".into(), pr_curve(&pooled)?));
    }
    write_curve_csv(&output_dir.join("roc-curve.csv"), "fpr,tpr", &roc_points)?;
    write_curve_csv(&output_dir.join("pr-curve.csv"), "recall,precision", &pr_points)?;

    let prevalence = pooled.prevalence();
    write_curve_svg(
        &output_dir.join("roc.svg"),
        "ROC",
        "False positive rate",
        "True positive rate",
        &roc_points,
        &[(0.0, 0.0), (1.0, 1.0)],
    )?;
    write_curve_svg(
        &output_dir.join("prc.svg"),
        "Precision-Recall",
        "Recall",
        "Precision",
        &pr_points,
        &[(0.0, prevalence), (1.0, prevalence)],
    )?;

    Ok(MetricsReport {
        auroc: auroc_point,
        auroc_ci95: auroc_ci,
        auprc: auprc_point,
        auprc_ci95: auprc_ci,
        n_patients: pooled.scores.len(),
        prevalence,
        n_folds: k,
    })
}

fn write_curve_csv(path: &Path, cols: &str, curves: &[(String, Curve)]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "fold,{cols}")?;
    for (name, curve) in curves {
        for (x, y) in curve {
            writeln!(f, "{name},{x},{y}")?;
        }
    }
    Ok(())
}

const SVG_SIZE: f64 = 480.0;
const SVG_MARGIN: f64 = 50.0;

fn write_curve_svg(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    curves: &[(String, Curve)],
    chance: &[(f64, f64); 2],
) -> Result<()> {
    let px = |v: f64| SVG_MARGIN + v * (SVG_SIZE - 2.0 * SVG_MARGIN);
    let py = |v: f64| SVG_SIZE - SVG_MARGIN - v * (SVG_SIZE - 2.0 * SVG_MARGIN);
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_SIZE}\" height=\"{SVG_SIZE}\" viewBox=\"0 0 {SVG_SIZE} {SVG_SIZE}\">\n"
    ));
    s.push_str(&format!(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"white\" stroke=\"black\"/>\n",
        SVG_MARGIN,
        SVG_MARGIN,
        SVG_SIZE - 2.0 * SVG_MARGIN,
        SVG_SIZE - 2.0 * SVG_MARGIN
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{title}</text>\n",
        SVG_SIZE / 2.0
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{x_label}</text>\n",
        SVG_SIZE / 2.0,
        SVG_SIZE - 12.0
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        SVG_SIZE / 2.0,
        SVG_SIZE / 2.0
    ));
    // chance baseline: dotted red
    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"red\" stroke-dasharray=\"4 4\"/>\n",
        px(chance[0].0),
        py(chance[0].1),
        px(chance[1].0),
        py(chance[1].1)
    ));
    let palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = if name == "pooled" {
            "black"
        } else {
            palette[i % palette.len()]
        };
        let pts: Vec<String> = curve.iter().map(|(x, y)| format!("{},{}", px(*x), py(*y))).collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
    }
    s.push_str("</svg>\n");
    fs::write(path, s)?;
    Ok(())
}
