//! Gradient-based explanations: per-tile attribution scores for a trained
//! model, diverging heatmap overlays on the cached slide image, and export
//! of the highest-scoring tiles re-read from the source slide.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::{Array1, Array2};

use crate::config::HeatmapsConfig;
use crate::error::{Result, StampError};
use crate::features::{read_feature_file, FeatureMatrix};
use crate::model::{load_bundle, ModelBundle};
use crate::slide::{open_slide, plan_tile_grid, SlideReader, TileSpec, TILE_PX};

/// Per-tile attribution scores for one target category, aligned with the
/// rows of the slide's feature matrix.
#[derive(Debug, Clone)]
pub struct AttributionMap {
    pub category: String,
    pub scores: Vec<f64>,
    pub max_abs: f64,
}

/// Feature rows widened with zeros for the model's tabular inputs, which
/// are unavailable in slide-level explanation runs.
pub fn bag_from_features(fm: &FeatureMatrix, dim_input: usize) -> Result<Array2<f64>> {
    let (n, d) = (fm.n_tiles(), fm.dim());
    if d > dim_input {
        return Err(StampError::DimensionMismatch {
            expected: dim_input,
            got: d,
        });
    }
    let mut bag = Array2::zeros((n, dim_input));
    for i in 0..n {
        for j in 0..d {
            bag[[i, j]] = fm.feats[[i, j]] as f64;
        }
    }
    Ok(bag)
}

/// Gradient-times-input attribution of each tile toward one category.
///
/// The attributed quantity is the target logit minus the mean of the other
/// logits, so for binary models the two class maps are exact negatives.
pub fn tile_attribution(
    bundle: &ModelBundle,
    fm: &FeatureMatrix,
    target: usize,
) -> Result<AttributionMap> {
    if fm.extractor_id != bundle.extractor_id {
        return Err(StampError::ExtractorMismatch {
            expected: bundle.extractor_id.clone(),
            got: fm.extractor_id.clone(),
        });
    }
    assert!(target < bundle.categories.len());
    let mut bag = bag_from_features(fm, bundle.model.cfg.dim_input)?;
    bundle.scaler.apply(&mut bag);
    let (_, cache) = bundle.model.forward(&bag, None)?;
    let c = bundle.model.cfg.n_classes;
    let off_weight = -1.0 / (c as f64 - 1.0);
    let dlogits = Array1::from_shape_fn(c, |j| if j == target { 1.0 } else { off_weight });
    let (_, dinput) = bundle.model.backward(&cache, &dlogits);
    let scores: Vec<f64> = (0..bag.nrows())
        .map(|i| dinput.row(i).dot(&bag.row(i)))
        .collect();
    let max_abs = scores.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    Ok(AttributionMap {
        category: bundle.categories[target].clone(),
        scores,
        max_abs,
    })
}

/// Diverging blue-white-red color for a normalized score in [-1, 1].
fn diverging_color(v: f64) -> [u8; 3] {
    let v = v.clamp(-1.0, 1.0);
    let fade = (255.0 * (1.0 - v.abs())).round() as u8;
    if v >= 0.0 {
        [255, fade, fade]
    } else {
        [fade, fade, 255]
    }
}

fn blend(base: [u8; 3], overlay: [u8; 3], alpha: f64) -> [u8; 3] {
    let mut out = [0u8; 3];
    for ch in 0..3 {
        out[ch] = (base[ch] as f64 * (1.0 - alpha) + overlay[ch] as f64 * alpha).round() as u8;
    }
    out
}

const HEATMAP_ALPHA: f64 = 0.6;
/// Cell edge used for the white fallback canvas when no thumbnail exists.
const FALLBACK_CELL_PX: u32 = 64;

/// Paint the attribution map over the cached slide image (or a white
/// canvas when the cache artifact is missing) and write it as a PNG.
pub fn render_heatmap(
    attr: &AttributionMap,
    coords: &Array2<i32>,
    thumbnail: Option<&Path>,
    out_path: &Path,
) -> Result<()> {
    assert_eq!(attr.scores.len(), coords.nrows());
    let cols = coords.column(0).iter().map(|x| x / TILE_PX as i32).max().unwrap_or(0) as u32 + 1;
    let rows = coords.column(1).iter().map(|y| y / TILE_PX as i32).max().unwrap_or(0) as u32 + 1;
    let base: RgbImage = match thumbnail {
        Some(p) if p.exists() => image::open(p)
            .map_err(|e| StampError::CorruptFile {
                path: p.to_path_buf(),
                detail: e.to_string(),
            })?
            .to_rgb8(),
        Some(p) => {
            eprintln!(
                "warning: {}",
                StampError::MissingThumbnail(p.to_path_buf())
            );
            ImageBuffer::from_pixel(cols * FALLBACK_CELL_PX, rows * FALLBACK_CELL_PX, Rgb([255; 3]))
        }
        None => {
            ImageBuffer::from_pixel(cols * FALLBACK_CELL_PX, rows * FALLBACK_CELL_PX, Rgb([255; 3]))
        }
    };
    // tile index per grid cell; cells without an accepted tile stay neutral
    let mut cell_score = vec![0.0f64; (cols * rows) as usize];
    for (i, row) in coords.rows().into_iter().enumerate() {
        let cx = row[0] as u32 / TILE_PX;
        let cy = row[1] as u32 / TILE_PX;
        let norm = if attr.max_abs > 0.0 { attr.max_abs } else { 1.0 };
        cell_score[(cy * cols + cx) as usize] = attr.scores[i] / norm;
    }
    let (w, h) = (base.width(), base.height());
    let mut img = base;
    for y in 0..h {
        let cy = (y as u64 * rows as u64 / h as u64).min(rows as u64 - 1) as u32;
        for x in 0..w {
            let cx = (x as u64 * cols as u64 / w as u64).min(cols as u64 - 1) as u32;
            let v = cell_score[(cy * cols + cx) as usize];
            let p = img.get_pixel_mut(x, y);
            p.0 = blend(p.0, diverging_color(v), HEATMAP_ALPHA);
        }
    }
    img.save(out_path).map_err(StampError::from)?;
    Ok(())
}

/// Tile indices ranked by descending score, ties broken by (y, x).
fn ranked_indices(attr: &AttributionMap, coords: &Array2<i32>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..attr.scores.len()).collect();
    idx.sort_by(|&a, &b| {
        attr.scores[b]
            .partial_cmp(&attr.scores[a])
            .unwrap()
            .then_with(|| (coords[[a, 1]], coords[[a, 0]]).cmp(&(coords[[b, 1]], coords[[b, 0]])))
    });
    idx
}

/// Re-read and save the `n_toptiles` highest-attribution tiles from the
/// source slide; returns the written paths in rank order.
pub fn export_top_tiles(
    attr: &AttributionMap,
    fm: &FeatureMatrix,
    slide_path: &Path,
    stem: &str,
    n_toptiles: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    assert!(n_toptiles >= 1);
    if !slide_path.exists() {
        return Err(StampError::SlideUnavailable(
            slide_path.display().to_string(),
        ));
    }
    let handle = open_slide(slide_path)?;
    let spec = TileSpec::new(fm.target_mpp * TILE_PX as f64);
    let grid = plan_tile_grid(&handle, &spec)?;
    let mut reader = SlideReader::open(&handle)?;
    let ranked = ranked_indices(attr, &fm.coords);
    if ranked.len() < n_toptiles {
        eprintln!(
            "warning: {stem}: only {} tiles available for {} requested",
            ranked.len(),
            n_toptiles
        );
    }
    let mut written = Vec::new();
    for (rank, &i) in ranked.iter().take(n_toptiles).enumerate() {
        let (x, y) = (fm.coords[[i, 0]] as u32, fm.coords[[i, 1]] as u32);
        let tile = reader.read_tile(&handle, &grid, x, y)?;
        let img: RgbImage = ImageBuffer::from_raw(TILE_PX, TILE_PX, tile.rgb)
            .expect("tile buffer is 224x224x3");
        let name = format!(
            "{stem}_{}_top{}_s{:.4}_x{}_y{}.png",
            attr.category,
            rank + 1,
            attr.scores[i],
            x,
            y
        );
        let path = out_dir.join(name);
        img.save(&path).map_err(StampError::from)?;
        written.push(path);
    }
    Ok(written)
}

fn write_scores_csv(
    path: &Path,
    maps: &[AttributionMap],
    coords: &Array2<i32>,
    target_label: &str,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["x".to_string(), "y".to_string()];
    for m in maps {
        header.push(format!("{target_label}_{}", m.category));
    }
    w.write_record(&header)?;
    for i in 0..coords.nrows() {
        let mut row = vec![coords[[i, 0]].to_string(), coords[[i, 1]].to_string()];
        for m in maps {
            row.push(m.scores[i].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Match a slide stem against a name pattern where `*` matches any run of
/// characters.
fn stem_matches(pattern: &str, stem: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == stem;
    }
    let mut pos = 0;
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            continue;
        }
        if i == 0 {
            if !stem.starts_with(part) {
                return false;
            }
            pos = part.len();
        } else if i == parts.len() - 1 && !pattern.ends_with('*') {
            return stem.len() >= pos + part.len() && stem.ends_with(part);
        } else {
            match stem[pos..].find(part) {
                Some(off) => pos += off + part.len(),
                None => return false,
            }
        }
    }
    true
}

fn find_slide_file(wsi_dir: &Path, stem: &str) -> Option<PathBuf> {
    for ext in ["tif", "tiff", "svs"] {
        let p = wsi_dir.join(format!("{stem}.{ext}"));
        if p.exists() {
            return Some(p);
        }
    }
    None
}

/// Generate heatmaps, top tiles and a `scores.csv` for every feature file
/// matching the configured slide name; returns the per-slide output
/// directories.
pub fn run_heatmaps(cfg: &HeatmapsConfig) -> Result<Vec<PathBuf>> {
    let bundle = load_bundle(&cfg.model_path)?;
    let mut stems: Vec<String> = fs::read_dir(&cfg.feature_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("h5"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().to_string()))
        .filter(|stem| stem_matches(&cfg.slide_name, stem))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(StampError::NoFeaturesFound(cfg.feature_dir.clone()));
    }

    let mut out_dirs = Vec::new();
    for stem in &stems {
        let fm = read_feature_file(&cfg.feature_dir.join(format!("{stem}.h5")))?;
        let slide_dir = cfg.output_dir.join("heatmaps").join(stem);
        fs::create_dir_all(&slide_dir)?;
        let maps: Vec<AttributionMap> = (0..bundle.categories.len())
            .map(|t| tile_attribution(&bundle, &fm, t))
            .collect::<Result<_>>()?;
        let thumbnail = cfg
            .cache_dir
            .as_ref()
            .map(|c| c.join(stem).join("slide.jpg"));
        for map in &maps {
            let png = slide_dir.join(format!("{stem}_{}_heatmap.png", map.category));
            render_heatmap(map, &fm.coords, thumbnail.as_deref(), &png)?;
        }
        write_scores_csv(
            &slide_dir.join("scores.csv"),
            &maps,
            &fm.coords,
            &bundle.target_label,
        )?;
        match find_slide_file(&cfg.wsi_dir, stem) {
            Some(slide_path) => {
                for map in &maps {
                    export_top_tiles(map, &fm, &slide_path, stem, cfg.n_toptiles, &slide_dir)?;
                }
            }
            None => {
                return Err(StampError::SlideUnavailable(format!(
                    "{}/{stem}",
                    cfg.wsi_dir.display()
                )));
            }
        }
        out_dirs.push(slide_dir);
    }
    Ok(out_dirs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::TabularSchema;
    use crate::features::{extract_batch, write_feature_file, ToyExtractor, TOY_EXTRACTOR_ID};
    use crate::model::{save_bundle, Model, ModelConfig, TrainFingerprint};
    use crate::qc::QcThresholds;
    use crate::synth::{generate_cohort, slide_stem, SynthSpec};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    fn empty_schema() -> TabularSchema {
        TabularSchema {
            cat_labels: vec![],
            cat_categories: vec![],
            cont_labels: vec![],
            cont_mean: vec![],
            cont_sd: vec![],
        }
    }

    fn toy_bundle(seed: u64) -> ModelBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = ModelConfig::new(48, 2);
        cfg.dim_model = 32;
        cfg.n_heads = 4;
        cfg.n_layers = 1;
        ModelBundle {
            model: Model::init(cfg, &mut rng),
            target_label: "isSignal".into(),
            categories: vec!["POS".into(), "NEG".into()],
            extractor_id: TOY_EXTRACTOR_ID.into(),
            tabular: empty_schema(),
            scaler: crate::model::FeatureScaler::identity(48),
            fingerprint: TrainFingerprint {
                seed,
                data_sha256: "0".repeat(64),
            },
        }
    }

    fn random_features(n: usize, seed: u64) -> FeatureMatrix {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = Array2::from_shape_fn((n, 48), |_| rng.gen_range(0.0f32..1.0));
        let coords = Array2::from_shape_fn((n, 2), |(i, j)| {
            if j == 0 {
                ((i % 4) as i32) * TILE_PX as i32
            } else {
                ((i / 4) as i32) * TILE_PX as i32
            }
        });
        FeatureMatrix {
            feats,
            coords,
            extractor_id: TOY_EXTRACTOR_ID.into(),
            tile_px: TILE_PX,
            target_mpp: 256.0 / 224.0,
            norm: "raw".into(),
        }
    }

    #[test]
    fn binary_class_maps_are_exact_negatives() {
        let bundle = toy_bundle(1);
        let fm = random_features(9, 2);
        let pos = tile_attribution(&bundle, &fm, 0).unwrap();
        let neg = tile_attribution(&bundle, &fm, 1).unwrap();
        assert!(pos.scores.iter().any(|s| s.abs() > 0.0));
        for (a, b) in pos.scores.iter().zip(&neg.scores) {
            assert_eq!(*a, -b, "maps are not exact negatives");
        }
    }

    #[test]
    fn zero_features_attribute_zero() {
        let bundle = toy_bundle(3);
        let mut fm = random_features(5, 4);
        fm.feats.fill(0.0);
        let attr = tile_attribution(&bundle, &fm, 0).unwrap();
        assert!(attr.scores.iter().all(|s| *s == 0.0));
        assert_eq!(attr.max_abs, 0.0);
    }

    #[test]
    fn wrong_extractor_is_rejected() {
        let bundle = toy_bundle(5);
        let mut fm = random_features(4, 6);
        fm.extractor_id = "other-v2".into();
        match tile_attribution(&bundle, &fm, 0) {
            Err(StampError::ExtractorMismatch { expected, got }) => {
                assert_eq!(expected, TOY_EXTRACTOR_ID);
                assert_eq!(got, "other-v2");
            }
            other => panic!("expected extractor mismatch, got {other:?}"),
        }
    }

    #[test]
    fn heatmap_renders_on_white_fallback_and_is_deterministic() {
        let tmp = TempDir::new().unwrap();
        let bundle = toy_bundle(7);
        let fm = random_features(12, 8);
        let attr = tile_attribution(&bundle, &fm, 0).unwrap();
        let p1 = tmp.path().join("a.png");
        let p2 = tmp.path().join("b.png");
        render_heatmap(&attr, &fm.coords, None, &p1).unwrap();
        render_heatmap(
            &attr,
            &fm.coords,
            Some(&tmp.path().join("missing.jpg")),
            &p2,
        )
        .unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn wildcard_patterns_match_stems() {
        assert!(stem_matches("*", "slide_000"));
        assert!(stem_matches("slide_*", "slide_000"));
        assert!(stem_matches("*_000", "slide_000"));
        assert!(stem_matches("slide_000", "slide_000"));
        assert!(stem_matches("sl*00", "slide_000"));
        assert!(!stem_matches("slide_001", "slide_000"));
        assert!(!stem_matches("x*", "slide_000"));
        assert!(!stem_matches("*x", "slide_000"));
    }

    #[test]
    fn end_to_end_outputs_heatmaps_scores_and_top_tiles() {
        let tmp = TempDir::new().unwrap();
        let spec = SynthSpec {
            n_patients: 2,
            slide_width: 1792,
            slide_height: 1792,
            blob_count: (2, 3),
            pen_fraction: 0.0,
            seed: 21,
            ..SynthSpec::default()
        };
        generate_cohort(&spec, tmp.path()).unwrap();
        let extractor = ToyExtractor::new();
        let feature_dir = tmp.path().join("features");
        fs::create_dir_all(&feature_dir).unwrap();
        // build feature files straight from the slides
        for i in 0..2 {
            let slide = tmp.path().join("wsi").join(format!("{}.tif", slide_stem(i)));
            let handle = open_slide(&slide).unwrap();
            let (_, fm) = crate::preprocess::preprocess_slide(
                &handle,
                &TileSpec::new(256.0),
                &QcThresholds::default(),
                None,
                &tmp.path().join("cache"),
                &extractor,
                1,
            )
            .unwrap();
            write_feature_file(
                &feature_dir.join(format!("{}.h5", slide_stem(i))),
                &fm.unwrap(),
            )
            .unwrap();
        }
        let bundle = toy_bundle(9);
        let model_path = tmp.path().join("export.stamp");
        save_bundle(&model_path, &bundle).unwrap();
        let cfg = HeatmapsConfig {
            slide_name: "slide_*".into(),
            feature_dir,
            wsi_dir: tmp.path().join("wsi"),
            model_path,
            output_dir: tmp.path().join("out"),
            n_toptiles: 3,
            cache_dir: Some(tmp.path().join("cache")),
        };
        let dirs = run_heatmaps(&cfg).unwrap();
        assert_eq!(dirs.len(), 2);
        for (i, dir) in dirs.iter().enumerate() {
            let stem = slide_stem(i);
            assert!(dir.join(format!("{stem}_POS_heatmap.png")).exists());
            assert!(dir.join(format!("{stem}_NEG_heatmap.png")).exists());
            assert!(dir.join("scores.csv").exists());
            let fm = read_feature_file(&cfg.feature_dir.join(format!("{stem}.h5"))).unwrap();
            let mut top: Vec<String> = fs::read_dir(dir)
                .unwrap()
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().to_string())
                .filter(|n| n.contains("_POS_top"))
                .collect();
            top.sort();
            assert_eq!(top.len(), 3.min(fm.n_tiles()));
            // scores embedded in the names are non-increasing with rank
            let scores: Vec<f64> = top
                .iter()
                .map(|n| {
                    let s = n.split("_s").nth(1).unwrap();
                    s.split("_x").next().unwrap().parse().unwrap()
                })
                .collect();
            assert!(scores.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn toptile_truncation_warns_and_exports_all_tiles() {
        let tmp = TempDir::new().unwrap();
        let spec = SynthSpec {
            n_patients: 2,
            slide_width: 1792,
            slide_height: 1792,
            blob_count: (2, 3),
            pen_fraction: 0.0,
            seed: 23,
            ..SynthSpec::default()
        };
        generate_cohort(&spec, tmp.path()).unwrap();
        let slide = tmp.path().join("wsi").join(format!("{}.tif", slide_stem(0)));
        let handle = open_slide(&slide).unwrap();
        let grid = plan_tile_grid(&handle, &TileSpec::new(256.0)).unwrap();
        let mut reader = SlideReader::open(&handle).unwrap();
        let tiles: Vec<_> = grid
            .coords()
            .take(3)
            .map(|(x, y)| reader.read_tile(&handle, &grid, x, y).unwrap())
            .collect();
        let fm = extract_batch(&tiles, &ToyExtractor::new(), grid.target_mpp, "raw").unwrap();
        let bundle = toy_bundle(11);
        let attr = tile_attribution(&bundle, &fm, 0).unwrap();
        let out = tmp.path().join("tiles");
        fs::create_dir_all(&out).unwrap();
        let written = export_top_tiles(&attr, &fm, &slide, &slide_stem(0), 8, &out).unwrap();
        assert_eq!(written.len(), 3);
        let missing = tmp.path().join("wsi").join("nope.tif");
        assert!(matches!(
            export_top_tiles(&attr, &fm, &missing, "nope", 1, &out),
            Err(StampError::SlideUnavailable(_))
        ));
    }
}
