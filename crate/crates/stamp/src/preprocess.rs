//! Slide-level preprocessing: tessellate each slide at the target
//! resolution, reject background and low-edge tiles, estimate and apply
//! per-slide stain normalization, cache inspection images, and persist
//! per-slide feature matrices. Slides are processed by a bounded worker
//! pool; a failing slide never aborts the batch.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use image::{ImageBuffer, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PreprocessingConfig;
use crate::error::{Result, StampError};
use crate::features::{
    extract_batch, feature_dir_name, write_feature_file, FeatureMatrix, TileExtractor,
};
use crate::qc::{qc_tile, QcThresholds, QcVerdict};
use crate::slide::{open_slide, plan_tile_grid, SlideHandle, SlideReader, Tile, TileGrid, TileSpec, TILE_PX};
use crate::stain::{estimate_stain_params, normalize_tile, StainParams, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_I0};

/// Per-slide quality-control tallies; counts always sum to the grid size.
#[derive(Debug, Clone, PartialEq)]
pub struct QcReport {
    pub n_grid_tiles: usize,
    pub n_accepted: usize,
    pub n_rejected_background: usize,
    pub n_rejected_edges: usize,
    pub runtime_s: f64,
}

/// Batch-level outcome counts for one preprocessing run.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessSummary {
    pub n_slides: usize,
    pub n_processed: usize,
    pub n_skipped_existing: usize,
    pub n_empty: usize,
    pub n_failed: usize,
    pub runtime_s: f64,
}

/// Cache sidecar describing which grid tiles survived QC, so feature
/// extraction can re-run from the cached mosaic without the source slide.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TileIndex {
    target_mpp: f64,
    cols: u32,
    rows: u32,
    norm: String,
    accepted: Vec<(u32, u32)>,
}

const STAIN_SAMPLE_TILES: usize = 50;
const STAIN_PIXELS_PER_TILE: usize = 1024;
/// Full-plane cache images above this byte count are downscaled.
const MAX_PLANE_BYTES: u64 = 1 << 31;

/// Estimate stain parameters from every pixel of a template image.
pub fn load_normalization_template(path: &Path) -> Result<StainParams> {
    let img = image::open(path)
        .map_err(|e| StampError::CorruptFile {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
        .to_rgb8();
    let pixels: Vec<[u8; 3]> = img.pixels().map(|p| p.0).collect();
    estimate_stain_params(&pixels, DEFAULT_I0, DEFAULT_ALPHA, DEFAULT_BETA)
}

fn fnv_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Uniform pixel sample from up to `STAIN_SAMPLE_TILES` accepted tiles.
fn sample_stain_pixels(accepted: &[&Tile], rng: &mut ChaCha8Rng) -> Vec<[u8; 3]> {
    let mut order: Vec<usize> = (0..accepted.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(rng);
    order.truncate(STAIN_SAMPLE_TILES);
    order.sort_unstable();
    let mut pixels = Vec::with_capacity(order.len() * STAIN_PIXELS_PER_TILE);
    let n_px = (TILE_PX * TILE_PX) as usize;
    for &i in &order {
        let rgb = &accepted[i].rgb;
        for _ in 0..STAIN_PIXELS_PER_TILE {
            let p = rng.gen_range(0..n_px);
            pixels.push([rgb[p * 3], rgb[p * 3 + 1], rgb[p * 3 + 2]]);
        }
    }
    pixels
}

/// Paste 224-px tiles into a full-plane RGB mosaic; unfilled regions white.
fn assemble_plane(grid: &TileGrid, tiles: &[&Tile]) -> RgbImage {
    let (w, h) = (grid.cols * TILE_PX, grid.rows * TILE_PX);
    let mut img: RgbImage = ImageBuffer::from_pixel(w, h, Rgb([255, 255, 255]));
    for t in tiles {
        for dy in 0..TILE_PX {
            for dx in 0..TILE_PX {
                let i = ((dy * TILE_PX + dx) * 3) as usize;
                img.put_pixel(t.x + dx, t.y + dy, Rgb([t.rgb[i], t.rgb[i + 1], t.rgb[i + 2]]));
            }
        }
    }
    img
}

fn save_plane_jpg(img: &RgbImage, path: &Path) -> Result<()> {
    let bytes = img.width() as u64 * img.height() as u64 * 3;
    if bytes > MAX_PLANE_BYTES {
        let factor = ((bytes as f64 / MAX_PLANE_BYTES as f64).sqrt()).ceil() as u32;
        let small = image::imageops::resize(
            img,
            (img.width() / factor).max(1),
            (img.height() / factor).max(1),
            image::imageops::FilterType::Triangle,
        );
        small.save(path).map_err(StampError::from)?;
    } else {
        img.save(path).map_err(StampError::from)?;
    }
    Ok(())
}

/// Cut the accepted tiles back out of a cached mosaic image.
fn tiles_from_mosaic(img: &RgbImage, accepted: &[(u32, u32)]) -> Result<Vec<Tile>> {
    let mut tiles = Vec::with_capacity(accepted.len());
    for &(x, y) in accepted {
        if x + TILE_PX > img.width() || y + TILE_PX > img.height() {
            return Err(StampError::CorruptFile {
                path: PathBuf::from("cached mosaic"),
                detail: format!("tile ({x}, {y}) outside cached plane"),
            });
        }
        let mut rgb = Vec::with_capacity((TILE_PX * TILE_PX * 3) as usize);
        for dy in 0..TILE_PX {
            for dx in 0..TILE_PX {
                let p = img.get_pixel(x + dx, y + dy);
                rgb.extend_from_slice(&p.0);
            }
        }
        tiles.push(Tile::new(x, y, rgb));
    }
    Ok(tiles)
}

/// Process one slide end to end: QC every grid tile, estimate per-slide
/// stain parameters from a seeded pixel sample, normalize toward the
/// template when one is given, write `slide.jpg`, `canny_slide.jpg`,
/// `norm_slide.jpg` and `tiles.json` under `cache_dir/<stem>/`, and embed
/// the accepted tiles in coordinate order.
///
/// Returns `None` for the features when every tile was rejected.
pub fn preprocess_slide(
    handle: &SlideHandle,
    spec: &TileSpec,
    thresholds: &QcThresholds,
    template: Option<&StainParams>,
    cache_dir: &Path,
    extractor: &dyn TileExtractor,
    seed: u64,
) -> Result<(QcReport, Option<FeatureMatrix>)> {
    let start = Instant::now();
    let grid = plan_tile_grid(handle, spec)?;
    let mut reader = SlideReader::open(handle)?;
    let mut tiles = Vec::with_capacity(grid.n_tiles());
    for (x, y) in grid.coords() {
        tiles.push(reader.read_tile(handle, &grid, x, y)?);
    }
    drop(reader);

    let outcomes: Vec<QcVerdict> = tiles
        .par_iter()
        .map(|t| qc_tile(t, thresholds).verdict)
        .collect();
    let accepted: Vec<&Tile> = tiles
        .iter()
        .zip(&outcomes)
        .filter(|(_, v)| **v == QcVerdict::Accepted)
        .map(|(t, _)| t)
        .collect();
    let n_bg = outcomes.iter().filter(|v| **v == QcVerdict::RejectedBackground).count();
    let n_edges = outcomes.iter().filter(|v| **v == QcVerdict::RejectedEdges).count();

    let stem = handle
        .path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_default();
    let slide_cache = cache_dir.join(&stem);
    fs::create_dir_all(&slide_cache)?;
    let all: Vec<&Tile> = tiles.iter().collect();
    save_plane_jpg(&assemble_plane(&grid, &all), &slide_cache.join("slide.jpg"))?;
    save_plane_jpg(&assemble_plane(&grid, &accepted), &slide_cache.join("canny_slide.jpg"))?;

    // Per-slide stain estimate from a bounded seeded sample; a slide with
    // too little stained tissue is embedded unnormalized, with a warning.
    let mut norm = "raw".to_string();
    let final_tiles: Vec<Tile> = if accepted.is_empty() {
        Vec::new()
    } else if let Some(target) = template {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv_hash(&stem));
        let pixels = sample_stain_pixels(&accepted, &mut rng);
        match estimate_stain_params(&pixels, DEFAULT_I0, DEFAULT_ALPHA, DEFAULT_BETA) {
            Ok(source) => {
                norm = "macenko".into();
                accepted
                    .par_iter()
                    .map(|t| normalize_tile(t, &source, target))
                    .collect()
            }
            Err(StampError::InsufficientTissue(_)) => {
                eprintln!("warning: {stem}: too little stained tissue, skipping normalization");
                accepted.iter().map(|t| (*t).clone()).collect()
            }
            Err(e) => return Err(e),
        }
    } else {
        accepted.iter().map(|t| (*t).clone()).collect()
    };
    if template.is_some() {
        let refs: Vec<&Tile> = final_tiles.iter().collect();
        save_plane_jpg(&assemble_plane(&grid, &refs), &slide_cache.join("norm_slide.jpg"))?;
    }
    let index = TileIndex {
        target_mpp: grid.target_mpp,
        cols: grid.cols,
        rows: grid.rows,
        norm: norm.clone(),
        accepted: final_tiles.iter().map(|t| (t.x, t.y)).collect(),
    };
    fs::write(
        slide_cache.join("tiles.json"),
        serde_json::to_string_pretty(&index)?,
    )?;

    let report = QcReport {
        n_grid_tiles: grid.n_tiles(),
        n_accepted: accepted.len(),
        n_rejected_background: n_bg,
        n_rejected_edges: n_edges,
        runtime_s: start.elapsed().as_secs_f64(),
    };
    if final_tiles.is_empty() {
        return Ok((report, None));
    }
    let fm = extract_batch(&final_tiles, extractor, grid.target_mpp, &norm)?;
    Ok((report, Some(fm)))
}

/// Re-run feature extraction from a slide's cache directory, without
/// touching the source slide.
fn extract_from_cache(
    slide_cache: &Path,
    extractor: &dyn TileExtractor,
) -> Result<Option<FeatureMatrix>> {
    let index_path = slide_cache.join("tiles.json");
    let text = fs::read_to_string(&index_path).map_err(|_| StampError::CorruptFile {
        path: index_path.clone(),
        detail: "missing tile index; run full preprocessing first".into(),
    })?;
    let index: TileIndex = serde_json::from_str(&text)?;
    if index.accepted.is_empty() {
        return Ok(None);
    }
    let mosaic_name = if index.norm == "macenko" { "norm_slide.jpg" } else { "canny_slide.jpg" };
    let mosaic_path = slide_cache.join(mosaic_name);
    let img = image::open(&mosaic_path)
        .map_err(|e| StampError::CorruptFile {
            path: mosaic_path.clone(),
            detail: e.to_string(),
        })?
        .to_rgb8();
    let tiles = tiles_from_mosaic(&img, &index.accepted)?;
    Ok(Some(extract_batch(&tiles, extractor, index.target_mpp, &index.norm)?))
}

/// Slides in `wsi_dir` with a supported extension, sorted by file name.
pub fn list_slides(wsi_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut slides: Vec<PathBuf> = fs::read_dir(wsi_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "tif" | "tiff" | "svs"))
                .unwrap_or(false)
        })
        .collect();
    slides.sort();
    Ok(slides)
}

/// Run preprocessing over every slide in the configured directory.
///
/// Feature files land in `<output_dir>/STAMP_<norm>_<extractor-id>/`;
/// slides with an existing feature file are skipped, and per-slide failures
/// are logged without aborting the batch.
pub fn run_preprocessing(
    cfg: &PreprocessingConfig,
    extractor: &dyn TileExtractor,
) -> Result<PreprocessSummary> {
    let start = Instant::now();
    let feature_dir = cfg
        .output_dir
        .join(feature_dir_name(cfg.norm, &extractor.descriptor().id));
    fs::create_dir_all(&feature_dir)?;
    fs::create_dir_all(&cfg.cache_dir)?;

    let template = if cfg.norm {
        let path = cfg.normalization_template.as_ref().ok_or_else(|| {
            StampError::MissingKeys(vec!["preprocessing.normalization_template".into()])
        })?;
        Some(load_normalization_template(path)?)
    } else {
        None
    };

    let spec = TileSpec::new(cfg.microns);
    let mut thresholds = QcThresholds::default();
    if let Some(b) = cfg.qc_brightness_max {
        thresholds.brightness_max = b;
    }
    if let Some(e) = cfg.qc_edge_min {
        thresholds.edge_min = e;
    }

    let slides = list_slides(&cfg.wsi_dir)?;
    let processed = AtomicUsize::new(0);
    let skipped = AtomicUsize::new(0);
    let empty = AtomicUsize::new(0);
    let failed = AtomicUsize::new(0);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.cores)
        .build()
        .map_err(|e| StampError::BackendFailure(e.to_string()))?;
    pool.install(|| {
        slides.par_iter().for_each(|slide_path| {
            let stem = slide_path
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_default();
            let feature_path = feature_dir.join(format!("{stem}.h5"));
            if feature_path.exists() {
                skipped.fetch_add(1, Ordering::Relaxed);
                return;
            }
            let outcome = process_one(
                slide_path,
                &feature_path,
                &spec,
                &thresholds,
                template.as_ref(),
                cfg,
                extractor,
            );
            match outcome {
                Ok(Some(report)) => {
                    eprintln!(
                        "{stem}: {} tiles, {} accepted, {} background, {} low-edge ({:.1}s)",
                        report.n_grid_tiles,
                        report.n_accepted,
                        report.n_rejected_background,
                        report.n_rejected_edges,
                        report.runtime_s,
                    );
                    if report.n_accepted == 0 {
                        eprintln!("warning: {stem}: no tissue tiles, no feature file written");
                        empty.fetch_add(1, Ordering::Relaxed);
                    } else {
                        processed.fetch_add(1, Ordering::Relaxed);
                    }
                }
                Ok(None) => {
                    processed.fetch_add(1, Ordering::Relaxed);
                }
                Err(e @ StampError::MissingResolution(_)) => {
                    eprintln!("warning: {stem} skipped: {e}");
                    failed.fetch_add(1, Ordering::Relaxed);
                }
                Err(e) => {
                    eprintln!("warning: {stem} failed: {e}");
                    failed.fetch_add(1, Ordering::Relaxed);
                }
            }
        });
    });

    let summary = PreprocessSummary {
        n_slides: slides.len(),
        n_processed: processed.into_inner(),
        n_skipped_existing: skipped.into_inner(),
        n_empty: empty.into_inner(),
        n_failed: failed.into_inner(),
        runtime_s: start.elapsed().as_secs_f64(),
    };
    eprintln!(
        "preprocessing done: {} slides, {} processed, {} cached, {} empty, {} failed, {:.1}s",
        summary.n_slides,
        summary.n_processed,
        summary.n_skipped_existing,
        summary.n_empty,
        summary.n_failed,
        summary.runtime_s,
    );
    Ok(summary)
}

/// Returns the QC report for a fully processed slide, or `None` when the
/// features came from the cache.
fn process_one(
    slide_path: &Path,
    feature_path: &Path,
    spec: &TileSpec,
    thresholds: &QcThresholds,
    template: Option<&StainParams>,
    cfg: &PreprocessingConfig,
    extractor: &dyn TileExtractor,
) -> Result<Option<QcReport>> {
    let stem = slide_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_default();
    if cfg.only_feature_extraction {
        if let Some(fm) = extract_from_cache(&cfg.cache_dir.join(&stem), extractor)? {
            write_feature_file(feature_path, &fm)?;
        }
        return Ok(None);
    }
    let handle = open_slide(slide_path)?;
    let (report, fm) = preprocess_slide(
        &handle,
        spec,
        thresholds,
        template,
        &cfg.cache_dir,
        extractor,
        cfg.seed,
    )?;
    if let Some(fm) = &fm {
        write_feature_file(feature_path, fm)?;
        // Delete the source only once the feature file is durably on disk.
        if cfg.del_slide {
            let f = fs::File::open(feature_path)?;
            f.sync_all()?;
            fs::remove_file(slide_path)?;
        }
    }
    Ok(Some(report))
}
