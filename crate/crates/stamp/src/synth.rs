//! Synthetic slide cohort with a planted phenotype-label signal.
//!
//! Slides are single-level tiled TIFFs with correct resolution metadata:
//! white background, elliptical H&E-textured tissue blobs speckled with dark
//! nuclei, and (on positive slides) pale blue mucin-like signal pools
//! covering a configurable fraction of the tissue. A truth file records the
//! per-patient labels and per-slide signal tiles so end-to-end runs can be
//! scored without clinical data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StampError};
use crate::slide::TILE_PX;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_patients: usize,
    /// Fraction of patients with the positive (signal) label.
    pub prevalence: f64,
    pub slide_width: u32,
    pub slide_height: u32,
    /// Base resolution of the generated slides.
    pub mpp: f64,
    pub blob_count: (usize, usize),
    /// Fraction of a positive slide's tissue rendered as signal texture.
    pub signal_strength: f64,
    /// Fraction of slides receiving a pen-mark stroke.
    pub pen_fraction: f64,
    /// Tile edge in microns used for the truth mask grid.
    pub microns: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_patients: 60,
            prevalence: 0.5,
            slide_width: 8960,
            slide_height: 8960,
            mpp: 0.5,
            blob_count: (3, 6),
            signal_strength: 0.5,
            pen_fraction: 0.1,
            microns: 256.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) {
        assert!(self.prevalence > 0.0 && self.prevalence < 1.0);
        // zero strength builds a null cohort with no planted signal at all
        assert!(self.signal_strength >= 0.0);
        assert!(self.n_patients >= 2);
    }
}

pub const SYNTH_TARGET_LABEL: &str = "isSignal";
pub const SYNTH_CATEGORIES: [&str; 2] = ["POS", "NEG"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideTruth {
    pub patient: String,
    pub grid_cols: u32,
    pub grid_rows: u32,
    /// Top-left coordinates (target-MPP pixels) of tiles whose area is
    /// mostly signal texture.
    pub signal_tiles: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub seed: u64,
    pub target_label: String,
    pub categories: Vec<String>,
    /// Patient id to label category.
    pub labels: BTreeMap<String, String>,
    /// Slide stem to its ground truth.
    pub slides: BTreeMap<String, SlideTruth>,
}

pub fn patient_id(i: usize) -> String {
    format!("SYN-{i:03}")
}

pub fn slide_stem(i: usize) -> String {
    format!("slide_{i:03}")
}

/// Generate slides into `<out_dir>/wsi/` plus `slide_table.csv`,
/// `clini_table.csv` and `truth.json`. Deterministic under the spec.
pub fn generate_cohort(spec: &SynthSpec, out_dir: &Path) -> Result<SynthTruth> {
    spec.validate();
    let wsi_dir = out_dir.join("wsi");
    fs::create_dir_all(&wsi_dir)?;

    let n_pos = (spec.n_patients as f64 * spec.prevalence).round() as usize;
    // deterministic label assignment: shuffle indices with the cohort seed
    let mut order: Vec<usize> = (0..spec.n_patients).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let mut positive = vec![false; spec.n_patients];
    for &i in order.iter().take(n_pos) {
        positive[i] = true;
    }

    let slides: Vec<(String, SlideTruth)> = (0..spec.n_patients)
        .into_par_iter()
        .map(|i| {
            let stem = slide_stem(i);
            let slide_seed = spec
                .seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add(i as u64 + 1);
            let truth = render_slide(
                spec,
                positive[i],
                slide_seed,
                &patient_id(i),
                &wsi_dir.join(format!("{stem}.tif")),
            )?;
            Ok((stem, truth))
        })
        .collect::<Result<_>>()?;

    let mut slide_table = String::from("PATIENT,FILENAME\n");
    let mut clini_table = format!("PATIENT,{SYNTH_TARGET_LABEL}\n");
    let mut labels = BTreeMap::new();
    for i in 0..spec.n_patients {
        let label = if positive[i] { "POS" } else { "NEG" };
        slide_table.push_str(&format!("{},{}\n", patient_id(i), slide_stem(i)));
        clini_table.push_str(&format!("{},{}\n", patient_id(i), label));
        labels.insert(patient_id(i), label.to_string());
    }
    fs::write(out_dir.join("slide_table.csv"), slide_table)?;
    fs::write(out_dir.join("clini_table.csv"), clini_table)?;

    let truth = SynthTruth {
        seed: spec.seed,
        target_label: SYNTH_TARGET_LABEL.into(),
        categories: SYNTH_CATEGORIES.iter().map(|s| s.to_string()).collect(),
        labels,
        slides: slides.into_iter().collect(),
    };
    fs::write(
        out_dir.join("truth.json"),
        serde_json::to_string_pretty(&truth)?,
    )?;
    Ok(truth)
}

const MASK_BG: u8 = 0;
const MASK_TISSUE: u8 = 1;
const MASK_SIGNAL: u8 = 2;

fn render_slide(
    spec: &SynthSpec,
    positive: bool,
    slide_seed: u64,
    _patient: &str,
    path: &Path,
) -> Result<SlideTruth> {
    let (w, h) = (spec.slide_width as usize, spec.slide_height as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(slide_seed);
    let mut mask = vec![MASK_BG; w * h];

    // elliptical tissue blobs
    let n_blobs = rng.gen_range(spec.blob_count.0..=spec.blob_count.1);
    let mut tissue_area = 0usize;
    for _ in 0..n_blobs {
        let cx = rng.gen_range(0.2..0.8) * w as f64;
        let cy = rng.gen_range(0.2..0.8) * h as f64;
        let rx = rng.gen_range(0.10..0.25) * w as f64;
        let ry = rng.gen_range(0.10..0.25) * h as f64;
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let (c, s) = (theta.cos(), theta.sin());
        let x0 = ((cx - rx.max(ry)).floor().max(0.0)) as usize;
        let x1 = ((cx + rx.max(ry)).ceil().min(w as f64)) as usize;
        let y0 = ((cy - rx.max(ry)).floor().max(0.0)) as usize;
        let y1 = ((cy + rx.max(ry)).ceil().min(h as f64)) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let u = (dx * c + dy * s) / rx;
                let v = (-dx * s + dy * c) / ry;
                if u * u + v * v <= 1.0 {
                    let m = &mut mask[y * w + x];
                    if *m == MASK_BG {
                        *m = MASK_TISSUE;
                        tissue_area += 1;
                    }
                }
            }
        }
    }

    // tile footprints on the modeling grid, in base pixels
    let target_mpp = spec.microns / TILE_PX as f64;
    let scale = target_mpp / spec.mpp;
    let plane_w = (w as f64 * spec.mpp / target_mpp).round() as u32;
    let plane_h = (h as f64 * spec.mpp / target_mpp).round() as u32;
    let cols = plane_w.div_ceil(TILE_PX);
    let rows = plane_h.div_ceil(TILE_PX);
    let tile_rect = |tx: u32, ty: u32| {
        let bx0 = ((tx * TILE_PX) as f64 * scale) as usize;
        let by0 = ((ty * TILE_PX) as f64 * scale) as usize;
        let bx1 = ((((tx + 1) * TILE_PX) as f64 * scale) as usize).min(w);
        let by1 = ((((ty + 1) * TILE_PX) as f64 * scale) as usize).min(h);
        (bx0, by0, bx1, by1)
    };

    // signal pools on positive slides: whole tile footprints over the most
    // tissue-rich tiles, so planted tiles are unambiguous in the truth mask
    if positive && tissue_area > 0 && spec.signal_strength > 0.0 {
        let full_area = (TILE_PX as f64 * scale).powi(2);
        let mut by_tissue: Vec<(u32, u32, f64)> = Vec::new();
        for ty in 0..rows {
            for tx in 0..cols {
                let (bx0, by0, bx1, by1) = tile_rect(tx, ty);
                let mut tissue = 0usize;
                for y in by0..by1 {
                    for x in bx0..bx1 {
                        if mask[y * w + x] != MASK_BG {
                            tissue += 1;
                        }
                    }
                }
                by_tissue.push((tx, ty, tissue as f64 / full_area));
            }
        }
        by_tissue.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0)));
        let eligible: Vec<(u32, u32)> = by_tissue
            .iter()
            .filter(|(_, _, f)| *f >= 0.5)
            .map(|&(x, y, _)| (x, y))
            .collect();
        let (pool, n_signal) = if eligible.is_empty() {
            // tissue blobs all smaller than a tile: pool around the densest
            (vec![(by_tissue[0].0, by_tissue[0].1)], 1)
        } else {
            let n = ((eligible.len() as f64 * spec.signal_strength).round() as usize)
                .clamp(1, eligible.len());
            (eligible, n)
        };
        let mut picked = pool.clone();
        use rand::seq::SliceRandom;
        picked.shuffle(&mut rng);
        for &(tx, ty) in picked.iter().take(n_signal) {
            let (bx0, by0, bx1, by1) = tile_rect(tx, ty);
            for y in by0..by1 {
                for x in bx0..bx1 {
                    mask[y * w + x] = MASK_SIGNAL;
                }
            }
        }
    }

    // textures: eosinophilic pink tissue, saturated high-contrast signal.
    // The signal noise is blocky (12 px cells) so its contrast — and with it
    // the region's edge density and embedding signature — survives the
    // downscale to the modeling resolution; per-pixel noise would average
    // away. Block offsets are hashed from the slide seed for determinism.
    // A strong luminance offset shared across channels plus a weaker
    // independent per-channel offset: the former creates edges, the latter
    // decorrelates the channels, both making the region's embedding clearly
    // distinct from tissue.
    const SIGNAL_CELL: usize = 12;
    let signal_noise = |x: usize, y: usize, ch: u64| -> i32 {
        let mut h = slide_seed ^ 0x9e37_79b9_7f4a_7c15;
        for v in [(x / SIGNAL_CELL) as u64, (y / SIGNAL_CELL) as u64, ch] {
            h ^= v.wrapping_mul(0x100_0000_01b3);
            h = h.rotate_left(23).wrapping_mul(0xff51_afd7_ed55_8ccd);
        }
        if ch == 3 {
            (h % 91) as i32 - 45
        } else {
            (h % 51) as i32 - 25
        }
    };
    let mut rgb = vec![255u8; w * h * 3];
    let mut noise_rng = ChaCha8Rng::seed_from_u64(slide_seed ^ 0x5157_0a11);
    for i in 0..w * h {
        match mask[i] {
            // dark enough that tissue passes the stain estimator's
            // optical-density floor alongside the nuclei
            MASK_TISSUE => {
                let base = [170, 120, 145];
                for ch in 0..3 {
                    let n: i32 = noise_rng.gen_range(-12..=12);
                    rgb[i * 3 + ch] = (base[ch] + n).clamp(0, 255) as u8;
                }
            }
            MASK_SIGNAL => {
                let (x, y) = (i % w, i / w);
                let base = [115, 130, 215];
                let shared = signal_noise(x, y, 3);
                for ch in 0..3 {
                    let n = shared + signal_noise(x, y, ch as u64);
                    // the blue channel stays bright so every signal pixel
                    // keeps a blue optical density below the stain
                    // estimator's floor and is excluded from estimation
                    let lo = if ch == 2 { 180 } else { 0 };
                    rgb[i * 3 + ch] = (base[ch] + n).clamp(lo, 255) as u8;
                }
            }
            _ => {}
        }
    }

    // nuclei: dark dots dense enough to leave Canny edges at the modeling
    // resolution
    let n_nuclei = tissue_area / 576;
    for _ in 0..n_nuclei {
        let x = rng.gen_range(0..w);
        let y = rng.gen_range(0..h);
        if mask[y * w + x] == MASK_BG {
            continue;
        }
        let r = rng.gen_range(4..8) as i64;
        let color = [
            70 + rng.gen_range(0..20),
            45 + rng.gen_range(0..15),
            115 + rng.gen_range(0..25),
        ];
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let (px, py) = (x as i64 + dx, y as i64 + dy);
                if px < 0 || py < 0 || px >= w as i64 || py >= h as i64 {
                    continue;
                }
                let idx = (py as usize * w + px as usize) * 3;
                for ch in 0..3 {
                    rgb[idx + ch] = color[ch];
                }
            }
        }
    }

    // occasional pen-mark stroke across the slide
    if rng.gen::<f64>() < spec.pen_fraction {
        let y_start = rng.gen_range(0.1..0.9) * h as f64;
        let slope = rng.gen_range(-0.3..0.3);
        let thickness = rng.gen_range(20..40) as i64;
        let color = [20u8, 70, 160];
        for x in 0..w {
            let yc = (y_start + slope * x as f64) as i64;
            for dy in -thickness..=thickness {
                let y = yc + dy;
                if y < 0 || y >= h as i64 {
                    continue;
                }
                let idx = (y as usize * w + x) * 3;
                for ch in 0..3 {
                    rgb[idx + ch] = color[ch];
                }
            }
        }
    }

    write_tiled_tiff(path, &rgb, w as u32, h as u32, spec.mpp)?;

    // truth tiles on the modeling grid: a tile counts as signal when most of
    // its covered area carries the signal texture
    let mut signal_tiles = Vec::new();
    for ty in 0..rows {
        for tx in 0..cols {
            let (bx0, by0, bx1, by1) = tile_rect(tx, ty);
            let total = ((bx1 - bx0) * (by1 - by0)).max(1) as f64;
            let mut signal = 0usize;
            for y in by0..by1 {
                for x in bx0..bx1 {
                    if mask[y * w + x] == MASK_SIGNAL {
                        signal += 1;
                    }
                }
            }
            if signal as f64 / total >= 0.5 {
                signal_tiles.push((tx * TILE_PX, ty * TILE_PX));
            }
        }
    }
    if positive && spec.signal_strength > 0.0 {
        assert!(
            !signal_tiles.is_empty(),
            "positive slide must plant at least one signal tile"
        );
    }
    Ok(SlideTruth {
        patient: _patient.to_string(),
        grid_cols: cols,
        grid_rows: rows,
        signal_tiles,
    })
}

const TIFF_TILE: u32 = 256;

/// Minimal classic little-endian TIFF writer: one full-resolution image,
/// uncompressed 256x256 RGB tiles, resolution tags in pixels per centimeter.
pub fn write_tiled_tiff(path: &Path, rgb: &[u8], w: u32, h: u32, mpp: f64) -> Result<()> {
    assert_eq!(rgb.len(), (w as usize) * (h as usize) * 3);
    let cols = w.div_ceil(TIFF_TILE);
    let rows = h.div_ceil(TIFF_TILE);
    let n_tiles = (cols * rows) as usize;
    let tile_bytes = (TIFF_TILE * TIFF_TILE * 3) as usize;

    let mut out: Vec<u8> = Vec::with_capacity(8 + n_tiles * tile_bytes + 512);
    out.extend_from_slice(&[0x49, 0x49, 42, 0, 0, 0, 0, 0]); // IFD offset patched below

    // tile data first; edge tiles padded with white
    let mut offsets = Vec::with_capacity(n_tiles);
    for ty in 0..rows {
        for tx in 0..cols {
            offsets.push(out.len() as u32);
            let mut tile = vec![255u8; tile_bytes];
            let x0 = tx * TIFF_TILE;
            let y0 = ty * TIFF_TILE;
            for y in 0..TIFF_TILE.min(h - y0) {
                let src = (((y0 + y) * w + x0) * 3) as usize;
                let width = TIFF_TILE.min(w - x0) as usize * 3;
                let dst = (y * TIFF_TILE * 3) as usize;
                tile[dst..dst + width].copy_from_slice(&rgb[src..src + width]);
            }
            out.extend_from_slice(&tile);
        }
    }

    // external value arrays
    let bits_offset = out.len() as u32;
    for _ in 0..3 {
        out.extend_from_slice(&8u16.to_le_bytes());
    }
    let res_offset = out.len() as u32;
    // pixels per centimeter as a rational with a fixed denominator
    let denom = 10_000u32;
    let num = (10_000.0 / mpp * denom as f64).round() as u32;
    out.extend_from_slice(&num.to_le_bytes());
    out.extend_from_slice(&denom.to_le_bytes());
    let offsets_offset = out.len() as u32;
    for o in &offsets {
        out.extend_from_slice(&o.to_le_bytes());
    }
    let counts_offset = out.len() as u32;
    for _ in 0..n_tiles {
        out.extend_from_slice(&(tile_bytes as u32).to_le_bytes());
    }

    let ifd_offset = out.len() as u32;
    out[4..8].copy_from_slice(&ifd_offset.to_le_bytes());

    struct Entry {
        tag: u16,
        kind: u16,
        count: u32,
        value: u32,
    }
    let single = |tag, kind, value| Entry {
        tag,
        kind,
        count: 1,
        value,
    };
    const SHORT: u16 = 3;
    const LONG: u16 = 4;
    const RATIONAL: u16 = 5;
    let entries = [
        single(256, LONG, w),
        single(257, LONG, h),
        Entry {
            tag: 258,
            kind: SHORT,
            count: 3,
            value: bits_offset,
        },
        single(259, SHORT, 1), // no compression
        single(262, SHORT, 2), // RGB
        single(277, SHORT, 3),
        single(282, RATIONAL, res_offset),
        single(283, RATIONAL, res_offset),
        single(284, SHORT, 1), // chunky planes
        single(296, SHORT, 3), // centimeter
        single(322, LONG, TIFF_TILE),
        single(323, LONG, TIFF_TILE),
        Entry {
            tag: 324,
            kind: LONG,
            count: n_tiles as u32,
            value: offsets_offset,
        },
        Entry {
            tag: 325,
            kind: LONG,
            count: n_tiles as u32,
            value: counts_offset,
        },
    ];
    out.extend_from_slice(&(entries.len() as u16).to_le_bytes());
    for e in &entries {
        out.extend_from_slice(&e.tag.to_le_bytes());
        out.extend_from_slice(&e.kind.to_le_bytes());
        out.extend_from_slice(&e.count.to_le_bytes());
        if e.kind == SHORT && e.count == 1 {
            out.extend_from_slice(&(e.value as u16).to_le_bytes());
            out.extend_from_slice(&[0, 0]);
        } else {
            out.extend_from_slice(&e.value.to_le_bytes());
        }
    }
    out.extend_from_slice(&0u32.to_le_bytes()); // no next IFD

    fs::write(path, out)?;
    Ok(())
}

impl SynthTruth {
    fn label_index(&self, patient: &str) -> Result<usize> {
        let label = self
            .labels
            .get(patient)
            .ok_or_else(|| StampError::CohortMismatch(format!("unknown patient '{patient}'")))?;
        self.categories
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| StampError::CohortMismatch(format!("unknown label '{label}'")))
    }

    /// AUROC of positive-class scores against the true labels. Every truth
    /// patient must be scored exactly once.
    pub fn evaluate_predictions(&self, scores: &[(String, f64)]) -> Result<f64> {
        if scores.len() != self.labels.len() {
            return Err(StampError::CohortMismatch(format!(
                "{} scored patients vs {} in the truth file",
                scores.len(),
                self.labels.len()
            )));
        }
        let mut sc = crate::stats::ScoredCohort {
            scores: Vec::new(),
            labels: Vec::new(),
        };
        for (patient, score) in scores {
            sc.scores.push(*score);
            sc.labels.push(self.label_index(patient)? == 0);
        }
        crate::stats::auroc(&sc)
    }

    /// Fraction of the given tile coordinates that fall on planted signal
    /// tiles of `slide`.
    pub fn signal_overlap(&self, slide: &str, coords: &[(u32, u32)]) -> Result<f64> {
        let truth = self
            .slides
            .get(slide)
            .ok_or_else(|| StampError::CohortMismatch(format!("unknown slide '{slide}'")))?;
        if coords.is_empty() {
            return Ok(0.0);
        }
        let planted: std::collections::BTreeSet<(u32, u32)> =
            truth.signal_tiles.iter().copied().collect();
        let hits = coords.iter().filter(|c| planted.contains(c)).count();
        Ok(hits as f64 / coords.len() as f64)
    }
}

pub fn load_truth(path: &Path) -> Result<SynthTruth> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qc::{qc_tile, QcThresholds, QcVerdict};
    use crate::slide::{open_slide, plan_tile_grid, SlideReader, TileSpec};

    fn small_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            n_patients: 4,
            slide_width: 1792,
            slide_height: 1792,
            blob_count: (2, 3),
            signal_strength: 0.5,
            pen_fraction: 0.0,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn bookkeeping_labels_tables_and_slides() {
        let dir = tempfile::tempdir().unwrap();
        let truth = generate_cohort(&small_spec(7), dir.path()).unwrap();
        assert_eq!(truth.labels.len(), 4);
        let n_pos = truth.labels.values().filter(|l| *l == "POS").count();
        assert_eq!(n_pos, 2);
        let slide_table = fs::read_to_string(dir.path().join("slide_table.csv")).unwrap();
        assert_eq!(slide_table.lines().count(), 5);
        let clini = fs::read_to_string(dir.path().join("clini_table.csv")).unwrap();
        assert!(clini.starts_with("PATIENT,isSignal\n"));
        for i in 0..4 {
            assert!(dir.path().join(format!("wsi/slide_{i:03}.tif")).exists());
        }
    }

    #[test]
    fn truth_masks_follow_labels() {
        let dir = tempfile::tempdir().unwrap();
        let truth = generate_cohort(&small_spec(11), dir.path()).unwrap();
        for (stem, slide) in &truth.slides {
            let label = &truth.labels[&slide.patient];
            if label == "POS" {
                assert!(!slide.signal_tiles.is_empty(), "{stem} has no signal tiles");
            } else {
                assert!(slide.signal_tiles.is_empty(), "{stem} should have none");
            }
        }
    }

    #[test]
    fn generation_is_byte_reproducible() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let t1 = generate_cohort(&small_spec(3), d1.path()).unwrap();
        let t2 = generate_cohort(&small_spec(3), d2.path()).unwrap();
        assert_eq!(t1, t2);
        for name in ["wsi/slide_000.tif", "slide_table.csv", "clini_table.csv", "truth.json"] {
            assert_eq!(
                fs::read(d1.path().join(name)).unwrap(),
                fs::read(d2.path().join(name)).unwrap(),
                "{name} differs"
            );
        }
        let d3 = tempfile::tempdir().unwrap();
        generate_cohort(&small_spec(4), d3.path()).unwrap();
        assert_ne!(
            fs::read(d1.path().join("wsi/slide_000.tif")).unwrap(),
            fs::read(d3.path().join("wsi/slide_000.tif")).unwrap()
        );
    }

    #[test]
    fn slides_open_with_correct_resolution_and_pass_qc_on_signal_tiles() {
        let dir = tempfile::tempdir().unwrap();
        let truth = generate_cohort(&small_spec(7), dir.path()).unwrap();
        let (stem, slide_truth) = truth
            .slides
            .iter()
            .find(|(_, s)| !s.signal_tiles.is_empty())
            .expect("a positive slide exists");
        let handle = open_slide(&dir.path().join(format!("wsi/{stem}.tif"))).unwrap();
        assert!((handle.mpp_base - 0.5).abs() < 1e-9);
        assert_eq!(handle.base_width_px, 1792);
        let grid = plan_tile_grid(&handle, &TileSpec::new(256.0)).unwrap();
        assert_eq!(grid.cols, slide_truth.grid_cols);
        assert_eq!(grid.rows, slide_truth.grid_rows);
        let mut reader = SlideReader::open(&handle).unwrap();
        for &(x, y) in &slide_truth.signal_tiles {
            let tile = reader.read_tile(&handle, &grid, x, y).unwrap();
            let outcome = qc_tile(&tile, &QcThresholds::default());
            assert_eq!(
                outcome.verdict,
                QcVerdict::Accepted,
                "signal tile at ({x},{y}) failed QC: {outcome:?}"
            );
        }
    }

    #[test]
    fn evaluation_scores_and_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let truth = generate_cohort(&small_spec(9), dir.path()).unwrap();
        // perfect scores: POS patients get 1.0
        let scores: Vec<(String, f64)> = truth
            .labels
            .iter()
            .map(|(p, l)| (p.clone(), if l == "POS" { 1.0 } else { 0.0 }))
            .collect();
        assert_eq!(truth.evaluate_predictions(&scores).unwrap(), 1.0);
        let wrong: Vec<(String, f64)> = vec![("NOBODY".into(), 1.0); 4];
        assert!(matches!(
            truth.evaluate_predictions(&wrong),
            Err(StampError::CohortMismatch(_))
        ));
        let slide = truth.slides.keys().next().unwrap();
        assert!(matches!(
            truth.signal_overlap("missing", &[(0, 0)]),
            Err(StampError::CohortMismatch(_))
        ));
        let _ = truth.signal_overlap(slide, &[(0, 0)]).unwrap();
    }
}
