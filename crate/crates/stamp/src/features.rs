//! Tile feature extraction and the on-disk HDF5 feature store.
//!
//! One `.h5` file per slide: datasets `feats` (float32, n x d) and `coords`
//! (int32, n x 2), root attributes `extractor`, `tile_px`, `target_mpp`
//! and `norm`.

use std::path::Path;

use hdf5::types::VarLenUnicode;
use ndarray::{Array2, Axis};

use crate::error::{Result, StampError};
use crate::qc;
use crate::slide::{Tile, TILE_PX};

pub const TOY_EXTRACTOR_ID: &str = "toy-v1-d48";
pub const TOY_DIM: usize = 48;
const BATCH_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractorDescriptor {
    pub id: String,
    pub dim: usize,
}

/// A tile embedding backend. Implementations must be deterministic for the
/// toy backend and safe to call from multiple workers.
pub trait TileExtractor: Send + Sync {
    fn descriptor(&self) -> &ExtractorDescriptor;
    /// Embed a batch of 224x224x3 tiles; one row per tile, input order.
    fn extract(&self, tiles: &[Tile]) -> Result<Array2<f32>>;
}

/// Per-slide feature matrix with tile coordinates and extractor identity.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub feats: Array2<f32>,
    pub coords: Array2<i32>,
    pub extractor_id: String,
    pub tile_px: u32,
    pub target_mpp: f64,
    pub norm: String,
}

impl FeatureMatrix {
    pub fn n_tiles(&self) -> usize {
        self.feats.nrows()
    }

    pub fn dim(&self) -> usize {
        self.feats.ncols()
    }
}

/// Feature directory name for a given normalization mode and extractor.
pub fn feature_dir_name(norm: bool, extractor_id: &str) -> String {
    format!("STAMP_{}_{}", if norm { "macenko" } else { "raw" }, extractor_id)
}

/// Deterministic hand-crafted 48-dim embedding used as the default backend.
#[derive(Debug)]
pub struct ToyExtractor {
    descriptor: ExtractorDescriptor,
}

impl Default for ToyExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl ToyExtractor {
    pub fn new() -> Self {
        Self {
            descriptor: ExtractorDescriptor {
                id: TOY_EXTRACTOR_ID.to_string(),
                dim: TOY_DIM,
            },
        }
    }
}

fn moments(values: impl Iterator<Item = f64> + Clone, n: f64) -> (f64, f64, f64) {
    let mean = values.clone().sum::<f64>() / n;
    let var = values.clone().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let skew = if std > 1e-12 {
        values.map(|v| ((v - mean) / std).powi(3)).sum::<f64>() / n
    } else {
        0.0
    };
    (mean, std, skew)
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va > 1e-12 && vb > 1e-12 {
        cov / (va.sqrt() * vb.sqrt())
    } else {
        0.0
    }
}

/// Feature layout (48 values, each scaled to roughly [0, 1]):
/// 0-8   per-channel mean, std, skew
/// 9-32  8-bin histogram per channel
/// 33    Canny edge fraction
/// 34-37 2x2-block mean brightness
/// 38-39 Sobel gradient-magnitude mean, std
/// 40-41 saturation mean, std
/// 42-43 hue circular mean, resultant length
/// 44-47 channel correlations: RG, RB, GB, gray-saturation
pub fn toy_extract(tile: &Tile) -> Vec<f32> {
    let w = TILE_PX as usize;
    let n = (w * w) as f64;
    let mut out = Vec::with_capacity(TOY_DIM);

    let channel = |c: usize| tile.rgb.iter().skip(c).step_by(3).map(|&v| v as f64);
    for c in 0..3 {
        let (mean, std, skew) = moments(channel(c), n);
        out.push((mean / 255.0) as f32);
        out.push((std / 127.5) as f32);
        out.push((0.5 + 0.5 * skew / (1.0 + skew.abs())) as f32);
    }
    for c in 0..3 {
        let mut hist = [0f32; 8];
        for v in channel(c) {
            hist[((v as usize) >> 5).min(7)] += 1.0;
        }
        out.extend(hist.iter().map(|h| h / n as f32));
    }

    out.push(qc::edge_fraction(&tile.rgb, w, w) as f32);

    let gray = qc::grayscale(&tile.rgb, w, w);
    let half = w / 2;
    for by in 0..2 {
        for bx in 0..2 {
            let mut sum = 0f64;
            for y in 0..half {
                for x in 0..half {
                    sum += gray[(by * half + y) * w + bx * half + x] as f64;
                }
            }
            out.push((sum / (half * half) as f64 / 255.0) as f32);
        }
    }

    // Sobel gradient magnitude on the raw grayscale plane
    let at = |x: i64, y: i64| {
        gray[(y.clamp(0, w as i64 - 1) as usize) * w + x.clamp(0, w as i64 - 1) as usize] as f64
    };
    let mut mags = Vec::with_capacity(w * w);
    for y in 0..w as i64 {
        for x in 0..w as i64 {
            let gx = -at(x - 1, y - 1) - 2.0 * at(x - 1, y) - at(x - 1, y + 1)
                + at(x + 1, y - 1)
                + 2.0 * at(x + 1, y)
                + at(x + 1, y + 1);
            let gy = -at(x - 1, y - 1) - 2.0 * at(x, y - 1) - at(x + 1, y - 1)
                + at(x - 1, y + 1)
                + 2.0 * at(x, y + 1)
                + at(x + 1, y + 1);
            mags.push((gx * gx + gy * gy).sqrt() / 1442.5);
        }
    }
    let (gm, gs, _) = moments(mags.iter().copied(), n);
    out.push(gm as f32);
    out.push(gs as f32);

    let mut sats = Vec::with_capacity(w * w);
    let mut hue_cos = 0f64;
    let mut hue_sin = 0f64;
    for px in tile.rgb.chunks_exact(3) {
        let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let sat = if max > 0.0 { (max - min) / max } else { 0.0 };
        sats.push(sat);
        let delta = max - min;
        let hue = if delta <= 0.0 {
            0.0
        } else if max == r {
            60.0 * ((g - b) / delta).rem_euclid(6.0)
        } else if max == g {
            60.0 * ((b - r) / delta + 2.0)
        } else {
            60.0 * ((r - g) / delta + 4.0)
        };
        let rad = hue.to_radians();
        hue_cos += rad.cos();
        hue_sin += rad.sin();
    }
    let (sm, ss, _) = moments(sats.iter().copied(), n);
    out.push(sm as f32);
    out.push(ss as f32);
    let resultant = (hue_cos * hue_cos + hue_sin * hue_sin).sqrt() / n;
    let mean_angle = hue_sin.atan2(hue_cos).rem_euclid(std::f64::consts::TAU);
    out.push((mean_angle / std::f64::consts::TAU) as f32);
    out.push(resultant as f32);

    let reds: Vec<f64> = channel(0).collect();
    let greens: Vec<f64> = channel(1).collect();
    let blues: Vec<f64> = channel(2).collect();
    let grayd: Vec<f64> = gray.iter().map(|&v| v as f64).collect();
    for r in [
        correlation(&reds, &greens),
        correlation(&reds, &blues),
        correlation(&greens, &blues),
        correlation(&grayd, &sats),
    ] {
        out.push(((r + 1.0) / 2.0) as f32);
    }

    debug_assert_eq!(out.len(), TOY_DIM);
    out
}

impl TileExtractor for ToyExtractor {
    fn descriptor(&self) -> &ExtractorDescriptor {
        &self.descriptor
    }

    fn extract(&self, tiles: &[Tile]) -> Result<Array2<f32>> {
        let mut feats = Array2::zeros((tiles.len(), TOY_DIM));
        for (i, tile) in tiles.iter().enumerate() {
            let v = toy_extract(tile);
            feats.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
        }
        Ok(feats)
    }
}

/// Run the extractor over ordered tiles in fixed-size batches and assemble
/// the per-slide feature matrix.
pub fn extract_batch(
    tiles: &[Tile],
    extractor: &dyn TileExtractor,
    target_mpp: f64,
    norm: &str,
) -> Result<FeatureMatrix> {
    assert!(!tiles.is_empty());
    let desc = extractor.descriptor().clone();
    let mut feats = Array2::zeros((0, desc.dim));
    for chunk in tiles.chunks(BATCH_SIZE) {
        let batch = extractor.extract(chunk)?;
        if batch.ncols() != desc.dim {
            return Err(StampError::DimensionMismatch {
                expected: desc.dim,
                got: batch.ncols(),
            });
        }
        feats.append(Axis(0), batch.view()).expect("row append");
    }
    for v in feats.iter() {
        if !v.is_finite() {
            return Err(StampError::BackendFailure(
                "extractor produced non-finite features".into(),
            ));
        }
    }
    let mut coords = Array2::zeros((tiles.len(), 2));
    for (i, t) in tiles.iter().enumerate() {
        coords[[i, 0]] = t.x as i32;
        coords[[i, 1]] = t.y as i32;
    }
    Ok(FeatureMatrix {
        feats,
        coords,
        extractor_id: desc.id,
        tile_px: TILE_PX,
        target_mpp,
        norm: norm.to_string(),
    })
}

fn str_attr(obj: &hdf5::Dataset, name: &str, value: &str) -> Result<()> {
    let attr = obj.new_attr::<VarLenUnicode>().create(name)?;
    let v: VarLenUnicode = value
        .parse()
        .map_err(|_| StampError::BackendFailure(format!("invalid attribute string '{value}'")))?;
    attr.write_scalar(&v)?;
    Ok(())
}

pub fn write_feature_file(path: &Path, fm: &FeatureMatrix) -> Result<()> {
    let mut builder = hdf5::File::with_options();
    builder.with_fcpl(|p| p.obj_track_times(false));
    let file = builder.create(path)?;
    let feats = file.new_dataset_builder().with_data(&fm.feats).create("feats")?;
    file.new_dataset_builder().with_data(&fm.coords).create("coords")?;
    str_attr(&feats, "extractor", &fm.extractor_id)?;
    str_attr(&feats, "norm", &fm.norm)?;
    feats.new_attr::<u32>().create("tile_px")?.write_scalar(&fm.tile_px)?;
    feats
        .new_attr::<f64>()
        .create("target_mpp")?
        .write_scalar(&fm.target_mpp)?;
    file.flush()?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<FeatureMatrix> {
    let malformed = |detail: String| StampError::MalformedFeatureFile {
        path: path.to_path_buf(),
        detail,
    };
    let file = hdf5::File::open(path).map_err(|e| malformed(e.to_string()))?;
    let feats_ds = file
        .dataset("feats")
        .map_err(|_| malformed("missing 'feats' dataset".into()))?;
    let feats: Array2<f32> = feats_ds
        .read_2d()
        .map_err(|e| malformed(format!("'feats' not a 2-d float dataset: {e}")))?;
    let coords: Array2<i32> = file
        .dataset("coords")
        .map_err(|_| malformed("missing 'coords' dataset".into()))?
        .read_2d()
        .map_err(|e| malformed(format!("'coords' not a 2-d int dataset: {e}")))?;
    if coords.nrows() != feats.nrows() || coords.ncols() != 2 {
        return Err(malformed(format!(
            "coords shape {:?} does not match feats rows {}",
            coords.shape(),
            feats.nrows()
        )));
    }
    let read_str = |name: &str| -> Result<String> {
        let attr = feats_ds
            .attr(name)
            .map_err(|_| malformed(format!("missing '{name}' attribute")))?;
        let v: VarLenUnicode = attr
            .read_scalar()
            .map_err(|e| malformed(format!("attribute '{name}': {e}")))?;
        Ok(v.as_str().to_string())
    };
    let extractor_id = read_str("extractor")?;
    let norm = read_str("norm")?;
    let tile_px: u32 = feats_ds
        .attr("tile_px")
        .and_then(|a| a.read_scalar())
        .map_err(|e| malformed(format!("attribute 'tile_px': {e}")))?;
    let target_mpp: f64 = feats_ds
        .attr("target_mpp")
        .and_then(|a| a.read_scalar())
        .map_err(|e| malformed(format!("attribute 'target_mpp': {e}")))?;
    Ok(FeatureMatrix {
        feats,
        coords,
        extractor_id,
        tile_px,
        target_mpp,
        norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tile_from_fn(f: impl Fn(u32, u32) -> [u8; 3]) -> Tile {
        let mut rgb = Vec::with_capacity((TILE_PX * TILE_PX * 3) as usize);
        for y in 0..TILE_PX {
            for x in 0..TILE_PX {
                rgb.extend_from_slice(&f(x, y));
            }
        }
        Tile::new(0, 0, rgb)
    }

    #[test]
    fn all_black_tile_features() {
        let v = toy_extract(&tile_from_fn(|_, _| [0, 0, 0]));
        // means and stds zero
        for c in 0..3 {
            assert_eq!(v[c * 3], 0.0);
            assert_eq!(v[c * 3 + 1], 0.0);
        }
        // all histogram mass in bin 0
        for c in 0..3 {
            assert_eq!(v[9 + c * 8], 1.0);
            assert!(v[10 + c * 8..17 + c * 8 - 7 + 7].iter().all(|&h| h >= 0.0));
        }
        assert_eq!(v.len(), TOY_DIM);
    }

    #[test]
    fn toy_extractor_is_deterministic() {
        let tile = tile_from_fn(|x, y| [(x % 251) as u8, (y % 247) as u8, ((x + y) % 239) as u8]);
        assert_eq!(toy_extract(&tile), toy_extract(&tile));
    }

    #[test]
    fn channel_statistics_are_rotation_invariant() {
        let f = |x: u32, y: u32| -> [u8; 3] {
            [
                ((x * 31 + y * 17) % 255) as u8,
                ((x * 13 + y * 7) % 255) as u8,
                ((x + y) % 255) as u8,
            ]
        };
        let tile = tile_from_fn(f);
        let rotated = tile_from_fn(|x, y| f(y, TILE_PX - 1 - x));
        let a = toy_extract(&tile);
        let b = toy_extract(&rotated);
        // independent-statistics oracle: per-channel moments and histograms
        // are order-free, so the first 33 entries must match bit-exact
        assert_eq!(&a[..33], &b[..33]);
    }

    #[test]
    fn extract_batch_shapes_and_order() {
        let tiles: Vec<Tile> = (0..5)
            .map(|i| {
                let mut t = tile_from_fn(move |_, _| [(i * 40) as u8, 10, 200]);
                t.x = i * TILE_PX;
                t
            })
            .collect();
        let fm = extract_batch(&tiles, &ToyExtractor::new(), 256.0 / 224.0, "macenko").unwrap();
        assert_eq!(fm.feats.shape(), &[5, TOY_DIM]);
        assert_eq!(fm.coords[[3, 0]], 3 * TILE_PX as i32);
        assert_eq!(fm.extractor_id, TOY_EXTRACTOR_ID);
    }

    struct BadDimExtractor(ExtractorDescriptor);
    impl TileExtractor for BadDimExtractor {
        fn descriptor(&self) -> &ExtractorDescriptor {
            &self.0
        }
        fn extract(&self, tiles: &[Tile]) -> Result<Array2<f32>> {
            Ok(Array2::zeros((tiles.len(), 512)))
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let tiles = vec![tile_from_fn(|_, _| [1, 2, 3])];
        let bad = BadDimExtractor(ExtractorDescriptor {
            id: "fake-768".into(),
            dim: 768,
        });
        match extract_batch(&tiles, &bad, 1.0, "raw") {
            Err(StampError::DimensionMismatch { expected: 768, got: 512 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("slide_a.h5");
        let fm = FeatureMatrix {
            feats: array![[1.0f32, 2.5, -3.25], [0.125, 4.0, 5.5], [7.0, 8.0, 9.0]],
            coords: array![[0, 0], [224, 0], [0, 224]],
            extractor_id: TOY_EXTRACTOR_ID.into(),
            tile_px: TILE_PX,
            target_mpp: 256.0 / 224.0,
            norm: "macenko".into(),
        };
        write_feature_file(&path, &fm).unwrap();
        let back = read_feature_file(&path).unwrap();
        assert_eq!(back, fm);
    }

    #[test]
    fn feature_file_write_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let fm = FeatureMatrix {
            feats: Array2::from_shape_fn((10, 4), |(i, j)| (i * 4 + j) as f32 * 0.5),
            coords: Array2::from_shape_fn((10, 2), |(i, j)| (i * 2 + j) as i32),
            extractor_id: TOY_EXTRACTOR_ID.into(),
            tile_px: TILE_PX,
            target_mpp: 0.5,
            norm: "raw".into(),
        };
        let p1 = dir.path().join("a.h5");
        let p2 = dir.path().join("b.h5");
        write_feature_file(&p1, &fm).unwrap();
        write_feature_file(&p2, &fm).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn missing_coords_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.h5");
        {
            let file = hdf5::File::create(&path).unwrap();
            file.new_dataset_builder()
                .with_data(&array![[1.0f32, 2.0]])
                .create("feats")
                .unwrap();
        }
        match read_feature_file(&path) {
            Err(StampError::MalformedFeatureFile { detail, .. }) => {
                assert!(detail.contains("coords"))
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn feature_dir_naming() {
        assert_eq!(
            feature_dir_name(true, "xiyuewang-ctranspath-7c998680"),
            "STAMP_macenko_xiyuewang-ctranspath-7c998680"
        );
        assert_eq!(feature_dir_name(false, TOY_EXTRACTOR_ID), "STAMP_raw_toy-v1-d48");
    }
}
