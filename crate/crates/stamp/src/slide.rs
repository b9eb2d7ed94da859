//! Pyramidal slide access: metadata, tile-grid planning and region reads.
//!
//! Slides are read through the TIFF chunk API so memory stays bounded by the
//! decoded chunks a tile touches, never the full plane.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use tiff::decoder::{Decoder, DecodingResult};
use tiff::tags::Tag;

use crate::error::{Result, StampError};

/// Fixed tile edge length in pixels.
pub const TILE_PX: u32 = 224;

#[derive(Debug, Clone, PartialEq)]
pub struct LevelInfo {
    pub downsample: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone)]
pub struct SlideHandle {
    pub path: PathBuf,
    pub base_width_px: u32,
    pub base_height_px: u32,
    pub mpp_base: f64,
    pub levels: Vec<LevelInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileSpec {
    /// Physical edge length of a tile in microns.
    pub microns: f64,
}

impl TileSpec {
    pub fn new(microns: f64) -> Self {
        Self { microns }
    }

    pub fn target_mpp(&self) -> f64 {
        self.microns / TILE_PX as f64
    }
}

/// Non-overlapping 224-px tile grid over the target-MPP plane.
#[derive(Debug, Clone)]
pub struct TileGrid {
    pub plane_w: u32,
    pub plane_h: u32,
    pub cols: u32,
    pub rows: u32,
    pub target_mpp: f64,
    /// target_mpp / mpp_base, >= 1.
    pub ratio: f64,
}

impl TileGrid {
    pub fn n_tiles(&self) -> usize {
        self.cols as usize * self.rows as usize
    }

    /// Tile top-left coordinates in target-MPP pixel space, row-major.
    pub fn coords(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let cols = self.cols;
        (0..self.rows).flat_map(move |r| (0..cols).map(move |c| (c * TILE_PX, r * TILE_PX)))
    }
}

/// A 224x224 RGB tile with its top-left coordinate in target-MPP space.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub x: u32,
    pub y: u32,
    pub rgb: Vec<u8>,
}

impl Tile {
    pub fn new(x: u32, y: u32, rgb: Vec<u8>) -> Self {
        assert_eq!(rgb.len(), (TILE_PX * TILE_PX * 3) as usize);
        Self { x, y, rgb }
    }
}

const SUPPORTED_EXTENSIONS: &[&str] = &["tif", "tiff", "svs"];

fn mpp_from_tags<R: std::io::Read + std::io::Seek>(
    decoder: &mut Decoder<R>,
) -> Result<Option<f64>> {
    let res = match decoder.find_tag(Tag::XResolution) {
        Ok(Some(tiff::decoder::ifd::Value::Rational(num, den))) if den != 0 && num != 0 => {
            num as f64 / den as f64
        }
        _ => return Ok(None),
    };
    let unit = decoder
        .find_tag(Tag::ResolutionUnit)
        .ok()
        .flatten()
        .and_then(|v| v.into_u16().ok())
        .unwrap_or(2);
    let um_per_unit = match unit {
        2 => 25_400.0, // inch
        3 => 10_000.0, // centimeter
        _ => return Ok(None),
    };
    Ok(Some(um_per_unit / res))
}

/// Open a slide and validate its metadata. The MPP is read from the
/// resolution tags, never estimated.
pub fn open_slide(path: &Path) -> Result<SlideHandle> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    if !SUPPORTED_EXTENSIONS.contains(&ext.as_str()) {
        return Err(StampError::UnsupportedFormat(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| StampError::CorruptFile {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut decoder = Decoder::new(BufReader::new(file)).map_err(|e| StampError::CorruptFile {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let (base_w, base_h) = decoder.dimensions().map_err(|e| StampError::CorruptFile {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mpp_base = mpp_from_tags(&mut decoder)?
        .ok_or_else(|| StampError::MissingResolution(path.to_path_buf()))?;
    if !(mpp_base.is_finite() && mpp_base > 0.0) {
        return Err(StampError::MissingResolution(path.to_path_buf()));
    }

    let mut levels = vec![LevelInfo {
        downsample: 1.0,
        width: base_w,
        height: base_h,
    }];
    while decoder.more_images() {
        if decoder.next_image().is_err() {
            break;
        }
        if let Ok((w, h)) = decoder.dimensions() {
            if w == 0 || h == 0 || w > base_w {
                continue;
            }
            levels.push(LevelInfo {
                downsample: base_w as f64 / w as f64,
                width: w,
                height: h,
            });
        }
    }
    levels.sort_by(|a, b| a.downsample.partial_cmp(&b.downsample).unwrap());

    Ok(SlideHandle {
        path: path.to_path_buf(),
        base_width_px: base_w,
        base_height_px: base_h,
        mpp_base,
        levels,
    })
}

/// Plan the tile grid covering the full target-MPP plane.
pub fn plan_tile_grid(handle: &SlideHandle, spec: &TileSpec) -> Result<TileGrid> {
    let target_mpp = spec.target_mpp();
    if target_mpp < handle.mpp_base - 1e-9 {
        return Err(StampError::UpscaleRequested {
            target_mpp,
            mpp_base: handle.mpp_base,
        });
    }
    let ratio = target_mpp / handle.mpp_base;
    let plane_w = (handle.base_width_px as f64 / ratio).round().max(1.0) as u32;
    let plane_h = (handle.base_height_px as f64 / ratio).round().max(1.0) as u32;
    Ok(TileGrid {
        plane_w,
        plane_h,
        cols: plane_w.div_ceil(TILE_PX),
        rows: plane_h.div_ceil(TILE_PX),
        target_mpp,
        ratio,
    })
}

/// Chunk-cached region reader over one slide.
pub struct SlideReader {
    decoder: Decoder<BufReader<File>>,
    current_level: usize,
    level_dims: (u32, u32),
    chunk_dims: (u32, u32),
    cache: HashMap<(usize, u32), Vec<u8>>,
    cache_order: Vec<(usize, u32)>,
}

const CHUNK_CACHE_CAP: usize = 64;

impl SlideReader {
    pub fn open(handle: &SlideHandle) -> Result<Self> {
        let file = File::open(&handle.path)?;
        let decoder =
            Decoder::new(BufReader::new(file)).map_err(|e| StampError::CorruptFile {
                path: handle.path.clone(),
                detail: e.to_string(),
            })?;
        let mut reader = Self {
            decoder,
            current_level: usize::MAX,
            level_dims: (0, 0),
            chunk_dims: (0, 0),
            cache: HashMap::new(),
            cache_order: Vec::new(),
        };
        reader.seek_level(handle, 0)?;
        Ok(reader)
    }

    fn seek_level(&mut self, handle: &SlideHandle, level: usize) -> Result<()> {
        if self.current_level == level {
            return Ok(());
        }
        self.decoder
            .seek_to_image(level)
            .map_err(|e| StampError::CorruptFile {
                path: handle.path.clone(),
                detail: e.to_string(),
            })?;
        self.current_level = level;
        self.level_dims = (handle.levels[level].width, handle.levels[level].height);
        self.chunk_dims = self.decoder.chunk_dimensions();
        Ok(())
    }

    fn chunk(&mut self, handle: &SlideHandle, level: usize, index: u32) -> Result<&[u8]> {
        let key = (level, index);
        if !self.cache.contains_key(&key) {
            let data = match self.decoder.read_chunk(index) {
                Ok(DecodingResult::U8(v)) => v,
                Ok(_) => {
                    return Err(StampError::CorruptFile {
                        path: handle.path.clone(),
                        detail: "unexpected sample format (expected 8-bit RGB)".into(),
                    })
                }
                Err(e) => {
                    return Err(StampError::CorruptFile {
                        path: handle.path.clone(),
                        detail: e.to_string(),
                    })
                }
            };
            if self.cache_order.len() >= CHUNK_CACHE_CAP {
                let evict = self.cache_order.remove(0);
                self.cache.remove(&evict);
            }
            self.cache.insert(key, data);
            self.cache_order.push(key);
        }
        Ok(self.cache.get(&key).unwrap().as_slice())
    }

    /// Read a clamped rectangle of one pyramid level into an RGB buffer.
    /// The rectangle is intersected with the level bounds; the returned
    /// buffer is `w * h * 3` bytes for the clamped size.
    fn read_level_rect(
        &mut self,
        handle: &SlideHandle,
        level: usize,
        x0: u32,
        y0: u32,
        w: u32,
        h: u32,
    ) -> Result<Vec<u8>> {
        self.seek_level(handle, level)?;
        let (lw, lh) = self.level_dims;
        let x1 = (x0 + w).min(lw);
        let y1 = (y0 + h).min(lh);
        let (rw, rh) = (x1.saturating_sub(x0), y1.saturating_sub(y0));
        let mut out = vec![255u8; (rw * rh * 3) as usize];
        if rw == 0 || rh == 0 {
            return Ok(out);
        }
        let (cw, ch) = self.chunk_dims;
        let chunks_across = lw.div_ceil(cw);
        let c0 = x0 / cw;
        let c1 = (x1 - 1) / cw;
        let r0 = y0 / ch;
        let r1 = (y1 - 1) / ch;
        for cr in r0..=r1 {
            for cc in c0..=c1 {
                let idx = cr * chunks_across + cc;
                let (dw, dh) = self.decoder.chunk_data_dimensions(idx);
                let data = self.chunk(handle, level, idx)?.to_vec();
                let cx = cc * cw;
                let cy = cr * ch;
                let sx0 = x0.max(cx);
                let sy0 = y0.max(cy);
                let sx1 = x1.min(cx + dw);
                let sy1 = y1.min(cy + dh);
                for y in sy0..sy1 {
                    let src_off = (((y - cy) * dw + (sx0 - cx)) * 3) as usize;
                    let dst_off = (((y - y0) * rw + (sx0 - x0)) * 3) as usize;
                    let n = ((sx1 - sx0) * 3) as usize;
                    out[dst_off..dst_off + n].copy_from_slice(&data[src_off..src_off + n]);
                }
            }
        }
        Ok(out)
    }

    /// Read one grid tile at the target MPP via area-average resampling
    /// from the best pyramid level. Regions past the slide edge are padded
    /// white so padding-only tiles fall out at background QC.
    pub fn read_tile(&mut self, handle: &SlideHandle, grid: &TileGrid, x: u32, y: u32) -> Result<Tile> {
        // largest downsample <= required ratio
        let mut level = 0usize;
        for (i, l) in handle.levels.iter().enumerate() {
            if l.downsample <= grid.ratio + 1e-9 {
                level = i;
            }
        }
        let scale = grid.ratio / handle.levels[level].downsample;
        let origin_x = x as f64 * scale;
        let origin_y = y as f64 * scale;
        let span = TILE_PX as f64 * scale;
        let rx0 = origin_x.floor().max(0.0) as u32;
        let ry0 = origin_y.floor().max(0.0) as u32;
        let rx1 = (origin_x + span).ceil() as u32;
        let ry1 = (origin_y + span).ceil() as u32;
        let (rw, rh) = (rx1 - rx0, ry1 - ry0);
        let src = self.read_level_rect(handle, level, rx0, ry0, rw, rh)?;
        let (lw, lh) = self.level_dims;
        let aw = rx1.min(lw).saturating_sub(rx0);
        let ah = ry1.min(lh).saturating_sub(ry0);
        let rgb = area_resample(
            &src,
            aw as usize,
            ah as usize,
            origin_x - rx0 as f64,
            origin_y - ry0 as f64,
            scale,
            TILE_PX as usize,
        );
        Ok(Tile::new(x, y, rgb))
    }
}

/// Separable area-average resample of an RGB buffer. Source pixels outside
/// the buffer count as white.
fn area_resample(
    src: &[u8],
    sw: usize,
    sh: usize,
    fx: f64,
    fy: f64,
    scale: f64,
    out_px: usize,
) -> Vec<u8> {
    // horizontal pass: sh rows x out_px cols
    let mut mid = vec![0f64; sh.max(1) * out_px * 3];
    for i in 0..out_px {
        let a = fx + i as f64 * scale;
        let b = a + scale;
        let j0 = a.floor() as i64;
        let j1 = b.ceil() as i64;
        for row in 0..sh {
            let mut acc = [0f64; 3];
            let mut wsum = 0f64;
            for j in j0..j1 {
                let w = (b.min((j + 1) as f64) - a.max(j as f64)).max(0.0);
                if w <= 0.0 {
                    continue;
                }
                if j >= 0 && (j as usize) < sw {
                    let off = (row * sw + j as usize) * 3;
                    for c in 0..3 {
                        acc[c] += w * src[off + c] as f64;
                    }
                } else {
                    for a in acc.iter_mut() {
                        *a += w * 255.0;
                    }
                }
                wsum += w;
            }
            if wsum < scale - 1e-9 {
                for a in acc.iter_mut() {
                    *a += (scale - wsum) * 255.0;
                }
            }
            let off = (row * out_px + i) * 3;
            for c in 0..3 {
                mid[off + c] = acc[c] / scale;
            }
        }
    }
    // vertical pass
    let mut out = vec![0u8; out_px * out_px * 3];
    for i in 0..out_px {
        let a = fy + i as f64 * scale;
        let b = a + scale;
        let j0 = a.floor() as i64;
        let j1 = b.ceil() as i64;
        for col in 0..out_px {
            let mut acc = [0f64; 3];
            let mut wsum = 0f64;
            for j in j0..j1 {
                let w = (b.min((j + 1) as f64) - a.max(j as f64)).max(0.0);
                if w <= 0.0 {
                    continue;
                }
                if j >= 0 && (j as usize) < sh {
                    let off = ((j as usize) * out_px + col) * 3;
                    for c in 0..3 {
                        acc[c] += w * mid[off + c];
                    }
                } else {
                    for a in acc.iter_mut() {
                        *a += w * 255.0;
                    }
                }
                wsum += w;
            }
            if wsum < scale - 1e-9 {
                for a in acc.iter_mut() {
                    *a += (scale - wsum) * 255.0;
                }
            }
            let off = (i * out_px + col) * 3;
            for c in 0..3 {
                out[off + c] = (acc[c] / scale).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}
