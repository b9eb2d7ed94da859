//! Tile quality control: background rejection by brightness and blur/empty
//! rejection by Canny edge statistics.

use crate::slide::{Tile, TILE_PX};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QcThresholds {
    /// Mean grayscale brightness at or above which a tile counts as background.
    pub brightness_max: f64,
    /// Minimum Canny edge fraction for a tile to count as in-focus tissue.
    pub edge_min: f64,
}

impl Default for QcThresholds {
    fn default() -> Self {
        Self {
            brightness_max: 224.0,
            edge_min: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QcVerdict {
    Accepted,
    RejectedBackground,
    RejectedEdges,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QcOutcome {
    pub verdict: QcVerdict,
    pub edge_fraction: f64,
    pub mean_brightness: f64,
}

pub fn grayscale(rgb: &[u8], w: usize, h: usize) -> Vec<f32> {
    let mut gray = Vec::with_capacity(w * h);
    for px in rgb.chunks_exact(3) {
        gray.push(0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32);
    }
    debug_assert_eq!(gray.len(), w * h);
    gray
}

fn gaussian_kernel_5(sigma: f32) -> [f32; 5] {
    let mut k = [0f32; 5];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f32 - 2.0;
        *v = (-x * x / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

fn clamp_idx(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Separable 5x5 Gaussian blur with replicated borders.
fn gaussian_blur(src: &[f32], w: usize, h: usize, sigma: f32) -> Vec<f32> {
    let k = gaussian_kernel_5(sigma);
    let mut mid = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = clamp_idx(x as i64 + i as i64 - 2, w);
                acc += kv * src[y * w + sx];
            }
            mid[y * w + x] = acc;
        }
    }
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = clamp_idx(y as i64 + i as i64 - 2, h);
                acc += kv * mid[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Canny edge map: grayscale input, 5x5 Gaussian (sigma 1.4), Sobel,
/// non-maximum suppression, double-threshold hysteresis on the 8-bit
/// saturated gradient magnitude.
pub fn canny_edges(gray: &[f32], w: usize, h: usize, low: f32, high: f32) -> Vec<bool> {
    let blurred = gaussian_blur(gray, w, h, 1.4);
    let mut mag = vec![0f32; w * h];
    let mut dir = vec![0u8; w * h]; // 0: horiz, 1: diag /, 2: vert, 3: diag \
    let at = |x: i64, y: i64| blurred[clamp_idx(y, h) * w + clamp_idx(x, w)];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = -at(x - 1, y - 1) - 2.0 * at(x - 1, y) - at(x - 1, y + 1)
                + at(x + 1, y - 1)
                + 2.0 * at(x + 1, y)
                + at(x + 1, y + 1);
            let gy = -at(x - 1, y - 1) - 2.0 * at(x, y - 1) - at(x + 1, y - 1)
                + at(x - 1, y + 1)
                + 2.0 * at(x, y + 1)
                + at(x + 1, y + 1);
            let m = (gx * gx + gy * gy).sqrt().min(255.0);
            let idx = (y as usize) * w + x as usize;
            mag[idx] = m;
            let angle = gy.atan2(gx).to_degrees();
            let a = if angle < 0.0 { angle + 180.0 } else { angle };
            dir[idx] = if !(22.5..157.5).contains(&a) {
                0
            } else if a < 67.5 {
                1
            } else if a < 112.5 {
                2
            } else {
                3
            };
        }
    }
    // non-maximum suppression
    let mut nms = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let m = mag[idx];
            if m <= 0.0 {
                continue;
            }
            let (dx, dy): (i64, i64) = match dir[idx] {
                0 => (1, 0),
                1 => (1, 1),
                2 => (0, 1),
                _ => (1, -1),
            };
            let n1 = mag[clamp_idx(y as i64 + dy, h) * w + clamp_idx(x as i64 + dx, w)];
            let n2 = mag[clamp_idx(y as i64 - dy, h) * w + clamp_idx(x as i64 - dx, w)];
            if m >= n1 && m >= n2 {
                nms[idx] = m;
            }
        }
    }
    // hysteresis: grow strong edges through weak ones (8-connected)
    let mut edges = vec![false; w * h];
    let mut stack = Vec::new();
    for idx in 0..w * h {
        if nms[idx] >= high && !edges[idx] {
            edges[idx] = true;
            stack.push(idx);
            while let Some(i) = stack.pop() {
                let (cx, cy) = ((i % w) as i64, (i / w) as i64);
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let (nx, ny) = (cx + dx, cy + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let ni = ny as usize * w + nx as usize;
                        if !edges[ni] && nms[ni] >= low {
                            edges[ni] = true;
                            stack.push(ni);
                        }
                    }
                }
            }
        }
    }
    edges
}

/// Edge fraction of a tile under the default Canny settings (low 40, high 100).
pub fn edge_fraction(rgb: &[u8], w: usize, h: usize) -> f64 {
    let gray = grayscale(rgb, w, h);
    let edges = canny_edges(&gray, w, h, 40.0, 100.0);
    edges.iter().filter(|&&e| e).count() as f64 / (w * h) as f64
}

/// Classify one tile. Background check runs first so the Canny pass is
/// skipped for blank tiles.
pub fn qc_tile(tile: &Tile, thresholds: &QcThresholds) -> QcOutcome {
    let w = TILE_PX as usize;
    let gray = grayscale(&tile.rgb, w, w);
    let mean_brightness = gray.iter().map(|&v| v as f64).sum::<f64>() / gray.len() as f64;
    if mean_brightness >= thresholds.brightness_max {
        return QcOutcome {
            verdict: QcVerdict::RejectedBackground,
            edge_fraction: 0.0,
            mean_brightness,
        };
    }
    let edges = canny_edges(&gray, w, w, 40.0, 100.0);
    let edge_fraction = edges.iter().filter(|&&e| e).count() as f64 / (w * w) as f64;
    let verdict = if edge_fraction < thresholds.edge_min {
        QcVerdict::RejectedEdges
    } else {
        QcVerdict::Accepted
    };
    QcOutcome {
        verdict,
        edge_fraction,
        mean_brightness,
    }
}
