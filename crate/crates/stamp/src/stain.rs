//! Macenko stain normalization: optical-density decomposition into a
//! hematoxylin/eosin basis, concentration scaling against a template.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StampError};
use crate::slide::Tile;

pub const DEFAULT_I0: f64 = 240.0;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.15;
const MIN_PIXELS: usize = 1000;

/// Estimated stain state for one slide (or the normalization template).
/// Columns of `stain_matrix` are hematoxylin and eosin, unit L2 norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StainParams {
    pub stain_matrix: [[f64; 2]; 3],
    pub max_conc: [f64; 2],
    pub i0: f64,
}

impl StainParams {
    fn column(&self, j: usize) -> Vector3<f64> {
        Vector3::new(
            self.stain_matrix[0][j],
            self.stain_matrix[1][j],
            self.stain_matrix[2][j],
        )
    }

    /// 2x3 least-squares projector (M^T M)^-1 M^T for concentration fits.
    fn pinv(&self) -> [[f64; 3]; 2] {
        let m = self.stain_matrix;
        let mut mtm = [[0.0; 2]; 2];
        for (i, row) in mtm.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| m[k][i] * m[k][j]).sum();
            }
        }
        let det = mtm[0][0] * mtm[1][1] - mtm[0][1] * mtm[1][0];
        let inv = [
            [mtm[1][1] / det, -mtm[0][1] / det],
            [-mtm[1][0] / det, mtm[0][0] / det],
        ];
        let mut p = [[0.0; 3]; 2];
        for (i, row) in p.iter_mut().enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = inv[i][0] * m[k][0] + inv[i][1] * m[k][1];
            }
        }
        p
    }
}

fn od(value: u8, i0: f64) -> f64 {
    -((value as f64).max(1.0) / i0).log10()
}

/// Estimate the stain matrix and concentration scales from sampled pixels.
///
/// Pixels with optical density below `beta` in any channel are discarded;
/// at least 1000 must remain. The two stain directions are the `alpha` and
/// `100 - alpha` percentile angles of the retained pixels projected on the
/// top-2 eigenplane of the OD covariance.
pub fn estimate_stain_params(
    pixels: &[[u8; 3]],
    i0: f64,
    alpha: f64,
    beta: f64,
) -> Result<StainParams> {
    let retained: Vec<Vector3<f64>> = pixels
        .iter()
        .map(|p| Vector3::new(od(p[0], i0), od(p[1], i0), od(p[2], i0)))
        .filter(|v| v.x >= beta && v.y >= beta && v.z >= beta)
        .collect();
    if retained.len() < MIN_PIXELS {
        return Err(StampError::InsufficientTissue(format!(
            "only {} of {} sampled pixels have OD above {beta} in all channels (need {MIN_PIXELS})",
            retained.len(),
            pixels.len()
        )));
    }

    let n = retained.len() as f64;
    let mean = retained.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for v in &retained {
        let d = v - mean;
        cov += d * d.transpose();
    }
    cov /= n - 1.0;
    let eig = cov.symmetric_eigen();
    // sort eigenpairs by descending eigenvalue
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let l1 = eig.eigenvalues[order[0]];
    let l2 = eig.eigenvalues[order[1]];
    if l1 <= 0.0 || l2 < 1e-8 * l1 {
        return Err(StampError::InsufficientTissue(format!(
            "degenerate stain distribution: second eigenvalue {l2:.3e} below 1e-8 of first {l1:.3e}"
        )));
    }
    let mut v1 = eig.eigenvectors.column(order[0]).into_owned();
    let mut v2 = eig.eigenvectors.column(order[1]).into_owned();
    // orient the plane basis towards positive OD mass for stable angles
    if v1.sum() < 0.0 {
        v1 = -v1;
    }
    if v2.sum() < 0.0 {
        v2 = -v2;
    }

    let mut angles: Vec<f64> = retained
        .iter()
        .map(|v| v.dot(&v2).atan2(v.dot(&v1)))
        .collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let phi_min = percentile_sorted(&angles, alpha);
    let phi_max = percentile_sorted(&angles, 100.0 - alpha);
    let dir_a = normalize_stain_vector(v1 * phi_min.cos() + v2 * phi_min.sin());
    let dir_b = normalize_stain_vector(v1 * phi_max.cos() + v2 * phi_max.sin());

    // hematoxylin is the extreme vector with the larger red-channel OD
    let (h, e) = if dir_a.x >= dir_b.x {
        (dir_a, dir_b)
    } else {
        (dir_b, dir_a)
    };
    let mut params = StainParams {
        stain_matrix: [[h.x, e.x], [h.y, e.y], [h.z, e.z]],
        max_conc: [1.0, 1.0],
        i0,
    };

    let pinv = params.pinv();
    let mut conc = [Vec::with_capacity(retained.len()), Vec::with_capacity(retained.len())];
    for v in &retained {
        for i in 0..2 {
            let c = pinv[i][0] * v.x + pinv[i][1] * v.y + pinv[i][2] * v.z;
            conc[i].push(c.max(0.0));
        }
    }
    for i in 0..2 {
        conc[i].sort_by(|a, b| a.partial_cmp(b).unwrap());
        params.max_conc[i] = percentile_sorted(&conc[i], 99.0).max(1e-6);
    }
    Ok(params)
}

fn normalize_stain_vector(mut v: Vector3<f64>) -> Vector3<f64> {
    if v.sum() < 0.0 {
        v = -v;
    }
    // clamp stray negative components, then renormalize
    v.x = v.x.max(0.0);
    v.y = v.y.max(0.0);
    v.z = v.z.max(0.0);
    let norm = v.norm();
    if norm > 0.0 {
        v / norm
    } else {
        v
    }
}

/// Linear-interpolation percentile of an ascending-sorted slice, p in [0, 100].
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let t = pos - lo as f64;
        sorted[lo] * (1.0 - t) + sorted[hi] * t
    }
}

/// Map a tile from the source stain basis into the target basis.
/// Output shape equals input shape; a pure-background pixel (I = i0) maps
/// to i0 exactly.
pub fn normalize_tile(tile: &Tile, source: &StainParams, target: &StainParams) -> Tile {
    let mut rgb = vec![0u8; tile.rgb.len()];
    normalize_pixels(&tile.rgb, &mut rgb, source, target);
    Tile {
        x: tile.x,
        y: tile.y,
        rgb,
    }
}

pub fn normalize_pixels(input: &[u8], output: &mut [u8], source: &StainParams, target: &StainParams) {
    let pinv = source.pinv();
    let scale = [
        target.max_conc[0] / source.max_conc[0],
        target.max_conc[1] / source.max_conc[1],
    ];
    let th = target.column(0);
    let te = target.column(1);
    for (src, dst) in input.chunks_exact(3).zip(output.chunks_exact_mut(3)) {
        let odv = Vector3::new(od(src[0], source.i0), od(src[1], source.i0), od(src[2], source.i0));
        let c0 = (pinv[0][0] * odv.x + pinv[0][1] * odv.y + pinv[0][2] * odv.z).max(0.0) * scale[0];
        let c1 = (pinv[1][0] * odv.x + pinv[1][1] * odv.y + pinv[1][2] * odv.z).max(0.0) * scale[1];
        let out_od = th * c0 + te * c1;
        for k in 0..3 {
            let v = target.i0 * 10f64.powf(-out_od[k]);
            dst[k] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
}
