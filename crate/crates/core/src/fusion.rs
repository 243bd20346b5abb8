//! Fusion of 1D ROI statistics, 2D deterministic networks, and 3D metric
//! volumes into the per-sample feature matrix X (R x F).
//!
//! Column order of the fused matrix is fixed:
//! 1. `stat_ratio` (surface voxels / total voxels, one column)
//! 2. one `net_<i>` column per 2D network (min-max scaled, L1 row sums
//!    divided by their maximum)
//! 3. per 3D metric, three columns `m<i>_centroid`, `m<i>_mean`, `m<i>_max`
//!    (normalized centroid/mean/max weights)

use crate::error::{Error, Result};

/// A nonnegative scalar field over a voxel grid.
#[derive(Debug, Clone)]
pub struct VoxelVolume {
    pub dims: (usize, usize, usize),
    pub weights: Vec<f64>,
}

impl VoxelVolume {
    pub fn new(dims: (usize, usize, usize), weights: Vec<f64>) -> Result<Self> {
        if weights.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::Config(format!(
                "volume dims {dims:?} do not match {} voxels",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Data("volume weights must be finite and >= 0".into()));
        }
        Ok(VoxelVolume { dims, weights })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        let (_, y, z) = self.dims;
        self.weights[(i * y + j) * z + k]
    }
}

/// Integer ROI labels over the same grid; 0 marks background.
#[derive(Debug, Clone)]
pub struct BrainTemplate {
    pub dims: (usize, usize, usize),
    pub labels: Vec<u32>,
    pub roi_count: usize,
}

impl BrainTemplate {
    pub fn new(dims: (usize, usize, usize), labels: Vec<u32>, roi_count: usize) -> Result<Self> {
        if labels.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::Config("template dims do not match label count".into()));
        }
        if labels.iter().any(|&l| l as usize > roi_count) {
            return Err(Error::Data(format!(
                "template label exceeds ROI count {roi_count}"
            )));
        }
        let tpl = BrainTemplate {
            dims,
            labels,
            roi_count,
        };
        for r in 1..=roi_count {
            if !tpl.labels.iter().any(|&l| l as usize == r) {
                return Err(Error::Data(format!("ROI {r} occupies no voxel")));
            }
        }
        Ok(tpl)
    }

    /// Voxel index triples of ROI `r` (1-based), in grid scan order.
    pub fn roi_voxels(&self, r: usize) -> Vec<(usize, usize, usize)> {
        let (x, y, z) = self.dims;
        let mut out = Vec::new();
        for i in 0..x {
            for j in 0..y {
                for k in 0..z {
                    if self.labels[(i * y + j) * z + k] as usize == r {
                        out.push((i, j, k));
                    }
                }
            }
        }
        out
    }
}

/// Symmetric nonnegative R x R connectivity matrix.
#[derive(Debug, Clone)]
pub struct RoiNetwork {
    pub size: usize,
    pub entries: Vec<f64>,
}

impl RoiNetwork {
    pub fn new(size: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != size * size {
            return Err(Error::Config("network entry count mismatch".into()));
        }
        if entries.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data("network entries must be finite and >= 0".into()));
        }
        for i in 0..size {
            for j in (i + 1)..size {
                if (entries[i * size + j] - entries[j * size + i]).abs() > 1e-9 {
                    return Err(Error::Data(format!(
                        "network not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(RoiNetwork { size, entries })
    }
}

/// Per-ROI surface-voxel and total-voxel counts.
#[derive(Debug, Clone)]
pub struct RoiStatPair {
    pub surface: Vec<f64>,
    pub voxel: Vec<f64>,
}

/// Centroid and weight statistics of one ROI in one metric volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiStats {
    pub centroid: (f64, f64, f64),
    pub centroid_weight: f64,
    pub mean_weight: f64,
    pub max_weight: f64,
}

/// Per-sample fused feature matrix with named columns; every entry in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FusedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub column_names: Vec<String>,
}

impl FusedMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }
}

/// Ratio of surface voxels to total voxels per ROI.
pub fn fuse_stat_vectors(stats: &RoiStatPair) -> Result<Vec<f64>> {
    if stats.surface.len() != stats.voxel.len() {
        return Err(Error::Config("stat vector length mismatch".into()));
    }
    let mut out = Vec::with_capacity(stats.voxel.len());
    for (r, (&s, &v)) in stats.surface.iter().zip(stats.voxel.iter()).enumerate() {
        if v <= 0.0 {
            return Err(Error::Data(format!("ROI {r}: voxel count is zero")));
        }
        if s > v {
            return Err(Error::Data(format!(
                "ROI {r}: surface count {s} exceeds voxel count {v}"
            )));
        }
        out.push(s / v);
    }
    Ok(out)
}

/// Min-max scale a network, take L1 row sums, then divide by their maximum
/// so the reduced vector lies in [0, 1].
pub fn reduce_network(net: &RoiNetwork) -> Vec<f64> {
    let n = net.size;
    let min = net.entries.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = net.entries.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        log::warn!("reduce_network: constant matrix, emitting all-zero vector");
        return vec![0.0; n];
    }
    let span = max - min;
    let mut sums = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            sums[i] += ((net.entries[i * n + j] - min) / span).abs();
        }
    }
    let smax = sums.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return sums;
    }
    sums.iter().map(|s| s / smax).collect()
}

/// Weighted centroid, centroid weight, mean weight, and max weight of one ROI.
///
/// Centroid rounding is half-away-from-zero with indices clamped to volume
/// bounds. A zero-mass ROI falls back to the unweighted centroid with
/// `centroid_weight = 0`.
pub fn roi_statistics(vol: &VoxelVolume, tpl: &BrainTemplate, roi: usize) -> Result<RoiStats> {
    if vol.dims != tpl.dims {
        return Err(Error::Config("volume and template dims differ".into()));
    }
    let voxels = tpl.roi_voxels(roi);
    if voxels.is_empty() {
        return Err(Error::Data(format!("ROI {roi} is empty in the template")));
    }
    let mut wsum = 0.0;
    let mut csum = (0.0, 0.0, 0.0);
    let mut wmax = f64::NEG_INFINITY;
    for &(i, j, k) in &voxels {
        let w = vol.at(i, j, k);
        wsum += w;
        csum.0 += i as f64 * w;
        csum.1 += j as f64 * w;
        csum.2 += k as f64 * w;
        wmax = wmax.max(w);
    }
    let mean_weight = wsum / voxels.len() as f64;
    let centroid = if wsum > 0.0 {
        (csum.0 / wsum, csum.1 / wsum, csum.2 / wsum)
    } else {
        let n = voxels.len() as f64;
        let mut u = (0.0, 0.0, 0.0);
        for &(i, j, k) in &voxels {
            u.0 += i as f64;
            u.1 += j as f64;
            u.2 += k as f64;
        }
        (u.0 / n, u.1 / n, u.2 / n)
    };
    let centroid_weight = if wsum > 0.0 {
        let ci = round_clamp(centroid.0, vol.dims.0);
        let cj = round_clamp(centroid.1, vol.dims.1);
        let ck = round_clamp(centroid.2, vol.dims.2);
        vol.at(ci, cj, ck)
    } else {
        0.0
    };
    Ok(RoiStats {
        centroid,
        centroid_weight,
        mean_weight,
        max_weight: wmax,
    })
}

fn round_clamp(v: f64, dim: usize) -> usize {
    // round half away from zero; inputs are nonnegative here
    let r = (v.abs() + 0.5).floor().copysign(v);
    (r.max(0.0) as usize).min(dim - 1)
}

/// Normalized (centroid, mean, max) weight triple per ROI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedTriple {
    pub centroid: f64,
    pub mean: f64,
    pub max: f64,
}

/// Normalize per-ROI statistics of one metric: centroid and mean weights by
/// the ROI max, the ROI max by the global max.
pub fn normalize_roi_statistics(stats: &[RoiStats]) -> Vec<NormalizedTriple> {
    let global_max = stats.iter().map(|s| s.max_weight).fold(0.0, f64::max);
    if global_max == 0.0 {
        log::warn!("normalize_roi_statistics: all-zero metric volume");
    }
    stats
        .iter()
        .map(|s| {
            if s.max_weight == 0.0 {
                // empty-signal ROI
                return NormalizedTriple {
                    centroid: 0.0,
                    mean: 0.0,
                    max: 0.0,
                };
            }
            NormalizedTriple {
                centroid: s.centroid_weight / s.max_weight,
                mean: s.mean_weight / s.max_weight,
                max: if global_max > 0.0 {
                    s.max_weight / global_max
                } else {
                    0.0
                },
            }
        })
        .collect()
}

/// Concatenate the 1D ratio, per-network reductions, and per-metric triples
/// into the fused matrix. F = 1 + networks + 3 * metrics.
pub fn assemble_fused_matrix(
    stat_vec: &[f64],
    network_vecs: &[Vec<f64>],
    metric_triples: &[Vec<NormalizedTriple>],
) -> Result<FusedMatrix> {
    let rows = stat_vec.len();
    for (i, v) in network_vecs.iter().enumerate() {
        if v.len() != rows {
            return Err(Error::Config(format!(
                "network {i} covers {} ROIs, expected {rows}",
                v.len()
            )));
        }
    }
    for (i, t) in metric_triples.iter().enumerate() {
        if t.len() != rows {
            return Err(Error::Config(format!(
                "metric {i} covers {} ROIs, expected {rows}",
                t.len()
            )));
        }
    }
    let cols = 1 + network_vecs.len() + 3 * metric_triples.len();
    let mut column_names = vec!["stat_ratio".to_string()];
    for i in 0..network_vecs.len() {
        column_names.push(format!("net_{i}"));
    }
    for i in 0..metric_triples.len() {
        column_names.push(format!("m{i}_centroid"));
        column_names.push(format!("m{i}_mean"));
        column_names.push(format!("m{i}_max"));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        values.push(stat_vec[r]);
        for v in network_vecs {
            values.push(v[r]);
        }
        for t in metric_triples {
            values.push(t[r].centroid);
            values.push(t[r].mean);
            values.push(t[r].max);
        }
    }
    debug_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
    Ok(FusedMatrix {
        rows,
        cols,
        values,
        column_names,
    })
}

/// Run the whole fusion pipeline for one sample.
pub fn fuse_sample(
    stats: &RoiStatPair,
    networks: &[RoiNetwork],
    volumes: &[VoxelVolume],
    tpl: &BrainTemplate,
) -> Result<FusedMatrix> {
    let stat_vec = fuse_stat_vectors(stats)?;
    let network_vecs: Vec<Vec<f64>> = networks.iter().map(reduce_network).collect();
    let mut metric_triples = Vec::with_capacity(volumes.len());
    for vol in volumes {
        let mut stats = Vec::with_capacity(tpl.roi_count);
        for r in 1..=tpl.roi_count {
            stats.push(roi_statistics(vol, tpl, r)?);
        }
        metric_triples.push(normalize_roi_statistics(&stats));
    }
    assemble_fused_matrix(&stat_vec, &network_vecs, &metric_triples)
}
