//! Whole-volume segmentation by per-voxel patch classification.
//!
//! Two shortcuts keep the sweep cheap: voxels outside a bounding box are
//! labelled background, and voxels that are zero in all four modalities are
//! labelled background without running the network.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{predict, ModelParams};
use crate::data::{extract_patch, Grid, LabelVolume, Modality, MultimodalVolume, Voxel};
use crate::error::{Error, Result};
use crate::parallel::Workers;

pub const DEFAULT_THRESHOLD_K: f64 = 1.5;
pub const DEFAULT_MARGIN: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum BboxMode {
    Full,
    /// FLAIR voxels above `μ + kσ` of the nonzero FLAIR voxels.
    FlairThreshold { k: f64 },
    ProvidedMask(Grid<bool>),
}

/// Inclusive voxel box `[min, max]` per axis, `(z, y, x)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
    pub margin: usize,
}

impl BoundingBox {
    pub fn full(dims: [usize; 3]) -> Self {
        BoundingBox {
            min: [0; 3],
            max: [dims[0] - 1, dims[1] - 1, dims[2] - 1],
            margin: 0,
        }
    }

    pub fn contains(&self, v: Voxel) -> bool {
        let p = [v.z, v.y, v.x];
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }

    pub fn extent(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.max[a] - self.min[a] + 1)
    }

    pub fn voxel_count(&self) -> usize {
        self.extent().iter().product()
    }

    /// Voxels in `(z, y, x)` row-major order.
    pub fn voxels(&self) -> impl Iterator<Item = Voxel> + '_ {
        (self.min[0]..=self.max[0]).flat_map(move |z| {
            (self.min[1]..=self.max[1])
                .flat_map(move |y| (self.min[2]..=self.max[2]).map(move |x| Voxel::new(z, y, x)))
        })
    }
}

fn tight_box(mask: &Grid<bool>, margin: usize) -> Option<BoundingBox> {
    let dims = mask.dims();
    let mut min = dims;
    let mut max = [0; 3];
    let mut any = false;
    for (o, _) in mask.data().iter().enumerate().filter(|(_, &b)| b) {
        let v = mask.voxel_at(o);
        let p = [v.z, v.y, v.x];
        for a in 0..3 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
        any = true;
    }
    any.then(|| BoundingBox {
        min: std::array::from_fn(|a| min[a].saturating_sub(margin)),
        max: std::array::from_fn(|a| (max[a] + margin).min(dims[a] - 1)),
        margin,
    })
}

pub fn flair_threshold_mask(vol: &MultimodalVolume, k: f64) -> Grid<bool> {
    let flair = vol.scan(Modality::Flair);
    let nonzero: Vec<f64> = flair.data().iter().filter(|&&v| v != 0.0).map(|&v| v as f64).collect();
    if nonzero.is_empty() {
        return flair.map(|_| false);
    }
    let n = nonzero.len() as f64;
    let mean = nonzero.iter().sum::<f64>() / n;
    let std = (nonzero.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let cut = mean + k * std;
    flair.map(|&v| v != 0.0 && v as f64 > cut)
}

pub fn compute_bbox(vol: &MultimodalVolume, mode: &BboxMode, margin: usize) -> Result<BoundingBox> {
    let dims = vol.dims();
    let mask = match mode {
        BboxMode::Full => return Ok(BoundingBox::full(dims)),
        BboxMode::FlairThreshold { k } => flair_threshold_mask(vol, *k),
        BboxMode::ProvidedMask(m) => {
            if m.dims() != dims {
                return Err(Error::Dimension(format!(
                    "bounding-box mask {:?} vs volume {dims:?}",
                    m.dims()
                )));
            }
            m.clone()
        }
    };
    Ok(tight_box(&mask, margin).unwrap_or_else(|| {
        log::warn!("bounding-box mask selects no voxels; using the whole volume");
        BoundingBox::full(dims)
    }))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub network_calls: usize,
    pub skipped_zero: usize,
    pub outside_box: usize,
}

pub fn segment_volume(
    vol: &MultimodalVolume,
    params: &ModelParams<f32>,
    bbox: &BoundingBox,
    workers: &Workers,
) -> Result<(LabelVolume, SegmentStats)> {
    let dims = vol.dims();
    if (0..3).any(|a| bbox.max[a] >= dims[a] || bbox.min[a] > bbox.max[a]) {
        return Err(Error::Usage(format!(
            "bounding box {:?}-{:?} outside volume {dims:?}",
            bbox.min, bbox.max
        )));
    }
    let cfg = &params.config;
    let mut labels = Grid::filled(dims, 0u8);
    let candidates: Vec<Voxel> = bbox
        .voxels()
        .filter(|&v| !vol.is_background(labels.offset(v)))
        .collect();
    let predicted = workers.map(candidates.len(), |i| {
        let patch = extract_patch(vol, candidates[i], cfg.patch_size, cfg.slices)?;
        predict(params, &patch.modalities).map(|c| c as u8)
    });
    for (v, c) in candidates.iter().zip(predicted) {
        labels.set(*v, c?);
    }
    let inside = bbox.voxel_count();
    let stats = SegmentStats {
        network_calls: candidates.len(),
        skipped_zero: inside - candidates.len(),
        outside_box: labels.len() - inside,
    };
    Ok((LabelVolume::new(labels, cfg.classes, vol.spacing_mm)?, stats))
}

pub const OVERLAY_COLORS: [[u8; 3]; 3] = [[255, 255, 0], [0, 255, 0], [0, 0, 255]];

/// Renders one slice as a binary PPM: FLAIR in grey, classes 1..3 coloured.
/// `axis` 0 is axial (z), 1 coronal (y), 2 sagittal (x).
pub fn render_overlay(
    vol: &MultimodalVolume,
    pred: &LabelVolume,
    axis: usize,
    index: usize,
) -> Result<(usize, usize, Vec<u8>)> {
    let dims = vol.dims();
    if pred.dims() != dims {
        return Err(Error::Dimension(format!(
            "labels {:?} vs volume {dims:?}",
            pred.dims()
        )));
    }
    if axis > 2 {
        return Err(Error::Usage(format!("slice axis must be 0, 1 or 2, got {axis}")));
    }
    if index >= dims[axis] {
        return Err(Error::Usage(format!(
            "slice {index} out of range for axis {axis} of size {}",
            dims[axis]
        )));
    }
    let flair = vol.scan(Modality::Flair);
    let (lo, hi) = flair
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (rows, cols) = match axis {
        0 => (dims[1], dims[2]),
        1 => (dims[0], dims[2]),
        _ => (dims[0], dims[1]),
    };
    let mut pixels = Vec::with_capacity(rows * cols * 3);
    for r in 0..rows {
        for c in 0..cols {
            let v = match axis {
                0 => Voxel::new(index, r, c),
                1 => Voxel::new(r, index, c),
                _ => Voxel::new(r, c, index),
            };
            let class = pred.labels.get(v) as usize;
            if (1..=3).contains(&class) {
                pixels.extend_from_slice(&OVERLAY_COLORS[class - 1]);
            } else {
                let g = (((flair.get(v) - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
                pixels.extend_from_slice(&[g, g, g]);
            }
        }
    }
    Ok((cols, rows, pixels))
}

pub fn export_overlay(vol: &MultimodalVolume, pred: &LabelVolume, axis: usize, index: usize, path: &Path) -> Result<()> {
    let (w, h, pixels) = render_overlay(vol, pred, axis, index)?;
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ModelConfig;

    fn blank(dims: [usize; 3]) -> MultimodalVolume {
        MultimodalVolume::new(std::array::from_fn(|_| Grid::filled(dims, 0.0)), [1.0; 3], "blank").unwrap()
    }

    #[test]
    fn full_box() {
        let b = compute_bbox(&blank([64, 64, 64]), &BboxMode::Full, 0).unwrap();
        assert_eq!((b.min, b.max), ([0; 3], [63; 3]));
    }

    #[test]
    fn single_bright_voxel_with_margin() {
        let mut vol = blank([32, 32, 32]);
        for s in vol.scans.iter_mut() {
            s.data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
        vol.scans[Modality::Flair.index()].set(Voxel::new(10, 12, 14), 50.0);
        let b = compute_bbox(&vol, &BboxMode::FlairThreshold { k: DEFAULT_THRESHOLD_K }, 2).unwrap();
        assert_eq!((b.min, b.max), ([8, 10, 12], [12, 14, 16]));
    }

    #[test]
    fn empty_threshold_falls_back() {
        let b = compute_bbox(&blank([5, 6, 7]), &BboxMode::FlairThreshold { k: 1.5 }, 1).unwrap();
        assert_eq!(b, BoundingBox::full([5, 6, 7]));
    }

    #[test]
    fn margin_clipped() {
        let mut m = Grid::filled([10, 10, 10], false);
        m.set(Voxel::new(0, 9, 5), true);
        let b = compute_bbox(&blank([10, 10, 10]), &BboxMode::ProvidedMask(m), 3).unwrap();
        assert_eq!((b.min, b.max), ([0, 6, 2], [3, 9, 8]));
    }

    #[test]
    fn all_zero_volume_no_calls() {
        let cfg = ModelConfig::shrunken();
        let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let vol = blank([6, 7, 8]);
        let (labels, stats) =
            segment_volume(&vol, &params, &BoundingBox::full(vol.dims()), &Workers::sequential()).unwrap();
        assert_eq!(stats.network_calls, 0);
        assert!(labels.labels.data().iter().all(|&c| c == 0));
    }

    #[test]
    fn overlay_single_coloured_pixel() {
        let vol = blank([3, 4, 5]);
        let mut g = Grid::filled([3, 4, 5], 0u8);
        g.set(Voxel::new(1, 2, 3), 2);
        let labels = LabelVolume::new(g, 4, [1.0; 3]).unwrap();
        let (w, h, px) = render_overlay(&vol, &labels, 0, 1).unwrap();
        assert_eq!((w, h), (5, 4));
        let coloured: Vec<usize> = (0..w * h)
            .filter(|&i| px[3 * i] != px[3 * i + 1] || px[3 * i + 1] != px[3 * i + 2])
            .collect();
        assert_eq!(coloured, vec![2 * 5 + 3]);
        assert_eq!(&px[3 * 13..3 * 13 + 3], &[0, 255, 0]);
        assert!(render_overlay(&vol, &labels, 0, 3).is_err());
        assert!(render_overlay(&vol, &labels, 2, 4).is_ok());
    }
}
