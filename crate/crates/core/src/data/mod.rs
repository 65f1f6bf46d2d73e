//! Volumes, labels, patch extraction and training-set sampling.

mod container;
mod patch;
mod phantom;
mod sampling;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use container::{
    labels_header, load_labels, load_volume, read_container, save_labels, save_scan, save_subject, save_volume,
    Container,
    ContainerHeader, LABELS_FILE,
};
pub use patch::{extract_labeled_patch, extract_patch, Augmentation, Patch3D};
pub use phantom::{generate_phantom, PhantomSpec, MIN_PHANTOM_EXTENT};
pub use sampling::{sample_subjects, sample_training_set, SamplingPlan};

/// MR sequence. The declaration order is the channel order used everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "FLAIR")]
    Flair,
    T1,
    T1c,
    T2,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Flair, Modality::T1, Modality::T1c, Modality::T2];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Flair => "FLAIR",
            Modality::T1 => "T1",
            Modality::T1c => "T1c",
            Modality::T2 => "T2",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::format("role", format!("unknown modality `{s}`")))
    }
}

/// Voxel coordinate; axis order everywhere is `(z, y, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Voxel {
    pub z: usize,
    pub y: usize,
    pub x: usize,
}

impl Voxel {
    pub fn new(z: usize, y: usize, x: usize) -> Self {
        Voxel { z, y, x }
    }
}

/// Dense 3D array stored `[D][H][W]`, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "grid {dims:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        Ok(Grid { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Grid {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, v: Voxel) -> usize {
        (v.z * self.dims[1] + v.y) * self.dims[2] + v.x
    }

    #[inline]
    pub fn voxel_at(&self, offset: usize) -> Voxel {
        let x = offset % self.dims[2];
        let y = (offset / self.dims[2]) % self.dims[1];
        let z = offset / (self.dims[1] * self.dims[2]);
        Voxel { z, y, x }
    }

    pub fn contains(&self, v: Voxel) -> bool {
        v.z < self.dims[0] && v.y < self.dims[1] && v.x < self.dims[2]
    }

    #[inline]
    pub fn get(&self, v: Voxel) -> T {
        self.data[self.offset(v)]
    }

    #[inline]
    pub fn set(&mut self, v: Voxel, value: T) {
        let o = self.offset(v);
        self.data[o] = value;
    }

    /// Value at signed coordinates, or `None` outside the grid.
    #[inline]
    pub fn get_signed(&self, z: isize, y: isize, x: isize) -> Option<T> {
        if z < 0 || y < 0 || x < 0 {
            return None;
        }
        let v = Voxel::new(z as usize, y as usize, x as usize);
        self.contains(v).then(|| self.get(v))
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            dims: self.dims,
            data: self.data.iter().map(f).collect(),
        }
    }
}

fn check_spacing(spacing_mm: [f64; 3]) -> Result<()> {
    if spacing_mm.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::format("spacing_mm", format!("{spacing_mm:?} must be positive")))
    }
}

/// Four co-registered scans of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalVolume {
    /// Indexed by [`Modality::index`].
    pub scans: [Grid<f32>; 4],
    /// `[sz, sy, sx]`
    pub spacing_mm: [f64; 3],
    pub subject_id: String,
}

impl MultimodalVolume {
    pub fn new(scans: [Grid<f32>; 4], spacing_mm: [f64; 3], subject_id: impl Into<String>) -> Result<Self> {
        let dims = scans[0].dims();
        if let Some(bad) = scans.iter().find(|s| s.dims() != dims) {
            return Err(Error::Dimension(format!(
                "modality dims differ: {dims:?} vs {:?}",
                bad.dims()
            )));
        }
        check_spacing(spacing_mm)?;
        Ok(MultimodalVolume {
            scans,
            spacing_mm,
            subject_id: subject_id.into(),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.scans[0].dims()
    }

    pub fn scan(&self, m: Modality) -> &Grid<f32> {
        &self.scans[m.index()]
    }

    /// True when every modality is exactly zero at `offset`.
    #[inline]
    pub fn is_background(&self, offset: usize) -> bool {
        self.scans.iter().all(|s| s.data()[offset] == 0.0)
    }

    /// Per-modality z-score over nonzero voxels; zero voxels stay exactly zero.
    pub fn normalized(&self) -> MultimodalVolume {
        let mut out = self.clone();
        for scan in out.scans.iter_mut() {
            normalize_scan(scan.data_mut());
        }
        out
    }
}

pub const SIGMA_FLOOR: f64 = 1e-6;

fn normalize_scan(values: &mut [f32]) {
    let (mut n, mut sum) = (0usize, 0.0f64);
    for &v in values.iter().filter(|v| **v != 0.0) {
        n += 1;
        sum += v as f64;
    }
    if n == 0 {
        return;
    }
    let mean = sum / n as f64;
    let var = values
        .iter()
        .filter(|v| **v != 0.0)
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt().max(SIGMA_FLOOR);
    for v in values.iter_mut().filter(|v| **v != 0.0) {
        *v = ((*v as f64 - mean) / std) as f32;
    }
}

/// Per-modality z-score normalisation over nonzero voxels.
pub fn normalize(vol: &MultimodalVolume) -> MultimodalVolume {
    vol.normalized()
}

pub const DEFAULT_CLASSES: usize = 4;

/// Integer class map aligned with a [`MultimodalVolume`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub labels: Grid<u8>,
    pub classes: usize,
    pub spacing_mm: [f64; 3],
}

impl LabelVolume {
    pub fn new(labels: Grid<u8>, classes: usize, spacing_mm: [f64; 3]) -> Result<Self> {
        if let Some(&bad) = labels.data().iter().find(|&&v| v as usize >= classes) {
            return Err(Error::format(
                "labels",
                format!("label {bad} outside 0..{classes}"),
            ));
        }
        check_spacing(spacing_mm)?;
        Ok(LabelVolume {
            labels,
            classes,
            spacing_mm,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.labels.dims()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &v in self.labels.data() {
            h[v as usize] += 1;
        }
        h
    }
}
