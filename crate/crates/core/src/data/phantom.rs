//! Synthetic nested-ellipsoid subjects.
//!
//! Brain (0) ⊃ edema (1) ⊃ non-enhancing core (2) ⊃ enhancing tumour (3),
//! each class drawing voxel intensities from its own Gaussian per modality.
//! Everything outside the brain is exactly zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Grid, LabelVolume, MultimodalVolume, DEFAULT_CLASSES};
use crate::error::{Error, Result};

pub const MIN_PHANTOM_EXTENT: usize = 32;

/// Intensity model: `class_means[class][modality]` with a shared noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub class_means: [[f32; 4]; 4],
    pub noise_std: f32,
    pub spacing_mm: [f64; 3],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            // FLAIR, T1, T1c, T2
            class_means: [
                [0.40, 0.60, 0.50, 0.40], // healthy tissue
                [0.90, 0.45, 0.45, 0.85], // edema: bright FLAIR/T2
                [0.60, 0.25, 0.30, 0.65], // necrotic / non-enhancing: dark T1
                [0.65, 0.45, 0.95, 0.55], // enhancing: bright T1c
            ],
            noise_std: 0.05,
            spacing_mm: [1.0, 1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn shrunk(&self, factor: f64, rng: &mut ChaCha8Rng) -> Ellipsoid {
        let mut radii = [0.0; 3];
        let mut center = self.center;
        for a in 0..3 {
            radii[a] = self.radii[a] * factor * rng.random_range(0.9..1.1);
            // keep the child inside its parent
            let slack = (self.radii[a] - radii[a]) * 0.4;
            center[a] += rng.random_range(-slack..=slack);
        }
        Ellipsoid { center, radii }
    }
}

/// Generates a `(volume, labels)` pair; `dims` is `[D,H,W]`, each ≥ 32.
pub fn generate_phantom(dims: [usize; 3], seed: u64, spec: &PhantomSpec) -> Result<(MultimodalVolume, LabelVolume)> {
    if dims.iter().any(|&d| d < MIN_PHANTOM_EXTENT) {
        return Err(Error::Usage(format!(
            "phantom dims {dims:?} below the {MIN_PHANTOM_EXTENT}³ minimum"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dims.map(|v| v as f64);
    let brain = Ellipsoid {
        center: std::array::from_fn(|a| d[a] / 2.0 + rng.random_range(-0.04..0.04) * d[a]),
        radii: std::array::from_fn(|a| d[a] * rng.random_range(0.38..0.43)),
    };
    let base = d.iter().copied().fold(f64::INFINITY, f64::min);
    let edema_r: [f64; 3] = std::array::from_fn(|_| base * rng.random_range(0.2..0.25));
    let edema = Ellipsoid {
        center: std::array::from_fn(|a| {
            let slack = (brain.radii[a] - edema_r[a]) * 0.45;
            brain.center[a] + rng.random_range(-slack..=slack)
        }),
        radii: edema_r,
    };
    let core = edema.shrunk(0.65, &mut rng);
    let enhancing = core.shrunk(0.6, &mut rng);
    let regions = [brain, edema, core, enhancing];

    let n: usize = dims.iter().product();
    let mut labels = Grid::filled(dims, 0u8);
    let mut scans: [Grid<f32>; 4] = std::array::from_fn(|_| Grid::filled(dims, 0.0));
    for offset in 0..n {
        let v = labels.voxel_at(offset);
        let p = [v.z as f64 + 0.5, v.y as f64 + 0.5, v.x as f64 + 0.5];
        let Some(class) = regions.iter().rposition(|e| e.contains(p)) else {
            continue;
        };
        labels.data_mut()[offset] = class as u8;
        for (m, scan) in scans.iter_mut().enumerate() {
            let z: f32 = rng.sample(StandardNormal);
            let value = spec.class_means[class][m] + spec.noise_std * z;
            // inside the brain no voxel may read as background
            scan.data_mut()[offset] = value.max(1e-3);
        }
    }
    let vol = MultimodalVolume::new(scans, spec.spacing_mm, format!("phantom-{seed}"))?;
    let labels = LabelVolume::new(labels, DEFAULT_CLASSES, spec.spacing_mm)?;
    Ok((vol, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_has_all_classes_and_background_majority() {
        let (_, lab) = generate_phantom([32, 32, 32], 1, &PhantomSpec::default()).unwrap();
        let h = lab.histogram();
        assert!(h.iter().all(|&c| c > 0), "{h:?}");
        assert!(h[0] > h[1] + h[2] + h[3]);
    }

    #[test]
    fn outside_brain_is_zero() {
        let (vol, lab) = generate_phantom([32, 34, 36], 2, &PhantomSpec::default()).unwrap();
        let mut outside = 0;
        for o in 0..lab.labels.len() {
            if vol.is_background(o) {
                outside += 1;
                assert_eq!(lab.labels.data()[o], 0);
            } else {
                assert!(vol.scans.iter().all(|s| s.data()[o] != 0.0));
            }
        }
        assert!(outside > 0);
        // corners are outside the brain ellipsoid
        assert!(vol.is_background(0));
    }

    #[test]
    fn same_seed_same_phantom() {
        let a = generate_phantom([32, 32, 32], 5, &PhantomSpec::default()).unwrap();
        let b = generate_phantom([32, 32, 32], 5, &PhantomSpec::default()).unwrap();
        let c = generate_phantom([32, 32, 32], 6, &PhantomSpec::default()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn too_small_is_usage_error() {
        assert!(matches!(
            generate_phantom([31, 40, 40], 0, &PhantomSpec::default()),
            Err(Error::Usage(_))
        ));
    }
}
