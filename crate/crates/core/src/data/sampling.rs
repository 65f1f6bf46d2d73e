use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::patch::{extract_labeled_patch, Augmentation, Patch3D};
use super::{LabelVolume, MultimodalVolume};
use crate::error::{Error, Result};

/// Per-class patch targets for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub targets: Vec<usize>,
    pub seed: u64,
}

impl SamplingPlan {
    pub fn balanced(per_class: usize, classes: usize, seed: u64) -> Self {
        SamplingPlan {
            targets: vec![per_class; classes],
            seed,
        }
    }

    /// How many times each class's available voxels are used; zero when a
    /// class has no voxels.
    pub fn multipliers(&self, available: &[usize]) -> Vec<f64> {
        self.targets
            .iter()
            .zip(available)
            .map(|(&t, &a)| if a == 0 { 0.0 } else { t as f64 / a as f64 })
            .collect()
    }
}

/// Draws the planned number of patches per class from voxels with at least
/// one nonzero modality. Classes with fewer voxels
/// than their target contribute every voxel once and are topped up with
/// flipped/rotated copies, cycling through the augmentations first. The
/// result is shuffled.
pub fn sample_training_set(
    vol: &MultimodalVolume,
    labels: &LabelVolume,
    plan: &SamplingPlan,
    size: usize,
    slices: usize,
) -> Result<Vec<Patch3D>> {
    if labels.dims() != vol.dims() {
        return Err(Error::Dimension(format!(
            "labels {:?} vs volume {:?}",
            labels.dims(),
            vol.dims()
        )));
    }
    if plan.targets.len() > labels.classes {
        return Err(Error::Usage(format!(
            "plan has {} classes, labels have {}",
            plan.targets.len(),
            labels.classes
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); labels.classes];
    for (offset, &c) in labels.labels.data().iter().enumerate() {
        // all-zero voxels are never classified at inference
        if !vol.is_background(offset) {
            by_class[c as usize].push(offset);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut out = Vec::with_capacity(plan.targets.iter().sum());
    for (class, &target) in plan.targets.iter().enumerate() {
        let pool = &by_class[class];
        if target == 0 {
            continue;
        }
        if pool.is_empty() {
            log::warn!(
                "class {class} has no voxels in subject `{}`; skipping its {target} patches",
                vol.subject_id
            );
            continue;
        }
        let chosen: Vec<usize> = if pool.len() >= target {
            index::sample(&mut rng, pool.len(), target)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        } else {
            pool.clone()
        };
        let originals: Vec<Patch3D> = chosen
            .iter()
            .map(|&o| extract_labeled_patch(vol, labels, labels.labels.voxel_at(o), size, slices))
            .collect::<Result<_>>()?;
        let extra = target - originals.len();
        for t in 0..extra {
            let k = Augmentation::ROUND_ROBIN.len();
            let src = &originals[(t / k) % originals.len()];
            let aug = Augmentation::ROUND_ROBIN[t % k];
            out.push(src.augmented(aug));
        }
        out.extend(originals);
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Samples every subject with the same per-class targets and seeds derived
/// from `plan.seed`, then shuffles the union.
pub fn sample_subjects(
    subjects: &[(MultimodalVolume, LabelVolume)],
    plan: &SamplingPlan,
    size: usize,
    slices: usize,
) -> Result<Vec<Patch3D>> {
    let mut all = Vec::new();
    for (i, (vol, labels)) in subjects.iter().enumerate() {
        let sub_plan = SamplingPlan {
            targets: plan.targets.clone(),
            seed: plan.seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)),
        };
        all.extend(sample_training_set(vol, labels, &sub_plan, size, slices)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0xa5a5_a5a5);
    all.shuffle(&mut rng);
    Ok(all)
}
