use serde::{Deserialize, Serialize};

use super::{LabelVolume, Modality, MultimodalVolume, Voxel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label-preserving in-plane transform used to top up rare classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Augmentation {
    FlipX,
    FlipY,
    Rot180,
}

impl Augmentation {
    pub const ROUND_ROBIN: [Augmentation; 3] =
        [Augmentation::FlipX, Augmentation::FlipY, Augmentation::Rot180];

    fn source(self, i: usize, j: usize, w: usize) -> (usize, usize) {
        match self {
            Augmentation::FlipX => (i, w - 1 - j),
            Augmentation::FlipY => (w - 1 - i, j),
            Augmentation::Rot180 => (w - 1 - i, w - 1 - j),
        }
    }
}

/// One `L×ω×ω` crop per modality centred on a voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch3D {
    /// Channel order follows [`Modality::ALL`]; each tensor is `[L×ω×ω]`.
    pub modalities: [Tensor<f32>; 4],
    pub center: Voxel,
    pub label: Option<u8>,
    pub augmentation: Option<Augmentation>,
}

impl Patch3D {
    pub fn size(&self) -> usize {
        self.modalities[0].shape()[1]
    }

    pub fn slices(&self) -> usize {
        self.modalities[0].shape()[0]
    }

    pub fn modality(&self, m: Modality) -> &Tensor<f32> {
        &self.modalities[m.index()]
    }

    /// Applies an in-plane transform to every slice of every modality.
    pub fn augmented(&self, aug: Augmentation) -> Patch3D {
        let w = self.size();
        let area = w * w;
        let modalities = std::array::from_fn(|m| {
            let src = self.modalities[m].data();
            let mut out = vec![0.0f32; src.len()];
            for (slice_out, slice_in) in out.chunks_exact_mut(area).zip(src.chunks_exact(area)) {
                for i in 0..w {
                    for j in 0..w {
                        let (si, sj) = aug.source(i, j, w);
                        slice_out[i * w + j] = slice_in[si * w + sj];
                    }
                }
            }
            Tensor::new(self.modalities[m].shape(), out).expect("same shape")
        });
        Patch3D {
            modalities,
            center: self.center,
            label: self.label,
            augmentation: Some(aug),
        }
    }
}

fn check_geometry(size: usize, slices: usize) -> Result<()> {
    if size.is_multiple_of(2) || slices.is_multiple_of(2) || size == 0 || slices == 0 {
        return Err(Error::Usage(format!(
            "patch extents must be odd, got ω={size}, L={slices}"
        )));
    }
    Ok(())
}

/// Crops `L` slices along z and `ω×ω` in-plane around `center`; voxels
/// outside the volume read as zero. Local index `(L/2, ω/2, ω/2)` is the centre.
pub fn extract_patch(vol: &MultimodalVolume, center: Voxel, size: usize, slices: usize) -> Result<Patch3D> {
    check_geometry(size, slices)?;
    let dims = vol.dims();
    if center.z >= dims[0] || center.y >= dims[1] || center.x >= dims[2] {
        return Err(Error::Usage(format!(
            "patch centre {center:?} outside volume {dims:?}"
        )));
    }
    let (hl, hw) = ((slices / 2) as isize, (size / 2) as isize);
    let (cz, cy, cx) = (center.z as isize, center.y as isize, center.x as isize);
    let modalities = std::array::from_fn(|m| {
        let scan = &vol.scans[m];
        let mut data = vec![0.0f32; slices * size * size];
        for l in 0..slices {
            let z = cz + l as isize - hl;
            if z < 0 || z >= dims[0] as isize {
                continue;
            }
            for i in 0..size {
                let y = cy + i as isize - hw;
                if y < 0 || y >= dims[1] as isize {
                    continue;
                }
                let row = &scan.data()[(z as usize * dims[1] + y as usize) * dims[2]..][..dims[2]];
                let dst = &mut data[(l * size + i) * size..][..size];
                for (j, d) in dst.iter_mut().enumerate() {
                    let x = cx + j as isize - hw;
                    if x >= 0 && x < dims[2] as isize {
                        *d = row[x as usize];
                    }
                }
            }
        }
        Tensor::new(&[slices, size, size], data).expect("patch shape")
    });
    Ok(Patch3D {
        modalities,
        center,
        label: None,
        augmentation: None,
    })
}

/// [`extract_patch`] plus the ground-truth label of the centre voxel.
pub fn extract_labeled_patch(
    vol: &MultimodalVolume,
    labels: &LabelVolume,
    center: Voxel,
    size: usize,
    slices: usize,
) -> Result<Patch3D> {
    if labels.dims() != vol.dims() {
        return Err(Error::Dimension(format!(
            "labels {:?} vs volume {:?}",
            labels.dims(),
            vol.dims()
        )));
    }
    let mut p = extract_patch(vol, center, size, slices)?;
    p.label = Some(labels.labels.get(center));
    Ok(p)
}
