//! Glass-scene samples: synthetic generation, file I/O, augmentation and
//! dataset statistics.

pub mod pnm;
pub mod stats;
pub mod store;
pub mod synth;

pub use stats::{area_histogram, location_probability_map, AreaHistogram};
pub use store::{list_ids, load_dataset, save_dataset, MANIFEST};
pub use synth::{generate, RegionKind, SyntheticSceneSpec};

use crate::error::{Error, Result};
use crate::losses::boundary_gt;
use crate::mask::Mask;
use crate::tensor::{bilinear_resize, Tensor};

/// Image in `[0, 1]` with its glass mask and the boundary derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Mask,
    pub boundary: Mask,
}

pub fn mask_boundary(mask: &Mask) -> Mask {
    Mask::from_tensor(&boundary_gt(&mask.to_tensor()))
}

impl Sample {
    pub fn new(image: Tensor, mask: Mask) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 || s.h != mask.height() || s.w != mask.width() {
            return Err(Error::input(format!(
                "image {s} does not pair with {}x{} mask",
                mask.height(),
                mask.width()
            )));
        }
        let boundary = mask_boundary(&mask);
        Ok(Sample { image, mask, boundary })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.mask.height(), self.mask.width())
    }
}

pub fn hflip(sample: &Sample) -> Sample {
    let s = sample.image.shape();
    let image = Tensor::from_fn(s, |n, c, y, x| sample.image.at(n, c, y, s.w - 1 - x));
    Sample {
        image,
        mask: sample.mask.hflip(),
        boundary: sample.boundary.hflip(),
    }
}

/// Bilinear image resize; the mask is resized nearest-neighbour and the
/// boundary recomputed from it.
pub fn resize_sample(sample: &Sample, h: usize, w: usize) -> Result<Sample> {
    if sample.size() == (h, w) {
        return Ok(sample.clone());
    }
    let image = bilinear_resize(&sample.image, h, w)?;
    Sample::new(image, sample.mask.resize_nearest(h, w))
}
