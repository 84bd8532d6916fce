//! Cutting patches out of images according to a layout.

use image::imageops::{self, FilterType};
use image::GrayImage;
use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{patch_layout, PatchBox, PatchStrategy, PyramidSpec};

/// Dataset split an image belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split tag {other:?}"))),
        }
    }
}

/// A grayscale image with its category index.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub pixels: GrayImage,
    pub label: usize,
    pub split: Split,
}

impl LabeledImage {
    pub fn one_hot(&self, num_classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; num_classes];
        if self.label < num_classes {
            v[self.label] = 1.0;
        }
        v
    }
}

/// Patches of one image in layout order.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub boxes: Vec<PatchBox>,
    pub patches: Vec<GrayImage>,
    pub window: u32,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Writes the patches as `[1, window, window]` planes scaled to `[0, 1]`
    /// into `out`, which must hold `len() * window^2` values.
    pub fn write_planes(&self, out: &mut [f64]) {
        let plane = (self.window * self.window) as usize;
        for (p, dst) in self.patches.iter().zip(out.chunks_exact_mut(plane)) {
            for (d, s) in dst.iter_mut().zip(p.as_raw()) {
                *d = f64::from(*s) / 255.0;
            }
        }
    }

    /// `[m, 1, window, window]` network input.
    pub fn to_tensor(&self) -> Array4<f64> {
        let w = self.window as usize;
        let mut t = Array4::zeros((self.len(), 1, w, w));
        self.write_planes(t.as_slice_mut().expect("standard layout"));
        t
    }
}

/// Resize with a triangle (bilinear) filter, skipping the no-op case.
pub fn resize_to(image: &GrayImage, dims: (u32, u32)) -> GrayImage {
    if image.dimensions() == dims {
        image.clone()
    } else {
        imageops::resize(image, dims.0, dims.1, FilterType::Triangle)
    }
}

/// Cuts `boxes` out of `image` after resizing it to the pyramid's base
/// resolution and to each layer resolution the boxes reference.
pub fn extract_with_layout(image: &GrayImage, spec: &PyramidSpec, boxes: &[PatchBox]) -> Result<PatchSet> {
    spec.validate()?;
    let base = resize_to(image, spec.base_resolution());
    let mut layers: Vec<Option<GrayImage>> = vec![None; spec.layer_resolutions.len()];
    let mut patches = Vec::with_capacity(boxes.len());
    for b in boxes {
        let dims = *spec.layer_resolutions.get(b.layer).ok_or_else(|| {
            Error::InvalidGeometry(format!("box references missing layer {}", b.layer))
        })?;
        let layer = layers[b.layer].get_or_insert_with(|| resize_to(&base, dims));
        let r = b.in_layer;
        if r.w != spec.window_size || r.h != spec.window_size || r.right() > dims.0 || r.bottom() > dims.1 {
            return Err(Error::InvalidGeometry(format!("box {r:?} does not fit layer {}", b.layer)));
        }
        patches.push(imageops::crop_imm(layer, r.x, r.y, r.w, r.h).to_image());
    }
    Ok(PatchSet {
        boxes: boxes.to_vec(),
        patches,
        window: spec.window_size,
    })
}

/// Patches of `image` under `strategy`.
pub fn extract_patches(
    image: &GrayImage,
    strategy: PatchStrategy,
    spec: &PyramidSpec,
    alpha: f64,
) -> Result<PatchSet> {
    let boxes = patch_layout(strategy, spec, alpha)?;
    extract_with_layout(image, spec, &boxes)
}
