//! Seeded training-time augmentation: flips, right-angle rotations and
//! brightness scaling.

use image::imageops;
use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Allowed rotations in degrees, drawn uniformly. Each must be a multiple
    /// of 90.
    pub rotations: Vec<u16>,
    /// Multiplicative brightness range.
    pub brightness: (f64, f64),
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotations: vec![0, 90, 180, 270],
            brightness: (0.8, 1.2),
        }
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    pub rotation: u16,
    pub brightness: f64,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            vflip: false,
            rotation: 0,
            brightness: 1.0,
        }
    }

    pub fn sample(spec: &AugmentSpec, rng: &mut impl Rng) -> Self {
        let hflip = rng.random_bool(spec.hflip_prob.clamp(0.0, 1.0));
        let vflip = rng.random_bool(spec.vflip_prob.clamp(0.0, 1.0));
        let rotation = if spec.rotations.is_empty() {
            0
        } else {
            spec.rotations[rng.random_range(0..spec.rotations.len())]
        };
        let (lo, hi) = spec.brightness;
        let brightness = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Self {
            hflip,
            vflip,
            rotation,
            brightness,
        }
    }

    pub fn apply(&self, image: &GrayImage) -> GrayImage {
        let mut out = image.clone();
        if self.hflip {
            imageops::flip_horizontal_in_place(&mut out);
        }
        if self.vflip {
            imageops::flip_vertical_in_place(&mut out);
        }
        out = match self.rotation % 360 {
            90 => imageops::rotate90(&out),
            180 => imageops::rotate180(&out),
            270 => imageops::rotate270(&out),
            _ => out,
        };
        if self.brightness != 1.0 {
            for p in out.pixels_mut() {
                p[0] = (f64::from(p[0]) * self.brightness).round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }
}

/// Augments `image` with parameters drawn from a generator seeded by `seed`.
pub fn augment(image: &GrayImage, spec: &AugmentSpec, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AugmentDraw::sample(spec, &mut rng).apply(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;

    fn sample() -> GrayImage {
        GrayImage::from_fn(6, 4, |x, y| Luma([(x * 40 + y * 7) as u8]))
    }

    #[test]
    fn identity_draw_is_noop() {
        assert_eq!(AugmentDraw::identity().apply(&sample()), sample());
        let spec = AugmentSpec {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotations: vec![0],
            brightness: (1.0, 1.0),
        };
        assert_eq!(augment(&sample(), &spec, 99), sample());
    }

    #[test]
    fn seeded_is_reproducible() {
        let spec = AugmentSpec::default();
        for seed in 0..10 {
            assert_eq!(augment(&sample(), &spec, seed), augment(&sample(), &spec, seed));
        }
    }

    #[test]
    fn half_turn_is_an_involution() {
        let d = AugmentDraw {
            rotation: 180,
            ..AugmentDraw::identity()
        };
        assert_eq!(d.apply(&d.apply(&sample())), sample());
        let q = AugmentDraw {
            rotation: 90,
            ..AugmentDraw::identity()
        };
        assert_eq!(q.apply(&sample()).dimensions(), (4, 6));
    }

    #[test]
    fn brightness_clamps() {
        let d = AugmentDraw {
            brightness: 1.2,
            ..AugmentDraw::identity()
        };
        let out = d.apply(&GrayImage::from_pixel(2, 2, Luma([250])));
        assert!(out.pixels().all(|p| p[0] == 255));
    }
}
