//! Erasing annotated distress by nearest-neighbour fill.

use image::GrayImage;

use crate::error::{Error, Result};

/// A distressed image with its pixel mask; nonzero mask pixels are distress.
#[derive(Clone, Debug)]
pub struct MaskedCrackImage {
    pub image: GrayImage,
    pub mask: GrayImage,
}

impl MaskedCrackImage {
    pub fn new(image: GrayImage, mask: GrayImage) -> Result<Self> {
        if image.dimensions() != mask.dimensions() {
            return Err(Error::Synthesis(format!(
                "mask {:?} does not match image {:?}",
                mask.dimensions(),
                image.dimensions()
            )));
        }
        Ok(Self { image, mask })
    }

    pub fn masked_pixels(&self) -> usize {
        self.mask.pixels().filter(|p| p[0] != 0).count()
    }
}

/// Replaces every masked pixel by its nearest unmasked pixel in Euclidean
/// distance, ties going to the smaller row and then the smaller column.
pub fn synthesize_normal(crack: &MaskedCrackImage) -> Result<GrayImage> {
    let (w, h) = crack.image.dimensions();
    let (w, h) = (w as i64, h as i64);
    let masked = |x: i64, y: i64| crack.mask.get_pixel(x as u32, y as u32)[0] != 0;
    let total = crack.masked_pixels();
    if total == 0 {
        return Ok(crack.image.clone());
    }
    if total as i64 == w * h {
        return Err(Error::Synthesis("mask covers the whole image".into()));
    }
    let mut out = crack.image.clone();
    for y in 0..h {
        for x in 0..w {
            if !masked(x, y) {
                continue;
            }
            // Pixels on Chebyshev ring r lie at squared distance >= r^2.
            let mut best: Option<(i64, i64, i64)> = None;
            let mut r = 1i64;
            loop {
                if best.is_some_and(|(d, _, _)| r * r > d) || r > w.max(h) {
                    break;
                }
                for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                    let on_edge = (yy - y).abs() == r;
                    let xs: Vec<i64> = if on_edge {
                        ((x - r).max(0)..=(x + r).min(w - 1)).collect()
                    } else {
                        [x - r, x + r].into_iter().filter(|&c| c >= 0 && c < w).collect()
                    };
                    for xx in xs {
                        if masked(xx, yy) {
                            continue;
                        }
                        let key = ((xx - x).pow(2) + (yy - y).pow(2), yy, xx);
                        if best.is_none_or(|b| key < b) {
                            best = Some(key);
                        }
                    }
                }
                r += 1;
            }
            let (_, by, bx) = best.expect("an unmasked pixel exists");
            out.put_pixel(x as u32, y as u32, *crack.image.get_pixel(bx as u32, by as u32));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;
    use proptest::prelude::*;

    /// Scans every unmasked pixel for every masked one.
    fn brute_force(crack: &MaskedCrackImage) -> GrayImage {
        let (w, h) = crack.image.dimensions();
        let mut out = crack.image.clone();
        for y in 0..h {
            for x in 0..w {
                if crack.mask.get_pixel(x, y)[0] == 0 {
                    continue;
                }
                let mut best = (i64::MAX, 0, 0);
                for yy in 0..h {
                    for xx in 0..w {
                        if crack.mask.get_pixel(xx, yy)[0] != 0 {
                            continue;
                        }
                        let d = (xx as i64 - x as i64).pow(2) + (yy as i64 - y as i64).pow(2);
                        best = best.min((d, yy, xx));
                    }
                }
                out.put_pixel(x, y, *crack.image.get_pixel(best.2, best.1));
            }
        }
        out
    }

    #[test]
    fn empty_mask_is_identity() {
        let img = GrayImage::from_fn(9, 7, |x, y| Luma([(x * 20 + y) as u8]));
        let c = MaskedCrackImage::new(img.clone(), GrayImage::new(9, 7)).unwrap();
        assert_eq!(synthesize_normal(&c).unwrap(), img);
    }

    #[test]
    fn single_pixel_takes_surrounding_gray() {
        let mut img = GrayImage::from_pixel(5, 5, Luma([128]));
        img.put_pixel(2, 2, Luma([0]));
        let mut mask = GrayImage::new(5, 5);
        mask.put_pixel(2, 2, Luma([255]));
        let out = synthesize_normal(&MaskedCrackImage::new(img, mask).unwrap()).unwrap();
        assert_eq!(out.get_pixel(2, 2)[0], 128);
    }

    #[test]
    fn ties_prefer_upper_then_left() {
        let img = GrayImage::from_fn(3, 3, |x, y| Luma([(y * 3 + x) as u8]));
        let mut mask = GrayImage::new(3, 3);
        mask.put_pixel(1, 1, Luma([1]));
        let out = synthesize_normal(&MaskedCrackImage::new(img, mask).unwrap()).unwrap();
        // (1,0) above beats (0,1), (2,1) and (1,2) at the same distance.
        assert_eq!(out.get_pixel(1, 1)[0], 1);
    }

    #[test]
    fn full_mask_is_an_error() {
        let c = MaskedCrackImage::new(GrayImage::new(4, 4), GrayImage::from_pixel(4, 4, Luma([255]))).unwrap();
        assert!(matches!(synthesize_normal(&c), Err(Error::Synthesis(_))));
        assert!(MaskedCrackImage::new(GrayImage::new(4, 4), GrayImage::new(3, 4)).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force_and_is_idempotent(
            pixels in prop::collection::vec(any::<u8>(), 12 * 10),
            mask_bits in prop::collection::vec(prop::bool::weighted(0.35), 12 * 10),
        ) {
            prop_assume!(mask_bits.iter().any(|b| !b));
            let img = GrayImage::from_vec(12, 10, pixels).unwrap();
            let mask = GrayImage::from_vec(12, 10, mask_bits.iter().map(|&b| b as u8 * 255).collect()).unwrap();
            let c = MaskedCrackImage::new(img, mask.clone()).unwrap();
            let once = synthesize_normal(&c).unwrap();
            prop_assert_eq!(&once, &brute_force(&c));
            let twice = synthesize_normal(&MaskedCrackImage::new(once.clone(), mask).unwrap()).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
