//! Procedural pavement corpus with known distress masks.

use std::path::Path;

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{CorpusManifest, ManifestEntry, NORMAL};
use super::split::stratified;
use crate::error::{Error, Result};

/// Largest allowed distress-pixel fraction per image.
pub const MAX_DISTRESS_FRACTION: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motif {
    /// Thin, roughly horizontal polyline.
    Transverse,
    /// Thin, roughly vertical polyline.
    Longitudinal,
    /// Mesh of thin cracks in a compact region.
    Alligator,
    /// Wide jagged band running top-left to bottom-right.
    Massive,
    /// Straight dark sealant band running bottom-left to top-right.
    Pouring,
    /// Cluster of small dark pits.
    Ravelling,
    /// Bright rectangular patch.
    Repair,
}

impl Motif {
    pub const ALL: [Motif; 7] = [
        Motif::Transverse,
        Motif::Longitudinal,
        Motif::Alligator,
        Motif::Massive,
        Motif::Pouring,
        Motif::Ravelling,
        Motif::Repair,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Motif::Transverse => "transverse",
            Motif::Longitudinal => "longitudinal",
            Motif::Alligator => "alligator",
            Motif::Massive => "massive",
            Motif::Pouring => "pouring",
            Motif::Ravelling => "ravelling",
            Motif::Repair => "repair",
        }
    }
}

/// Class names for a `classes`-way corpus: `normal` first, then one motif per
/// class, or a single `distressed` class mixing every motif.
pub fn class_names(classes: usize) -> Result<Vec<String>> {
    match classes {
        0 | 1 => Err(Error::InvalidConfig(format!("need at least 2 classes, got {classes}"))),
        2 => Ok(vec![NORMAL.into(), "distressed".into()]),
        c if c <= Motif::ALL.len() + 1 => Ok(std::iter::once(NORMAL.to_string())
            .chain(Motif::ALL[..c - 1].iter().map(|m| m.name().to_string()))
            .collect()),
        c => Err(Error::InvalidConfig(format!(
            "at most {} classes are available, got {c}",
            Motif::ALL.len() + 1
        ))),
    }
}

/// One rendered image with its ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub image: GrayImage,
    /// Nonzero where distress was drawn.
    pub mask: GrayImage,
    /// The image before any distress was drawn.
    pub background: GrayImage,
}

impl SyntheticSample {
    pub fn distress_fraction(&self) -> f64 {
        let (w, h) = self.mask.dimensions();
        self.mask.pixels().filter(|p| p[0] != 0).count() as f64 / (w as f64 * h as f64)
    }
}

/// Textured asphalt-like background: base gray, low-frequency shading and
/// fine grain.
pub fn background(dims: (u32, u32), rng: &mut ChaCha8Rng) -> GrayImage {
    let (w, h) = dims;
    let base: f64 = rng.random_range(110.0..150.0);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(2.0..6.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut img = GrayImage::new(w, h);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
        let shade: f64 = waves
            .iter()
            .map(|&(amp, freq, px, py)| amp * ((freq * 6.283 * u + px).sin() * (freq * 6.283 * v + py).cos()))
            .sum();
        let grain: f64 = rng.random_range(-4.0..4.0);
        *p = Luma([(base + shade + grain).round().clamp(0.0, 255.0) as u8]);
    }
    img
}

/// Squared distance from `p` to segment `a`-`b`.
fn segment_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    qx * qx + qy * qy
}

fn stamp_segment(mask: &mut GrayImage, a: (f64, f64), b: (f64, f64), radius: f64) {
    let (w, h) = mask.dimensions();
    let x0 = (a.0.min(b.0) - radius).floor().max(0.0) as u32;
    let y0 = (a.1.min(b.1) - radius).floor().max(0.0) as u32;
    let x1 = ((a.0.max(b.0) + radius).ceil().max(0.0) as u32).min(w.saturating_sub(1));
    let y1 = ((a.1.max(b.1) + radius).ceil().max(0.0) as u32).min(h.saturating_sub(1));
    let r2 = radius * radius;
    for y in y0..=y1 {
        for x in x0..=x1 {
            if segment_dist2((x as f64 + 0.5, y as f64 + 0.5), a, b) <= r2 {
                mask.put_pixel(x, y, Luma([255]));
            }
        }
    }
}

fn stamp_polyline(mask: &mut GrayImage, points: &[(f64, f64)], radius: f64) {
    for pair in points.windows(2) {
        stamp_segment(mask, pair[0], pair[1], radius);
    }
}

/// Points from `a` to `b` with perpendicular jitter of up to `jitter` pixels.
fn jittered_line(a: (f64, f64), b: (f64, f64), segments: usize, jitter: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = (dx * dx + dy * dy).sqrt().max(1e-9);
    let (nx, ny) = (-dy / len, dx / len);
    (0..=segments)
        .map(|i| {
            let t = i as f64 / segments as f64;
            let off = if i == 0 || i == segments || jitter == 0.0 {
                0.0
            } else {
                rng.random_range(-jitter..jitter)
            };
            (a.0 + t * dx + off * nx, a.1 + t * dy + off * ny)
        })
        .collect()
}

/// Draws `motif` into a mask, returning the mask and the gray offset for
/// distress pixels.
fn draw_motif(motif: Motif, dims: (u32, u32), rng: &mut ChaCha8Rng) -> (GrayImage, f64) {
    let (w, h) = dims;
    let (wf, hf) = (w as f64, h as f64);
    let s = wf.min(hf) / 900.0;
    let r = |v: f64| (v * s).max(1.0);
    let mut mask = GrayImage::new(w, h);
    let dark = -rng.random_range(55.0..85.0);
    match motif {
        Motif::Transverse => {
            let y = rng.random_range(0.15..0.85) * hf;
            let a = (rng.random_range(0.02..0.2) * wf, y + rng.random_range(-0.05..0.05) * hf);
            let b = (rng.random_range(0.8..0.98) * wf, y + rng.random_range(-0.05..0.05) * hf);
            let pts = jittered_line(a, b, 12, 0.015 * hf, rng);
            stamp_polyline(&mut mask, &pts, r(rng.random_range(1.5..2.8)));
        }
        Motif::Longitudinal => {
            let x = rng.random_range(0.15..0.85) * wf;
            let a = (x + rng.random_range(-0.05..0.05) * wf, rng.random_range(0.02..0.2) * hf);
            let b = (x + rng.random_range(-0.05..0.05) * wf, rng.random_range(0.8..0.98) * hf);
            let pts = jittered_line(a, b, 12, 0.015 * wf, rng);
            stamp_polyline(&mut mask, &pts, r(rng.random_range(1.5..2.8)));
        }
        Motif::Alligator => {
            let size = rng.random_range(200.0..280.0) * s;
            let cx = rng.random_range(size / 2.0..wf - size / 2.0);
            let cy = rng.random_range(size / 2.0..hf - size / 2.0);
            let n = 6;
            let cell = size / (n - 1) as f64;
            let grid: Vec<Vec<(f64, f64)>> = (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| {
                            (
                                cx - size / 2.0 + j as f64 * cell + rng.random_range(-0.25..0.25) * cell,
                                cy - size / 2.0 + i as f64 * cell + rng.random_range(-0.25..0.25) * cell,
                            )
                        })
                        .collect()
                })
                .collect();
            let radius = r(rng.random_range(1.3..2.0));
            for i in 0..n {
                for j in 0..n {
                    if j + 1 < n {
                        stamp_segment(&mut mask, grid[i][j], grid[i][j + 1], radius);
                    }
                    if i + 1 < n {
                        stamp_segment(&mut mask, grid[i][j], grid[i + 1][j], radius);
                    }
                }
            }
        }
        Motif::Massive => {
            let len = rng.random_range(450.0..650.0) * s;
            let angle = rng.random_range(0.55..1.0f64);
            let (dx, dy) = (len * angle.cos(), len * angle.sin());
            let a = (rng.random_range(0.0..(wf - dx).max(1.0)), rng.random_range(0.0..(hf - dy).max(1.0)));
            let pts = jittered_line(a, (a.0 + dx, a.1 + dy), 10, 18.0 * s, rng);
            stamp_polyline(&mut mask, &pts, r(rng.random_range(6.0..9.0)));
        }
        Motif::Pouring => {
            let len = rng.random_range(500.0..750.0) * s;
            let angle = rng.random_range(0.55..1.0f64);
            let (dx, dy) = (len * angle.cos(), len * angle.sin());
            let a = (
                rng.random_range(0.0..(wf - dx).max(1.0)),
                rng.random_range(dy.min(hf - 1.0)..hf),
            );
            stamp_segment(&mut mask, a, (a.0 + dx, a.1 - dy), r(rng.random_range(4.0..6.0)));
            return (mask, -rng.random_range(90.0..105.0));
        }
        Motif::Ravelling => {
            let size = rng.random_range(180.0..260.0) * s;
            let cx = rng.random_range(size / 2.0..wf - size / 2.0);
            let cy = rng.random_range(size / 2.0..hf - size / 2.0);
            for _ in 0..rng.random_range(50..90) {
                let p = (
                    cx + rng.random_range(-0.5..0.5) * size,
                    cy + rng.random_range(-0.5..0.5) * size,
                );
                stamp_segment(&mut mask, p, p, r(rng.random_range(2.0..5.0)));
            }
        }
        Motif::Repair => {
            let rw = rng.random_range(150.0..300.0) * s;
            let rh = rng.random_range(100.0..250.0) * s;
            let x0 = rng.random_range(0.0..(wf - rw).max(1.0));
            let y0 = rng.random_range(0.0..(hf - rh).max(1.0));
            for y in y0 as u32..((y0 + rh) as u32).min(h) {
                for x in x0 as u32..((x0 + rw) as u32).min(w) {
                    mask.put_pixel(x, y, Luma([255]));
                }
            }
            return (mask, rng.random_range(40.0..60.0));
        }
    }
    (mask, dark)
}

/// Renders one image of `motif` (or a clean image for `None`).
pub fn render_sample(motif: Option<Motif>, dims: (u32, u32), rng: &mut ChaCha8Rng) -> SyntheticSample {
    let bg = background(dims, rng);
    let Some(motif) = motif else {
        return SyntheticSample {
            image: bg.clone(),
            mask: GrayImage::new(dims.0, dims.1),
            background: bg,
        };
    };
    loop {
        let (mask, offset) = draw_motif(motif, dims, rng);
        let sample = SyntheticSample {
            image: bg.clone(),
            mask,
            background: bg.clone(),
        };
        let f = sample.distress_fraction();
        if f == 0.0 || f > MAX_DISTRESS_FRACTION {
            continue;
        }
        let mut sample = sample;
        for (x, y, m) in sample.mask.enumerate_pixels() {
            if m[0] != 0 {
                let v = sample.background.get_pixel(x, y)[0] as f64 + offset + rng.random_range(-6.0..6.0);
                sample.image.put_pixel(x, y, Luma([v.round().clamp(0.0, 255.0) as u8]));
            }
        }
        return sample;
    }
}

/// Renders the `index`-th image of class `class` of a `classes`-way corpus.
pub fn render_class_sample(class: usize, classes: usize, index: usize, dims: (u32, u32), seed: u64) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class as u64) << 32) | index as u64);
    let motif = match (class, classes) {
        (0, _) => None,
        (_, 2) => Some(Motif::ALL[rng.random_range(0..Motif::ALL.len())]),
        (c, _) => Some(Motif::ALL[c - 1]),
    };
    render_sample(motif, dims, &mut rng)
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub per_class: usize,
    pub classes: usize,
    pub dims: (u32, u32),
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            per_class: 40,
            classes: 8,
            dims: (1200, 900),
            seed: 0,
            train_fraction: 0.75,
        }
    }
}

/// Writes `<class>/<class>_<i>.png` images, `_mask.png` masks for distressed
/// images and `manifest.tsv` under `out_dir`.
pub fn generate_synthetic_corpus(out_dir: &Path, spec: &SyntheticSpec) -> Result<CorpusManifest> {
    let names = class_names(spec.classes)?;
    if !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(Error::InvalidConfig(format!(
            "train fraction must lie in [0, 1], got {}",
            spec.train_fraction
        )));
    }
    if spec.dims.0 == 0 || spec.dims.1 == 0 {
        return Err(Error::InvalidConfig("image dimensions must be positive".into()));
    }
    let mut entries = Vec::new();
    let mut per_class = vec![Vec::new(); names.len()];
    for (c, name) in names.iter().enumerate() {
        std::fs::create_dir_all(out_dir.join(name))?;
        for i in 0..spec.per_class {
            let sample = render_class_sample(c, spec.classes, i, spec.dims, spec.seed);
            let stem = format!("{name}_{i:04}");
            sample.image.save(out_dir.join(name).join(format!("{stem}.png")))?;
            if c != 0 {
                sample.mask.save(out_dir.join(name).join(format!("{stem}_mask.png")))?;
            }
            per_class[c].push(entries.len());
            entries.push(ManifestEntry {
                path: format!("{name}/{stem}.png"),
                class: name.clone(),
                split: crate::patches::Split::Train,
            });
        }
    }
    for (id, split) in stratified(&per_class, spec.train_fraction, spec.seed) {
        entries[id].split = split;
    }
    let manifest = CorpusManifest::new(out_dir, spec.seed, names, entries)?;
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Path of the mask written next to a synthetic image.
pub fn mask_path(image_path: &Path) -> std::path::PathBuf {
    let stem = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    image_path.with_file_name(format!("{stem}_mask.png"))
}
