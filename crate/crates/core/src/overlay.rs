//! Patch-label overlays: tinted patch boxes with top-class tags, plus a
//! line-oriented sidecar listing each box and its confidence row.

use std::fmt::Write as _;
use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};

use crate::geometry::PatchBox;
use crate::model::{argmax, ConfidenceMatrix, PatchClassifier};
use crate::{Error, Result};

/// Tags are drawn for boxes whose top confidence exceeds this.
pub const TAG_THRESHOLD: f64 = 0.5;

const PALETTE: [[u8; 3]; 8] = [
    [46, 204, 113],
    [231, 76, 60],
    [52, 152, 219],
    [241, 196, 15],
    [155, 89, 182],
    [230, 126, 34],
    [26, 188, 156],
    [236, 64, 122],
];

/// 3x5 digit glyphs, one row per entry, most significant bit leftmost.
const DIGITS: [[u8; 5]; 10] = [
    [7, 5, 5, 5, 7],
    [2, 6, 2, 2, 7],
    [7, 1, 7, 4, 7],
    [7, 1, 7, 1, 7],
    [5, 5, 7, 1, 1],
    [7, 4, 7, 1, 7],
    [7, 4, 7, 5, 7],
    [7, 1, 1, 1, 1],
    [7, 5, 7, 5, 7],
    [7, 5, 7, 1, 7],
];

pub fn class_color(class: usize) -> [u8; 3] {
    PALETTE[class % PALETTE.len()]
}

/// One overlay box: its geometry, confidence row and the drawn tag if any.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlayBox {
    pub patch: PatchBox,
    pub confidences: Vec<f64>,
    pub tag: Option<usize>,
}

impl OverlayBox {
    pub fn max_confidence(&self) -> f64 {
        self.confidences.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct OverlayArtifact {
    pub image: RgbImage,
    pub boxes: Vec<OverlayBox>,
    pub class_names: Vec<String>,
}

/// Tab-separated geometry columns of one box.
pub fn box_fields(b: &PatchBox) -> String {
    let (l, s) = (b.in_layer, b.in_source);
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        b.layer, b.col, b.row, l.x, l.y, l.w, l.h, s.x, s.y, s.w, s.h
    )
}

const BOX_HEADER: &str = "layer\tcol\trow\tlayer_x\tlayer_y\tlayer_w\tlayer_h\tx\ty\tw\th";

/// The patch layout as sidecar geometry lines, header first.
pub fn layout_text(boxes: &[PatchBox]) -> String {
    let mut out = format!("{BOX_HEADER}\n");
    for b in boxes {
        let _ = writeln!(out, "{}", box_fields(b));
    }
    out
}

impl OverlayArtifact {
    /// Sidecar text: the layout columns followed by one column per class.
    pub fn sidecar(&self) -> String {
        let mut out = String::from(BOX_HEADER);
        for name in &self.class_names {
            let _ = write!(out, "\t{name}");
        }
        out.push('\n');
        for b in &self.boxes {
            out.push_str(&box_fields(&b.patch));
            for c in &b.confidences {
                let _ = write!(out, "\t{c}");
            }
            out.push('\n');
        }
        out
    }

    /// Writes `overlay.png` and `overlay.tsv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.image.save(dir.join("overlay.png"))?;
        std::fs::write(dir.join("overlay.tsv"), self.sidecar())?;
        Ok(())
    }
}

fn blend(px: &mut Rgb<u8>, color: [u8; 3], alpha: f64) {
    for (c, &t) in px.0.iter_mut().zip(&color) {
        *c = (f64::from(*c) * (1.0 - alpha) + f64::from(t) * alpha).round() as u8;
    }
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, color: [u8; 3], alpha: f64) {
    let (x1, y1) = ((x0 + w).min(img.width()), (y0 + h).min(img.height()));
    for y in y0..y1 {
        for x in x0..x1 {
            blend(img.get_pixel_mut(x, y), color, alpha);
        }
    }
}

fn outline(img: &mut RgbImage, b: &PatchBox, color: [u8; 3], alpha: f64, width: u32) {
    let r = b.in_source;
    let t = width.min(r.w / 2).min(r.h / 2).max(1);
    fill(img, r.x, r.y, r.w, t, color, alpha);
    fill(img, r.x, r.bottom().saturating_sub(t), r.w, t, color, alpha);
    fill(img, r.x, r.y + t, t, r.h.saturating_sub(2 * t), color, alpha);
    fill(img, r.right().saturating_sub(t), r.y + t, t, r.h.saturating_sub(2 * t), color, alpha);
}

/// Class-colored tag with the class index in white digits at the box corner.
fn tag(img: &mut RgbImage, b: &PatchBox, class: usize, scale: u32) {
    let digits: Vec<usize> = class.to_string().bytes().map(|d| usize::from(d - b'0')).collect();
    let (w, h) = ((4 * digits.len() as u32 + 1) * scale, 7 * scale);
    let (x0, y0) = (b.in_source.x, b.in_source.y);
    fill(img, x0, y0, w, h, class_color(class), 1.0);
    for (i, &d) in digits.iter().enumerate() {
        for (row, bits) in DIGITS[d].iter().enumerate() {
            for col in 0..3u32 {
                if bits >> (2 - col) & 1 == 1 {
                    let x = x0 + (1 + 4 * i as u32 + col) * scale;
                    let y = y0 + (1 + row as u32) * scale;
                    fill(img, x, y, scale, scale, [255, 255, 255], 1.0);
                }
            }
        }
    }
}

/// Renders confidences over `image`. Each box is tinted with the color of its
/// top class at alpha equal to its top confidence; coarser layers are drawn
/// first so finer boxes stay visible.
pub fn render(image: &GrayImage, boxes: &[PatchBox], s: &ConfidenceMatrix, class_names: &[String]) -> Result<OverlayArtifact> {
    if s.patches() != boxes.len() || s.classes() != class_names.len() {
        return Err(Error::Shape(format!(
            "confidences are {}x{}, layout has {} boxes and {} classes",
            s.patches(),
            s.classes(),
            boxes.len(),
            class_names.len()
        )));
    }
    let mut canvas = RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let v = image.get_pixel(x, y)[0];
        Rgb([v, v, v])
    });
    let overlay: Vec<OverlayBox> = boxes
        .iter()
        .zip(s.values.rows())
        .map(|(b, row)| {
            let confidences = row.to_vec();
            let top = argmax(&confidences);
            OverlayBox {
                patch: *b,
                tag: (confidences[top] > TAG_THRESHOLD).then_some(top),
                confidences,
            }
        })
        .collect();
    let scale = (image.width().min(image.height()) / 150).max(1);
    let mut order: Vec<usize> = (0..overlay.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(overlay[i].patch.layer));
    for &i in &order {
        let b = &overlay[i];
        let alpha = b.max_confidence().clamp(0.0, 1.0);
        let color = class_color(argmax(&b.confidences));
        fill(
            &mut canvas,
            b.patch.in_source.x,
            b.patch.in_source.y,
            b.patch.in_source.w,
            b.patch.in_source.h,
            color,
            alpha * 0.5,
        );
        outline(&mut canvas, &b.patch, color, alpha, 2 * scale);
    }
    for &i in &order {
        if let Some(c) = overlay[i].tag {
            tag(&mut canvas, &overlay[i].patch, c, scale);
        }
    }
    Ok(OverlayArtifact {
        image: canvas,
        boxes: overlay,
        class_names: class_names.to_vec(),
    })
}

/// Runs `model` on `image` and renders its patch confidences at the
/// resolution the model works at.
pub fn visualize(model: &mut PatchClassifier, image: &GrayImage) -> Result<OverlayArtifact> {
    let dims = model.config.pyramid.base_resolution();
    let resized = crate::patches::resize_to(image, dims);
    let prediction = model.predict(&resized)?;
    let layout = model.layout().to_vec();
    render(&resized, &layout, &prediction.confidences, &model.config.class_names)
}
