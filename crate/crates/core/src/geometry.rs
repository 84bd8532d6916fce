//! Patch grids over single images and image pyramids.
//!
//! Every layout is a deterministic, row-major list of [`PatchBox`]es. Boxes
//! carry both their coordinates inside the (possibly resized) pyramid layer
//! they were cut from and the corresponding footprint in the source image,
//! which is what sparse sampling maximizes coverage over.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of combinations [`sparse_sample`] will enumerate.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x < other.right()
            && other.x < self.right()
            && self.y < other.bottom()
            && other.y < self.bottom()
    }
}

/// One square patch of a layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchBox {
    /// Pyramid layer, 0 being full resolution.
    pub layer: usize,
    pub col: usize,
    pub row: usize,
    pub in_layer: Rect,
    pub in_source: Rect,
}

/// Layer resolutions and the sliding window run over each of them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidSpec {
    /// `(width, height)` per layer, finest first.
    pub layer_resolutions: Vec<(u32, u32)>,
    pub window_size: u32,
    pub stride: u32,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        Self {
            layer_resolutions: vec![(1200, 900), (600, 600), (300, 300)],
            window_size: 300,
            stride: 300,
        }
    }
}

impl PyramidSpec {
    /// A pyramid with only the full-resolution layer.
    pub fn single_layer(width: u32, height: u32, window_size: u32, stride: u32) -> Self {
        Self {
            layer_resolutions: vec![(width, height)],
            window_size,
            stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_resolutions.is_empty() {
            return Err(Error::InvalidGeometry("pyramid has no layers".into()));
        }
        if self.window_size == 0 || self.stride == 0 {
            return Err(Error::InvalidGeometry(format!(
                "window {} and stride {} must be positive",
                self.window_size, self.stride
            )));
        }
        for (l, &(w, h)) in self.layer_resolutions.iter().enumerate() {
            if w < self.window_size || h < self.window_size {
                return Err(Error::InvalidGeometry(format!(
                    "layer {l} is {w}x{h}, smaller than the {} px window",
                    self.window_size
                )));
            }
        }
        Ok(())
    }

    /// Resolution images are resized to before patching.
    pub fn base_resolution(&self) -> (u32, u32) {
        self.layer_resolutions[0]
    }

    /// Number of windows per layer.
    pub fn layer_counts(&self) -> Vec<usize> {
        self.layer_resolutions
            .iter()
            .map(|&(w, h)| grid_dims(w, h, self.window_size, self.stride).map_or(0, |(c, r)| c * r))
            .collect()
    }
}

/// Which patches are collected from an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PatchStrategy {
    /// Full-resolution grid only.
    #[serde(rename = "sw")]
    SlideWindow,
    /// Grid over every pyramid layer.
    #[serde(rename = "ip")]
    ImagePyramid,
    /// Coverage-maximizing subset of the pyramid grid.
    #[serde(rename = "ss")]
    SparseSampling,
}

impl PatchStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            PatchStrategy::SlideWindow => "sw",
            PatchStrategy::ImagePyramid => "ip",
            PatchStrategy::SparseSampling => "ss",
        }
    }
}

impl std::str::FromStr for PatchStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sw" => Ok(PatchStrategy::SlideWindow),
            "ip" => Ok(PatchStrategy::ImagePyramid),
            "ss" => Ok(PatchStrategy::SparseSampling),
            other => Err(Error::InvalidConfig(format!("unknown patch strategy {other:?}"))),
        }
    }
}

fn grid_dims(width: u32, height: u32, window: u32, stride: u32) -> Result<(usize, usize)> {
    if stride == 0 || window == 0 {
        return Err(Error::InvalidGeometry("window and stride must be positive".into()));
    }
    if width < window || height < window {
        return Err(Error::InvalidGeometry(format!(
            "{width}x{height} is smaller than the {window} px window"
        )));
    }
    let cols = ((width - window) / stride + 1) as usize;
    let rows = ((height - window) / stride + 1) as usize;
    Ok((cols, rows))
}

/// Row-major grid of `window`-sized boxes; trailing margins narrower than the
/// window are dropped.
pub fn slide_window(image_dims: (u32, u32), window: u32, stride: u32) -> Result<Vec<PatchBox>> {
    let (cols, rows) = grid_dims(image_dims.0, image_dims.1, window, stride)?;
    let mut boxes = Vec::with_capacity(cols * rows);
    for row in 0..rows {
        for col in 0..cols {
            let r = Rect::new(col as u32 * stride, row as u32 * stride, window, window);
            boxes.push(PatchBox {
                layer: 0,
                col,
                row,
                in_layer: r,
                in_source: r,
            });
        }
    }
    Ok(boxes)
}

fn scale_edge(v: u32, source: u32, layer: u32) -> u32 {
    let scaled = (f64::from(v) * f64::from(source) / f64::from(layer)).round();
    (scaled as u32).min(source)
}

/// Maps a rectangle in a `layer_dims` image onto `source_dims`, rounding edges
/// to the nearest pixel.
pub fn map_to_source(r: Rect, layer_dims: (u32, u32), source_dims: (u32, u32)) -> Rect {
    let x0 = scale_edge(r.x, source_dims.0, layer_dims.0);
    let x1 = scale_edge(r.right(), source_dims.0, layer_dims.0);
    let y0 = scale_edge(r.y, source_dims.1, layer_dims.1);
    let y1 = scale_edge(r.bottom(), source_dims.1, layer_dims.1);
    Rect::new(x0, y0, x1 - x0, y1 - y0)
}

/// Slide-window grids of every pyramid layer, concatenated finest first.
pub fn pyramid_patches(image_dims: (u32, u32), spec: &PyramidSpec) -> Result<Vec<PatchBox>> {
    spec.validate()?;
    let mut boxes = Vec::new();
    for (layer, &dims) in spec.layer_resolutions.iter().enumerate() {
        for b in slide_window(dims, spec.window_size, spec.stride)? {
            boxes.push(PatchBox {
                layer,
                in_source: map_to_source(b.in_layer, dims, image_dims),
                ..b
            });
        }
    }
    Ok(boxes)
}

/// Patches kept per layer for sparse sampling: `ceil(m_l * alpha)` clamped to
/// `[1, m_l]`.
pub fn per_layer_counts(m_per_layer: &[usize], alpha: f64) -> Result<Vec<usize>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(m_per_layer
        .iter()
        .map(|&m| {
            // Absorb representation error such as 0.1 * 30 = 3.0000000000000004.
            let n = (m as f64 * alpha - 1e-9).ceil() as usize;
            n.clamp(1.min(m), m)
        })
        .collect())
}

/// Result of coverage-maximizing patch selection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub per_layer_counts: Vec<usize>,
    /// Selected indices within each layer, ascending.
    pub chosen_indices: Vec<Vec<usize>>,
    /// Source-image area covered by the union of the chosen boxes.
    pub covered_area: u64,
}

impl SamplePlan {
    /// Chosen boxes in layer order, then index order.
    pub fn select(&self, boxes: &[PatchBox]) -> Vec<PatchBox> {
        let layers = group_by_layer(boxes);
        self.chosen_indices
            .iter()
            .zip(&layers)
            .flat_map(|(idx, layer)| idx.iter().map(move |&i| *layer[i]))
            .collect()
    }

    /// The chosen indices of all layers concatenated.
    pub fn flat_indices(&self) -> Vec<usize> {
        self.chosen_indices.iter().flatten().copied().collect()
    }
}

fn group_by_layer(boxes: &[PatchBox]) -> Vec<Vec<&PatchBox>> {
    let n_layers = boxes.iter().map(|b| b.layer + 1).max().unwrap_or(0);
    let mut layers = vec![Vec::new(); n_layers];
    for b in boxes {
        layers[b.layer].push(b);
    }
    layers
}

/// Exact area of a union of rectangles by coordinate compression.
pub fn union_area(rects: &[Rect]) -> u64 {
    let rects: Vec<&Rect> = rects.iter().filter(|r| r.w > 0 && r.h > 0).collect();
    if rects.is_empty() {
        return 0;
    }
    let mut xs: Vec<u32> = rects.iter().flat_map(|r| [r.x, r.right()]).collect();
    let mut ys: Vec<u32> = rects.iter().flat_map(|r| [r.y, r.bottom()]).collect();
    xs.sort_unstable();
    xs.dedup();
    ys.sort_unstable();
    ys.dedup();
    let mut area = 0u64;
    for yw in ys.windows(2) {
        let (y0, y1) = (yw[0], yw[1]);
        for xw in xs.windows(2) {
            let (x0, x1) = (xw[0], xw[1]);
            if rects
                .iter()
                .any(|r| r.x <= x0 && x1 <= r.right() && r.y <= y0 && y1 <= r.bottom())
            {
                area += u64::from(x1 - x0) * u64::from(y1 - y0);
            }
        }
    }
    area
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub(crate) fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Enumerates every per-layer subset of the requested sizes and keeps the one
/// whose union covers the most source area. Ties go to the lexicographically
/// smallest concatenated index sequence.
pub fn sparse_sample(boxes: &[PatchBox], counts: &[usize], cap: u128) -> Result<SamplePlan> {
    let layers = group_by_layer(boxes);
    if layers.len() != counts.len() {
        return Err(Error::InvalidConfig(format!(
            "{} per-layer counts for {} layers",
            counts.len(),
            layers.len()
        )));
    }
    let mut total: u128 = 1;
    for (l, (layer, &n)) in layers.iter().zip(counts).enumerate() {
        if n > layer.len() {
            return Err(Error::InvalidConfig(format!(
                "layer {l} has {} patches, cannot sample {n}",
                layer.len()
            )));
        }
        total = total.saturating_mul(binomial(layer.len(), n));
    }
    if total > cap {
        return Err(Error::InfeasibleEnumeration { combinations: total, cap });
    }

    let per_layer: Vec<Vec<Vec<usize>>> = layers
        .iter()
        .zip(counts)
        .map(|(layer, &n)| combinations(layer.len(), n))
        .collect();

    // Odometer over the per-layer subsets, layer 0 most significant, which
    // visits concatenated sequences in lexicographic order.
    let mut cursor = vec![0usize; per_layer.len()];
    let mut best: Option<(u64, Vec<usize>)> = None;
    let mut rects = Vec::with_capacity(counts.iter().sum());
    loop {
        rects.clear();
        for (l, &c) in cursor.iter().enumerate() {
            rects.extend(per_layer[l][c].iter().map(|&i| layers[l][i].in_source));
        }
        let area = union_area(&rects);
        if best.as_ref().is_none_or(|(a, _)| area > *a) {
            best = Some((area, cursor.clone()));
        }

        let mut l = cursor.len();
        loop {
            if l == 0 {
                let (covered_area, cursor) = best.expect("at least one combination");
                return Ok(SamplePlan {
                    per_layer_counts: counts.to_vec(),
                    chosen_indices: cursor
                        .iter()
                        .enumerate()
                        .map(|(l, &c)| per_layer[l][c].clone())
                        .collect(),
                    covered_area,
                });
            }
            l -= 1;
            cursor[l] += 1;
            if cursor[l] < per_layer[l].len() {
                break;
            }
            cursor[l] = 0;
        }
    }
}

/// Boxes collected from a `spec.base_resolution()` image under `strategy`.
pub fn patch_layout(strategy: PatchStrategy, spec: &PyramidSpec, alpha: f64) -> Result<Vec<PatchBox>> {
    spec.validate()?;
    let base = spec.base_resolution();
    match strategy {
        PatchStrategy::SlideWindow => slide_window(base, spec.window_size, spec.stride),
        PatchStrategy::ImagePyramid => pyramid_patches(base, spec),
        PatchStrategy::SparseSampling => {
            let boxes = pyramid_patches(base, spec)?;
            let counts = per_layer_counts(&spec.layer_counts(), alpha)?;
            let plan = sparse_sample(&boxes, &counts, DEFAULT_ENUMERATION_CAP)?;
            Ok(plan.select(&boxes))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slide_window_counts() {
        assert_eq!(slide_window((1200, 900), 300, 300).unwrap().len(), 12);
        let one = slide_window((300, 300), 300, 300).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].in_layer, Rect::new(0, 0, 300, 300));
        let six = slide_window((600, 900), 300, 300).unwrap();
        assert_eq!(six.len(), 6);
        assert_eq!((six[5].col, six[5].row), (1, 2));
    }

    #[test]
    fn slide_window_rows_outer() {
        let boxes = slide_window((1200, 900), 300, 300).unwrap();
        assert_eq!(boxes[1].in_layer, Rect::new(300, 0, 300, 300));
        assert_eq!(boxes[4].in_layer, Rect::new(0, 300, 300, 300));
    }

    #[test]
    fn slide_window_drops_margins() {
        let boxes = slide_window((650, 310), 300, 300).unwrap();
        assert_eq!(boxes.len(), 2);
        assert!(boxes.iter().all(|b| b.in_layer.right() <= 650));
    }

    #[test]
    fn too_small_is_invalid_geometry() {
        assert!(matches!(slide_window((299, 900), 300, 300), Err(Error::InvalidGeometry(_))));
        assert!(matches!(slide_window((900, 900), 300, 0), Err(Error::InvalidGeometry(_))));
        let spec = PyramidSpec {
            layer_resolutions: vec![(1200, 900), (200, 200)],
            ..PyramidSpec::default()
        };
        assert!(matches!(pyramid_patches((1200, 900), &spec), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn default_pyramid_layers() {
        let boxes = pyramid_patches((1200, 900), &PyramidSpec::default()).unwrap();
        assert_eq!(boxes.len(), 17);
        let per_layer: Vec<usize> = (0..3).map(|l| boxes.iter().filter(|b| b.layer == l).count()).collect();
        assert_eq!(per_layer, vec![12, 4, 1]);
        assert_eq!(boxes[16].in_source, Rect::new(0, 0, 1200, 900));
    }

    #[test]
    fn degenerate_pyramid_is_slide_window() {
        let spec = PyramidSpec::single_layer(1200, 900, 300, 300);
        assert_eq!(
            pyramid_patches((1200, 900), &spec).unwrap(),
            slide_window((1200, 900), 300, 300).unwrap()
        );
    }

    #[test]
    fn layer_box_maps_to_source() {
        let r = map_to_source(Rect::new(300, 0, 300, 300), (600, 600), (1200, 900));
        assert_eq!(r, Rect::new(600, 0, 600, 450));
    }

    #[test]
    fn counts_examples() {
        assert_eq!(per_layer_counts(&[12, 4, 1], 0.25).unwrap(), vec![3, 1, 1]);
        assert_eq!(per_layer_counts(&[12, 4, 1], 1.0).unwrap(), vec![12, 4, 1]);
        assert_eq!(per_layer_counts(&[12, 4, 1], 0.5).unwrap(), vec![6, 2, 1]);
        assert_eq!(per_layer_counts(&[30], 0.1).unwrap(), vec![3]);
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(per_layer_counts(&[12], bad), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn combinations_are_lexicographic() {
        let c = combinations(4, 2);
        assert_eq!(c, vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
        assert_eq!(combinations(3, 0), vec![Vec::<usize>::new()]);
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
        assert_eq!(combinations(12, 3).len() as u128, binomial(12, 3));
    }

    #[test]
    fn union_area_overlaps() {
        let a = Rect::new(0, 0, 4, 4);
        let b = Rect::new(2, 2, 4, 4);
        assert_eq!(union_area(&[a, b]), 28);
        assert_eq!(union_area(&[a, a]), 16);
        assert_eq!(union_area(&[]), 0);
    }

    #[test]
    fn toy_tie_breaks_to_first_index() {
        // Layer 0: four 2x2 tiles of a 4x4 image; layer 1: one 4x4 tile.
        let mut boxes = slide_window((4, 4), 2, 2).unwrap();
        boxes.push(PatchBox {
            layer: 1,
            col: 0,
            row: 0,
            in_layer: Rect::new(0, 0, 4, 4),
            in_source: Rect::new(0, 0, 4, 4),
        });
        let plan = sparse_sample(&boxes, &[1, 1], DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(plan.chosen_indices, vec![vec![0], vec![0]]);
        assert_eq!(plan.covered_area, 16);
    }

    #[test]
    fn full_counts_choose_everything() {
        let boxes = pyramid_patches((1200, 900), &PyramidSpec::default()).unwrap();
        let plan = sparse_sample(&boxes, &[12, 4, 1], DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(plan.chosen_indices[0], (0..12).collect::<Vec<_>>());
        assert_eq!(plan.covered_area, 1200 * 900);
    }

    #[test]
    fn enumeration_cap() {
        let boxes = pyramid_patches((1200, 900), &PyramidSpec::default()).unwrap();
        let err = sparse_sample(&boxes, &[6, 2, 1], 100).unwrap_err();
        assert!(matches!(err, Error::InfeasibleEnumeration { combinations: 5544, .. }));
    }

    #[test]
    fn layouts_per_strategy() {
        let spec = PyramidSpec::default();
        assert_eq!(patch_layout(PatchStrategy::SlideWindow, &spec, 1.0).unwrap().len(), 12);
        assert_eq!(patch_layout(PatchStrategy::ImagePyramid, &spec, 1.0).unwrap().len(), 17);
        assert_eq!(patch_layout(PatchStrategy::SparseSampling, &spec, 0.25).unwrap().len(), 5);
    }
}
