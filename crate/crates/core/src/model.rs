//! Patch label inference network and comprehensive decision network.
//!
//! The patch network scores every patch independently and squashes the scores
//! with a logistic function, giving an `m x C` confidence matrix per image.
//! The decision network flattens that matrix (patch-major) and maps it to a
//! probability vector over the `C` categories.

use image::GrayImage;
use ndarray::{Array2, Array4, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{BackboneConfig, BackboneSpec, CdnSpec, PipelineConfig};
use crate::error::{Error, Result};
use crate::geometry::PatchBox;
use crate::nn::efficientnet::EfficientNet;
use crate::nn::tiny::TinyNet;
use crate::nn::{Activation, Dropout, Linear, Mode, Module, Param};
use crate::patches::{extract_with_layout, PatchSet};

/// Per-patch, per-category confidences in `[0, 1]`; rows follow patch order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMatrix {
    pub values: Array2<f64>,
}

impl ConfidenceMatrix {
    pub fn patches(&self) -> usize {
        self.values.nrows()
    }

    pub fn classes(&self) -> usize {
        self.values.ncols()
    }

    /// Entrywise absolute sum.
    pub fn l1(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    /// Row-major flattening used as decision network input.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Tiny(TinyNet),
    EfficientNet(EfficientNet),
}

impl Backbone {
    pub fn build(spec: &BackboneSpec, num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        match &spec.config {
            BackboneConfig::Tiny(cfg) => Backbone::Tiny(TinyNet::new("plin", cfg, 1, num_classes, rng)),
            BackboneConfig::EffnetB3(cfg) => {
                Backbone::EfficientNet(EfficientNet::new("plin", cfg, 1, num_classes, rng))
            }
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode, rng: &mut ChaCha8Rng) -> Array2<f64> {
        match self {
            Backbone::Tiny(net) => net.forward(x, mode),
            Backbone::EfficientNet(net) => net.forward(x, mode, rng),
        }
    }

    pub fn backward(&mut self, grad: &Array2<f64>) {
        match self {
            Backbone::Tiny(net) => net.backward(grad),
            Backbone::EfficientNet(net) => net.backward(grad),
        }
    }

    /// The final affine layer producing per-category scores.
    pub fn head_mut(&mut self) -> &mut Linear {
        match self {
            Backbone::Tiny(net) => &mut net.head,
            Backbone::EfficientNet(net) => &mut net.classifier,
        }
    }
}

impl Module for Backbone {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            Backbone::Tiny(net) => net.visit_params(f),
            Backbone::EfficientNet(net) => net.visit_params(f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Backbone::Tiny(net) => net.visit_params_mut(f),
            Backbone::EfficientNet(net) => net.visit_params_mut(f),
        }
    }
}

/// Backbone followed by an elementwise logistic squash.
#[derive(Clone, Debug)]
pub struct PatchLabelNet {
    pub backbone: Backbone,
    squash: Activation,
}

impl PatchLabelNet {
    pub fn new(spec: &BackboneSpec, num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            backbone: Backbone::build(spec, num_classes, rng),
            squash: Activation::sigmoid(),
        }
    }

    /// `[N, 1, w, w]` patches to `[N, C]` confidences.
    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let logits = self.backbone.forward(x, mode, rng);
        self.squash.forward(&logits, mode)
    }

    pub fn backward(&mut self, grad: &Array2<f64>) {
        let g = self.squash.backward(grad);
        self.backbone.backward(&g);
    }
}

impl Module for PatchLabelNet {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.backbone.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_params_mut(f);
    }
}

/// `[affine, ReLU, dropout] x 2 -> affine -> affine -> softmax`.
#[derive(Clone, Debug)]
pub struct DecisionNet {
    pub spec: CdnSpec,
    pub fc1: Linear,
    act1: Activation,
    drop1: Dropout,
    pub fc2: Linear,
    act2: Activation,
    drop2: Dropout,
    pub fc3: Linear,
    pub fc4: Linear,
    probs: Option<Array2<f64>>,
}

pub(crate) fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

impl DecisionNet {
    pub fn new(spec: CdnSpec, rng: &mut ChaCha8Rng) -> Self {
        let h = spec.hidden_width;
        Self {
            spec,
            fc1: Linear::he("cdn.fc1", h, h, rng),
            act1: Activation::relu(),
            drop1: Dropout::new(spec.dropout_rate),
            fc2: Linear::he("cdn.fc2", h, h, rng),
            act2: Activation::relu(),
            drop2: Dropout::new(spec.dropout_rate),
            fc3: Linear::he("cdn.fc3", h, h, rng),
            fc4: Linear::new("cdn.fc4", h, spec.out_width, rng),
            probs: None,
        }
    }

    /// `[B, m*C]` flattened confidences to `[B, C]` probabilities.
    pub fn forward(&mut self, x: &Array2<f64>, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        if x.ncols() != self.spec.hidden_width {
            return Err(Error::Shape(format!(
                "decision network expects {} inputs, got {}",
                self.spec.hidden_width,
                x.ncols()
            )));
        }
        let mut h = self.fc1.forward(x, mode);
        h = self.act1.forward(&h, mode);
        h = self.drop1.forward(&h, mode, rng);
        h = self.fc2.forward(&h, mode);
        h = self.act2.forward(&h, mode);
        h = self.drop2.forward(&h, mode, rng);
        h = self.fc3.forward(&h, mode);
        h = self.fc4.forward(&h, mode);
        let p = softmax_rows(&h);
        self.probs = mode.is_train().then(|| p.clone());
        Ok(p)
    }

    /// Gradient with respect to the probabilities in, gradient with respect
    /// to the flattened confidences out.
    pub fn backward(&mut self, grad_probs: &Array2<f64>) -> Array2<f64> {
        let p = self.probs.take().expect("decision backward without a training forward pass");
        let mut dz = grad_probs * &p;
        let dot = dz.sum_axis(Axis(1));
        for ((mut row, prow), d) in dz.rows_mut().into_iter().zip(p.rows()).zip(dot.iter()) {
            row.zip_mut_with(&prow, |v, &pv| *v -= pv * d);
        }
        let mut g = self.fc4.backward(&dz);
        g = self.fc3.backward(&g);
        g = self.drop2.backward(&g);
        g = self.act2.backward(&g);
        g = self.fc2.backward(&g);
        g = self.drop1.backward(&g);
        g = self.act1.backward(&g);
        self.fc1.backward(&g)
    }
}

impl Module for DecisionNet {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for l in [&self.fc1, &self.fc2, &self.fc3, &self.fc4] {
            l.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in [&mut self.fc1, &mut self.fc2, &mut self.fc3, &mut self.fc4] {
            l.visit_params_mut(f);
        }
    }
}

/// Output of a batched forward pass.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// `[B*m, C]` confidences, image-major.
    pub confidences: Array2<f64>,
    /// `[B, C]` category probabilities.
    pub probs: Array2<f64>,
}

impl BatchOutput {
    pub fn confidence_matrix(&self, image: usize, patches: usize) -> ConfidenceMatrix {
        ConfidenceMatrix {
            values: self
                .confidences
                .slice(ndarray::s![image * patches..(image + 1) * patches, ..])
                .to_owned(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub class: usize,
    pub probs: Vec<f64>,
    pub confidences: ConfidenceMatrix,
}

/// The end-to-end image classifier.
#[derive(Clone, Debug)]
pub struct PatchClassifier {
    pub config: PipelineConfig,
    layout: Vec<PatchBox>,
    pub plin: PatchLabelNet,
    pub cdn: DecisionNet,
    rng: ChaCha8Rng,
}

impl PatchClassifier {
    /// Freshly initialized model, deterministic in `config.seed`.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let plin = PatchLabelNet::new(&config.backbone, config.num_classes(), &mut init);
        let cdn = DecisionNet::new(config.cdn_spec()?, &mut init);
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        Ok(Self {
            config,
            layout,
            plin,
            cdn,
            rng,
        })
    }

    pub fn layout(&self) -> &[PatchBox] {
        &self.layout
    }

    pub fn patches_per_image(&self) -> usize {
        self.layout.len()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes()
    }

    /// Reseeds the dropout stream.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn extract(&self, image: &GrayImage) -> Result<PatchSet> {
        extract_with_layout(image, &self.config.pyramid, &self.layout)
    }

    /// Stacks the patches of several images into one `[B*m, 1, w, w]` tensor.
    pub fn stack(&self, sets: &[&PatchSet]) -> Result<Array4<f64>> {
        let m = self.patches_per_image();
        let w = self.config.pyramid.window_size as usize;
        let mut t = Array4::zeros((sets.len() * m, 1, w, w));
        let data = t.as_slice_mut().expect("standard layout");
        for (set, chunk) in sets.iter().zip(data.chunks_exact_mut(m * w * w)) {
            if set.len() != m || set.window as usize != w {
                return Err(Error::Shape(format!(
                    "expected {m} patches of {w}px, got {} of {}px",
                    set.len(),
                    set.window
                )));
            }
            set.write_planes(chunk);
        }
        Ok(t)
    }

    pub fn plin_forward(&mut self, patches: &PatchSet, mode: Mode) -> Result<ConfidenceMatrix> {
        let w = self.config.pyramid.window_size;
        if patches.is_empty() || patches.patches.iter().any(|p| p.dimensions() != (w, w)) {
            return Err(Error::Shape(format!("patches must be non-empty and {w}x{w}")));
        }
        let values = self.plin.forward(&patches.to_tensor(), mode, &mut self.rng);
        Ok(ConfidenceMatrix { values })
    }

    pub fn cdn_forward(&mut self, s: &ConfidenceMatrix, mode: Mode) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, s.patches() * s.classes()), s.flatten()).expect("shape");
        Ok(self.cdn.forward(&x, mode, &mut self.rng)?.row(0).to_vec())
    }

    pub fn forward_batch(&mut self, input: &Array4<f64>, mode: Mode) -> Result<BatchOutput> {
        let m = self.patches_per_image();
        if input.dim().0 % m != 0 {
            return Err(Error::Shape(format!("{} patches is not a multiple of {m}", input.dim().0)));
        }
        let b = input.dim().0 / m;
        let confidences = self.plin.forward(input, mode, &mut self.rng);
        let flat = confidences
            .view()
            .into_shape_with_order((b, m * self.num_classes()))
            .map_err(|e| Error::Shape(e.to_string()))?
            .to_owned();
        let probs = self.cdn.forward(&flat, mode, &mut self.rng)?;
        Ok(BatchOutput { confidences, probs })
    }

    /// Backpropagates loss gradients with respect to the probabilities and,
    /// directly, to the `[B*m, C]` confidences.
    pub fn backward_batch(&mut self, grad_probs: &Array2<f64>, grad_confidences: ArrayView2<f64>) {
        let flat = self.cdn.backward(grad_probs);
        let (bm, c) = grad_confidences.dim();
        let mut g = flat.into_shape_with_order((bm, c)).expect("flattened confidences");
        g += &grad_confidences;
        self.plin.backward(&g);
    }

    pub fn predict(&mut self, image: &GrayImage) -> Result<Prediction> {
        let set = self.extract(image)?;
        let confidences = self.plin_forward(&set, Mode::Eval)?;
        let probs = self.cdn_forward(&confidences, Mode::Eval)?;
        Ok(Prediction {
            class: argmax(&probs),
            probs,
            confidences,
        })
    }

    /// Probability mass off the normal class; for a detector this is the
    /// distressed probability.
    pub fn distress_score(&self, probs: &[f64]) -> Option<f64> {
        self.config.normal_class.map(|n| 1.0 - probs[n])
    }
}

impl Module for PatchClassifier {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.plin.visit_params(f);
        self.cdn.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.plin.visit_params_mut(f);
        self.cdn.visit_params_mut(f);
    }
}
