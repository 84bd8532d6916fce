//! EfficientNet (B-series) built from the layers in this crate.
//!
//! Parameter names follow the torchvision layout (`features.{stage}.{block}
//! .block.{k}...`) so converted torchvision weights can be loaded by name.
//! Stochastic depth is not implemented.

use ndarray::{Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{join, Activation, BatchNorm2d, Conv2d, Dropout, GlobalPool, Linear, Mode, Module, Param, PoolKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficientNetConfig {
    pub width_mult: f64,
    pub depth_mult: f64,
    pub dropout: f64,
}

impl EfficientNetConfig {
    pub fn b3() -> Self {
        Self {
            width_mult: 1.2,
            depth_mult: 1.4,
            dropout: 0.3,
        }
    }

    pub fn b0() -> Self {
        Self {
            width_mult: 1.0,
            depth_mult: 1.0,
            dropout: 0.2,
        }
    }

    /// `(expand_ratio, kernel, stride, in, out, repeats)` per stage after
    /// width and depth scaling.
    pub fn stages(&self) -> Vec<StageConfig> {
        BASE_STAGES
            .iter()
            .map(|&(expand, kernel, stride, cin, cout, layers)| StageConfig {
                expand_ratio: expand,
                kernel,
                stride,
                in_channels: make_divisible(cin as f64 * self.width_mult),
                out_channels: make_divisible(cout as f64 * self.width_mult),
                repeats: (layers as f64 * self.depth_mult).ceil() as usize,
            })
            .collect()
    }

    pub fn stem_channels(&self) -> usize {
        make_divisible(32.0 * self.width_mult)
    }

    pub fn head_channels(&self) -> usize {
        4 * self.stages().last().expect("stages").out_channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub expand_ratio: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub repeats: usize,
}

const BASE_STAGES: [(usize, usize, usize, usize, usize, usize); 7] = [
    (1, 3, 1, 32, 16, 1),
    (6, 3, 2, 16, 24, 2),
    (6, 5, 2, 24, 40, 2),
    (6, 3, 2, 40, 80, 3),
    (6, 5, 1, 80, 112, 3),
    (6, 5, 2, 112, 192, 4),
    (6, 3, 1, 192, 320, 1),
];

/// Rounds a channel count to a multiple of 8 without dropping more than 10%.
pub fn make_divisible(v: f64) -> usize {
    let mut new_v = (8usize).max(((v + 4.0) as usize) / 8 * 8);
    if (new_v as f64) < 0.9 * v {
        new_v += 8;
    }
    new_v
}

#[derive(Clone, Debug)]
struct ConvBnAct {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: Option<Activation>,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        act: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(&join(name, "0"), cin, cout, kernel, stride, (kernel - 1) / 2, groups, false, rng),
            bn: BatchNorm2d::new(&join(name, "1"), cout),
            act: act.then(Activation::silu),
        }
    }

    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let h = self.conv.forward(x, mode);
        let h = self.bn.forward(&h, mode);
        match &mut self.act {
            Some(a) => a.forward(&h, mode),
            None => h,
        }
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let g = match &mut self.act {
            Some(a) => a.backward(grad),
            None => grad.clone(),
        };
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params_mut(f);
        self.bn.visit_params_mut(f);
    }
}

#[derive(Clone, Debug)]
struct SqueezeExcite {
    fc1: Linear,
    act: Activation,
    fc2: Linear,
    gate: Activation,
    cache: Option<(Array4<f64>, Array2<f64>)>,
}

impl SqueezeExcite {
    fn new(name: &str, channels: usize, squeeze: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(&join(name, "fc1"), channels, squeeze, rng),
            act: Activation::silu(),
            fc2: Linear::new(&join(name, "fc2"), squeeze, channels, rng),
            gate: Activation::sigmoid(),
            cache: None,
        }
    }

    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let pooled = x.mean_axis(Axis(3)).expect("width").mean_axis(Axis(2)).expect("height");
        let a = self.fc1.forward(&pooled, mode);
        let a = self.act.forward(&a, mode);
        let b = self.fc2.forward(&a, mode);
        let g = self.gate.forward(&b, mode);
        let mut out = x.clone();
        for ((n, c, _, _), v) in out.indexed_iter_mut() {
            *v *= g[[n, c]];
        }
        self.cache = mode.is_train().then(|| (x.clone(), g));
        out
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let (x, g) = self.cache.take().expect("squeeze-excite backward without a training forward pass");
        let (n, c, h, w) = x.dim();
        let mut dgate = Array2::zeros((n, c));
        let mut dx = grad.clone();
        for ((ni, ci, yi, xi), v) in dx.indexed_iter_mut() {
            dgate[[ni, ci]] += *v * x[[ni, ci, yi, xi]];
            *v *= g[[ni, ci]];
        }
        let db = self.gate.backward(&dgate);
        let da = self.fc2.backward(&db);
        let da = self.act.backward(&da);
        let dpool = self.fc1.backward(&da);
        let scale = 1.0 / (h * w) as f64;
        for ((ni, ci, _, _), v) in dx.indexed_iter_mut() {
            *v += dpool[[ni, ci]] * scale;
        }
        dx
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fc1.visit_params_mut(f);
        self.fc2.visit_params_mut(f);
    }
}

/// Inverted residual block with squeeze-and-excitation.
#[derive(Clone, Debug)]
struct MbConv {
    expand: Option<ConvBnAct>,
    depthwise: ConvBnAct,
    se: SqueezeExcite,
    project: ConvBnAct,
    residual: bool,
}

impl MbConv {
    fn new(name: &str, cfg: &StageConfig, cin: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = cin * cfg.expand_ratio;
        let mut k = 0;
        let mut next = || {
            let s = join(name, &format!("block.{k}"));
            k += 1;
            s
        };
        let expand = (cfg.expand_ratio != 1).then(|| ConvBnAct::new(&next(), cin, hidden, 1, 1, 1, true, rng));
        let depthwise = ConvBnAct::new(&next(), hidden, hidden, cfg.kernel, stride, hidden, true, rng);
        let se = SqueezeExcite::new(&next(), hidden, (cin / 4).max(1), rng);
        let project = ConvBnAct::new(&next(), hidden, cfg.out_channels, 1, 1, 1, false, rng);
        Self {
            expand,
            depthwise,
            se,
            project,
            residual: stride == 1 && cin == cfg.out_channels,
        }
    }

    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let mut h = match &mut self.expand {
            Some(e) => e.forward(x, mode),
            None => x.clone(),
        };
        h = self.depthwise.forward(&h, mode);
        h = self.se.forward(&h, mode);
        h = self.project.forward(&h, mode);
        if self.residual {
            h += x;
        }
        h
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let mut g = self.project.backward(grad);
        g = self.se.backward(&g);
        g = self.depthwise.backward(&g);
        if let Some(e) = &mut self.expand {
            g = e.backward(&g);
        }
        if self.residual {
            g += grad;
        }
        g
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        if let Some(e) = &self.expand {
            e.visit(f);
        }
        self.depthwise.visit(f);
        self.se.visit(f);
        self.project.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(e) = &mut self.expand {
            e.visit_mut(f);
        }
        self.depthwise.visit_mut(f);
        self.se.visit_mut(f);
        self.project.visit_mut(f);
    }
}

#[derive(Clone, Debug)]
pub struct EfficientNet {
    stem: ConvBnAct,
    blocks: Vec<MbConv>,
    head_conv: ConvBnAct,
    pool: GlobalPool,
    dropout: Dropout,
    pub classifier: Linear,
}

impl EfficientNet {
    pub fn new(
        name: &str,
        config: &EfficientNetConfig,
        in_channels: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let stem_ch = config.stem_channels();
        let stem = ConvBnAct::new(&join(name, "features.0"), in_channels, stem_ch, 3, 2, 1, true, rng);
        let stages = config.stages();
        let mut blocks = Vec::new();
        let mut cin = stem_ch;
        for (s, stage) in stages.iter().enumerate() {
            for j in 0..stage.repeats {
                let stride = if j == 0 { stage.stride } else { 1 };
                let block_name = join(name, &format!("features.{}.{j}", s + 1));
                blocks.push(MbConv::new(&block_name, stage, cin, stride, rng));
                cin = stage.out_channels;
            }
        }
        let head = config.head_channels();
        let head_conv = ConvBnAct::new(&join(name, &format!("features.{}", stages.len() + 1)), cin, head, 1, 1, 1, true, rng);
        Self {
            stem,
            blocks,
            head_conv,
            pool: GlobalPool::new(PoolKind::Avg),
            dropout: Dropout::new(config.dropout),
            classifier: Linear::new(&join(name, "classifier.1"), head, num_classes, rng),
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut h = self.stem.forward(x, mode);
        for b in &mut self.blocks {
            h = b.forward(&h, mode);
        }
        h = self.head_conv.forward(&h, mode);
        let f = self.pool.forward(&h, mode);
        let f = self.dropout.forward(&f, mode, rng);
        self.classifier.forward(&f, mode)
    }

    pub fn backward(&mut self, grad: &Array2<f64>) {
        let g = self.classifier.backward(grad);
        let g = self.dropout.backward(&g);
        let mut g = self.pool.backward(&g);
        g = self.head_conv.backward(&g);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        self.stem.backward(&g);
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }
}

impl Module for EfficientNet {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.stem.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
        self.head_conv.visit(f);
        self.classifier.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.head_conv.visit_mut(f);
        self.classifier.visit_params_mut(f);
    }
}
