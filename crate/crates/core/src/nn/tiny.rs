//! Small convolutional backbone for desk-scale runs and tests.
//!
//! Fixed average-pool stem, then convolution blocks of `3x3 conv -> batch
//! norm -> ReLU -> 2x2 max pool` (the last block skips the pool), a global pool and a linear
//! head producing one score per category.

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{join, Activation, AvgPool2d, BatchNorm2d, Conv2d, GlobalPool, Linear, MaxPool2d, Mode, Module, Param, PoolKind};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyConfig {
    /// Downsampling factor of the parameter-free stem.
    pub stem_pool: usize,
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    pub global_pool: PoolKind,
}

impl Default for TinyConfig {
    fn default() -> Self {
        Self {
            stem_pool: 6,
            channels: vec![8, 16, 16, 32],
            global_pool: PoolKind::Max,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: Activation,
    pool: Option<MaxPool2d>,
    pooled: bool,
}

#[derive(Clone, Debug)]
pub struct TinyNet {
    stem: AvgPool2d,
    blocks: Vec<Block>,
    global: GlobalPool,
    pub head: Linear,
}

impl TinyNet {
    pub fn new(name: &str, config: &TinyConfig, in_channels: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(!config.channels.is_empty(), "tiny backbone needs at least one block");
        let mut blocks = Vec::with_capacity(config.channels.len());
        let mut cin = in_channels;
        for (i, &cout) in config.channels.iter().enumerate() {
            let last = i + 1 == config.channels.len();
            blocks.push(Block {
                conv: Conv2d::new(&join(name, &format!("blocks.{i}.conv")), cin, cout, 3, 1, 1, 1, false, rng),
                bn: BatchNorm2d::new(&join(name, &format!("blocks.{i}.bn")), cout),
                act: Activation::relu(),
                pool: (!last).then(|| MaxPool2d::new(2)),
                pooled: false,
            });
            cin = cout;
        }
        Self {
            stem: AvgPool2d::new(config.stem_pool),
            blocks,
            global: GlobalPool::new(config.global_pool),
            head: Linear::new(&join(name, "head"), cin, num_classes, rng),
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array2<f64> {
        let mut h = self.stem.forward(x, mode);
        for b in &mut self.blocks {
            h = b.conv.forward(&h, mode);
            h = b.bn.forward(&h, mode);
            h = b.act.forward(&h, mode);
            b.pooled = false;
            if let Some(pool) = &mut b.pool {
                let (_, _, hh, ww) = h.dim();
                if hh >= 2 && ww >= 2 {
                    h = pool.forward(&h, mode);
                    b.pooled = true;
                }
            }
        }
        let f = self.global.forward(&h, mode);
        self.head.forward(&f, mode)
    }

    pub fn backward(&mut self, grad: &Array2<f64>) {
        let g = self.head.backward(grad);
        let mut g = self.global.backward(&g);
        for b in self.blocks.iter_mut().rev() {
            if b.pooled {
                g = b.pool.as_mut().expect("pooled block has a pool").backward(&g);
            }
            g = b.act.backward(&g);
            g = b.bn.backward(&g);
            g = b.conv.backward(&g);
        }
        // The stem has no parameters; its input gradient is not needed.
    }
}

impl Module for TinyNet {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for b in &self.blocks {
            b.conv.visit_params(f);
            b.bn.visit_params(f);
        }
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.blocks {
            b.conv.visit_params_mut(f);
            b.bn.visit_params_mut(f);
        }
        self.head.visit_params_mut(f);
    }
}
