use ndarray::{Array4, ArrayD, IxDyn};

use super::{join, Mode, Module, Param};

/// Per-channel batch normalization over `[N, C, H, W]`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<(Array4<f64>, Vec<f64>)>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            weight: Param::new(join(name, "weight"), ArrayD::ones(IxDyn(&[channels]))),
            bias: Param::zeros(join(name, "bias"), &[channels]),
            running_mean: Param::buffer(join(name, "running_mean"), ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(join(name, "running_var"), ArrayD::ones(IxDyn(&[channels]))),
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let plane = h * w;
        let count = (n * plane) as f64;
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let (mean, var) = if mode.is_train() {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for (i, chunk) in src.chunks_exact(plane).enumerate() {
                mean[i % c] += chunk.iter().sum::<f64>();
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for (i, chunk) in src.chunks_exact(plane).enumerate() {
                let m = mean[i % c];
                var[i % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            var.iter_mut().for_each(|v| *v /= count);
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let rm = self.running_mean.value.as_slice_mut().expect("contiguous");
            let rv = self.running_var.value.as_slice_mut().expect("contiguous");
            for ch in 0..c {
                rm[ch] = (1.0 - self.momentum) * rm[ch] + self.momentum * mean[ch];
                rv[ch] = (1.0 - self.momentum) * rv[ch] + self.momentum * var[ch] * unbiased;
            }
            (mean, var)
        } else {
            (self.running_mean.data().to_vec(), self.running_var.data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let gamma = self.weight.data();
        let beta = self.bias.data();
        let mut xhat = Array4::zeros((n, c, h, w));
        let mut out = Array4::zeros((n, c, h, w));
        {
            let xh = xhat.as_slice_mut().expect("standard layout");
            let o = out.as_slice_mut().expect("standard layout");
            for (i, ((s, d), y)) in src
                .chunks_exact(plane)
                .zip(xh.chunks_exact_mut(plane))
                .zip(o.chunks_exact_mut(plane))
                .enumerate()
            {
                let ch = i % c;
                for ((sv, dv), yv) in s.iter().zip(d.iter_mut()).zip(y.iter_mut()) {
                    *dv = (sv - mean[ch]) * inv_std[ch];
                    *yv = gamma[ch] * *dv + beta[ch];
                }
            }
        }
        self.cache = mode.is_train().then_some((xhat, inv_std));
        out
    }

    pub fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let (xhat, inv_std) = self.cache.take().expect("batch norm backward without a training forward pass");
        let (n, c, h, w) = xhat.dim();
        let plane = h * w;
        let count = (n * plane) as f64;
        let grad = grad.as_standard_layout();
        let g = grad.as_slice().expect("standard layout");
        let xh = xhat.as_slice().expect("standard layout");
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for (i, (gc, xc)) in g.chunks_exact(plane).zip(xh.chunks_exact(plane)).enumerate() {
            sum_g[i % c] += gc.iter().sum::<f64>();
            sum_gx[i % c] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
        }
        let gamma = self.weight.data().to_vec();
        self.weight.grad_mut().iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
        self.bias.grad_mut().iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
        let mut dx = Array4::zeros((n, c, h, w));
        let d = dx.as_slice_mut().expect("standard layout");
        for (i, ((dc, gc), xc)) in d
            .chunks_exact_mut(plane)
            .zip(g.chunks_exact(plane))
            .zip(xh.chunks_exact(plane))
            .enumerate()
        {
            let ch = i % c;
            let k = gamma[ch] * inv_std[ch] / count;
            for ((dv, gv), xv) in dc.iter_mut().zip(gc).zip(xc) {
                *dv = k * (count * gv - sum_g[ch] - xv * sum_gx[ch]);
            }
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}
