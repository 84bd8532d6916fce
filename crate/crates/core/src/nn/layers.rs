use ndarray::linalg::general_mat_mul;
use ndarray::{Array, Array2, Array4, ArrayD, ArrayView2, ArrayViewMut2, Axis, Dimension};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{join, Mode, Module, Param};

/// Affine map `y = x W^T + b` over `[N, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_features: usize,
    pub out_features: usize,
    input: Option<Array2<f64>>,
}

impl Linear {
    /// Fan-in scaled uniform weights, zero bias.
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Self {
            weight: Param::uniform(join(name, "weight"), &[out_features, in_features], bound, rng),
            bias: Param::zeros(join(name, "bias"), &[out_features]),
            in_features,
            out_features,
            input: None,
        }
    }

    /// He-uniform weights for a layer feeding a ReLU, zero bias.
    pub fn he(name: &str, in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layer = Self::new(name, in_features, out_features, rng);
        layer.weight.value *= 6f64.sqrt();
        layer
    }

    fn weight_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.out_features, self.in_features), self.weight.data()).expect("shape")
    }

    pub fn forward(&mut self, x: &Array2<f64>, mode: Mode) -> Array2<f64> {
        assert_eq!(x.ncols(), self.in_features, "linear input width");
        let mut y = Array2::zeros((x.nrows(), self.out_features));
        general_mat_mul(1.0, x, &self.weight_view().t(), 0.0, &mut y);
        let b = ArrayView2::from_shape((1, self.out_features), self.bias.data()).expect("shape");
        y += &b;
        self.input = mode.is_train().then(|| x.clone());
        y
    }

    pub fn backward(&mut self, grad: &Array2<f64>) -> Array2<f64> {
        let x = self.input.take().expect("linear backward without a training forward pass");
        let (o, i) = (self.out_features, self.in_features);
        {
            let mut dw = ArrayViewMut2::from_shape((o, i), self.weight.grad_mut()).expect("shape");
            general_mat_mul(1.0, &grad.t(), &x, 1.0, &mut dw);
        }
        let db = grad.sum_axis(Axis(0));
        self.bias.grad_mut().iter_mut().zip(db.iter()).for_each(|(g, d)| *g += d);
        let mut dx = Array2::zeros((grad.nrows(), i));
        general_mat_mul(1.0, grad, &self.weight_view(), 0.0, &mut dx);
        dx
    }
}

impl Module for Linear {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise nonlinearity.
#[derive(Clone, Debug)]
pub struct Activation {
    kind: ActKind,
    cache: Option<ArrayD<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ActKind {
    Relu,
    Sigmoid,
    Silu,
}

impl Activation {
    pub fn relu() -> Self {
        Self { kind: ActKind::Relu, cache: None }
    }

    pub fn sigmoid() -> Self {
        Self { kind: ActKind::Sigmoid, cache: None }
    }

    pub fn silu() -> Self {
        Self { kind: ActKind::Silu, cache: None }
    }

    pub fn forward<D: Dimension>(&mut self, x: &Array<f64, D>, mode: Mode) -> Array<f64, D> {
        let y = match self.kind {
            ActKind::Relu => x.mapv(|v| v.max(0.0)),
            ActKind::Sigmoid => x.mapv(sigmoid),
            ActKind::Silu => x.mapv(|v| v * sigmoid(v)),
        };
        self.cache = mode.is_train().then(|| match self.kind {
            // Sigmoid keeps its output, the others their input.
            ActKind::Sigmoid => y.clone().into_dyn(),
            _ => x.clone().into_dyn(),
        });
        y
    }

    pub fn backward<D: Dimension>(&mut self, grad: &Array<f64, D>) -> Array<f64, D> {
        let cache = self
            .cache
            .take()
            .expect("activation backward without a training forward pass")
            .into_dimensionality::<D>()
            .expect("activation grad rank");
        let mut out = grad.clone();
        match self.kind {
            ActKind::Relu => out.zip_mut_with(&cache, |g, &x| {
                if x <= 0.0 {
                    *g = 0.0
                }
            }),
            ActKind::Sigmoid => out.zip_mut_with(&cache, |g, &y| *g *= y * (1.0 - y)),
            ActKind::Silu => out.zip_mut_with(&cache, |g, &x| {
                let s = sigmoid(x);
                *g *= s + x * s * (1.0 - s);
            }),
        }
        out
    }
}

/// Inverted dropout; identity outside training.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
    mask: Option<ArrayD<f64>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
        Self { rate, mask: None }
    }

    pub fn forward<D: Dimension>(&mut self, x: &Array<f64, D>, mode: Mode, rng: &mut ChaCha8Rng) -> Array<f64, D> {
        if !mode.is_train() || self.rate == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = 1.0 - self.rate;
        let mask = x.mapv(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let y = x * &mask;
        self.mask = Some(mask.into_dyn());
        y
    }

    pub fn backward<D: Dimension>(&mut self, grad: &Array<f64, D>) -> Array<f64, D> {
        match self.mask.take() {
            Some(mask) => grad * &mask.into_dimensionality::<D>().expect("dropout grad rank"),
            None => grad.clone(),
        }
    }
}

/// Non-overlapping average pooling with a square `k x k` window; trailing rows
/// and columns that do not fill a window are ignored.
#[derive(Clone, Debug)]
pub struct AvgPool2d {
    pub kernel: usize,
    input_dims: Option<(usize, usize, usize, usize)>,
}

impl AvgPool2d {
    pub fn new(kernel: usize) -> Self {
        assert!(kernel > 0);
        Self { kernel, input_dims: None }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let k = self.kernel;
        let (n, c, h, w) = x.dim();
        if k == 1 {
            self.input_dims = mode.is_train().then_some((n, c, h, w));
            return x.clone();
        }
        let (oh, ow) = (h / k, w / k);
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut out = Array4::zeros((n, c, oh, ow));
        let dst = out.as_slice_mut().expect("standard layout");
        let norm = 1.0 / (k * k) as f64;
        for (p, plane) in src.chunks_exact(h * w).enumerate() {
            let o = &mut dst[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh * k {
                let row = &plane[y * w..y * w + ow * k];
                let orow = &mut o[(y / k) * ow..(y / k + 1) * ow];
                for (ox, chunk) in row.chunks_exact(k).enumerate() {
                    orow[ox] += chunk.iter().sum::<f64>();
                }
            }
            o.iter_mut().for_each(|v| *v *= norm);
        }
        self.input_dims = mode.is_train().then_some((n, c, h, w));
        out
    }

    pub fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = self.input_dims.take().expect("pool backward without a training forward pass");
        let k = self.kernel;
        if k == 1 {
            return grad.clone();
        }
        let (oh, ow) = (h / k, w / k);
        let norm = 1.0 / (k * k) as f64;
        let mut dx = Array4::zeros((n, c, h, w));
        for ((s, ch, y, x), v) in dx.indexed_iter_mut() {
            if y < oh * k && x < ow * k {
                *v = grad[[s, ch, y / k, x / k]] * norm;
            }
        }
        dx
    }
}

/// `k x k` max pooling with stride `k`.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    argmax: Option<(Vec<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool2d {
    pub fn new(kernel: usize) -> Self {
        assert!(kernel > 0);
        Self { kernel, argmax: None }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let k = self.kernel;
        let (n, c, h, w) = x.dim();
        let (oh, ow) = (h / k, w / k);
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut out = Array4::zeros((n, c, oh, ow));
        let mut arg = vec![0usize; n * c * oh * ow];
        let dst = out.as_slice_mut().expect("standard layout");
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * k + dy) * w + ox * k + dx;
                            if src[i] > best {
                                best = src[i];
                                at = i;
                            }
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    dst[o] = best;
                    arg[o] = at;
                }
            }
        }
        self.argmax = mode.is_train().then_some((arg, (n, c, h, w)));
        out
    }

    pub fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let (arg, dims) = self.argmax.take().expect("pool backward without a training forward pass");
        let mut dx = Array4::zeros(dims);
        let d = dx.as_slice_mut().expect("standard layout");
        for (g, &i) in grad.iter().zip(&arg) {
            d[i] += g;
        }
        dx
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

/// Spatial reduction `[N, C, H, W] -> [N, C]`.
#[derive(Clone, Debug)]
pub struct GlobalPool {
    pub kind: PoolKind,
    cache: Option<(Vec<usize>, (usize, usize, usize, usize))>,
}

impl GlobalPool {
    pub fn new(kind: PoolKind) -> Self {
        Self { kind, cache: None }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let plane = h * w;
        let mut out = Array2::zeros((n, c));
        let mut arg = Vec::new();
        for (p, (chunk, o)) in src.chunks_exact(plane).zip(out.iter_mut()).enumerate() {
            match self.kind {
                PoolKind::Avg => *o = chunk.iter().sum::<f64>() / plane as f64,
                PoolKind::Max => {
                    let (i, v) = chunk
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                    *o = v;
                    arg.push(p * plane + i);
                }
            }
        }
        self.cache = mode.is_train().then_some((arg, (n, c, h, w)));
        out
    }

    pub fn backward(&mut self, grad: &Array2<f64>) -> Array4<f64> {
        let (arg, dims) = self.cache.take().expect("pool backward without a training forward pass");
        let plane = dims.2 * dims.3;
        let mut dx = Array4::zeros(dims);
        let d = dx.as_slice_mut().expect("standard layout");
        match self.kind {
            PoolKind::Avg => {
                for (chunk, g) in d.chunks_exact_mut(plane).zip(grad.iter()) {
                    chunk.fill(g / plane as f64);
                }
            }
            PoolKind::Max => {
                for (g, &i) in grad.iter().zip(&arg) {
                    d[i] += g;
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn linear_forward_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::new("fc", 3, 2, &mut rng);
        lin.weight.value = array![[1.0, 2.0, 3.0], [0.0, -1.0, 1.0]].into_dyn();
        lin.bias.value = array![0.5, -0.5].into_dyn();
        let x = array![[1.0, 1.0, 1.0], [2.0, 0.0, -1.0]];
        let y = lin.forward(&x, Mode::Train);
        assert_eq!(y, array![[6.5, -0.5], [-0.5, -1.5]]);
        let dx = lin.backward(&array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(dx, array![[1.0, 2.0, 3.0], [0.0, -1.0, 1.0]]);
        assert_eq!(lin.weight.grad, array![[1.0, 1.0, 1.0], [2.0, 0.0, -1.0]].into_dyn());
        assert_eq!(lin.bias.grad, array![1.0, 1.0].into_dyn());
    }

    #[test]
    fn activations() {
        let x = array![[-1.0, 0.0, 2.0]];
        let mut relu = Activation::relu();
        assert_eq!(relu.forward(&x, Mode::Train), array![[0.0, 0.0, 2.0]]);
        assert_eq!(relu.backward(&array![[1.0, 1.0, 1.0]]), array![[0.0, 0.0, 1.0]]);
        let mut sig = Activation::sigmoid();
        let y = sig.forward(&x, Mode::Train);
        assert!((y[[0, 1]] - 0.5).abs() < 1e-15);
        let g = sig.backward(&array![[1.0, 1.0, 1.0]]);
        assert!((g[[0, 1]] - 0.25).abs() < 1e-15);
        let mut silu = Activation::silu();
        let eps = 1e-6;
        let _ = silu.forward(&x, Mode::Train);
        let g = silu.backward(&array![[1.0, 1.0, 1.0]]);
        for i in 0..3 {
            let f = |v: f64| v * sigmoid(v);
            let fd = (f(x[[0, i]] + eps) - f(x[[0, i]] - eps)) / (2.0 * eps);
            assert!((fd - g[[0, i]]).abs() < 1e-8);
        }
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut d = Dropout::new(0.5);
        let x = Array2::from_elem((4, 50), 1.0);
        assert_eq!(d.forward(&x, Mode::Eval, &mut rng), x);
        let y = d.forward(&x, Mode::Train, &mut rng);
        assert!(y.iter().all(|&v| v == 0.0 || v == 2.0));
        let zeros = y.iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 50 && zeros < 150);
        let g = d.backward(&Array2::from_elem((4, 50), 1.0));
        assert_eq!(g, y);
    }

    #[test]
    fn pools() {
        let x = Array4::from_shape_vec((1, 1, 4, 4), (0..16).map(f64::from).collect()).unwrap();
        let mut avg = AvgPool2d::new(2);
        let y = avg.forward(&x, Mode::Train);
        assert_eq!(y.into_raw_vec_and_offset().0, vec![2.5, 4.5, 10.5, 12.5]);
        let dx = avg.backward(&Array4::from_elem((1, 1, 2, 2), 4.0));
        assert!(dx.iter().all(|&v| v == 1.0));

        let mut max = MaxPool2d::new(2);
        let y = max.forward(&x, Mode::Train);
        assert_eq!(y.into_raw_vec_and_offset().0, vec![5.0, 7.0, 13.0, 15.0]);
        let dx = max.backward(&Array4::from_elem((1, 1, 2, 2), 1.0));
        assert_eq!(dx.sum(), 4.0);
        assert_eq!(dx[[0, 0, 1, 1]], 1.0);

        let mut gmax = GlobalPool::new(PoolKind::Max);
        assert_eq!(gmax.forward(&x, Mode::Train), array![[15.0]]);
        assert_eq!(gmax.backward(&array![[2.0]])[[0, 0, 3, 3]], 2.0);
        let mut gavg = GlobalPool::new(PoolKind::Avg);
        assert_eq!(gavg.forward(&x, Mode::Train), array![[7.5]]);
        assert_eq!(gavg.backward(&array![[16.0]])[[0, 0, 2, 1]], 1.0);
    }

    #[test]
    fn avg_pool_odd_sizes_drop_margins() {
        let x = Array4::from_elem((1, 2, 7, 5), 1.0);
        let mut avg = AvgPool2d::new(3);
        let y = avg.forward(&x, Mode::Train);
        assert_eq!(y.dim(), (1, 2, 2, 1));
        assert!(y.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let dx = avg.backward(&Array4::from_elem((1, 2, 2, 1), 9.0));
        assert_eq!(dx[[0, 0, 6, 0]], 0.0);
        assert_eq!(dx[[0, 1, 5, 2]], 1.0);
    }
}
