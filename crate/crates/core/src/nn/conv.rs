use ndarray::linalg::general_mat_mul;
use ndarray::{Array4, ArrayView2, ArrayViewMut2};
use rand_chacha::ChaCha8Rng;

use super::{join, Mode, Module, Param};

/// Grouped 2-D convolution over `[N, C, H, W]` tensors, computed as im2col
/// followed by a matrix product per sample and group.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    input: Option<Array4<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f64],
    channels: usize,
    (h, w): (usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    cols: &mut [f64],
) {
    let plane = oh * ow;
    for c in 0..channels {
        let img = &src[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        d.fill(0.0);
                        continue;
                    }
                    let srow = &img[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in d.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { srow[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    channels: usize,
    (h, w): (usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    dst: &mut [f64],
) {
    let plane = oh * ow;
    for c in 0..channels {
        let img = &mut dst[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut img[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl Conv2d {
    /// He-uniform initialized convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(groups > 0 && in_channels % groups == 0 && out_channels % groups == 0);
        let fan_in = in_channels / groups * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Param::uniform(
            join(name, "weight"),
            &[out_channels, in_channels / groups, kernel, kernel],
            bound,
            rng,
        );
        let bias = bias.then(|| Param::zeros(join(name, "bias"), &[out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            input: None,
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        assert!(h + 2 * self.padding >= self.kernel && w + 2 * self.padding >= self.kernel);
        let (oh, ow) = self.output_dims(h, w);
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let cin_g = c / self.groups;
        let cout_g = self.out_channels / self.groups;
        let kk = cin_g * self.kernel * self.kernel;
        let plane = oh * ow;
        let mut out = Array4::<f64>::zeros((n, self.out_channels, oh, ow));
        let out_slice = out.as_slice_mut().expect("standard layout");
        let weights = self.weight.data();
        let mut cols = vec![0.0; if self.is_pointwise() { 0 } else { kk * plane }];
        for s in 0..n {
            for g in 0..self.groups {
                let start = (s * c + g * cin_g) * h * w;
                let input = &src[start..start + cin_g * h * w];
                let cols_view = if self.is_pointwise() {
                    ArrayView2::from_shape((kk, plane), input).expect("shape")
                } else {
                    im2col(
                        input,
                        cin_g,
                        (h, w),
                        self.kernel,
                        self.stride,
                        self.padding,
                        (oh, ow),
                        &mut cols,
                    );
                    ArrayView2::from_shape((kk, plane), &cols[..]).expect("shape")
                };
                let wg = ArrayView2::from_shape((cout_g, kk), &weights[g * cout_g * kk..(g + 1) * cout_g * kk])
                    .expect("shape");
                let ostart = (s * self.out_channels + g * cout_g) * plane;
                let mut og = ArrayViewMut2::from_shape((cout_g, plane), &mut out_slice[ostart..ostart + cout_g * plane])
                    .expect("shape");
                general_mat_mul(1.0, &wg, &cols_view, 0.0, &mut og);
            }
        }
        if let Some(b) = &self.bias {
            let b = b.data();
            for (i, chunk) in out_slice.chunks_exact_mut(plane).enumerate() {
                let bv = b[i % self.out_channels];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        self.input = mode.is_train().then(|| x.into_owned());
        out
    }

    pub fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let x = self.input.take().expect("conv backward without a training forward pass");
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.output_dims(h, w);
        assert_eq!(grad.dim(), (n, self.out_channels, oh, ow), "conv grad shape");
        let grad = grad.as_standard_layout();
        let gslice = grad.as_slice().expect("standard layout");
        let src = x.as_slice().expect("standard layout");
        let cin_g = c / self.groups;
        let cout_g = self.out_channels / self.groups;
        let kk = cin_g * self.kernel * self.kernel;
        let plane = oh * ow;
        let pointwise = self.is_pointwise();
        let mut dx = Array4::<f64>::zeros((n, c, h, w));
        let dx_slice = dx.as_slice_mut().expect("standard layout");
        let mut cols = vec![0.0; if pointwise { 0 } else { kk * plane }];
        let mut dcols = vec![0.0; kk * plane];
        let weights = self.weight.value.as_slice().expect("contiguous").to_vec();
        let wgrad = self.weight.grad_mut();
        for s in 0..n {
            for g in 0..self.groups {
                let start = (s * c + g * cin_g) * h * w;
                let input = &src[start..start + cin_g * h * w];
                let cols_view = if pointwise {
                    ArrayView2::from_shape((kk, plane), input).expect("shape")
                } else {
                    im2col(
                        input,
                        cin_g,
                        (h, w),
                        self.kernel,
                        self.stride,
                        self.padding,
                        (oh, ow),
                        &mut cols,
                    );
                    ArrayView2::from_shape((kk, plane), &cols[..]).expect("shape")
                };
                let gstart = (s * self.out_channels + g * cout_g) * plane;
                let dout = ArrayView2::from_shape((cout_g, plane), &gslice[gstart..gstart + cout_g * plane])
                    .expect("shape");
                let mut dw = ArrayViewMut2::from_shape((cout_g, kk), &mut wgrad[g * cout_g * kk..(g + 1) * cout_g * kk])
                    .expect("shape");
                general_mat_mul(1.0, &dout, &cols_view.t(), 1.0, &mut dw);

                let wg = ArrayView2::from_shape((cout_g, kk), &weights[g * cout_g * kk..(g + 1) * cout_g * kk])
                    .expect("shape");
                if pointwise {
                    let mut dxg = ArrayViewMut2::from_shape((kk, plane), &mut dx_slice[start..start + cin_g * h * w])
                        .expect("shape");
                    general_mat_mul(1.0, &wg.t(), &dout, 0.0, &mut dxg);
                } else {
                    let mut dc = ArrayViewMut2::from_shape((kk, plane), &mut dcols[..]).expect("shape");
                    general_mat_mul(1.0, &wg.t(), &dout, 0.0, &mut dc);
                    col2im(
                        &dcols,
                        cin_g,
                        (h, w),
                        self.kernel,
                        self.stride,
                        self.padding,
                        (oh, ow),
                        &mut dx_slice[start..start + cin_g * h * w],
                    );
                }
            }
        }
        if let Some(b) = &mut self.bias {
            let out_ch = self.out_channels;
            let bg = b.grad_mut();
            for (i, chunk) in gslice.chunks_exact(plane).enumerate() {
                bg[i % out_ch] += chunk.iter().sum::<f64>();
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Direct six-loop convolution.
    fn naive(conv: &Conv2d, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = conv.output_dims(h, w);
        let cin_g = c / conv.groups;
        let cout_g = conv.out_channels / conv.groups;
        let wt = conv.weight.value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut out = Array4::zeros((n, conv.out_channels, oh, ow));
        for s in 0..n {
            for co in 0..conv.out_channels {
                let g = co / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[co]);
                        for ci in 0..cin_g {
                            for ky in 0..conv.kernel {
                                for kx in 0..conv.kernel {
                                    let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wt[[co, ci, ky, kx]] * x[[s, g * cin_g + ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        out[[s, co, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_input(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
        use rand::Rng;
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(cin, cout, k, s, p, g) in &[(3, 4, 3, 1, 1, 1), (4, 4, 3, 2, 1, 4), (2, 6, 1, 1, 0, 1), (4, 6, 5, 2, 2, 2)] {
            let mut conv = Conv2d::new("c", cin, cout, k, s, p, g, true, &mut rng);
            conv.bias.as_mut().unwrap().value.mapv_inplace(|_| 0.3);
            let x = random_input((2, cin, 7, 6), &mut rng);
            let got = conv.forward(&x, Mode::Eval);
            let want = naive(&conv, &x);
            assert!((&got - &want).iter().all(|d| d.abs() < 1e-12), "{cin} {cout} {k} {s} {p} {g}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(cin, cout, k, s, p, g) in &[(2, 3, 3, 1, 1, 1), (4, 4, 3, 2, 1, 4), (3, 2, 1, 1, 0, 1)] {
            let mut conv = Conv2d::new("c", cin, cout, k, s, p, g, true, &mut rng);
            let x = random_input((2, cin, 5, 5), &mut rng);
            let y = conv.forward(&x, Mode::Train);
            let upstream = random_input(y.dim(), &mut rng);
            let dx = conv.backward(&upstream);
            let loss = |conv: &mut Conv2d, x: &Array4<f64>| (conv.forward(x, Mode::Eval) * &upstream).sum();
            let eps = 1e-6;
            for i in [0, 3, 7] {
                let idx = i % x.len();
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.as_slice_mut().unwrap()[idx] += eps;
                xm.as_slice_mut().unwrap()[idx] -= eps;
                let fd = (loss(&mut conv, &xp) - loss(&mut conv, &xm)) / (2.0 * eps);
                assert!((fd - dx.as_slice().unwrap()[idx]).abs() < 1e-7);
            }
            for idx in [0, 5] {
                let idx = idx % conv.weight.len();
                let analytic = conv.weight.grad.as_slice().unwrap()[idx];
                conv.weight.value.as_slice_mut().unwrap()[idx] += eps;
                let lp = loss(&mut conv, &x);
                conv.weight.value.as_slice_mut().unwrap()[idx] -= 2.0 * eps;
                let lm = loss(&mut conv, &x);
                conv.weight.value.as_slice_mut().unwrap()[idx] += eps;
                assert!(((lp - lm) / (2.0 * eps) - analytic).abs() < 1e-7);
            }
            let bias_grad = conv.bias.as_ref().unwrap().grad[0];
            let want: f64 = upstream.index_axis(ndarray::Axis(1), 0).sum();
            assert!((bias_grad - want).abs() < 1e-10);
        }
    }
}
