use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Parameters visited as (value, gradient) pairs in a fixed order.
pub trait Trainable {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32]));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |_, g| g.fill(0.0));
    }

    /// Flat copy of every parameter value.
    fn flat_params(&mut self) -> Vec<f32> {
        let mut out = Vec::new();
        self.visit_params(&mut |p, _| out.extend_from_slice(p));
        out
    }

    fn load_flat_params(&mut self, flat: &[f32]) -> Result<(), String> {
        let mut offset = 0;
        let mut overflow = false;
        self.visit_params(&mut |p, _| {
            if offset + p.len() > flat.len() {
                overflow = true;
                return;
            }
            p.copy_from_slice(&flat[offset..offset + p.len()]);
            offset += p.len();
        });
        if overflow || offset != flat.len() {
            return Err(format!(
                "parameter count mismatch: file has {}, model expects {}",
                flat.len(),
                offset
            ));
        }
        Ok(())
    }
}

/// He-normal sample for a ReLU layer with the given fan-in.
pub fn he_normal<R: Rng>(rng: &mut R, fan_in: usize, len: usize) -> Vec<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..len).map(|_| normal.sample(rng) as f32).collect()
}

/// 2-D convolution over a single (C, H, W) image via im2col.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    /// (out, in * k * k), row-major over (in, ky, kx).
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
    pub grad_weight: Array2<f32>,
    pub grad_bias: Array1<f32>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Self {
        let cols = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            dilation,
            weight: Array2::zeros((out_channels, cols)),
            bias: Array1::zeros(out_channels),
            grad_weight: Array2::zeros((out_channels, cols)),
            grad_bias: Array1::zeros(out_channels),
        }
    }

    pub fn init_he<R: Rng>(&mut self, rng: &mut R) {
        let fan_in = self.weight.ncols();
        let values = he_normal(rng, fan_in, self.weight.len());
        self.weight = Array2::from_shape_vec(self.weight.raw_dim(), values).unwrap();
        self.bias.fill(0.0);
    }

    pub fn output_size(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Unrolls receptive fields into columns: (in * k * k, oh * ow).
    pub fn im2col(&self, input: ArrayView3<f32>) -> Array2<f32> {
        let (c, h, w) = input.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = (self.output_size(h), self.output_size(w));
        let k = self.kernel;
        let mut cols = Array2::<f32>::zeros((c * k * k, oh * ow));
        let input = input.as_standard_layout();
        let src = input.as_slice().unwrap();
        let dst = cols.as_slice_mut().unwrap();
        let row_len = oh * ow;
        for ci in 0..c {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let out = &mut dst[row * row_len..(row + 1) * row_len];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky * self.dilation) as isize
                            - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut out[oy * ow..(oy + 1) * ow];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx * self.dilation) as isize
                                - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *o = in_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: ArrayView2<f32>, h: usize, w: usize) -> Array3<f32> {
        let c = self.in_channels;
        let (oh, ow) = (self.output_size(h), self.output_size(w));
        let k = self.kernel;
        let mut out = Array3::<f32>::zeros((c, h, w));
        let cols = cols.as_standard_layout();
        let src = cols.as_slice().unwrap();
        let dst = out.as_slice_mut().unwrap();
        let row_len = oh * ow;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let col = &src[row * row_len..(row + 1) * row_len];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky * self.dilation) as isize
                            - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx * self.dilation) as isize
                                - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[(ci * h + iy as usize) * w + ix as usize] += col[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Forward pass; also returns the column matrix needed by [`Conv2d::backward`].
    pub fn forward_train(&self, input: ArrayView3<f32>) -> (Array3<f32>, Array2<f32>) {
        let (_, h, w) = input.dim();
        let cols = self.im2col(input);
        let out = self.apply_cols(cols.view(), h, w);
        (out, cols)
    }

    pub fn forward(&self, input: ArrayView3<f32>) -> Array3<f32> {
        let (c, h, w) = input.dim();
        if self.is_pointwise() {
            let input = input.as_standard_layout();
            let mat = input.view().into_shape_with_order((c, h * w)).unwrap();
            return self.apply_cols(mat, h, w);
        }
        let cols = self.im2col(input);
        self.apply_cols(cols.view(), h, w)
    }

    fn apply_cols(&self, cols: ArrayView2<f32>, h: usize, w: usize) -> Array3<f32> {
        let (oh, ow) = (self.output_size(h), self.output_size(w));
        let mut out = self.weight.dot(&cols);
        for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            if b != 0.0 {
                row.mapv_inplace(|v| v + b);
            }
        }
        out.into_shape_with_order((self.out_channels, oh, ow))
            .unwrap()
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &mut self,
        grad_out: ArrayView3<f32>,
        cols: &Array2<f32>,
        h: usize,
        w: usize,
    ) -> Array3<f32> {
        let (oc, oh, ow) = grad_out.dim();
        let grad_out = grad_out.as_standard_layout();
        let g = grad_out
            .view()
            .into_shape_with_order((oc, oh * ow))
            .unwrap();
        self.grad_weight += &g.dot(&cols.t());
        self.grad_bias += &g.sum_axis(Axis(1));
        let grad_cols = self.weight.t().dot(&g);
        self.col2im(grad_cols.view(), h, w)
    }
}

impl Trainable for Conv2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        f(
            self.weight.as_slice_mut().unwrap(),
            self.grad_weight.as_slice_mut().unwrap(),
        );
        f(
            self.bias.as_slice_mut().unwrap(),
            self.grad_bias.as_slice_mut().unwrap(),
        );
    }
}

/// Max pooling; `forward` also returns the flat argmax index of each output.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool2d {
    pub fn output_size(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, input: ArrayView3<f32>) -> (Array3<f32>, Vec<usize>) {
        let (c, h, w) = input.dim();
        let (oh, ow) = (self.output_size(h), self.output_size(w));
        let mut out = Array3::<f32>::zeros((c, oh, ow));
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = input[[ci, iy as usize, ix as usize]];
                            if v > best {
                                best = v;
                                best_idx = (ci * h + iy as usize) * w + ix as usize;
                            }
                        }
                    }
                    out[[ci, oy, ox]] = best;
                    argmax.push(best_idx);
                }
            }
        }
        (out, argmax)
    }

    pub fn backward(
        grad_out: ArrayView3<f32>,
        argmax: &[usize],
        in_shape: (usize, usize, usize),
    ) -> Array3<f32> {
        let mut grad = Array3::<f32>::zeros(in_shape);
        let flat = grad.as_slice_mut().unwrap();
        for (g, &idx) in grad_out.iter().zip(argmax) {
            flat[idx] += g;
        }
        grad
    }
}

pub fn relu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f32, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes gradient entries where the forward activation was clamped.
pub fn relu_backward<D: ndarray::Dimension>(
    grad: &mut ndarray::Array<f32, D>,
    activation: &ndarray::Array<f32, D>,
) {
    ndarray::Zip::from(grad).and(activation).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Fully connected layer over row-major batches: `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    /// (out, in)
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
    pub grad_weight: Array2<f32>,
    pub grad_bias: Array1<f32>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
            grad_weight: Array2::zeros((outputs, inputs)),
            grad_bias: Array1::zeros(outputs),
        }
    }

    pub fn init_he<R: Rng>(&mut self, rng: &mut R) {
        let values = he_normal(rng, self.weight.ncols(), self.weight.len());
        self.weight = Array2::from_shape_vec(self.weight.raw_dim(), values).unwrap();
        self.bias.fill(0.0);
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    pub fn backward(&mut self, x: ArrayView2<f32>, grad_out: ArrayView2<f32>) -> Array2<f32> {
        self.accumulate_grads(x, grad_out);
        grad_out.dot(&self.weight)
    }

    /// Parameter gradients only, for a first layer whose input is constant.
    pub fn accumulate_grads(&mut self, x: ArrayView2<f32>, grad_out: ArrayView2<f32>) {
        self.grad_weight += &grad_out.t().dot(&x);
        self.grad_bias += &grad_out.sum_axis(Axis(0));
    }
}

impl Trainable for Dense {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        f(
            self.weight.as_slice_mut().unwrap(),
            self.grad_weight.as_slice_mut().unwrap(),
        );
        f(
            self.bias.as_slice_mut().unwrap(),
            self.grad_bias.as_slice_mut().unwrap(),
        );
    }
}

/// Row-wise softmax computed in f64.
pub fn softmax_rows(logits: ArrayView2<f32>) -> Array2<f64> {
    let mut out = logits.mapv(f64::from);
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean over the spatial axes of a (C, H, W) map.
pub fn global_avg_pool(x: ArrayView3<f32>) -> Array1<f32> {
    let (_, h, w) = x.dim();
    let n = (h * w) as f32;
    x.outer_iter().map(|plane| plane.sum() / n).collect()
}

pub fn global_avg_pool_backward(grad: &Array1<f32>, h: usize, w: usize) -> Array3<f32> {
    let n = (h * w) as f32;
    let mut out = Array3::<f32>::zeros((grad.len(), h, w));
    for (mut plane, &g) in out.outer_iter_mut().zip(grad.iter()) {
        plane.fill(g / n);
    }
    out
}

/// Copies rows `idx` of `x` into a new matrix.
pub fn gather_rows(x: &Array2<f32>, idx: &[usize]) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros((idx.len(), x.ncols()));
    for (mut row, &i) in out.rows_mut().into_iter().zip(idx) {
        row.assign(&x.slice(s![i, ..]));
    }
    out
}
