//! Minimal layers with explicit forward caches and hand-written backward passes.
//!
//! Feature maps are `(channels, height, width)` arrays for a single image. Each
//! layer's `backward` takes an optional gradient accumulator of the layer's own
//! type: `None` skips the weight-gradient products entirely, which is what the
//! frozen parts of the network use.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

/// Uniform access to every trainable tensor of a module, in a fixed order.
pub trait Parameters: Clone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64]));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, v| n += v.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        self.visit("", &mut |_, v| out.extend_from_slice(v));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut("", &mut |_, v| {
            let n = v.len();
            v.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, v| v.fill(0.0));
        z
    }

    /// `self += scale * other`.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut("", &mut |_, v| {
            let n = v.len();
            for (a, b) in v.iter_mut().zip(&flat[offset..offset + n]) {
                *a += scale * b;
            }
            offset += n;
        });
    }

    fn squared_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.visit("", &mut |_, v| acc += v.iter().map(|x| x * x).sum::<f64>());
        acc
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn slice_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored contiguously")
}

fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are stored contiguously")
}

/// Square-kernel convolution with stride 1 and "same" zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out_channels, in_channels * kernel * kernel)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub kernel: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    height: usize,
    width: usize,
}

impl Conv2d {
    /// He-normal initialisation.
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = in_ch * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight =
            Array2::from_shape_fn((out_ch, fan_in), |_| std * rng.sample::<f64, _>(StandardNormal));
        Self {
            weight,
            bias: Array1::zeros(out_ch),
            kernel,
        }
    }

    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            weight: Array2::zeros((out_ch, in_ch * kernel * kernel)),
            bias: Array1::zeros(out_ch),
            kernel,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c_in, h, w) = x.dim();
        let k = self.kernel;
        let hw = h * w;
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        if k == 1 {
            return Array2::from_shape_vec((c_in, hw), src.to_vec()).expect("shape");
        }
        let pad = (k / 2) as isize;
        let mut cols = vec![0.0; c_in * k * k * hw];
        for c in 0..c_in {
            let plane = &src[c * hw..(c + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let row = (c * k * k + ky * k + kx) * hw;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s0 = sy as usize * w + (x_lo as isize + dx) as usize;
                        let d0 = row + y * w + x_lo;
                        cols[d0..d0 + (x_hi - x_lo)].copy_from_slice(&plane[s0..s0 + (x_hi - x_lo)]);
                    }
                }
            }
        }
        Array2::from_shape_vec((c_in * k * k, hw), cols).expect("shape")
    }

    fn col2im(&self, dcols: &Array2<f64>, c_in: usize, h: usize, w: usize) -> Array3<f64> {
        let k = self.kernel;
        let hw = h * w;
        let src = dcols.as_slice().expect("standard layout");
        if k == 1 {
            return Array3::from_shape_vec((c_in, h, w), src.to_vec()).expect("shape");
        }
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; c_in * hw];
        for c in 0..c_in {
            let plane = &mut out[c * hw..(c + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let row = (c * k * k + ky * k + kx) * hw;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let d0 = sy as usize * w + (x_lo as isize + dx) as usize;
                        let s0 = row + y * w + x_lo;
                        for (d, s) in plane[d0..d0 + (x_hi - x_lo)]
                            .iter_mut()
                            .zip(&src[s0..s0 + (x_hi - x_lo)])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((c_in, h, w), out).expect("shape")
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (c_in, h, w) = x.dim();
        assert_eq!(c_in, self.in_channels(), "conv input channel mismatch");
        let cols = self.im2col(x);
        let mut out = Array2::zeros((self.out_channels(), h * w));
        for (mut row, b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row.fill(*b);
        }
        general_mat_mul(1.0, &self.weight, &cols, 1.0, &mut out);
        let out = out
            .into_shape_with_order((self.out_channels(), h, w))
            .expect("shape");
        (
            out,
            ConvCache {
                cols,
                height: h,
                width: w,
            },
        )
    }

    /// Returns the input gradient when `need_input` is set; accumulates weight
    /// and bias gradients into `grads` when given.
    pub fn backward(
        &self,
        cache: &ConvCache,
        d_out: &Array3<f64>,
        grads: Option<&mut Conv2d>,
        need_input: bool,
    ) -> Option<Array3<f64>> {
        let hw = cache.height * cache.width;
        let d_out = d_out.as_standard_layout();
        let d2: ArrayView2<f64> = d_out
            .view()
            .into_shape_with_order((self.out_channels(), hw))
            .expect("shape");
        if let Some(g) = grads {
            general_mat_mul(1.0, &d2, &cache.cols.t(), 1.0, &mut g.weight);
            g.bias += &d2.sum_axis(Axis(1));
        }
        if need_input {
            let mut dcols = Array2::zeros(cache.cols.dim());
            general_mat_mul(1.0, &self.weight.t(), &d2, 0.0, &mut dcols);
            Some(self.col2im(&dcols, self.in_channels(), cache.height, cache.width))
        } else {
            None
        }
    }
}

impl Parameters for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        f(join(prefix, "weight"), slice(&self.weight));
        f(join(prefix, "bias"), slice(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(join(prefix, "weight"), slice_mut(&mut self.weight));
        f(join(prefix, "bias"), slice_mut(&mut self.bias));
    }
}

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(out_features, in_features)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_f: usize, out_f: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Array2::from_shape_fn((out_f, in_f), |_| {
                std * rng.sample::<f64, _>(StandardNormal)
            }),
            bias: Array1::zeros(out_f),
        }
    }

    pub fn zeros(in_f: usize, out_f: usize) -> Self {
        Self {
            weight: Array2::zeros((out_f, in_f)),
            bias: Array1::zeros(out_f),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    pub fn backward(&self, x: &Array1<f64>, d_out: &Array1<f64>, grads: Option<&mut Linear>) -> Array1<f64> {
        if let Some(g) = grads {
            for (i, &d) in d_out.iter().enumerate() {
                g.weight.row_mut(i).scaled_add(d, x);
            }
            g.bias += d_out;
        }
        self.weight.t().dot(d_out)
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        f(join(prefix, "weight"), slice(&self.weight));
        f(join(prefix, "bias"), slice(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(join(prefix, "weight"), slice_mut(&mut self.weight));
        f(join(prefix, "bias"), slice_mut(&mut self.bias));
    }
}

pub fn relu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f64, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<D: ndarray::Dimension>(
    out: &ndarray::Array<f64, D>,
    d_out: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut d = d_out.clone();
    ndarray::Zip::from(&mut d).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    d
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// 2x2 average pooling; odd trailing rows/columns are dropped.
pub fn avg_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..ho {
            let r0 = &plane[2 * y * w..2 * y * w + w];
            let r1 = &plane[(2 * y + 1) * w..(2 * y + 1) * w + w];
            let dst = &mut out[(ch * ho + y) * wo..(ch * ho + y + 1) * wo];
            for (xo, d) in dst.iter_mut().enumerate() {
                *d = 0.25 * (r0[2 * xo] + r0[2 * xo + 1] + r1[2 * xo] + r1[2 * xo + 1]);
            }
        }
    }
    Array3::from_shape_vec((c, ho, wo), out).expect("shape")
}

pub fn avg_pool2_backward(d_out: &Array3<f64>, in_h: usize, in_w: usize) -> Array3<f64> {
    let (c, ho, wo) = d_out.dim();
    let d_out = d_out.as_standard_layout();
    let src = d_out.as_slice().expect("standard layout");
    let mut out = vec![0.0; c * in_h * in_w];
    for ch in 0..c {
        for y in 0..2 * ho {
            let srow = &src[(ch * ho + y / 2) * wo..(ch * ho + y / 2 + 1) * wo];
            let drow = &mut out[(ch * in_h + y) * in_w..(ch * in_h + y) * in_w + 2 * wo];
            for (xi, d) in drow.iter_mut().enumerate() {
                *d = 0.25 * srow[xi / 2];
            }
        }
    }
    Array3::from_shape_vec((c, in_h, in_w), out).expect("shape")
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            let srow = &src[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            let drow = &mut out[(ch * ho + y) * wo..(ch * ho + y + 1) * wo];
            for (xi, d) in drow.iter_mut().enumerate() {
                *d = srow[xi / 2];
            }
        }
    }
    Array3::from_shape_vec((c, ho, wo), out).expect("shape")
}

pub fn upsample2_backward(d_out: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = d_out.dim();
    let d_out = d_out.as_standard_layout();
    let src = d_out.as_slice().expect("standard layout");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            let r0 = &src[(ch * h + 2 * y) * w..(ch * h + 2 * y) * w + w];
            let r1 = &src[(ch * h + 2 * y + 1) * w..(ch * h + 2 * y + 1) * w + w];
            let dst = &mut out[(ch * ho + y) * wo..(ch * ho + y + 1) * wo];
            for (xo, d) in dst.iter_mut().enumerate() {
                *d = r0[2 * xo] + r0[2 * xo + 1] + r1[2 * xo] + r1[2 * xo + 1];
            }
        }
    }
    Array3::from_shape_vec((c, ho, wo), out).expect("shape")
}

/// Channel concatenation `[a; b]`.
pub fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("spatial dims agree")
}

pub fn split_channels(d: &Array3<f64>, first: usize) -> (Array3<f64>, Array3<f64>) {
    (
        d.slice(s![..first, .., ..]).to_owned(),
        d.slice(s![first.., .., ..]).to_owned(),
    )
}

/// Spatial mean per channel.
pub fn global_avg_pool(x: &Array3<f64>) -> Array1<f64> {
    let (c, h, w) = x.dim();
    x.to_shape((c, h * w))
        .expect("shape")
        .mean_axis(Axis(1))
        .expect("non-empty map")
}

pub fn global_avg_pool_backward(d_out: &Array1<f64>, h: usize, w: usize) -> Array3<f64> {
    let scale = 1.0 / (h * w) as f64;
    Array3::from_shape_fn((d_out.len(), h, w), |(c, _, _)| d_out[c] * scale)
}

/// Adam with bias correction over any [`Parameters`] module.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        let g = grads.flatten();
        if self.m.is_empty() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
        }
        assert_eq!(g.len(), self.m.len(), "optimizer state does not match parameters");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut offset = 0;
        params.visit_mut("", &mut |_, p| {
            for (j, w) in p.iter_mut().enumerate() {
                let i = offset + j;
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            offset += p.len();
        });
    }
}
