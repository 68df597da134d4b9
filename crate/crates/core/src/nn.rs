//! Minimal hand-differentiated layers: dense, 2-D convolution, pooling,
//! leaky rectification, plus Adam and the named-parameter plumbing used by
//! checkpoints and the optimizer.
//!
//! Activations are laid out channel-major (`C × H × W`) per image; dense
//! layers take row-major `batch × features` buffers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::{matmul, Real};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Named flat views over every trainable tensor of a network.
///
/// Two values of the same type and configuration always enumerate their
/// tensors in the same order; the optimizer and gradient buffers rely on it.
pub trait ParamSet<T: Real> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>);
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>);

    fn named(&self) -> Vec<(String, &Vec<T>)> {
        let mut out = Vec::new();
        self.tensors("", &mut out);
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        self.tensors_mut("", &mut out);
        out
    }

    fn fill_zero(&mut self) {
        for (_, t) in self.named_mut() {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    fn scale_all(&mut self, factor: T) {
        for (_, t) in self.named_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn gaussian_vec<T: Real, R: Rng + ?Sized>(len: usize, std: f64, rng: &mut R) -> Vec<T> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect()
}

#[inline]
pub fn leaky<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * T::lit(LEAKY_SLOPE)
    }
}

/// In-place leaky rectification.
pub fn leaky_inplace<T: Real>(x: &mut [T]) {
    x.iter_mut().for_each(|v| *v = leaky(*v));
}

/// Backward through a leaky rectifier, given its *output* `y` (same sign as
/// the pre-activation).
pub fn leaky_backward<T: Real>(y: &[T], dy: &mut [T]) {
    let slope = T::lit(LEAKY_SLOPE);
    for (g, &o) in dy.iter_mut().zip(y) {
        if o <= T::zero() {
            *g *= slope;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim × in_dim`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    /// He-style normal init scaled by `gain`.
    pub fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain * (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE) / in_dim as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weight: gaussian_vec(in_dim * out_dim, std, rng),
            bias: vec![T::zero(); out_dim],
        }
    }

    /// `y[b, :] = W x[b, :] + bias` for a `batch × in_dim` input.
    pub fn forward(&self, x: &[T], batch: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), batch * self.in_dim);
        let mut y = Vec::with_capacity(batch * self.out_dim);
        for _ in 0..batch {
            y.extend_from_slice(&self.bias);
        }
        matmul(x, false, &self.weight, true, batch, self.in_dim, self.out_dim, &mut y, true);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dx` when asked.
    pub fn backward(
        &self,
        x: &[T],
        batch: usize,
        dy: &[T],
        grad: &mut Dense<T>,
        want_dx: bool,
    ) -> Option<Vec<T>> {
        // dW += dyᵀ x ; db += Σ_b dy
        matmul(dy, true, x, false, self.out_dim, batch, self.in_dim, &mut grad.weight, true);
        for row in dy.chunks_exact(self.out_dim) {
            for (g, &d) in grad.bias.iter_mut().zip(row) {
                *g += d;
            }
        }
        want_dx.then(|| {
            let mut dx = vec![T::zero(); batch * self.in_dim];
            matmul(dy, false, &self.weight, false, batch, self.out_dim, self.in_dim, &mut dx, false);
            dx
        })
    }

    pub fn cast<U: Real>(&self) -> Dense<U> {
        Dense {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: crate::real::cast_vec(&self.weight),
            bias: crate::real::cast_vec(&self.bias),
        }
    }
}

impl<T: Real> ParamSet<T> for Dense<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Two dense layers with a leaky rectifier in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    input: Vec<T>,
    hidden: Vec<T>,
    batch: usize,
}

impl<T: Real> Mlp<T> {
    pub fn random<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        output: usize,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Dense::random(input, hidden, 1.0, rng),
            fc2: Dense::random(hidden, output, out_gain, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            fc1: Dense::zeros(input, hidden),
            fc2: Dense::zeros(hidden, output),
        }
    }

    pub fn forward(&self, x: &[T], batch: usize) -> Vec<T> {
        let mut h = self.fc1.forward(x, batch);
        leaky_inplace(&mut h);
        self.fc2.forward(&h, batch)
    }

    pub fn forward_cached(&self, x: &[T], batch: usize) -> (Vec<T>, MlpCache<T>) {
        let mut h = self.fc1.forward(x, batch);
        leaky_inplace(&mut h);
        let y = self.fc2.forward(&h, batch);
        (
            y,
            MlpCache {
                input: x.to_vec(),
                hidden: h,
                batch,
            },
        )
    }

    /// Returns `dx`; parameter gradients go to `grad` when provided.
    pub fn backward(&self, cache: &MlpCache<T>, dy: &[T], grad: Option<&mut Mlp<T>>) -> Vec<T> {
        let mut scratch;
        let g = match grad {
            Some(g) => g,
            None => {
                scratch = Mlp::zeros(self.fc1.in_dim, self.fc1.out_dim, self.fc2.out_dim);
                &mut scratch
            }
        };
        let mut dh = self
            .fc2
            .backward(&cache.hidden, cache.batch, dy, &mut g.fc2, true)
            .expect("dx requested");
        leaky_backward(&cache.hidden, &mut dh);
        self.fc1
            .backward(&cache.input, cache.batch, &dh, &mut g.fc1, true)
            .expect("dx requested")
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
        }
    }
}

impl<T: Real> ParamSet<T> for Mlp<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        self.fc1.tensors(&join(prefix, "fc1"), out);
        self.fc2.tensors(&join(prefix, "fc2"), out);
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        self.fc1.tensors_mut(&join(prefix, "fc1"), out);
        self.fc2.tensors_mut(&join(prefix, "fc2"), out);
    }
}

/// Square-kernel 2-D convolution with `kernel / 2` zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `out_ch × (in_ch · kernel²)`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    cols: Vec<T>,
}

pub fn conv_out_size(size: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (size + 2 * pad - kernel) / stride + 1
}

impl<T: Real> Conv2d<T> {
    pub fn random<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let std = gain * (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE) / fan_in as f64).sqrt();
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            weight: gaussian_vec(out_ch * fan_in, std, rng),
            bias: vec![T::zero(); out_ch],
        }
    }

    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            weight: vec![T::zero(); out_ch * in_ch * kernel * kernel],
            bias: vec![T::zero(); out_ch],
        }
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let hw = oh * ow;
        let mut cols = vec![T::zero(); self.patch_len() * hw];
        for ci in 0..self.in_ch {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let hw = oh * ow;
        let mut x = vec![T::zero(); self.in_ch * h * w];
        for ci in 0..self.in_ch {
            let plane = &mut x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                plane[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Convolves one `in_ch × h × w` image.
    pub fn forward(&self, x: &[T], h: usize, w: usize) -> (Vec<T>, ConvCache<T>) {
        debug_assert_eq!(x.len(), self.in_ch * h * w);
        let oh = conv_out_size(h, self.kernel, self.stride);
        let ow = conv_out_size(w, self.kernel, self.stride);
        let hw = oh * ow;
        let cols = if self.kernel == 1 && self.stride == 1 {
            x.to_vec()
        } else {
            self.im2col(x, h, w, oh, ow)
        };
        let mut y = Vec::with_capacity(self.out_ch * hw);
        for &b in &self.bias {
            y.extend(std::iter::repeat_n(b, hw));
        }
        matmul(&self.weight, false, &cols, false, self.out_ch, self.patch_len(), hw, &mut y, true);
        (
            y,
            ConvCache {
                in_h: h,
                in_w: w,
                out_h: oh,
                out_w: ow,
                cols,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &ConvCache<T>,
        dy: &[T],
        grad: &mut Conv2d<T>,
        want_dx: bool,
    ) -> Option<Vec<T>> {
        let hw = cache.out_h * cache.out_w;
        let p = self.patch_len();
        matmul(dy, false, &cache.cols, true, self.out_ch, hw, p, &mut grad.weight, true);
        for (g, row) in grad.bias.iter_mut().zip(dy.chunks_exact(hw)) {
            *g += row.iter().copied().sum::<T>();
        }
        if !want_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); p * hw];
        matmul(&self.weight, true, dy, false, p, self.out_ch, hw, &mut dcols, false);
        if self.kernel == 1 && self.stride == 1 {
            Some(dcols)
        } else {
            Some(self.col2im(&dcols, cache.in_h, cache.in_w, cache.out_h, cache.out_w))
        }
    }

    pub fn cast<U: Real>(&self) -> Conv2d<U> {
        Conv2d {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            kernel: self.kernel,
            stride: self.stride,
            weight: crate::real::cast_vec(&self.weight),
            bias: crate::real::cast_vec(&self.bias),
        }
    }
}

impl<T: Real> ParamSet<T> for Conv2d<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// 2×2 average pooling in ceil mode: odd trailing rows/columns are averaged
/// over the cells that exist, so a 1×1 map pools to itself.
pub fn avg_pool2<T: Real>(x: &[T], ch: usize, h: usize, w: usize) -> (Vec<T>, usize, usize) {
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut y = vec![T::zero(); ch * oh * ow];
    for c in 0..ch {
        let plane = &x[c * h * w..(c + 1) * h * w];
        let out = &mut y[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            let ys = 2 * oy..(2 * oy + 2).min(h);
            for ox in 0..ow {
                let xs = 2 * ox..(2 * ox + 2).min(w);
                let mut acc = T::zero();
                for iy in ys.clone() {
                    for ix in xs.clone() {
                        acc += plane[iy * w + ix];
                    }
                }
                let count = T::lit((ys.len() * xs.len()) as f64);
                out[oy * ow + ox] = acc / count;
            }
        }
    }
    (y, oh, ow)
}

pub fn avg_pool2_backward<T: Real>(dy: &[T], ch: usize, h: usize, w: usize) -> Vec<T> {
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut dx = vec![T::zero(); ch * h * w];
    for c in 0..ch {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        let g = &dy[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            let ys = 2 * oy..(2 * oy + 2).min(h);
            for ox in 0..ow {
                let xs = 2 * ox..(2 * ox + 2).min(w);
                let share = g[oy * ow + ox] / T::lit((ys.len() * xs.len()) as f64);
                for iy in ys.clone() {
                    for ix in xs.clone() {
                        plane[iy * w + ix] += share;
                    }
                }
            }
        }
    }
    dx
}

pub fn global_avg_pool<T: Real>(x: &[T], ch: usize, hw: usize) -> Vec<T> {
    let n = T::lit(hw as f64);
    x.chunks_exact(hw)
        .take(ch)
        .map(|plane| plane.iter().copied().sum::<T>() / n)
        .collect()
}

pub fn global_avg_pool_backward<T: Real>(dy: &[T], hw: usize) -> Vec<T> {
    let n = T::lit(hw as f64);
    dy.iter()
        .flat_map(|&g| std::iter::repeat_n(g / n, hw))
        .collect()
}

/// Adam over a [`ParamSet`], with per-tensor first/second moment buffers in
/// enumeration order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new<P: ParamSet<T>>(params: &P, lr: f64, beta1: f64, beta2: f64) -> Self {
        let shapes: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step_count: 0,
            first: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn step<P: ParamSet<T>>(&mut self, params: &mut P, grads: &P) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step = T::lit(self.lr * bc2.sqrt() / bc1);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps * bc2.sqrt()));
        let grads = grads.named();
        for (i, (_, p)) in params.named_mut().into_iter().enumerate() {
            let g = grads[i].1;
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                p[j] -= step * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}
