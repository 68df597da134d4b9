//! The conditional style flow: a bijection between style vectors and
//! standard-normal latents, conditioned on a summary of the input image.
//!
//! Each step applies, in order, an actnorm layer, a learned invertible
//! `d × d` mix (the vector form of an invertible 1×1 convolution) and a
//! condition-aware affine coupling. Every step carries its exact
//! log-determinant, so the negative log-likelihood of a style is
//!
//! ```text
//! nll(s | c) = d/2 · ln 2π + ½‖F(s; c)‖² − ln|det ∂F/∂s|
//! ```
//!
//! Coupling log-scales pass through `k · tanh(raw / k)` with `k` the
//! configured clamp (2 by default), which bounds every Jacobian factor.

use std::ops::{Deref, DerefMut, Range};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{
    gaussian_vec, global_avg_pool, global_avg_pool_backward, join, leaky_backward, leaky_inplace,
    Conv2d, ConvCache, Mlp, MlpCache, ParamSet,
};
use crate::real::{cast_vec, Real};

macro_rules! vector_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name<T = f32>(pub Vec<T>);

        impl<T> Deref for $name<T> {
            type Target = [T];
            fn deref(&self) -> &[T] {
                &self.0
            }
        }

        impl<T> DerefMut for $name<T> {
            fn deref_mut(&mut self) -> &mut [T] {
                &mut self.0
            }
        }

        impl<T> From<Vec<T>> for $name<T> {
            fn from(v: Vec<T>) -> Self {
                Self(v)
            }
        }

        impl<T: Real> $name<T> {
            pub fn zeros(len: usize) -> Self {
                Self(vec![T::zero(); len])
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }
        }
    };
}

vector_newtype!(
    /// Disentangled tone-style representation consumed by the retoucher.
    StyleVector
);
vector_newtype!(
    /// Gaussian-side representation; a trained flow maps styles here.
    LatentVector
);
vector_newtype!(
    /// Global summary of an input image that conditions every coupling.
    ConditionVector
);

const SINGULAR_DET: f64 = 1e-12;

/// LU factorization with partial pivoting of a row-major `n × n` matrix.
#[derive(Debug, Clone)]
pub(crate) struct LuFactor<T> {
    n: usize,
    lu: Vec<T>,
    perm: Vec<usize>,
    sign: f64,
}

impl<T: Real> LuFactor<T> {
    pub(crate) fn new(a: &[T], n: usize) -> Self {
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let pivot = (k..n)
                .max_by(|&i, &j| {
                    lu[i * n + k]
                        .abs()
                        .partial_cmp(&lu[j * n + k].abs())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap_or(k);
            if pivot != k {
                for j in 0..n {
                    lu.swap(k * n + j, pivot * n + j);
                }
                perm.swap(k, pivot);
                sign = -sign;
            }
            let p = lu[k * n + k];
            if p == T::zero() {
                continue;
            }
            for i in k + 1..n {
                let f = lu[i * n + k] / p;
                lu[i * n + k] = f;
                for j in k + 1..n {
                    let u = lu[k * n + j];
                    lu[i * n + j] -= f * u;
                }
            }
        }
        Self { n, lu, perm, sign }
    }

    pub(crate) fn log_abs_det(&self) -> T {
        (0..self.n)
            .map(|i| self.lu[i * self.n + i].abs().ln())
            .fold(T::zero(), |a, b| a + b)
    }

    pub(crate) fn det(&self) -> f64 {
        let prod: f64 = (0..self.n).map(|i| self.lu[i * self.n + i].as_f64()).product();
        self.sign * prod
    }

    fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut x: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                let l = self.lu[i * n + j];
                let xj = x[j];
                x[i] -= l * xj;
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let u = self.lu[i * n + j];
                let xj = x[j];
                x[i] -= u * xj;
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }

    pub(crate) fn inverse(&self) -> Vec<T> {
        let n = self.n;
        let mut inv = vec![T::zero(); n * n];
        let mut e = vec![T::zero(); n];
        for col in 0..n {
            e.iter_mut().for_each(|v| *v = T::zero());
            e[col] = T::one();
            let x = self.solve(&e);
            for row in 0..n {
                inv[row * n + col] = x[row];
            }
        }
        inv
    }
}

fn matvec<T: Real>(m: &[T], v: &[T], n: usize) -> Vec<T> {
    m.chunks_exact(n)
        .map(|row| row.iter().zip(v).map(|(&a, &b)| a * b).sum())
        .collect()
}

fn matvec_t<T: Real>(m: &[T], v: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for (row, &vi) in m.chunks_exact(n).zip(v) {
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a * vi;
        }
    }
    out
}

/// Parameters of one flow step.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStepParams<T = f32> {
    pub dim: usize,
    /// When set, the second half conditions the first.
    pub swap_halves: bool,
    pub clamp: f64,
    pub actnorm_scale: Vec<T>,
    pub actnorm_bias: Vec<T>,
    /// Row-major `dim × dim`.
    pub mix_matrix: Vec<T>,
    /// φ₁: shift for the transformed half.
    pub phi_shift: Mlp<T>,
    /// φ₂: raw log-scale for the transformed half, clamped before use.
    pub phi_logscale: Mlp<T>,
}

/// Precomputed inverse and log-determinant of a step's mix matrix.
#[derive(Debug, Clone)]
pub struct MixFactor<T> {
    pub log_abs_det: T,
    pub inverse: Vec<T>,
}

#[derive(Debug, Clone)]
struct CouplingEval<T> {
    shift: Vec<T>,
    raw: Vec<T>,
    logscale: Vec<T>,
    shift_cache: MlpCache<T>,
    logscale_cache: MlpCache<T>,
}

impl<T: Real> FlowStepParams<T> {
    pub fn identity(dim: usize, cond_dim: usize, hidden: usize, clamp: f64, swap_halves: bool) -> Self {
        let mut mix = vec![T::zero(); dim * dim];
        for i in 0..dim {
            mix[i * dim + i] = T::one();
        }
        let half = dim / 2;
        Self {
            dim,
            swap_halves,
            clamp,
            actnorm_scale: vec![T::one(); dim],
            actnorm_bias: vec![T::zero(); dim],
            mix_matrix: mix,
            phi_shift: Mlp::zeros(half + cond_dim, hidden, dim - half),
            phi_logscale: Mlp::zeros(half + cond_dim, hidden, dim - half),
        }
    }

    /// Random orthogonal mix and random coupling nets. With `zero_output`
    /// the coupling output layers start at zero (identity coupling); with
    /// `random_actnorm` the actnorm scale and bias are drawn as well.
    #[allow(clippy::too_many_arguments)]
    pub fn random<R: Rng + ?Sized>(
        dim: usize,
        cond_dim: usize,
        hidden: usize,
        clamp: f64,
        swap_halves: bool,
        zero_output: bool,
        random_actnorm: bool,
        rng: &mut R,
    ) -> Self {
        let mut step = Self::identity(dim, cond_dim, hidden, clamp, swap_halves);
        step.mix_matrix = random_orthogonal(dim, rng);
        let half = dim / 2;
        let (shift_gain, logscale_gain) = if zero_output { (0.0, 0.0) } else { (0.5, 0.1) };
        step.phi_shift = Mlp::random(half + cond_dim, hidden, dim - half, shift_gain, rng);
        step.phi_logscale = Mlp::random(half + cond_dim, hidden, dim - half, logscale_gain, rng);
        if random_actnorm {
            let log_scale: Vec<f64> = gaussian_vec(dim, 0.3, rng);
            step.actnorm_scale = log_scale.iter().map(|l| T::lit(l.exp())).collect();
            step.actnorm_bias = gaussian_vec(dim, 0.3, rng);
        }
        step
    }

    fn check_dim(&self, v: &[T]) -> Result<()> {
        if !self.dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "coupling requires an even dimension, got {}",
                self.dim
            )));
        }
        if v.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector of length {} for a flow of dimension {}",
                v.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Index ranges of the conditioning half and the transformed half.
    pub fn halves(&self) -> (Range<usize>, Range<usize>) {
        let half = self.dim / 2;
        if self.swap_halves {
            (half..self.dim, 0..half)
        } else {
            (0..half, half..self.dim)
        }
    }

    fn check_scale(&self) -> Result<()> {
        if let Some((j, s)) = self
            .actnorm_scale
            .iter()
            .enumerate()
            .find(|(_, s)| !(**s > T::zero()))
        {
            return Err(Error::Parameter(format!(
                "actnorm scale {j} is {s}, must be strictly positive"
            )));
        }
        Ok(())
    }

    /// `out = scale ⊙ (v + bias)`, log-det `Σ ln scale`.
    pub fn actnorm_forward(&self, v: &[T]) -> Result<(Vec<T>, T)> {
        self.check_scale()?;
        let out = v
            .iter()
            .zip(&self.actnorm_scale)
            .zip(&self.actnorm_bias)
            .map(|((&x, &s), &b)| s * (x + b))
            .collect();
        Ok((out, self.actnorm_logdet()))
    }

    fn actnorm_logdet(&self) -> T {
        self.actnorm_scale
            .iter()
            .map(|s| s.ln())
            .fold(T::zero(), |a, b| a + b)
    }

    pub fn actnorm_inverse(&self, y: &[T]) -> Result<Vec<T>> {
        self.check_scale()?;
        Ok(y.iter()
            .zip(&self.actnorm_scale)
            .zip(&self.actnorm_bias)
            .map(|((&y, &s), &b)| y / s - b)
            .collect())
    }

    /// Data-dependent initialization: returns a copy whose actnorm maps the
    /// batch to zero mean and unit (population) variance per dimension.
    pub fn actnorm_init(&self, batch: &[Vec<T>]) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Input("actnorm init needs a non-empty batch".into()));
        }
        let n = batch.len() as f64;
        let mut out = self.clone();
        for j in 0..self.dim {
            let mean = batch.iter().map(|v| v[j].as_f64()).sum::<f64>() / n;
            let var = batch.iter().map(|v| (v[j].as_f64() - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if !(std > 1e-8) {
                return Err(Error::DegenerateBatch { dim: j, std });
            }
            out.actnorm_bias[j] = T::lit(-mean);
            out.actnorm_scale[j] = T::lit(1.0 / std);
        }
        Ok(out)
    }

    /// Factorizes the mix matrix; `step` is only used for error reporting.
    pub fn mix_factor(&self, step: usize) -> Result<MixFactor<T>> {
        let lu = LuFactor::new(&self.mix_matrix, self.dim);
        let det = lu.det();
        if !(det.abs() > SINGULAR_DET) {
            return Err(Error::Singular { step, det });
        }
        Ok(MixFactor {
            log_abs_det: lu.log_abs_det(),
            inverse: lu.inverse(),
        })
    }

    /// `out = W v`, log-det `ln|det W|`.
    pub fn mix_forward(&self, v: &[T]) -> Result<(Vec<T>, T)> {
        let f = self.mix_factor(0)?;
        Ok((matvec(&self.mix_matrix, v, self.dim), f.log_abs_det))
    }

    pub fn mix_inverse(&self, y: &[T]) -> Result<Vec<T>> {
        let f = self.mix_factor(0)?;
        Ok(matvec(&f.inverse, y, self.dim))
    }

    fn coupling_input(&self, v: &[T], c: &[T]) -> Vec<T> {
        let (cond, _) = self.halves();
        let mut input = Vec::with_capacity(cond.len() + c.len());
        input.extend_from_slice(&v[cond]);
        input.extend_from_slice(c);
        input
    }

    fn eval_coupling(&self, input: &[T]) -> CouplingEval<T> {
        let (shift, shift_cache) = self.phi_shift.forward_cached(input, 1);
        let (raw, logscale_cache) = self.phi_logscale.forward_cached(input, 1);
        let k = T::lit(self.clamp);
        let logscale = raw.iter().map(|&r| k * (r / k).tanh()).collect();
        CouplingEval {
            shift,
            raw,
            logscale,
            shift_cache,
            logscale_cache,
        }
    }

    fn check_condition(&self, c: &[T]) -> Result<()> {
        let expected = self.phi_shift.fc1.in_dim - self.dim / 2;
        if c.len() != expected {
            return Err(Error::Shape(format!(
                "condition of length {} where {expected} is expected",
                c.len()
            )));
        }
        Ok(())
    }

    /// Transforms one half with shift and clamped log-scale predicted from
    /// the other half and the condition; the conditioning half is copied.
    pub fn coupling_forward(&self, v: &[T], c: &[T]) -> Result<(Vec<T>, T)> {
        self.check_dim(v)?;
        self.check_condition(c)?;
        let input = self.coupling_input(v, c);
        let eval = self.eval_coupling(&input);
        let (_, trans) = self.halves();
        let mut out = v.to_vec();
        for (i, j) in trans.enumerate() {
            out[j] = v[j] * eval.logscale[i].exp() + eval.shift[i];
        }
        let logdet = eval.logscale.iter().copied().fold(T::zero(), |a, b| a + b);
        Ok((out, logdet))
    }

    pub fn coupling_inverse(&self, y: &[T], c: &[T]) -> Result<Vec<T>> {
        self.check_dim(y)?;
        self.check_condition(c)?;
        let input = self.coupling_input(y, c);
        let eval = self.eval_coupling(&input);
        let (_, trans) = self.halves();
        let mut out = y.to_vec();
        for (i, j) in trans.enumerate() {
            out[j] = (y[j] - eval.shift[i]) * (-eval.logscale[i]).exp();
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> FlowStepParams<U> {
        FlowStepParams {
            dim: self.dim,
            swap_halves: self.swap_halves,
            clamp: self.clamp,
            actnorm_scale: cast_vec(&self.actnorm_scale),
            actnorm_bias: cast_vec(&self.actnorm_bias),
            mix_matrix: cast_vec(&self.mix_matrix),
            phi_shift: self.phi_shift.cast(),
            phi_logscale: self.phi_logscale.cast(),
        }
    }
}

impl<T: Real> ParamSet<T> for FlowStepParams<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        out.push((join(prefix, "actnorm_scale"), &self.actnorm_scale));
        out.push((join(prefix, "actnorm_bias"), &self.actnorm_bias));
        out.push((join(prefix, "mix_matrix"), &self.mix_matrix));
        self.phi_shift.tensors(&join(prefix, "phi1"), out);
        self.phi_logscale.tensors(&join(prefix, "phi2"), out);
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        out.push((join(prefix, "actnorm_scale"), &mut self.actnorm_scale));
        out.push((join(prefix, "actnorm_bias"), &mut self.actnorm_bias));
        out.push((join(prefix, "mix_matrix"), &mut self.mix_matrix));
        self.phi_shift.tensors_mut(&join(prefix, "phi1"), out);
        self.phi_logscale.tensors_mut(&join(prefix, "phi2"), out);
    }
}

fn random_orthogonal<T: Real, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    let g: Vec<f64> = gaussian_vec(n * n, 1.0, rng);
    let m = nalgebra::DMatrix::from_row_slice(n, n, &g);
    let q = m.qr().q();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(T::lit(q[(i, j)]));
        }
    }
    out
}

/// Compact stride-2 convolutional extractor producing the condition vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionExtractor<T = f32> {
    pub convs: Vec<Conv2d<T>>,
}

#[derive(Debug, Clone)]
pub struct ConditionCache<T> {
    layers: Vec<(ConvCache<T>, Vec<T>)>,
    last_hw: usize,
}

impl<T: Real> ConditionExtractor<T> {
    pub fn random<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        let mut in_ch = 3;
        let convs = widths
            .iter()
            .map(|&w| {
                let c = Conv2d::random(in_ch, w, 3, 2, 1.0, rng);
                in_ch = w;
                c
            })
            .collect();
        Self { convs }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        let mut in_ch = 3;
        let convs = widths
            .iter()
            .map(|&w| {
                let c = Conv2d::zeros(in_ch, w, 3, 2);
                in_ch = w;
                c
            })
            .collect();
        Self { convs }
    }

    pub fn output_dim(&self) -> usize {
        self.convs.last().map_or(0, |c| c.out_ch)
    }

    pub fn forward_cached(&self, x: &Image<T>) -> (Vec<T>, ConditionCache<T>) {
        let (mut h, mut w) = (x.height(), x.width());
        let mut act = x.data().to_vec();
        let mut layers = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (mut y, cache) = conv.forward(&act, h, w);
            leaky_inplace(&mut y);
            h = cache.out_h;
            w = cache.out_w;
            act = y.clone();
            layers.push((cache, y));
        }
        let c = global_avg_pool(&act, self.output_dim(), h * w);
        (
            c,
            ConditionCache {
                layers,
                last_hw: h * w,
            },
        )
    }

    pub fn forward(&self, x: &Image<T>) -> Vec<T> {
        self.forward_cached(x).0
    }

    /// Accumulates parameter gradients for an upstream gradient on the
    /// condition vector; the image itself is data, so no input gradient.
    pub fn backward(&self, cache: &ConditionCache<T>, dc: &[T], grad: &mut ConditionExtractor<T>) {
        let mut d = global_avg_pool_backward(dc, cache.last_hw);
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let (conv_cache, out) = &cache.layers[i];
            leaky_backward(out, &mut d);
            match conv.backward(conv_cache, &d, &mut grad.convs[i], i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ConditionExtractor<U> {
        ConditionExtractor {
            convs: self.convs.iter().map(|c| c.cast()).collect(),
        }
    }
}

impl<T: Real> ParamSet<T> for ConditionExtractor<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.tensors(&join(prefix, &format!("conv{i}")), out);
        }
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.tensors_mut(&join(prefix, &format!("conv{i}")), out);
        }
    }
}

/// Full flow parameters: the ordered steps plus the condition extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowParams<T = f32> {
    pub dim: usize,
    pub steps: Vec<FlowStepParams<T>>,
    pub condition: ConditionExtractor<T>,
    /// Set once the data-dependent actnorm initialization has run.
    pub initialized: bool,
}

impl<T: Real> FlowParams<T> {
    /// Every step is the identity map; the extractor is all zeros.
    pub fn identity(cfg: &ModelConfig) -> Self {
        let m = cfg.condition_dim();
        Self {
            dim: cfg.style_dim,
            steps: (0..cfg.flow_steps)
                .map(|i| {
                    FlowStepParams::identity(cfg.style_dim, m, cfg.coupling_hidden, cfg.logscale_clamp, i % 2 == 1)
                })
                .collect(),
            condition: ConditionExtractor::zeros(&cfg.condition_widths),
            initialized: true,
        }
    }

    /// Training start point: identity actnorm awaiting data init, random
    /// orthogonal mixes, identity couplings, random extractor.
    pub fn for_training<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self::build(cfg, rng, true, false, false)
    }

    /// Fully random, ready-to-use flow (tests and examples).
    pub fn random<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self::build(cfg, rng, false, true, true)
    }

    fn build<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        rng: &mut R,
        zero_output: bool,
        random_actnorm: bool,
        initialized: bool,
    ) -> Self {
        let m = cfg.condition_dim();
        let steps = (0..cfg.flow_steps)
            .map(|i| {
                FlowStepParams::random(
                    cfg.style_dim,
                    m,
                    cfg.coupling_hidden,
                    cfg.logscale_clamp,
                    i % 2 == 1,
                    zero_output,
                    random_actnorm,
                    rng,
                )
            })
            .collect();
        Self {
            dim: cfg.style_dim,
            steps,
            condition: ConditionExtractor::random(&cfg.condition_widths, rng),
            initialized,
        }
    }

    pub fn condition_dim(&self) -> usize {
        self.condition.output_dim()
    }

    pub fn extract_condition(&self, x: &Image<T>) -> ConditionVector<T> {
        ConditionVector(self.condition.forward(x))
    }

    /// Factorizes every mix matrix once for repeated evaluation.
    pub fn prepare(&self) -> Result<PreparedFlow<'_, T>> {
        let factors = self
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| s.mix_factor(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedFlow {
            params: self,
            factors,
        })
    }

    fn require_initialized(&self) -> Result<()> {
        if self.initialized {
            Ok(())
        } else {
            Err(Error::State("flow actnorm layers are not initialized".into()))
        }
    }

    pub fn forward(&self, s: &[T], c: &[T]) -> Result<(LatentVector<T>, T)> {
        self.require_initialized()?;
        let (z, logdet) = self.prepare()?.forward(s, c)?;
        Ok((LatentVector(z), logdet))
    }

    pub fn inverse(&self, z: &[T], c: &[T]) -> Result<StyleVector<T>> {
        self.require_initialized()?;
        Ok(StyleVector(self.prepare()?.inverse(z, c)?))
    }

    pub fn nll(&self, s: &[T], c: &[T]) -> Result<T> {
        self.require_initialized()?;
        self.prepare()?.nll(s, c)
    }

    /// Runs the data-dependent actnorm initialization step by step, feeding
    /// each step the batch as transformed by all previous steps.
    pub fn initialize(&mut self, styles: &[Vec<T>], conds: &[Vec<T>]) -> Result<()> {
        if styles.is_empty() || styles.len() != conds.len() {
            return Err(Error::Input(
                "actnorm init needs a non-empty batch with one condition per style".into(),
            ));
        }
        let mut batch = styles.to_vec();
        for i in 0..self.steps.len() {
            self.steps[i] = self.steps[i].actnorm_init(&batch)?;
            let step = &self.steps[i];
            step.mix_factor(i)?;
            for (v, c) in batch.iter_mut().zip(conds) {
                let (a, _) = step.actnorm_forward(v)?;
                let m = matvec(&step.mix_matrix, &a, self.dim);
                *v = step.coupling_forward(&m, c)?.0;
            }
        }
        self.initialized = true;
        Ok(())
    }

    /// Clamps actnorm scales away from zero after an optimizer update.
    pub fn project(&mut self) {
        let floor = T::lit(1e-4);
        for step in &mut self.steps {
            step.actnorm_scale
                .iter_mut()
                .for_each(|s| *s = s.max(floor));
        }
    }

    pub fn cast<U: Real>(&self) -> FlowParams<U> {
        FlowParams {
            dim: self.dim,
            steps: self.steps.iter().map(|s| s.cast()).collect(),
            condition: self.condition.cast(),
            initialized: self.initialized,
        }
    }
}

impl<T: Real> ParamSet<T> for FlowParams<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        for (i, s) in self.steps.iter().enumerate() {
            s.tensors(&join(prefix, &format!("step{i}")), out);
        }
        self.condition.tensors(&join(prefix, "cond"), out);
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        for (i, s) in self.steps.iter_mut().enumerate() {
            s.tensors_mut(&join(prefix, &format!("step{i}")), out);
        }
        self.condition.tensors_mut(&join(prefix, "cond"), out);
    }
}

#[derive(Debug, Clone)]
pub struct StepForwardCache<T> {
    input: Vec<T>,
    after_actnorm: Vec<T>,
    after_mix: Vec<T>,
    coupling: CouplingEval<T>,
}

#[derive(Debug, Clone)]
pub struct StepInverseCache<T> {
    coupling_in: Vec<T>,
    coupling: CouplingEval<T>,
}

/// A flow with every mix matrix factorized; cheap to evaluate repeatedly.
pub struct PreparedFlow<'a, T: Real> {
    params: &'a FlowParams<T>,
    factors: Vec<MixFactor<T>>,
}

impl<T: Real> PreparedFlow<'_, T> {
    pub fn params(&self) -> &FlowParams<T> {
        self.params
    }

    fn check(&self, v: &[T], c: &[T]) -> Result<()> {
        let p = self.params;
        if !p.dim.is_multiple_of(2) {
            return Err(Error::Config(format!("flow dimension {} is odd", p.dim)));
        }
        if v.len() != p.dim {
            return Err(Error::Shape(format!("vector length {} vs flow dimension {}", v.len(), p.dim)));
        }
        if c.len() != p.condition_dim() {
            return Err(Error::Shape(format!(
                "condition length {} vs expected {}",
                c.len(),
                p.condition_dim()
            )));
        }
        Ok(())
    }

    fn step_forward(
        &self,
        i: usize,
        v: &[T],
        c: &[T],
    ) -> Result<(Vec<T>, T, StepForwardCache<T>)> {
        let step = &self.params.steps[i];
        let (a, ld_act) = step.actnorm_forward(v)?;
        let m = matvec(&step.mix_matrix, &a, step.dim);
        let input = step.coupling_input(&m, c);
        let eval = step.eval_coupling(&input);
        let (_, trans) = step.halves();
        let mut out = m.clone();
        for (k, j) in trans.enumerate() {
            out[j] = m[j] * eval.logscale[k].exp() + eval.shift[k];
        }
        let ld_coupling = eval.logscale.iter().copied().fold(T::zero(), |x, y| x + y);
        let logdet = ld_act + self.factors[i].log_abs_det + ld_coupling;
        Ok((
            out,
            logdet,
            StepForwardCache {
                input: v.to_vec(),
                after_actnorm: a,
                after_mix: m,
                coupling: eval,
            },
        ))
    }

    /// `z = F(s; c)` and the total log-determinant.
    pub fn forward(&self, s: &[T], c: &[T]) -> Result<(Vec<T>, T)> {
        let (z, logdet, _) = self.forward_cached(s, c)?;
        Ok((z, logdet))
    }

    pub fn forward_cached(&self, s: &[T], c: &[T]) -> Result<(Vec<T>, T, Vec<StepForwardCache<T>>)> {
        self.check(s, c)?;
        let mut v = s.to_vec();
        let mut total = T::zero();
        let mut caches = Vec::with_capacity(self.params.steps.len());
        for i in 0..self.params.steps.len() {
            let (out, ld, cache) = self.step_forward(i, &v, c)?;
            if !(ld.is_finite() && out.iter().all(|x| x.is_finite())) {
                return Err(Error::NonFiniteFlow {
                    step: i,
                    what: format!("log-det {ld}"),
                });
            }
            total += ld;
            caches.push(cache);
            v = out;
        }
        Ok((v, total, caches))
    }

    /// Per-step log-determinants, for additivity checks.
    pub fn step_logdets(&self, s: &[T], c: &[T]) -> Result<Vec<T>> {
        self.check(s, c)?;
        let mut v = s.to_vec();
        let mut out = Vec::with_capacity(self.params.steps.len());
        for i in 0..self.params.steps.len() {
            let (next, ld, _) = self.step_forward(i, &v, c)?;
            out.push(ld);
            v = next;
        }
        Ok(out)
    }

    pub fn nll(&self, s: &[T], c: &[T]) -> Result<T> {
        let (z, logdet) = self.forward(s, c)?;
        let value = nll_from(&z, logdet);
        if !value.is_finite() {
            return Err(Error::NonFiniteFlow {
                step: self.params.steps.len(),
                what: format!("negative log-likelihood {value}"),
            });
        }
        Ok(value)
    }

    /// Backward through [`Self::forward_cached`] given `∂L/∂z` and the
    /// scalar `∂L/∂logdet`. Accumulates parameter gradients into `grad`
    /// (steps only) and returns `(∂L/∂s, ∂L/∂c)`.
    pub fn backward(
        &self,
        caches: &[StepForwardCache<T>],
        dz: &[T],
        dlogdet: T,
        grad: &mut FlowParams<T>,
    ) -> (Vec<T>, Vec<T>) {
        let mut dv = dz.to_vec();
        let mut dc = vec![T::zero(); self.params.condition_dim()];
        for i in (0..self.params.steps.len()).rev() {
            let step = &self.params.steps[i];
            let g = &mut grad.steps[i];
            let cache = &caches[i];
            let (cond, trans) = step.halves();
            let eval = &cache.coupling;
            let k = T::lit(step.clamp);

            // Coupling: out_t = m_t · e^{ls} + shift.
            let mut dm = dv.clone();
            let mut dshift = Vec::with_capacity(trans.len());
            let mut draw = Vec::with_capacity(trans.len());
            for (q, j) in trans.clone().enumerate() {
                let e = eval.logscale[q].exp();
                dm[j] = dv[j] * e;
                dshift.push(dv[j]);
                let dls = dv[j] * cache.after_mix[j] * e + dlogdet;
                let t = (eval.raw[q] / k).tanh();
                draw.push(dls * (T::one() - t * t));
            }
            let din_shift = step.phi_shift.backward(&eval.shift_cache, &dshift, Some(&mut g.phi_shift));
            let din_ls = step
                .phi_logscale
                .backward(&eval.logscale_cache, &draw, Some(&mut g.phi_logscale));
            let half = cond.len();
            for (q, j) in cond.enumerate() {
                dm[j] += din_shift[q] + din_ls[q];
            }
            for q in 0..dc.len() {
                dc[q] += din_shift[half + q] + din_ls[half + q];
            }

            // Mix: m = W a.
            let n = step.dim;
            let inv = &self.factors[i].inverse;
            for r in 0..n {
                for col in 0..n {
                    // ∂ ln|det W| / ∂W = W⁻ᵀ
                    g.mix_matrix[r * n + col] += dm[r] * cache.after_actnorm[col] + dlogdet * inv[col * n + r];
                }
            }
            let da = matvec_t(&step.mix_matrix, &dm, n);

            // Actnorm: a = scale ⊙ (x + bias).
            for j in 0..n {
                let s = step.actnorm_scale[j];
                let xb = cache.input[j] + step.actnorm_bias[j];
                g.actnorm_scale[j] += da[j] * xb + dlogdet / s;
                g.actnorm_bias[j] += da[j] * s;
                dv[j] = da[j] * s;
            }
        }
        (dv, dc)
    }

    /// `s = F⁻¹(z; c)`.
    pub fn inverse(&self, z: &[T], c: &[T]) -> Result<Vec<T>> {
        Ok(self.inverse_cached(z, c)?.0)
    }

    pub fn inverse_cached(&self, z: &[T], c: &[T]) -> Result<(Vec<T>, Vec<StepInverseCache<T>>)> {
        self.check(z, c)?;
        let mut v = z.to_vec();
        let mut caches = Vec::with_capacity(self.params.steps.len());
        for i in (0..self.params.steps.len()).rev() {
            let step = &self.params.steps[i];
            let input = step.coupling_input(&v, c);
            let eval = step.eval_coupling(&input);
            let (_, trans) = step.halves();
            let mut m = v.clone();
            for (q, j) in trans.enumerate() {
                m[j] = (v[j] - eval.shift[q]) * (-eval.logscale[q]).exp();
            }
            let a = matvec(&self.factors[i].inverse, &m, step.dim);
            let x = step.actnorm_inverse(&a)?;
            if !x.iter().all(|t| t.is_finite()) {
                return Err(Error::NonFiniteFlow {
                    step: i,
                    what: "inverse produced a non-finite style".into(),
                });
            }
            caches.push(StepInverseCache {
                coupling_in: m,
                coupling: eval,
            });
            v = x;
        }
        caches.reverse();
        Ok((v, caches))
    }

    /// Gradient of a loss on `s = F⁻¹(z; c)` with respect to `z`, weights
    /// held fixed.
    pub fn inverse_backward(&self, caches: &[StepInverseCache<T>], ds: &[T]) -> Vec<T> {
        let mut dx = ds.to_vec();
        for (i, step) in self.params.steps.iter().enumerate() {
            let cache = &caches[i];
            let n = step.dim;
            // x = a / scale − bias
            let da: Vec<T> = dx
                .iter()
                .zip(&step.actnorm_scale)
                .map(|(&d, &s)| d / s)
                .collect();
            // a = W⁻¹ m
            let dm = matvec_t(&self.factors[i].inverse, &da, n);
            // m_t = (y_t − shift) e^{−ls}, m_c = y_c
            let (cond, trans) = step.halves();
            let eval = &cache.coupling;
            let k = T::lit(step.clamp);
            let mut dy = dm.clone();
            let mut dshift = Vec::with_capacity(trans.len());
            let mut draw = Vec::with_capacity(trans.len());
            for (q, j) in trans.clone().enumerate() {
                let e = (-eval.logscale[q]).exp();
                dy[j] = dm[j] * e;
                dshift.push(-dm[j] * e);
                let dls = -dm[j] * cache.coupling_in[j];
                let t = (eval.raw[q] / k).tanh();
                draw.push(dls * (T::one() - t * t));
            }
            let din_shift = step.phi_shift.backward(&eval.shift_cache, &dshift, None);
            let din_ls = step.phi_logscale.backward(&eval.logscale_cache, &draw, None);
            for (q, j) in cond.enumerate() {
                dy[j] += din_shift[q] + din_ls[q];
            }
            dx = dy;
        }
        dx
    }
}

/// `d/2 · ln 2π + ½‖z‖² − logdet`.
pub fn nll_from<T: Real>(z: &[T], logdet: T) -> T {
    let d = T::lit(z.len() as f64);
    let half = T::lit(0.5);
    let sq: T = z.iter().map(|&v| v * v).sum();
    half * d * T::lit((2.0 * std::f64::consts::PI).ln()) + half * sq - logdet
}

/// Condition vector of `x` under `params`.
pub fn extract_condition(x: &Image, params: &FlowParams) -> ConditionVector {
    params.extract_condition(x)
}

pub fn flow_forward(s: &StyleVector, c: &ConditionVector, params: &FlowParams) -> Result<(LatentVector, f32)> {
    params.forward(s, c)
}

pub fn flow_inverse(z: &LatentVector, c: &ConditionVector, params: &FlowParams) -> Result<StyleVector> {
    params.inverse(z, c)
}

pub fn nll(s: &StyleVector, c: &ConditionVector, params: &FlowParams) -> Result<f32> {
    params.nll(s, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(d: usize, steps: usize) -> ModelConfig {
        ModelConfig::tiny(d, steps)
    }

    #[test]
    fn actnorm_identity_and_logdet() {
        let step: FlowStepParams<f64> = FlowStepParams::identity(2, 3, 4, 2.0, false);
        let (out, ld) = step.actnorm_forward(&[0.3, -1.0]).unwrap();
        assert_eq!(out, vec![0.3, -1.0]);
        assert_eq!(ld, 0.0);

        let mut s = step.clone();
        s.actnorm_scale = vec![2.0, 0.5];
        let (_, ld) = s.actnorm_forward(&[1.0, 1.0]).unwrap();
        assert!(ld.abs() < 1e-15);

        s.actnorm_scale = vec![0.0, 1.0];
        assert!(matches!(s.actnorm_forward(&[1.0, 1.0]), Err(Error::Parameter(_))));
    }

    #[test]
    fn actnorm_init_examples() {
        let step: FlowStepParams<f64> = FlowStepParams::identity(2, 1, 2, 2.0, false);
        let batch = vec![vec![2.0, 0.0], vec![4.0, 1.0]];
        let init = step.actnorm_init(&batch).unwrap();
        assert_eq!(init.actnorm_forward(&batch[0]).unwrap().0[0], -1.0);
        assert_eq!(init.actnorm_forward(&batch[1]).unwrap().0[0], 1.0);

        // Already standardized → fixed point.
        let std_batch = vec![vec![1.0, -1.0], vec![-1.0, 1.0]];
        let init = step.actnorm_init(&std_batch).unwrap();
        assert!((init.actnorm_scale[0] - 1.0).abs() < 1e-12);
        assert!(init.actnorm_bias[0].abs() < 1e-12);

        let flat = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
        assert!(matches!(
            step.actnorm_init(&flat),
            Err(Error::DegenerateBatch { dim: 0, .. })
        ));
    }

    #[test]
    fn mix_examples() {
        let mut step: FlowStepParams<f64> = FlowStepParams::identity(2, 1, 2, 2.0, false);
        let (out, ld) = step.mix_forward(&[1.0, 2.0]).unwrap();
        assert_eq!((out, ld), (vec![1.0, 2.0], 0.0));
        step.mix_matrix = vec![1.0, 1.0, 0.0, 1.0];
        let (out, ld) = step.mix_forward(&[1.0, 2.0]).unwrap();
        assert_eq!(out, vec![3.0, 2.0]);
        assert!(ld.abs() < 1e-15);
        assert_eq!(step.mix_inverse(&[3.0, 2.0]).unwrap(), vec![1.0, 2.0]);

        step.mix_matrix = vec![1.0, 2.0, 2.0, 4.0];
        assert!(matches!(step.mix_forward(&[1.0, 1.0]), Err(Error::Singular { .. })));
    }

    #[test]
    fn coupling_examples() {
        let step: FlowStepParams<f64> = FlowStepParams::identity(4, 2, 3, 2.0, false);
        let v = [0.1, 0.2, 1.0, -1.0];
        let c = [0.5, 0.5];
        let (out, ld) = step.coupling_forward(&v, &c).unwrap();
        assert_eq!((out.as_slice(), ld), (&v[..], 0.0));

        let mut shifted = step.clone();
        shifted.phi_shift.fc2.bias = vec![0.5, 0.5];
        let (out, ld) = shifted.coupling_forward(&v, &c).unwrap();
        assert_eq!(&out[2..], &[1.5, -0.5]);
        assert_eq!(ld, 0.0);

        let odd: FlowStepParams<f64> = FlowStepParams::identity(3, 2, 3, 2.0, false);
        assert!(matches!(odd.coupling_forward(&[0.0; 3], &c), Err(Error::Config(_))));
    }

    #[test]
    fn coupling_preserves_conditioning_half_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for swap in [false, true] {
            let step: FlowStepParams<f32> =
                FlowStepParams::random(8, 5, 16, 2.0, swap, false, false, &mut rng);
            let v: Vec<f32> = gaussian_vec(8, 1.0, &mut rng);
            let c: Vec<f32> = gaussian_vec(5, 1.0, &mut rng);
            let (out, _) = step.coupling_forward(&v, &c).unwrap();
            let (cond, _) = step.halves();
            assert_eq!(
                out[cond.clone()].iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                v[cond].iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
            let back = step.coupling_inverse(&out, &c).unwrap();
            let err = back.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn nll_identity_flow_examples() {
        let flow: FlowParams<f64> = FlowParams::identity(&cfg(2, 3));
        let c = vec![0.0; flow.condition_dim()];
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        assert!((flow.nll(&[0.0, 0.0], &c).unwrap() - ln2pi).abs() < 1e-12);
        assert!((flow.nll(&[1.0, -1.0], &c).unwrap() - (1.0 + ln2pi)).abs() < 1e-12);
        let (z, ld) = flow.forward(&[0.25, 0.5], &c).unwrap();
        assert_eq!((z.0, ld), (vec![0.25, 0.5], 0.0));
        assert_eq!(flow.inverse(&[0.0, 0.0], &c).unwrap().0, vec![0.0, 0.0]);
    }

    #[test]
    fn uninitialized_flow_is_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let flow: FlowParams<f32> = FlowParams::for_training(&cfg(4, 2), &mut rng);
        let c = vec![0.0; flow.condition_dim()];
        assert!(matches!(flow.inverse(&[0.0; 4], &c), Err(Error::State(_))));
    }

    #[test]
    fn initialize_standardizes_first_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut flow: FlowParams<f64> = FlowParams::for_training(&cfg(4, 3), &mut rng);
        let styles: Vec<Vec<f64>> = (0..32).map(|_| gaussian_vec(4, 3.0, &mut rng)).collect();
        let conds: Vec<Vec<f64>> = (0..32).map(|_| gaussian_vec(flow.condition_dim(), 1.0, &mut rng)).collect();
        flow.initialize(&styles, &conds).unwrap();
        assert!(flow.initialized);
        let outs: Vec<Vec<f64>> = styles
            .iter()
            .map(|s| flow.steps[0].actnorm_forward(s).unwrap().0)
            .collect();
        for j in 0..4 {
            let mean = outs.iter().map(|o| o[j]).sum::<f64>() / 32.0;
            let var = outs.iter().map(|o| (o[j] - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn forward_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let flow: FlowParams<f64> = FlowParams::random(&cfg(4, 2), &mut rng);
        let m = flow.condition_dim();
        let s: Vec<f64> = gaussian_vec(4, 1.0, &mut rng);
        let c: Vec<f64> = gaussian_vec(m, 1.0, &mut rng);
        let prep = flow.prepare().unwrap();
        let (z, _, caches) = prep.forward_cached(&s, &c).unwrap();
        let mut grad = flow.clone();
        grad.fill_zero();
        let (ds, dc) = prep.backward(&caches, &z, -1.0, &mut grad);

        let h = 1e-6;
        let loss = |f: &FlowParams<f64>, s: &[f64], c: &[f64]| f.nll(s, c).unwrap();
        for j in 0..4 {
            let mut up = s.clone();
            up[j] += h;
            let mut dn = s.clone();
            dn[j] -= h;
            let fd = (loss(&flow, &up, &c) - loss(&flow, &dn, &c)) / (2.0 * h);
            assert!((fd - ds[j]).abs() < 1e-6 * (1.0 + fd.abs()), "ds {fd} {}", ds[j]);
        }
        for j in 0..m {
            let mut up = c.clone();
            up[j] += h;
            let mut dn = c.clone();
            dn[j] -= h;
            let fd = (loss(&flow, &s, &up) - loss(&flow, &s, &dn)) / (2.0 * h);
            assert!((fd - dc[j]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        let names: Vec<String> = flow.named().into_iter().map(|(n, _)| n).collect();
        let grads: Vec<Vec<f64>> = grad.named().into_iter().map(|(_, t)| t.clone()).collect();
        for (ti, name) in names.iter().enumerate() {
            if name.starts_with("cond") {
                continue;
            }
            let len = grads[ti].len();
            for k in (0..len).step_by(len.div_ceil(5).max(1)) {
                let mut up = flow.clone();
                up.named_mut()[ti].1[k] += h;
                let mut dn = flow.clone();
                dn.named_mut()[ti].1[k] -= h;
                let fd = (loss(&up, &s, &c) - loss(&dn, &s, &c)) / (2.0 * h);
                assert!(
                    (fd - grads[ti][k]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "{name}[{k}]: fd {fd} vs {}",
                    grads[ti][k]
                );
            }
        }
    }

    #[test]
    fn inverse_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let flow: FlowParams<f64> = FlowParams::random(&cfg(6, 3), &mut rng);
        let z: Vec<f64> = gaussian_vec(6, 1.0, &mut rng);
        let c: Vec<f64> = gaussian_vec(flow.condition_dim(), 1.0, &mut rng);
        let probe: Vec<f64> = gaussian_vec(6, 1.0, &mut rng);
        let prep = flow.prepare().unwrap();
        let (_, caches) = prep.inverse_cached(&z, &c).unwrap();
        let dz = prep.inverse_backward(&caches, &probe);
        let f = |z: &[f64]| -> f64 {
            prep.inverse(z, &c).unwrap().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        for j in 0..6 {
            let mut up = z.clone();
            up[j] += 1e-6;
            let mut dn = z.clone();
            dn[j] -= 1e-6;
            let fd = (f(&up) - f(&dn)) / 2e-6;
            assert!((fd - dz[j]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn lu_inverse_and_det() {
        let a = [4.0f64, 3.0, 6.0, 3.0];
        let lu = LuFactor::new(&a, 2);
        assert!((lu.det() - (-6.0)).abs() < 1e-12);
        let inv = lu.inverse();
        let expect = [-0.5, 0.5, 1.0, -2.0 / 3.0];
        for (x, y) in inv.iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
