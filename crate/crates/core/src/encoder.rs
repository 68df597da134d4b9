//! Style encoder and the progressive style-correction driver.
//!
//! Each correction step has its own encoder: residual blocks (2×2 average
//! pool, two 3×3 convolutions, 1×1 projection skip) followed by global
//! average pooling and a linear head to the style dimension. Its input is
//! the 6-channel concatenation of the current result and the reference.
//!
//! Progressive extraction starts from `s⁽⁰⁾ = 0`, `Ŷ⁽⁰⁾ = X` and iterates
//! `s⁽ᵗ⁾ = s⁽ᵗ⁻¹⁾ + E(Ŷ⁽ᵗ⁻¹⁾, Y; θ⁽ᵗ⁾)`, `Ŷ⁽ᵗ⁾ = G(X, s⁽ᵗ⁾)`. Results fed
//! back into the encoder are clamped to `[0, 1]`.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::flow::StyleVector;
use crate::image::Image;
use crate::nn::{
    avg_pool2, avg_pool2_backward, global_avg_pool, global_avg_pool_backward, join, leaky_backward,
    leaky_inplace, Conv2d, ConvCache, Dense, ParamSet,
};
use crate::real::Real;
use crate::retouch::RetouchParams;

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<T = f32> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub skip: Conv2d<T>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    in_h: usize,
    in_w: usize,
    c1: ConvCache<T>,
    a: Vec<T>,
    c2: ConvCache<T>,
    cs: ConvCache<T>,
    y: Vec<T>,
}

impl<T: Real> ResBlock<T> {
    fn random<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::random(in_ch, out_ch, 3, 1, 1.0, rng),
            conv2: Conv2d::random(out_ch, out_ch, 3, 1, 0.5, rng),
            skip: Conv2d::random(in_ch, out_ch, 1, 1, 1.0, rng),
        }
    }

    fn forward(&self, x: &[T], h: usize, w: usize) -> (Vec<T>, usize, usize, BlockCache<T>) {
        let (p, ph, pw) = avg_pool2(x, self.conv1.in_ch, h, w);
        let (mut a, c1) = self.conv1.forward(&p, ph, pw);
        leaky_inplace(&mut a);
        let (mut y, c2) = self.conv2.forward(&a, ph, pw);
        let (sk, cs) = self.skip.forward(&p, ph, pw);
        for (v, s) in y.iter_mut().zip(sk) {
            *v += s;
        }
        leaky_inplace(&mut y);
        let cache = BlockCache {
            in_h: h,
            in_w: w,
            c1,
            a,
            c2,
            cs,
            y: y.clone(),
        };
        (y, ph, pw, cache)
    }

    fn backward(&self, cache: &BlockCache<T>, dy: &[T], grad: &mut ResBlock<T>) -> Vec<T> {
        let mut d = dy.to_vec();
        leaky_backward(&cache.y, &mut d);
        let mut da = self
            .conv2
            .backward(&cache.c2, &d, &mut grad.conv2, true)
            .expect("dx requested");
        leaky_backward(&cache.a, &mut da);
        let mut dp = self
            .conv1
            .backward(&cache.c1, &da, &mut grad.conv1, true)
            .expect("dx requested");
        let dskip = self
            .skip
            .backward(&cache.cs, &d, &mut grad.skip, true)
            .expect("dx requested");
        for (a, b) in dp.iter_mut().zip(dskip) {
            *a += b;
        }
        avg_pool2_backward(&dp, self.conv1.in_ch, cache.in_h, cache.in_w)
    }
}

/// Encoder weights for one correction step.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStep<T = f32> {
    pub blocks: Vec<ResBlock<T>>,
    pub head: Dense<T>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    h: usize,
    w: usize,
    blocks: Vec<BlockCache<T>>,
    pooled: Vec<T>,
    last_hw: usize,
}

impl<T: Real> EncoderStep<T> {
    pub fn random<R: Rng + ?Sized>(widths: &[usize], style_dim: usize, head_gain: f64, rng: &mut R) -> Self {
        let mut in_ch = 6;
        let blocks = widths
            .iter()
            .map(|&w| {
                let b = ResBlock::random(in_ch, w, rng);
                in_ch = w;
                b
            })
            .collect();
        Self {
            blocks,
            head: Dense::random(in_ch, style_dim, head_gain, rng),
        }
    }

    pub fn style_dim(&self) -> usize {
        self.head.out_dim
    }

    fn stack(a: &Image<T>, y: &Image<T>) -> Result<Vec<T>> {
        a.ensure_same_shape(y, "encoder inputs")?;
        let mut x = Vec::with_capacity(2 * a.data().len());
        x.extend_from_slice(a.data());
        x.extend_from_slice(y.data());
        Ok(x)
    }

    pub fn forward_cached(&self, a: &Image<T>, y: &Image<T>) -> Result<(Vec<T>, EncoderCache<T>)> {
        let mut x = Self::stack(a, y)?;
        let (mut h, mut w) = (a.height(), a.width());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, oh, ow, c) = b.forward(&x, h, w);
            caches.push(c);
            x = out;
            h = oh;
            w = ow;
        }
        let channels = self.head.in_dim;
        let pooled = global_avg_pool(&x, channels, h * w);
        let s = self.head.forward(&pooled, 1);
        Ok((
            s,
            EncoderCache {
                h: a.height(),
                w: a.width(),
                blocks: caches,
                pooled,
                last_hw: h * w,
            },
        ))
    }

    pub fn forward(&self, a: &Image<T>, y: &Image<T>) -> Result<Vec<T>> {
        Ok(self.forward_cached(a, y)?.0)
    }

    /// Accumulates parameter gradients and returns `∂L/∂A` (the current-result
    /// half of the input, planar `3 × H × W`).
    pub fn backward(&self, cache: &EncoderCache<T>, ds: &[T], grad: &mut EncoderStep<T>) -> Vec<T> {
        let dpooled = self
            .head
            .backward(&cache.pooled, 1, ds, &mut grad.head, true)
            .expect("dx requested");
        let mut d = global_avg_pool_backward(&dpooled, cache.last_hw);
        for (i, b) in self.blocks.iter().enumerate().rev() {
            d = b.backward(&cache.blocks[i], &d, &mut grad.blocks[i]);
        }
        d.truncate(3 * cache.h * cache.w);
        d
    }

    pub fn cast<U: Real>(&self) -> EncoderStep<U> {
        EncoderStep {
            blocks: self
                .blocks
                .iter()
                .map(|b| ResBlock {
                    conv1: b.conv1.cast(),
                    conv2: b.conv2.cast(),
                    skip: b.skip.cast(),
                })
                .collect(),
            head: self.head.cast(),
        }
    }
}

impl<T: Real> ParamSet<T> for EncoderStep<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            b.conv1.tensors(&join(&p, "conv1"), out);
            b.conv2.tensors(&join(&p, "conv2"), out);
            b.skip.tensors(&join(&p, "skip"), out);
        }
        self.head.tensors(&join(prefix, "head"), out);
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            b.conv1.tensors_mut(&join(&p, "conv1"), out);
            b.conv2.tensors_mut(&join(&p, "conv2"), out);
            b.skip.tensors_mut(&join(&p, "skip"), out);
        }
        self.head.tensors_mut(&join(prefix, "head"), out);
    }
}

/// Independently parameterized encoders, one per correction step.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T = f32> {
    pub steps: Vec<EncoderStep<T>>,
}

impl<T: Real> EncoderParams<T> {
    pub fn random<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            steps: (0..cfg.encoder_steps)
                .map(|_| EncoderStep::random(&cfg.encoder_widths, cfg.style_dim, 0.5, rng))
                .collect(),
        }
    }

    /// Random bodies with zero heads: every step outputs the zero style.
    pub fn zero_heads<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut e = Self::random(cfg, rng);
        for s in &mut e.steps {
            s.head.fill_zero();
        }
        e
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams {
            steps: self.steps.iter().map(|s| s.cast()).collect(),
        }
    }
}

impl<T: Real> ParamSet<T> for EncoderParams<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        for (t, s) in self.steps.iter().enumerate() {
            s.tensors(&join(prefix, &format!("step{}", t + 1)), out);
        }
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        for (t, s) in self.steps.iter_mut().enumerate() {
            s.tensors_mut(&join(prefix, &format!("step{}", t + 1)), out);
        }
    }
}

/// Styles and results of every correction step.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgressiveTrace<T = f32> {
    pub styles: Vec<StyleVector<T>>,
    pub outputs: Vec<Image<T>>,
}

impl<T: Real> ProgressiveTrace<T> {
    pub fn final_style(&self) -> &StyleVector<T> {
        self.styles.last().expect("trace has at least one step")
    }

    pub fn final_output(&self) -> &Image<T> {
        self.outputs.last().expect("trace has at least one step")
    }
}

/// `E(A, Y; θ)` for one step's weights.
pub fn encode_style<T: Real>(a: &Image<T>, y: &Image<T>, step: &EncoderStep<T>) -> Result<StyleVector<T>> {
    Ok(StyleVector(step.forward(a, y)?))
}

/// Inference-mode progressive extraction; outputs are clamped to `[0, 1]`.
pub fn progressive_extract<T: Real>(
    x: &Image<T>,
    y: &Image<T>,
    enc: &EncoderParams<T>,
    g: &RetouchParams<T>,
) -> Result<ProgressiveTrace<T>> {
    x.ensure_same_shape(y, "progressive extraction pair")?;
    if enc.steps.is_empty() {
        return Err(Error::Config("encoder has no steps".into()));
    }
    let mut s = vec![T::zero(); g.style_dim()];
    let mut current = x.clone();
    let mut trace = ProgressiveTrace {
        styles: Vec::with_capacity(enc.steps.len()),
        outputs: Vec::with_capacity(enc.steps.len()),
    };
    for step in &enc.steps {
        let e = step.forward(&current, y)?;
        for (a, b) in s.iter_mut().zip(&e) {
            *a += *b;
        }
        current = g.retouch(x, &s)?;
        trace.styles.push(StyleVector(s.clone()));
        trace.outputs.push(current.clone());
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gaussian_vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = gaussian_vec(3 * h * w, 0.2, &mut rng);
        Image::from_planar(h, w, v.iter().map(|x| (x + 0.5).clamp(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn output_length_independent_of_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig::tiny(6, 1);
        let enc: EncoderParams<f64> = EncoderParams::random(&cfg, &mut rng);
        for (h, w) in [(1, 1), (5, 3), (16, 16)] {
            let s = encode_style(&image(h, w, 1), &image(h, w, 2), &enc.steps[0]).unwrap();
            assert_eq!(s.len(), 6);
        }
        assert!(matches!(
            encode_style(&image(4, 4, 1), &image(4, 5, 2), &enc.steps[0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ModelConfig::tiny(4, 1);
        let step: EncoderStep<f64> = EncoderStep::random(&cfg.encoder_widths, 4, 1.0, &mut rng);
        let (a, y) = (image(5, 6, 4), image(5, 6, 5));
        let probe: Vec<f64> = gaussian_vec(4, 1.0, &mut rng);
        let (_, cache) = step.forward_cached(&a, &y).unwrap();
        let mut grad = step.clone();
        grad.fill_zero();
        let da = step.backward(&cache, &probe, &mut grad);
        let f = |st: &EncoderStep<f64>, a: &Image<f64>| -> f64 {
            st.forward(a, &y).unwrap().iter().zip(&probe).map(|(p, q)| p * q).sum()
        };
        let h = 1e-6;
        for k in [0, 17, 44, 89] {
            let mut up = a.clone();
            up.data_mut()[k] += h;
            let mut dn = a.clone();
            dn.data_mut()[k] -= h;
            let fd = (f(&step, &up) - f(&step, &dn)) / (2.0 * h);
            assert!((fd - da[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} {}", da[k]);
        }
        let grads: Vec<Vec<f64>> = grad.named().into_iter().map(|(_, t)| t.clone()).collect();
        for ti in 0..grads.len() {
            let k = grads[ti].len() / 3;
            let mut up = step.clone();
            up.named_mut()[ti].1[k] += h;
            let mut dn = step.clone();
            dn.named_mut()[ti].1[k] -= h;
            let fd = (f(&up, &a) - f(&dn, &a)) / (2.0 * h);
            assert!((fd - grads[ti][k]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }
}
