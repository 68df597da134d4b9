//! Pointwise conditional retoucher.
//!
//! Three 1×1 convolutions (3 → w → w → 3) act on each pixel's RGB
//! independently. After every convolution a feature modulation
//! `f'ᵢ = fᵢ + (αᵢ fᵢ + βᵢ)` is applied, with `(α, β)` predicted from the
//! style vector by a per-layer two-layer fully connected map. The first two
//! layers are followed by a leaky rectifier; the last is linear.
//!
//! Because nothing mixes pixels, two pixels with identical input RGB always
//! produce identical output RGB for any style.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::flow::StyleVector;
use crate::image::Image;
use crate::nn::{join, leaky_backward, leaky_inplace, Dense, Mlp, MlpCache, ParamSet};
use crate::real::{matmul, Real};

pub const RETOUCH_LAYERS: usize = 3;

/// Per-channel scale and shift for one modulated feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationParams<T = f32> {
    pub alpha: Vec<T>,
    pub beta: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetouchLayer<T = f32> {
    /// Pointwise convolution, `out × in`.
    pub conv: Dense<T>,
    /// Style → `[α; β]`.
    pub modulation: Mlp<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetouchParams<T = f32> {
    pub layers: Vec<RetouchLayer<T>>,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RetouchCache<T> {
    pixels: usize,
    inputs: Vec<Vec<T>>,
    pre_modulation: Vec<Vec<T>>,
    outputs: Vec<Vec<T>>,
    alphas: Vec<Vec<T>>,
    mod_caches: Vec<MlpCache<T>>,
}

/// `f'ᵢ = fᵢ + (αᵢ fᵢ + βᵢ)` on a channel-major `C × P` feature map.
pub fn modulate<T: Real>(features: &mut [T], channels: usize, mp: &ModulationParams<T>) -> Result<()> {
    if mp.alpha.len() != channels || mp.beta.len() != channels {
        return Err(Error::Shape(format!(
            "modulation of width {}/{} for {channels} channels",
            mp.alpha.len(),
            mp.beta.len()
        )));
    }
    if channels == 0 || !features.len().is_multiple_of(channels) {
        return Err(Error::Shape(format!(
            "{} features do not split into {channels} channels",
            features.len()
        )));
    }
    let p = features.len() / channels;
    for (c, plane) in features.chunks_exact_mut(p).enumerate() {
        let (a, b) = (mp.alpha[c], mp.beta[c]);
        for f in plane {
            *f = *f + (a * *f + b);
        }
    }
    Ok(())
}

impl<T: Real> RetouchParams<T> {
    fn widths(cfg: &ModelConfig) -> [(usize, usize); RETOUCH_LAYERS] {
        let w = cfg.retouch_width;
        [(3, w), (w, w), (w, 3)]
    }

    pub fn random<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let layers = Self::widths(cfg)
            .iter()
            .map(|&(i, o)| RetouchLayer {
                conv: Dense::random(i, o, 1.0, rng),
                modulation: Mlp::random(cfg.style_dim, cfg.modulation_hidden, 2 * o, 0.1, rng),
            })
            .collect();
        Self { layers }
    }

    /// Random convolutions with all modulation weights zero, so styles have
    /// no effect.
    pub fn random_unmodulated<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::random(cfg, rng);
        for l in &mut p.layers {
            l.modulation.fill_zero();
        }
        p
    }

    pub fn style_dim(&self) -> usize {
        self.layers[0].modulation.fc1.in_dim
    }

    /// `(α, β)` for one layer.
    pub fn style_to_modulation(&self, s: &[T], layer: usize) -> Result<ModulationParams<T>> {
        let l = self.layers.get(layer).ok_or(Error::Index {
            index: layer,
            len: self.layers.len(),
        })?;
        if s.len() != self.style_dim() {
            return Err(Error::Shape(format!(
                "style of length {} where {} is expected",
                s.len(),
                self.style_dim()
            )));
        }
        let out = l.modulation.forward(s, 1);
        let w = l.conv.out_dim;
        Ok(ModulationParams {
            alpha: out[..w].to_vec(),
            beta: out[w..].to_vec(),
        })
    }

    /// Runs the network on planar `3 × P` pixels. Output is unclamped.
    pub fn forward_pixels(&self, x: &[T], s: &[T]) -> Result<(Vec<T>, RetouchCache<T>)> {
        if s.len() != self.style_dim() {
            return Err(Error::Shape(format!(
                "style of length {} where {} is expected",
                s.len(),
                self.style_dim()
            )));
        }
        let p = x.len() / 3;
        let mut cache = RetouchCache {
            pixels: p,
            inputs: Vec::with_capacity(RETOUCH_LAYERS),
            pre_modulation: Vec::with_capacity(RETOUCH_LAYERS),
            outputs: Vec::with_capacity(RETOUCH_LAYERS),
            alphas: Vec::with_capacity(RETOUCH_LAYERS),
            mod_caches: Vec::with_capacity(RETOUCH_LAYERS),
        };
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (in_dim, out_dim) = (layer.conv.in_dim, layer.conv.out_dim);
            let mut f = Vec::with_capacity(out_dim * p);
            for &b in &layer.conv.bias {
                f.extend(std::iter::repeat_n(b, p));
            }
            matmul(&layer.conv.weight, false, &h, false, out_dim, in_dim, p, &mut f, true);
            let (ab, mcache) = layer.modulation.forward_cached(s, 1);
            let mp = ModulationParams {
                alpha: ab[..out_dim].to_vec(),
                beta: ab[out_dim..].to_vec(),
            };
            let mut out = f.clone();
            modulate(&mut out, out_dim, &mp)?;
            if i < last {
                leaky_inplace(&mut out);
            }
            cache.inputs.push(h);
            cache.pre_modulation.push(f);
            cache.alphas.push(mp.alpha);
            cache.mod_caches.push(mcache);
            h = out.clone();
            cache.outputs.push(out);
        }
        Ok((h, cache))
    }

    /// Training-mode forward on an image (no output clamp).
    pub fn forward_train(&self, x: &Image<T>, s: &[T]) -> Result<(Image<T>, RetouchCache<T>)> {
        let (y, cache) = self.forward_pixels(x.data(), s)?;
        Ok((Image::from_planar(x.height(), x.width(), y)?, cache))
    }

    /// Inference: output clamped to `[0, 1]`.
    pub fn retouch(&self, x: &Image<T>, s: &[T]) -> Result<Image<T>> {
        Ok(self.forward_train(x, s)?.0.clamped())
    }

    /// Backward from `∂L/∂Ŷ` (planar). Accumulates parameter gradients into
    /// `grad` and returns `∂L/∂s`.
    pub fn backward(&self, cache: &RetouchCache<T>, dy: &[T], grad: &mut RetouchParams<T>) -> Vec<T> {
        let p = cache.pixels;
        let mut d = dy.to_vec();
        let mut ds = vec![T::zero(); self.style_dim()];
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let g = &mut grad.layers[i];
            let (in_dim, out_dim) = (layer.conv.in_dim, layer.conv.out_dim);
            if i < last {
                leaky_backward(&cache.outputs[i], &mut d);
            }
            let f = &cache.pre_modulation[i];
            let mut dab = vec![T::zero(); 2 * out_dim];
            for c in 0..out_dim {
                let dplane = &mut d[c * p..(c + 1) * p];
                let fplane = &f[c * p..(c + 1) * p];
                let mut da = T::zero();
                let mut db = T::zero();
                for (g, &fv) in dplane.iter().zip(fplane) {
                    da += *g * fv;
                    db += *g;
                }
                dab[c] = da;
                dab[out_dim + c] = db;
                let k = T::one() + cache.alphas[i][c];
                dplane.iter_mut().for_each(|v| *v *= k);
            }
            // d now holds ∂L/∂f.
            let h = &cache.inputs[i];
            matmul(&d, false, h, true, out_dim, p, in_dim, &mut g.conv.weight, true);
            for (gb, plane) in g.conv.bias.iter_mut().zip(d.chunks_exact(p)) {
                *gb += plane.iter().copied().sum::<T>();
            }
            let ds_layer = layer
                .modulation
                .backward(&cache.mod_caches[i], &dab, Some(&mut g.modulation));
            for (a, b) in ds.iter_mut().zip(ds_layer) {
                *a += b;
            }
            if i > 0 {
                let mut dh = vec![T::zero(); in_dim * p];
                matmul(&layer.conv.weight, true, &d, false, in_dim, out_dim, p, &mut dh, false);
                d = dh;
            }
        }
        ds
    }

    pub fn cast<U: Real>(&self) -> RetouchParams<U> {
        RetouchParams {
            layers: self
                .layers
                .iter()
                .map(|l| RetouchLayer {
                    conv: l.conv.cast(),
                    modulation: l.modulation.cast(),
                })
                .collect(),
        }
    }
}

impl<T: Real> ParamSet<T> for RetouchParams<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        for (i, l) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layer{i}"));
            l.conv.tensors(&join(&p, "conv"), out);
            l.modulation.fc1.tensors(&join(&p, "fc1"), out);
            l.modulation.fc2.tensors(&join(&p, "fc2"), out);
        }
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &format!("layer{i}"));
            l.conv.tensors_mut(&join(&p, "conv"), out);
            l.modulation.fc1.tensors_mut(&join(&p, "fc1"), out);
            l.modulation.fc2.tensors_mut(&join(&p, "fc2"), out);
        }
    }
}

pub fn style_to_modulation(s: &StyleVector, layer: usize, params: &RetouchParams) -> Result<ModulationParams> {
    params.style_to_modulation(s, layer)
}

/// `Ŷ = G(X, s)`, clamped to `[0, 1]`.
pub fn retouch(x: &Image, s: &StyleVector, params: &RetouchParams) -> Result<Image> {
    params.retouch(x, s)
}
