//! The full parameter bundle: flow, retoucher and (in training checkpoints)
//! the style encoder.

use rand::Rng;

use crate::config::ModelConfig;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::flow::{ConditionVector, FlowParams, LatentVector, StyleVector};
use crate::image::Image;
use crate::nn::{join, ParamSet};
use crate::real::Real;
use crate::retouch::RetouchParams;

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub flow: FlowParams<T>,
    pub retouch: RetouchParams<T>,
    /// Present in training checkpoints only.
    pub encoder: Option<EncoderParams<T>>,
}

impl<T: Real> Model<T> {
    /// Fresh weights for training; the flow still needs actnorm init.
    pub fn for_training<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            flow: FlowParams::for_training(config, rng),
            retouch: RetouchParams::random(config, rng),
            encoder: Some(EncoderParams::random(config, rng)),
        })
    }

    /// Random, fully usable weights (tests, examples).
    pub fn random<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            flow: FlowParams::random(config, rng),
            retouch: RetouchParams::random(config, rng),
            encoder: Some(EncoderParams::random(config, rng)),
        })
    }

    pub fn style_dim(&self) -> usize {
        self.config.style_dim
    }

    pub fn encoder(&self) -> Result<&EncoderParams<T>> {
        self.encoder
            .as_ref()
            .ok_or_else(|| Error::State("model has no style encoder (deploy checkpoint)".into()))
    }

    /// Copy without the encoder.
    pub fn deploy(&self) -> Self {
        Self {
            encoder: None,
            ..self.clone()
        }
    }

    pub fn condition(&self, x: &Image<T>) -> ConditionVector<T> {
        self.flow.extract_condition(x)
    }

    /// `s = F⁻¹(z; c(X))`.
    pub fn latent_to_style(&self, x: &Image<T>, z: &[T]) -> Result<StyleVector<T>> {
        let c = self.condition(x);
        self.flow.inverse(z, &c)
    }

    /// `z = F(s; c(X))`.
    pub fn style_to_latent(&self, x: &Image<T>, s: &[T]) -> Result<LatentVector<T>> {
        let c = self.condition(x);
        Ok(self.flow.forward(s, &c)?.0)
    }

    /// `Ŷ = G(X, F⁻¹(z; c(X)))`, clamped.
    pub fn render(&self, x: &Image<T>, z: &[T]) -> Result<Image<T>> {
        let s = self.latent_to_style(x, z)?;
        self.retouch.retouch(x, &s)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            flow: self.flow.cast(),
            retouch: self.retouch.cast(),
            encoder: self.encoder.as_ref().map(|e| e.cast()),
        }
    }
}

impl<T: Real> ParamSet<T> for Model<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        self.flow.tensors(&join(prefix, "flow"), out);
        self.retouch.tensors(&join(prefix, "retouch"), out);
        if let Some(e) = &self.encoder {
            e.tensors(&join(prefix, "encoder"), out);
        }
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        self.flow.tensors_mut(&join(prefix, "flow"), out);
        self.retouch.tensors_mut(&join(prefix, "retouch"), out);
        if let Some(e) = &mut self.encoder {
            e.tensors_mut(&join(prefix, "encoder"), out);
        }
    }
}
