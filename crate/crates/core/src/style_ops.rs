//! Latent-space tools: sampling, expert-latent fitting, clustering,
//! best-of-K selection, interpolation and per-dimension edits.
//!
//! Rendering a latent always goes `z → F⁻¹(z; c(X)) → G(X, ·)` with the
//! condition of the image being rendered.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::progressive_extract;
use crate::error::{Error, Result};
use crate::flow::{LatentVector, StyleVector};
use crate::image::Image;
use crate::metrics::psnr;
use crate::model::Model;
use crate::nn::ParamSet;
use crate::synth::Pair;

/// `count` i.i.d. standard-normal latents.
pub fn sample_latents(dim: usize, count: usize, seed: u64) -> Vec<LatentVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| LatentVector((0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()))
        .collect()
}

/// Renders `count` random styles of `x`, returning each latent with its image.
pub fn sample_retouch_with_latents(
    x: &Image,
    count: usize,
    seed: u64,
    model: &Model,
) -> Result<Vec<(LatentVector, Image)>> {
    if !model.flow.initialized {
        return Err(Error::State("flow actnorm layers are not initialized".into()));
    }
    let c = model.condition(x);
    let flow = model.flow.prepare()?;
    sample_latents(model.style_dim(), count, seed)
        .into_iter()
        .map(|z| {
            let s = flow.inverse(&z, &c)?;
            let img = model.retouch.retouch(x, &s)?;
            Ok((z, img))
        })
        .collect()
}

/// `count` renderings `G(X, F⁻¹(z; c(X)))`, `z ~ N(0, I)`.
pub fn sample_retouch(x: &Image, count: usize, seed: u64, model: &Model) -> Result<Vec<Image>> {
    Ok(sample_retouch_with_latents(x, count, seed, model)?
        .into_iter()
        .map(|(_, img)| img)
        .collect())
}

/// Final progressive style of a pair and its latent.
pub fn encode_pair(model: &Model, x: &Image, y: &Image) -> Result<(StyleVector, LatentVector)> {
    let trace = progressive_extract(x, y, model.encoder()?, &model.retouch)?;
    let s = trace.final_style().clone();
    let z = model.style_to_latent(x, &s)?;
    Ok((s, z))
}

/// Where expert styles are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AverageSpace {
    /// Average of the per-pair latents `F(sᵢ; c(Xᵢ))`.
    #[default]
    Latent,
    /// Average style `s̄`, mapped to a latent per pair with that pair's
    /// condition and then averaged.
    Style,
}

/// The mean of latents; errors on an empty list or ragged lengths.
pub fn mean_latent(latents: &[LatentVector]) -> Result<LatentVector> {
    let first = latents
        .first()
        .ok_or_else(|| Error::Input("cannot average an empty set of latents".into()))?;
    let d = first.len();
    let mut acc = vec![0.0f64; d];
    for z in latents {
        if z.len() != d {
            return Err(Error::Shape(format!("latent of length {} among length {d}", z.len())));
        }
        for (a, v) in acc.iter_mut().zip(z.iter()) {
            *a += *v as f64;
        }
    }
    let n = latents.len() as f64;
    Ok(LatentVector(acc.into_iter().map(|v| (v / n) as f32).collect()))
}

/// Expert latent `z̄` over a set of pairs.
pub fn average_latent(pairs: &[Pair], model: &Model, space: AverageSpace) -> Result<LatentVector> {
    if pairs.is_empty() {
        return Err(Error::Input("average_latent needs at least one pair".into()));
    }
    let encoded = pairs
        .iter()
        .map(|p| encode_pair(model, &p.input, &p.reference))
        .collect::<Result<Vec<_>>>()?;
    match space {
        AverageSpace::Latent => mean_latent(&encoded.into_iter().map(|(_, z)| z).collect::<Vec<_>>()),
        AverageSpace::Style => {
            let styles: Vec<LatentVector> = encoded.into_iter().map(|(s, _)| LatentVector(s.0)).collect();
            let s_bar = mean_latent(&styles)?;
            let latents = pairs
                .iter()
                .map(|p| model.style_to_latent(&p.input, &s_bar))
                .collect::<Result<Vec<_>>>()?;
            mean_latent(&latents)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub latent: LatentVector,
    pub objective: f64,
    pub initial_objective: f64,
    /// Objective at every evaluated iterate, starting with `z_init`.
    pub history: Vec<f64>,
}

/// Mean over pairs of the mean absolute error of `G(X, F⁻¹(z; c(X)))`
/// (clamped) against `Y`, with its gradient in `z` when asked.
pub fn latent_objective(pairs: &[Pair], z: &[f32], model: &Model, want_grad: bool) -> Result<(f64, Vec<f32>)> {
    if pairs.is_empty() {
        return Err(Error::Input("objective over an empty set of pairs".into()));
    }
    let flow = model.flow.prepare()?;
    let mut scratch = model.retouch.clone();
    let mut total = 0.0;
    let mut grad = vec![0.0f32; z.len()];
    let n = pairs.len() as f64;
    for p in pairs {
        p.input.ensure_same_shape(&p.reference, "objective pair")?;
        let c = model.condition(&p.input);
        let (s, caches) = flow.inverse_cached(z, &c)?;
        let (y, rc) = model.retouch.forward_pixels(p.input.data(), &s)?;
        let per = (1.0 / (n * y.len() as f64)) as f32;
        let mut err = 0.0;
        let mut dy = Vec::with_capacity(y.len());
        for (o, r) in y.iter().zip(p.reference.data()) {
            let oc = o.clamp(0.0, 1.0);
            err += (oc - r).abs() as f64;
            let inside = *o > 0.0 && *o < 1.0;
            dy.push(if !inside || oc == *r {
                0.0
            } else if oc > *r {
                per
            } else {
                -per
            });
        }
        total += err / (n * y.len() as f64);
        if want_grad {
            scratch.fill_zero();
            let ds = model.retouch.backward(&rc, &dy, &mut scratch);
            for (g, v) in grad.iter_mut().zip(flow.inverse_backward(&caches, &ds)) {
                *g += v;
            }
        }
    }
    Ok((total, grad))
}

/// Adam on `z` alone (weights frozen), keeping the best iterate seen.
pub fn optimize_latent(pairs: &[Pair], z_init: &LatentVector, model: &Model, cfg: &OptimizeConfig) -> Result<OptimizeResult> {
    if z_init.len() != model.style_dim() {
        return Err(Error::Shape(format!(
            "initial latent of length {} for style dimension {}",
            z_init.len(),
            model.style_dim()
        )));
    }
    let mut z: Vec<f32> = z_init.0.clone();
    let mut m = vec![0.0f64; z.len()];
    let mut v = vec![0.0f64; z.len()];
    let mut history = Vec::with_capacity(cfg.steps + 1);
    let mut best = (f64::INFINITY, z.clone());
    for k in 0..=cfg.steps {
        let (obj, g) = latent_objective(pairs, &z, model, k < cfg.steps)?;
        if !obj.is_finite() {
            return Err(Error::Numeric(format!("latent optimization: non-finite objective at iterate {k}")));
        }
        history.push(obj);
        if obj < best.0 {
            best = (obj, z.clone());
        }
        if k == cfg.steps {
            break;
        }
        let t = (k + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for j in 0..z.len() {
            let gj = g[j] as f64;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let step = cfg.learning_rate * (m[j] / bc1) / ((v[j] / bc2).sqrt() + 1e-8);
            z[j] -= step as f32;
        }
    }
    Ok(OptimizeResult {
        latent: LatentVector(best.1),
        objective: best.0,
        initial_objective: history[0],
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookSource {
    Averaged,
    Optimized,
    Clustered,
    Explicit,
}

impl std::fmt::Display for CodebookSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CodebookSource::Averaged => "averaged",
            CodebookSource::Optimized => "optimized",
            CodebookSource::Clustered => "clustered",
            CodebookSource::Explicit => "explicit",
        };
        f.write_str(s)
    }
}

/// A list of latent centers with their provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCodebook {
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub source: CodebookSource,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub dataset: Option<String>,
    pub centers: Vec<LatentVector>,
}

impl LatentCodebook {
    pub fn new(centers: Vec<LatentVector>, source: CodebookSource, seed: Option<u64>, dataset: Option<String>) -> Result<Self> {
        let cb = Self {
            d: centers.first().map(|c| c.len()).unwrap_or(0),
            k: centers.len(),
            source,
            seed,
            dataset,
            centers,
        };
        cb.validate()?;
        Ok(cb)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.centers.len() != self.k {
            return Err(Error::Input(format!(
                "codebook declares K = {} with {} centers",
                self.k,
                self.centers.len()
            )));
        }
        if let Some(c) = self.centers.iter().find(|c| c.len() != self.d || !c.is_finite()) {
            return Err(Error::Shape(format!(
                "codebook center of length {} (finite: {}) for d = {}",
                c.len(),
                c.is_finite(),
                self.d
            )));
        }
        Ok(())
    }

    pub fn center(&self, j: usize) -> Result<&LatentVector> {
        self.centers.get(j).ok_or(Error::Index { index: j, len: self.k })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("codebook serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cb: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        cb.validate().map_err(|e| Error::format(path, e))?;
        Ok(cb)
    }
}

/// k-means result with its inertia trace.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, then the final value.
    pub inertia_history: Vec<f64>,
}

pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. Stops when inertia improves
/// by less than `1e-6` or after 100 iterations; final centers are the
/// means of their assigned points.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Input(format!("cannot form {k} clusters from {n} points")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Shape("points of unequal length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let dists: Vec<f64> = points.iter().map(|p| nearest(p, &centers).1).collect();
        let total: f64 = dists.iter().sum();
        let idx = if total <= 0.0 {
            // Every point coincides with a center; take the first unused one.
            (0..n)
                .find(|&i| !centers.iter().any(|c| c == &points[i]))
                .unwrap_or(centers.len() % n)
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in dists.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        };
        centers.push(points[idx].clone());
    }

    let mut assignments = vec![0; n];
    let mut history = Vec::new();
    let update = |assignments: &[usize], centers: &mut Vec<Vec<f64>>| {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    };
    for _ in 0..KMEANS_MAX_ITER {
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (j, dist) = nearest(p, &centers);
            assignments[i] = j;
            inertia += dist;
        }
        let converged = history.last().is_some_and(|prev: &f64| prev - inertia < KMEANS_TOL);
        history.push(inertia);
        update(&assignments, &mut centers);
        if converged {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| sq_dist(p, &centers[a]))
        .sum();
    history.push(inertia);
    Ok(KMeans {
        centers,
        assignments,
        inertia,
        inertia_history: history,
    })
}

/// Clusters latents into a `K`-center codebook.
pub fn cluster_latents(latents: &[LatentVector], k: usize, seed: u64) -> Result<LatentCodebook> {
    let points: Vec<Vec<f64>> = latents
        .iter()
        .map(|z| z.iter().map(|v| *v as f64).collect())
        .collect();
    let km = kmeans(&points, k, seed)?;
    let centers = km
        .centers
        .into_iter()
        .map(|c| LatentVector(c.into_iter().map(|v| v as f32).collect()))
        .collect();
    LatentCodebook::new(centers, CodebookSource::Clustered, Some(seed), None)
}

/// Renders every center for `x` and keeps the one with the highest PSNR
/// against `y`; ties go to the lowest index.
pub fn best_of_k(x: &Image, y: &Image, codebook: &LatentCodebook, model: &Model) -> Result<(Image, usize, f64)> {
    x.ensure_same_shape(y, "best_of_k pair")?;
    codebook.validate()?;
    let c = model.condition(x);
    let flow = model.flow.prepare()?;
    let mut best: Option<(Image, usize, f64)> = None;
    for (j, z) in codebook.centers.iter().enumerate() {
        let s = flow.inverse(z, &c)?;
        let img = model.retouch.retouch(x, &s)?;
        let score = psnr(&img, y)?;
        if best.as_ref().is_none_or(|b| score > b.2) {
            best = Some((img, j, score));
        }
    }
    Ok(best.expect("codebook is non-empty"))
}

/// `(1 − t) · z_a + t · z_b`; any real `t` is allowed.
pub fn interpolate(za: &LatentVector, zb: &LatentVector, t: f64) -> Result<LatentVector> {
    if za.len() != zb.len() {
        return Err(Error::Shape(format!("interpolating lengths {} and {}", za.len(), zb.len())));
    }
    Ok(LatentVector(
        za.iter()
            .zip(zb.iter())
            .map(|(a, b)| ((1.0 - t) * *a as f64 + t * *b as f64) as f32)
            .collect(),
    ))
}

/// Copy of `z` with `z_j += delta`.
pub fn adjust_dimension(z: &LatentVector, j: usize, delta: f64) -> Result<LatentVector> {
    if j >= z.len() {
        return Err(Error::Index { index: j, len: z.len() });
    }
    let mut out = z.clone();
    out.0[j] = (out.0[j] as f64 + delta) as f32;
    Ok(out)
}
