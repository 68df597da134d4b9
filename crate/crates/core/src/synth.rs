//! Synthetic experts and dataset I/O.
//!
//! An expert is a distribution over global tone operators
//! `Y = clip(lift + gain · clip(X + wb)^gamma)` (per channel; `wb` is added
//! to red and subtracted from blue). Because the operator is pointwise and
//! global, the retoucher can represent it exactly, and because its
//! parameters are known per pair, fitted outputs can be compared against
//! the ground-truth distribution.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const GAIN_RANGE: (f64, f64) = (0.5, 1.6);
pub const GAMMA_RANGE: (f64, f64) = (0.5, 1.8);
pub const LIFT_RANGE: (f64, f64) = (-0.1, 0.1);
pub const WB_RANGE: (f64, f64) = (-0.1, 0.1);

const WB_SIGN: [f64; 3] = [1.0, 0.0, -1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertTransform {
    pub gain: [f64; 3],
    pub gamma: [f64; 3],
    pub lift: [f64; 3],
    pub wb_shift: f64,
}

impl Default for ExpertTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl ExpertTransform {
    pub fn identity() -> Self {
        Self {
            gain: [1.0; 3],
            gamma: [1.0; 3],
            lift: [0.0; 3],
            wb_shift: 0.0,
        }
    }

    /// Clips every field into its allowed range.
    pub fn clipped(&self) -> Self {
        let clip3 = |v: [f64; 3], (lo, hi): (f64, f64)| v.map(|x| x.clamp(lo, hi));
        Self {
            gain: clip3(self.gain, GAIN_RANGE),
            gamma: clip3(self.gamma, GAMMA_RANGE),
            lift: clip3(self.lift, LIFT_RANGE),
            wb_shift: self.wb_shift.clamp(WB_RANGE.0, WB_RANGE.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = self.to_vec();
        if fields.iter().any(|v| !v.is_finite()) || self.clipped() != *self {
            return Err(Error::Parameter(format!("transform out of range: {self:?}")));
        }
        Ok(())
    }

    /// `[gain; gamma; lift; wb]`, the order used by the fitter.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(10);
        v.extend(self.gain);
        v.extend(self.gamma);
        v.extend(self.lift);
        v.push(self.wb_shift);
        v
    }

    pub fn from_slice(p: &[f64]) -> Self {
        Self {
            gain: [p[0], p[1], p[2]],
            gamma: [p[3], p[4], p[5]],
            lift: [p[6], p[7], p[8]],
            wb_shift: p[9],
        }
    }

    /// Largest absolute field difference.
    pub fn max_abs_diff(&self, other: &ExpertTransform) -> f64 {
        self.to_vec()
            .iter()
            .zip(other.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    #[inline]
    pub fn apply_value(&self, channel: usize, x: f64) -> f64 {
        let xs = (x + self.wb_shift * WB_SIGN[channel]).clamp(0.0, 1.0);
        (self.lift[channel] + self.gain[channel] * xs.powf(self.gamma[channel])).clamp(0.0, 1.0)
    }
}

/// `Y = apply(X, t)`.
pub fn apply_expert_transform(x: &Image, t: &ExpertTransform) -> Image {
    let mut y = x.clone();
    for c in 0..3 {
        for v in y.plane_mut(c) {
            *v = t.apply_value(c, *v as f64) as f32;
        }
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub std: f64,
}

impl Gaussian {
    pub const fn new(mean: f64, std: f64) -> Self {
        Self { mean, std }
    }

    fn sample<R: Rng + ?Sized>(&self, shift: f64, rng: &mut R) -> f64 {
        Normal::new(self.mean + shift, self.std)
            .expect("validated std")
            .sample(rng)
    }
}

/// Per-field Gaussians plus a luminance coupling: the mean gain of every
/// channel moves by `k · (0.5 − L)` where `L` is the input's mean luma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub name: String,
    pub gain: [Gaussian; 3],
    pub gamma: [Gaussian; 3],
    pub lift: [Gaussian; 3],
    pub wb_shift: Gaussian,
    #[serde(default)]
    pub luminance_coupling: f64,
}

impl ExpertSpec {
    /// The expert used by the examples and the acceptance run: a warm,
    /// slightly brightening style with visible per-image variation.
    pub fn warm() -> Self {
        Self {
            name: "warm".into(),
            gain: [Gaussian::new(1.08, 0.08), Gaussian::new(1.0, 0.08), Gaussian::new(0.92, 0.08)],
            gamma: [Gaussian::new(0.85, 0.1); 3],
            lift: [Gaussian::new(0.02, 0.015); 3],
            wb_shift: Gaussian::new(0.02, 0.02),
            luminance_coupling: 0.5,
        }
    }

    /// A second, clearly different expert (darker, cooler, more contrast).
    pub fn cool() -> Self {
        Self {
            name: "cool".into(),
            gain: [Gaussian::new(0.85, 0.06), Gaussian::new(0.95, 0.06), Gaussian::new(1.1, 0.06)],
            gamma: [Gaussian::new(1.3, 0.1); 3],
            lift: [Gaussian::new(-0.01, 0.01); 3],
            wb_shift: Gaussian::new(-0.03, 0.015),
            luminance_coupling: 0.3,
        }
    }

    /// Every draw equals the mean transform.
    pub fn deterministic(name: &str, t: &ExpertTransform) -> Self {
        let g = |v: [f64; 3]| v.map(|m| Gaussian::new(m, 0.0));
        Self {
            name: name.into(),
            gain: g(t.gain),
            gamma: g(t.gamma),
            lift: g(t.lift),
            wb_shift: Gaussian::new(t.wb_shift, 0.0),
            luminance_coupling: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .gain
            .iter()
            .chain(&self.gamma)
            .chain(&self.lift)
            .chain(std::iter::once(&self.wb_shift));
        for g in all {
            if !(g.std >= 0.0) || !g.mean.is_finite() || !g.std.is_finite() {
                return Err(Error::Parameter(format!(
                    "expert {}: invalid distribution {g:?}",
                    self.name
                )));
            }
        }
        if !self.luminance_coupling.is_finite() {
            return Err(Error::Parameter("luminance coupling must be finite".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Parameter(format!("invalid expert name {:?}", self.name)));
        }
        Ok(())
    }

    /// Gain mean for channel `c` given the input's mean luma.
    pub fn conditional_gain_mean(&self, channel: usize, luminance: f64) -> f64 {
        self.gain[channel].mean + self.luminance_coupling * (0.5 - luminance)
    }

    /// Draws one transform for an input with the given mean luma; the draw
    /// is clipped into the allowed ranges.
    pub fn sample<R: Rng + ?Sized>(&self, luminance: f64, rng: &mut R) -> ExpertTransform {
        let shift = self.luminance_coupling * (0.5 - luminance);
        let gain = [0, 1, 2].map(|c| self.gain[c].sample(shift, rng));
        let gamma = [0, 1, 2].map(|c| self.gamma[c].sample(0.0, rng));
        let lift = [0, 1, 2].map(|c| self.lift[c].sample(0.0, rng));
        let wb_shift = self.wb_shift.sample(0.0, rng);
        ExpertTransform {
            gain,
            gamma,
            lift,
            wb_shift,
        }
        .clipped()
    }

    pub fn load(path: &Path) -> Result<Vec<ExpertSpec>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let specs: Vec<ExpertSpec> = match serde_json::from_str::<ExpertSpec>(&text) {
            Ok(one) => vec![one],
            Err(_) => serde_json::from_str(&text).map_err(|e| Error::format(path, e))?,
        };
        if specs.is_empty() {
            return Err(Error::format(path, "no expert specs"));
        }
        for s in &specs {
            s.validate()?;
        }
        Ok(specs)
    }
}

fn blur_plane(p: &mut [f64], h: usize, w: usize, radius: usize) {
    let mut tmp = vec![0.0; p.len()];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            tmp[y * w + x] = (lo..=hi).map(|k| p[y * w + k]).sum::<f64>() / (hi - lo + 1) as f64;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            p[y * w + x] = (lo..=hi).map(|k| tmp[k * w + x]).sum::<f64>() / (hi - lo + 1) as f64;
        }
    }
}

/// Procedural base image: gradients, smooth random fields and blurred
/// noise, shaped by a random power curve and rescaled per channel into
/// `[0.05, 0.95]`.
pub fn render_base_image<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Image {
    let hw = height * width;
    let exponent = (rng.random_range(-0.9f64..0.9)).exp();
    let mut data = Vec::with_capacity(3 * hw);
    let shared_angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    for _ in 0..3 {
        let angle = shared_angle + rng.random_range(-0.6..0.6);
        let (ca, sa) = (angle.cos(), angle.sin());
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.1..0.4),
                )
            })
            .collect();
        let mut noise: Vec<f64> = (0..hw).map(|_| rng.random_range(-1.0..1.0)).collect();
        blur_plane(&mut noise, height, width, (height.min(width) / 12).max(1));
        let mut plane = vec![0.0; hw];
        for y in 0..height {
            for x in 0..width {
                let u = x as f64 / width.max(1) as f64;
                let v = y as f64 / height.max(1) as f64;
                let mut val = ca * u + sa * v;
                for &(fx, fy, ph, amp) in &waves {
                    val += amp * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin();
                }
                plane[y * width + x] = val + 0.6 * noise[y * width + x];
            }
        }
        let (lo, hi) = plane
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = (hi - lo).max(1e-12);
        for v in plane {
            let unit = ((v - lo) / span).powf(exponent);
            data.push((0.05 + 0.9 * unit) as f32);
        }
    }
    Image::from_planar(height, width, data)
        .expect("sized buffer")
        .quantized16()
}

/// One generated pair, in memory.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub input: Image,
    pub reference: Image,
    pub expert: String,
    pub transform: ExpertTransform,
}

fn pair_rng(seed: u64, expert: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((expert as u64) << 32) | index as u64);
    rng
}

/// Generates pair `index` of expert `expert_index` deterministically.
pub fn synthesize_pair(spec: &ExpertSpec, expert_index: usize, index: usize, size: usize, seed: u64) -> SyntheticPair {
    let mut rng = pair_rng(seed, expert_index, index);
    let input = render_base_image(size, size, &mut rng);
    let transform = spec.sample(input.mean_luminance(), &mut rng);
    let reference = apply_expert_transform(&input, &transform).quantized16();
    SyntheticPair {
        input,
        reference,
        expert: spec.name.clone(),
        transform,
    }
}

pub fn synthesize_pairs(spec: &ExpertSpec, n_images: usize, size: usize, seed: u64) -> Vec<SyntheticPair> {
    (0..n_images)
        .map(|i| synthesize_pair(spec, 0, i, size, seed))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub input: String,
    pub reference: String,
    pub expert: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<ExpertTransform>,
}

/// `root` is resolved relative to the manifest file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: String,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub specs: Vec<ExpertSpec>,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }

    pub fn experts(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.expert) {
                out.push(e.expert.clone());
            }
        }
        out
    }
}

/// Renders `n_images` pairs for every spec into `out_dir` (files under
/// `<expert>/input` and `<expert>/reference`) and writes
/// `out_dir/manifest.json`.
pub fn generate_synthetic_dataset(
    specs: &[ExpertSpec],
    n_images: usize,
    size: usize,
    seed: u64,
    split: &str,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_images == 0 {
        return Err(Error::Input("n_images must be at least 1".into()));
    }
    if size < 16 {
        return Err(Error::Input(format!("image size {size} is below the minimum of 16")));
    }
    if specs.is_empty() {
        return Err(Error::Input("at least one expert spec is required".into()));
    }
    for s in specs {
        s.validate()?;
    }
    let mut entries = Vec::with_capacity(specs.len() * n_images);
    for (e, spec) in specs.iter().enumerate() {
        for sub in ["input", "reference"] {
            let dir = out_dir.join(&spec.name).join(sub);
            std::fs::create_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
        }
        for i in 0..n_images {
            let pair = synthesize_pair(spec, e, i, size, seed);
            let input = format!("{}/input/{i:05}.png", spec.name);
            let reference = format!("{}/reference/{i:05}.png", spec.name);
            pair.input.write_png(&out_dir.join(&input), true)?;
            pair.reference.write_png(&out_dir.join(&reference), true)?;
            entries.push(ManifestEntry {
                input,
                reference,
                expert: spec.name.clone(),
                transform: Some(pair.transform),
            });
        }
    }
    let manifest = DatasetManifest {
        root: ".".into(),
        split: split.into(),
        seed: Some(seed),
        specs: specs.to_vec(),
        entries,
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// A loaded pair.
#[derive(Debug, Clone)]
pub struct Pair {
    pub id: String,
    pub input: Image,
    pub reference: Image,
    pub expert: String,
    pub transform: Option<ExpertTransform>,
}

/// A manifest bound to its on-disk location; pairs are read on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn load_pair(&self, index: usize) -> Result<Pair> {
        let e = self.manifest.entries.get(index).ok_or(Error::Index {
            index,
            len: self.len(),
        })?;
        let input = Image::read_png(&self.root.join(&e.input))?;
        let ref_path = self.root.join(&e.reference);
        let reference = Image::read_png(&ref_path)?;
        if !input.same_shape(&reference) {
            return Err(Error::Image {
                path: ref_path,
                reason: format!(
                    "reference is {}×{} but input is {}×{}",
                    reference.height(),
                    reference.width(),
                    input.height(),
                    input.width()
                ),
            });
        }
        Ok(Pair {
            id: e.input.clone(),
            input,
            reference,
            expert: e.expert.clone(),
            transform: e.transform,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Pair>> {
        (0..self.len()).map(|i| self.load_pair(i)).collect()
    }
}

/// Reads a manifest; errors on an empty entry list.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    if manifest.entries.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} has no entries",
            manifest_path.display()
        )));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let root = base.join(&manifest.root);
    Ok(Dataset { manifest, root })
}

/// Crops both images at one random offset.
pub fn random_crop_pair<R: Rng + ?Sized>(x: &Image, y: &Image, size: usize, rng: &mut R) -> Result<(Image, Image)> {
    x.ensure_same_shape(y, "crop pair")?;
    if size == 0 || size > x.height().min(x.width()) {
        return Err(Error::Input(format!(
            "crop size {size} does not fit a {}×{} image",
            x.height(),
            x.width()
        )));
    }
    let top = rng.random_range(0..=x.height() - size);
    let left = rng.random_range(0..=x.width() - size);
    Ok((x.crop(top, left, size, size)?, y.crop(top, left, size, size)?))
}

const FIT_EPS: f64 = 1e-6;

fn check_fit_input(x: &Image) -> Result<()> {
    for c in 0..3 {
        let mut levels: Vec<u32> = x
            .plane(c)
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u32)
            .collect();
        levels.sort_unstable();
        levels.dedup();
        let lo = *levels.first().unwrap_or(&0) as f64 / 65535.0;
        let hi = *levels.last().unwrap_or(&0) as f64 / 65535.0;
        if levels.len() < 32 || hi - lo < 0.8 - 1e-9 {
            return Err(Error::Conditioning(format!(
                "channel {c} has {} distinct values spanning [{lo:.3}, {hi:.3}]; need at least 32 spanning 0.8",
                levels.len()
            )));
        }
    }
    Ok(())
}

fn fit_bounds() -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![GAIN_RANGE.0; 3];
    let mut hi = vec![GAIN_RANGE.1; 3];
    lo.extend([GAMMA_RANGE.0; 3]);
    hi.extend([GAMMA_RANGE.1; 3]);
    lo.extend([LIFT_RANGE.0; 3]);
    hi.extend([LIFT_RANGE.1; 3]);
    lo.push(WB_RANGE.0);
    hi.push(WB_RANGE.1);
    (lo, hi)
}

/// Residuals and Jacobian over the unclipped pixels.
fn residuals(x: &Image, y: &Image, p: &[f64], mask: &[bool], want_jac: bool) -> (Vec<f64>, Vec<[f64; 10]>) {
    let mut r = Vec::new();
    let mut jac = Vec::new();
    let hw = x.pixel_count();
    for c in 0..3 {
        let (gain, gamma, lift, wb) = (p[c], p[3 + c], p[6 + c], p[9]);
        for (k, (&xv, &yv)) in x.plane(c).iter().zip(y.plane(c)).enumerate() {
            if !mask[c * hw + k] {
                continue;
            }
            let xs_raw = xv as f64 + wb * WB_SIGN[c];
            let xs = xs_raw.clamp(0.0, 1.0);
            let pw = if xs > 0.0 { xs.powf(gamma) } else { 0.0 };
            r.push(lift + gain * pw - yv as f64);
            if want_jac {
                let mut row = [0.0; 10];
                row[c] = pw;
                row[6 + c] = 1.0;
                if xs > 0.0 {
                    row[3 + c] = gain * pw * xs.ln();
                    if xs_raw > 0.0 && xs_raw < 1.0 {
                        row[9] = gain * gamma * pw / xs * WB_SIGN[c];
                    }
                }
                jac.push(row);
            }
        }
    }
    (r, jac)
}

/// Least-squares fit of the tone-operator parameters mapping `x` to `y`.
///
/// Pixels whose reference sits at the clip limits are excluded. The fit is
/// started from a per-channel log-space regression and refined with a
/// box-constrained Levenberg–Marquardt over all ten parameters; results lie
/// within the transform ranges.
pub fn fit_transform(x: &Image, y: &Image) -> Result<ExpertTransform> {
    x.ensure_same_shape(y, "fit pair")?;
    check_fit_input(x)?;
    let hw = x.pixel_count();
    let mask: Vec<bool> = y
        .data()
        .iter()
        .map(|&v| v as f64 > FIT_EPS && (v as f64) < 1.0 - FIT_EPS)
        .collect();
    let (lo, hi) = fit_bounds();
    let project = |p: &mut [f64]| {
        for i in 0..10 {
            p[i] = p[i].clamp(lo[i], hi[i]);
        }
    };

    // log y = log gain + gamma · log x on comfortably interior pixels.
    let mut p = ExpertTransform::identity().to_vec();
    for c in 0..3 {
        let (mut sx, mut sy, mut sxx, mut sxy, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (k, (&xv, &yv)) in x.plane(c).iter().zip(y.plane(c)).enumerate() {
            if mask[c * hw + k] && xv > 0.02 && yv > 0.02 {
                let (lx, ly) = ((xv as f64).ln(), (yv as f64).ln());
                sx += lx;
                sy += ly;
                sxx += lx * lx;
                sxy += lx * ly;
                n += 1.0;
            }
        }
        let den = n * sxx - sx * sx;
        if n >= 2.0 && den.abs() > 1e-12 {
            let gamma = (n * sxy - sx * sy) / den;
            let log_gain = (sy - gamma * sx) / n;
            p[c] = log_gain.exp();
            p[3 + c] = gamma;
        }
    }
    project(&mut p);

    let sse = |p: &[f64]| residuals(x, y, p, &mask, false).0.iter().map(|r| r * r).sum::<f64>();
    let mut cost = sse(&p);
    let mut mu = 1e-3;
    for _ in 0..200 {
        let (r, jac) = residuals(x, y, &p, &mask, true);
        if r.is_empty() {
            return Err(Error::Conditioning("every reference pixel is clipped".into()));
        }
        let mut jtj = DMatrix::<f64>::zeros(10, 10);
        let mut jtr = DVector::<f64>::zeros(10);
        for (row, ri) in jac.iter().zip(&r) {
            for a in 0..10 {
                if row[a] == 0.0 {
                    continue;
                }
                jtr[a] += row[a] * ri;
                for b in 0..10 {
                    jtj[(a, b)] += row[a] * row[b];
                }
            }
        }
        let mut improved = false;
        for _ in 0..20 {
            let mut damped = jtj.clone();
            for a in 0..10 {
                damped[(a, a)] += mu * (jtj[(a, a)] + 1e-9);
            }
            let Some(delta) = damped.cholesky().map(|ch| ch.solve(&jtr)) else {
                mu *= 10.0;
                continue;
            };
            let mut cand: Vec<f64> = p.iter().zip(delta.iter()).map(|(a, d)| a - d).collect();
            project(&mut cand);
            let c = sse(&cand);
            if c < cost {
                let rel = (cost - c) / cost.max(1e-300);
                p = cand;
                cost = c;
                mu = (mu * 0.3).max(1e-12);
                improved = rel > 1e-14;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::Conditioning("fit diverged".into()));
    }
    Ok(ExpertTransform::from_slice(&p))
}
