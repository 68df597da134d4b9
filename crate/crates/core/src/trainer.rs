//! Joint training of the retoucher, the style encoder and the flow.
//!
//! Total loss per batch is `L_ret + λ · L_nll`, both averaged over the
//! batch. `L_ret` sums the mean absolute error of every progressive step's
//! unclamped output. `L_nll` scores the final corrected style under the
//! flow; the style entering the flow is treated as data, so the likelihood
//! term trains only the flow and its condition extractor.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::TrainConfig;
use crate::encoder::ProgressiveTrace;
use crate::error::{Error, Result};
use crate::flow::nll_from;
use crate::image::Image;
use crate::model::Model;
use crate::nn::{Adam, ParamSet};
use crate::real::Real;
use crate::synth::{random_crop_pair, Pair};

/// Losses of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(rename = "iter")]
    pub iteration: u64,
    #[serde(rename = "l_ret")]
    pub retouching_loss: f64,
    #[serde(rename = "l_nll")]
    pub nll_loss: f64,
    #[serde(rename = "l_total")]
    pub total_loss: f64,
}

/// `Σ_t mean |Ŷ⁽ᵗ⁾ − Y|`.
pub fn retouching_loss<T: Real>(trace: &ProgressiveTrace<T>, y: &Image<T>) -> Result<f64> {
    let mut total = 0.0;
    for out in &trace.outputs {
        out.ensure_same_shape(y, "retouching loss")?;
        total += l1_mean(out.data(), y.data());
    }
    Ok(total)
}

fn l1_mean<T: Real>(a: &[T], b: &[T]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(p, q)| (*p - *q).abs().as_f64()).sum();
    s / a.len().max(1) as f64
}

/// Loss components of a batch, plus the final styles that fed the flow.
#[derive(Debug, Clone)]
pub struct BatchLoss<T> {
    pub retouching: f64,
    pub nll: f64,
    pub total: f64,
    pub final_styles: Vec<Vec<T>>,
}

/// Final corrected styles for a batch (no gradients).
pub fn final_styles<T: Real>(model: &Model<T>, batch: &[(Image<T>, Image<T>)]) -> Result<Vec<Vec<T>>> {
    let enc = model.encoder()?;
    batch
        .iter()
        .map(|(x, y)| {
            Ok(crate::encoder::progressive_extract(x, y, enc, &model.retouch)?
                .final_style()
                .0
                .clone())
        })
        .collect()
}

/// Batch loss and, when `grad` is given, its gradient accumulated into
/// `grad` (which should start zeroed).
///
/// `nll_styles` replaces the styles scored by the likelihood term; the
/// gradient is identical either way because that input is not
/// differentiated. Supplying them makes the loss a function whose exact
/// derivative is the returned gradient, which is what finite-difference
/// checks need.
pub fn batch_loss<T: Real>(
    model: &Model<T>,
    batch: &[(Image<T>, Image<T>)],
    lambda: f64,
    mut grad: Option<&mut Model<T>>,
    nll_styles: Option<&[Vec<T>]>,
) -> Result<BatchLoss<T>> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("empty batch".into()));
    }
    let enc = model.encoder()?;
    let g = &model.retouch;
    let flow = model.flow.prepare()?;
    let scale = 1.0 / batch.len() as f64;
    let mut out = BatchLoss {
        retouching: 0.0,
        nll: 0.0,
        total: 0.0,
        final_styles: Vec::with_capacity(batch.len()),
    };
    let d = model.style_dim();

    for (b, (x, y)) in batch.iter().enumerate() {
        x.ensure_same_shape(y, "training pair")?;
        let mut s = vec![T::zero(); d];
        let mut current = x.clone();
        let mut enc_caches = Vec::with_capacity(enc.steps.len());
        let mut ret_caches = Vec::with_capacity(enc.steps.len());
        let mut outputs: Vec<Vec<T>> = Vec::with_capacity(enc.steps.len());
        for step in &enc.steps {
            let (e, ec) = step.forward_cached(&current.clamped(), y)?;
            for (a, v) in s.iter_mut().zip(&e) {
                *a += *v;
            }
            let (yhat, rc) = g.forward_pixels(x.data(), &s)?;
            current = Image::from_planar(x.height(), x.width(), yhat.clone())?;
            enc_caches.push(ec);
            ret_caches.push(rc);
            outputs.push(yhat);
        }
        let l_ret: f64 = outputs.iter().map(|o| l1_mean(o, y.data())).sum();

        let s_nll = match nll_styles {
            Some(v) => v[b].clone(),
            None => s.clone(),
        };
        let (c, ccache) = model.flow.condition.forward_cached(x);
        let (z, logdet, fcaches) = flow.forward_cached(&s_nll, &c)?;
        let l_nll = nll_from(&z, logdet).as_f64();
        if !l_ret.is_finite() || !l_nll.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss on batch item {b}: l_ret = {l_ret}, l_nll = {l_nll}"
            )));
        }
        out.retouching += scale * l_ret;
        out.nll += scale * l_nll;
        out.final_styles.push(s);

        let Some(grad) = grad.as_deref_mut() else {
            continue;
        };

        // Likelihood: flow and condition extractor only.
        if lambda != 0.0 {
            let w = T::lit(lambda * scale);
            let dz: Vec<T> = z.iter().map(|v| *v * w).collect();
            let (_ds_blocked, dc) = flow.backward(&fcaches, &dz, -w, &mut grad.flow);
            model.flow.condition.backward(&ccache, &dc, &mut grad.flow.condition);
        }

        // Progressive reconstruction, newest step first.
        let n = outputs.len();
        let per_elem = T::lit(scale / y.data().len() as f64);
        let genc = grad.encoder.as_mut().expect("gradient mirrors model");
        let mut carry_ds = vec![T::zero(); d];
        let mut from_next: Option<Vec<T>> = None;
        for t in (0..n).rev() {
            let mut dyhat: Vec<T> = outputs[t]
                .iter()
                .zip(y.data())
                .map(|(o, r)| {
                    let diff = *o - *r;
                    if diff > T::zero() {
                        per_elem
                    } else if diff < T::zero() {
                        -per_elem
                    } else {
                        T::zero()
                    }
                })
                .collect();
            if let Some(extra) = from_next.take() {
                for (a, v) in dyhat.iter_mut().zip(extra) {
                    *a += v;
                }
            }
            let ds_g = g.backward(&ret_caches[t], &dyhat, &mut grad.retouch);
            for (a, v) in carry_ds.iter_mut().zip(ds_g) {
                *a += v;
            }
            let da = enc.steps[t].backward(&enc_caches[t], &carry_ds, &mut genc.steps[t]);
            if t > 0 {
                // Encoder input is clamp(Ŷ⁽ᵗ⁻¹⁾).
                let prev = &outputs[t - 1];
                from_next = Some(
                    da.into_iter()
                        .zip(prev)
                        .map(|(v, p)| {
                            if *p > T::zero() && *p < T::one() {
                                v
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                );
            }
        }
    }
    out.total = out.retouching + lambda * out.nll;
    Ok(out)
}

/// Owns the model, optimizer and gradient buffer of a run.
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub config: TrainConfig,
    pub iteration: u64,
    grad: Model<f32>,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::for_training(&config.model_config(), &mut rng)?;
        Ok(Self::from_parts(model, None, config, 0))
    }

    /// Continues from a training checkpoint; the checkpoint's optimizer
    /// state and iteration counter are kept.
    pub fn resume(ck: Checkpoint, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if ck.model.encoder.is_none() {
            return Err(Error::State("cannot resume from a deploy checkpoint".into()));
        }
        if ck.model.config != config.model_config() {
            return Err(Error::Config("checkpoint architecture differs from the config".into()));
        }
        Ok(Self::from_parts(ck.model, ck.optimizer, config, ck.iteration))
    }

    fn from_parts(model: Model<f32>, adam: Option<Adam<f32>>, config: &TrainConfig, iteration: u64) -> Self {
        let mut adam =
            adam.unwrap_or_else(|| Adam::new(&model, config.learning_rate, config.adam_beta1, config.adam_beta2));
        adam.lr = config.learning_rate;
        adam.beta1 = config.adam_beta1;
        adam.beta2 = config.adam_beta2;
        let mut grad = model.clone();
        grad.fill_zero();
        Self {
            model,
            adam,
            config: config.clone(),
            iteration,
            grad,
        }
    }

    /// Data-dependent actnorm initialization from a batch's final styles.
    /// A single-item batch has no spread to normalize by, so it leaves the
    /// actnorm layers at identity.
    pub fn initialize_flow(&mut self, batch: &[(Image, Image)]) -> Result<()> {
        if self.model.flow.initialized {
            return Ok(());
        }
        if batch.len() >= 2 {
            let styles = final_styles(&self.model, batch)?;
            let conds: Vec<Vec<f32>> = batch
                .iter()
                .map(|(x, _)| self.model.flow.condition.forward(x))
                .collect();
            self.model.flow.initialize(&styles, &conds)?;
        } else {
            self.model.flow.initialized = true;
        }
        Ok(())
    }

    /// One optimizer step on `batch`.
    pub fn training_step(&mut self, batch: &[(Image, Image)]) -> Result<LossReport> {
        self.initialize_flow(batch)?;
        self.grad.fill_zero();
        let loss = batch_loss(&self.model, batch, self.config.lambda, Some(&mut self.grad), None)
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("iteration {}: {msg}", self.iteration + 1)),
                other => other,
            })?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!(
                "iteration {}: non-finite loss (l_ret = {}, l_nll = {})",
                self.iteration + 1,
                loss.retouching,
                loss.nll
            )));
        }
        self.adam.step(&mut self.model, &self.grad);
        self.model.flow.project();
        self.iteration += 1;
        Ok(LossReport {
            iteration: self.iteration,
            retouching_loss: loss.retouching,
            nll_loss: loss.nll,
            total_loss: loss.total,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            iteration: self.iteration,
            train_config: Some(self.config.clone()),
            optimizer: Some(self.adam.clone()),
        }
    }
}

/// Batch for a given iteration: a pure function of `(seed, iteration)`, so
/// resumed runs see the same data as uninterrupted ones.
pub fn sample_batch(pairs: &[Pair], config: &TrainConfig, iteration: u64) -> Result<Vec<(Image, Image)>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no training pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(iteration.wrapping_add(1));
    (0..config.batch_size)
        .map(|_| {
            let p = &pairs[rng.random_range(0..pairs.len())];
            let size = config.crop_size.min(p.input.height()).min(p.input.width());
            random_crop_pair(&p.input, &p.reference, size, &mut rng)
        })
        .collect()
}

/// Mean per-pair loss over full images, without updating anything.
pub fn validation_loss(model: &Model<f32>, pairs: &[Pair], lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let b = [(p.input.clone(), p.reference.clone())];
        total += batch_loss(model, &b, lambda, None, None)?.total;
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Files written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub deploy_checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub final_iteration: u64,
}

pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const DEPLOY_CHECKPOINT: &str = "deploy.ckpt";

pub fn read_loss_log(path: &Path) -> Result<Vec<LossReport>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

fn write_loss_log(path: &Path, records: &[LossReport]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Periodic checkpoint path for an iteration.
pub fn periodic_checkpoint_path(out_dir: &Path, iteration: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{iteration:07}.ckpt"))
}

/// Trains until `config.total_iterations`, writing periodic and final
/// checkpoints plus the loss log into `out_dir`. With `resume`, continues
/// from that training checkpoint (its iteration counter is kept and the
/// log is truncated to match). `progress` sees every report.
pub fn train(
    pairs: &[Pair],
    config: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    mut progress: impl FnMut(&LossReport),
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no training pairs".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOSS_LOG_FILE);
    let (mut trainer, mut records) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let it = ck.iteration;
            let trainer = Trainer::resume(ck, config)?;
            let mut records = if log_path.exists() {
                read_loss_log(&log_path)?
            } else {
                Vec::new()
            };
            records.retain(|r| r.iteration <= it);
            (trainer, records)
        }
        None => (Trainer::new(config)?, Vec::new()),
    };
    write_loss_log(&log_path, &records)?;
    let mut log = std::fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    while trainer.iteration < config.total_iterations {
        let batch = sample_batch(pairs, config, trainer.iteration)?;
        let report = trainer.training_step(&batch)?;
        writeln!(log, "{}", serde_json::to_string(&report).expect("record serializes"))
            .map_err(|e| Error::io(&log_path, e))?;
        progress(&report);
        records.push(report);
        if trainer.iteration % config.checkpoint_interval == 0 && trainer.iteration < config.total_iterations {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            save_checkpoint(&periodic_checkpoint_path(out_dir, trainer.iteration), &trainer.checkpoint())?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    let ck = trainer.checkpoint();
    save_checkpoint(&final_path, &ck)?;
    let deploy_path = out_dir.join(DEPLOY_CHECKPOINT);
    save_checkpoint(
        &deploy_path,
        &Checkpoint {
            model: ck.model.deploy(),
            iteration: ck.iteration,
            train_config: ck.train_config.clone(),
            optimizer: None,
        },
    )?;
    Ok(TrainOutcome {
        checkpoint: final_path,
        deploy_checkpoint: deploy_path,
        loss_log: log_path,
        final_iteration: trainer.iteration,
    })
}
