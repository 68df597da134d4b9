//! The synthetic-expert experiment: generate a train/test split from one
//! expert, train on it, and keep everything in one directory.
//!
//! Running it again on the same directory reuses finished work: data that
//! is already on disk is loaded, an interrupted run resumes from its latest
//! periodic checkpoint, and a finished run returns immediately.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, sha256_hex};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::synth::{generate_synthetic_dataset, load_dataset, ExpertSpec, Pair, MANIFEST_FILE};
use crate::trainer::{train, LossReport, TrainOutcome, DEPLOY_CHECKPOINT, FINAL_CHECKPOINT, LOSS_LOG_FILE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticExperiment {
    pub spec: ExpertSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub data_seed: u64,
    pub train: TrainConfig,
}

impl SyntheticExperiment {
    /// 2000 training pairs, 64×64 crops, 20k iterations.
    pub fn desk() -> Self {
        Self {
            spec: ExpertSpec::warm(),
            n_train: 2000,
            n_test: 50,
            image_size: 72,
            data_seed: 2024,
            train: TrainConfig {
                batch_size: 8,
                crop_size: 64,
                total_iterations: 20_000,
                checkpoint_interval: 2_500,
                seed: 7,
                ..TrainConfig::default()
            },
        }
    }

    /// A few-minute variant for examples and smoke tests.
    pub fn quick() -> Self {
        Self {
            n_train: 64,
            n_test: 8,
            image_size: 40,
            train: TrainConfig {
                batch_size: 4,
                crop_size: 32,
                total_iterations: 300,
                checkpoint_interval: 100,
                learning_rate: 2e-4,
                ..Self::desk().train
            },
            ..Self::desk()
        }
    }

    /// Short stable identifier, usable as a directory name.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("experiment serializes");
        sha256_hex(&json)[..12].to_string()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub dir: PathBuf,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub outcome: TrainOutcome,
}

impl ExperimentRun {
    pub fn train_pairs(&self) -> Result<Vec<Pair>> {
        load_dataset(&self.train_manifest)?.load_all()
    }

    pub fn test_pairs(&self) -> Result<Vec<Pair>> {
        load_dataset(&self.test_manifest)?.load_all()
    }
}

const EXPERIMENT_FILE: &str = "experiment.json";

fn ensure_split(dir: &Path, exp: &SyntheticExperiment, split: &str, n: usize, seed: u64) -> Result<PathBuf> {
    let split_dir = dir.join(split);
    let manifest = split_dir.join(MANIFEST_FILE);
    if !manifest.exists() {
        generate_synthetic_dataset(std::slice::from_ref(&exp.spec), n, exp.image_size, seed, split, &split_dir)?;
    }
    Ok(manifest)
}

fn latest_periodic(dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let Some(it) = name
            .strip_prefix("ckpt_")
            .and_then(|r| r.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| it > *b) {
            best = Some((it, path));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Runs (or resumes, or reuses) the experiment in `dir`.
pub fn run_synthetic_experiment(
    dir: &Path,
    exp: &SyntheticExperiment,
    progress: impl FnMut(&LossReport),
) -> Result<ExperimentRun> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = dir.join(EXPERIMENT_FILE);
    if meta.exists() {
        let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let existing: SyntheticExperiment = serde_json::from_str(&text).map_err(|e| Error::format(&meta, e))?;
        if existing != *exp {
            return Err(Error::Config(format!(
                "{} holds a different experiment",
                dir.display()
            )));
        }
    } else {
        let text = serde_json::to_string_pretty(exp).expect("experiment serializes");
        std::fs::write(&meta, text).map_err(|e| Error::io(&meta, e))?;
    }
    let train_manifest = ensure_split(dir, exp, "train", exp.n_train, exp.data_seed)?;
    let test_manifest = ensure_split(dir, exp, "test", exp.n_test, exp.data_seed + 1)?;

    let final_path = dir.join(FINAL_CHECKPOINT);
    let deploy_path = dir.join(DEPLOY_CHECKPOINT);
    if final_path.exists() && deploy_path.exists() {
        let ck = load_checkpoint(&final_path)?;
        if ck.iteration == exp.train.total_iterations {
            return Ok(ExperimentRun {
                dir: dir.to_path_buf(),
                train_manifest,
                test_manifest,
                outcome: TrainOutcome {
                    checkpoint: final_path,
                    deploy_checkpoint: deploy_path,
                    loss_log: dir.join(LOSS_LOG_FILE),
                    final_iteration: ck.iteration,
                },
            });
        }
    }
    let pairs = load_dataset(&train_manifest)?.load_all()?;
    let resume = latest_periodic(dir)?;
    let outcome = train(&pairs, &exp.train, dir, resume.as_deref(), progress)?;
    Ok(ExperimentRun {
        dir: dir.to_path_buf(),
        train_manifest,
        test_manifest,
        outcome,
    })
}
