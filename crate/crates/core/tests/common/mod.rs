#![allow(dead_code)]

use std::path::{Path, PathBuf};

use tonestyle::config::TrainConfig;
use tonestyle::synth::{generate_synthetic_dataset, ExpertSpec};
use tonestyle::trainer::train;

/// Small two-expert dataset plus a briefly trained model.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub deploy: PathBuf,
    pub config: TrainConfig,
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        crop_size: 16,
        learning_rate: 1e-3,
        total_iterations: 30,
        checkpoint_interval: 10,
        seed: 1,
        style_dim: 4,
        flow_steps: 2,
        ..TrainConfig::default()
    }
}

pub fn write_dataset(dir: &Path, per_expert: usize, size: usize, seed: u64) -> PathBuf {
    generate_synthetic_dataset(&[ExpertSpec::warm(), ExpertSpec::cool()], per_expert, size, seed, "train", dir).unwrap();
    dir.join("manifest.json")
}

pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&dir.path().join("data"), 4, 24, 5);
    let pairs = tonestyle::synth::load_dataset(&manifest).unwrap().load_all().unwrap();
    let config = tiny_config();
    let run = dir.path().join("run");
    let outcome = train(&pairs, &config, &run, None, |_| {}).unwrap();
    Fixture {
        manifest,
        checkpoint: outcome.checkpoint,
        deploy: outcome.deploy_checkpoint,
        config,
        dir,
    }
}

/// Process-wide shared fixture for tests that only read it.
pub fn shared() -> &'static Fixture {
    static F: std::sync::OnceLock<Fixture> = std::sync::OnceLock::new();
    F.get_or_init(fixture)
}
