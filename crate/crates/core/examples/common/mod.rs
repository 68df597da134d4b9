#![allow(dead_code)]

use std::path::{Path, PathBuf};

use tonestyle::config::TrainConfig;
use tonestyle::synth::{generate_synthetic_dataset, load_dataset, ExpertSpec, Pair};
use tonestyle::trainer::train;

/// Small two-expert dataset and a briefly trained model under `dir`.
/// Returns the training checkpoint and the loaded pairs. Reuses an
/// existing run in the same directory.
pub fn quick_model(dir: &Path) -> Result<(PathBuf, Vec<Pair>), Box<dyn std::error::Error>> {
    let data = dir.join("data");
    let manifest = data.join("manifest.json");
    if !manifest.exists() {
        generate_synthetic_dataset(&[ExpertSpec::warm(), ExpertSpec::cool()], 12, 32, 3, "train", &data)?;
    }
    let pairs = load_dataset(&manifest)?.load_all()?;
    let run = dir.join("run");
    let ckpt = run.join("final.ckpt");
    if !ckpt.exists() {
        let cfg = TrainConfig {
            batch_size: 4,
            crop_size: 32,
            learning_rate: 1e-3,
            total_iterations: 400,
            checkpoint_interval: 100,
            style_dim: 8,
            flow_steps: 4,
            ..TrainConfig::default()
        };
        println!("training a small model in {} ...", run.display());
        train(&pairs, &cfg, &run, None, |r| {
            if r.iteration % 100 == 0 {
                println!("  iter {:>4}  l_ret {:.4}  l_nll {:.3}", r.iteration, r.retouching_loss, r.nll_loss);
            }
        })?;
    }
    Ok((ckpt, pairs))
}

/// `<system temp>/tonestyle-examples/<name>`.
pub fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("tonestyle-examples").join(name);
    std::fs::create_dir_all(&dir).expect("create scratch directory");
    dir
}
