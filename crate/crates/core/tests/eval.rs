mod common;

use std::collections::BTreeMap;

use tonestyle::config::TrainConfig;
use tonestyle::eval::{evaluate, EvalReport, Protocol, ProtocolKind};
use tonestyle::style_ops::{average_latent, AverageSpace, CodebookSource, LatentCodebook};
use tonestyle::synth::{load_dataset, Pair};
use tonestyle::trainer::train;

fn split(pairs: &[Pair], expert: &str) -> Vec<Pair> {
    pairs.iter().filter(|p| p.expert == expert).cloned().collect()
}

/// A model trained on two experts puts each expert's own latent first on
/// that expert's held-out images.
#[test]
fn per_expert_latents_win_on_their_own_expert() {
    let dir = tempfile::tempdir().unwrap();
    let train_pairs = load_dataset(&common::write_dataset(&dir.path().join("train"), 12, 32, 3))
        .unwrap()
        .load_all()
        .unwrap();
    let test_pairs = load_dataset(&common::write_dataset(&dir.path().join("test"), 6, 32, 4))
        .unwrap()
        .load_all()
        .unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        crop_size: 32,
        total_iterations: 1500,
        checkpoint_interval: 10_000,
        ..common::tiny_config()
    };
    let out = train(&train_pairs, &cfg, &dir.path().join("run"), None, |_| {}).unwrap();
    let model = tonestyle::checkpoint::load_checkpoint(&out.checkpoint).unwrap().model;

    let mut codebooks = BTreeMap::new();
    for expert in ["warm", "cool"] {
        let z = average_latent(&split(&train_pairs, expert), &model, AverageSpace::Latent).unwrap();
        codebooks.insert(
            expert.to_string(),
            LatentCodebook::new(vec![z], CodebookSource::Averaged, None, None).unwrap(),
        );
    }
    let report = evaluate(&model, &test_pairs, &Protocol::PerExpert { codebooks: codebooks.clone() }).unwrap();
    assert_eq!(report.protocol, ProtocolKind::PerExpert);
    let cross = report.cross.clone().unwrap();
    assert!(cross["warm"]["warm"] > cross["cool"]["warm"]);
    assert!(cross["cool"]["cool"] > cross["warm"]["cool"]);
    let diagonal = (cross["warm"]["warm"] + cross["cool"]["cool"]) / 2.0;
    assert!((report.mean_psnr - diagonal).abs() < 1e-9);

    // A single-latent run with one expert's latent reproduces one row.
    let warm_only = evaluate(
        &model,
        &split(&test_pairs, "warm"),
        &Protocol::SingleLatent { codebook: codebooks["warm"].clone(), center: 0 },
    )
    .unwrap();
    assert!((warm_only.mean_psnr - cross["warm"]["warm"]).abs() < 1e-9);

    // Written reports read back with the same aggregate.
    let path = dir.path().join("report.jsonl");
    report.write(&path).unwrap();
    let (rows, agg) = EvalReport::read(&path).unwrap();
    assert_eq!(rows, report.rows);
    assert_eq!(agg["count"], 12);
    assert!((agg["psnr"].as_f64().unwrap() - report.mean_psnr).abs() < 1e-12);
    assert!(agg["lpips"].is_null());
    assert!(agg["cross_psnr"]["cool"]["warm"].is_number());

    let extracted = evaluate(&model, &test_pairs, &Protocol::Extracted).unwrap();
    assert!(extracted.mean_psnr > report.mean_psnr - 3.0, "{} vs {}", extracted.mean_psnr, report.mean_psnr);
}
