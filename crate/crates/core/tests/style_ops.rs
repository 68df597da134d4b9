mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tonestyle::checkpoint::{encode_checkpoint, load_checkpoint};
use tonestyle::config::ModelConfig;
use tonestyle::error::Error;
use tonestyle::flow::LatentVector;
use tonestyle::model::Model;
use tonestyle::style_ops::{
    average_latent, best_of_k, cluster_latents, encode_pair, kmeans, latent_objective, optimize_latent,
    sample_latents, sample_retouch, sample_retouch_with_latents, AverageSpace, CodebookSource, LatentCodebook,
    OptimizeConfig,
};
use tonestyle::synth::{load_dataset, Pair};

fn pairs() -> Vec<Pair> {
    load_dataset(&common::shared().manifest).unwrap().load_all().unwrap()
}

fn random_model(seed: u64) -> Model {
    Model::random(&ModelConfig::tiny(4, 2), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn sampling_is_seeded_and_diverse() {
    let model = random_model(1);
    let x = &pairs()[0].input;
    let a = sample_retouch_with_latents(x, 16, 5, &model).unwrap();
    let b = sample_retouch_with_latents(x, 16, 5, &model).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iter().map(|(z, _)| z.clone()).collect::<Vec<_>>(), sample_latents(4, 16, 5));
    for i in 0..16 {
        for j in 0..i {
            assert_ne!(a[i].1, a[j].1, "samples {i} and {j} coincide");
        }
    }
    assert_ne!(sample_retouch(x, 1, 6, &model).unwrap()[0], a[0].1);
    for (z, img) in &a {
        assert_eq!(&model.render(x, z).unwrap(), img);
    }

    let mut fresh = Model::for_training(&ModelConfig::tiny(4, 2), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(matches!(sample_retouch(x, 1, 0, &fresh), Err(Error::State(_))));
    fresh.flow.initialized = true;
    assert_eq!(sample_retouch(x, 3, 0, &fresh).unwrap().len(), 3);
}

#[test]
fn zero_latent_renders_through_the_inverse_flow() {
    let model = random_model(2);
    let x = &pairs()[1].input;
    let z = LatentVector::zeros(4);
    let s = model.latent_to_style(x, &z).unwrap();
    assert_eq!(model.render(x, &z).unwrap(), model.retouch.retouch(x, &s).unwrap());
    let back = model.style_to_latent(x, &s).unwrap();
    assert!(back.iter().all(|v| v.abs() < 1e-5));
}

#[test]
fn averaging_latents() {
    let f = common::shared();
    let model = load_checkpoint(&f.checkpoint).unwrap().model;
    let pairs = pairs();
    let (_, z0) = encode_pair(&model, &pairs[0].input, &pairs[0].reference).unwrap();
    assert_eq!(average_latent(&pairs[..1], &model, AverageSpace::Latent).unwrap(), z0);
    assert_eq!(average_latent(&pairs[..1], &model, AverageSpace::Style).unwrap(), z0);

    let forward = average_latent(&pairs, &model, AverageSpace::Latent).unwrap();
    let mut reversed = pairs.clone();
    reversed.reverse();
    let backward = average_latent(&reversed, &model, AverageSpace::Latent).unwrap();
    for (a, b) in forward.iter().zip(backward.iter()) {
        assert!((a - b).abs() < 1e-6);
    }
    let style = average_latent(&pairs, &model, AverageSpace::Style).unwrap();
    assert_eq!(style.len(), 4);
    assert!(style.is_finite());
    assert!(matches!(average_latent(&[], &model, AverageSpace::Latent), Err(Error::Input(_))));
    let deploy = load_checkpoint(&f.deploy).unwrap().model;
    assert!(matches!(average_latent(&pairs, &deploy, AverageSpace::Latent), Err(Error::State(_))));
}

#[test]
fn optimization_keeps_the_best_iterate_and_freezes_weights() {
    let f = common::shared();
    let model = load_checkpoint(&f.deploy).unwrap().model;
    let before = encode_checkpoint(&load_checkpoint(&f.deploy).unwrap());
    let pairs = pairs();
    let cfg = OptimizeConfig { steps: 25, ..OptimizeConfig::default() };
    let init = LatentVector::zeros(4);
    let res = optimize_latent(&pairs[..3], &init, &model, &cfg).unwrap();
    assert_eq!(res.history.len(), 26);
    assert_eq!(res.initial_objective, res.history[0]);
    assert!(res.objective <= res.initial_objective);
    assert_eq!(res.objective, res.history.iter().copied().fold(f64::INFINITY, f64::min));
    let (check, _) = latent_objective(&pairs[..3], &res.latent, &model, false).unwrap();
    assert_eq!(check, res.objective);
    assert_eq!(optimize_latent(&pairs[..3], &init, &model, &cfg).unwrap(), res);
    let after = tonestyle::checkpoint::Checkpoint { model, ..load_checkpoint(&f.deploy).unwrap() };
    assert_eq!(encode_checkpoint(&after), before);

    let model = &after.model;
    assert!(matches!(
        optimize_latent(&pairs, &LatentVector::zeros(3), model, &cfg),
        Err(Error::Shape(_))
    ));
}

#[test]
fn objective_gradient_points_downhill() {
    let model = random_model(4);
    let pairs = pairs();
    let z = [0.3f32, -0.2, 0.5, 0.1];
    let (f0, g) = latent_objective(&pairs[..2], &z, &model, true).unwrap();
    let norm: f32 = g.iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!(norm > 0.0);
    let h = 1e-3f32;
    let mut fd = Vec::new();
    for j in 0..4 {
        let mut up = z;
        up[j] += h;
        let mut dn = z;
        dn[j] -= h;
        let fu = latent_objective(&pairs[..2], &up, &model, false).unwrap().0;
        let fl = latent_objective(&pairs[..2], &dn, &model, false).unwrap().0;
        fd.push(((fu - fl) / (2.0 * h as f64)) as f32);
    }
    let dot: f32 = fd.iter().zip(&g).map(|(a, b)| a * b).sum();
    let fd_norm: f32 = fd.iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!(dot / (norm * fd_norm) > 0.95, "fd {fd:?} analytic {g:?}");
    let step: Vec<f32> = z.iter().zip(&g).map(|(a, b)| a - 1e-2 * b / norm).collect();
    assert!(latent_objective(&pairs[..2], &step, &model, false).unwrap().0 < f0);
}

#[test]
fn best_of_k_finds_the_planted_center() {
    let model = random_model(6);
    let pairs = pairs();
    let x = &pairs[2].input;
    let centers = sample_latents(4, 5, 21);
    for planted in 0..5 {
        let y = model.render(x, &centers[planted]).unwrap();
        let cb = LatentCodebook::new(centers.clone(), CodebookSource::Explicit, None, None).unwrap();
        let (img, j, score) = best_of_k(x, &y, &cb, &model).unwrap();
        assert_eq!(j, planted);
        assert_eq!(img, y);
        assert!(score.is_infinite());
    }
    // Ties go to the first center.
    let dup = LatentCodebook::new(vec![centers[1].clone(); 3], CodebookSource::Explicit, None, None).unwrap();
    assert_eq!(best_of_k(x, &pairs[2].reference, &dup, &model).unwrap().1, 0);
}

#[test]
fn clustering_latents() {
    let latents = sample_latents(4, 6, 3);
    let cb = cluster_latents(&latents, 6, 0).unwrap();
    assert_eq!((cb.k, cb.d, cb.source, cb.seed), (6, 4, CodebookSource::Clustered, Some(0)));
    let mut want: Vec<Vec<f32>> = latents.iter().map(|z| z.0.clone()).collect();
    let mut got: Vec<Vec<f32>> = cb.centers.iter().map(|z| z.0.clone()).collect();
    want.sort_by(|a, b| a.partial_cmp(b).unwrap());
    got.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(want, got);
    assert_eq!(cluster_latents(&latents, 3, 9).unwrap(), cluster_latents(&latents, 3, 9).unwrap());

    let one = cluster_latents(&latents, 1, 0).unwrap();
    let mean = tonestyle::style_ops::mean_latent(&latents).unwrap();
    for (a, b) in one.centers[0].iter().zip(mean.iter()) {
        assert!((a - b).abs() < 1e-6);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cb.json");
    cb.save(&path).unwrap();
    assert_eq!(LatentCodebook::load(&path).unwrap(), cb);
    let text = std::fs::read_to_string(&path).unwrap().replace("\"K\": 6", "\"K\": 5");
    std::fs::write(&path, text).unwrap();
    assert!(LatentCodebook::load(&path).is_err());
    assert!(matches!(cb.center(6), Err(Error::Index { index: 6, len: 6 })));
}

#[test]
fn kmeans_on_separated_blobs() {
    let mut points = Vec::new();
    for (cx, cy) in [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)] {
        for k in 0..10 {
            let a = k as f64 * 0.7;
            points.push(vec![cx + a.cos() * 0.5, cy + a.sin() * 0.5]);
        }
    }
    for seed in 0..10 {
        let km = kmeans(&points, 3, seed).unwrap();
        for blob in 0..3 {
            let first = km.assignments[blob * 10];
            assert!(km.assignments[blob * 10..blob * 10 + 10].iter().all(|&a| a == first));
        }
        assert!(km.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert_eq!(*km.inertia_history.last().unwrap(), km.inertia);
    }
}
