use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tonestyle::error::Error;
use tonestyle::synth::{
    apply_expert_transform, fit_transform, generate_synthetic_dataset, load_dataset, render_base_image,
    synthesize_pair, DatasetManifest, ExpertSpec, ExpertTransform, Gaussian,
};

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "warm/input", "warm/reference", "cool/input", "cool/reference"] {
        let d = dir.join(sub);
        let mut names: Vec<_> = std::fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names.into_iter().filter(|p| p.is_file()) {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn regeneration_is_byte_identical() {
    let specs = [ExpertSpec::warm(), ExpertSpec::cool()];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&specs, 3, 20, 42, "train", a.path()).unwrap();
    generate_synthetic_dataset(&specs, 3, 20, 42, "train", b.path()).unwrap();
    let fa = files(a.path());
    assert_eq!(fa.len(), 13);
    assert_eq!(fa, files(b.path()));

    let c = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&specs, 3, 20, 43, "train", c.path()).unwrap();
    assert_ne!(fa, files(c.path()));

    let bad = || generate_synthetic_dataset(&specs, 0, 20, 1, "train", a.path());
    assert!(matches!(bad(), Err(Error::Input(_))));
    assert!(matches!(
        generate_synthetic_dataset(&specs, 1, 8, 1, "train", a.path()),
        Err(Error::Input(_))
    ));
}

#[test]
fn loaded_pairs_match_memory_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExpertSpec::warm();
    let manifest = generate_synthetic_dataset(std::slice::from_ref(&spec), 2, 24, 9, "test", dir.path()).unwrap();
    let ds = load_dataset(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(ds.manifest, manifest);
    assert_eq!(ds.manifest.experts(), vec!["warm".to_string()]);
    for i in 0..2 {
        let mem = synthesize_pair(&spec, 0, i, 24, 9);
        let disk = ds.load_pair(i).unwrap();
        assert_eq!(disk.input, mem.input);
        assert_eq!(disk.reference, mem.reference);
        assert_eq!(disk.transform, Some(mem.transform));
        assert_eq!(disk.expert, "warm");
    }
    assert!(matches!(ds.load_pair(2), Err(Error::Index { index: 2, len: 2 })));
}

#[test]
fn missing_files_and_empty_manifests_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&[ExpertSpec::cool()], 2, 16, 1, "train", dir.path()).unwrap();
    let gone = dir.path().join("cool/reference/00001.png");
    std::fs::remove_file(&gone).unwrap();
    let ds = load_dataset(&dir.path().join("manifest.json")).unwrap();
    assert!(ds.load_pair(0).is_ok());
    let err = ds.load_all().unwrap_err().to_string();
    assert!(err.contains("00001.png"), "{err}");

    let empty = DatasetManifest {
        root: ".".into(),
        split: "train".into(),
        seed: None,
        specs: vec![],
        entries: vec![],
    };
    let path = dir.path().join("empty.json");
    empty.write(&path).unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::EmptyDataset(_))));
}

#[test]
fn spec_files_accept_one_or_many() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one.json");
    std::fs::write(&one, serde_json::to_string(&ExpertSpec::warm()).unwrap()).unwrap();
    assert_eq!(ExpertSpec::load(&one).unwrap(), vec![ExpertSpec::warm()]);
    let many = dir.path().join("many.json");
    std::fs::write(&many, serde_json::to_string(&[ExpertSpec::warm(), ExpertSpec::cool()]).unwrap()).unwrap();
    assert_eq!(ExpertSpec::load(&many).unwrap().len(), 2);
    let mut bad = ExpertSpec::cool();
    bad.gamma[1] = Gaussian::new(1.0, -0.1);
    std::fs::write(&one, serde_json::to_string(&bad).unwrap()).unwrap();
    assert!(matches!(ExpertSpec::load(&one), Err(Error::Parameter(_))));
}

#[test]
fn zero_spread_spec_gives_one_fitted_transform() {
    let planted = ExpertTransform {
        gain: [1.05, 0.9, 1.15],
        gamma: [0.9, 1.1, 1.25],
        lift: [0.01, 0.0, -0.02],
        wb_shift: 0.03,
    };
    let spec = ExpertSpec::deterministic("fixed", &planted);
    let fits: Vec<ExpertTransform> = (0..4)
        .map(|i| {
            let p = synthesize_pair(&spec, 0, i, 64, 3);
            assert_eq!(p.transform, planted);
            fit_transform(&p.input, &p.reference).unwrap()
        })
        .collect();
    for f in &fits {
        for c in 0..3 {
            assert!((f.gain[c] - fits[0].gain[c]).abs() < 1e-4, "{f:?}");
        }
        assert!(f.max_abs_diff(&planted) < 1e-3, "{f:?}");
    }
}

#[test]
fn brighter_inputs_get_lower_gain() {
    let spec = ExpertSpec::warm();
    let (mut lum, mut gain) = (Vec::new(), Vec::new());
    for i in 0..500 {
        let p = synthesize_pair(&spec, 0, i, 24, 77);
        lum.push(p.input.mean_luminance());
        gain.push(p.transform.gain.iter().sum::<f64>() / 3.0);
    }
    let n = lum.len() as f64;
    let (ml, mg) = (lum.iter().sum::<f64>() / n, gain.iter().sum::<f64>() / n);
    let cov: f64 = lum.iter().zip(&gain).map(|(l, g)| (l - ml) * (g - mg)).sum();
    let vl: f64 = lum.iter().map(|l| (l - ml).powi(2)).sum();
    let vg: f64 = gain.iter().map(|g| (g - mg).powi(2)).sum();
    let r = cov / (vl * vg).sqrt();
    assert!(r < -0.3, "correlation {r}");
}

fn planted() -> impl Strategy<Value = ExpertTransform> {
    (
        prop::array::uniform3(0.7f64..1.4),
        prop::array::uniform3(0.6f64..1.6),
        prop::array::uniform3(-0.05f64..0.05),
        -0.05f64..0.05,
    )
        .prop_map(|(gain, gamma, lift, wb_shift)| ExpertTransform { gain, gamma, lift, wb_shift })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fit_recovers_interior_transforms(t in planted(), seed in 0u64..1000) {
        let x = render_base_image(48, 48, &mut ChaCha8Rng::seed_from_u64(seed));
        let y = apply_expert_transform(&x, &t);
        let fit = fit_transform(&x, &y).unwrap();
        prop_assert!(fit.validate().is_ok());
        prop_assert!(fit.max_abs_diff(&t) < 1e-3, "{:?} vs {:?}", fit, t);
    }

    #[test]
    fn fits_stay_in_range_for_unrelated_pairs(a in 0u64..1000, b in 0u64..1000) {
        let x = render_base_image(32, 32, &mut ChaCha8Rng::seed_from_u64(a));
        let y = render_base_image(32, 32, &mut ChaCha8Rng::seed_from_u64(b + 5000));
        let fit = fit_transform(&x, &y).unwrap();
        prop_assert!(fit.validate().is_ok());
    }
}
