//! Writes a small synthetic dataset for two experts and recovers each
//! pair's tone transform by least squares.

use tonestyle::synth::{fit_transform, generate_synthetic_dataset, load_dataset, ExpertSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("tonestyle-examples/dataset");
    let manifest = generate_synthetic_dataset(&[ExpertSpec::warm(), ExpertSpec::cool()], 4, 64, 1, "train", &dir)?;
    println!("{} pairs for experts {:?} in {}", manifest.entries.len(), manifest.experts(), dir.display());

    let ds = load_dataset(&dir.join("manifest.json"))?;
    for pair in ds.load_all()? {
        let fit = fit_transform(&pair.input, &pair.reference)?;
        let planted = pair.transform.expect("generated pairs record their transform");
        println!(
            "{:<22} gain {:.3?}  gamma {:.3?}  max field error {:.1e}",
            pair.id,
            fit.gain,
            fit.gamma,
            fit.max_abs_diff(&planted)
        );
    }
    Ok(())
}
