//! Generates a synthetic expert dataset and trains on it.
//!
//! ```text
//! cargo run --release --example synthetic_experiment -- [--quick] [DIR]
//! ```
//!
//! Re-running on the same directory resumes or reuses the run. Prints the
//! held-out PSNR of the progressively extracted style at the end.

use std::path::PathBuf;

use tonestyle::checkpoint::load_checkpoint;
use tonestyle::encoder::progressive_extract;
use tonestyle::experiment::{run_synthetic_experiment, SyntheticExperiment};
use tonestyle::metrics::psnr;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut quick = false;
    let mut dir = None;
    for arg in std::env::args().skip(1) {
        if arg == "--quick" {
            quick = true;
        } else {
            dir = Some(PathBuf::from(arg));
        }
    }
    let exp = if quick {
        SyntheticExperiment::quick()
    } else {
        SyntheticExperiment::desk()
    };
    let dir = dir.unwrap_or_else(|| PathBuf::from(format!("target/tmp/synthetic-{}", exp.fingerprint())));
    println!("experiment directory: {}", dir.display());

    let every = (exp.train.total_iterations / 40).max(1);
    let started = std::time::Instant::now();
    let run = run_synthetic_experiment(&dir, &exp, |r| {
        if r.iteration % every == 0 {
            println!(
                "iter {:>6}  l_ret {:.4}  l_nll {:>9.3}  ({:.0}s)",
                r.iteration,
                r.retouching_loss,
                r.nll_loss,
                started.elapsed().as_secs_f64()
            );
        }
    })?;

    let model = load_checkpoint(&run.outcome.checkpoint)?.model;
    let enc = model.encoder()?;
    let test = run.test_pairs()?;
    let mut total = 0.0;
    for p in &test {
        let trace = progressive_extract(&p.input, &p.reference, enc, &model.retouch)?;
        total += psnr(trace.final_output(), &p.reference)?;
    }
    println!(
        "held-out PSNR with extracted styles: {:.2} dB over {} images",
        total / test.len() as f64,
        test.len()
    );
    Ok(())
}
