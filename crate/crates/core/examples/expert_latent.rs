//! Fits one latent per expert, by averaging encoded latents and by direct
//! optimization, and scores both on that expert's pairs.

mod common;

use tonestyle::checkpoint::load_checkpoint;
use tonestyle::style_ops::{average_latent, latent_objective, optimize_latent, AverageSpace, OptimizeConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = common::scratch("example-model");
    let (ckpt, pairs) = common::quick_model(&dir)?;
    let model = load_checkpoint(&ckpt)?.model;

    for expert in ["warm", "cool"] {
        let subset: Vec<_> = pairs.iter().filter(|p| p.expert == expert).cloned().collect();
        let avg = average_latent(&subset, &model, AverageSpace::Latent)?;
        let via_style = average_latent(&subset, &model, AverageSpace::Style)?;
        let (l_avg, _) = latent_objective(&subset, &avg, &model, false)?;
        let (l_style, _) = latent_objective(&subset, &via_style, &model, false)?;
        let opt = optimize_latent(&subset, &avg, &model, &OptimizeConfig { steps: 60, ..Default::default() })?;
        println!(
            "{expert:>5}: L1 averaged {l_avg:.4}, style-averaged {l_style:.4}, optimized {:.4} (from {:.4})",
            opt.objective, opt.initial_objective
        );
    }
    Ok(())
}
