//! Clusters the latents of all training pairs into a small codebook and
//! compares one shared latent against best-of-K selection.

mod common;

use tonestyle::checkpoint::load_checkpoint;
use tonestyle::eval::{evaluate, Protocol};
use tonestyle::style_ops::{cluster_latents, encode_pair};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = common::scratch("example-model");
    let (ckpt, pairs) = common::quick_model(&dir)?;
    let model = load_checkpoint(&ckpt)?.model;

    let latents = pairs
        .iter()
        .map(|p| encode_pair(&model, &p.input, &p.reference).map(|(_, z)| z))
        .collect::<Result<Vec<_>, _>>()?;
    for k in [1, 2, 4] {
        let codebook = cluster_latents(&latents, k, 0)?;
        let single = evaluate(&model, &pairs, &Protocol::SingleLatent { codebook: codebook.clone(), center: 0 })?;
        let best = evaluate(&model, &pairs, &Protocol::BestOfK { codebook: codebook.clone() })?;
        let mut used = vec![0; k];
        for r in &best.rows {
            used[r.chosen_center.unwrap()] += 1;
        }
        println!(
            "K = {k}: center 0 for all {:.2} dB, best of K {:.2} dB, picks per center {used:?}",
            single.mean_psnr, best.mean_psnr
        );
        codebook.save(&dir.join(format!("codebook_k{k}.json")))?;
    }
    Ok(())
}
