//! Interpolates between two expert latents and sweeps one latent
//! dimension, writing both strips as PNGs.

mod common;

use tonestyle::checkpoint::load_checkpoint;
use tonestyle::image::Image;
use tonestyle::style_ops::{adjust_dimension, average_latent, interpolate, AverageSpace};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = common::scratch("example-model");
    let (ckpt, pairs) = common::quick_model(&dir)?;
    let model = load_checkpoint(&ckpt)?.model;
    let by = |e: &str| pairs.iter().filter(|p| p.expert == e).cloned().collect::<Vec<_>>();
    let warm = average_latent(&by("warm"), &model, AverageSpace::Latent)?;
    let cool = average_latent(&by("cool"), &model, AverageSpace::Latent)?;
    let x = &pairs[3].input;

    let mut strip = Vec::new();
    for k in 0..=6 {
        let t = k as f64 / 6.0;
        let img = model.render(x, &interpolate(&warm, &cool, t)?)?;
        let m = img.channel_means();
        println!("t = {t:.2}: mean rgb ({:.3}, {:.3}, {:.3})", m[0], m[1], m[2]);
        strip.push(img);
    }
    Image::hstack(&strip)?.write_png(&dir.join("interpolation.png"), false)?;

    let mut sweep = Vec::new();
    for delta in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        sweep.push(model.render(x, &adjust_dimension(&warm, 0, delta)?)?);
    }
    Image::hstack(&sweep)?.write_png(&dir.join("dimension0.png"), false)?;
    println!("wrote interpolation.png and dimension0.png in {}", dir.display());
    Ok(())
}
