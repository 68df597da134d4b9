//! Renders several random styles of one image and writes them side by side.

mod common;

use tonestyle::checkpoint::load_checkpoint;
use tonestyle::image::Image;
use tonestyle::metrics::psnr;
use tonestyle::style_ops::sample_retouch_with_latents;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = common::scratch("example-model");
    let (ckpt, pairs) = common::quick_model(&dir)?;
    let model = load_checkpoint(&ckpt)?.model;
    let x = &pairs[0].input;

    let samples = sample_retouch_with_latents(x, 6, 11, &model)?;
    for (i, (z, img)) in samples.iter().enumerate() {
        let m = img.channel_means();
        println!(
            "sample {i}: z[0..3] = {:.2?}  mean rgb = ({:.3}, {:.3}, {:.3})  psnr vs input {:.1} dB",
            &z[..3],
            m[0],
            m[1],
            m[2],
            psnr(img, x)?
        );
    }
    let mut strip = vec![x.clone()];
    strip.extend(samples.into_iter().map(|(_, img)| img));
    let out = dir.join("samples.png");
    Image::hstack(&strip)?.write_png(&out, false)?;
    println!("wrote {}", out.display());
    Ok(())
}
