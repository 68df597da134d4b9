//! PSNR, SSIM and CIE76 ΔE between a synthetic input and a few tone
//! adjustments of it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tonestyle::metrics::{delta_e_ab, psnr, ssim};
use tonestyle::synth::{apply_expert_transform, render_base_image, ExpertTransform};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x = render_base_image(64, 64, &mut ChaCha8Rng::seed_from_u64(5));
    let id = ExpertTransform::identity();
    let edits = [
        ("identity", id),
        ("gain 1.1", ExpertTransform { gain: [1.1; 3], ..id }),
        ("gamma 0.8", ExpertTransform { gamma: [0.8; 3], ..id }),
        ("lift +0.05", ExpertTransform { lift: [0.05; 3], ..id }),
        ("white balance +0.05", ExpertTransform { wb_shift: 0.05, ..id }),
    ];
    println!("{:<20} {:>9} {:>8} {:>8}", "edit", "PSNR dB", "SSIM", "ΔE");
    for (name, t) in edits {
        let y = apply_expert_transform(&x, &t);
        println!(
            "{name:<20} {:>9.2} {:>8.4} {:>8.3}",
            psnr(&x, &y)?,
            ssim(&x, &y)?,
            delta_e_ab(&x, &y)?
        );
    }
    Ok(())
}
