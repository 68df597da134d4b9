//! Maps styles to latents and back through a random conditional flow and
//! reports the round-trip error, log-determinant and likelihood.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tonestyle::config::ModelConfig;
use tonestyle::flow::{flow_forward, flow_inverse, nll, FlowParams, StyleVector};
use tonestyle::synth::render_base_image;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let flow = FlowParams::random(&cfg, &mut rng);
    let image = render_base_image(64, 64, &mut rng);
    let c = flow.extract_condition(&image);
    println!("condition vector: {} entries, first {:?}", c.len(), &c[..4]);

    for k in 0..4 {
        let s = StyleVector((0..cfg.style_dim).map(|i| ((i + k) as f32 * 0.7).sin()).collect());
        let (z, logdet) = flow_forward(&s, &c, &flow)?;
        let back = flow_inverse(&z, &c, &flow)?;
        let err = s.iter().zip(back.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        println!(
            "style {k}: |z| = {:.3}  log|det J| = {:>7.3}  nll = {:>7.3}  max round-trip error = {err:.2e}",
            z.iter().map(|v| v * v).sum::<f32>().sqrt(),
            logdet,
            nll(&s, &c, &flow)?
        );
    }

    let prepared = flow.prepare()?;
    let s = vec![0.5f32; cfg.style_dim];
    let per_step = prepared.step_logdets(&s, &c)?;
    println!("per-step log-determinants: {per_step:.3?}");
    Ok(())
}
