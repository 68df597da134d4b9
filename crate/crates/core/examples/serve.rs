//! Starts the HTTP service on a small trained model.
//!
//! ```text
//! cargo run --release --example serve
//! curl localhost:8787/model
//! curl -F image=@photo.png localhost:8787/images
//! curl -H 'content-type: application/json' \
//!      -d '{"v":1,"image_id":"<id>","latent":{"seed":3}}' localhost:8787/render
//! ```

mod common;

use tonestyle::checkpoint::load_checkpoint;
use tonestyle::service::{serve, ServeConfig};
use tonestyle::style_ops::{cluster_latents, encode_pair};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = common::scratch("example-model");
    let (ckpt, pairs) = common::quick_model(&dir)?;
    let model = load_checkpoint(&ckpt)?.model;
    let codebooks = dir.join("codebooks");
    std::fs::create_dir_all(&codebooks)?;
    let latents = pairs
        .iter()
        .map(|p| encode_pair(&model, &p.input, &p.reference).map(|(_, z)| z))
        .collect::<Result<Vec<_>, _>>()?;
    cluster_latents(&latents, 4, 0)?.save(&codebooks.join("presets.json"))?;

    let port = std::env::var("PORT").ok().and_then(|p| p.parse().ok()).unwrap_or(8787);
    let cfg = ServeConfig {
        addr: ([127, 0, 0, 1], port).into(),
        checkpoint: dir.join("run/deploy.ckpt"),
        codebook_dir: Some(codebooks),
        max_sessions: 16,
    };
    serve(cfg, |addr| println!("listening on http://{addr}")).await?;
    Ok(())
}
