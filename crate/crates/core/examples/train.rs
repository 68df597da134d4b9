//! Generates a small two-expert dataset and trains on it, printing the
//! loss curve. The run directory can be passed as the first argument.
//!
//! ```text
//! cargo run --release --example train -- /tmp/train-demo
//! ```

mod common;

use tonestyle::trainer::read_loss_log;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| common::scratch("example-train"));
    let (ckpt, pairs) = common::quick_model(&dir)?;
    println!("{} training pairs, checkpoint {}", pairs.len(), ckpt.display());
    let log = read_loss_log(&dir.join("run/loss_log.jsonl"))?;
    for chunk in log.chunks(50) {
        let mean = chunk.iter().map(|r| r.retouching_loss).sum::<f64>() / chunk.len() as f64;
        println!("iters {:>4}-{:<4} mean l_ret {mean:.4}", chunk[0].iteration, chunk.last().unwrap().iteration);
    }
    Ok(())
}
