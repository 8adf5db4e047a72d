//! Finite-difference verification of the analytic gradients of the full
//! codec loss (reconstruction + masked reconstruction + commitment +
//! alignment), per parameter block.
//!
//! Run with: cargo run --release --example grad_check

use lmap::codec::{grad_check, CodecDims, CodecParams, LossOpts};
use lmap::rng::{stream_rng, streams};
use lmap::trajectory::{MacroToken, TokenChunk};
use rand::Rng;

fn random_token(dims: &CodecDims, rng: &mut impl Rng) -> MacroToken {
    MacroToken {
        rtg: rng.gen_range(-1.0..1.0),
        state: (0..dims.n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        macro_actions: (0..dims.l * dims.macro_len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

fn main() -> lmap::Result<()> {
    let dims = CodecDims { n: 3, l: 1, macro_len: 3, d: 10, k: 8 };
    let mut rng = stream_rng(5, streams::CODEC_INIT);
    let params = CodecParams::init(dims, 0.25, &mut rng);

    // A small batch of random normalized chunks.
    let mut data_rng = stream_rng(6, streams::CODEC_BATCH);
    let batch: Vec<TokenChunk> = (0..4)
        .map(|_| TokenChunk {
            first: random_token(&dims, &mut data_rng),
            second: random_token(&dims, &mut data_rng),
        })
        .collect();

    let report = grad_check(&params, &batch, LossOpts::default())?;
    println!("per-block max relative error (tolerance 1e-4):");
    for (block, err) in &report.block_errors {
        println!("  {block:<20} {err:.3e}");
    }
    println!(
        "overall max {:.3e} -> {}",
        report.max_rel_err,
        if report.pass { "PASS" } else { "FAIL" }
    );
    Ok(())
}
