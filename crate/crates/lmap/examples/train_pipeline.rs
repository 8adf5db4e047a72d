//! End-to-end offline pipeline on the noisy chain environment: collect a
//! behavior corpus, train the state-conditioned VQ codec, then train the
//! autoregressive latent prior on the tokenized corpus.
//!
//! Run with: cargo run --release --example train_pipeline

use lmap::codec::{train_codec, tokenize_dataset, CodecTrainConfig};
use lmap::envs::{collect_dataset, make_env, BehaviorPolicy};
use lmap::prior::{train_neural_prior, PriorTrainConfig};
use lmap::trajectory::Dataset;

fn main() -> lmap::Result<()> {
    // 1. Behavior corpus: noisy-greedy policy on the high-noise chain tier.
    let mut env = make_env("chain-high")?;
    let episodes = collect_dataset(env.as_mut(), BehaviorPolicy::NoisyGreedy { rho: 0.3 }, 60, 7)?;
    let ds = Dataset::from_episodes(episodes, 3, 0.99)?;
    println!(
        "corpus: {} episodes, {} chunks, n={} l={} L={}",
        ds.episodes.len(),
        ds.chunks.len(),
        ds.n,
        ds.l,
        ds.macro_len
    );

    // 2. VQ codec with the masked-return dual encoding.
    let codec_cfg = CodecTrainConfig { epochs: 15, k: 16, d: 12, ..Default::default() };
    let (codec, report) = train_codec(&ds, &codec_cfg)?;
    println!(
        "codec: recon MSE {:.5} -> {:.5}, {}/{} codebook entries used, {} dead-code resets",
        report.initial_recon_mse,
        report.final_recon_mse,
        report.usage.iter().filter(|&&u| u > 0).count(),
        codec_cfg.k,
        report.dead_code_resets
    );

    // 3. Latent prior over code sequences, conditioned on the episode start.
    let tokens = tokenize_dataset(&codec, &ds)?;
    let prior_cfg = PriorTrainConfig { epochs: 10, ..Default::default() };
    let (_prior, prior_report) = train_neural_prior(&tokens, codec.dims.k, &prior_cfg)?;
    println!(
        "prior: cross-entropy {:.4} -> {:.4} (uniform baseline {:.4})",
        prior_report.epoch_cross_entropy.first().unwrap(),
        prior_report.final_cross_entropy,
        (codec_cfg.k as f64).ln()
    );
    Ok(())
}
