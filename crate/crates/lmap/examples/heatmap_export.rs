//! Latent-code transition heatmap: tokenize a corpus with a trained codec,
//! count consecutive-code transitions, and summarize how concentrated the
//! latent dynamics are (deterministic vs noisy environment tiers).
//!
//! Run with: cargo run --release --example heatmap_export

use lmap::codec::{tokenize_dataset, train_codec, CodecTrainConfig};
use lmap::envs::{collect_dataset, make_env, BehaviorPolicy};
use lmap::harness::{build_heatmap, median_row_max, median_row_support};
use lmap::trajectory::Dataset;

fn main() -> lmap::Result<()> {
    for tier in ["chain-det", "chain-high"] {
        let mut env = make_env(tier)?;
        // Deterministic greedy behavior: all transition spread comes from
        // environment noise, which is what the heatmap visualizes.
        let eps = collect_dataset(env.as_mut(), BehaviorPolicy::NoisyGreedy { rho: 0.0 }, 100, 0)?;
        let ds = Dataset::from_episodes(eps, 3, 0.99)?;
        let (codec, _) = train_codec(&ds, &CodecTrainConfig { epochs: 25, k: 32, d: 12, ..Default::default() })?;

        let tokens = tokenize_dataset(&codec, &ds)?;
        let code_seqs: Vec<Vec<usize>> = tokens.into_iter().map(|(_, codes)| codes).collect();
        let hm = build_heatmap(&code_seqs, codec.dims.k, 20)?;
        println!(
            "{tier:>10}: {} transitions over {} rows, median row support {:.1}, median row max p {:.3}",
            hm.transitions,
            hm.codes.len(),
            median_row_support(&hm),
            median_row_max(&hm)
        );
    }
    Ok(())
}
