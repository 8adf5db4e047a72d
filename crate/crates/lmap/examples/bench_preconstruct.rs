//! Pre-constructed latent search space vs vanilla MCTS: at a fixed state,
//! compare decision latency split into cache-build time and search time as
//! the iteration budget grows.
//!
//! Run with: cargo run --release --example bench_preconstruct

use lmap::codec::{tokenize_dataset, train_codec, CodecTrainConfig};
use lmap::envs::{collect_dataset, make_env, BehaviorPolicy};
use lmap::mcts::{plan, MctsConfig, Selection};
use lmap::plangraph::{CodecNodeState, CodecWorld, PrebuildConfig};
use lmap::prior::{train_neural_prior, PriorTrainConfig, SampleConfig};
use lmap::rng::{stream_rng, streams};
use lmap::trajectory::Dataset;

fn main() -> lmap::Result<()> {
    let mut env = make_env("chain-mod")?;
    let eps = collect_dataset(env.as_mut(), BehaviorPolicy::NoisyGreedy { rho: 0.3 }, 80, 3)?;
    let ds = Dataset::from_episodes(eps, 3, 0.99)?;
    let (codec, _) = train_codec(&ds, &CodecTrainConfig { epochs: 20, k: 16, d: 12, ..Default::default() })?;
    let tokens = tokenize_dataset(&codec, &ds)?;
    let (prior, _) = train_neural_prior(&tokens, codec.dims.k, &PriorTrainConfig { epochs: 12, ..Default::default() })?;

    let mut env_rng = stream_rng(9, streams::EVAL);
    let state = env.reset(&mut env_rng);
    let world = CodecWorld::new(&codec, &prior, &ds.norm, &state, 3)?;

    println!("{:>8} {:>10} {:>14} {:>12} {:>10}", "variant", "budget", "prebuild_ms", "search_ms", "code");
    for budget in [10usize, 50, 100] {
        for recursive in [true, false] {
            let cfg = MctsConfig {
                iterations: budget,
                c: 1.0,
                alpha: if recursive { 0.1 } else { 1.0 },
                epsilon: 1.0,
                selection: Selection::Uct,
                gamma_macro: 0.99f64.powi(3),
                prebuild: PrebuildConfig {
                    m: 16,
                    n_outcomes: 4,
                    b: 4,
                    lambda: if recursive { 0.5 } else { 1.0 },
                    gamma_macro: 0.99f64.powi(3),
                    node_budget: 2048,
                    recursive,
                    sample: SampleConfig::default(),
                },
                commit_max_n: false,
                search_b: None,
                seed: 7,
            };
            let root = CodecNodeState { s_norm: world.root_s_norm.clone(), prefix: Vec::new() };
            let stats = plan(&world, root, &cfg, env.l())?;
            println!(
                "{:>8} {:>10} {:>14.2} {:>12.2} {:>10}",
                if recursive { "prebuilt" } else { "vanilla" },
                budget,
                stats.prebuild_ms,
                stats.search_ms,
                stats.chosen_code
            );
        }
    }
    Ok(())
}
