//! A single planning decision, end to end: train small models, pre-construct
//! the latent search space at the current state, run MCTS over the cached
//! tree, and inspect the root edge statistics and the committed action.
//!
//! Run with: cargo run --release --example plan_decision

use lmap::codec::{tokenize_dataset, train_codec, CodecTrainConfig};
use lmap::envs::{collect_dataset, make_env, BehaviorPolicy};
use lmap::mcts::{plan, MctsConfig, Selection};
use lmap::plangraph::{CodecNodeState, CodecWorld, LatentWorld, PrebuildConfig};
use lmap::prior::{train_neural_prior, PriorTrainConfig, SampleConfig};
use lmap::rng::{stream_rng, streams};
use lmap::trajectory::Dataset;

fn main() -> lmap::Result<()> {
    // Offline models (small budgets; see train_pipeline for the full flow).
    let mut env = make_env("chain-mod")?;
    let eps = collect_dataset(env.as_mut(), BehaviorPolicy::NoisyGreedy { rho: 0.3 }, 80, 3)?;
    let ds = Dataset::from_episodes(eps, 3, 0.99)?;
    let (codec, _) = train_codec(&ds, &CodecTrainConfig { epochs: 20, k: 16, d: 12, ..Default::default() })?;
    let tokens = tokenize_dataset(&codec, &ds)?;
    let (prior, _) = train_neural_prior(&tokens, codec.dims.k, &PriorTrainConfig { epochs: 12, ..Default::default() })?;

    // Plan one decision from a fresh environment state.
    let mut env_rng = stream_rng(42, streams::EVAL);
    let state = env.reset(&mut env_rng);
    println!("state: s={:.3} goal={:.3}", state[0], state[1]);

    let cfg = MctsConfig {
        iterations: 200,
        c: 1.0,
        alpha: 0.1,
        epsilon: 1.0,
        selection: Selection::Uct,
        gamma_macro: 0.99f64.powi(3),
        prebuild: PrebuildConfig {
            m: 16,
            n_outcomes: 4,
            b: 4,
            lambda: 0.5,
            gamma_macro: 0.99f64.powi(3),
            node_budget: 2048,
            recursive: true,
            sample: SampleConfig::default(),
        },
        commit_max_n: false,
        search_b: None,
        seed: 0,
    };
    // horizon 9 primitive steps = 3 macro steps of length L=3
    let world = CodecWorld::new(&codec, &prior, &ds.norm, &state, 3)?;
    let root = CodecNodeState { s_norm: world.root_s_norm.clone(), prefix: Vec::new() };
    let stats = plan(&world, root.clone(), &cfg, env.l())?;

    let mut edges = stats.root_edges.clone();
    edges.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    println!("root edges (code, Q, N), best first:");
    for (z, q, n) in &edges {
        let m = world.macro_action(&root, *z)?;
        println!("  z={z:2}  Q={q:+.3}  N={n:3}  macro={m:.3?}");
    }
    println!(
        "committed code {} -> first primitive action {:.3?} (prebuild {:.1} ms, search {:.1} ms)",
        stats.chosen_code, stats.action, stats.prebuild_ms, stats.search_ms
    );
    Ok(())
}
