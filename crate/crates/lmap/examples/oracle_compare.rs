//! Planner verification against an exact oracle: generate small tabular
//! latent MDPs, solve them by exact expectimax, and check how often MCTS
//! commits the expectimax-optimal root code.
//!
//! Run with: cargo run --release --example oracle_compare

use lmap::envs::gen_tabular_latent_mdp;
use lmap::mcts::{expectimax_exact, plan, MctsConfig, Selection, TabularWorld};
use lmap::plangraph::PrebuildConfig;
use lmap::prior::SampleConfig;

fn main() -> lmap::Result<()> {
    let gamma_macro = 0.99f64.powi(3);
    let instances = 25;
    let mut agree = 0;
    let mut value_gap = 0.0;

    for i in 0..instances {
        let k = 4 + (i % 3) * 2; // K ∈ {4, 6, 8}
        let h = 1 + i % 3; //       H ∈ {1, 2, 3}
        let mdp = gen_tabular_latent_mdp(1000 + i as u64, k, h, 2, 0.2, gamma_macro)?;
        let (values, optimal) = expectimax_exact(&mdp, gamma_macro)?;

        let cfg = MctsConfig {
            iterations: 100,
            c: 1.0,
            alpha: 0.1,
            epsilon: 1.0,
            selection: Selection::Uct,
            gamma_macro,
            prebuild: PrebuildConfig {
                m: 10_000,
                n_outcomes: if h == 1 { 256 } else { 128 },
                b: 10_000,
                lambda: 1.0,
                gamma_macro,
                node_budget: 200_000,
                recursive: true,
                sample: SampleConfig::default(),
            },
            commit_max_n: false,
            search_b: None,
            seed: 1000 + i as u64,
        };
        let world = TabularWorld { mdp: &mdp };
        let stats = plan(&world, Some(0), &cfg, 1)?;
        if stats.chosen_code == optimal {
            agree += 1;
        } else {
            value_gap += values[optimal] - values[stats.chosen_code];
        }
    }
    println!(
        "agreement {agree}/{instances} ({:.0}%), mean value gap on disagreement {:.4}",
        100.0 * agree as f64 / instances as f64,
        if agree == instances { 0.0 } else { value_gap / (instances - agree) as f64 }
    );
    Ok(())
}
