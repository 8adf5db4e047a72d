//! The Ornstein-Uhlenbeck currency-liquidation environment under the three
//! built-in behavior policies, plus a direct look at one trajectory.
//!
//! Run with: cargo run --release --example currency_rollout

use lmap::envs::{collect_dataset, BehaviorPolicy, CurrencyEnv, Env};
use lmap::rng::{stream_rng, streams};

fn main() -> lmap::Result<()> {
    let mut env = CurrencyEnv::new(0.1, 1.0, 0.02, 50);

    for (name, policy) in [
        ("random", BehaviorPolicy::UniformRandom),
        ("medium", BehaviorPolicy::NoisyGreedy { rho: 0.3 }),
        ("greedy", BehaviorPolicy::NoisyGreedy { rho: 0.0 }),
    ] {
        let eps = collect_dataset(&mut env, policy, 500, 7)?;
        let mean: f64 = eps
            .iter()
            .map(|e| e.rewards.iter().sum::<f64>())
            .sum::<f64>()
            / eps.len() as f64;
        println!("{name:>6}: mean return {mean:.4} over {} episodes", eps.len());
    }

    // One raw trajectory under a fixed sell fraction.
    let mut rng = stream_rng(11, streams::ENV);
    let mut s = env.reset(&mut rng);
    let mut total = 0.0;
    println!("\nfixed a=0.25 trajectory:");
    loop {
        let (next, r, done) = env.step(&[0.25], &mut rng)?;
        total += r;
        if (s[0] * 50.0).round() as u64 % 10 == 0 {
            println!("  t={:4.1} X={:.4} I={:.4} r={:.4}", s[0] * 50.0, s[1], s[2], r);
        }
        s = next;
        if done {
            break;
        }
    }
    println!("total reward {total:.4}");
    Ok(())
}
