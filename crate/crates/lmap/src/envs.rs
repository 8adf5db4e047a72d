//! Desk-scale stochastic environments, behavior policies, and offline
//! dataset generation.
//!
//! Two families: a currency-liquidation task whose exchange rate follows an
//! Ornstein-Uhlenbeck process, and a 1-d noisy chain with a per-episode goal
//! and three noise tiers. Both are cheap enough to run thousands of episodes
//! in tests. All constants are artifact choices and are echoed into dataset
//! headers so experiments are self-describing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mcts::TabularLatentMdp;
use crate::rng::{stream_rng, streams};
use crate::trajectory::EpisodeRaw;

/// Standard normal via Box-Muller (keeps us off distribution-crate version
/// churn; two uniforms per draw, second discarded for simplicity).
pub fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub trait Env {
    fn n(&self) -> usize;
    fn l(&self) -> usize;
    fn horizon(&self) -> usize;
    /// Action box, identical across dimensions.
    fn action_bounds(&self) -> (f64, f64);
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    fn step(&mut self, action: &[f64], rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, f64, bool)>;
    /// Hand-written reference controller used for normalization anchors and
    /// the noisy-greedy behavior policy.
    fn greedy_action(&self, state: &[f64]) -> Vec<f64>;
    /// Constants echoed into dataset headers.
    fn config_echo(&self) -> String;
}

// ---------------------------------------------------------------------------
// Currency liquidation (OU exchange rate)
// ---------------------------------------------------------------------------

/// Sell off inventory I at price X; the price mean-reverts to mu. The state
/// is (t/T, X, I), the action the fraction of remaining inventory converted
/// this step.
#[derive(Debug, Clone)]
pub struct CurrencyEnv {
    pub theta: f64,
    pub mu: f64,
    pub sigma: f64,
    pub x0: f64,
    pub i0: f64,
    pub t_max: usize,
    t: usize,
    x: f64,
    inv: f64,
    done: bool,
}

impl CurrencyEnv {
    pub fn new(theta: f64, mu: f64, sigma: f64, t_max: usize) -> Self {
        CurrencyEnv {
            theta,
            mu,
            sigma,
            x0: 1.0,
            i0: 1.0,
            t_max,
            t: 0,
            x: 1.0,
            inv: 1.0,
            done: true,
        }
    }

    fn state(&self) -> Vec<f64> {
        vec![self.t as f64 / self.t_max as f64, self.x, self.inv]
    }
}

impl Default for CurrencyEnv {
    fn default() -> Self {
        CurrencyEnv::new(0.1, 1.0, 0.02, 50)
    }
}

impl Env for CurrencyEnv {
    fn n(&self) -> usize {
        3
    }
    fn l(&self) -> usize {
        1
    }
    fn horizon(&self) -> usize {
        self.t_max
    }
    fn action_bounds(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn reset(&mut self, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.t = 0;
        self.x = self.x0;
        self.inv = self.i0;
        self.done = false;
        self.state()
    }

    fn step(&mut self, action: &[f64], rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, f64, bool)> {
        if self.done {
            return Err(Error::InvalidInput("step after done".into()));
        }
        let a = action
            .first()
            .copied()
            .ok_or_else(|| Error::DimMismatch("currency action dim 0".into()))?
            .clamp(0.0, 1.0);
        let reward = a * self.inv * self.x;
        self.inv *= 1.0 - a;
        self.x += self.theta * (self.mu - self.x) + self.sigma * std_normal(rng);
        self.t += 1;
        self.done = self.t >= self.t_max || self.inv < 1e-6;
        Ok((self.state(), reward, self.done))
    }

    fn greedy_action(&self, state: &[f64]) -> Vec<f64> {
        // sell everything once the price is at or above the long-run mean
        vec![if state[1] >= self.mu { 1.0 } else { 0.0 }]
    }

    fn config_echo(&self) -> String {
        format!(
            "env=currency theta={} mu={} sigma={} x0={} i0={} T={}",
            self.theta, self.mu, self.sigma, self.x0, self.i0, self.t_max
        )
    }
}

// ---------------------------------------------------------------------------
// Noisy chain
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainTier {
    Det,
    Mod,
    High,
}

impl ChainTier {
    pub fn sigma(self) -> f64 {
        match self {
            ChainTier::Det => 0.0,
            ChainTier::Mod => 0.05,
            ChainTier::High => 0.1,
        }
    }

    pub fn parse(s: &str) -> Result<ChainTier> {
        match s {
            "det" => Ok(ChainTier::Det),
            "mod" => Ok(ChainTier::Mod),
            "high" => Ok(ChainTier::High),
            other => Err(Error::Config(format!("unknown chain tier {other:?}"))),
        }
    }
}

/// 1-d point mass moving 0.1·a per step toward a goal sampled each episode;
/// reward is the negative distance after the move.
#[derive(Debug, Clone)]
pub struct NoisyChainEnv {
    pub tier: ChainTier,
    pub horizon: usize,
    t: usize,
    s: f64,
    goal: f64,
    done: bool,
}

impl NoisyChainEnv {
    pub fn new(tier: ChainTier) -> Self {
        NoisyChainEnv {
            tier,
            horizon: 60,
            t: 0,
            s: 0.0,
            goal: 0.0,
            done: true,
        }
    }
}

impl Env for NoisyChainEnv {
    fn n(&self) -> usize {
        2
    }
    fn l(&self) -> usize {
        1
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn action_bounds(&self) -> (f64, f64) {
        (-1.0, 1.0)
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.t = 0;
        self.s = rng.gen_range(-1.0..1.0);
        self.goal = rng.gen_range(-1.0..1.0);
        self.done = false;
        vec![self.s, self.goal]
    }

    fn step(&mut self, action: &[f64], rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, f64, bool)> {
        if self.done {
            return Err(Error::InvalidInput("step after done".into()));
        }
        let a = action
            .first()
            .copied()
            .ok_or_else(|| Error::DimMismatch("chain action dim 0".into()))?
            .clamp(-1.0, 1.0);
        self.s = (self.s + 0.1 * a + self.tier.sigma() * std_normal(rng)).clamp(-1.0, 1.0);
        let reward = -(self.s - self.goal).abs();
        self.t += 1;
        self.done = self.t >= self.horizon;
        Ok((vec![self.s, self.goal], reward, self.done))
    }

    fn greedy_action(&self, state: &[f64]) -> Vec<f64> {
        vec![((state[1] - state[0]) / 0.1).clamp(-1.0, 1.0)]
    }

    fn config_echo(&self) -> String {
        format!(
            "env=chain sigma_e={} horizon={}",
            self.tier.sigma(),
            self.horizon
        )
    }
}

/// Construct an environment by id ("currency" or "chain-det|mod|high").
pub fn make_env(id: &str) -> Result<Box<dyn Env>> {
    match id {
        "currency" => Ok(Box::new(CurrencyEnv::default())),
        _ => match id.strip_prefix("chain-") {
            Some(tier) => Ok(Box::new(NoisyChainEnv::new(ChainTier::parse(tier)?))),
            None => Err(Error::Config(format!("unknown env {id:?}"))),
        },
    }
}

// ---------------------------------------------------------------------------
// Behavior policies and dataset collection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BehaviorPolicy {
    UniformRandom,
    /// Greedy reference controller plus gaussian action noise of scale rho.
    NoisyGreedy { rho: f64 },
}

impl BehaviorPolicy {
    pub fn parse(s: &str) -> Result<BehaviorPolicy> {
        match s {
            "random" => Ok(BehaviorPolicy::UniformRandom),
            "medium" => Ok(BehaviorPolicy::NoisyGreedy { rho: 0.3 }),
            "greedy" => Ok(BehaviorPolicy::NoisyGreedy { rho: 0.0 }),
            other => Err(Error::Config(format!("unknown policy {other:?}"))),
        }
    }

    pub fn action(&self, env: &dyn Env, state: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (lo, hi) = env.action_bounds();
        match self {
            BehaviorPolicy::UniformRandom => {
                (0..env.l()).map(|_| rng.gen_range(lo..hi)).collect()
            }
            BehaviorPolicy::NoisyGreedy { rho } => env
                .greedy_action(state)
                .iter()
                .map(|a| (a + rho * std_normal(rng)).clamp(lo, hi))
                .collect(),
        }
    }
}

/// Roll out full episodes under a behavior policy. Environment noise and
/// policy noise use independent rng streams derived from `seed`.
pub fn collect_dataset(
    env: &mut dyn Env,
    policy: BehaviorPolicy,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeRaw>> {
    if episodes == 0 {
        return Err(Error::InvalidInput("episodes must be >= 1".into()));
    }
    let mut env_rng = stream_rng(seed, streams::ENV);
    let mut pol_rng = stream_rng(seed, streams::POLICY);
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = env.reset(&mut env_rng);
        let mut ep = EpisodeRaw {
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminated: false,
        };
        loop {
            let a = policy.action(env, &state, &mut pol_rng);
            let (next, r, done) = env.step(&a, &mut env_rng)?;
            ep.states.push(state);
            ep.actions.push(a);
            ep.rewards.push(r);
            state = next;
            if done {
                ep.terminated = true;
                break;
            }
        }
        out.push(ep);
    }
    Ok(out)
}

/// Mean undiscounted return of a policy over `episodes` rollouts.
pub fn mean_return(
    env: &mut dyn Env,
    policy: BehaviorPolicy,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let eps = collect_dataset(env, policy, episodes, seed)?;
    Ok(eps.iter().map(|e| e.rewards.iter().sum::<f64>()).sum::<f64>() / episodes as f64)
}

// ---------------------------------------------------------------------------
// Tabular latent MDP generator (oracle substrate)
// ---------------------------------------------------------------------------

/// Random layered latent MDP with K̃ codes per node, `outcomes` stochastic
/// successors per (node, code) edge, depth `h`, rewards in [0,1]. The best
/// root code's rewards are shifted up so the root optimality gap is at least
/// `gap`.
pub fn gen_tabular_latent_mdp(
    seed: u64,
    k: usize,
    h: usize,
    outcomes: usize,
    gap: f64,
    gamma_macro: f64,
) -> Result<TabularLatentMdp> {
    if k < 2 || h < 1 || outcomes < 1 {
        return Err(Error::Config(format!(
            "need K̃ >= 2, H >= 1, outcomes >= 1 (got {k}, {h}, {outcomes})"
        )));
    }
    let size = (k as f64) * (k as f64 * outcomes as f64).powi(h as i32 - 1) * outcomes as f64;
    if size > 1e6 {
        return Err(Error::Config(format!(
            "tabular MDP too large ({size:.0} leaf edges > 1e6)"
        )));
    }
    // the reward shift below can add at most ~gap on top of rewards in [0,1]
    if !(0.0..=1.0).contains(&gap) {
        return Err(Error::Config(format!("infeasible gap {gap}")));
    }
    let mut rng = stream_rng(seed, streams::MDP_GEN);
    let mut mdp = TabularLatentMdp::empty(k, h);
    crate::mcts::grow_tabular(&mut mdp, 0, outcomes, &mut rng);

    // enforce the root optimality gap by shifting the best root edge upward
    let (values, best) = crate::mcts::expectimax_exact(&mdp, gamma_macro)?;
    let mut second = f64::NEG_INFINITY;
    for (z, &v) in values.iter().enumerate() {
        if z != best {
            second = second.max(v);
        }
    }
    let deficit = gap - (values[best] - second);
    if deficit > 0.0 {
        for outcome in &mut mdp.nodes[0].edges[best] {
            outcome.reward += deficit;
        }
    }
    Ok(mdp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcts::expectimax_exact;

    #[test]
    fn currency_full_liquidation_hand_values() {
        let mut env = CurrencyEnv::new(0.1, 1.0, 0.0, 50);
        let mut rng = stream_rng(0, streams::ENV);
        let s = env.reset(&mut rng);
        assert_eq!(s, vec![0.0, 1.0, 1.0]);
        let (s1, r, done) = env.step(&[1.0], &mut rng).unwrap();
        assert_eq!(r, 1.0);
        assert!(done, "inventory exhausted");
        assert!(s1[2] < 1e-6);
        assert!(env.step(&[0.0], &mut rng).is_err(), "step after done");
    }

    #[test]
    fn currency_never_selling_earns_nothing() {
        let mut env = CurrencyEnv::new(0.1, 1.0, 0.0, 50);
        let mut rng = stream_rng(1, streams::ENV);
        env.reset(&mut rng);
        let mut total = 0.0;
        loop {
            let (_, r, done) = env.step(&[0.0], &mut rng).unwrap();
            total += r;
            if done {
                break;
            }
        }
        assert_eq!(total, 0.0);
    }

    #[test]
    fn ou_price_stationary_mean() {
        // Monte Carlo check of the OU stationary mean against mu
        let mut env = CurrencyEnv::default();
        let mut rng = stream_rng(2, streams::ENV);
        env.reset(&mut rng);
        let mut sum = 0.0;
        let steps = 100_000;
        for _ in 0..steps {
            env.x += env.theta * (env.mu - env.x) + env.sigma * std_normal(&mut rng);
            sum += env.x;
        }
        let mean = sum / steps as f64;
        assert!((mean - env.mu).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn currency_wealth_identity_and_sell_now_optimal() {
        // with sigma=0 and X=mu, total reward = fraction ultimately sold;
        // enumerate single-step sell schedules on a T=5 grid under discounting
        let gamma: f64 = 0.99;
        for sell_at in 0..5usize {
            let mut env = CurrencyEnv::new(0.1, 1.0, 0.0, 5);
            let mut rng = stream_rng(3, streams::ENV);
            env.reset(&mut rng);
            let mut disc = 0.0;
            let mut raw = 0.0;
            for t in 0..5 {
                let a = if t == sell_at { 1.0 } else { 0.0 };
                let (_, r, done) = env.step(&[a], &mut rng).unwrap();
                disc += gamma.powi(t as i32) * r;
                raw += r;
                if done {
                    break;
                }
            }
            assert!((raw - 1.0).abs() < 1e-12);
            if sell_at > 0 {
                assert!(disc < 1.0, "selling later must be worse under discounting");
            } else {
                assert_eq!(disc, 1.0);
            }
        }
    }

    #[test]
    fn chain_hand_step() {
        let mut env = NoisyChainEnv::new(ChainTier::Det);
        let mut rng = stream_rng(4, streams::ENV);
        env.reset(&mut rng);
        env.s = 0.0;
        env.goal = 0.5;
        let (s1, r, _) = env.step(&[1.0], &mut rng).unwrap();
        assert!((s1[0] - 0.1).abs() < 1e-12);
        assert!((r - (-0.4)).abs() < 1e-12);
        // a=0 in the det tier is a fixed point
        let (s2, _, _) = env.step(&[0.0], &mut rng).unwrap();
        assert_eq!(s2[0], s1[0]);
    }

    #[test]
    fn chain_clamps_to_box() {
        let mut env = NoisyChainEnv::new(ChainTier::Det);
        let mut rng = stream_rng(5, streams::ENV);
        env.reset(&mut rng);
        env.s = 0.99;
        let (s1, _, _) = env.step(&[5.0], &mut rng).unwrap();
        assert_eq!(s1[0], 1.0);
    }

    #[test]
    fn collect_dataset_deterministic_and_boxed() {
        let mut env = CurrencyEnv::default();
        let a = collect_dataset(&mut env, BehaviorPolicy::UniformRandom, 20, 7).unwrap();
        let mut env2 = CurrencyEnv::default();
        let b = collect_dataset(&mut env2, BehaviorPolicy::UniformRandom, 20, 7).unwrap();
        assert_eq!(a.len(), 20);
        for (ea, eb) in a.iter().zip(&b) {
            assert_eq!(ea.states, eb.states);
            assert_eq!(ea.actions, eb.actions);
            assert_eq!(ea.rewards, eb.rewards);
            assert!(ea
                .actions
                .iter()
                .all(|act| act.iter().all(|&x| (0.0..=1.0).contains(&x))));
        }
    }

    #[test]
    fn noisy_greedy_sits_between_random_and_greedy() {
        let mut env = NoisyChainEnv::new(ChainTier::Det);
        let random = mean_return(&mut env, BehaviorPolicy::UniformRandom, 500, 11).unwrap();
        let medium =
            mean_return(&mut env, BehaviorPolicy::NoisyGreedy { rho: 0.3 }, 500, 11).unwrap();
        let greedy =
            mean_return(&mut env, BehaviorPolicy::NoisyGreedy { rho: 0.0 }, 500, 11).unwrap();
        assert!(
            random < medium && medium < greedy,
            "random {random}, medium {medium}, greedy {greedy}"
        );
    }

    #[test]
    fn tabular_mdp_generator_contract() {
        let gm = 0.99f64.powi(3);
        let mdp = gen_tabular_latent_mdp(0, 4, 2, 3, 0.2, gm).unwrap();
        // all distributions row-sum to 1
        for node in &mdp.nodes {
            for edge in &node.edges {
                let total: f64 = edge.iter().map(|o| o.prob).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        // optimality gap enforced
        let (values, best) = expectimax_exact(&mdp, gm).unwrap();
        let second = values
            .iter()
            .enumerate()
            .filter(|(z, _)| *z != best)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(values[best] - second >= 0.2 - 1e-12);

        // determinism
        let again = gen_tabular_latent_mdp(0, 4, 2, 3, 0.2, gm).unwrap();
        assert_eq!(mdp, again);
        // size guard
        assert!(gen_tabular_latent_mdp(0, 10, 7, 10, 0.2, gm).is_err());
    }
}
