//! Command-line orchestration: dataset generation, codec/prior training,
//! closed-loop evaluation with latency measurement, the pre-construction
//! benchmark, the ablation matrix, heatmap export, and oracle comparison.
//!
//! Reports are line-delimited `key=value` records (matrices as CSV side
//! files) so golden files diff cleanly. Keys under the `timing.` prefix are
//! wall-clock measurements and are the only part of a report exempt from the
//! bit-exact reproducibility audit.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::codec::{
    self, encode_episode_codes, grad_check, load_codec, save_codec, tokenize_dataset, CodecDims,
    CodecParams, CodecTrainConfig, LossOpts,
};
use crate::envs::{collect_dataset, gen_tabular_latent_mdp, make_env, BehaviorPolicy, CurrencyEnv, Env};
use crate::error::{Error, Result};
use crate::mcts::{expectimax_exact, plan, MctsConfig, Selection, TabularWorld};
use crate::plangraph::{CodecNodeState, CodecWorld, PrebuildConfig};
use crate::prior::{
    fit_tabular, load_neural_prior, load_tabular_prior, save_neural_prior, save_tabular_prior,
    train_neural_prior, NeuralPrior, PriorModel, PriorTrainConfig, SampleConfig, TabularPrior,
};
use crate::rng::{stream_rng, streams};
use crate::trajectory::{fmt_f64, load_dataset, save_dataset, Dataset, NormStats};

// ---------------------------------------------------------------------------
// Key=value configuration
// ---------------------------------------------------------------------------

/// Flat `key=value` configuration: file lines plus `--set` overrides. Every
/// value a command actually reads is recorded (with the default it resolved
/// to), so reports can embed the full effective configuration.
#[derive(Debug, Default)]
pub struct KvConfig {
    map: BTreeMap<String, String>,
    resolved: RefCell<BTreeMap<String, String>>,
}

impl Clone for KvConfig {
    fn clone(&self) -> Self {
        KvConfig {
            map: self.map.clone(),
            resolved: RefCell::new(BTreeMap::new()),
        }
    }
}

impl KvConfig {
    pub fn new() -> Self {
        KvConfig::default()
    }

    /// Parse a config file: one `key=value` per line; blank lines and `#`
    /// comments skipped.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = KvConfig::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            cfg.set_pair(line)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(cfg)
    }

    /// Apply one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
        if k.trim().is_empty() {
            return Err(Error::Config(format!("empty key in {pair:?}")));
        }
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.map.insert(key.to_string(), value.to_string());
    }

    /// Insert a default only when the key is absent (command-specific
    /// defaults that differ from the global ones).
    pub fn set_default(&mut self, key: &str, value: &str) {
        self.map
            .entry(key.to_string())
            .or_insert_with(|| value.to_string());
    }

    fn record(&self, key: &str, value: &str) {
        self.resolved
            .borrow_mut()
            .insert(key.to_string(), value.to_string());
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        let v = self.map.get(key).cloned().unwrap_or_else(|| default.to_string());
        self.record(key, &v);
        v
    }

    pub fn req(&self, key: &str) -> Result<String> {
        let v = self
            .map
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))?;
        self.record(key, &v);
        Ok(v)
    }

    fn parse_num<T: std::str::FromStr>(&self, key: &str, raw: &str) -> Result<T> {
        raw.parse::<T>()
            .map_err(|_| Error::Config(format!("key {key:?}: cannot parse {raw:?}")))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        let raw = self.str_or(key, &default.to_string());
        self.parse_num(key, &raw)
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        let raw = self.str_or(key, &default.to_string());
        self.parse_num(key, &raw)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        let raw = self.str_or(key, &default.to_string());
        self.parse_num(key, &raw)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        let raw = self.str_or(key, if default { "true" } else { "false" });
        match raw.as_str() {
            "true" | "1" | "on" | "yes" => Ok(true),
            "false" | "0" | "off" | "no" => Ok(false),
            other => Err(Error::Config(format!("key {key:?}: bad bool {other:?}"))),
        }
    }

    /// Comma-separated u64 list.
    pub fn u64_list_or(&self, key: &str, default: &str) -> Result<Vec<u64>> {
        let raw = self.str_or(key, default);
        raw.split(',')
            .map(|t| self.parse_num::<u64>(key, t.trim()))
            .collect()
    }

    pub fn usize_list_or(&self, key: &str, default: &str) -> Result<Vec<usize>> {
        let raw = self.str_or(key, default);
        raw.split(',')
            .map(|t| self.parse_num::<usize>(key, t.trim()))
            .collect()
    }

    /// `config.key=value` lines for every key read so far, sorted.
    pub fn echo_resolved(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.resolved.borrow().iter() {
            let _ = writeln!(out, "config.{k}={v}");
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Small helpers
// ---------------------------------------------------------------------------

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean (sample std / sqrt(n)); 0 for n < 2.
pub fn sem(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

/// Nearest-rank percentile, p in [0,100].
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

fn median_u(xs: &[usize]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_unstable();
    if v.is_empty() {
        return 0.0;
    }
    if v.len() % 2 == 1 {
        v[v.len() / 2] as f64
    } else {
        (v[v.len() / 2 - 1] + v[v.len() / 2]) as f64 / 2.0
    }
}

fn median_f(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if v.is_empty() {
        return 0.0;
    }
    if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        (v[v.len() / 2 - 1] + v[v.len() / 2]) / 2.0
    }
}

// ---------------------------------------------------------------------------
// Prior dispatch
// ---------------------------------------------------------------------------

/// Either prior backend behind one `PriorModel`.
pub enum AnyPrior {
    Neural(NeuralPrior),
    Tabular(TabularPrior),
}

impl PriorModel for AnyPrior {
    fn num_codes(&self) -> usize {
        match self {
            AnyPrior::Neural(p) => p.num_codes(),
            AnyPrior::Tabular(p) => p.num_codes(),
        }
    }

    fn logits(&self, s: &[f64], prefix: &[usize]) -> Result<Vec<f64>> {
        match self {
            AnyPrior::Neural(p) => p.logits(s, prefix),
            AnyPrior::Tabular(p) => p.logits(s, prefix),
        }
    }
}

pub fn load_prior(kind: &str, path: &Path) -> Result<AnyPrior> {
    match kind {
        "neural" => Ok(AnyPrior::Neural(load_neural_prior(path)?)),
        "tabular" => Ok(AnyPrior::Tabular(load_tabular_prior(path)?)),
        other => Err(Error::Config(format!(
            "unknown prior type {other:?} (expected neural|tabular)"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Environment spec (id + currency overrides so OU constants stay tunable)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub id: String,
    pub theta: f64,
    pub mu: f64,
    pub sigma: f64,
    pub t_max: usize,
}

impl EnvSpec {
    pub fn from_cfg(cfg: &KvConfig) -> Result<EnvSpec> {
        let id = cfg.req("env")?;
        Ok(EnvSpec {
            id,
            theta: cfg.f64_or("env_theta", 0.1)?,
            mu: cfg.f64_or("env_mu", 1.0)?,
            sigma: cfg.f64_or("env_sigma", 0.02)?,
            t_max: cfg.usize_or("env_t", 50)?,
        })
    }

    pub fn build(&self) -> Result<Box<dyn Env>> {
        if self.id == "currency" {
            Ok(Box::new(CurrencyEnv::new(
                self.theta, self.mu, self.sigma, self.t_max,
            )))
        } else {
            make_env(&self.id)
        }
    }

    /// Cache key for normalization anchors: must change whenever the
    /// environment the anchors were measured on changes.
    pub fn cache_key(&self) -> String {
        if self.id == "currency" {
            format!(
                "currency-th{}-mu{}-sg{}-t{}",
                self.theta, self.mu, self.sigma, self.t_max
            )
        } else {
            self.id.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// Normalization anchors
// ---------------------------------------------------------------------------

pub const ANCHOR_EPISODES: usize = 1000;
const ANCHOR_SEED_RANDOM: u64 = 777;
const ANCHOR_SEED_REF: u64 = 778;

#[derive(Debug, Clone, Copy)]
pub struct Anchors {
    pub r_random: f64,
    pub r_ref: f64,
}

impl Anchors {
    /// Normalized score: 100·(R − R_random)/(R_ref − R_random).
    pub fn score(&self, r: f64) -> Result<f64> {
        let span = self.r_ref - self.r_random;
        if span.abs() < 1e-12 {
            return Err(Error::Numeric(
                "degenerate anchors: reference equals random".into(),
            ));
        }
        Ok(100.0 * (r - self.r_random) / span)
    }
}

fn rollout_mean(spec: &EnvSpec, policy: BehaviorPolicy, episodes: usize, seed: u64) -> Result<f64> {
    let mut env = spec.build()?;
    let eps = collect_dataset(env.as_mut(), policy, episodes, seed)?;
    Ok(eps.iter().map(|e| e.rewards.iter().sum::<f64>()).sum::<f64>() / episodes as f64)
}

/// Measure (or load cached) anchors: 1000-episode uniform-random and greedy
/// reference rollouts. The cache file lives beside the env config under
/// `cache_dir` when given.
pub fn compute_anchors(spec: &EnvSpec, cache_dir: Option<&Path>) -> Result<Anchors> {
    let cache = cache_dir.map(|d| d.join(format!("anchors-{}.txt", spec.cache_key())));
    if let Some(path) = &cache {
        if path.exists() {
            let text = fs::read_to_string(path)?;
            let mut r_random = None;
            let mut r_ref = None;
            for line in text.lines() {
                if let Some(v) = line.strip_prefix("r_random=") {
                    r_random = v.parse::<f64>().ok();
                }
                if let Some(v) = line.strip_prefix("r_ref=") {
                    r_ref = v.parse::<f64>().ok();
                }
            }
            if let (Some(r_random), Some(r_ref)) = (r_random, r_ref) {
                return Ok(Anchors { r_random, r_ref });
            }
            return Err(Error::parse(
                path.display().to_string(),
                "malformed anchor cache".to_string(),
            ));
        }
    }
    let r_random = rollout_mean(
        spec,
        BehaviorPolicy::UniformRandom,
        ANCHOR_EPISODES,
        ANCHOR_SEED_RANDOM,
    )?;
    let r_ref = rollout_mean(
        spec,
        BehaviorPolicy::NoisyGreedy { rho: 0.0 },
        ANCHOR_EPISODES,
        ANCHOR_SEED_REF,
    )?;
    if let Some(path) = &cache {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(
            path,
            format!("r_random={}\nr_ref={}\n", fmt_f64(r_random), fmt_f64(r_ref)),
        )?;
    }
    Ok(Anchors { r_random, r_ref })
}

// ---------------------------------------------------------------------------
// Closed-loop evaluation engine
// ---------------------------------------------------------------------------

/// One evaluation run: seeds × episodes of polling control (re-plan every
/// step, execute one primitive action).
#[derive(Debug, Clone)]
pub struct EvalSpec {
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub macro_len: usize,
    pub horizon: usize,
    /// Template planner config; the per-decision seed is derived from
    /// (seed, episode, step) so results are independent of thread count.
    pub mcts: MctsConfig,
    pub threads: usize,
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.horizon % self.macro_len != 0 {
            return Err(Error::Config(format!(
                "horizon {} must be a positive multiple of L={}",
                self.horizon, self.macro_len
            )));
        }
        if self.episodes == 0 || self.seeds.is_empty() {
            return Err(Error::Config("need >= 1 seed and >= 1 episode".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub seed: u64,
    pub ep: usize,
    pub ret: f64,
    pub steps: usize,
    pub prebuild_ms: Vec<f64>,
    pub search_ms: Vec<f64>,
    pub warnings: usize,
}

fn run_episode<P: PriorModel>(
    env_spec: &EnvSpec,
    spec: &EvalSpec,
    codec: &CodecParams,
    prior: &P,
    norm: &NormStats,
    seed: u64,
    ep: usize,
) -> Result<EpisodeResult> {
    let mut env = env_spec.build()?;
    let (lo, hi) = env.action_bounds();
    let ep_seed = seed.wrapping_mul(10_000).wrapping_add(ep as u64);
    let mut env_rng = stream_rng(ep_seed, streams::EVAL);
    let mut state = env.reset(&mut env_rng);
    let depth_cap = spec.horizon / spec.macro_len;
    let mut res = EpisodeResult {
        seed,
        ep,
        ret: 0.0,
        steps: 0,
        prebuild_ms: Vec::new(),
        search_ms: Vec::new(),
        warnings: 0,
    };
    for t in 0..env.horizon() {
        let world = CodecWorld::new(codec, prior, norm, &state, depth_cap)?;
        let s0 = CodecNodeState {
            s_norm: world.root_s_norm.clone(),
            prefix: Vec::new(),
        };
        let mut cfg = spec.mcts.clone();
        cfg.seed = ep_seed.wrapping_mul(1_000).wrapping_add(t as u64);
        let stats = plan(&world, s0, &cfg, env.l())?;
        let action: Vec<f64> = stats.action.iter().map(|a| a.clamp(lo, hi)).collect();
        let (next, r, done) = env.step(&action, &mut env_rng)?;
        res.ret += r;
        res.steps += 1;
        res.prebuild_ms.push(stats.prebuild_ms);
        res.search_ms.push(stats.search_ms);
        res.warnings += stats.warnings.len();
        state = next;
        if done {
            break;
        }
    }
    Ok(res)
}

/// Run all episodes, optionally on parallel workers. Each episode is fully
/// independent (own env instance, own derived seeds), so the returned values
/// are byte-identical for any thread count; only wall-clock timings vary.
pub fn run_eval<P: PriorModel + Sync>(
    env_spec: &EnvSpec,
    spec: &EvalSpec,
    codec: &CodecParams,
    prior: &P,
    norm: &NormStats,
) -> Result<Vec<EpisodeResult>> {
    spec.validate()?;
    let work: Vec<(u64, usize)> = spec
        .seeds
        .iter()
        .flat_map(|&s| (0..spec.episodes).map(move |e| (s, e)))
        .collect();
    let threads = spec.threads.max(1).min(work.len());
    if threads == 1 {
        return work
            .iter()
            .map(|&(s, e)| run_episode(env_spec, spec, codec, prior, norm, s, e))
            .collect();
    }
    let mut results: Vec<Option<Result<EpisodeResult>>> = (0..work.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..threads {
            let work = &work;
            let handle = scope.spawn(move || -> Vec<(usize, Result<EpisodeResult>)> {
                work.iter()
                    .enumerate()
                    .filter(|(i, _)| i % threads == w)
                    .map(|(i, &(s, e))| (i, run_episode(env_spec, spec, codec, prior, norm, s, e)))
                    .collect()
            });
            handles.push(handle);
        }
        for handle in handles {
            for (i, r) in handle.join().expect("eval worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    results.into_iter().map(|r| r.expect("missing episode")).collect()
}

/// Aggregate per-episode results into report lines (returns + timing).
fn eval_summary(results: &[EpisodeResult], anchors: &Anchors, threads: usize) -> Result<String> {
    let returns: Vec<f64> = results.iter().map(|r| r.ret).collect();
    let pre: Vec<f64> = results.iter().flat_map(|r| r.prebuild_ms.iter().copied()).collect();
    let srch: Vec<f64> = results.iter().flat_map(|r| r.search_ms.iter().copied()).collect();
    let total: Vec<f64> = pre.iter().zip(&srch).map(|(a, b)| a + b).collect();
    let m = mean(&returns);
    let mut out = String::new();
    for r in results {
        let _ = writeln!(
            out,
            "episode seed={} ep={} return={} steps={}",
            r.seed,
            r.ep,
            fmt_f64(r.ret),
            r.steps
        );
    }
    let _ = writeln!(out, "episodes={}", results.len());
    let _ = writeln!(out, "mean_return={}", fmt_f64(m));
    let _ = writeln!(out, "stderr_return={}", fmt_f64(sem(&returns)));
    let _ = writeln!(out, "r_random={}", fmt_f64(anchors.r_random));
    let _ = writeln!(out, "r_ref={}", fmt_f64(anchors.r_ref));
    let _ = writeln!(out, "normalized_score={}", fmt_f64(anchors.score(m)?));
    let _ = writeln!(out, "workers={threads}");
    // timing.* keys are wall-clock measurements: excluded from the
    // bit-exact reproducibility audit by construction.
    let _ = writeln!(out, "timing.plan_ms_mean={:.4}", mean(&total));
    let _ = writeln!(out, "timing.plan_ms_p50={:.4}", percentile(&total, 50.0));
    let _ = writeln!(out, "timing.plan_ms_p90={:.4}", percentile(&total, 90.0));
    let _ = writeln!(out, "timing.prebuild_ms_mean={:.4}", mean(&pre));
    let _ = writeln!(out, "timing.search_ms_mean={:.4}", mean(&srch));
    Ok(out)
}

/// Planner configuration from flat keys; gamma_macro = gamma^L.
fn mcts_from_cfg(cfg: &KvConfig, macro_len: usize) -> Result<MctsConfig> {
    let gamma = cfg.f64_or("gamma", 0.99)?;
    let gamma_macro = gamma.powi(macro_len as i32);
    let selection = match cfg.str_or("selection", "uct").as_str() {
        "uct" => Selection::Uct,
        "puct" => Selection::Puct,
        other => return Err(Error::Config(format!("unknown selection {other:?}"))),
    };
    let search_b = cfg.usize_or("search_b", 0)?;
    let top_k = cfg.usize_or("top_k", 0)?;
    let mc = MctsConfig {
        iterations: cfg.usize_or("iterations", 100)?,
        c: cfg.f64_or("c", 1.0)?,
        alpha: cfg.f64_or("alpha", 0.1)?,
        epsilon: cfg.f64_or("epsilon", 1.0)?,
        selection,
        gamma_macro,
        prebuild: PrebuildConfig {
            m: cfg.usize_or("m", 16)?,
            n_outcomes: cfg.usize_or("n_outcomes", 4)?,
            b: cfg.usize_or("b", 4)?,
            lambda: cfg.f64_or("lambda", 0.5)?,
            gamma_macro,
            node_budget: cfg.usize_or("node_budget", 4096)?,
            recursive: cfg.bool_or("recursive", true)?,
            sample: SampleConfig {
                temperature: cfg.f64_or("temperature", 1.0)?,
                top_k: if top_k == 0 { usize::MAX } else { top_k },
            },
        },
        commit_max_n: cfg.bool_or("commit_max_n", false)?,
        search_b: if search_b == 0 { None } else { Some(search_b) },
        seed: cfg.u64_or("seed", 0)?,
    };
    mc.validate()?;
    Ok(mc)
}

// ---------------------------------------------------------------------------
// Heatmaps
// ---------------------------------------------------------------------------

/// Empirical latent transition matrix over the top-F frequent codes.
#[derive(Debug, Clone)]
pub struct Heatmap {
    /// The top-F code ids, most frequent first.
    pub codes: Vec<usize>,
    /// F×F row-stochastic matrix P(z_{t+1} | z_t) restricted to `codes`.
    pub matrix: Vec<Vec<f64>>,
    /// Distinct successors per row (before normalization).
    pub row_support: Vec<usize>,
    /// Rows with zero support, emitted as uniform.
    pub zero_rows: Vec<bool>,
    /// Marginal frequency of z_t per code id (full codebook).
    pub hist_from: Vec<u64>,
    /// Marginal frequency of z_{t+1} per code id (full codebook).
    pub hist_to: Vec<u64>,
    /// Total consecutive-code transitions encoded from the corpus.
    pub transitions: u64,
    pub warnings: Vec<String>,
}

/// Count consecutive-code transitions per episode and restrict to the top-F
/// frequent codes. Shrinks F with a warning when the corpus has fewer
/// distinct codes.
pub fn build_heatmap(code_seqs: &[Vec<usize>], k: usize, f: usize) -> Result<Heatmap> {
    if f == 0 {
        return Err(Error::Config("F must be >= 1".into()));
    }
    let mut freq = vec![0u64; k];
    let mut hist_from = vec![0u64; k];
    let mut hist_to = vec![0u64; k];
    let mut counts: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut transitions = 0u64;
    for seq in code_seqs {
        for &z in seq {
            if z >= k {
                return Err(Error::InvalidInput(format!("code {z} out of range K={k}")));
            }
            freq[z] += 1;
        }
        for w in seq.windows(2) {
            *counts.entry((w[0], w[1])).or_insert(0) += 1;
            hist_from[w[0]] += 1;
            hist_to[w[1]] += 1;
            transitions += 1;
        }
    }
    if transitions == 0 {
        return Err(Error::InvalidInput("corpus has no transitions".into()));
    }
    let mut warnings = Vec::new();
    let distinct = freq.iter().filter(|&&c| c > 0).count();
    let f_eff = if distinct < f {
        warnings.push(format!(
            "corpus has only {distinct} distinct codes; shrinking F from {f}"
        ));
        distinct
    } else {
        f
    };
    // top-F by occurrence frequency, ties broken by lower code id
    let mut order: Vec<usize> = (0..k).filter(|&z| freq[z] > 0).collect();
    order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
    let codes: Vec<usize> = order.into_iter().take(f_eff).collect();
    let index: BTreeMap<usize, usize> = codes.iter().enumerate().map(|(i, &z)| (z, i)).collect();

    let mut matrix = vec![vec![0.0; f_eff]; f_eff];
    for (&(a, b), &c) in &counts {
        if let (Some(&i), Some(&j)) = (index.get(&a), index.get(&b)) {
            matrix[i][j] = c as f64;
        }
    }
    let mut row_support = Vec::with_capacity(f_eff);
    let mut zero_rows = Vec::with_capacity(f_eff);
    for row in matrix.iter_mut() {
        let support = row.iter().filter(|&&v| v > 0.0).count();
        row_support.push(support);
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            zero_rows.push(false);
            for v in row.iter_mut() {
                *v /= sum;
            }
        } else {
            zero_rows.push(true);
            let u = 1.0 / f_eff as f64;
            for v in row.iter_mut() {
                *v = u;
            }
        }
    }
    Ok(Heatmap {
        codes,
        matrix,
        row_support,
        zero_rows,
        hist_from,
        hist_to,
        transitions,
        warnings,
    })
}

/// Median over rows of the distinct-successor count (zero-support rows count
/// as 0, matching "spread" semantics).
pub fn median_row_support(h: &Heatmap) -> f64 {
    median_u(&h.row_support)
}

/// Median over supported rows of the largest single transition probability.
pub fn median_row_max(h: &Heatmap) -> f64 {
    let maxes: Vec<f64> = h
        .matrix
        .iter()
        .zip(&h.zero_rows)
        .filter(|(_, &z)| !z)
        .map(|(row, _)| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    median_f(&maxes)
}

fn write_heatmap_csv(prefix: &Path, h: &Heatmap) -> Result<(PathBuf, PathBuf)> {
    let matrix_path = prefix.with_extension("matrix.csv");
    let hist_path = prefix.with_extension("hist.csv");
    let mut out = String::from("code");
    for &z in &h.codes {
        let _ = write!(out, ",{z}");
    }
    out.push_str(",zero_support\n");
    for (i, row) in h.matrix.iter().enumerate() {
        let _ = write!(out, "{}", h.codes[i]);
        for v in row {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        let _ = writeln!(out, ",{}", if h.zero_rows[i] { 1 } else { 0 });
    }
    fs::write(&matrix_path, out)?;
    let mut out = String::from("code,from_count,to_count\n");
    for z in 0..h.hist_from.len() {
        let _ = writeln!(out, "{z},{},{}", h.hist_from[z], h.hist_to[z]);
    }
    fs::write(&hist_path, out)?;
    Ok((matrix_path, hist_path))
}

// ---------------------------------------------------------------------------
// Command output and dispatch
// ---------------------------------------------------------------------------

/// A finished command: the report text plus the process exit code (0 ok,
/// 4 when a built-in acceptance check failed).
#[derive(Debug)]
pub struct CmdOutput {
    pub report: String,
    pub exit: i32,
}

impl CmdOutput {
    fn ok(report: String) -> CmdOutput {
        CmdOutput { report, exit: 0 }
    }
}

/// Exit code for an error: 2 for configuration/input problems, 3 for
/// numeric failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

/// Dispatch a subcommand by name.
pub fn run(cmd: &str, cfg: &KvConfig) -> Result<CmdOutput> {
    match cmd {
        "gen-data" => cmd_gen_data(cfg),
        "train-codec" => cmd_train_codec(cfg),
        "train-prior" => cmd_train_prior(cfg),
        "eval" => cmd_eval(cfg),
        "bench-preconstruct" => cmd_bench_preconstruct(cfg),
        "ablate" => cmd_ablate(cfg),
        "heatmap" => cmd_heatmap(cfg),
        "oracle-compare" => cmd_oracle_compare(cfg),
        other => Err(Error::Config(format!(
            "unknown command {other:?} (expected gen-data|train-codec|train-prior|eval|\
             bench-preconstruct|ablate|heatmap|oracle-compare)"
        ))),
    }
}

fn out_path(cfg: &KvConfig) -> Result<PathBuf> {
    Ok(PathBuf::from(cfg.req("out")?))
}

/// Report-producing commands persist their report at `out` when given.
fn maybe_write_report(cfg: &KvConfig, report: &str) -> Result<()> {
    let out = cfg.str_or("out", "");
    if !out.is_empty() {
        let path = PathBuf::from(out);
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, report)?;
    }
    Ok(())
}

fn anchors_cache_dir(cfg: &KvConfig) -> Option<PathBuf> {
    let dir = cfg.str_or("anchors_cache", "");
    (!dir.is_empty()).then(|| PathBuf::from(dir))
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn cmd_gen_data(cfg: &KvConfig) -> Result<CmdOutput> {
    let env_spec = EnvSpec::from_cfg(cfg)?;
    let policy = BehaviorPolicy::parse(&cfg.str_or("policy", "random"))?;
    let episodes = cfg.usize_or("episodes", 300)?;
    let seed = cfg.u64_or("seed", 0)?;
    let macro_len = cfg.usize_or("macro_len", 3)?;
    let gamma = cfg.f64_or("gamma", 0.99)?;
    let out = out_path(cfg)?;

    let mut env = env_spec.build()?;
    let raw = collect_dataset(env.as_mut(), policy, episodes, seed)?;
    let transitions: usize = raw.iter().map(|e| e.len()).sum();
    let mean_ret = mean(&raw.iter().map(|e| e.rewards.iter().sum()).collect::<Vec<f64>>());
    let mut ds = Dataset::from_episodes(raw, macro_len, gamma)?;
    ds.comment = Some(format!(
        "{} policy={} episodes={} seed={}",
        env.config_echo(),
        cfg.str_or("policy", "random"),
        episodes,
        seed
    ));
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    save_dataset(&out, &ds)?;

    let mut report = String::from("cmd=gen-data\n");
    report.push_str(&cfg.echo_resolved());
    let _ = writeln!(report, "env_echo={}", env.config_echo());
    let _ = writeln!(report, "episodes_written={episodes}");
    let _ = writeln!(report, "transitions={transitions}");
    let _ = writeln!(report, "chunks={}", ds.chunks.len());
    let _ = writeln!(report, "mean_return={}", fmt_f64(mean_ret));
    let _ = writeln!(report, "file={}", out.display());
    let _ = writeln!(report, "file_sha256={}", sha256_file(&out)?);
    Ok(CmdOutput::ok(report))
}

// ---------------------------------------------------------------------------
// train-codec / train-prior
// ---------------------------------------------------------------------------

fn codec_train_cfg(cfg: &KvConfig) -> Result<CodecTrainConfig> {
    let d = CodecTrainConfig::default();
    Ok(CodecTrainConfig {
        lr: cfg.f64_or("lr", d.lr)?,
        batch_size: cfg.usize_or("batch", d.batch_size)?,
        epochs: cfg.usize_or("epochs", d.epochs)?,
        beta: cfg.f64_or("beta", d.beta)?,
        seed: cfg.u64_or("seed", 0)?,
        k: cfg.usize_or("k", d.k)?,
        d: cfg.usize_or("d", d.d)?,
        masked: cfg.bool_or("masked", true)?,
        align_l1: cfg.bool_or("align_l1", false)?,
    })
}

/// Gradient audit over fresh random inits: 10 seeds, PASS/FAIL per seed.
/// Exit 4 (acceptance failure) when any seed exceeds the tolerance.
fn run_grad_check(ds: &Dataset, tc: &CodecTrainConfig, cfg: &KvConfig) -> Result<CmdOutput> {
    let seeds = cfg.u64_list_or("grad_check_seeds", "0,1,2,3,4,5,6,7,8,9")?;
    let batch_n = cfg.usize_or("grad_check_batch", 4)?;
    let dims = CodecDims {
        n: ds.n,
        l: ds.l,
        macro_len: ds.macro_len,
        d: tc.d,
        k: tc.k,
    };
    let opts = LossOpts {
        masked: tc.masked,
        align_l1: tc.align_l1,
        recon_only: false,
    };
    let mut report = String::from("cmd=train-codec mode=grad_check\n");
    report.push_str(&cfg.echo_resolved());
    let mut all_pass = true;
    for &seed in &seeds {
        let mut rng = stream_rng(seed, streams::CODEC_INIT);
        let params = CodecParams::init(dims, tc.beta, &mut rng);
        let take = batch_n.min(ds.chunks.len());
        let batch: Vec<_> = ds.chunks.iter().take(take).cloned().collect();
        let rep = grad_check(&params, &batch, opts)?;
        all_pass &= rep.pass;
        let _ = writeln!(
            report,
            "grad_check seed={seed} max_rel_err={} status={}",
            fmt_f64(rep.max_rel_err),
            if rep.pass { "PASS" } else { "FAIL" }
        );
    }
    let _ = writeln!(report, "grad_check_overall={}", if all_pass { "PASS" } else { "FAIL" });
    Ok(CmdOutput {
        report,
        exit: if all_pass { 0 } else { 4 },
    })
}

fn cmd_train_codec(cfg: &KvConfig) -> Result<CmdOutput> {
    let data = PathBuf::from(cfg.req("data")?);
    let ds = load_dataset(&data)?;
    let tc = codec_train_cfg(cfg)?;
    if cfg.bool_or("grad_check", false)? {
        return run_grad_check(&ds, &tc, cfg);
    }
    let out = out_path(cfg)?;
    let (params, rep) = codec::train_codec(&ds, &tc)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    save_codec(&out, &params)?;

    let mut report = String::from("cmd=train-codec\n");
    report.push_str(&cfg.echo_resolved());
    for (i, l) in rep.epoch_loss.iter().enumerate() {
        let _ = writeln!(report, "epoch={i} loss={}", fmt_f64(*l));
    }
    let used = rep.usage.iter().filter(|&&u| u > 0).count();
    let _ = writeln!(report, "initial_recon_mse={}", fmt_f64(rep.initial_recon_mse));
    let _ = writeln!(report, "final_recon_mse={}", fmt_f64(rep.final_recon_mse));
    let _ = writeln!(report, "final_loss={}", fmt_f64(*rep.epoch_loss.last().unwrap()));
    let _ = writeln!(report, "codebook_used={used}/{}", tc.k);
    let _ = writeln!(report, "dead_code_resets={}", rep.dead_code_resets);
    let _ = writeln!(report, "checkpoint={}", out.display());
    let _ = writeln!(report, "checkpoint_sha256={}", sha256_file(&out)?);
    fs::write(out.with_extension("report.txt"), &report)?;
    Ok(CmdOutput::ok(report))
}

fn cmd_train_prior(cfg: &KvConfig) -> Result<CmdOutput> {
    let data = PathBuf::from(cfg.req("data")?);
    let codec_path = PathBuf::from(
        cfg.req("codec")
            .map_err(|_| Error::Config("prior training requires a codec checkpoint (key codec)".into()))?,
    );
    let out = out_path(cfg)?;
    let kind = cfg.str_or("type", "neural");
    let ds = load_dataset(&data)?;
    let params = load_codec(&codec_path)?;
    let codes = tokenize_dataset(&params, &ds)?;

    let mut report = String::from("cmd=train-prior\n");
    report.push_str(&cfg.echo_resolved());
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    match kind.as_str() {
        "neural" => {
            let d = PriorTrainConfig::default();
            let pc = PriorTrainConfig {
                lr: cfg.f64_or("lr", d.lr)?,
                batch_size: cfg.usize_or("batch", d.batch_size)?,
                epochs: cfg.usize_or("epochs", d.epochs)?,
                d: cfg.usize_or("d", d.d)?,
                seed: cfg.u64_or("seed", 0)?,
            };
            let (model, rep) = train_neural_prior(&codes, params.dims.k, &pc)?;
            save_neural_prior(&out, &model)?;
            for (i, ce) in rep.epoch_cross_entropy.iter().enumerate() {
                let _ = writeln!(
                    report,
                    "epoch={i} cross_entropy={} perplexity={}",
                    fmt_f64(*ce),
                    fmt_f64(rep.epoch_perplexity[i])
                );
            }
            let _ = writeln!(report, "final_cross_entropy={}", fmt_f64(rep.final_cross_entropy));
        }
        "tabular" => {
            let model = fit_tabular(&codes, params.dims.k, ds.n)?;
            save_tabular_prior(&out, &model)?;
            let _ = writeln!(report, "contexts={}", codes.len());
        }
        other => return Err(Error::Config(format!("unknown prior type {other:?}"))),
    }
    let _ = writeln!(report, "checkpoint={}", out.display());
    let _ = writeln!(report, "checkpoint_sha256={}", sha256_file(&out)?);
    fs::write(out.with_extension("report.txt"), &report)?;
    Ok(CmdOutput::ok(report))
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct LoadedModels {
    codec: CodecParams,
    prior: AnyPrior,
    norm: NormStats,
    codec_sha: String,
    prior_sha: String,
}

fn load_models(cfg: &KvConfig) -> Result<LoadedModels> {
    let data = PathBuf::from(cfg.req("data")?);
    let codec_path = PathBuf::from(cfg.req("codec")?);
    let prior_path = PathBuf::from(cfg.req("prior")?);
    let kind = cfg.str_or("prior_type", "neural");
    let ds = load_dataset(&data)?;
    Ok(LoadedModels {
        codec: load_codec(&codec_path)?,
        prior: load_prior(&kind, &prior_path)?,
        norm: ds.norm,
        codec_sha: sha256_file(&codec_path)?,
        prior_sha: sha256_file(&prior_path)?,
    })
}

fn eval_spec_from_cfg(cfg: &KvConfig) -> Result<EvalSpec> {
    let macro_len = cfg.usize_or("macro_len", 3)?;
    let spec = EvalSpec {
        seeds: cfg.u64_list_or("seeds", "0,1,2")?,
        episodes: cfg.usize_or("episodes", 20)?,
        macro_len,
        horizon: cfg.usize_or("horizon", 9)?,
        mcts: mcts_from_cfg(cfg, macro_len)?,
        threads: cfg.usize_or("threads", 1)?,
    };
    spec.validate()?;
    Ok(spec)
}

fn cmd_eval(cfg: &KvConfig) -> Result<CmdOutput> {
    let env_spec = EnvSpec::from_cfg(cfg)?;
    let models = load_models(cfg)?;
    let spec = eval_spec_from_cfg(cfg)?;
    if models.codec.dims.macro_len != spec.macro_len {
        return Err(Error::DimMismatch(format!(
            "codec trained with L={} but eval requests L={}",
            models.codec.dims.macro_len, spec.macro_len
        )));
    }
    let cache_dir = anchors_cache_dir(cfg);
    let anchors = compute_anchors(&env_spec, cache_dir.as_deref())?;
    let results = run_eval(&env_spec, &spec, &models.codec, &models.prior, &models.norm)?;

    let mut report = String::from("cmd=eval\n");
    report.push_str(&cfg.echo_resolved());
    let _ = writeln!(report, "codec_sha256={}", models.codec_sha);
    let _ = writeln!(report, "prior_sha256={}", models.prior_sha);
    report.push_str(&eval_summary(&results, &anchors, spec.threads)?);
    maybe_write_report(cfg, &report)?;
    Ok(CmdOutput::ok(report))
}

// ---------------------------------------------------------------------------
// bench-preconstruct
// ---------------------------------------------------------------------------

fn cmd_bench_preconstruct(cfg: &KvConfig) -> Result<CmdOutput> {
    let env_spec = EnvSpec::from_cfg(cfg)?;
    let models = load_models(cfg)?;
    let base_spec = eval_spec_from_cfg(cfg)?;
    let budgets = cfg.usize_list_or("budgets", "10,50,100")?;
    let anchors = compute_anchors(&env_spec, anchors_cache_dir(cfg).as_deref())?;

    let mut report = String::from("cmd=bench-preconstruct\n");
    report.push_str(&cfg.echo_resolved());
    let _ = writeln!(report, "codec_sha256={}", models.codec_sha);
    let _ = writeln!(report, "prior_sha256={}", models.prior_sha);
    let mut csv = String::from(
        "variant,budget,mean_return,sem_return,prebuild_ms_mean,search_ms_mean,plan_ms_mean\n",
    );
    for &budget in &budgets {
        for variant in ["prebuilt", "vanilla"] {
            let mut spec = base_spec.clone();
            spec.mcts.iterations = budget;
            if variant == "vanilla" {
                // no cache: root candidates only, all kept, unbounded widening
                spec.mcts.prebuild.recursive = false;
                spec.mcts.prebuild.lambda = 1.0;
                spec.mcts.alpha = 1.0;
            }
            let results = run_eval(&env_spec, &spec, &models.codec, &models.prior, &models.norm)?;
            let rets: Vec<f64> = results.iter().map(|r| r.ret).collect();
            let pre: Vec<f64> = results.iter().flat_map(|r| r.prebuild_ms.iter().copied()).collect();
            let srch: Vec<f64> = results.iter().flat_map(|r| r.search_ms.iter().copied()).collect();
            let (m, s) = (mean(&rets), sem(&rets));
            let (pm, sm) = (mean(&pre), mean(&srch));
            let _ = writeln!(
                report,
                "bench variant={variant} budget={budget} mean_return={} sem_return={} \
                 normalized_score={}",
                fmt_f64(m),
                fmt_f64(s),
                fmt_f64(anchors.score(m)?)
            );
            // both latency readings: search-only (cache treated as free) and
            // end-to-end including the per-decision cache build
            let _ = writeln!(
                report,
                "timing.bench variant={variant} budget={budget} prebuild_ms={pm:.4} \
                 search_ms={sm:.4} plan_ms={:.4} cache_build_dominates={}",
                pm + sm,
                pm > sm
            );
            let _ = writeln!(
                csv,
                "{variant},{budget},{},{},{pm:.4},{sm:.4},{:.4}",
                fmt_f64(m),
                fmt_f64(s),
                pm + sm
            );
        }
    }
    let out = cfg.str_or("out", "");
    if !out.is_empty() {
        fs::write(PathBuf::from(&out).with_extension("csv"), &csv)?;
    }
    maybe_write_report(cfg, &report)?;
    Ok(CmdOutput::ok(report))
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

/// One trained artifact set for an ablation arm.
struct AblationModels {
    codec: CodecParams,
    prior: AnyPrior,
    norm: NormStats,
}

fn train_arm(
    episodes: &[crate::trajectory::EpisodeRaw],
    macro_len: usize,
    gamma: f64,
    masked: bool,
    tc_base: &CodecTrainConfig,
    pc_base: &PriorTrainConfig,
) -> Result<AblationModels> {
    let ds = Dataset::from_episodes(episodes.to_vec(), macro_len, gamma)?;
    let tc = CodecTrainConfig {
        masked,
        ..tc_base.clone()
    };
    let (params, _) = codec::train_codec(&ds, &tc)?;
    let codes = tokenize_dataset(&params, &ds)?;
    let (prior, _) = train_neural_prior(&codes, tc.k, pc_base)?;
    Ok(AblationModels {
        codec: params,
        prior: AnyPrior::Neural(prior),
        norm: ds.norm,
    })
}

/// The Appendix-A-style ablation matrix on chain-high: macro length, horizon,
/// selection rule, masked loss, progressive widening, parallel expansion.
/// `seeds` are training seeds: every arm is retrained and re-evaluated per
/// seed and each arm pools its episode returns across seeds, so arm
/// differences are not hostage to a single training draw.
fn cmd_ablate(raw_cfg: &KvConfig) -> Result<CmdOutput> {
    // ablation-specific planner defaults: a *binding* node budget, so
    // search-time expansion and widening do real work and their axes have
    // observable effect
    let mut tuned = raw_cfg.clone();
    tuned.set_default("env", "chain-high");
    tuned.set_default("node_budget", "96");
    tuned.set_default("n_outcomes", "4");
    tuned.set_default("b", "4");
    let cfg = &tuned;
    let env_spec = EnvSpec::from_cfg(cfg)?;
    let gamma = cfg.f64_or("gamma", 0.99)?;
    let data_episodes = cfg.usize_or("data_episodes", 150)?;
    let policy = BehaviorPolicy::parse(&cfg.str_or("policy", "medium"))?;
    let anchors = compute_anchors(&env_spec, anchors_cache_dir(cfg).as_deref())?;

    let seeds = cfg.u64_list_or("seeds", "0,1,2")?;
    let episodes = cfg.usize_or("episodes", 20)?;
    let threads = cfg.usize_or("threads", 1)?;
    let default_h = cfg.usize_or("horizon", 9)?;
    let base_mcts = |macro_len: usize| -> Result<MctsConfig> { mcts_from_cfg(cfg, macro_len) };

    // accumulated episode returns per arm, keyed (order, axis, variant, L, h)
    let mut pooled: BTreeMap<(usize, String, String, usize, usize), Vec<f64>> = BTreeMap::new();
    for &tseed in &seeds {
        let tc_base = CodecTrainConfig {
            epochs: cfg.usize_or("codec_epochs", 40)?,
            k: cfg.usize_or("k", 16)?,
            d: cfg.usize_or("d", 12)?,
            lr: cfg.f64_or("codec_lr", 1e-3)?,
            seed: tseed,
            ..CodecTrainConfig::default()
        };
        let pc_base = PriorTrainConfig {
            epochs: cfg.usize_or("prior_epochs", 30)?,
            seed: tseed,
            ..PriorTrainConfig::default()
        };
        let mut env = env_spec.build()?;
        let raw = collect_dataset(env.as_mut(), policy, data_episodes, tseed)?;
        drop(env);

        // four trainings cover every arm: base (L=3 masked), unmasked (L=3),
        // L=1, L=5; search-time arms reuse the base models
        let base = train_arm(&raw, 3, gamma, true, &tc_base, &pc_base)?;
        let unmasked = train_arm(&raw, 3, gamma, false, &tc_base, &pc_base)?;
        let l1 = train_arm(&raw, 1, gamma, true, &tc_base, &pc_base)?;
        let l5 = train_arm(&raw, 5, gamma, true, &tc_base, &pc_base)?;

        // (axis, variant, models, L, horizon, planner tweak)
        let mut arms: Vec<(&str, &str, &AblationModels, usize, usize, MctsConfig)> = Vec::new();
        arms.push(("base", "base", &base, 3, default_h, base_mcts(3)?));
        // the L axis holds the primitive-step horizon (nearly) fixed: L=1
        // must spend depth to reach as far as one L=3 macro, L=5 overshoots
        arms.push(("macro_len", "L1", &l1, 1, default_h, base_mcts(1)?));
        arms.push(("macro_len", "L5", &l5, 5, (default_h + 4) / 5 * 5, base_mcts(5)?));
        arms.push(("horizon", "h3", &base, 3, 3, base_mcts(3)?));
        let mut puct = base_mcts(3)?;
        puct.selection = Selection::Puct;
        arms.push(("selection", "puct", &base, 3, default_h, puct));
        arms.push(("masked", "unmasked", &unmasked, 3, default_h, base_mcts(3)?));
        let mut now = base_mcts(3)?;
        // widening off: alpha=1 with effectively unbounded epsilon
        now.alpha = 1.0;
        now.epsilon = 1e18;
        arms.push(("widening", "off", &base, 3, default_h, now));
        let mut npar = base_mcts(3)?;
        // parallel expansion off: B=1 at search-time expansion, pre-build unchanged
        npar.search_b = Some(1);
        arms.push(("parallel", "off", &base, 3, default_h, npar));

        for (order, (axis, variant, models, macro_len, horizon, mc)) in
            arms.into_iter().enumerate()
        {
            let spec = EvalSpec {
                seeds: vec![tseed],
                episodes,
                macro_len,
                horizon,
                mcts: mc,
                threads,
            };
            let results =
                run_eval(&env_spec, &spec, &models.codec, &models.prior, &models.norm)?;
            pooled
                .entry((order, axis.into(), variant.into(), macro_len, horizon))
                .or_default()
                .extend(results.iter().map(|r| r.ret));
        }
    }

    let mut report = String::from("cmd=ablate\n");
    report.push_str(&cfg.echo_resolved());
    let _ = writeln!(report, "r_random={}", fmt_f64(anchors.r_random));
    let _ = writeln!(report, "r_ref={}", fmt_f64(anchors.r_ref));
    let mut csv = String::from("axis,variant,mean_return,sem_return,mean_score,sem_score\n");
    for ((_, axis, variant, macro_len, horizon), rets) in &pooled {
        let m = mean(rets);
        let span = (anchors.r_ref - anchors.r_random).abs().max(1e-12);
        let score_sem = 100.0 * sem(rets) / span;
        let _ = writeln!(
            report,
            "ablate axis={axis} variant={variant} L={macro_len} horizon={horizon} \
             mean_return={} sem_return={} mean_score={} sem_score={}",
            fmt_f64(m),
            fmt_f64(sem(rets)),
            fmt_f64(anchors.score(m)?),
            fmt_f64(score_sem)
        );
        let _ = writeln!(
            csv,
            "{axis},{variant},{},{},{},{}",
            fmt_f64(m),
            fmt_f64(sem(rets)),
            fmt_f64(anchors.score(m)?),
            fmt_f64(score_sem)
        );
    }
    let out = cfg.str_or("out", "");
    if !out.is_empty() {
        fs::write(PathBuf::from(&out).with_extension("csv"), &csv)?;
    }
    maybe_write_report(cfg, &report)?;
    Ok(CmdOutput::ok(report))
}

// ---------------------------------------------------------------------------
// heatmap
// ---------------------------------------------------------------------------

fn cmd_heatmap(cfg: &KvConfig) -> Result<CmdOutput> {
    let data = PathBuf::from(cfg.req("data")?);
    let codec_path = PathBuf::from(cfg.req("codec")?);
    let f = cfg.usize_or("f", 50)?;
    let out = out_path(cfg)?;
    let ds = load_dataset(&data)?;
    let params = load_codec(&codec_path)?;
    let seqs = encode_episode_codes(&params, &ds)?;
    let heat = build_heatmap(&seqs, params.dims.k, f)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let (matrix_path, hist_path) = write_heatmap_csv(&out, &heat)?;

    let mut report = String::from("cmd=heatmap\n");
    report.push_str(&cfg.echo_resolved());
    let _ = writeln!(report, "codec_sha256={}", sha256_file(&codec_path)?);
    for w in &heat.warnings {
        let _ = writeln!(report, "warning={w}");
    }
    let _ = writeln!(report, "f_effective={}", heat.codes.len());
    let _ = writeln!(report, "transitions={}", heat.transitions);
    let _ = writeln!(report, "median_row_support={}", fmt_f64(median_row_support(&heat)));
    let _ = writeln!(report, "median_row_max={}", fmt_f64(median_row_max(&heat)));
    let _ = writeln!(report, "matrix={}", matrix_path.display());
    let _ = writeln!(report, "hist={}", hist_path.display());

    // C.3 comparison: retrain with the L1 alignment term in place of the
    // squared one, on the same corpus and hyperparameters
    if cfg.bool_or("compare_l1", false)? {
        let tc = CodecTrainConfig {
            align_l1: true,
            k: params.dims.k,
            d: params.dims.d,
            epochs: cfg.usize_or("epochs", CodecTrainConfig::default().epochs)?,
            seed: cfg.u64_or("seed", 0)?,
            ..CodecTrainConfig::default()
        };
        let (l1_params, _) = codec::train_codec(&ds, &tc)?;
        let l1_seqs = encode_episode_codes(&l1_params, &ds)?;
        let l1_heat = build_heatmap(&l1_seqs, l1_params.dims.k, f)?;
        let l1_prefix = out.with_extension("l1");
        let (l1_matrix, _) = write_heatmap_csv(&l1_prefix, &l1_heat)?;
        let _ = writeln!(report, "l1_median_row_max={}", fmt_f64(median_row_max(&l1_heat)));
        let _ = writeln!(report, "l1_median_row_support={}", fmt_f64(median_row_support(&l1_heat)));
        let _ = writeln!(report, "l1_matrix={}", l1_matrix.display());
    }
    fs::write(out.with_extension("report.txt"), &report)?;
    Ok(CmdOutput::ok(report))
}

// ---------------------------------------------------------------------------
// oracle-compare
// ---------------------------------------------------------------------------

/// Agreement of plan() with exact expectimax on generated tabular latent
/// MDPs, across iteration budgets.
fn cmd_oracle_compare(cfg: &KvConfig) -> Result<CmdOutput> {
    let instances = cfg.usize_or("instances", 100)?;
    let gap = cfg.f64_or("gap", 0.2)?;
    let mdp_outcomes = cfg.usize_or("mdp_outcomes", 2)?;
    let budgets = cfg.usize_list_or("budgets", "100,400")?;
    let gamma_macro = cfg.f64_or("gamma", 0.99)?.powi(cfg.usize_or("macro_len", 3)? as i32);
    let seed0 = cfg.u64_or("seed", 0)?;
    let depth_max = cfg.usize_or("depth_max", 3)?;
    let k_list = cfg.usize_list_or("k_list", "4,6,8")?;

    let mut report = String::from("cmd=oracle-compare\n");
    report.push_str(&cfg.echo_resolved());
    for &budget in &budgets {
        let mut agree = 0usize;
        let mut gaps = Vec::with_capacity(instances);
        for i in 0..instances {
            let k = k_list[i % k_list.len()];
            let h = 1 + i % depth_max;
            let seed = seed0.wrapping_add(i as u64);
            let mdp = gen_tabular_latent_mdp(seed, k, h, mdp_outcomes, gap, gamma_macro)?;
            let world = TabularWorld { mdp: &mdp };
            // sampling density: agreement with the exact oracle is limited
            // by how well the prebuilt tree's empirical outcome distribution
            // matches the true one, so the oracle harness samples densely
            // (candidate draws cover every code w.h.p.; duplicates merge)
            let n_outcomes = if h == 1 { 256 } else { 128 };
            let mc = MctsConfig {
                iterations: budget,
                gamma_macro,
                seed,
                prebuild: PrebuildConfig {
                    m: 10 * k,
                    lambda: 1.0,
                    n_outcomes,
                    b: 10 * k,
                    gamma_macro,
                    node_budget: 200_000,
                    ..PrebuildConfig::default()
                },
                ..MctsConfig::default()
            };
            let stats = plan(&world, Some(0), &mc, 1)?;
            let (values, best) = expectimax_exact(&mdp, gamma_macro)?;
            if stats.chosen_code == best {
                agree += 1;
            }
            gaps.push(values[best] - values[stats.chosen_code]);
        }
        let _ = writeln!(
            report,
            "oracle budget={budget} instances={instances} agreement={} mean_value_gap={}",
            fmt_f64(agree as f64 / instances as f64),
            fmt_f64(mean(&gaps))
        );
    }
    maybe_write_report(cfg, &report)?;
    Ok(CmdOutput::ok(report))
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
