//! Pre-construction of the latent search space.
//!
//! Before search begins, candidate macro codes are sampled from the prior at
//! the root, ranked by their decoded returns, and the top-k cached with N
//! sampled stochastic outcomes each; cached outcome nodes are expanded
//! recursively (B candidates per node) down to the depth cap. The resulting
//! tree seeds MCTS with an informed frontier so early iterations are spent
//! comparing good candidates instead of discovering them.
//!
//! The planner is written against the [`LatentWorld`] trait so the same
//! search code runs on the codec+prior latent space and on exact tabular
//! MDPs used by the oracle tests.

use rand_chacha::ChaCha8Rng;

use crate::codec::{self, CodecParams};
use crate::error::{Error, Result};
use crate::nn::softmax;
use crate::prior::{sample_code, PriorModel, SampleConfig};
use crate::trajectory::NormStats;

/// A latent decision process the planner can search: codes are sampled from
/// per-node candidate distributions, edges have stochastic successor codes,
/// and realized outcomes carry a next state, an edge reward, and a value
/// hint for leaf evaluation.
pub trait LatentWorld {
    type State: Clone;

    fn num_codes(&self) -> usize;
    /// Depth cap in macro steps (horizon / L).
    fn max_depth(&self) -> usize;
    /// Logits over candidate codes z at a node.
    fn candidate_logits(&self, s: &Self::State) -> Result<Vec<f64>>;
    /// Logits over successor codes z' for edge (s, z).
    fn successor_logits(&self, s: &Self::State, z: usize) -> Result<Vec<f64>>;
    /// Ranking score for candidate z at s (decoded return of the macro code).
    fn candidate_hint(&self, s: &Self::State, z: usize) -> Result<f64>;
    /// Realize outcome (z, z'): successor state, edge reward, and the
    /// successor's value hint.
    fn transition(&self, s: &Self::State, z: usize, z_prime: usize) -> Result<WorldStep<Self::State>>;
    /// Decoded, de-normalized, clamped macro action for (s, z).
    fn macro_action(&self, s: &Self::State, z: usize) -> Result<Vec<f64>>;
}

pub struct WorldStep<S> {
    pub next: S,
    pub reward: f64,
    pub value_hint: f64,
}

// ---------------------------------------------------------------------------
// Tree arena
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PlanNode<S> {
    pub id: usize,
    pub state: S,
    pub depth: usize,
    /// Decoded return-to-go R̂ in normalized units (0 at the root).
    pub value_hint: f64,
    pub edges: Vec<PlanEdge>,
    pub visits: u64,
    /// Set once edges have been attached (distinguishes an unexpanded leaf
    /// from a node whose expansion produced no edges).
    pub expanded: bool,
}

#[derive(Debug, Clone)]
pub struct PlanEdge {
    pub code: usize,
    pub q: f64,
    pub n: u64,
    /// Candidate ranking score (decoded R̂ of the macro code itself).
    pub hint: f64,
    /// Prior probability at edge creation, for pUCT.
    pub prior_p: f64,
    pub outcomes: Vec<PlanOutcome>,
    /// Extremes of backed-up G values, for the Q-bounds invariant audit.
    pub g_min: f64,
    pub g_max: f64,
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub succ: usize,
    pub child: usize,
    pub mult: u64,
    pub visits: u64,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct PlanTree<S> {
    pub nodes: Vec<PlanNode<S>>,
    pub cfg: PrebuildConfig,
    /// Warnings accumulated during construction/search (no-op expansions,
    /// fallback decisions); surfaced in reports.
    pub warnings: Vec<String>,
}

/// Pre-construction knobs (Appendix-E style M, N, B, lambda).
#[derive(Debug, Clone)]
pub struct PrebuildConfig {
    /// Root candidate samples.
    pub m: usize,
    /// Sampled outcomes per cached edge.
    pub n_outcomes: usize,
    /// Candidate samples per non-root expansion.
    pub b: usize,
    /// Top-k fraction: k = ceil(lambda * M).
    pub lambda: f64,
    /// Per-macro discount used for initial Q estimates.
    pub gamma_macro: f64,
    /// Hard cap on prebuilt nodes (breadth-first); guards the L=1 ablation
    /// where the depth cap alone would allow an astronomical tree.
    pub node_budget: usize,
    /// Recursively expand cached outcomes to the depth cap. Off = vanilla
    /// MCTS (root candidates only, tree grown during search).
    pub recursive: bool,
    pub sample: SampleConfig,
}

impl Default for PrebuildConfig {
    fn default() -> Self {
        PrebuildConfig {
            m: 16,
            n_outcomes: 4,
            b: 4,
            lambda: 0.5,
            gamma_macro: 0.99f64.powi(3),
            node_budget: 100_000,
            recursive: true,
            sample: SampleConfig::default(),
        }
    }
}

/// k = ceil(lambda * M), clamped to [1, M].
pub fn top_k_count(m: usize, lambda: f64) -> Result<usize> {
    if m < 1 {
        return Err(Error::InvalidInput("M must be >= 1".into()));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Config(format!("lambda must be in (0,1], got {lambda}")));
    }
    Ok(((lambda * m as f64).ceil() as usize).clamp(1, m))
}

impl<S: Clone> PlanTree<S> {
    pub fn node(&self, id: usize) -> &PlanNode<S> {
        &self.nodes[id]
    }

    fn push_node(&mut self, state: S, depth: usize, value_hint: f64) -> usize {
        let id = self.nodes.len();
        self.nodes.push(PlanNode {
            id,
            state,
            depth,
            value_hint,
            edges: Vec::new(),
            visits: 0,
            expanded: false,
        });
        id
    }

    /// Line-oriented debug dump: `NODE id depth R̂ | EDGE z Q N | OUT z′ mult child`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for node in &self.nodes {
            out.push_str(&format!(
                "NODE {} {} {:.6}",
                node.id, node.depth, node.value_hint
            ));
            for e in &node.edges {
                out.push_str(&format!(" | EDGE {} {:.6} {}", e.code, e.q, e.n));
                for o in &e.outcomes {
                    out.push_str(&format!(" | OUT {} {} {}", o.succ, o.mult, o.child));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Sample `count` candidate codes and return them as (code, first-sample
/// order) pairs, deduplicated, ranked by hint descending with ties broken by
/// sample order.
fn sample_ranked_candidates<W: LatentWorld>(
    world: &W,
    state: &W::State,
    count: usize,
    sample: &SampleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<(usize, f64)>, Vec<f64>)> {
    let logits = world.candidate_logits(state)?;
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..count {
        let z = sample_code(&logits, sample, rng)?;
        if !order.contains(&z) {
            order.push(z);
        }
    }
    let mut ranked: Vec<(usize, usize, f64)> = Vec::with_capacity(order.len());
    for (pos, &z) in order.iter().enumerate() {
        ranked.push((z, pos, world.candidate_hint(state, z)?));
    }
    ranked.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.1.cmp(&b.1)));
    Ok((ranked.into_iter().map(|(z, _, h)| (z, h)).collect(), logits))
}

/// Attach edges for the given ranked candidates to `node_id`, sampling
/// `n_outcomes` successors per edge with (z, z') multiplicity merging.
fn attach_edges<W: LatentWorld>(
    tree: &mut PlanTree<W::State>,
    node_id: usize,
    world: &W,
    candidates: &[(usize, f64)],
    logits: &[f64],
    n_outcomes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let probs = softmax(logits);
    let depth = tree.nodes[node_id].depth;
    let sample = tree.cfg.sample;
    let gamma_macro = tree.cfg.gamma_macro;
    for &(z, hint) in candidates {
        let mut edge = PlanEdge {
            code: z,
            q: 0.0,
            n: 0,
            hint,
            prior_p: probs[z],
            outcomes: Vec::new(),
            g_min: f64::INFINITY,
            g_max: f64::NEG_INFINITY,
        };
        if n_outcomes > 0 {
            let state = tree.nodes[node_id].state.clone();
            let succ_logits = world.successor_logits(&state, z)?;
            for _ in 0..n_outcomes {
                let zp = sample_code(&succ_logits, &sample, rng)?;
                if let Some(o) = edge.outcomes.iter_mut().find(|o| o.succ == zp) {
                    o.mult += 1;
                    continue;
                }
                let step = world.transition(&state, z, zp)?;
                let child = tree.push_node(step.next, depth + 1, step.value_hint);
                edge.outcomes.push(PlanOutcome {
                    succ: zp,
                    child,
                    mult: 1,
                    visits: 0,
                    reward: step.reward,
                });
            }
            // informed initial Q: multiplicity-weighted one-step lookahead,
            // overwritten by the first real backup (N stays 0)
            let total: f64 = edge.outcomes.iter().map(|o| o.mult as f64).sum();
            edge.q = edge
                .outcomes
                .iter()
                .map(|o| {
                    o.mult as f64 * (o.reward + gamma_macro * tree.nodes[o.child].value_hint)
                })
                .sum::<f64>()
                / total;
        }
        tree.nodes[node_id].edges.push(edge);
    }
    tree.nodes[node_id].expanded = true;
    Ok(())
}

/// Build the root frontier: M sampled candidates, top-k cached by decoded
/// return, N outcomes each.
pub fn build_root<W: LatentWorld>(
    world: &W,
    s0: W::State,
    cfg: &PrebuildConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PlanTree<W::State>> {
    let k = top_k_count(cfg.m, cfg.lambda)?;
    let mut tree = PlanTree {
        nodes: Vec::new(),
        cfg: cfg.clone(),
        warnings: Vec::new(),
    };
    tree.push_node(s0, 0, 0.0);
    let root_state = tree.nodes[0].state.clone();
    let (ranked, logits) = sample_ranked_candidates(world, &root_state, cfg.m, &cfg.sample, rng)?;
    let kept = &ranked[..k.min(ranked.len())];
    attach_edges(&mut tree, 0, world, kept, &logits, cfg.n_outcomes, rng)?;
    Ok(tree)
}

/// Expand an unexpanded node with up to `b` candidate edges (all distinct
/// samples kept, ranked by decoded return). No-op with a warning if the node
/// is already expanded; leaves at the depth cap are never expanded.
///
/// `b` is passed explicitly because search-time expansion may use a
/// different breadth than pre-construction (the parallel-expansion
/// ablation sets it to 1 at search time only).
pub fn expand_cached<W: LatentWorld>(
    tree: &mut PlanTree<W::State>,
    node_id: usize,
    world: &W,
    b: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if tree.nodes[node_id].expanded {
        tree.warnings
            .push(format!("expand_cached: node {node_id} already expanded"));
        return Ok(());
    }
    if tree.nodes[node_id].depth >= world.max_depth() {
        return Ok(());
    }
    let state = tree.nodes[node_id].state.clone();
    let (ranked, logits) = sample_ranked_candidates(world, &state, b, &tree.cfg.sample, rng)?;
    let n_outcomes = tree.cfg.n_outcomes;
    attach_edges(tree, node_id, world, &ranked, &logits, n_outcomes, rng)?;
    Ok(())
}

/// Full pre-construction: root frontier plus breadth-first recursive
/// expansion of every cached outcome node to the depth cap, bounded by the
/// node budget.
pub fn prebuild<W: LatentWorld>(
    world: &W,
    s0: W::State,
    cfg: &PrebuildConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PlanTree<W::State>> {
    let mut tree = build_root(world, s0, cfg, rng)?;
    if !cfg.recursive {
        return Ok(tree);
    }
    let mut frontier: Vec<usize> = (1..tree.nodes.len()).collect();
    while let Some(next) = frontier.first().copied() {
        frontier.remove(0);
        if tree.nodes.len() >= cfg.node_budget {
            tree.warnings
                .push(format!("prebuild: node budget {} reached", cfg.node_budget));
            break;
        }
        let before = tree.nodes.len();
        expand_cached(&mut tree, next, world, cfg.b, rng)?;
        frontier.extend(before..tree.nodes.len());
    }
    Ok(tree)
}

// ---------------------------------------------------------------------------
// Codec-backed world
// ---------------------------------------------------------------------------

/// Node state in the learned latent space: the normalized decoded state at
/// this node plus the code prefix from the root (the prior conditions on the
/// root state and the prefix).
#[derive(Debug, Clone)]
pub struct CodecNodeState {
    pub s_norm: Vec<f64>,
    pub prefix: Vec<usize>,
}

/// The learned latent decision process: candidate and successor
/// distributions from the prior, outcome realization by decoding code pairs
/// through the codec. Edges carry zero intermediate reward — decoded
/// return-to-go hints already aggregate future reward.
pub struct CodecWorld<'a, P: PriorModel> {
    pub codec: &'a CodecParams,
    pub prior: &'a P,
    pub norm: &'a NormStats,
    /// Normalized root state the prior conditions on.
    pub root_s_norm: Vec<f64>,
    pub max_depth: usize,
}

impl<'a, P: PriorModel> CodecWorld<'a, P> {
    pub fn new(
        codec: &'a CodecParams,
        prior: &'a P,
        norm: &'a NormStats,
        s0_raw: &[f64],
        max_depth: usize,
    ) -> Result<Self> {
        if s0_raw.len() != codec.dims.n {
            return Err(Error::DimMismatch(format!(
                "state dim {} but codec expects {}",
                s0_raw.len(),
                codec.dims.n
            )));
        }
        Ok(CodecWorld {
            codec,
            prior,
            norm,
            root_s_norm: norm.apply_state(s0_raw),
            max_depth,
        })
    }

    fn decode_pair(&self, s: &CodecNodeState, z: usize, zp: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let e1 = self.codec.codebook.row(z);
        let e2 = self.codec.codebook.row(zp);
        codec::decode(self.codec, &s.s_norm, e1, e2)
    }
}

impl<'a, P: PriorModel> LatentWorld for CodecWorld<'a, P> {
    type State = CodecNodeState;

    fn num_codes(&self) -> usize {
        self.codec.dims.k
    }

    fn max_depth(&self) -> usize {
        self.max_depth
    }

    fn candidate_logits(&self, s: &Self::State) -> Result<Vec<f64>> {
        self.prior.logits(&self.root_s_norm, &s.prefix)
    }

    fn successor_logits(&self, s: &Self::State, z: usize) -> Result<Vec<f64>> {
        let mut prefix = s.prefix.clone();
        prefix.push(z);
        self.prior.logits(&self.root_s_norm, &prefix)
    }

    fn candidate_hint(&self, s: &Self::State, z: usize) -> Result<f64> {
        // decoded return of the macro code itself (position-1 token)
        let (x1, _) = self.decode_pair(s, z, z)?;
        Ok(x1[0])
    }

    fn transition(&self, s: &Self::State, z: usize, zp: usize) -> Result<WorldStep<Self::State>> {
        let (_, x2) = self.decode_pair(s, z, zp)?;
        let n = self.codec.dims.n;
        let mut prefix = s.prefix.clone();
        prefix.push(z);
        Ok(WorldStep {
            next: CodecNodeState {
                s_norm: x2[1..1 + n].to_vec(),
                prefix,
            },
            reward: 0.0,
            value_hint: x2[0],
        })
    }

    fn macro_action(&self, s: &Self::State, z: usize) -> Result<Vec<f64>> {
        let (x1, _) = self.decode_pair(s, z, z)?;
        let tok = codec::denormalize_decoded(&x1, self.codec.dims.n, self.norm);
        Ok(tok.macro_actions)
    }
}
