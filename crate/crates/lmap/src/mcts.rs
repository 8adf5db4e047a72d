//! Monte Carlo tree search over the pre-constructed latent space.
//!
//! Selection uses UCT (or pUCT) over cached edges; stochastic outcomes under
//! an edge are progressively widened — a fresh successor is sampled when the
//! child set is small relative to the edge's visit count, otherwise an
//! existing outcome is chosen in proportion to its empirical weight. Leaves
//! are evaluated by their decoded return-to-go; values flow back as running
//! means discounted per macro step. The chosen macro's first primitive
//! action is returned (polling control).
//!
//! The module also houses the exact tabular latent MDP and its expectimax
//! solver, the oracle every agreement test is checked against.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::plangraph::{
    build_root, prebuild, LatentWorld, PlanTree, PrebuildConfig, WorldStep,
};
use crate::prior::sample_code;
use crate::rng::{stream_rng, streams};

// ---------------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------------

/// UCT: Q + c * sqrt(ln N_s / N_sz); unvisited edges score +inf.
pub fn uct_score(q: f64, n_s: u64, n_sz: u64, c: f64) -> f64 {
    if n_sz == 0 {
        return f64::INFINITY;
    }
    q + c * ((n_s as f64).ln() / n_sz as f64).sqrt()
}

/// pUCT: Q + c * prior_p * sqrt(N_s) / (1 + N_sz).
pub fn puct_score(q: f64, prior_p: f64, n_s: u64, n_sz: u64, c: f64) -> f64 {
    q + c * prior_p * (n_s as f64).sqrt() / (1.0 + n_sz as f64)
}

/// Progressive widening: add a new outcome iff |children| < ε·N_sz^α
/// (0^0 = 1).
pub fn should_widen(children: usize, n_sz: u64, alpha: f64, epsilon: f64) -> bool {
    let growth = if n_sz == 0 && alpha == 0.0 {
        1.0
    } else {
        (n_sz as f64).powf(alpha)
    };
    (children as f64) < epsilon * growth
}

// ---------------------------------------------------------------------------
// Configuration and outputs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Uct,
    Puct,
}

#[derive(Debug, Clone)]
pub struct MctsConfig {
    pub iterations: usize,
    pub c: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub selection: Selection,
    pub gamma_macro: f64,
    pub prebuild: PrebuildConfig,
    /// Commit to the max-N root edge instead of max-Q (ablation flag).
    pub commit_max_n: bool,
    /// Expansion breadth during search; defaults to the prebuild B. The
    /// parallel-expansion ablation sets this to 1 (pre-build unchanged).
    pub search_b: Option<usize>,
    pub seed: u64,
}

impl Default for MctsConfig {
    fn default() -> Self {
        MctsConfig {
            iterations: 100,
            c: 1.0,
            alpha: 0.1,
            epsilon: 1.0,
            selection: Selection::Uct,
            gamma_macro: 0.99f64.powi(3),
            prebuild: PrebuildConfig::default(),
            commit_max_n: false,
            search_b: None,
            seed: 0,
        }
    }
}

impl MctsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0,1], got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionStats {
    pub chosen_code: usize,
    /// First primitive action of the decoded macro (length l).
    pub action: Vec<f64>,
    /// Full decoded macro (length l·L), for polling-window reuse diagnostics.
    pub macro_action: Vec<f64>,
    /// Root edge table (code, Q, N).
    pub root_edges: Vec<(usize, f64, u64)>,
    pub iterations: usize,
    pub prebuild_ms: f64,
    pub search_ms: f64,
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// Search
// ---------------------------------------------------------------------------

fn select_edge<S: Clone>(tree: &PlanTree<S>, node_id: usize, cfg: &MctsConfig) -> usize {
    let node = tree.node(node_id);
    let any_unvisited = node.edges.iter().any(|e| e.n == 0);
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, e) in node.edges.iter().enumerate() {
        let score = if any_unvisited && cfg.selection == Selection::Uct {
            // unvisited first, ordered by candidate hint
            if e.n == 0 { e.hint } else { f64::NEG_INFINITY }
        } else {
            match cfg.selection {
                Selection::Uct => uct_score(e.q, node.visits.max(1), e.n, cfg.c),
                Selection::Puct => puct_score(e.q, e.prior_p, node.visits.max(1), e.n, cfg.c),
            }
        };
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    best
}

/// Pick an existing outcome under an edge in proportion to multiplicity +
/// visits.
fn pick_outcome<S: Clone>(tree: &PlanTree<S>, node_id: usize, edge_idx: usize, rng: &mut ChaCha8Rng) -> usize {
    let outcomes = &tree.node(node_id).edges[edge_idx].outcomes;
    let total: u64 = outcomes.iter().map(|o| o.mult + o.visits).sum();
    let mut draw = rng.gen_range(0..total);
    for (i, o) in outcomes.iter().enumerate() {
        let w = o.mult + o.visits;
        if draw < w {
            return i;
        }
        draw -= w;
    }
    outcomes.len() - 1
}

/// One backup pass: walking leaf to root, G ← reward + gamma_macro·G; every
/// edge on the path gets a running-mean update and N += 1.
fn backprop<S: Clone>(
    tree: &mut PlanTree<S>,
    path: &[(usize, usize, usize)], // (node, edge index, outcome index)
    leaf_value: f64,
    gamma_macro: f64,
) {
    let mut g = leaf_value;
    for &(node_id, edge_idx, outcome_idx) in path.iter().rev() {
        let node = &mut tree.nodes[node_id];
        let edge = &mut node.edges[edge_idx];
        g = edge.outcomes[outcome_idx].reward + gamma_macro * g;
        edge.outcomes[outcome_idx].visits += 1;
        edge.n += 1;
        edge.q += (g - edge.q) / edge.n as f64;
        edge.g_min = edge.g_min.min(g);
        edge.g_max = edge.g_max.max(g);
        node.visits += 1;
    }
}

/// Run `cfg.iterations` search iterations on an existing tree.
pub fn search<W: LatentWorld>(
    tree: &mut PlanTree<W::State>,
    world: &W,
    cfg: &MctsConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    search_with_audit(tree, world, cfg, rng, |_| {})
}

/// `search` with a tree-audit hook invoked after every iteration; used by
/// tests to assert structural laws (e.g. the progressive-widening bound) on
/// every intermediate tree.
pub fn search_with_audit<W: LatentWorld>(
    tree: &mut PlanTree<W::State>,
    world: &W,
    cfg: &MctsConfig,
    rng: &mut ChaCha8Rng,
    mut audit: impl FnMut(&PlanTree<W::State>),
) -> Result<()> {
    for _ in 0..cfg.iterations {
        let mut node_id = 0usize;
        let mut path: Vec<(usize, usize, usize)> = Vec::new();
        let leaf_value;
        loop {
            let node = tree.node(node_id);
            if node.depth >= world.max_depth() {
                leaf_value = node.value_hint;
                break;
            }
            if !node.expanded {
                // leaf expansion (parallel across B candidates), then
                // evaluate by the decoded return of the expanded leaf
                let b = cfg.search_b.unwrap_or(tree.cfg.b);
                crate::plangraph::expand_cached(tree, node_id, world, b, rng)?;
                leaf_value = tree.node(node_id).value_hint;
                break;
            }
            if node.edges.is_empty() {
                leaf_value = node.value_hint;
                break;
            }
            let edge_idx = select_edge(tree, node_id, cfg);
            let edge = &tree.node(node_id).edges[edge_idx];
            let widen = should_widen(edge.outcomes.len(), edge.n, cfg.alpha, cfg.epsilon);
            let outcome_idx = if widen {
                let state = tree.node(node_id).state.clone();
                let code = edge.code;
                let succ_logits = world.successor_logits(&state, code)?;
                let zp = sample_code(&succ_logits, &tree.cfg.sample.clone(), rng)?;
                let existing = tree.node(node_id).edges[edge_idx]
                    .outcomes
                    .iter()
                    .position(|o| o.succ == zp);
                match existing {
                    Some(i) => {
                        tree.nodes[node_id].edges[edge_idx].outcomes[i].mult += 1;
                        i
                    }
                    None => {
                        let WorldStep { next, reward, value_hint } =
                            world.transition(&state, code, zp)?;
                        let depth = tree.node(node_id).depth;
                        let child = {
                            let id = tree.nodes.len();
                            tree.nodes.push(crate::plangraph::PlanNode {
                                id,
                                state: next,
                                depth: depth + 1,
                                value_hint,
                                edges: Vec::new(),
                                visits: 0,
                                expanded: false,
                            });
                            id
                        };
                        tree.nodes[node_id].edges[edge_idx]
                            .outcomes
                            .push(crate::plangraph::PlanOutcome {
                                succ: zp,
                                child,
                                mult: 1,
                                visits: 0,
                                reward,
                            });
                        tree.nodes[node_id].edges[edge_idx].outcomes.len() - 1
                    }
                }
            } else {
                pick_outcome(tree, node_id, edge_idx, rng)
            };
            path.push((node_id, edge_idx, outcome_idx));
            node_id = tree.node(node_id).edges[edge_idx].outcomes[outcome_idx].child;
        }
        backprop(tree, &path, leaf_value, cfg.gamma_macro);
        audit(tree);
    }
    Ok(())
}

/// Root action commitment: max-Q among visited edges, ties to higher N then
/// lower code. Falls back to the highest-hint edge (with a warning) if no
/// edge was visited.
fn commit_root<S: Clone>(tree: &mut PlanTree<S>, cfg: &MctsConfig) -> usize {
    let root = &tree.nodes[0];
    let visited = root.edges.iter().filter(|e| e.n > 0);
    let chosen = if cfg.commit_max_n {
        root.edges
            .iter()
            .filter(|e| e.n > 0)
            .max_by(|a, b| a.n.cmp(&b.n).then(b.code.cmp(&a.code)))
    } else {
        visited.max_by(|a, b| {
            a.q.partial_cmp(&b.q)
                .unwrap()
                .then(a.n.cmp(&b.n))
                .then(b.code.cmp(&a.code))
        })
    };
    match chosen {
        Some(e) => e.code,
        None => {
            let code = root
                .edges
                .iter()
                .max_by(|a, b| a.hint.partial_cmp(&b.hint).unwrap().then(b.code.cmp(&a.code)))
                .map(|e| e.code)
                .unwrap_or(0);
            tree.warnings
                .push("no visited root edge; falling back to highest value hint".into());
            code
        }
    }
}

/// Full decision step: pre-construct (or root-only build for vanilla mode),
/// search, commit, and extract the first primitive action.
pub fn plan<W: LatentWorld>(world: &W, s0: W::State, cfg: &MctsConfig, l: usize) -> Result<DecisionStats> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, streams::PLANNER);
    let t0 = Instant::now();
    let mut tree = if cfg.prebuild.recursive {
        prebuild(world, s0, &cfg.prebuild, &mut rng)?
    } else {
        build_root(world, s0, &cfg.prebuild, &mut rng)?
    };
    let prebuild_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t1 = Instant::now();
    search(&mut tree, world, cfg, &mut rng)?;
    let chosen_code = commit_root(&mut tree, cfg);
    let macro_action = world.macro_action(&tree.node(0).state, chosen_code)?;
    let search_ms = t1.elapsed().as_secs_f64() * 1e3;

    let action = macro_action
        .get(..l)
        .ok_or_else(|| Error::DimMismatch("macro shorter than one primitive action".into()))?
        .to_vec();
    Ok(DecisionStats {
        chosen_code,
        action,
        macro_action,
        root_edges: tree
            .node(0)
            .edges
            .iter()
            .map(|e| (e.code, e.q, e.n))
            .collect(),
        iterations: cfg.iterations,
        prebuild_ms,
        search_ms,
        warnings: tree.warnings.clone(),
    })
}

// ---------------------------------------------------------------------------
// Tabular latent MDP and oracles
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TabOutcome {
    pub succ: usize,
    pub prob: f64,
    pub reward: f64,
    /// None at the terminal depth.
    pub child: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabNode {
    pub depth: usize,
    /// edges[z] = outcome distribution for code z; empty Vec of edges marks
    /// a terminal node.
    pub edges: Vec<Vec<TabOutcome>>,
}

/// Explicit layered latent MDP: every node exposes K̃ codes, each with a
/// known successor distribution and per-(node, z, z') reward.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularLatentMdp {
    pub k: usize,
    pub depth: usize,
    pub nodes: Vec<TabNode>,
}

impl TabularLatentMdp {
    pub fn empty(k: usize, depth: usize) -> Self {
        TabularLatentMdp {
            k,
            depth,
            nodes: vec![TabNode {
                depth: 0,
                edges: Vec::new(),
            }],
        }
    }
}

/// Recursively populate a node with K̃ random edges of `outcomes` successors
/// each (distinct codes, normalized probabilities, rewards in [0,1]).
pub fn grow_tabular(mdp: &mut TabularLatentMdp, node_id: usize, outcomes: usize, rng: &mut ChaCha8Rng) {
    let depth = mdp.nodes[node_id].depth;
    if depth >= mdp.depth {
        return;
    }
    let k = mdp.k;
    let outcomes = outcomes.min(k);
    for _z in 0..k {
        // distinct successor codes by partial shuffle
        let mut codes: Vec<usize> = (0..k).collect();
        for i in 0..outcomes {
            let j = rng.gen_range(i..k);
            codes.swap(i, j);
        }
        let mut weights: Vec<f64> = (0..outcomes).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let mut edge = Vec::with_capacity(outcomes);
        for i in 0..outcomes {
            let child = if depth + 1 < mdp.depth {
                let id = mdp.nodes.len();
                mdp.nodes.push(TabNode {
                    depth: depth + 1,
                    edges: Vec::new(),
                });
                Some(id)
            } else {
                None
            };
            edge.push(TabOutcome {
                succ: codes[i],
                prob: weights[i],
                reward: rng.gen_range(0.0..1.0),
                child,
            });
        }
        mdp.nodes[node_id].edges.push(edge);
        for o in mdp.nodes[node_id].edges.last().unwrap().clone() {
            if let Some(c) = o.child {
                grow_tabular(mdp, c, outcomes, rng);
            }
        }
    }
}

/// Exact expectimax values per root code:
/// V(node) = max_z Σ_z' P(z'|node,z)·(r + gamma_macro·V(child)); the optimal
/// code breaks ties toward the lowest index.
pub fn expectimax_exact(mdp: &TabularLatentMdp, gamma_macro: f64) -> Result<(Vec<f64>, usize)> {
    if mdp.nodes.len() > 1_000_000 {
        return Err(Error::InvalidInput("tabular MDP too large to enumerate".into()));
    }
    fn node_value(mdp: &TabularLatentMdp, id: usize, gm: f64) -> f64 {
        let node = &mdp.nodes[id];
        if node.edges.is_empty() {
            return 0.0;
        }
        node.edges
            .iter()
            .map(|edge| edge_value(mdp, edge, gm))
            .fold(f64::NEG_INFINITY, f64::max)
    }
    fn edge_value(mdp: &TabularLatentMdp, edge: &[TabOutcome], gm: f64) -> f64 {
        edge.iter()
            .map(|o| {
                let v = o.child.map_or(0.0, |c| node_value(mdp, c, gm));
                o.prob * (o.reward + gm * v)
            })
            .sum()
    }
    let root = &mdp.nodes[0];
    let values: Vec<f64> = root
        .edges
        .iter()
        .map(|edge| edge_value(mdp, edge, gamma_macro))
        .collect();
    let best = values
        .iter()
        .enumerate()
        .max_by(|(za, a), (zb, b)| a.partial_cmp(b).unwrap().then(zb.cmp(za)))
        .map(|(z, _)| z)
        .ok_or_else(|| Error::InvalidInput("MDP has no root edges".into()))?;
    Ok((values, best))
}

/// [`LatentWorld`] view of a tabular MDP: uniform candidate logits (full
/// coverage under sampling), exact successor distributions, rewards on the
/// transition, zero leaf values.
pub struct TabularWorld<'a> {
    pub mdp: &'a TabularLatentMdp,
}

impl<'a> LatentWorld for TabularWorld<'a> {
    /// Node id in the MDP arena, or None for the absorbing terminal.
    type State = Option<usize>;

    fn num_codes(&self) -> usize {
        self.mdp.k
    }

    fn max_depth(&self) -> usize {
        self.mdp.depth
    }

    fn candidate_logits(&self, _s: &Self::State) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.mdp.k])
    }

    fn successor_logits(&self, s: &Self::State, z: usize) -> Result<Vec<f64>> {
        let id = s.ok_or_else(|| Error::InvalidInput("terminal node has no edges".into()))?;
        let edge = &self.mdp.nodes[id].edges[z];
        let mut logits = vec![f64::NEG_INFINITY; self.mdp.k];
        for o in edge {
            logits[o.succ] = o.prob.ln();
        }
        Ok(logits)
    }

    fn candidate_hint(&self, s: &Self::State, z: usize) -> Result<f64> {
        // expected immediate reward: known exactly for the tabular world
        let id = s.ok_or_else(|| Error::InvalidInput("terminal node has no edges".into()))?;
        Ok(self.mdp.nodes[id].edges[z]
            .iter()
            .map(|o| o.prob * o.reward)
            .sum())
    }

    fn transition(&self, s: &Self::State, z: usize, zp: usize) -> Result<WorldStep<Self::State>> {
        let id = s.ok_or_else(|| Error::InvalidInput("terminal node has no edges".into()))?;
        let o = self.mdp.nodes[id].edges[z]
            .iter()
            .find(|o| o.succ == zp)
            .ok_or_else(|| Error::InvalidInput(format!("successor {zp} not in support")))?;
        Ok(WorldStep {
            next: o.child,
            reward: o.reward,
            value_hint: 0.0,
        })
    }

    fn macro_action(&self, _s: &Self::State, z: usize) -> Result<Vec<f64>> {
        // tabular codes have no decoded macro; expose the code index
        Ok(vec![z as f64])
    }
}
