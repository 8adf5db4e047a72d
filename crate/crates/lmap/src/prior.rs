//! Autoregressive prior over latent code sequences, conditioned on the
//! initial state.
//!
//! The same contract serves two roles: with an empty prefix the model is the
//! macro-action prior p(z | s); with prefix `[z]` it is the latent transition
//! model p(z' | z, s). Two interchangeable backends are provided: a small
//! neural sequence model (state feature added to every token embedding, causal
//! cumulative-mean mixing) and an exact count-based tabular model used by the
//! oracle tests.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{add_assign, softmax, tanh_backward, tanh_vec, Adam, Mat, ParamBlocks};
use crate::rng::{stream_rng, streams};

/// Common interface of the neural and tabular backends.
pub trait PriorModel {
    fn num_codes(&self) -> usize;
    /// Logits over the next code given the conditioning state and the codes
    /// already emitted.
    fn logits(&self, s: &[f64], prefix: &[usize]) -> Result<Vec<f64>>;
}

fn check_prefix(prefix: &[usize], k: usize) -> Result<()> {
    if let Some(&z) = prefix.iter().find(|&&z| z >= k) {
        return Err(Error::InvalidInput(format!(
            "code {z} out of range (K={k})"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Sampling knobs for planner expansion.
#[derive(Debug, Clone, Copy)]
pub struct SampleConfig {
    pub temperature: f64,
    pub top_k: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            temperature: 1.0,
            top_k: usize::MAX, // clamped to K at the call site
        }
    }
}

/// Categorical sample from softmax(logits / temperature) restricted to the
/// `top_k` largest logits (ties resolved toward lower indices).
pub fn sample_code(logits: &[f64], cfg: &SampleConfig, rng: &mut ChaCha8Rng) -> Result<usize> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be > 0, got {}",
            cfg.temperature
        )));
    }
    if logits.is_empty() {
        return Err(Error::InvalidInput("empty logits".into()));
    }
    let k = logits.len();
    let top_k = cfg.top_k.clamp(1, k);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    let kept = &order[..top_k];
    if top_k == 1 {
        return Ok(kept[0]);
    }
    let scaled: Vec<f64> = kept.iter().map(|&i| logits[i] / cfg.temperature).collect();
    let probs = softmax(&scaled);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (p, &i) in probs.iter().zip(kept) {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(*kept.last().unwrap())
}

// ---------------------------------------------------------------------------
// Tabular backend
// ---------------------------------------------------------------------------

pub const TABULAR_BINS: usize = 8;
pub const TABULAR_LO: f64 = -3.0;
pub const TABULAR_HI: f64 = 3.0;

/// Exact count model: first codes per state bucket, successor codes per
/// (bucket, previous code). Laplace smoothing keeps full support.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPrior {
    pub k: usize,
    pub n: usize,
    /// Laplace smoothing constant (default 1).
    pub lambda_s: f64,
    pub root_counts: BTreeMap<Vec<u8>, Vec<u64>>,
    pub succ_counts: BTreeMap<(Vec<u8>, usize), Vec<u64>>,
}

/// Uniform-grid bucket of a normalized state: 8 bins per dimension over
/// [-3, 3], clamped.
pub fn bucketize(s: &[f64]) -> Vec<u8> {
    s.iter()
        .map(|&x| {
            let t = (x.clamp(TABULAR_LO, TABULAR_HI) - TABULAR_LO) / (TABULAR_HI - TABULAR_LO);
            ((t * TABULAR_BINS as f64) as usize).min(TABULAR_BINS - 1) as u8
        })
        .collect()
}

impl TabularPrior {
    pub fn uniform(k: usize, n: usize) -> Self {
        TabularPrior {
            k,
            n,
            lambda_s: 1.0,
            root_counts: BTreeMap::new(),
            succ_counts: BTreeMap::new(),
        }
    }

    fn probs_from_counts(&self, counts: Option<&Vec<u64>>) -> Vec<f64> {
        let zeros;
        let counts = match counts {
            Some(c) => c,
            None => {
                zeros = vec![0u64; self.k];
                &zeros
            }
        };
        let total: f64 = counts.iter().map(|&c| c as f64).sum();
        let denom = total + self.lambda_s * self.k as f64;
        if denom == 0.0 {
            // smoothing disabled and bucket unseen: fall back to uniform
            return vec![1.0 / self.k as f64; self.k];
        }
        counts
            .iter()
            .map(|&c| (c as f64 + self.lambda_s) / denom)
            .collect()
    }

    pub fn probs(&self, s: &[f64], prefix: &[usize]) -> Result<Vec<f64>> {
        check_prefix(prefix, self.k)?;
        let b = bucketize(s);
        let counts = match prefix.last() {
            None => self.root_counts.get(&b),
            // first-order: condition on the most recent code only
            Some(&z) => self.succ_counts.get(&(b, z)),
        };
        Ok(self.probs_from_counts(counts))
    }
}

impl PriorModel for TabularPrior {
    fn num_codes(&self) -> usize {
        self.k
    }

    fn logits(&self, s: &[f64], prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.probs(s, prefix)?.iter().map(|p| p.ln()).collect())
    }
}

/// Count exact occurrences over a tokenized corpus of `(state, codes)`
/// sequences. An empty corpus yields the uniform (smoothing-only) model.
pub fn fit_tabular(code_dataset: &[(Vec<f64>, Vec<usize>)], k: usize, n: usize) -> Result<TabularPrior> {
    let mut model = TabularPrior::uniform(k, n);
    for (s, codes) in code_dataset {
        check_prefix(codes, k)?;
        if s.len() != n {
            return Err(Error::DimMismatch(format!(
                "state dim {} but model expects {n}",
                s.len()
            )));
        }
        let b = bucketize(s);
        if let Some(&first) = codes.first() {
            model.root_counts.entry(b.clone()).or_insert_with(|| vec![0; k])[first] += 1;
        }
        for w in codes.windows(2) {
            model
                .succ_counts
                .entry((b.clone(), w[0]))
                .or_insert_with(|| vec![0; k])[w[1]] += 1;
        }
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Neural backend
// ---------------------------------------------------------------------------

/// Small autoregressive code model. Token 0 is a learned start embedding,
/// token p >= 1 embeds code z_p; the projected state feature is added to all
/// token embeddings. Each position mixes its own embedding with the causal
/// cumulative mean of all embeddings up to it, and the head at position p
/// predicts code z_{p+1}.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralPrior {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub w_s: Mat,          // d x n
    pub code_emb: Mat,     // k x d
    pub start_emb: Vec<f64>, // d
    pub w_in: Mat,         // d x d
    pub w_ctx: Mat,        // d x d
    pub b_h: Vec<f64>,     // d
    pub w_o: Mat,          // k x d, zero-initialized so fresh model is uniform
    pub b_o: Vec<f64>,     // k
}

impl ParamBlocks for NeuralPrior {
    fn block_names(&self) -> Vec<&'static str> {
        vec!["w_s", "code_emb", "start_emb", "w_in", "w_ctx", "b_h", "w_o", "b_o"]
    }

    fn block(&self, name: &str) -> &[f64] {
        match name {
            "w_s" => &self.w_s.data,
            "code_emb" => &self.code_emb.data,
            "start_emb" => &self.start_emb,
            "w_in" => &self.w_in.data,
            "w_ctx" => &self.w_ctx.data,
            "b_h" => &self.b_h,
            "w_o" => &self.w_o.data,
            "b_o" => &self.b_o,
            other => panic!("unknown block {other}"),
        }
    }

    fn block_mut(&mut self, name: &str) -> &mut [f64] {
        match name {
            "w_s" => &mut self.w_s.data,
            "code_emb" => &mut self.code_emb.data,
            "start_emb" => &mut self.start_emb,
            "w_in" => &mut self.w_in.data,
            "w_ctx" => &mut self.w_ctx.data,
            "b_h" => &mut self.b_h,
            "w_o" => &mut self.w_o.data,
            "b_o" => &mut self.b_o,
            other => panic!("unknown block {other}"),
        }
    }
}

impl NeuralPrior {
    pub fn init(n: usize, k: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let s_n = 1.0 / (n as f64).sqrt();
        let s_d = 1.0 / (d as f64).sqrt();
        NeuralPrior {
            n,
            k,
            d,
            w_s: Mat::uniform(d, n, s_n, rng),
            code_emb: Mat::uniform(k, d, s_d, rng),
            start_emb: crate::nn::vec_uniform(d, s_d, rng),
            w_in: Mat::uniform(d, d, s_d, rng),
            w_ctx: Mat::uniform(d, d, s_d, rng),
            b_h: vec![0.0; d],
            w_o: Mat::zeros(k, d),
            b_o: vec![0.0; k],
        }
    }

    fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for name in g.block_names() {
            g.block_mut(name).iter_mut().for_each(|x| *x = 0.0);
        }
        g
    }

    /// Forward over positions 0..=prefix.len(); returns per-position
    /// activations for the backward pass.
    fn forward(&self, s: &[f64], prefix: &[usize]) -> PriorTrace {
        let s_feat = self.w_s.matvec(s);
        let positions = prefix.len() + 1;
        let mut v = Vec::with_capacity(positions);
        for p in 0..positions {
            let mut vp = if p == 0 {
                self.start_emb.clone()
            } else {
                self.code_emb.row(prefix[p - 1]).to_vec()
            };
            add_assign(&mut vp, &s_feat);
            v.push(vp);
        }
        let mut ctx = Vec::with_capacity(positions);
        let mut running = vec![0.0; self.d];
        for (p, vp) in v.iter().enumerate() {
            add_assign(&mut running, vp);
            ctx.push(running.iter().map(|x| x / (p + 1) as f64).collect::<Vec<f64>>());
        }
        let mut t = Vec::with_capacity(positions);
        let mut logits = Vec::with_capacity(positions);
        for p in 0..positions {
            let mut u = self.b_h.clone();
            add_assign(&mut u, &self.w_in.matvec(&v[p]));
            add_assign(&mut u, &self.w_ctx.matvec(&ctx[p]));
            let tp = tanh_vec(&u);
            let mut lg = self.b_o.clone();
            add_assign(&mut lg, &self.w_o.matvec(&tp));
            t.push(tp);
            logits.push(lg);
        }
        PriorTrace { v, ctx, t, logits }
    }
}

struct PriorTrace {
    v: Vec<Vec<f64>>,
    ctx: Vec<Vec<f64>>,
    t: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
}

impl PriorModel for NeuralPrior {
    fn num_codes(&self) -> usize {
        self.k
    }

    fn logits(&self, s: &[f64], prefix: &[usize]) -> Result<Vec<f64>> {
        if s.len() != self.n {
            return Err(Error::DimMismatch(format!(
                "state dim {} but prior expects {}",
                s.len(),
                self.n
            )));
        }
        check_prefix(prefix, self.k)?;
        let tr = self.forward(s, prefix);
        let out = tr.logits.last().unwrap().clone();
        if !out.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric("non-finite prior logits".into()));
        }
        Ok(out)
    }
}

/// Mean next-code cross-entropy and analytic gradients over a batch of
/// `(state, codes)` sequences; position p's head is scored against code
/// z_{p+1}.
pub fn prior_loss(
    model: &NeuralPrior,
    batch: &[(Vec<f64>, Vec<usize>)],
) -> Result<(f64, NeuralPrior)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut grads = model.zeros_like();
    let mut loss = 0.0;
    let mut targets = 0usize;
    for (_, codes) in batch {
        check_prefix(codes, model.k)?;
        targets += codes.len();
    }
    let c = 1.0 / targets as f64;
    for (s, codes) in batch {
        let tr = model.forward(s, &codes[..codes.len() - 1]);
        let positions = codes.len();
        let mut dv = vec![vec![0.0; model.d]; positions];
        for p in 0..positions {
            let probs = softmax(&tr.logits[p]);
            let target = codes[p];
            loss -= c * probs[target].max(1e-300).ln();
            let mut dl: Vec<f64> = probs.iter().map(|pr| c * pr).collect();
            dl[target] -= c;
            grads.w_o.add_outer(&dl, &tr.t[p]);
            add_assign(&mut grads.b_o, &dl);
            let dt = model.w_o.matvec_t(&dl);
            let du = tanh_backward(&dt, &tr.t[p]);
            grads.w_in.add_outer(&du, &tr.v[p]);
            grads.w_ctx.add_outer(&du, &tr.ctx[p]);
            add_assign(&mut grads.b_h, &du);
            add_assign(&mut dv[p], &model.w_in.matvec_t(&du));
            let dctx = model.w_ctx.matvec_t(&du);
            // cumulative mean: ctx_p depends on v_0..v_p with weight 1/(p+1)
            let w = 1.0 / (p + 1) as f64;
            for j in 0..=p {
                crate::nn::axpy(&mut dv[j], w, &dctx);
            }
        }
        let mut ds_feat = vec![0.0; model.d];
        for (p, dvp) in dv.iter().enumerate() {
            add_assign(&mut ds_feat, dvp);
            if p == 0 {
                add_assign(&mut grads.start_emb, dvp);
            } else {
                let row = grads.code_emb.row_mut(codes[p - 1]);
                for j in 0..model.d {
                    row[j] += dvp[j];
                }
            }
        }
        grads.w_s.add_outer(&ds_feat, s);
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone)]
pub struct PriorTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub d: usize,
    pub seed: u64,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        PriorTrainConfig {
            lr: 3e-3,
            batch_size: 64,
            epochs: 40,
            d: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PriorTrainReport {
    pub epoch_cross_entropy: Vec<f64>,
    pub epoch_perplexity: Vec<f64>,
    pub final_cross_entropy: f64,
}

/// Minibatch Adam cross-entropy training on a tokenized corpus.
pub fn train_neural_prior(
    code_dataset: &[(Vec<f64>, Vec<usize>)],
    k: usize,
    cfg: &PriorTrainConfig,
) -> Result<(NeuralPrior, PriorTrainReport)> {
    let first = code_dataset
        .iter()
        .find(|(_, codes)| !codes.is_empty())
        .ok_or_else(|| Error::InvalidInput("empty code corpus".into()))?;
    let n = first.0.len();
    let mut init_rng = stream_rng(cfg.seed, streams::PRIOR_INIT);
    let mut model = NeuralPrior::init(n, k, cfg.d, &mut init_rng);
    let mut batch_rng = stream_rng(cfg.seed, streams::PRIOR_BATCH);
    let mut adam = Adam::new(&model, cfg.lr);
    let mut indices: Vec<usize> = (0..code_dataset.len()).collect();
    let mut epoch_ce = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut batch_rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch_idx in indices.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<(Vec<f64>, Vec<usize>)> =
                batch_idx.iter().map(|&i| code_dataset[i].clone()).collect();
            let (loss, grads) = prior_loss(&model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "prior training diverged at epoch {epoch}"
                )));
            }
            adam.step(&mut model, &grads)?;
            total += loss;
            batches += 1;
        }
        epoch_ce.push(total / batches as f64);
    }
    let (final_ce, _) = prior_loss(&model, code_dataset)?;
    if !model.all_finite() {
        return Err(Error::Numeric("non-finite prior parameters".into()));
    }
    Ok((
        model,
        PriorTrainReport {
            epoch_perplexity: epoch_ce.iter().map(|ce| ce.exp()).collect(),
            epoch_cross_entropy: epoch_ce,
            final_cross_entropy: final_ce,
        },
    ))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub fn save_neural_prior(path: &Path, model: &NeuralPrior) -> Result<()> {
    let mut out = format!("LMAPPRIOR1 {} {} {}\n", model.n, model.k, model.d);
    for name in model.block_names() {
        let vals = model.block(name);
        out.push_str(&format!("BLOCK {name} {}\n", vals.len()));
        let line: Vec<String> = vals.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_neural_prior(path: &Path) -> Result<NeuralPrior> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path.display().to_string(), "empty prior file"))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.first() != Some(&"LMAPPRIOR1") || toks.len() != 4 {
        return Err(Error::parse("line 1", "expected LMAPPRIOR1 header"));
    }
    let p = |i: usize| -> Result<usize> {
        toks[i]
            .parse()
            .map_err(|e| Error::parse("line 1", format!("bad header field {i}: {e}")))
    };
    let (n, k, d) = (p(1)?, p(2)?, p(3)?);
    let mut rng = stream_rng(0, streams::PRIOR_INIT);
    let mut model = NeuralPrior::init(n, k, d, &mut rng);
    while let Some((i, line)) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("line {}", i + 1);
        let mut it = line.split_whitespace();
        if it.next() != Some("BLOCK") {
            return Err(Error::parse(&loc, format!("expected BLOCK, got {line:?}")));
        }
        let name = it
            .next()
            .ok_or_else(|| Error::parse(&loc, "missing block name"))?
            .to_string();
        let len: usize = it
            .next()
            .ok_or_else(|| Error::parse(&loc, "missing block length"))?
            .parse()
            .map_err(|e| Error::parse(&loc, format!("bad length: {e}")))?;
        let (j, vals_line) = lines
            .next()
            .ok_or_else(|| Error::parse(&loc, "missing block values"))?;
        let vloc = format!("line {}", j + 1);
        let vals: Vec<f64> = vals_line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::parse(&vloc, format!("bad float: {e}")))
            })
            .collect::<Result<_>>()?;
        if !model.block_names().contains(&name.as_str()) {
            return Err(Error::parse(&loc, format!("unknown block {name:?}")));
        }
        let dst = model.block_mut(&name);
        if vals.len() != len || dst.len() != len {
            return Err(Error::parse(&vloc, format!("block {name}: bad length")));
        }
        dst.copy_from_slice(&vals);
    }
    Ok(model)
}

pub fn save_tabular_prior(path: &Path, model: &TabularPrior) -> Result<()> {
    let mut out = format!(
        "LMAPTAB1 {} {} {} {} {} {}\n",
        model.k, model.n, TABULAR_BINS, TABULAR_LO, TABULAR_HI, model.lambda_s
    );
    let fmt_bucket = |b: &[u8]| {
        b.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    for (b, counts) in &model.root_counts {
        out.push_str(&format!("ROOT {} ", fmt_bucket(b)));
        out.push_str(
            &counts
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(" "),
        );
        out.push('\n');
    }
    for ((b, z), counts) in &model.succ_counts {
        out.push_str(&format!("SUCC {} {z} ", fmt_bucket(b)));
        out.push_str(
            &counts
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(" "),
        );
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_tabular_prior(path: &Path) -> Result<TabularPrior> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path.display().to_string(), "empty tabular file"))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.first() != Some(&"LMAPTAB1") || toks.len() != 7 {
        return Err(Error::parse("line 1", "expected LMAPTAB1 header"));
    }
    let k: usize = toks[1]
        .parse()
        .map_err(|e| Error::parse("line 1", format!("bad K: {e}")))?;
    let n: usize = toks[2]
        .parse()
        .map_err(|e| Error::parse("line 1", format!("bad n: {e}")))?;
    let lambda_s: f64 = toks[6]
        .parse()
        .map_err(|e| Error::parse("line 1", format!("bad lambda: {e}")))?;
    let mut model = TabularPrior::uniform(k, n);
    model.lambda_s = lambda_s;
    let parse_bucket = |t: &str, loc: &str| -> Result<Vec<u8>> {
        t.split(',')
            .map(|x| {
                x.parse::<u8>()
                    .map_err(|e| Error::parse(loc, format!("bad bucket: {e}")))
            })
            .collect()
    };
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("line {}", i + 1);
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.first() {
            Some(&"ROOT") if parts.len() == 2 + k => {
                let b = parse_bucket(parts[1], &loc)?;
                let counts: Vec<u64> = parts[2..]
                    .iter()
                    .map(|t| {
                        t.parse::<u64>()
                            .map_err(|e| Error::parse(&loc, format!("bad count: {e}")))
                    })
                    .collect::<Result<_>>()?;
                model.root_counts.insert(b, counts);
            }
            Some(&"SUCC") if parts.len() == 3 + k => {
                let b = parse_bucket(parts[1], &loc)?;
                let z: usize = parts[2]
                    .parse()
                    .map_err(|e| Error::parse(&loc, format!("bad code: {e}")))?;
                let counts: Vec<u64> = parts[3..]
                    .iter()
                    .map(|t| {
                        t.parse::<u64>()
                            .map_err(|e| Error::parse(&loc, format!("bad count: {e}")))
                    })
                    .collect::<Result<_>>()?;
                model.succ_counts.insert((b, z), counts);
            }
            _ => return Err(Error::parse(&loc, format!("unrecognized line {line:?}"))),
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tabular_hand_counts_with_smoothing() {
        let mut m = TabularPrior::uniform(2, 1);
        let b = bucketize(&[0.0]);
        m.root_counts.insert(b.clone(), vec![2, 1]);
        let probs = m.probs(&[0.0], &[]).unwrap();
        assert_eq!(probs, vec![3.0 / 5.0, 2.0 / 5.0]);
    }

    #[test]
    fn fit_tabular_hand_counts() {
        let seqs = vec![(vec![0.0], vec![1usize, 2])];
        let m = fit_tabular(&seqs, 4, 1).unwrap();
        // first code 1 observed once: p(z=1 | b) = (1+1)/(1+4)
        let probs = m.probs(&[0.0], &[]).unwrap();
        assert_eq!(probs[1], 2.0 / 5.0);
        // successor 2 after 1: same shape
        let succ = m.probs(&[0.0], &[1]).unwrap();
        assert_eq!(succ[2], 2.0 / 5.0);
        // unseen bucket: uniform smoothing only
        let far = m.probs(&[2.9], &[]).unwrap();
        assert_eq!(far, vec![0.25; 4]);

        // duplicating the corpus shifts toward the empirical distribution
        let twice = fit_tabular(&[seqs[0].clone(), seqs[0].clone()], 4, 1).unwrap();
        let p2 = twice.probs(&[0.0], &[]).unwrap();
        assert_eq!(p2[1], 3.0 / 6.0);
        assert!(p2[1] > probs[1]);
    }

    #[test]
    fn tabular_exact_without_smoothing() {
        let seqs = vec![
            (vec![0.0], vec![0usize, 1]),
            (vec![0.0], vec![0, 1]),
            (vec![0.0], vec![1, 0]),
        ];
        let mut m = fit_tabular(&seqs, 2, 1).unwrap();
        m.lambda_s = 0.0;
        let probs = m.probs(&[0.0], &[]).unwrap();
        assert_eq!(probs, vec![2.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn tabular_probs_sum_to_one() {
        let seqs = vec![(vec![0.3, -0.7], vec![0usize, 3, 1])];
        let m = fit_tabular(&seqs, 5, 2).unwrap();
        for prefix in [vec![], vec![0], vec![3]] {
            let p = m.probs(&[0.3, -0.7], &prefix).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_code_rejected() {
        let m = TabularPrior::uniform(4, 1);
        assert!(m.logits(&[0.0], &[4]).is_err());
        assert!(fit_tabular(&[(vec![0.0], vec![9])], 4, 1).is_err());
    }

    #[test]
    fn bucketize_clamps_and_bins() {
        assert_eq!(bucketize(&[-100.0]), vec![0]);
        assert_eq!(bucketize(&[100.0]), vec![7]);
        assert_eq!(bucketize(&[-3.0]), vec![0]);
        assert_eq!(bucketize(&[2.999]), vec![7]);
        assert_eq!(bucketize(&[0.0]), vec![4]);
        assert_eq!(bucketize(&[-0.001]), vec![3]);
    }

    #[test]
    fn fresh_neural_prior_is_uniform() {
        let mut rng = stream_rng(0, streams::PRIOR_INIT);
        let m = NeuralPrior::init(2, 8, 8, &mut rng);
        let logits = m.logits(&[0.5, -0.5], &[]).unwrap();
        assert_eq!(logits, vec![0.0; 8]);
        let probs = softmax(&logits);
        assert!(probs.iter().all(|p| (p - 0.125).abs() < 1e-15));
        // and with a prefix
        assert_eq!(m.logits(&[0.5, -0.5], &[3]).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn neural_logits_deterministic_and_causal() {
        let mut rng = stream_rng(1, streams::PRIOR_INIT);
        let mut m = NeuralPrior::init(2, 4, 8, &mut rng);
        // make the head non-trivial
        m.w_o = Mat::uniform(4, 8, 0.5, &mut rng);
        let a = m.logits(&[0.1, 0.2], &[1, 2]).unwrap();
        let b = m.logits(&[0.1, 0.2], &[1, 2]).unwrap();
        assert_eq!(a, b);
        // a different prefix changes the output
        let c = m.logits(&[0.1, 0.2], &[2, 1]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sample_code_symmetric_and_topk() {
        let mut rng = stream_rng(2, 50);
        let cfg = SampleConfig::default();
        // logits (ln 2, 0): probabilities (2/3, 1/3), Monte Carlo oracle
        let logits = [2.0f64.ln(), 0.0];
        let mut count0 = 0usize;
        let draws = 100_000;
        for _ in 0..draws {
            if sample_code(&logits, &cfg, &mut rng).unwrap() == 0 {
                count0 += 1;
            }
        }
        let freq = count0 as f64 / draws as f64;
        assert!((freq - 2.0 / 3.0).abs() < 0.01, "freq {freq}");

        // top_k = 1 is argmax with ties to the lowest index
        let one = SampleConfig {
            top_k: 1,
            ..SampleConfig::default()
        };
        assert_eq!(sample_code(&[0.0, 0.0, 0.0], &one, &mut rng).unwrap(), 0);
        assert_eq!(sample_code(&[0.0, 1.0, 1.0], &one, &mut rng).unwrap(), 1);

        // top_k = 2 never yields the smallest logit
        let two = SampleConfig {
            top_k: 2,
            ..SampleConfig::default()
        };
        for _ in 0..200 {
            assert_ne!(sample_code(&[1.0, -5.0, 1.0], &two, &mut rng).unwrap(), 1);
        }
        assert!(sample_code(&[0.0, 0.0], &SampleConfig { temperature: 0.0, ..cfg }, &mut rng).is_err());
    }

    #[test]
    fn temperature_properties() {
        let mut rng = stream_rng(3, 51);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let argmax = (0..6)
                .max_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap())
                .unwrap();
            for tau in [0.1, 1.0, 10.0] {
                let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
                let p = softmax(&scaled);
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                let am = (0..6)
                    .max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap())
                    .unwrap();
                assert_eq!(am, argmax);
            }
        }
    }

    #[test]
    fn prior_gradients_match_finite_differences() {
        let mut rng = stream_rng(4, streams::PRIOR_INIT);
        let mut m = NeuralPrior::init(2, 4, 6, &mut rng);
        m.w_o = Mat::uniform(4, 6, 0.3, &mut rng);
        let batch = vec![
            (vec![0.2, -0.4], vec![1usize, 3]),
            (vec![-0.1, 0.9], vec![0usize, 2]),
        ];
        let (_, grads) = prior_loss(&m, &batch).unwrap();
        let h = 1e-5;
        let mut max_rel = 0.0f64;
        let mut p = m.clone();
        for name in m.block_names() {
            for i in 0..m.block(name).len() {
                let orig = p.block(name)[i];
                p.block_mut(name)[i] = orig + h;
                let (lp, _) = prior_loss(&p, &batch).unwrap();
                p.block_mut(name)[i] = orig - h;
                let (lm, _) = prior_loss(&p, &batch).unwrap();
                p.block_mut(name)[i] = orig;
                let num = (lp - lm) / (2.0 * h);
                let ana = grads.block(name)[i];
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-4, "max rel err {max_rel}");
    }

    #[test]
    fn training_on_deterministic_corpus() {
        // every state bucket always followed by the same pair of codes
        let mut corpus = Vec::new();
        for i in 0..128 {
            let s = if i % 2 == 0 { vec![-1.0] } else { vec![1.0] };
            let codes = if i % 2 == 0 { vec![0usize, 1] } else { vec![2usize, 3] };
            corpus.push((s, codes));
        }
        let cfg = PriorTrainConfig {
            epochs: 200,
            lr: 1e-2,
            ..PriorTrainConfig::default()
        };
        let (m1, r1) = train_neural_prior(&corpus, 4, &cfg).unwrap();
        assert!(
            r1.final_cross_entropy < 0.05,
            "ce {}",
            r1.final_cross_entropy
        );
        assert!(r1.final_cross_entropy <= (4.0f64).ln());
        let (m2, r2) = train_neural_prior(&corpus, 4, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1.epoch_cross_entropy, r2.epoch_cross_entropy);
    }

    #[test]
    fn training_on_uniform_corpus_stays_near_entropy() {
        let k = 4;
        let mut rng = stream_rng(5, 52);
        let corpus: Vec<(Vec<f64>, Vec<usize>)> = (0..256)
            .map(|_| {
                (
                    vec![rng.gen_range(-1.0..1.0)],
                    vec![rng.gen_range(0..k), rng.gen_range(0..k)],
                )
            })
            .collect();
        let cfg = PriorTrainConfig {
            epochs: 20,
            ..PriorTrainConfig::default()
        };
        let (_, report) = train_neural_prior(&corpus, k, &cfg).unwrap();
        let ln_k = (k as f64).ln();
        assert!(
            (report.final_cross_entropy - ln_k).abs() < 0.05 * ln_k,
            "ce {} vs lnK {ln_k}",
            report.final_cross_entropy
        );
    }

    #[test]
    fn checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = stream_rng(6, streams::PRIOR_INIT);
        let mut m = NeuralPrior::init(2, 4, 6, &mut rng);
        m.w_o = Mat::uniform(4, 6, 0.3, &mut rng);
        let p = dir.path().join("prior.txt");
        save_neural_prior(&p, &m).unwrap();
        assert_eq!(load_neural_prior(&p).unwrap(), m);

        let seqs = vec![
            (vec![0.0, 0.5], vec![0usize, 1, 1]),
            (vec![-1.2, 0.5], vec![2usize, 0]),
        ];
        let t = fit_tabular(&seqs, 3, 2).unwrap();
        let tp = dir.path().join("tab.txt");
        save_tabular_prior(&tp, &t).unwrap();
        assert_eq!(load_tabular_prior(&tp).unwrap(), t);
    }
}
