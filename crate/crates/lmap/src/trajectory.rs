//! Episode ingestion: return-to-go computation, macro segmentation into
//! tokens and chunks, normalization, and the on-disk dataset format.
//!
//! A token is `(R_t, s_t, m_t)` where `m_t` concatenates `L` consecutive
//! primitive actions; a chunk is two consecutive tokens. All downstream
//! models consume chunks in normalized units.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// One raw episode as logged by an environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRaw {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub terminated: bool,
}

impl EpisodeRaw {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Checks the length and finiteness invariants.
    pub fn validate(&self, n: usize, l: usize) -> Result<()> {
        let t = self.rewards.len();
        if self.states.len() != t || self.actions.len() != t {
            return Err(Error::InvalidInput(format!(
                "episode field lengths differ: states={} actions={} rewards={}",
                self.states.len(),
                self.actions.len(),
                t
            )));
        }
        for (i, s) in self.states.iter().enumerate() {
            if s.len() != n {
                return Err(Error::DimMismatch(format!(
                    "state {i} has dim {} but n={n}",
                    s.len()
                )));
            }
            if !s.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidInput(format!("non-finite state at step {i}")));
            }
        }
        for (i, a) in self.actions.iter().enumerate() {
            if a.len() != l {
                return Err(Error::DimMismatch(format!(
                    "action {i} has dim {} but l={l}",
                    a.len()
                )));
            }
            if !a.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "non-finite action at step {i}"
                )));
            }
        }
        if !self.rewards.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite reward".into()));
        }
        Ok(())
    }
}

/// One `(return-to-go, state, macro-action)` tuple in raw (unnormalized)
/// units. `macro_actions` has width `l * L`.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroToken {
    pub rtg: f64,
    pub state: Vec<f64>,
    pub macro_actions: Vec<f64>,
}

impl MacroToken {
    /// Flat width 1 + n + l*L.
    pub fn width(&self) -> usize {
        1 + self.state.len() + self.macro_actions.len()
    }

    /// Flatten to `(R, s, m)` order.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.width());
        v.push(self.rtg);
        v.extend_from_slice(&self.state);
        v.extend_from_slice(&self.macro_actions);
        v
    }
}

/// Two consecutive tokens from the same episode, `L` steps apart.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenChunk {
    pub first: MacroToken,
    pub second: MacroToken,
}

/// Per-dimension normalization fitted on a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_scale: Vec<f64>,
    pub rtg_scale: f64,
}

const STD_FLOOR: f64 = 1e-6;

impl NormStats {
    pub fn identity(n: usize, l: usize) -> Self {
        NormStats {
            state_mean: vec![0.0; n],
            state_std: vec![1.0; n],
            action_scale: vec![1.0; l],
            rtg_scale: 1.0,
        }
    }

    pub fn apply_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(v, (m, sd))| (v - m) / sd)
            .collect()
    }

    pub fn invert_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(v, (m, sd))| v * sd + m)
            .collect()
    }

    /// Macro actions are normalized per primitive-action dimension; the
    /// scale vector of width `l` repeats across the `L` slots.
    pub fn apply_macro(&self, m: &[f64]) -> Vec<f64> {
        let l = self.action_scale.len();
        m.iter()
            .enumerate()
            .map(|(i, v)| v / self.action_scale[i % l])
            .collect()
    }

    pub fn invert_macro(&self, m: &[f64]) -> Vec<f64> {
        let l = self.action_scale.len();
        m.iter()
            .enumerate()
            .map(|(i, v)| v * self.action_scale[i % l])
            .collect()
    }

    pub fn apply_token(&self, t: &MacroToken) -> MacroToken {
        MacroToken {
            rtg: t.rtg / self.rtg_scale,
            state: self.apply_state(&t.state),
            macro_actions: self.apply_macro(&t.macro_actions),
        }
    }

    pub fn invert_token(&self, t: &MacroToken) -> MacroToken {
        MacroToken {
            rtg: t.rtg * self.rtg_scale,
            state: self.invert_state(&t.state),
            macro_actions: self.invert_macro(&t.macro_actions),
        }
    }
}

/// Return-to-go: `out[t] = rewards[t] + gamma * out[t+1]`, zero past the end.
pub fn compute_rtg(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidInput(format!("gamma {gamma} not in (0,1]")));
    }
    if !rewards.iter().all(|r| r.is_finite()) {
        return Err(Error::InvalidInput("non-finite reward".into()));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// Cut an episode into `floor(T/L)` macro tokens; the trailing remainder is
/// dropped. Token RTG is taken at the token's first step.
pub fn segment_episode(ep: &EpisodeRaw, macro_len: usize, gamma: f64) -> Result<Vec<MacroToken>> {
    if macro_len == 0 {
        return Err(Error::InvalidInput("macro length must be >= 1".into()));
    }
    let rtg = compute_rtg(&ep.rewards, gamma)?;
    let t = ep.len();
    let kappa = t / macro_len;
    let mut tokens = Vec::with_capacity(kappa);
    for k in 0..kappa {
        let start = k * macro_len;
        let mut mac = Vec::with_capacity(macro_len * ep.actions[0].len());
        for step in start..start + macro_len {
            mac.extend_from_slice(&ep.actions[step]);
        }
        tokens.push(MacroToken {
            rtg: rtg[start],
            state: ep.states[start].clone(),
            macro_actions: mac,
        });
    }
    Ok(tokens)
}

/// Pair consecutive tokens into non-overlapping chunks; an odd trailing
/// token is dropped.
pub fn make_chunks(tokens: &[MacroToken]) -> Vec<TokenChunk> {
    tokens
        .chunks_exact(2)
        .map(|pair| TokenChunk {
            first: pair[0].clone(),
            second: pair[1].clone(),
        })
        .collect()
}

/// Fit normalization over a corpus: z-score states (std floored at 1e-6),
/// scale actions by the per-dimension max magnitude, and scale RTG by
/// `max(1, max |R_t|)`.
pub fn fit_normalization(episodes: &[EpisodeRaw], gamma: f64) -> Result<NormStats> {
    let first = episodes
        .iter()
        .find(|e| !e.is_empty())
        .ok_or_else(|| Error::InvalidInput("empty corpus".into()))?;
    let n = first.states[0].len();
    let l = first.actions[0].len();

    let mut mean = vec![0.0; n];
    let mut count = 0usize;
    for ep in episodes {
        for s in &ep.states {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);

    let mut var = vec![0.0; n];
    for ep in episodes {
        for s in &ep.states {
            for (v, (x, m)) in var.iter_mut().zip(s.iter().zip(&mean)) {
                *v += (x - m) * (x - m);
            }
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
        .collect();

    let mut action_scale = vec![STD_FLOOR; l];
    for ep in episodes {
        for a in &ep.actions {
            for (sc, v) in action_scale.iter_mut().zip(a) {
                *sc = sc.max(v.abs());
            }
        }
    }

    let mut max_rtg: f64 = 0.0;
    for ep in episodes {
        for r in compute_rtg(&ep.rewards, gamma)? {
            max_rtg = max_rtg.max(r.abs());
        }
    }

    Ok(NormStats {
        state_mean: mean,
        state_std: std,
        action_scale,
        rtg_scale: max_rtg.max(1.0),
    })
}

/// An offline corpus plus everything derived from it: normalized chunks
/// ready for the codec, per-episode token boundaries, and the fitted
/// normalization. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub episodes: Vec<EpisodeRaw>,
    /// Chunks in normalized units, concatenated over episodes.
    pub chunks: Vec<TokenChunk>,
    /// Per-episode normalized token sequences (for prior training and
    /// heatmaps, where episode boundaries matter).
    pub episode_tokens: Vec<Vec<MacroToken>>,
    pub n: usize,
    pub l: usize,
    pub macro_len: usize,
    pub gamma: f64,
    pub norm: NormStats,
    /// Free-form `# envcfg`-style comment echoed into the file header.
    pub comment: Option<String>,
}

impl Dataset {
    pub fn from_episodes(
        episodes: Vec<EpisodeRaw>,
        macro_len: usize,
        gamma: f64,
    ) -> Result<Dataset> {
        let first = episodes
            .iter()
            .find(|e| !e.is_empty())
            .ok_or_else(|| Error::InvalidInput("empty corpus".into()))?;
        let n = first.states[0].len();
        let l = first.actions[0].len();
        for ep in &episodes {
            ep.validate(n, l)?;
        }
        let norm = fit_normalization(&episodes, gamma)?;
        let mut chunks = Vec::new();
        let mut episode_tokens = Vec::new();
        for ep in &episodes {
            let tokens: Vec<MacroToken> = segment_episode(ep, macro_len, gamma)?
                .iter()
                .map(|t| norm.apply_token(t))
                .collect();
            chunks.extend(make_chunks(&tokens));
            episode_tokens.push(tokens);
        }
        Ok(Dataset {
            episodes,
            chunks,
            episode_tokens,
            n,
            l,
            macro_len,
            gamma,
            norm,
            comment: None,
        })
    }

    /// Token width 1 + n + l*L.
    pub fn token_width(&self) -> usize {
        1 + self.n + self.l * self.macro_len
    }
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

/// Decimal with 9 significant digits; round-trips within 1e-9 relative.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.8e}")
}

fn write_norm(path: &Path, norm: &NormStats) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "NORM n={} l={}\n",
        norm.state_mean.len(),
        norm.action_scale.len()
    ));
    let join = |v: &[f64]| {
        v.iter()
            .map(|x| fmt_f64(*x))
            .collect::<Vec<_>>()
            .join(" ")
    };
    out.push_str(&format!("state_mean {}\n", join(&norm.state_mean)));
    out.push_str(&format!("state_std {}\n", join(&norm.state_std)));
    out.push_str(&format!("action_scale {}\n", join(&norm.action_scale)));
    out.push_str(&format!("rtg_scale {}\n", fmt_f64(norm.rtg_scale)));
    fs::write(path, out)?;
    Ok(())
}

fn parse_floats(line: &str, skip: usize, loc: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .skip(skip)
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| Error::parse(loc, format!("bad float {t:?}: {e}")))
        })
        .collect()
}

fn read_norm(path: &Path) -> Result<NormStats> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path.display().to_string(), "missing NORM header"))?;
    if !header.starts_with("NORM ") {
        return Err(Error::parse("line 1", "expected NORM header"));
    }
    let mut state_mean = None;
    let mut state_std = None;
    let mut action_scale = None;
    let mut rtg_scale = None;
    for (i, line) in lines {
        let loc = format!("line {}", i + 1);
        let mut it = line.split_whitespace();
        match it.next() {
            Some("state_mean") => state_mean = Some(parse_floats(line, 1, &loc)?),
            Some("state_std") => state_std = Some(parse_floats(line, 1, &loc)?),
            Some("action_scale") => action_scale = Some(parse_floats(line, 1, &loc)?),
            Some("rtg_scale") => rtg_scale = Some(parse_floats(line, 1, &loc)?[0]),
            Some(other) => return Err(Error::parse(loc, format!("unknown field {other:?}"))),
            None => {}
        }
    }
    match (state_mean, state_std, action_scale, rtg_scale) {
        (Some(m), Some(s), Some(a), Some(r)) => Ok(NormStats {
            state_mean: m,
            state_std: s,
            action_scale: a,
            rtg_scale: r,
        }),
        _ => Err(Error::parse(
            path.display().to_string(),
            "incomplete norm sidecar",
        )),
    }
}

fn norm_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".norm");
    s.into()
}

/// Write a dataset (text mode) plus its `<path>.norm` sidecar.
pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "LMAP1 n={} l={} L={} gamma={}",
        ds.n,
        ds.l,
        ds.macro_len,
        fmt_f64(ds.gamma)
    )?;
    if let Some(c) = &ds.comment {
        writeln!(w, "# envcfg {c}")?;
    }
    for ep in &ds.episodes {
        writeln!(w, "EP T={}", ep.len())?;
        for t in 0..ep.len() {
            let s = ep.states[t]
                .iter()
                .map(|v| fmt_f64(*v))
                .collect::<Vec<_>>()
                .join(" ");
            let a = ep.actions[t]
                .iter()
                .map(|v| fmt_f64(*v))
                .collect::<Vec<_>>()
                .join(" ");
            writeln!(w, "{s} | {a} | {}", fmt_f64(ep.rewards[t]))?;
        }
        writeln!(w, "END terminated={}", if ep.terminated { 1 } else { 0 })?;
    }
    w.flush()?;
    write_norm(&norm_path(path), &ds.norm)
}

/// Write a dataset in binary mode (magic `LMB1`, little-endian f32 records).
pub fn save_dataset_binary(path: &Path, ds: &Dataset) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(b"LMB1");
    buf.extend_from_slice(&(ds.n as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.l as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.macro_len as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.gamma as f32).to_le_bytes());
    buf.extend_from_slice(&(ds.episodes.len() as u32).to_le_bytes());
    for ep in &ds.episodes {
        buf.extend_from_slice(&(ep.len() as u32).to_le_bytes());
        buf.push(ep.terminated as u8);
        for t in 0..ep.len() {
            for v in &ep.states[t] {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            for v in &ep.actions[t] {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            buf.extend_from_slice(&(ep.rewards[t] as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    write_norm(&norm_path(path), &ds.norm)
}

/// Load either format, dispatching on the magic bytes.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"LMB1") {
        load_binary(path, &bytes)
    } else {
        load_text(path, &bytes)
    }
}

fn header_field(tok: Option<&str>, key: &str) -> Result<String> {
    let tok = tok.ok_or_else(|| Error::parse("line 1", format!("missing header field {key}")))?;
    tok.strip_prefix(&format!("{key}="))
        .map(str::to_owned)
        .ok_or_else(|| Error::parse("line 1", format!("expected {key}=, got {tok:?}")))
}

fn load_text(path: &Path, bytes: &[u8]) -> Result<Dataset> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::parse(path.display().to_string(), "not valid utf-8"))?;
    let mut lines = text.lines().enumerate().peekable();
    let (_, header) = lines
        .next()
        .filter(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| Error::parse(path.display().to_string(), "missing header"))?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some("LMAP1") {
        return Err(Error::parse("line 1", "missing header (expected LMAP1)"));
    }
    let n: usize = header_field(toks.next(), "n")?
        .parse()
        .map_err(|e| Error::parse("line 1", format!("bad n: {e}")))?;
    let l: usize = header_field(toks.next(), "l")?
        .parse()
        .map_err(|e| Error::parse("line 1", format!("bad l: {e}")))?;
    let macro_len: usize = header_field(toks.next(), "L")?
        .parse()
        .map_err(|e| Error::parse("line 1", format!("bad L: {e}")))?;
    let gamma: f64 = header_field(toks.next(), "gamma")?
        .parse()
        .map_err(|e| Error::parse("line 1", format!("bad gamma: {e}")))?;

    let mut comment = None;
    let mut episodes = Vec::new();
    while let Some((i, line)) = lines.next() {
        let loc = format!("line {}", i + 1);
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(c) = line.strip_prefix("# envcfg ") {
            comment = Some(c.to_string());
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let t: usize = line
            .strip_prefix("EP T=")
            .ok_or_else(|| Error::parse(&loc, format!("expected EP block, got {line:?}")))?
            .parse()
            .map_err(|e| Error::parse(&loc, format!("bad T: {e}")))?;
        let mut ep = EpisodeRaw {
            states: Vec::with_capacity(t),
            actions: Vec::with_capacity(t),
            rewards: Vec::with_capacity(t),
            terminated: false,
        };
        for rec in 0..t {
            let (j, line) = lines.next().ok_or_else(|| {
                Error::parse(
                    path.display().to_string(),
                    format!("truncated file: episode record {rec} missing"),
                )
            })?;
            let loc = format!("line {} (record {rec})", j + 1);
            let fields: Vec<&str> = line.split('|').collect();
            if fields.len() != 3 {
                return Err(Error::parse(&loc, "expected `s | a | r` fields"));
            }
            let s = parse_floats(fields[0], 0, &loc)?;
            let a = parse_floats(fields[1], 0, &loc)?;
            let r = parse_floats(fields[2], 0, &loc)?;
            if s.len() != n {
                return Err(Error::parse(
                    &loc,
                    format!("record {rec}: {} state values, header n={n}", s.len()),
                ));
            }
            if a.len() != l {
                return Err(Error::parse(
                    &loc,
                    format!("record {rec}: {} action values, header l={l}", a.len()),
                ));
            }
            if r.len() != 1 {
                return Err(Error::parse(&loc, format!("record {rec}: expected 1 reward")));
            }
            ep.states.push(s);
            ep.actions.push(a);
            ep.rewards.push(r[0]);
        }
        let (j, line) = lines.next().ok_or_else(|| {
            Error::parse(path.display().to_string(), "truncated file: missing END")
        })?;
        let loc = format!("line {}", j + 1);
        let term = line
            .trim()
            .strip_prefix("END terminated=")
            .ok_or_else(|| Error::parse(&loc, format!("expected END, got {line:?}")))?;
        ep.terminated = match term {
            "0" => false,
            "1" => true,
            other => return Err(Error::parse(&loc, format!("bad terminated flag {other:?}"))),
        };
        episodes.push(ep);
    }

    finish_load(path, episodes, macro_len, gamma, comment)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    loc: String,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::parse(
                &self.loc,
                format!("truncated at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
}

fn load_binary(path: &Path, bytes: &[u8]) -> Result<Dataset> {
    let loc = path.display().to_string();
    let mut r = ByteReader {
        bytes,
        pos: 4,
        loc: loc.clone(),
    };
    let n = r.u32()? as usize;
    let l = r.u32()? as usize;
    let macro_len = r.u32()? as usize;
    let gamma = r.f32()?;
    let n_eps = r.u32()? as usize;
    let mut episodes = Vec::with_capacity(n_eps);
    for e in 0..n_eps {
        let t = r.u32()? as usize;
        let terminated = r.take(1)?[0] != 0;
        let mut ep = EpisodeRaw {
            states: Vec::with_capacity(t),
            actions: Vec::with_capacity(t),
            rewards: Vec::with_capacity(t),
            terminated,
        };
        for rec in 0..t {
            let raw = r.take((n + l + 1) * 4).map_err(|_| {
                Error::parse(&loc, format!("episode {e} record {rec} truncated"))
            })?;
            let mut vals = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
            ep.states.push((&mut vals).take(n).collect());
            ep.actions.push((&mut vals).take(l).collect());
            ep.rewards.push(vals.next().unwrap());
        }
        episodes.push(ep);
    }
    finish_load(path, episodes, macro_len, gamma, None)
}

fn finish_load(
    path: &Path,
    episodes: Vec<EpisodeRaw>,
    macro_len: usize,
    gamma: f64,
    comment: Option<String>,
) -> Result<Dataset> {
    let mut ds = Dataset::from_episodes(episodes, macro_len, gamma)?;
    ds.comment = comment;
    let np = norm_path(path);
    if np.exists() {
        ds.norm = read_norm(&np)?;
        // re-derive chunks under the sidecar's normalization
        let raw = std::mem::take(&mut ds.episodes);
        let mut rebuilt = Dataset::from_episodes(raw, macro_len, gamma)?;
        rebuilt.norm = ds.norm.clone();
        rebuilt.chunks.clear();
        rebuilt.episode_tokens.clear();
        for ep in &rebuilt.episodes {
            let tokens: Vec<MacroToken> = segment_episode(ep, macro_len, gamma)?
                .iter()
                .map(|t| rebuilt.norm.apply_token(t))
                .collect();
            rebuilt.chunks.extend(make_chunks(&tokens));
            rebuilt.episode_tokens.push(tokens);
        }
        rebuilt.comment = ds.comment;
        return Ok(rebuilt);
    }
    Ok(ds)
}
