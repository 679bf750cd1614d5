//! Autoregressive generation: greedy, beam search (all final beams kept),
//! nucleus sampling and temperature scaling.
//!
//! Strategies are written against [`StepModel`] so they run equally on the
//! KV-cached transformer decoder and on small hand-built logit tables.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::infer::{DecodeState, IncrementalDecoder};
use crate::tensor::kernels;
use crate::vocab::EOS;

/// Anything that produces next-token logits row by row.
pub trait StepModel {
    type State;

    fn vocab_size(&self) -> usize;

    fn eos(&self) -> usize {
        EOS
    }

    /// One row per source plus the first logits `[rows * V]`.
    fn start(&self, sources: &[Vec<usize>]) -> Result<(Self::State, Vec<f64>)>;

    /// Feeds one token per row and returns the next logits `[rows * V]`.
    fn step(&self, state: &mut Self::State, tokens: &[usize]) -> Result<Vec<f64>>;

    /// Rebuilds the row set from existing rows (duplicates allowed).
    fn reorder(&self, state: &mut Self::State, rows: &[usize]);
}

impl StepModel for IncrementalDecoder<'_> {
    type State = DecodeState;

    fn vocab_size(&self) -> usize {
        IncrementalDecoder::vocab_size(self)
    }

    fn start(&self, sources: &[Vec<usize>]) -> Result<(DecodeState, Vec<f64>)> {
        IncrementalDecoder::start(self, sources)
    }

    fn step(&self, state: &mut DecodeState, tokens: &[usize]) -> Result<Vec<f64>> {
        IncrementalDecoder::step(self, state, tokens)
    }

    fn reorder(&self, state: &mut DecodeState, rows: &[usize]) {
        state.reorder(rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMethod {
    Greedy,
    Beam,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub method: DecodeMethod,
    pub beam_k: usize,
    pub nucleus_p: f64,
    pub temperature: f64,
    pub max_len: usize,
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { method: DecodeMethod::Beam, beam_k: 16, nucleus_p: 0.95, temperature: 1.0, max_len: 32, num_samples: 48, seed: 0 }
    }
}

/// High-temperature sampling preset.
pub const HIGH_TEMPERATURE: f64 = 1.5;

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self { method: DecodeMethod::Greedy, max_len, ..Self::default() }
    }

    pub fn beam(beam_k: usize, max_len: usize) -> Self {
        Self { method: DecodeMethod::Beam, beam_k, max_len, ..Self::default() }
    }

    pub fn sample(num_samples: usize, max_len: usize, seed: u64) -> Self {
        Self { method: DecodeMethod::Sample, num_samples, max_len, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_k == 0 {
            return Err(Error::Config("beam_k must be at least 1".into()));
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(Error::Config(format!("nucleus_p {} outside (0, 1]", self.nucleus_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.max_len == 0 || self.num_samples == 0 {
            return Err(Error::Config("max_len and num_samples must be positive".into()));
        }
        Ok(())
    }
}

/// A generated sequence (EOS included when produced) and its total log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
}

/// Stable per-example RNG seed.
pub fn example_seed(base: u64, example_id: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in example_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    base ^ h
}

pub fn apply_temperature(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    Ok(logits.iter().map(|z| z / tau).collect())
}

/// Smallest probability-sorted prefix with cumulative mass >= `p`, renormalized.
/// Ties in probability keep the lower token id first.
pub fn nucleus(probs: &[f64], p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for t in order {
        kept.push((t, probs[t]));
        mass += probs[t];
        if mass >= p - 1e-12 {
            break;
        }
    }
    kept.into_iter().map(|(t, q)| (t, q / mass)).collect()
}

fn draw<R: Rng>(set: &[(usize, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(t, q) in set {
        acc += q;
        if u < acc {
            return t;
        }
    }
    set.last().expect("nucleus is never empty").0
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Batched greedy decoding; lower token id wins ties.
pub fn greedy<M: StepModel>(model: &M, sources: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
    let v = model.vocab_size();
    let eos = model.eos();
    let (mut state, mut logits) = model.start(sources)?;
    let mut out = vec![Vec::new(); sources.len()];
    let mut live: Vec<usize> = (0..sources.len()).collect();
    while !live.is_empty() {
        let mut keep = Vec::new();
        let mut tokens = Vec::new();
        for (r, &b) in live.iter().enumerate() {
            let t = argmax(&logits[r * v..(r + 1) * v]);
            out[b].push(t);
            if t != eos && out[b].len() < max_len {
                keep.push(r);
                tokens.push(t);
            }
        }
        if keep.is_empty() {
            break;
        }
        if keep.len() != live.len() {
            model.reorder(&mut state, &keep);
            live = keep.iter().map(|&r| live[r]).collect();
        }
        logits = model.step(&mut state, &tokens)?;
    }
    Ok(out)
}

/// Greedy decoding that first forces `prefixes[b]`; each output starts with
/// its prefix. A prefix that already holds EOS or reaches `max_len` is
/// returned as is.
pub fn continue_greedy<M: StepModel>(model: &M, sources: &[Vec<usize>], prefixes: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
    if prefixes.len() != sources.len() {
        return Err(Error::InvalidArgument(format!("{} prefixes for {} sources", prefixes.len(), sources.len())));
    }
    let v = model.vocab_size();
    let eos = model.eos();
    let done = |p: &[usize]| p.contains(&eos) || p.len() >= max_len;
    let mut out = vec![Vec::new(); sources.len()];
    let mut live: Vec<usize> = Vec::new();
    for (b, p) in prefixes.iter().enumerate() {
        if done(p) {
            out[b] = p.clone();
        } else {
            live.push(b);
        }
    }
    if live.is_empty() {
        return Ok(out);
    }
    let live_sources: Vec<Vec<usize>> = live.iter().map(|&b| sources[b].clone()).collect();
    let (mut state, mut logits) = model.start(&live_sources)?;
    loop {
        let mut keep = Vec::new();
        let mut tokens = Vec::new();
        for (r, &b) in live.iter().enumerate() {
            let pos = out[b].len();
            let t = if pos < prefixes[b].len() { prefixes[b][pos] } else { argmax(&logits[r * v..(r + 1) * v]) };
            out[b].push(t);
            if t != eos && out[b].len() < max_len {
                keep.push(r);
                tokens.push(t);
            }
        }
        if keep.is_empty() {
            break;
        }
        if keep.len() != live.len() {
            model.reorder(&mut state, &keep);
            live = keep.iter().map(|&r| live[r]).collect();
        }
        logits = model.step(&mut state, &tokens)?;
    }
    Ok(out)
}

#[derive(Clone)]
struct Beam {
    tokens: Vec<usize>,
    score: f64,
    row: Option<usize>,
}

fn rank(a: &(f64, &[usize]), b: &(f64, &[usize])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Beam search over every source at once. Returns up to `beam_k` hypotheses per
/// source sorted by total log-probability (ties: lexicographically smaller
/// token sequence first). Finished beams stay in the pool and keep competing.
pub fn beam_search<M: StepModel>(
    model: &M,
    sources: &[Vec<usize>],
    beam_k: usize,
    max_len: usize,
) -> Result<Vec<Vec<Hypothesis>>> {
    if beam_k == 0 || max_len == 0 {
        return Err(Error::InvalidArgument("beam_k and max_len must be positive".into()));
    }
    let v = model.vocab_size();
    let eos = model.eos();
    let (mut state, mut logits) = model.start(sources)?;
    let mut beams: Vec<Vec<Beam>> =
        (0..sources.len()).map(|b| vec![Beam { tokens: Vec::new(), score: 0.0, row: Some(b) }]).collect();
    loop {
        let mut logprobs = logits;
        for row in logprobs.chunks_mut(v) {
            kernels::log_softmax_row(row);
        }
        let mut parents = Vec::new();
        let mut step_tokens = Vec::new();
        for pool in beams.iter_mut() {
            // (score, tokens, parent row when the candidate extends a live beam)
            let mut cands: Vec<(f64, Vec<usize>, Option<usize>)> = Vec::new();
            for beam in pool.iter() {
                match beam.row {
                    None => cands.push((beam.score, beam.tokens.clone(), None)),
                    Some(r) => {
                        for t in 0..v {
                            let mut toks = beam.tokens.clone();
                            toks.push(t);
                            cands.push((beam.score + logprobs[r * v + t], toks, Some(r)));
                        }
                    }
                }
            }
            cands.sort_by(|a, b| rank(&(a.0, &a.1), &(b.0, &b.1)));
            cands.truncate(beam_k);
            *pool = cands
                .into_iter()
                .map(|(score, tokens, parent)| {
                    let row = match parent {
                        Some(r) if *tokens.last().expect("extended") != eos && tokens.len() < max_len => {
                            parents.push(r);
                            step_tokens.push(*tokens.last().expect("extended"));
                            Some(parents.len() - 1)
                        }
                        _ => None,
                    };
                    Beam { tokens, score, row }
                })
                .collect();
        }
        if parents.is_empty() {
            break;
        }
        model.reorder(&mut state, &parents);
        logits = model.step(&mut state, &step_tokens)?;
    }
    Ok(beams
        .into_iter()
        .map(|pool| pool.into_iter().map(|b| Hypothesis { tokens: b.tokens, logprob: b.score }).collect())
        .collect())
}

/// Continues sampling from an already started state. Row `r` draws from `rngs[r]`.
fn sample_rows<M: StepModel>(
    model: &M,
    mut state: M::State,
    mut logits: Vec<f64>,
    rngs: &mut [ChaCha8Rng],
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<usize>>> {
    let v = model.vocab_size();
    let eos = model.eos();
    let mut out = vec![Vec::new(); rngs.len()];
    let mut live: Vec<usize> = (0..rngs.len()).collect();
    while !live.is_empty() {
        let mut keep = Vec::new();
        let mut tokens = Vec::new();
        for (r, &b) in live.iter().enumerate() {
            let mut row = apply_temperature(&logits[r * v..(r + 1) * v], cfg.temperature)?;
            kernels::softmax_row(&mut row);
            let set = nucleus(&row, cfg.nucleus_p);
            let t = draw(&set, &mut rngs[b]);
            debug_assert!(set.iter().any(|&(s, _)| s == t));
            out[b].push(t);
            if t != eos && out[b].len() < cfg.max_len {
                keep.push(r);
                tokens.push(t);
            }
        }
        if keep.is_empty() {
            break;
        }
        if keep.len() != live.len() {
            model.reorder(&mut state, &keep);
            live = keep.iter().map(|&r| live[r]).collect();
        }
        logits = model.step(&mut state, &tokens)?;
    }
    Ok(out)
}

fn row_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One nucleus sample per source; source `i` uses its own seed `seeds[i]`.
pub fn nucleus_sample<M: StepModel>(
    model: &M,
    sources: &[Vec<usize>],
    seeds: &[u64],
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    if seeds.len() != sources.len() {
        return Err(Error::InvalidArgument(format!("{} seeds for {} sources", seeds.len(), sources.len())));
    }
    let (state, logits) = model.start(sources)?;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| row_rng(s, 0)).collect();
    sample_rows(model, state, logits, &mut rngs, cfg)
}

/// `n` independent samples for one source (the source is encoded once).
pub fn sample_many<M: StepModel>(
    model: &M,
    source: &[usize],
    n: usize,
    seed: u64,
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let (mut state, first) = model.start(&[source.to_vec()])?;
    model.reorder(&mut state, &vec![0; n]);
    let logits: Vec<f64> = (0..n).flat_map(|_| first.iter().copied()).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..n as u64).map(|i| row_rng(seed, i)).collect();
    sample_rows(model, state, logits, &mut rngs, cfg)
}

/// Scores a fixed continuation under the model (sum of token log-probs).
pub fn sequence_logprob<M: StepModel>(model: &M, source: &[usize], tokens: &[usize]) -> Result<f64> {
    let v = model.vocab_size();
    let (mut state, mut logits) = model.start(&[source.to_vec()])?;
    let mut total = 0.0;
    for (i, &t) in tokens.iter().enumerate() {
        if t >= v {
            return Err(Error::TokenOutOfRange { token: t, vocab: v });
        }
        kernels::log_softmax_row(&mut logits);
        total += logits[t];
        if i + 1 < tokens.len() {
            logits = model.step(&mut state, &[t])?;
        }
    }
    Ok(total)
}

/// Generates for one source according to `cfg.method`.
pub fn decode<M: StepModel>(model: &M, source: &[usize], cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let src = [source.to_vec()];
    match cfg.method {
        DecodeMethod::Greedy => {
            let tokens = greedy(model, &src, cfg.max_len)?.remove(0);
            let logprob = sequence_logprob(model, source, &tokens)?;
            Ok(vec![Hypothesis { tokens, logprob }])
        }
        DecodeMethod::Beam => Ok(beam_search(model, &src, cfg.beam_k, cfg.max_len)?.remove(0)),
        DecodeMethod::Sample => sample_many(model, source, cfg.num_samples, cfg.seed, cfg)?
            .into_iter()
            .map(|tokens| {
                let logprob = sequence_logprob(model, source, &tokens)?;
                Ok(Hypothesis { tokens, logprob })
            })
            .collect(),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{ModelConfig, Seq2SeqModel};

    /// Logits are a fixed pseudo-random function of (source, prefix).
    pub struct TableModel {
        pub vocab: usize,
        pub salt: u64,
        pub uniform: bool,
    }

    impl TableModel {
        pub fn logits(&self, source: &[usize], prefix: &[usize]) -> Vec<f64> {
            if self.uniform {
                return vec![0.0; self.vocab];
            }
            let mut h = self.salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xABCD;
            for &t in source.iter().chain([usize::MAX].iter()).chain(prefix) {
                h ^= t as u64;
                h = h.wrapping_mul(0x0100_0000_01b3).rotate_left(17);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            (0..self.vocab).map(|_| rng.random_range(-3.0..3.0)).collect()
        }
    }

    impl StepModel for TableModel {
        type State = Vec<(Vec<usize>, Vec<usize>)>;

        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn start(&self, sources: &[Vec<usize>]) -> Result<(Self::State, Vec<f64>)> {
            let state: Self::State = sources.iter().map(|s| (s.clone(), Vec::new())).collect();
            let logits = state.iter().flat_map(|(s, p)| self.logits(s, p)).collect();
            Ok((state, logits))
        }

        fn step(&self, state: &mut Self::State, tokens: &[usize]) -> Result<Vec<f64>> {
            for (row, &t) in state.iter_mut().zip(tokens) {
                row.1.push(t);
            }
            Ok(state.iter().flat_map(|(s, p)| self.logits(s, p)).collect())
        }

        fn reorder(&self, state: &mut Self::State, rows: &[usize]) {
            *state = rows.iter().map(|&r| state[r].clone()).collect();
        }
    }

    /// Every complete sequence (ends in EOS or reaches max_len), ranked.
    pub fn exhaustive(m: &TableModel, source: &[usize], max_len: usize) -> Vec<(Vec<usize>, f64)> {
        let mut done = Vec::new();
        let mut frontier = vec![(Vec::<usize>::new(), 0.0)];
        while let Some((prefix, score)) = frontier.pop() {
            let z = m.logits(source, &prefix);
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for t in 0..m.vocab {
                let mut p = prefix.clone();
                p.push(t);
                let s = score + (z[t] - lse);
                if t == EOS || p.len() == max_len {
                    done.push((p, s));
                } else {
                    frontier.push((p, s));
                }
            }
        }
        done.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        done
    }

    #[test]
    fn beam_matches_exhaustive_enumeration() {
        let m = TableModel { vocab: 3, salt: 7, uniform: false };
        let src = vec![1, 2];
        let beams = beam_search(&m, &[src.clone()], 9, 2).unwrap().remove(0);
        let all = exhaustive(&m, &src, 2);
        assert_eq!(beams.len(), all.len().min(9));
        for (b, (toks, s)) in beams.iter().zip(&all) {
            assert_eq!(&b.tokens, toks);
            assert!((b.logprob - s).abs() < 1e-9);
        }
    }

    #[test]
    fn beam_of_one_is_greedy() {
        for salt in 0..20 {
            let m = TableModel { vocab: 5, salt, uniform: false };
            let src = vec![salt as usize];
            let g = greedy(&m, &[src.clone()], 6).unwrap().remove(0);
            let b = beam_search(&m, &[src], 1, 6).unwrap().remove(0);
            assert_eq!(b[0].tokens, g);
        }
    }

    #[test]
    fn continuation_keeps_prefix_and_matches_greedy_on_its_own_prefix() {
        let m = TableModel { vocab: 6, salt: 3, uniform: false };
        let sources: Vec<Vec<usize>> = (0..8).map(|s| vec![s, s + 1]).collect();
        let g = greedy(&m, &sources, 7).unwrap();
        let empty = vec![Vec::new(); sources.len()];
        assert_eq!(continue_greedy(&m, &sources, &empty, 7).unwrap(), g);
        let own: Vec<Vec<usize>> = g.iter().map(|o| o[..o.len().min(2)].to_vec()).collect();
        assert_eq!(continue_greedy(&m, &sources, &own, 7).unwrap(), g);
        let forced: Vec<Vec<usize>> = (0..8).map(|b| vec![(b % 2) * 4, 5]).collect();
        for (out, p) in continue_greedy(&m, &sources, &forced, 7).unwrap().iter().zip(&forced) {
            assert!(out.starts_with(p));
            assert!(out.len() <= 7);
        }
        let full = vec![vec![0; 7]; sources.len()];
        assert_eq!(continue_greedy(&m, &sources, &full, 7).unwrap(), full);
    }

    #[test]
    fn uniform_logits_rank_by_token_ids() {
        let m = TableModel { vocab: 3, salt: 0, uniform: true };
        let beams = beam_search(&m, &[vec![0]], 4, 2).unwrap().remove(0);
        // EOS (id 2) ends at length 1 with the highest score -ln 3.
        assert_eq!(beams[0].tokens, vec![2]);
        let rest: Vec<Vec<usize>> = beams[1..].iter().map(|b| b.tokens.clone()).collect();
        assert_eq!(rest, vec![vec![0, 0], vec![0, 1], vec![0, 2]]);
    }

    #[test]
    fn batched_beam_equals_per_source_beam() {
        let m = TableModel { vocab: 4, salt: 3, uniform: false };
        let srcs = vec![vec![1], vec![2, 3], vec![4]];
        let batched = beam_search(&m, &srcs, 3, 4).unwrap();
        for (i, s) in srcs.iter().enumerate() {
            assert_eq!(batched[i], beam_search(&m, &[s.clone()], 3, 4).unwrap()[0]);
        }
    }

    #[test]
    fn nucleus_example_set() {
        let set = nucleus(&[0.6, 0.3, 0.08, 0.02], 0.85);
        assert_eq!(set.len(), 2);
        assert_eq!(set[0].0, 0);
        assert!((set[0].1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((set[1].1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(nucleus(&[0.6, 0.3, 0.08, 0.02], 1.0).len(), 4);
    }

    #[test]
    fn temperature_flattens() {
        assert!(apply_temperature(&[1.0], 0.0).is_err());
        assert_eq!(apply_temperature(&[2.0, 0.0], 1.0).unwrap(), vec![2.0, 0.0]);
        let mut p = apply_temperature(&[2.0, 0.0], 1.5).unwrap();
        kernels::softmax_row(&mut p);
        let oracle = 1.0 / (1.0 + (-2.0f64 / 1.5).exp());
        assert!((p[0] - oracle).abs() < 1e-12);
        assert!((p[0] - 0.7914).abs() < 1e-4);
    }

    #[test]
    fn sampling_is_seeded() {
        let m = TableModel { vocab: 6, salt: 1, uniform: false };
        let cfg = DecodeConfig::sample(4, 8, 11);
        let a = sample_many(&m, &[3], 4, 11, &cfg).unwrap();
        assert_eq!(a, sample_many(&m, &[3], 4, 11, &cfg).unwrap());
        assert_ne!(a, sample_many(&m, &[3], 4, 12, &cfg).unwrap());
        let b = nucleus_sample(&m, &[vec![3], vec![4]], &[5, 6], &cfg).unwrap();
        let c = nucleus_sample(&m, &[vec![4]], &[6], &cfg).unwrap();
        assert_eq!(b[1], c[0]);
    }

    #[test]
    fn transformer_beam_and_greedy_agree_on_top_beam() {
        let mut cfg = ModelConfig::encoder_decoder((1, 1), 8, 2, 10, 16);
        cfg.dropout = 0.0;
        let model = Seq2SeqModel::new(cfg, 5).unwrap();
        let dec = IncrementalDecoder::new(&model);
        let srcs = vec![vec![5, 6, 7], vec![8, 9]];
        let g = greedy(&dec, &srcs, 6).unwrap();
        let b = beam_search(&dec, &srcs, 1, 6).unwrap();
        for i in 0..2 {
            assert_eq!(b[i][0].tokens, g[i]);
            let lp = sequence_logprob(&dec, &srcs[i], &g[i]).unwrap();
            assert!((lp - b[i][0].logprob).abs() < 1e-9);
        }
        let k4 = beam_search(&dec, &srcs, 4, 6).unwrap();
        for pool in &k4 {
            assert_eq!(pool.len(), 4);
            assert!(pool.windows(2).all(|w| w[0].logprob >= w[1].logprob));
        }
    }
}
