//! Incremental (KV-cached) decoding outside the autodiff tape.
//!
//! Each decoding row keeps its own self-attention key/value cache, so one step
//! costs work proportional to the tokens already generated rather than
//! re-running the whole prefix.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Arch, Seq2SeqModel};
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, gemm};
use crate::tensor::Graph;
use crate::vocab::{BOS, SEP};

struct AttnWeights<'m> {
    q: (&'m [f64], &'m [f64]),
    k: (&'m [f64], &'m [f64]),
    v: (&'m [f64], &'m [f64]),
    o: (&'m [f64], &'m [f64]),
}

struct LayerWeights<'m> {
    ln1: (&'m [f64], &'m [f64]),
    selfattn: AttnWeights<'m>,
    ln2: Option<(&'m [f64], &'m [f64])>,
    cross: Option<AttnWeights<'m>>,
    ln3: (&'m [f64], &'m [f64]),
    ff: (&'m [f64], &'m [f64], &'m [f64], &'m [f64]),
}

/// Encoder outputs projected into every decoder layer's cross-attention keys/values.
struct CrossMemory {
    /// `[layer][example]` -> `[len * d]`
    k: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
    len: Vec<usize>,
}

/// Per-row decoding caches.
#[derive(Clone)]
pub struct DecodeState {
    /// `[layer][row]` -> `[pos * d]`
    self_k: Vec<Vec<Vec<f64>>>,
    self_v: Vec<Vec<Vec<f64>>>,
    pos: Vec<usize>,
    memory_row: Vec<usize>,
    memory: Option<Rc<CrossMemory>>,
}

impl DecodeState {
    pub fn rows(&self) -> usize {
        self.pos.len()
    }

    /// Keeps rows in the given order (duplicates allowed), e.g. after a beam step.
    pub fn reorder(&mut self, rows: &[usize]) {
        let pick = |v: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<Vec<f64>>> {
            v.iter().map(|layer| rows.iter().map(|&r| layer[r].clone()).collect()).collect()
        };
        self.self_k = pick(&self.self_k);
        self.self_v = pick(&self.self_v);
        self.pos = rows.iter().map(|&r| self.pos[r]).collect();
        self.memory_row = rows.iter().map(|&r| self.memory_row[r]).collect();
    }

    /// Approximate bytes held by the caches of one row at `positions` decoder
    /// tokens plus `memory_len` encoder tokens.
    pub fn bytes_per_row(layers: usize, d_model: usize, positions: usize, memory_len: usize) -> usize {
        layers * 2 * (positions + memory_len) * d_model * std::mem::size_of::<f64>()
    }
}

/// Borrowed view of a model's weights arranged for incremental decoding.
pub struct IncrementalDecoder<'m> {
    model: &'m Seq2SeqModel,
    layers: Vec<LayerWeights<'m>>,
    final_ln: (&'m [f64], &'m [f64]),
    head: &'m [f64],
    head_bias: &'m [f64],
    tied: bool,
}

fn attn_weights<'m>(m: &'m Seq2SeqModel, prefix: &str) -> AttnWeights<'m> {
    let pair = |p: &str| (m.weight(&format!("{prefix}.{p}.w")), m.weight(&format!("{prefix}.{p}.b")));
    AttnWeights { q: pair("q"), k: pair("k"), v: pair("v"), o: pair("o") }
}

fn linear_rows(x: &[f64], rows: usize, w: &[f64], b: &[f64], d_in: usize, d_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * d_out];
    gemm(rows, d_in, d_out, 1.0, x, false, w, false, 0.0, &mut y);
    kernels::add_row_bias(&mut y, b);
    y
}

impl<'m> IncrementalDecoder<'m> {
    pub fn new(model: &'m Seq2SeqModel) -> Self {
        let cfg = model.config();
        let ln = |p: &str| (model.weight(&format!("{p}.g")), model.weight(&format!("{p}.b")));
        let layers = (0..cfg.decoder_layers)
            .map(|l| {
                let ed = cfg.arch == Arch::EncoderDecoder;
                LayerWeights {
                    ln1: ln(&format!("decoder.{l}.ln1")),
                    selfattn: attn_weights(model, &format!("decoder.{l}.self")),
                    ln2: ed.then(|| ln(&format!("decoder.{l}.ln2"))),
                    cross: ed.then(|| attn_weights(model, &format!("decoder.{l}.cross"))),
                    ln3: ln(&format!("decoder.{l}.ln3")),
                    ff: (
                        model.weight(&format!("decoder.{l}.ff.w1")),
                        model.weight(&format!("decoder.{l}.ff.b1")),
                        model.weight(&format!("decoder.{l}.ff.w2")),
                        model.weight(&format!("decoder.{l}.ff.b2")),
                    ),
                }
            })
            .collect();
        let tied = cfg.tie_embeddings;
        Self {
            model,
            layers,
            final_ln: ln("decoder.ln"),
            head: if tied { model.weight("embed.w") } else { model.weight("lm_head.w") },
            head_bias: model.weight("lm_head.b"),
            tied,
        }
    }

    pub fn model(&self) -> &Seq2SeqModel {
        self.model
    }

    pub fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    /// Encodes the sources (if any encoder) and returns a state with one row per
    /// source together with the first next-token logits `[rows * V]`.
    pub fn start(&self, sources: &[Vec<usize>]) -> Result<(DecodeState, Vec<f64>)> {
        let cfg = self.model.config();
        let rows = sources.len();
        let n_layers = cfg.decoder_layers;
        let mut state = DecodeState {
            self_k: vec![vec![Vec::new(); rows]; n_layers],
            self_v: vec![vec![Vec::new(); rows]; n_layers],
            pos: vec![0; rows],
            memory_row: (0..rows).collect(),
            memory: None,
        };
        match cfg.arch {
            Arch::EncoderDecoder => {
                state.memory = Some(Rc::new(self.build_memory(sources)?));
                let step: Vec<(usize, usize)> = (0..rows).map(|r| (r, BOS)).collect();
                let logits = self.step_rows(&mut state, &step)?;
                Ok((state, logits))
            }
            Arch::DecoderOnly => {
                let prompts: Vec<Vec<usize>> = sources
                    .iter()
                    .map(|s| {
                        let mut p = s.clone();
                        p.push(SEP);
                        p
                    })
                    .collect();
                let longest = prompts.iter().map(Vec::len).max().unwrap_or(0);
                if longest > cfg.max_len {
                    return Err(Error::LengthOverflow { len: longest, max: cfg.max_len });
                }
                let v = cfg.vocab_size;
                let mut first = vec![0.0; rows * v];
                for t in 0..longest {
                    let step: Vec<(usize, usize)> =
                        prompts.iter().enumerate().filter(|(_, p)| t < p.len()).map(|(r, p)| (r, p[t])).collect();
                    let logits = self.step_rows(&mut state, &step)?;
                    for (k, &(r, _)) in step.iter().enumerate() {
                        if t + 1 == prompts[r].len() {
                            first[r * v..(r + 1) * v].copy_from_slice(&logits[k * v..(k + 1) * v]);
                        }
                    }
                }
                Ok((state, first))
            }
        }
    }

    fn build_memory(&self, sources: &[Vec<usize>]) -> Result<CrossMemory> {
        let cfg = self.model.config();
        let d = cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::no_grad();
        let (out, len, _, _) = self.model.encode(&mut g, sources, false, &mut rng)?;
        let values = g.value(out);
        let mut k = Vec::with_capacity(self.layers.len());
        let mut v = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let cross = layer.cross.as_ref().expect("encoder-decoder layer has cross-attention");
            let mut lk = Vec::with_capacity(sources.len());
            let mut lv = Vec::with_capacity(sources.len());
            for (b, s) in sources.iter().enumerate() {
                let rows = &values[b * len * d..(b * len + s.len()) * d];
                lk.push(linear_rows(rows, s.len(), cross.k.0, cross.k.1, d, d));
                lv.push(linear_rows(rows, s.len(), cross.v.0, cross.v.1, d, d));
            }
            k.push(lk);
            v.push(lv);
        }
        Ok(CrossMemory { k, v, len: sources.iter().map(Vec::len).collect() })
    }

    /// Feeds all rows one token each; returns logits `[rows * V]`.
    pub fn step(&self, state: &mut DecodeState, tokens: &[usize]) -> Result<Vec<f64>> {
        if tokens.len() != state.rows() {
            return Err(Error::Shape(format!("{} tokens for {} rows", tokens.len(), state.rows())));
        }
        let pairs: Vec<(usize, usize)> = tokens.iter().copied().enumerate().collect();
        self.step_rows(state, &pairs)
    }

    fn step_rows(&self, state: &mut DecodeState, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        let cfg = self.model.config();
        let (d, heads, dh, v) = (cfg.d_model, cfg.heads, cfg.head_dim(), cfg.vocab_size);
        let n = pairs.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let emb = self.model.weight("embed.w");
        let pos_table = self.model.positions();
        let scale = (d as f64).sqrt();
        let mut x = vec![0.0; n * d];
        for (i, &(r, tok)) in pairs.iter().enumerate() {
            if tok >= v {
                return Err(Error::TokenOutOfRange { token: tok, vocab: v });
            }
            let p = state.pos[r];
            if p >= cfg.max_len {
                return Err(Error::LengthOverflow { len: p + 1, max: cfg.max_len });
            }
            for j in 0..d {
                x[i * d + j] = emb[tok * d + j] * scale + pos_table[p * d + j];
            }
        }
        let inv = 1.0 / (dh as f64).sqrt();
        let mut macs = 0u64;
        for (l, w) in self.layers.iter().enumerate() {
            let mut h = x.clone();
            kernels::layer_norm_rows(&mut h, d, w.ln1.0, w.ln1.1);
            let q = linear_rows(&h, n, w.selfattn.q.0, w.selfattn.q.1, d, d);
            let k = linear_rows(&h, n, w.selfattn.k.0, w.selfattn.k.1, d, d);
            let vv = linear_rows(&h, n, w.selfattn.v.0, w.selfattn.v.1, d, d);
            let mut ctx = vec![0.0; n * d];
            for (i, &(r, _)) in pairs.iter().enumerate() {
                state.self_k[l][r].extend_from_slice(&k[i * d..(i + 1) * d]);
                state.self_v[l][r].extend_from_slice(&vv[i * d..(i + 1) * d]);
                let keys = &state.self_k[l][r];
                let vals = &state.self_v[l][r];
                let t = keys.len() / d;
                macs += attend(&q[i * d..(i + 1) * d], keys, vals, t, heads, dh, inv, &mut ctx[i * d..(i + 1) * d]);
            }
            let o = linear_rows(&ctx, n, w.selfattn.o.0, w.selfattn.o.1, d, d);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            if let (Some(ln2), Some(cross)) = (w.ln2, w.cross.as_ref()) {
                let memory = state.memory.as_ref().expect("encoder-decoder state has memory");
                let mut h = x.clone();
                kernels::layer_norm_rows(&mut h, d, ln2.0, ln2.1);
                let q = linear_rows(&h, n, cross.q.0, cross.q.1, d, d);
                let mut ctx = vec![0.0; n * d];
                for (i, &(r, _)) in pairs.iter().enumerate() {
                    let mi = state.memory_row[r];
                    macs += attend(
                        &q[i * d..(i + 1) * d],
                        &memory.k[l][mi],
                        &memory.v[l][mi],
                        memory.len[mi],
                        heads,
                        dh,
                        inv,
                        &mut ctx[i * d..(i + 1) * d],
                    );
                }
                let o = linear_rows(&ctx, n, cross.o.0, cross.o.1, d, d);
                x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            }
            let mut h = x.clone();
            kernels::layer_norm_rows(&mut h, d, w.ln3.0, w.ln3.1);
            let d_ff = cfg.d_ff;
            let mut f = linear_rows(&h, n, w.ff.0, w.ff.1, d, d_ff);
            f.iter_mut().for_each(|z| *z = kernels::gelu(*z));
            let f = linear_rows(&f, n, w.ff.2, w.ff.3, d_ff, d);
            x.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        }
        kernels::count_macs(macs);
        for &(r, _) in pairs {
            state.pos[r] += 1;
        }
        kernels::layer_norm_rows(&mut x, d, self.final_ln.0, self.final_ln.1);
        let mut logits = vec![0.0; n * v];
        gemm(n, d, v, 1.0, &x, false, self.head, self.tied, 0.0, &mut logits);
        kernels::add_row_bias(&mut logits, self.head_bias);
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite { op: "decode_step" });
        }
        Ok(logits)
    }
}

/// Multi-head attention of one query row over `t` cached keys/values.
#[allow(clippy::too_many_arguments)]
fn attend(q: &[f64], keys: &[f64], vals: &[f64], t: usize, heads: usize, dh: usize, inv: f64, out: &mut [f64]) -> u64 {
    let d = heads * dh;
    let mut scores = vec![0.0; t];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &keys[j * d + h * dh..j * d + (h + 1) * dh];
            *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * inv;
        }
        kernels::softmax_row(&mut scores);
        let oh = &mut out[h * dh..(h + 1) * dh];
        for (j, &a) in scores.iter().enumerate() {
            let vh = &vals[j * d + h * dh..j * d + (h + 1) * dh];
            oh.iter_mut().zip(vh).for_each(|(o, x)| *o += a * x);
        }
    }
    (2 * t * d) as u64
}
