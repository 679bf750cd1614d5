//! Teacher-forced forward pass on the autodiff tape.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Arch, Part, Seq2SeqModel};
use crate::error::{Error, Result};
use crate::tensor::{Graph, TokenDistribution, Var};
use crate::vocab::{BOS, PAD, SEP};

/// Additive score for masked attention cells. Finite so every value stays finite.
pub(crate) const MASKED: f64 = -1e9;

/// Self-attention states of one layer, as `[batch * len, d_model]` tensors.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub hidden: Var,
    pub batch: usize,
    pub len: usize,
    pub causal: bool,
    /// `[batch * len]` flags for non-padding positions.
    pub valid: Vec<bool>,
}

/// Output of a teacher-forced forward pass over a padded batch.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[batch * target_len, vocab]`; row `b * target_len + i` predicts target token `i` of example `b`.
    pub logits: Var,
    pub batch: usize,
    pub target_len: usize,
    /// Padded gold ids aligned with the logit rows (PAD where masked).
    pub targets: Vec<usize>,
    /// 1.0 for real target positions, 0.0 for padding.
    pub mask: Vec<f64>,
    pub encoder: Vec<LayerTrace>,
    pub decoder: Vec<LayerTrace>,
}

impl ForwardTrace {
    pub fn vocab_size(&self, g: &Graph<'_>) -> usize {
        g.shape(self.logits)[1]
    }

    /// Logit rows of one example's real target positions.
    pub fn example_logits<'a>(&self, g: &'a Graph<'_>, b: usize) -> Vec<&'a [f64]> {
        let v = self.vocab_size(g);
        let all = g.value(self.logits);
        (0..self.target_len)
            .filter(|i| self.mask[b * self.target_len + i] > 0.0)
            .map(|i| {
                let r = b * self.target_len + i;
                &all[r * v..(r + 1) * v]
            })
            .collect()
    }
}

struct AttnOut {
    out: Var,
    q: Var,
    k: Var,
    v: Var,
}

fn build_mask(batch: usize, heads: usize, tq: usize, tk: usize, key_valid: &[bool], causal: bool) -> Vec<f64> {
    let mut mask = vec![0.0; batch * heads * tq * tk];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..tq {
                let row = ((b * heads + h) * tq + i) * tk;
                for j in 0..tk {
                    if !key_valid[b * tk + j] || (causal && j > i) {
                        mask[row + j] = MASKED;
                    }
                }
            }
        }
    }
    mask
}

impl Seq2SeqModel {
    fn check_tokens(&self, seq: &[usize]) -> Result<()> {
        match seq.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(&t) => Err(Error::TokenOutOfRange { token: t, vocab: self.config.vocab_size }),
            None => Ok(()),
        }
    }

    fn embed<'p>(&'p self, g: &mut Graph<'p>, ids: &[usize], len: usize, train: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        let d = self.config.d_model;
        let table = g.param_by_name(&self.params, "embed.w")?;
        let e = g.embedding(table, ids)?;
        let e = g.scale(e, (d as f64).sqrt())?;
        let mut pos = Vec::with_capacity(ids.len() * d);
        for r in 0..ids.len() {
            let p = r % len;
            pos.extend_from_slice(&self.positions()[p * d..(p + 1) * d]);
        }
        let x = g.add_const(e, &pos)?;
        g.dropout(x, self.config.dropout, train, rng)
    }

    fn layer_norm<'p>(&'p self, g: &mut Graph<'p>, x: Var, prefix: &str) -> Result<Var> {
        let gain = g.param_by_name(&self.params, &format!("{prefix}.g"))?;
        let bias = g.param_by_name(&self.params, &format!("{prefix}.b"))?;
        g.layer_norm(x, gain, bias)
    }

    fn linear<'p>(&'p self, g: &mut Graph<'p>, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = g.param_by_name(&self.params, w)?;
        let b = g.param_by_name(&self.params, b)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<'p>(
        &'p self,
        g: &mut Graph<'p>,
        prefix: &str,
        xq: Var,
        xkv: Var,
        batch: usize,
        tq: usize,
        tk: usize,
        mask: &[f64],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<AttnOut> {
        let h = self.config.heads;
        let q = self.linear(g, xq, &format!("{prefix}.q.w"), &format!("{prefix}.q.b"))?;
        let k = self.linear(g, xkv, &format!("{prefix}.k.w"), &format!("{prefix}.k.b"))?;
        let v = self.linear(g, xkv, &format!("{prefix}.v.w"), &format!("{prefix}.v.b"))?;
        let qh = g.split_heads(q, batch, tq, h)?;
        let kh = g.split_heads(k, batch, tk, h)?;
        let vh = g.split_heads(v, batch, tk, h)?;
        let scores = g.bmm(qh, kh, true)?;
        let scores = g.scale(scores, 1.0 / (self.config.head_dim() as f64).sqrt())?;
        let scores = g.add_const(scores, mask)?;
        let att = g.softmax(scores)?;
        let ctx = g.bmm(att, vh, false)?;
        let ctx = g.merge_heads(ctx, batch, tq, h)?;
        let out = self.linear(g, ctx, &format!("{prefix}.o.w"), &format!("{prefix}.o.b"))?;
        let out = g.dropout(out, self.config.dropout, train, rng)?;
        Ok(AttnOut { out, q, k, v })
    }

    fn feed_forward<'p>(&'p self, g: &mut Graph<'p>, x: Var, prefix: &str, train: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        let h = self.linear(g, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = g.gelu(h)?;
        let h = self.linear(g, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))?;
        g.dropout(h, self.config.dropout, train, rng)
    }

    /// Runs the encoder stack. Returns the final normalized states
    /// `[batch * len, d]`, the padded length, and per-layer traces.
    pub fn encode<'p>(
        &'p self,
        g: &mut Graph<'p>,
        sources: &[Vec<usize>],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, usize, Vec<bool>, Vec<LayerTrace>)> {
        if self.config.arch != Arch::EncoderDecoder {
            return Err(Error::Config("decoder-only models have no encoder".into()));
        }
        let batch = sources.len();
        let len = sources.iter().map(Vec::len).max().unwrap_or(0);
        if len == 0 {
            return Err(Error::InvalidArgument("empty source batch".into()));
        }
        if len > self.config.max_len {
            return Err(Error::LengthOverflow { len, max: self.config.max_len });
        }
        let mut ids = Vec::with_capacity(batch * len);
        let mut valid = Vec::with_capacity(batch * len);
        for s in sources {
            self.check_tokens(s)?;
            for i in 0..len {
                ids.push(s.get(i).copied().unwrap_or(PAD));
                valid.push(i < s.len());
            }
        }
        let mask = build_mask(batch, self.config.heads, len, len, &valid, false);
        let mut x = self.embed(g, &ids, len, train, rng)?;
        let mut traces = Vec::with_capacity(self.config.encoder_layers);
        for l in 0..self.config.encoder_layers {
            let h = self.layer_norm(g, x, &format!("encoder.{l}.ln1"))?;
            let a = self.attention(g, &format!("encoder.{l}.self"), h, h, batch, len, len, &mask, train, rng)?;
            x = g.add(x, a.out)?;
            let h = self.layer_norm(g, x, &format!("encoder.{l}.ln2"))?;
            let f = self.feed_forward(g, h, &format!("encoder.{l}.ff"), train, rng)?;
            x = g.add(x, f)?;
            traces.push(LayerTrace { q: a.q, k: a.k, v: a.v, hidden: x, batch, len, causal: false, valid: valid.clone() });
        }
        let out = self.layer_norm(g, x, "encoder.ln")?;
        Ok((out, len, valid, traces))
    }

    fn project<'p>(&'p self, g: &mut Graph<'p>, h: Var) -> Result<Var> {
        let logits = if self.config.tie_embeddings {
            let e = g.param_by_name(&self.params, "embed.w")?;
            g.matmul_t(h, e, false, true)?
        } else {
            let w = g.param_by_name(&self.params, "lm_head.w")?;
            g.matmul(h, w)?
        };
        let b = g.param_by_name(&self.params, "lm_head.b")?;
        g.add_row(logits, b)
    }

    /// Teacher-forced forward pass. `targets[b]` are the tokens to predict;
    /// the decoder sees `BOS` followed by all but the last of them (or, for
    /// decoder-only models, the source, a separator, then the target prefix).
    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p>,
        sources: &[Vec<usize>],
        targets: &[Vec<usize>],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardTrace> {
        if sources.len() != targets.len() || sources.is_empty() {
            return Err(Error::InvalidArgument("sources and targets must be non-empty and equal in count".into()));
        }
        let target_len = targets.iter().map(Vec::len).max().unwrap_or(0);
        if target_len == 0 {
            return Err(Error::InvalidArgument("all targets are empty".into()));
        }
        for t in targets {
            self.check_tokens(t)?;
        }
        match self.config.arch {
            Arch::EncoderDecoder => self.forward_ed(g, sources, targets, target_len, train, rng),
            Arch::DecoderOnly => self.forward_do(g, sources, targets, target_len, train, rng),
        }
    }

    fn forward_ed<'p>(
        &'p self,
        g: &mut Graph<'p>,
        sources: &[Vec<usize>],
        targets: &[Vec<usize>],
        n: usize,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardTrace> {
        if n > self.config.max_len {
            return Err(Error::LengthOverflow { len: n, max: self.config.max_len });
        }
        let (memory, m, src_valid, enc_traces) = self.encode(g, sources, train, rng)?;
        let batch = sources.len();
        let heads = self.config.heads;
        let mut ids = Vec::with_capacity(batch * n);
        let mut gold = Vec::with_capacity(batch * n);
        let mut mask = Vec::with_capacity(batch * n);
        let mut valid = Vec::with_capacity(batch * n);
        for t in targets {
            for i in 0..n {
                ids.push(if i == 0 { BOS } else { t.get(i - 1).copied().unwrap_or(PAD) });
                gold.push(t.get(i).copied().unwrap_or(PAD));
                mask.push(if i < t.len() { 1.0 } else { 0.0 });
                valid.push(i < t.len());
            }
        }
        let self_mask = build_mask(batch, heads, n, n, &valid, true);
        let cross_mask = build_mask(batch, heads, n, m, &src_valid, false);
        let mut x = self.embed(g, &ids, n, train, rng)?;
        let mut traces = Vec::with_capacity(self.config.decoder_layers);
        for l in 0..self.config.decoder_layers {
            let h = self.layer_norm(g, x, &format!("decoder.{l}.ln1"))?;
            let a = self.attention(g, &format!("decoder.{l}.self"), h, h, batch, n, n, &self_mask, train, rng)?;
            x = g.add(x, a.out)?;
            let h = self.layer_norm(g, x, &format!("decoder.{l}.ln2"))?;
            let c = self.attention(g, &format!("decoder.{l}.cross"), h, memory, batch, n, m, &cross_mask, train, rng)?;
            x = g.add(x, c.out)?;
            let h = self.layer_norm(g, x, &format!("decoder.{l}.ln3"))?;
            let f = self.feed_forward(g, h, &format!("decoder.{l}.ff"), train, rng)?;
            x = g.add(x, f)?;
            traces.push(LayerTrace { q: a.q, k: a.k, v: a.v, hidden: x, batch, len: n, causal: true, valid: valid.clone() });
        }
        let h = self.layer_norm(g, x, "decoder.ln")?;
        let logits = self.project(g, h)?;
        Ok(ForwardTrace { logits, batch, target_len: n, targets: gold, mask, encoder: enc_traces, decoder: traces })
    }

    fn forward_do<'p>(
        &'p self,
        g: &mut Graph<'p>,
        sources: &[Vec<usize>],
        targets: &[Vec<usize>],
        n: usize,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardTrace> {
        let batch = sources.len();
        let heads = self.config.heads;
        let mut seqs = Vec::with_capacity(batch);
        for (s, t) in sources.iter().zip(targets) {
            if s.is_empty() {
                return Err(Error::InvalidArgument("empty source".into()));
            }
            self.check_tokens(s)?;
            let mut z = s.clone();
            z.push(SEP);
            z.extend_from_slice(&t[..t.len().saturating_sub(1)]);
            seqs.push(z);
        }
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if len > self.config.max_len {
            return Err(Error::LengthOverflow { len, max: self.config.max_len });
        }
        let mut ids = Vec::with_capacity(batch * len);
        let mut valid = Vec::with_capacity(batch * len);
        for z in &seqs {
            for i in 0..len {
                ids.push(z.get(i).copied().unwrap_or(PAD));
                valid.push(i < z.len());
            }
        }
        let self_mask = build_mask(batch, heads, len, len, &valid, true);
        let mut x = self.embed(g, &ids, len, train, rng)?;
        let mut traces = Vec::with_capacity(self.config.decoder_layers);
        for l in 0..self.config.decoder_layers {
            let h = self.layer_norm(g, x, &format!("decoder.{l}.ln1"))?;
            let a = self.attention(g, &format!("decoder.{l}.self"), h, h, batch, len, len, &self_mask, train, rng)?;
            x = g.add(x, a.out)?;
            let h = self.layer_norm(g, x, &format!("decoder.{l}.ln3"))?;
            let f = self.feed_forward(g, h, &format!("decoder.{l}.ff"), train, rng)?;
            x = g.add(x, f)?;
            traces.push(LayerTrace { q: a.q, k: a.k, v: a.v, hidden: x, batch, len, causal: true, valid: valid.clone() });
        }
        // Only positions from the separator onward predict target tokens.
        let mut rows = Vec::with_capacity(batch * n);
        let mut gold = Vec::with_capacity(batch * n);
        let mut mask = Vec::with_capacity(batch * n);
        for (b, (s, t)) in sources.iter().zip(targets).enumerate() {
            for i in 0..n {
                let pos = if i < t.len() { s.len() + i } else { s.len() };
                rows.push(b * len + pos);
                gold.push(t.get(i).copied().unwrap_or(PAD));
                mask.push(if i < t.len() { 1.0 } else { 0.0 });
            }
        }
        let h = g.select_rows(x, &rows)?;
        let h = self.layer_norm(g, h, "decoder.ln")?;
        let logits = self.project(g, h)?;
        Ok(ForwardTrace { logits, batch, target_len: n, targets: gold, mask, encoder: Vec::new(), decoder: traces })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationKind {
    QQ,
    KK,
    VV,
}

/// Log-probability relation rows `[batch * heads * len, len]` for one layer.
#[derive(Debug, Clone)]
pub struct Relations {
    pub log_probs: Var,
    pub batch: usize,
    pub heads: usize,
    pub len: usize,
    /// 1.0 for rows whose query position is a real token.
    pub row_weights: Vec<f64>,
}

impl Relations {
    pub fn rows(&self, g: &Graph<'_>) -> Vec<TokenDistribution> {
        g.value(self.log_probs)
            .chunks(self.len)
            .map(|r| TokenDistribution::from_logits(r))
            .collect()
    }
}

/// Scaled dot-product self-relations `softmax(S S^T / sqrt(d_r))` of a layer's
/// Q, K or V states, split into `relation_heads` heads of width `d / relation_heads`.
pub fn attention_relations(
    g: &mut Graph<'_>,
    trace: &ForwardTrace,
    part: Part,
    layer: usize,
    kind: RelationKind,
    relation_heads: usize,
) -> Result<Relations> {
    let layers = match part {
        Part::Encoder => &trace.encoder,
        Part::Decoder => &trace.decoder,
    };
    let lt = layers
        .get(layer)
        .ok_or_else(|| Error::InvalidArgument(format!("{part:?} layer {layer} not in trace ({} layers)", layers.len())))?;
    let states = match kind {
        RelationKind::QQ => lt.q,
        RelationKind::KK => lt.k,
        RelationKind::VV => lt.v,
    };
    let d = g.shape(states)[1];
    if relation_heads == 0 || d % relation_heads != 0 {
        return Err(Error::Shape(format!("width {d} cannot be split into {relation_heads} relation heads")));
    }
    let (batch, len) = (lt.batch, lt.len);
    let s = g.split_heads(states, batch, len, relation_heads)?;
    let scores = g.bmm(s, s, true)?;
    let scores = g.scale(scores, 1.0 / ((d / relation_heads) as f64).sqrt())?;
    let mask = build_mask(batch, relation_heads, len, len, &lt.valid, lt.causal);
    let scores = g.add_const(scores, &mask)?;
    let lp = g.log_softmax(scores)?;
    let log_probs = g.reshape(lp, vec![batch * relation_heads * len, len])?;
    let mut row_weights = Vec::with_capacity(batch * relation_heads * len);
    for b in 0..batch {
        for _ in 0..relation_heads {
            for i in 0..len {
                row_weights.push(if lt.valid[b * len + i] { 1.0 } else { 0.0 });
            }
        }
    }
    Ok(Relations { log_probs, batch, heads: relation_heads, len, row_weights })
}
