//! BLEU, ROUGE-1/2/L, perplexity and gap closure.
//!
//! BLEU is corpus-level with up to 4-grams and a brevity penalty. Unigram
//! precision is never smoothed; a higher order with no matches uses
//! `1 / (candidates + 1)` instead of 0. ROUGE values are per-pair F1 scores
//! averaged over the corpus.

use std::collections::HashMap;
use std::hash::Hash;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ParallelExample;
use crate::decoding::{beam_search, greedy, DecodeConfig, DecodeMethod};
use crate::error::{Error, Result};
use crate::model::infer::IncrementalDecoder;
use crate::model::Seq2SeqModel;
use crate::tensor::Graph;
use crate::vocab::EOS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherIsBetter,
    LowerIsBetter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Bleu,
    Rouge1,
    Rouge2,
    RougeL,
    RougeAvg,
    Ppl,
}

impl MetricName {
    pub const ALL: [MetricName; 6] =
        [MetricName::Bleu, MetricName::Rouge1, MetricName::Rouge2, MetricName::RougeL, MetricName::RougeAvg, MetricName::Ppl];

    pub fn direction(self) -> Direction {
        match self {
            MetricName::Ppl => Direction::LowerIsBetter,
            _ => Direction::HigherIsBetter,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Bleu => "bleu",
            MetricName::Rouge1 => "rouge1",
            MetricName::Rouge2 => "rouge2",
            MetricName::RougeL => "rougeL",
            MetricName::RougeAvg => "rouge_avg",
            MetricName::Ppl => "ppl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }

    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self.direction() {
            Direction::HigherIsBetter => a > b,
            Direction::LowerIsBetter => a < b,
        }
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: f64,
    pub rouge1_f1: f64,
    pub rouge2_f1: f64,
    pub rougeL_f1: f64,
    pub rouge_avg: f64,
    pub ppl: f64,
}

impl MetricReport {
    pub fn get(&self, m: MetricName) -> f64 {
        match m {
            MetricName::Bleu => self.bleu,
            MetricName::Rouge1 => self.rouge1_f1,
            MetricName::Rouge2 => self.rouge2_f1,
            MetricName::RougeL => self.rougeL_f1,
            MetricName::RougeAvg => self.rouge_avg,
            MetricName::Ppl => self.ppl,
        }
    }
}

fn ngrams<T: Hash + Eq + Clone>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn overlap<T: Hash + Eq + Clone>(h: &HashMap<&[T], usize>, r: &HashMap<&[T], usize>) -> usize {
    h.iter().map(|(g, c)| (*c).min(*r.get(g).unwrap_or(&0))).sum()
}

/// Corpus BLEU in [0, 1].
pub fn bleu<T: Hash + Eq + Clone>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "BLEU needs equal, non-zero counts ({} hypotheses, {} references)",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hypotheses.iter().zip(references) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hg = ngrams(h, n);
            matches[n - 1] += overlap(&hg, &ngrams(rf, n));
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if c == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        let p = if n == 0 || matches[n] > 0 {
            matches[n] as f64 / totals[n] as f64
        } else {
            1.0 / (totals[n] as f64 + 1.0)
        };
        log_p += p.ln() / 4.0;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * log_p.exp())
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1_f1: f64,
    pub rouge2_f1: f64,
    pub rougeL_f1: f64,
}

fn f1(overlap: usize, hyp: usize, rf: usize) -> f64 {
    if overlap == 0 || hyp == 0 || rf == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp as f64;
    let r = overlap as f64 / rf as f64;
    2.0 * p * r / (p + r)
}

fn lcs<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub fn rouge<T: Hash + Eq + Clone>(hypothesis: &[T], reference: &[T]) -> RougeScores {
    let n_f1 = |n: usize| {
        let h = ngrams(hypothesis, n);
        let r = ngrams(reference, n);
        f1(overlap(&h, &r), hypothesis.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
    };
    RougeScores {
        rouge1_f1: n_f1(1),
        rouge2_f1: n_f1(2),
        rougeL_f1: f1(lcs(hypothesis, reference), hypothesis.len(), reference.len()),
    }
}

/// Per-pair ROUGE F1s averaged over the corpus.
pub fn corpus_rouge<T: Hash + Eq + Clone>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<RougeScores> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        return Err(Error::InvalidArgument("ROUGE needs equal, non-zero counts".into()));
    }
    let n = hypotheses.len() as f64;
    let mut acc = RougeScores { rouge1_f1: 0.0, rouge2_f1: 0.0, rougeL_f1: 0.0 };
    for (h, r) in hypotheses.iter().zip(references) {
        let s = rouge(h, r);
        acc.rouge1_f1 += s.rouge1_f1 / n;
        acc.rouge2_f1 += s.rouge2_f1 / n;
        acc.rougeL_f1 += s.rougeL_f1 / n;
    }
    Ok(acc)
}

/// `(KD - S) / (T - S)`, negating all three first for lower-is-better metrics.
pub fn gap_closure(s: f64, t: f64, kd: f64, direction: Direction) -> Result<f64> {
    let (s, t, kd) = match direction {
        Direction::HigherIsBetter => (s, t, kd),
        Direction::LowerIsBetter => (-s, -t, -kd),
    };
    if t == s {
        return Err(Error::UndefinedGap(t));
    }
    Ok((kd - s) / (t - s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub metric: MetricName,
    pub student: f64,
    pub teacher: f64,
    pub distilled: f64,
    /// `None` when teacher and student tie.
    pub closed_fraction: Option<f64>,
}

impl GapReport {
    pub fn new(metric: MetricName, student: f64, teacher: f64, distilled: f64) -> Self {
        let closed_fraction = gap_closure(student, teacher, distilled, metric.direction()).ok();
        Self { metric, student, teacher, distilled, closed_fraction }
    }

    pub fn all(student: &MetricReport, teacher: &MetricReport, distilled: &MetricReport) -> Vec<Self> {
        MetricName::ALL
            .into_iter()
            .map(|m| Self::new(m, student.get(m), teacher.get(m), distilled.get(m)))
            .collect()
    }
}

/// Total NLL and token count of the labeled targets (EOS included).
pub fn total_nll(model: &Seq2SeqModel, examples: &[ParallelExample], batch_size: usize) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        let mut sources = Vec::with_capacity(chunk.len());
        let mut targets = Vec::with_capacity(chunk.len());
        for ex in chunk {
            let t = ex
                .target
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("perplexity needs labels; `{}` is unlabeled", ex.id)))?;
            sources.push(ex.source.clone());
            targets.push(t.clone());
            tokens += t.len();
        }
        let mut g = Graph::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tr = model.forward(&mut g, &sources, &targets, false, &mut rng)?;
        let l = g.cross_entropy(tr.logits, &tr.targets, &tr.mask)?;
        total += g.scalar_value(l);
    }
    Ok((total, tokens))
}

/// `exp(total NLL / target tokens)` over labeled examples.
pub fn perplexity(model: &Seq2SeqModel, examples: &[ParallelExample], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("perplexity over an empty dataset".into()));
    }
    let (nll, tokens) = total_nll(model, examples, batch_size)?;
    Ok((nll / tokens as f64).exp())
}

/// Drops everything from the first EOS on.
pub fn strip_eos(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().take_while(|&&t| t != EOS).copied().collect()
}

/// One output per source: greedy for `Greedy`, the top beam otherwise.
pub fn predict(model: &Seq2SeqModel, sources: &[Vec<usize>], cfg: &DecodeConfig, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    let dec = IncrementalDecoder::new(model);
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(batch_size.max(1)) {
        match cfg.method {
            DecodeMethod::Greedy | DecodeMethod::Sample => out.extend(greedy(&dec, chunk, cfg.max_len)?),
            DecodeMethod::Beam => {
                out.extend(beam_search(&dec, chunk, cfg.beam_k, cfg.max_len)?.into_iter().map(|mut b| b.remove(0).tokens))
            }
        }
    }
    Ok(out)
}

/// Scores already generated outputs against references (EOS is stripped from both).
pub fn score_outputs(outputs: &[Vec<usize>], references: &[Vec<usize>], ppl: f64) -> Result<MetricReport> {
    let hyps: Vec<Vec<usize>> = outputs.iter().map(|o| strip_eos(o)).collect();
    let refs: Vec<Vec<usize>> = references.iter().map(|r| strip_eos(r)).collect();
    let b = bleu(&hyps, &refs)?;
    let r = corpus_rouge(&hyps, &refs)?;
    Ok(MetricReport {
        bleu: b,
        rouge1_f1: r.rouge1_f1,
        rouge2_f1: r.rouge2_f1,
        rougeL_f1: r.rougeL_f1,
        rouge_avg: (r.rouge1_f1 + r.rouge2_f1 + r.rougeL_f1) / 3.0,
        ppl,
    })
}

/// Generates for labeled examples and reports every metric.
pub fn evaluate(model: &Seq2SeqModel, examples: &[ParallelExample], cfg: &DecodeConfig, batch_size: usize) -> Result<MetricReport> {
    let sources: Vec<Vec<usize>> = examples.iter().map(|e| e.source.clone()).collect();
    let refs: Vec<Vec<usize>> = examples
        .iter()
        .map(|e| e.target.clone().ok_or_else(|| Error::InvalidArgument(format!("`{}` is unlabeled", e.id))))
        .collect::<Result<_>>()?;
    let outputs = predict(model, &sources, cfg, batch_size)?;
    let ppl = perplexity(model, examples, batch_size)?;
    score_outputs(&outputs, &refs, ppl)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_edge_cases() {
        let h = vec![toks("a b c d e"), toks("x y")];
        assert!((bleu(&h, &h).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bleu(&[toks("a b c d")], &[toks("e f g h")]).unwrap(), 0.0);
        assert!(bleu::<&str>(&[], &[]).is_err());
    }

    #[test]
    fn rouge_hand_counts() {
        let s = rouge(&toks("a b c"), &toks("a b d"));
        assert!((s.rouge1_f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.rougeL_f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.rouge2_f1 - 0.5).abs() < 1e-12);
        let same = rouge(&toks("a b"), &toks("a b"));
        assert_eq!((same.rouge1_f1, same.rouge2_f1, same.rougeL_f1), (1.0, 1.0, 1.0));
        let empty = rouge::<&str>(&[], &toks("a b"));
        assert_eq!((empty.rouge1_f1, empty.rouge2_f1, empty.rougeL_f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn gap_closure_arithmetic() {
        let hi = Direction::HigherIsBetter;
        assert_eq!(gap_closure(30.0, 40.0, 37.5, hi).unwrap(), 0.75);
        assert_eq!(gap_closure(30.0, 40.0, 40.0, hi).unwrap(), 1.0);
        assert_eq!(gap_closure(30.0, 40.0, 30.0, hi).unwrap(), 0.0);
        assert!(gap_closure(3.0, 3.0, 1.0, hi).is_err());
        // Lower perplexity is better: student 10, teacher 4, distilled 7 closes half.
        assert_eq!(gap_closure(10.0, 4.0, 7.0, Direction::LowerIsBetter).unwrap(), 0.5);
        assert!(GapReport::new(MetricName::Bleu, 1.0, 1.0, 1.0).closed_fraction.is_none());
    }

    #[test]
    fn registry_knows_directions() {
        assert_eq!(MetricName::parse("PPL").unwrap().direction(), Direction::LowerIsBetter);
        assert!(MetricName::Ppl.better(2.0, 3.0));
        assert!(MetricName::Bleu.better(0.3, 0.2));
        assert!(MetricName::parse("meteor").is_err());
    }
}
