//! Toy tokenizers, Needleman-Wunsch token alignment and projection of a
//! foreign teacher's top-k log-probabilities onto the student vocabulary.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::tensor::{Graph, SupportRow, Var};
use crate::vocab::{Vocab, EOS};

/// Teacher entries kept per position.
pub const K_TOP: usize = 5;

pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<String>;

    fn detokenize(&self, tokens: &[String]) -> String {
        tokens.concat()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharTokenizer;

impl Tokenizer for CharTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect()
    }
}

/// Learned pair merges applied by greedy longest match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpeLite {
    pub merges: Vec<(String, String)>,
    /// Base characters followed by merged tokens in learning order.
    pub tokens: Vec<String>,
    #[serde(skip)]
    max_len: usize,
}

pub const BPE_MERGES: usize = 64;

impl BpeLite {
    /// Learns up to `merges` pair merges; ties go to the lexicographically smaller pair.
    pub fn train<S: AsRef<str>>(corpus: &[S], merges: usize) -> Self {
        let mut words: Vec<Vec<String>> = corpus.iter().map(|t| CharTokenizer.tokenize(t.as_ref())).collect();
        let mut base: Vec<String> = words.iter().flatten().cloned().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let mut learned = Vec::new();
        for _ in 0..merges {
            let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for w in &words {
                for p in w.windows(2) {
                    *counts.entry((&p[0], &p[1])).or_default() += 1;
                }
            }
            let Some((pair, n)) = counts.into_iter().fold(None, |best: Option<((&str, &str), usize)>, (p, n)| match best {
                Some((_, bn)) if bn >= n => best,
                _ => Some((p, n)),
            }) else {
                break;
            };
            if n < 2 {
                break;
            }
            let (a, b) = (pair.0.to_string(), pair.1.to_string());
            let merged = format!("{a}{b}");
            for w in &mut words {
                let mut out = Vec::with_capacity(w.len());
                let mut i = 0;
                while i < w.len() {
                    if i + 1 < w.len() && w[i] == a && w[i + 1] == b {
                        out.push(merged.clone());
                        i += 2;
                    } else {
                        out.push(std::mem::take(&mut w[i]));
                        i += 1;
                    }
                }
                *w = out;
            }
            learned.push((a, b));
        }
        let mut tokens = std::mem::take(&mut base);
        for (a, b) in &learned {
            let m = format!("{a}{b}");
            if !tokens.contains(&m) {
                tokens.push(m);
            }
        }
        Self::from_parts(learned, tokens)
    }

    pub fn from_parts(merges: Vec<(String, String)>, tokens: Vec<String>) -> Self {
        let max_len = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(1);
        Self { merges, tokens, max_len }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.tokens.iter().cloned())
    }
}

impl Tokenizer for BpeLite {
    fn tokenize(&self, text: &str) -> Vec<String> {
        let known: HashSet<&str> = self.tokens.iter().map(String::as_str).collect();
        let max_len = if self.max_len == 0 { self.tokens.iter().map(|t| t.chars().count()).max().unwrap_or(1) } else { self.max_len };
        let chars: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let mut taken = 1;
            for len in (2..=max_len.min(chars.len() - i)).rev() {
                let cand: String = chars[i..i + len].iter().collect();
                if known.contains(cand.as_str()) {
                    taken = len;
                    break;
                }
            }
            out.push(chars[i..i + taken].iter().collect());
            i += taken;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Match,
    Replace,
    Insert,
    Delete,
}

/// One edit operation. `Insert` adds a student token, `Delete` drops a teacher token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentOp {
    pub kind: OpKind,
    pub teacher_index: Option<usize>,
    pub student_index: Option<usize>,
    pub is_prefix_match: bool,
}

impl AlignmentOp {
    /// Exact matches and prefix replacements both count as aligned.
    pub fn is_aligned(&self) -> bool {
        self.kind == OpKind::Match || self.is_prefix_match
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NwScoring {
    pub exact: f64,
    pub prefix: f64,
    pub mismatch: f64,
    pub gap: f64,
}

impl Default for NwScoring {
    fn default() -> Self {
        Self { exact: 2.0, prefix: 1.0, mismatch: -1.0, gap: -1.0 }
    }
}

pub fn is_prefix_pair(a: &str, b: &str) -> bool {
    a != b && (a.starts_with(b) || b.starts_with(a))
}

impl NwScoring {
    pub fn pair(&self, a: &str, b: &str) -> f64 {
        if a == b {
            self.exact
        } else if is_prefix_pair(a, b) {
            self.prefix
        } else {
            self.mismatch
        }
    }
}

/// Total score of an op sequence.
pub fn alignment_score<T: AsRef<str>, S: AsRef<str>>(ops: &[AlignmentOp], teacher: &[T], student: &[S], scoring: &NwScoring) -> f64 {
    ops.iter()
        .map(|op| match (op.teacher_index, op.student_index) {
            (Some(i), Some(j)) => scoring.pair(teacher[i].as_ref(), student[j].as_ref()),
            _ => scoring.gap,
        })
        .sum()
}

/// Globally optimal alignment. The traceback runs from the end and prefers
/// diagonal (match or replace) over delete over insert.
pub fn nw_align<T: AsRef<str>, S: AsRef<str>>(teacher: &[T], student: &[S], scoring: &NwScoring) -> Vec<AlignmentOp> {
    let (n, m) = (teacher.len(), student.len());
    let w = m + 1;
    let mut dp = vec![0.0; (n + 1) * w];
    for i in 1..=n {
        dp[i * w] = i as f64 * scoring.gap;
    }
    for j in 1..=m {
        dp[j] = j as f64 * scoring.gap;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = dp[(i - 1) * w + j - 1] + scoring.pair(teacher[i - 1].as_ref(), student[j - 1].as_ref());
            let del = dp[(i - 1) * w + j] + scoring.gap;
            let ins = dp[i * w + j - 1] + scoring.gap;
            dp[i * w + j] = diag.max(del).max(ins);
        }
    }
    let mut ops = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let (t, s) = (teacher[i - 1].as_ref(), student[j - 1].as_ref());
            if dp[(i - 1) * w + j - 1] + scoring.pair(t, s) == here {
                let kind = if t == s { OpKind::Match } else { OpKind::Replace };
                ops.push(AlignmentOp {
                    kind,
                    teacher_index: Some(i - 1),
                    student_index: Some(j - 1),
                    is_prefix_match: is_prefix_pair(t, s),
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[(i - 1) * w + j] + scoring.gap == here {
            ops.push(AlignmentOp { kind: OpKind::Delete, teacher_index: Some(i - 1), student_index: None, is_prefix_match: false });
            i -= 1;
        } else {
            ops.push(AlignmentOp { kind: OpKind::Insert, teacher_index: None, student_index: Some(j - 1), is_prefix_match: false });
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Teacher distribution re-expressed over student ids at one student position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedDistribution {
    pub student_position: usize,
    pub entries: Vec<(usize, f64)>,
    pub fallback: bool,
}

impl ProjectedDistribution {
    pub fn fallback(position: usize, token: usize) -> Self {
        Self { student_position: position, entries: vec![(token, 1.0)], fallback: true }
    }
}

/// Projects per-teacher-position top-k `(token, logprob)` lists onto the student
/// tokens through an alignment. Aligned positions keep the teacher tokens that
/// exist verbatim in the student vocabulary, softmax-renormalized; inserted
/// positions, non-prefix replacements and positions whose realized token is not
/// among the kept entries get probability one on the realized token.
pub fn project_topk<S: AsRef<str>>(
    teacher_topk: &[Vec<(String, f64)>],
    alignment: &[AlignmentOp],
    student_vocab: &Vocab,
    student_tokens: &[S],
) -> Result<Vec<ProjectedDistribution>> {
    let ids: Vec<usize> = student_tokens
        .iter()
        .map(|t| {
            student_vocab
                .id(t.as_ref())
                .ok_or_else(|| Error::InvalidArgument(format!("student token `{}` not in student vocabulary", t.as_ref())))
        })
        .collect::<Result<_>>()?;
    let mut source: Vec<Option<usize>> = vec![None; ids.len()];
    let mut covered = vec![false; ids.len()];
    for op in alignment {
        if let Some(j) = op.student_index {
            if j >= ids.len() || covered[j] {
                return Err(Error::InvalidArgument(format!("alignment covers student position {j} twice or out of range")));
            }
            covered[j] = true;
            if op.is_aligned() {
                source[j] = op.teacher_index;
            }
        }
    }
    if let Some(j) = covered.iter().position(|c| !c) {
        return Err(Error::InvalidArgument(format!("alignment leaves student position {j} uncovered")));
    }
    let mut out = Vec::with_capacity(ids.len());
    for (j, &realized) in ids.iter().enumerate() {
        let Some(i) = source[j] else {
            out.push(ProjectedDistribution::fallback(j, realized));
            continue;
        };
        let row = teacher_topk
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("no teacher top-k for position {i}")))?;
        let mut kept: Vec<(usize, f64)> = Vec::new();
        for (tok, lp) in row.iter().take(K_TOP) {
            if let Some(id) = student_vocab.id(tok) {
                if !kept.iter().any(|&(k, _)| k == id) {
                    kept.push((id, *lp));
                }
            }
        }
        if !kept.iter().any(|&(k, _)| k == realized) {
            out.push(ProjectedDistribution::fallback(j, realized));
            continue;
        }
        let max = kept.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = kept.iter().map(|e| (e.1 - max).exp()).sum();
        let entries = kept.into_iter().map(|(id, lp)| (id, (lp - max).exp() / z)).collect();
        out.push(ProjectedDistribution { student_position: j, entries, fallback: false });
    }
    Ok(out)
}

/// Sum over positions of KL(projected || student restricted to the projected
/// support plus the realized token). Fallback rows are full-vocabulary NLL on
/// the realized token. `projected[b]` must cover every real target position of
/// example `b`; `targets` are the realized student ids in trace layout.
pub fn cross_tokenizer_logits_kd(g: &mut Graph<'_>, trace: &ForwardTrace, projected: &[Vec<ProjectedDistribution>]) -> Result<Var> {
    if projected.len() != trace.batch {
        return Err(Error::Shape(format!("{} projected rows for a batch of {}", projected.len(), trace.batch)));
    }
    let mut rows = Vec::new();
    for (b, proj) in projected.iter().enumerate() {
        let real = (0..trace.target_len).filter(|i| trace.mask[b * trace.target_len + i] > 0.0).count();
        if proj.len() != real {
            return Err(Error::Shape(format!("example {b}: {} projections for {real} target positions", proj.len())));
        }
        for (i, p) in proj.iter().enumerate() {
            let row = b * trace.target_len + i;
            let realized = trace.targets[row];
            if p.entries.is_empty() {
                return Err(Error::InvalidArgument(format!("empty support at example {b} position {i}")));
            }
            if p.fallback {
                rows.push(SupportRow { row, tokens: vec![realized], probs: vec![1.0], weight: 1.0, restrict: false });
                continue;
            }
            let (mut tokens, mut probs): (Vec<usize>, Vec<f64>) = p.entries.iter().copied().unzip();
            if !tokens.contains(&realized) {
                tokens.push(realized);
                probs.push(0.0);
            }
            rows.push(SupportRow { row, tokens, probs, weight: 1.0, restrict: true });
        }
    }
    g.restricted_kl(trace.logits, rows)
}

/// One line of a canned external-teacher export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalRecord {
    pub example_id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub topk: Vec<Vec<ExternalTopK>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalTopK {
    pub token: String,
    pub logprob: f64,
}

impl ExternalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::InvalidArgument(format!("external PT for `{}` has no tokens", self.example_id)));
        }
        if self.topk.len() != self.tokens.len() {
            return Err(Error::InvalidArgument(format!(
                "external PT for `{}`: {} top-k rows for {} tokens",
                self.example_id,
                self.topk.len(),
                self.tokens.len()
            )));
        }
        if self.topk.iter().any(|r| r.len() > K_TOP) {
            return Err(Error::InvalidArgument(format!("external PT for `{}` has more than {K_TOP} entries", self.example_id)));
        }
        Ok(())
    }

    pub fn topk_pairs(&self) -> Vec<Vec<(String, f64)>> {
        self.topk.iter().map(|r| r.iter().map(|e| (e.token.clone(), e.logprob)).collect()).collect()
    }

    /// Student ids (with EOS) and per-position projections for this PT.
    pub fn project<T: Tokenizer>(&self, student_tok: &T, student_vocab: &Vocab, scoring: &NwScoring) -> Result<(Vec<usize>, Vec<ProjectedDistribution>)> {
        let st = student_tok.tokenize(&self.text);
        let ops = nw_align(&self.tokens, &st, scoring);
        let mut proj = project_topk(&self.topk_pairs(), &ops, student_vocab, &st)?;
        let mut ids: Vec<usize> = proj.iter().map(|p| student_vocab.id(&st[p.student_position]).expect("checked by projection")).collect();
        ids.push(EOS);
        proj.push(ProjectedDistribution::fallback(st.len(), EOS));
        Ok((ids, proj))
    }
}

pub fn save_external(path: &Path, records: &[ExternalRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an external-teacher file; repeated example ids are successive PTs.
pub fn load_external(path: &Path) -> Result<Vec<ExternalRecord>> {
    let file = File::open(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let r: ExternalRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        r.validate().map_err(|e| parse(e.to_string()))?;
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    /// Best score over every alignment, by recursion over the three moves.
    fn brute(t: &[String], st: &[String], sc: &NwScoring) -> f64 {
        match (t.split_first(), st.split_first()) {
            (None, None) => 0.0,
            (Some(_), None) => t.len() as f64 * sc.gap,
            (None, Some(_)) => st.len() as f64 * sc.gap,
            (Some((a, tr)), Some((b, sr))) => {
                let diag = sc.pair(a, b) + brute(tr, sr, sc);
                let del = sc.gap + brute(tr, st, sc);
                let ins = sc.gap + brute(t, sr, sc);
                diag.max(del).max(ins)
            }
        }
    }

    #[test]
    fn robert_fixture() {
        let ops = nw_align(&s(&["Rob", "ert", "s"]), &s(&["Robert", "s"]), &NwScoring::default());
        let kinds: Vec<(OpKind, bool)> = ops.iter().map(|o| (o.kind, o.is_prefix_match)).collect();
        assert_eq!(kinds, vec![(OpKind::Replace, true), (OpKind::Delete, false), (OpKind::Match, false)]);
        assert!(ops[0].is_aligned());
        assert_eq!((ops[0].teacher_index, ops[0].student_index), (Some(0), Some(0)));
    }

    #[test]
    fn disjoint_pairs_prefer_replacement() {
        let t = s(&["a", "b"]);
        let st = s(&["x", "y"]);
        let ops = nw_align(&t, &st, &NwScoring::default());
        assert!(ops.iter().all(|o| o.kind == OpKind::Replace && !o.is_prefix_match));
        assert_eq!(alignment_score(&ops, &t, &st, &NwScoring::default()), -2.0);
    }

    proptest! {
        #[test]
        fn nw_is_optimal_and_well_formed(
            t in prop::collection::vec(prop::sample::select(vec!["a", "ab", "b", "ba", "c"]), 1..=6),
            st in prop::collection::vec(prop::sample::select(vec!["a", "ab", "b", "abc", "c"]), 1..=6),
        ) {
            let t: Vec<String> = t.into_iter().map(String::from).collect();
            let st: Vec<String> = st.into_iter().map(String::from).collect();
            let sc = NwScoring::default();
            let ops = nw_align(&t, &st, &sc);
            prop_assert_eq!(alignment_score(&ops, &t, &st, &sc), brute(&t, &st, &sc));
            let ti: Vec<usize> = ops.iter().filter_map(|o| o.teacher_index).collect();
            let si: Vec<usize> = ops.iter().filter_map(|o| o.student_index).collect();
            prop_assert_eq!(ti, (0..t.len()).collect::<Vec<_>>());
            prop_assert_eq!(si, (0..st.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn projection_cases() {
        let vocab = Vocab::new(["Robert", "s", "2010", "a", "b"]);
        let topk = vec![
            vec![("Robert".to_string(), -0.1), ("Roberts".to_string(), -2.0), ("a".to_string(), -2.0), ("b".to_string(), -3.0)],
            vec![("ert".to_string(), -0.01)],
            vec![("2011".to_string(), -0.2)],
        ];
        let teacher = s(&["Rob", "ert", "2010"]);
        let student = s(&["Robert", "s", "2010"]);
        let ops = nw_align(&teacher, &student, &NwScoring::default());
        let p = project_topk(&topk, &ops, &vocab, &student).unwrap();
        assert_eq!(p.len(), 3);
        // Three of four teacher tokens exist in the student vocabulary.
        let z = (-0.1f64).exp() + (-2.0f64).exp() + (-3.0f64).exp();
        let want = [(-0.1f64).exp() / z, (-2.0f64).exp() / z, (-3.0f64).exp() / z];
        assert!(!p[0].fallback);
        for ((_, got), w) in p[0].entries.iter().zip(want) {
            assert!((got - w).abs() < 1e-12);
        }
        for row in &p {
            let sum: f64 = row.entries.iter().map(|e| e.1).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        assert_eq!(p[1], ProjectedDistribution::fallback(1, vocab.id("s").unwrap()));
        assert_eq!(p[2].entries, vec![(vocab.id("2010").unwrap(), 1.0)]);
        assert!(project_topk(&topk, &ops, &vocab, &s(&["zzz", "s", "2010"])).is_err());
    }

    #[test]
    fn bpe_merges_and_roundtrips() {
        let corpus = ["abcabc", "abab", "cab"];
        let bpe = BpeLite::train(&corpus, 64);
        assert_eq!(bpe.merges[0], ("a".to_string(), "b".to_string()));
        for text in corpus {
            let toks = bpe.tokenize(text);
            assert_eq!(bpe.detokenize(&toks), text);
            assert!(toks.len() < text.len());
        }
        let back: BpeLite = serde_json::from_str(&serde_json::to_string(&bpe).unwrap()).unwrap();
        assert_eq!(back.tokenize("abcab"), bpe.tokenize("abcab"));
        assert_eq!(CharTokenizer.tokenize("a bc"), s(&["a", "b", "c"]));
    }

    #[test]
    fn external_file_roundtrip_and_errors() {
        let r = ExternalRecord {
            example_id: "u1".into(),
            text: "ab".into(),
            tokens: s(&["a", "b"]),
            topk: vec![vec![ExternalTopK { token: "a".into(), logprob: -0.3 }], vec![ExternalTopK { token: "b".into(), logprob: -1e-3 }]],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ext.jsonl");
        save_external(&p, &[r.clone(), r.clone()]).unwrap();
        assert_eq!(load_external(&p).unwrap(), vec![r.clone(), r.clone()]);
        let bad = ExternalRecord { topk: vec![], ..r };
        save_external(&p, &[bad]).unwrap();
        assert!(matches!(load_external(&p), Err(Error::Parse { line: 1, .. })));
    }

    fn tiny() -> crate::model::Seq2SeqModel {
        let mut cfg = crate::model::ModelConfig::encoder_decoder((1, 1), 8, 2, 10, 12);
        cfg.dropout = 0.0;
        crate::model::Seq2SeqModel::new(cfg, 3).unwrap()
    }

    fn trace_rows(m: &crate::model::Seq2SeqModel, src: &[Vec<usize>], tgt: &[Vec<usize>]) -> (Vec<Vec<Vec<f64>>>, usize) {
        use rand::SeedableRng;
        let mut g = Graph::no_grad();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let tr = m.forward(&mut g, src, tgt, false, &mut rng).unwrap();
        let rows = (0..tr.batch).map(|b| tr.example_logits(&g, b).into_iter().map(<[f64]>::to_vec).collect()).collect();
        (rows, tr.vocab_size(&g))
    }

    fn kd(m: &crate::model::Seq2SeqModel, src: &[Vec<usize>], tgt: &[Vec<usize>], proj: &[Vec<ProjectedDistribution>]) -> f64 {
        use rand::SeedableRng;
        let mut g = Graph::no_grad();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let tr = m.forward(&mut g, src, tgt, false, &mut rng).unwrap();
        let l = cross_tokenizer_logits_kd(&mut g, &tr, proj).unwrap();
        g.scalar_value(l)
    }

    fn log_softmax_over(row: &[f64], support: &[usize]) -> Vec<f64> {
        let mx = support.iter().map(|&t| row[t]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = support.iter().map(|&t| (row[t] - mx).exp()).sum();
        support.iter().map(|&t| row[t] - mx - z.ln()).collect()
    }

    #[test]
    fn cross_tokenizer_kd_oracles() {
        let m = tiny();
        let src = vec![vec![5, 6, 7], vec![8]];
        let tgt = vec![vec![6, 7, 2], vec![9, 2]];
        let (rows, v) = trace_rows(&m, &src, &tgt);

        // Every row a fallback: plain NLL of the realized tokens.
        let fb: Vec<Vec<ProjectedDistribution>> =
            tgt.iter().map(|t| t.iter().enumerate().map(|(i, &x)| ProjectedDistribution::fallback(i, x)).collect()).collect();
        let all: Vec<usize> = (0..v).collect();
        let nll: f64 = tgt.iter().zip(&rows).flat_map(|(t, r)| t.iter().zip(r).map(|(&x, row)| -log_softmax_over(row, &all)[x])).sum();
        assert!((kd(&m, &src, &tgt, &fb) - nll).abs() < 1e-9);

        // Projections equal to the student's own restricted distribution: zero.
        let exact: Vec<Vec<ProjectedDistribution>> = tgt
            .iter()
            .zip(&rows)
            .map(|(t, r)| {
                t.iter()
                    .zip(r)
                    .enumerate()
                    .map(|(i, (&x, row))| {
                        let support = vec![x, 5, 7];
                        let lp = log_softmax_over(row, &support);
                        let entries = support.iter().zip(lp).map(|(&k, l)| (k, l.exp())).collect();
                        ProjectedDistribution { student_position: i, entries, fallback: false }
                    })
                    .collect()
            })
            .collect();
        assert!(kd(&m, &src, &tgt, &exact).abs() < 1e-9);

        // Arbitrary support without the realized token, against a double loop.
        let mixed: Vec<Vec<ProjectedDistribution>> = tgt
            .iter()
            .map(|t| {
                (0..t.len())
                    .map(|i| {
                        if i == 1 {
                            ProjectedDistribution::fallback(i, t[i])
                        } else {
                            ProjectedDistribution { student_position: i, entries: vec![(3, 0.7), (8, 0.3)], fallback: false }
                        }
                    })
                    .collect()
            })
            .collect();
        let mut want = 0.0;
        for ((t, r), proj) in tgt.iter().zip(&rows).zip(&mixed) {
            for ((&x, row), p) in t.iter().zip(r).zip(proj) {
                if p.fallback {
                    want -= log_softmax_over(row, &all)[x];
                    continue;
                }
                let mut support: Vec<usize> = p.entries.iter().map(|e| e.0).collect();
                if !support.contains(&x) {
                    support.push(x);
                }
                let lq = log_softmax_over(row, &support);
                for (k, &(_, pr)) in p.entries.iter().enumerate() {
                    want += pr * (pr.ln() - lq[k]);
                }
            }
        }
        assert!((kd(&m, &src, &tgt, &mixed) - want).abs() < 1e-9);
    }
}
