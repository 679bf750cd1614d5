//! Pseudo-target (PT) generation, caching and per-epoch rotation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::data::ParallelExample;
use crate::decoding::{beam_search, example_seed, nucleus_sample, sample_many, DecodeConfig, DecodeMethod, HIGH_TEMPERATURE};
use crate::error::{Error, Result};
use crate::model::infer::IncrementalDecoder;
use crate::model::Seq2SeqModel;
use crate::tensor::{kernels, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Teacher,
    Student,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PtMethod {
    Beam,
    Sample,
    HSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopKEntry {
    pub t: usize,
    pub lp: f64,
}

/// One cache line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoTarget {
    pub example_id: String,
    pub origin: Origin,
    pub method: PtMethod,
    pub index: usize,
    pub tokens: Vec<usize>,
    pub topk: Option<Vec<Vec<TopKEntry>>>,
}

impl PseudoTarget {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::InvalidArgument(format!("PT {} of `{}` has no tokens", self.index, self.example_id)));
        }
        if let Some(rows) = &self.topk {
            for row in rows {
                let mass: f64 = row.iter().map(|e| e.lp.exp()).sum();
                if mass > 1.0 + 1e-9 {
                    return Err(Error::InvalidArgument(format!(
                        "PT {} of `{}` has top-k mass {mass}",
                        self.index, self.example_id
                    )));
                }
            }
        }
        Ok(())
    }
}

type Key = (String, Origin, PtMethod);

/// PTs keyed by (example id, origin, method), each set ordered by index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PtCache {
    sets: BTreeMap<Key, Vec<PseudoTarget>>,
}

impl PtCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces the set stored under the PTs' shared key.
    pub fn insert_set(&mut self, mut pts: Vec<PseudoTarget>) -> Result<()> {
        let Some(first) = pts.first() else { return Ok(()) };
        let key = (first.example_id.clone(), first.origin, first.method);
        if pts.iter().any(|p| (p.example_id.as_str(), p.origin, p.method) != (key.0.as_str(), key.1, key.2)) {
            return Err(Error::InvalidArgument("a PT set must share example id, origin and method".into()));
        }
        for p in &pts {
            p.validate()?;
        }
        pts.sort_by_key(|p| p.index);
        self.sets.insert(key, pts);
        Ok(())
    }

    /// Overwrites only the keys present in `other`.
    pub fn merge(&mut self, other: PtCache) {
        self.sets.extend(other.sets);
    }

    pub fn get(&self, example_id: &str, origin: Origin, method: PtMethod) -> Option<&[PseudoTarget]> {
        self.sets.get(&(example_id.to_string(), origin, method)).map(Vec::as_slice)
    }

    /// All PTs of one example across origins and methods.
    pub fn for_example(&self, example_id: &str) -> Vec<&PseudoTarget> {
        self.sets.iter().filter(|((id, _, _), _)| id == example_id).flat_map(|(_, v)| v.iter()).collect()
    }

    pub fn contains(&self, example_id: &str) -> bool {
        self.sets.keys().any(|(id, _, _)| id == example_id)
    }

    pub fn len(&self) -> usize {
        self.sets.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PseudoTarget> {
        self.sets.values().flatten()
    }

    /// Round-robin PT: index `epoch mod K` of the example's only PT set.
    pub fn pt_for_epoch(&self, example_id: &str, epoch: usize) -> Result<&PseudoTarget> {
        let mut sets = self.sets.range((example_id.to_string(), Origin::Teacher, PtMethod::Beam)..).take_while(|((id, _, _), _)| id == example_id);
        let (_, set) = sets.next().ok_or_else(|| Error::UnknownExample(example_id.to_string()))?;
        if sets.next().is_some() {
            return Err(Error::InvalidArgument(format!(
                "`{example_id}` has several PT sets; use pt_for_epoch_of"
            )));
        }
        Ok(&set[epoch % set.len()])
    }

    pub fn pt_for_epoch_of(&self, example_id: &str, origin: Origin, method: PtMethod, epoch: usize) -> Result<&PseudoTarget> {
        let set = self.get(example_id, origin, method).ok_or_else(|| Error::UnknownExample(example_id.to_string()))?;
        Ok(&set[epoch % set.len()])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for pt in self.iter() {
            serde_json::to_writer(&mut w, pt)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
        let mut grouped: BTreeMap<Key, Vec<PseudoTarget>> = BTreeMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let pt: PseudoTarget = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            pt.validate().map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })?;
            grouped.entry((pt.example_id.clone(), pt.origin, pt.method)).or_default().push(pt);
        }
        let mut cache = Self::new();
        for (_, set) in grouped {
            cache.insert_set(set)?;
        }
        Ok(cache)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PtGenConfig {
    pub method: PtMethod,
    pub decode: DecodeConfig,
    /// Keep only the best `keep` beams (e.g. 1 for a single mode-approximation PT).
    pub keep: Option<usize>,
    /// Store the teacher's top-k log-probabilities per position (0 disables).
    pub topk: usize,
    pub batch_size: usize,
    pub threads: usize,
}

impl Default for PtGenConfig {
    fn default() -> Self {
        Self { method: PtMethod::Beam, decode: DecodeConfig::default(), keep: None, topk: 0, batch_size: 16, threads: 1 }
    }
}

impl PtGenConfig {
    pub fn decode_config(&self) -> DecodeConfig {
        let mut d = self.decode.clone();
        match self.method {
            PtMethod::Beam => d.method = DecodeMethod::Beam,
            PtMethod::Sample => d.method = DecodeMethod::Sample,
            PtMethod::HSample => {
                d.method = DecodeMethod::Sample;
                if d.temperature == 1.0 {
                    d.temperature = HIGH_TEMPERATURE;
                }
            }
        }
        d
    }
}

/// Top-k log-probabilities of the model at every position of `tokens`.
pub fn topk_logprobs(model: &Seq2SeqModel, source: &[usize], tokens: &[usize], k: usize) -> Result<Vec<Vec<TopKEntry>>> {
    let mut g = Graph::no_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tr = model.forward(&mut g, &[source.to_vec()], &[tokens.to_vec()], false, &mut rng)?;
    let v = tr.vocab_size(&g);
    Ok(g.value(tr.logits)
        .chunks(v)
        .take(tokens.len())
        .map(|row| {
            let mut lp = row.to_vec();
            kernels::log_softmax_row(&mut lp);
            let mut idx: Vec<usize> = (0..v).collect();
            idx.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
            idx.into_iter().take(k).map(|t| TopKEntry { t, lp: lp[t] }).collect()
        })
        .collect())
}

fn generate_chunk(
    teacher: &Seq2SeqModel,
    examples: &[ParallelExample],
    cfg: &PtGenConfig,
    origin: Origin,
) -> Result<Vec<Vec<PseudoTarget>>> {
    let dc = cfg.decode_config();
    dc.validate()?;
    let dec = IncrementalDecoder::new(teacher);
    let mut out = Vec::with_capacity(examples.len());
    for batch in examples.chunks(cfg.batch_size.max(1)) {
        let seqs: Vec<Vec<Vec<usize>>> = match cfg.method {
            PtMethod::Beam => {
                let sources: Vec<Vec<usize>> = batch.iter().map(|e| e.source.clone()).collect();
                beam_search(&dec, &sources, dc.beam_k, dc.max_len)?
                    .into_iter()
                    .map(|hyps| {
                        let keep = cfg.keep.unwrap_or(hyps.len());
                        hyps.into_iter().take(keep).map(|h| h.tokens).collect()
                    })
                    .collect()
            }
            PtMethod::Sample | PtMethod::HSample => batch
                .iter()
                .map(|e| sample_many(&dec, &e.source, dc.num_samples, example_seed(dc.seed, &e.id), &dc))
                .collect::<Result<_>>()?,
        };
        for (ex, set) in batch.iter().zip(seqs) {
            let pts = set
                .into_iter()
                .enumerate()
                .map(|(index, tokens)| {
                    let topk = if cfg.topk > 0 { Some(topk_logprobs(teacher, &ex.source, &tokens, cfg.topk)?) } else { None };
                    Ok(PseudoTarget { example_id: ex.id.clone(), origin, method: cfg.method, index, tokens, topk })
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(pts);
        }
    }
    Ok(out)
}

/// Generates PTs for every example (labeled or not) with the frozen teacher.
/// Work is split across `cfg.threads` workers; results keep example order.
pub fn generate_teacher_pts(teacher: &Seq2SeqModel, examples: &[ParallelExample], cfg: &PtGenConfig) -> Result<PtCache> {
    generate_pts(teacher, examples, cfg, Origin::Teacher)
}

pub fn generate_pts(model: &Seq2SeqModel, examples: &[ParallelExample], cfg: &PtGenConfig, origin: Origin) -> Result<PtCache> {
    let threads = cfg.threads.max(1).min(examples.len().max(1));
    let frozen = model.frozen();
    let per = examples.len().div_ceil(threads).max(1);
    let sets: Vec<Vec<PseudoTarget>> = if threads == 1 {
        generate_chunk(&frozen, examples, cfg, origin)?
    } else {
        let results: Vec<Result<Vec<Vec<PseudoTarget>>>> = std::thread::scope(|s| {
            let handles: Vec<_> = examples
                .chunks(per)
                .map(|chunk| {
                    let m = &frozen;
                    s.spawn(move || generate_chunk(m, chunk, cfg, origin))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("PT worker panicked")).collect()
        });
        let mut all = Vec::with_capacity(examples.len());
        for r in results {
            all.extend(r?);
        }
        all
    };
    let mut cache = PtCache::new();
    for set in sets {
        cache.insert_set(set)?;
    }
    for ex in examples {
        if !cache.contains(&ex.id) {
            return Err(Error::MissingArtifact(format!("no PT generated for `{}`", ex.id)));
        }
    }
    Ok(cache)
}

/// Samples one fresh PT per example from the current student. `step` salts the
/// seed so consecutive training steps draw different PTs.
pub fn generate_student_pts(
    student: &Seq2SeqModel,
    examples: &[ParallelExample],
    cfg: &DecodeConfig,
    step: u64,
) -> Result<Vec<PseudoTarget>> {
    let mut dc = cfg.clone();
    dc.method = DecodeMethod::Sample;
    let dec = IncrementalDecoder::new(student);
    let sources: Vec<Vec<usize>> = examples.iter().map(|e| e.source.clone()).collect();
    let salt = step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let seeds: Vec<u64> = examples.iter().map(|e| example_seed(dc.seed ^ salt, &e.id)).collect();
    let seqs = nucleus_sample(&dec, &sources, &seeds, &dc)?;
    Ok(examples
        .iter()
        .zip(seqs)
        .map(|(e, tokens)| PseudoTarget {
            example_id: e.id.clone(),
            origin: Origin::Student,
            method: PtMethod::Sample,
            index: 0,
            tokens,
            topk: None,
        })
        .collect())
}

pub fn generate_student_pt(student: &Seq2SeqModel, example: &ParallelExample, cfg: &DecodeConfig, step: u64) -> Result<PseudoTarget> {
    Ok(generate_student_pts(student, std::slice::from_ref(example), cfg, step)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn teacher() -> Seq2SeqModel {
        let mut cfg = ModelConfig::encoder_decoder((1, 1), 8, 2, 12, 16);
        cfg.dropout = 0.0;
        Seq2SeqModel::new(cfg, 7).unwrap()
    }

    fn examples() -> Vec<ParallelExample> {
        vec![
            ParallelExample { id: "a".into(), source: vec![5, 6, 7], target: Some(vec![7, 6, 2]) },
            ParallelExample { id: "b".into(), source: vec![8, 9], target: None },
            ParallelExample { id: "c".into(), source: vec![10], target: None },
        ]
    }

    fn pt(id: &str, index: usize) -> PseudoTarget {
        PseudoTarget { example_id: id.into(), origin: Origin::Teacher, method: PtMethod::Beam, index, tokens: vec![5 + index], topk: None }
    }

    #[test]
    fn beam_and_sample_counts() {
        let t = teacher();
        let ex = examples();
        let beam = PtGenConfig { decode: DecodeConfig { beam_k: 4, max_len: 5, ..DecodeConfig::default() }, ..Default::default() };
        let cache = generate_teacher_pts(&t, &ex, &beam).unwrap();
        for e in &ex {
            assert_eq!(cache.get(&e.id, Origin::Teacher, PtMethod::Beam).unwrap().len(), 4);
        }
        let samp = PtGenConfig {
            method: PtMethod::Sample,
            decode: DecodeConfig { num_samples: 6, max_len: 5, ..DecodeConfig::default() },
            threads: 2,
            ..Default::default()
        };
        let cache = generate_teacher_pts(&t, &ex[1..], &samp).unwrap();
        assert_eq!(cache.len(), 12);
        let serial = generate_teacher_pts(&t, &ex[1..], &PtGenConfig { threads: 1, ..samp.clone() }).unwrap();
        assert_eq!(cache, serial);
    }

    #[test]
    fn rotation_is_round_robin() {
        let mut c = PtCache::new();
        c.insert_set((0..4).map(|i| pt("x", i)).collect()).unwrap();
        c.insert_set(vec![pt("y", 0)]).unwrap();
        let idx: Vec<usize> = (0..8).map(|e| c.pt_for_epoch("x", e).unwrap().index).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(c.pt_for_epoch("y", 5).unwrap().index, 0);
        assert!(matches!(c.pt_for_epoch("z", 0), Err(Error::UnknownExample(_))));
    }

    #[test]
    fn cache_roundtrip_is_bit_exact() {
        let t = teacher();
        let cfg = PtGenConfig {
            decode: DecodeConfig { beam_k: 3, max_len: 4, ..DecodeConfig::default() },
            topk: 5,
            ..Default::default()
        };
        let cache = generate_teacher_pts(&t, &examples(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pts.jsonl");
        cache.save(&p).unwrap();
        let back = PtCache::load(&p).unwrap();
        assert_eq!(back, cache);
        for (a, b) in cache.iter().zip(back.iter()) {
            for (ra, rb) in a.topk.as_ref().unwrap().iter().zip(b.topk.as_ref().unwrap()) {
                for (x, y) in ra.iter().zip(rb) {
                    assert_eq!(x.lp.to_bits(), y.lp.to_bits());
                }
            }
        }
    }

    #[test]
    fn student_pts_change_with_step() {
        let s = teacher();
        let ex = &examples()[0];
        let cfg = DecodeConfig { max_len: 8, ..DecodeConfig::sample(1, 8, 1) };
        let draws: Vec<Vec<usize>> = (0..6).map(|step| generate_student_pt(&s, ex, &cfg, step).unwrap().tokens).collect();
        assert!(draws.iter().any(|d| d != &draws[0]));
        assert_eq!(generate_student_pt(&s, ex, &cfg, 3).unwrap().tokens, draws[3]);
        let p = generate_student_pt(&s, ex, &cfg, 0).unwrap();
        let mut g = Graph::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tr = teacher().forward(&mut g, &[ex.source.clone()], &[p.tokens.clone()], false, &mut rng).unwrap();
        assert_eq!(tr.target_len, p.tokens.len());
    }

    #[test]
    fn malformed_lines_report_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pts.jsonl");
        std::fs::write(&p, "{\"example_id\":\"a\",\"origin\":\"teacher\",\"method\":\"beam\",\"index\":0,\"tokens\":[],\"topk\":null}\n").unwrap();
        assert!(matches!(PtCache::load(&p), Err(Error::Parse { line: 1, .. })));
    }
}
