//! Synthetic tasks and dataset JSONL I/O.
//!
//! Every task is a fixed, documented rule so each generated pair can be
//! checked independently:
//!
//! * `reversal`: reverse the source, then at every even output index replace a
//!   vowel with the next one in `a -> e -> i -> o -> u -> a`.
//! * `simplification`: map symbol `w{k}` to `w{(7k + 3) mod V}`, drop source
//!   positions whose symbol index is `4 mod 5`, then rotate left by one.
//! * `arithmetic`: copy the source, replacing the single infix `d1 + d2` with the
//!   digits of `d1 + d2`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Vocab, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Reversal,
    Simplification,
    Arithmetic,
}

const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn letters(n: usize) -> Vec<String> {
    (b'a'..=b'z').take(n).map(|c| (c as char).to_string()).collect()
}

impl Task {
    /// Content symbols for a given `vocab_size`.
    pub fn symbols(self, vocab_size: usize) -> Vec<String> {
        match self {
            Task::Reversal => letters(vocab_size),
            Task::Simplification => (0..vocab_size).map(|k| format!("w{k}")).collect(),
            Task::Arithmetic => {
                let mut s: Vec<String> = (0..10).map(|d| d.to_string()).collect();
                s.push("+".into());
                s.extend(letters(vocab_size));
                s
            }
        }
    }

    pub fn vocab(self, vocab_size: usize) -> Vocab {
        Vocab::new(self.symbols(vocab_size))
    }

    fn check(self, vocab_size: usize, min_len: usize) -> Result<()> {
        let ok = match self {
            Task::Reversal => (21..=26).contains(&vocab_size),
            Task::Simplification => vocab_size >= 5 && vocab_size % 7 != 0,
            Task::Arithmetic => (1..=26).contains(&vocab_size) && min_len >= 3,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "vocab_size {vocab_size} (min length {min_len}) does not fit the {self:?} task rules"
            )))
        }
    }

    /// Applies the task rule to a whitespace-tokenized source.
    pub fn apply(self, source: &[&str]) -> Result<Vec<String>> {
        match self {
            Task::Reversal => Ok(source
                .iter()
                .rev()
                .enumerate()
                .map(|(i, t)| match VOWELS.iter().position(|v| v == t) {
                    Some(k) if i % 2 == 0 => VOWELS[(k + 1) % 5].to_string(),
                    _ => t.to_string(),
                })
                .collect()),
            Task::Simplification => Err(Error::InvalidArgument("simplification needs the vocabulary size".into())),
            Task::Arithmetic => {
                let plus = source
                    .iter()
                    .position(|t| *t == "+")
                    .filter(|&p| p > 0 && p + 1 < source.len())
                    .ok_or_else(|| Error::InvalidArgument("arithmetic source has no `d + d` infix".into()))?;
                let digit = |t: &str| t.parse::<u32>().ok().filter(|d| *d < 10);
                let (a, b) = match (digit(source[plus - 1]), digit(source[plus + 1])) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(Error::InvalidArgument("`+` must sit between two digits".into())),
                };
                let mut out: Vec<String> = source[..plus - 1].iter().map(|s| s.to_string()).collect();
                out.extend((a + b).to_string().chars().map(|c| c.to_string()));
                out.extend(source[plus + 2..].iter().map(|s| s.to_string()));
                Ok(out)
            }
        }
    }

    /// Rule for the simplification task.
    pub fn simplify(source: &[&str], vocab_size: usize) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for t in source {
            let k: usize = t
                .strip_prefix('w')
                .and_then(|n| n.parse().ok())
                .filter(|&k| k < vocab_size)
                .ok_or_else(|| Error::InvalidArgument(format!("`{t}` is not a simplification symbol")))?;
            if k % 5 != 4 {
                out.push(format!("w{}", (k * 7 + 3) % vocab_size));
            }
        }
        if !out.is_empty() {
            out.rotate_left(1);
        }
        Ok(out)
    }

    pub fn target_for(self, source: &str, vocab_size: usize) -> Result<String> {
        let toks: Vec<&str> = source.split_whitespace().collect();
        let out = match self {
            Task::Simplification => Self::simplify(&toks, vocab_size)?,
            _ => self.apply(&toks)?,
        };
        Ok(out.join(" "))
    }

    fn sample_source(self, rng: &mut ChaCha8Rng, vocab_size: usize, len: usize) -> String {
        let symbols = match self {
            Task::Arithmetic => {
                let mut s: Vec<String> = (0..10).map(|d| d.to_string()).collect();
                s.extend(letters(vocab_size));
                s
            }
            _ => self.symbols(vocab_size),
        };
        let mut toks: Vec<String> = (0..len).map(|_| symbols.choose(rng).expect("non-empty").clone()).collect();
        if self == Task::Arithmetic {
            let p = rng.random_range(1..len - 1);
            toks[p - 1] = rng.random_range(0..10).to_string();
            toks[p] = "+".into();
            toks[p + 1] = rng.random_range(0..10).to_string();
        }
        toks.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub task: Task,
    pub n_labeled: usize,
    pub unlabeled_ratio: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub vocab_size: usize,
    pub min_source_len: usize,
    pub max_source_len: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            task: Task::Reversal,
            n_labeled: 2000,
            unlabeled_ratio: 4,
            n_dev: 200,
            n_test: 200,
            vocab_size: 26,
            min_source_len: 4,
            max_source_len: 10,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_source_len == 0 || self.min_source_len > self.max_source_len {
            return Err(Error::Config(format!(
                "source lengths [{}, {}] are invalid",
                self.min_source_len, self.max_source_len
            )));
        }
        self.task.check(self.vocab_size, self.min_source_len)
    }

    pub fn vocab(&self) -> Vocab {
        self.task.vocab(self.vocab_size)
    }
}

/// One dataset line. `target == None` marks an unlabeled example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextExample {
    pub id: String,
    pub source: String,
    #[serde(default)]
    pub target: Option<String>,
}

/// A tokenized example; labeled targets end with EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelExample {
    pub id: String,
    pub source: Vec<usize>,
    pub target: Option<Vec<usize>>,
}

impl ParallelExample {
    pub fn is_labeled(&self) -> bool {
        self.target.is_some()
    }
}

pub fn encode_example(vocab: &Vocab, ex: &TextExample) -> Result<ParallelExample> {
    let source = vocab.encode(&ex.source)?;
    if source.is_empty() {
        return Err(Error::InvalidArgument(format!("example `{}` has an empty source", ex.id)));
    }
    let target = match &ex.target {
        Some(t) => {
            let mut ids = vocab.encode(t)?;
            ids.push(EOS);
            Some(ids)
        }
        None => None,
    };
    Ok(ParallelExample { id: ex.id.clone(), source, target })
}

pub fn encode_examples(vocab: &Vocab, examples: &[TextExample]) -> Result<Vec<ParallelExample>> {
    examples.iter().map(|e| encode_example(vocab, e)).collect()
}

/// Vocabulary covering every symbol in a user-provided corpus (sorted).
pub fn corpus_vocab<'a>(examples: impl IntoIterator<Item = &'a TextExample>) -> Vocab {
    let mut symbols: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for ex in examples {
        for t in ex.source.split_whitespace().chain(ex.target.iter().flat_map(|t| t.split_whitespace())) {
            if seen.insert(t.to_string()) {
                symbols.push(t.to_string());
            }
        }
    }
    symbols.sort();
    Vocab::new(symbols)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train_labeled: Vec<TextExample>,
    pub train_unlabeled: Vec<TextExample>,
    pub dev: Vec<TextExample>,
    pub test: Vec<TextExample>,
}

pub const SPLITS: [&str; 4] = ["train_labeled", "train_unlabeled", "dev", "test"];

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&[TextExample]> {
        match name {
            "train_labeled" => Some(&self.train_labeled),
            "train_unlabeled" => Some(&self.train_unlabeled),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Checks label presence per split, id uniqueness and source disjointness.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut sources = HashSet::new();
        for name in SPLITS {
            let split = self.split(name).expect("known split");
            let want_labels = name != "train_unlabeled";
            for ex in split {
                if !ids.insert(ex.id.as_str()) {
                    return Err(Error::DuplicateId(ex.id.clone()));
                }
                if ex.target.is_some() != want_labels {
                    return Err(Error::InvalidArgument(format!("example `{}` in {name} has the wrong label state", ex.id)));
                }
                if !sources.insert(ex.source.as_str()) {
                    return Err(Error::InvalidArgument(format!("source of `{}` appears in more than one example", ex.id)));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&self.spec)?)?;
        for name in SPLITS {
            save_jsonl(self.split(name).expect("known split"), &dir.join(format!("{name}.jsonl")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec_path = dir.join("spec.json");
        let spec: DatasetSpec = serde_json::from_str(
            &std::fs::read_to_string(&spec_path)
                .map_err(|_| Error::MissingArtifact(spec_path.display().to_string()))?,
        )?;
        let load = |name: &str| load_jsonl(&dir.join(format!("{name}.jsonl")));
        Ok(Self {
            spec,
            train_labeled: load("train_labeled")?,
            train_unlabeled: load("train_unlabeled")?,
            dev: load("dev")?,
            test: load("test")?,
        })
    }
}

/// Deterministic generation of all four splits; sources never repeat.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut make = |prefix: &str, n: usize, labeled: bool, rng: &mut ChaCha8Rng| -> Result<Vec<TextExample>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 100 * n + 1000 {
                return Err(Error::Config(format!("cannot draw {n} distinct sources for {prefix}; widen lengths or vocab")));
            }
            let len = rng.random_range(spec.min_source_len..=spec.max_source_len);
            let source = spec.task.sample_source(rng, spec.vocab_size, len);
            let target = spec.task.target_for(&source, spec.vocab_size)?;
            if target.is_empty() || !seen.insert(source.clone()) {
                continue;
            }
            out.push(TextExample {
                id: format!("{prefix}-{:06}", out.len()),
                source,
                target: labeled.then_some(target),
            });
        }
        Ok(out)
    };
    let train_labeled = make("train", spec.n_labeled, true, &mut rng)?;
    let train_unlabeled = make("unl", spec.n_labeled * spec.unlabeled_ratio, false, &mut rng)?;
    let dev = make("dev", spec.n_dev, true, &mut rng)?;
    let test = make("test", spec.n_test, true, &mut rng)?;
    Ok(Dataset { spec: spec.clone(), train_labeled, train_unlabeled, dev, test })
}

pub fn save_jsonl(examples: &[TextExample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads dataset JSONL; blank lines are skipped, errors carry the 1-based line.
pub fn load_jsonl(path: &Path) -> Result<Vec<TextExample>> {
    let file = File::open(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TextExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if ex.source.trim().is_empty() {
            return Err(Error::Parse { path: path.to_path_buf(), line: i + 1, msg: "empty source".into() });
        }
        if !ids.insert(ex.id.clone()) {
            return Err(Error::DuplicateId(ex.id));
        }
        out.push(ex);
    }
    Ok(out)
}
