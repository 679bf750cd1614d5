//! The extreme setup: a student with its own tokenizer learns only from an
//! external teacher's PT file (text, tokens and top-k logprobs), with no
//! labeled data.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::align::{BpeLite, ExternalRecord, ExternalTopK, NwScoring, ProjectedDistribution, Tokenizer};
use crate::data::{Dataset, ParallelExample, TextExample};
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::model::Seq2SeqModel;
use crate::objectives::Objective;
use crate::pipeline::config::ExperimentConfig;
use crate::pipeline::trainer::{train, Audit, PtUse, Recipe, StopReason, StudentPts, TrainConfig, TrainContext};
use crate::pseudo_targets::{generate_pts, Origin, PseudoTarget, PtCache, PtGenConfig, PtMethod};
use crate::vocab::{Vocab, EOS, UNK};

/// Method tag under which external PTs are cached.
pub const EXTERNAL_METHOD: PtMethod = PtMethod::Sample;

/// Exports `model`'s PTs for `examples` through the external schema: tokens
/// are vocabulary symbols, text is their concatenation, EOS is dropped.
/// PTs that are empty after dropping EOS are skipped.
pub fn export_external(model: &Seq2SeqModel, vocab: &Vocab, examples: &[ParallelExample], cfg: &PtGenConfig) -> Result<Vec<ExternalRecord>> {
    if cfg.topk == 0 {
        return Err(Error::Config("exporting an external teacher needs topk > 0".into()));
    }
    let cache = generate_pts(model, examples, cfg, Origin::Teacher)?;
    let sym = |id: usize| vocab.token(id).map(str::to_string).ok_or_else(|| Error::InvalidArgument(format!("token id {id} outside the vocabulary")));
    let mut out = Vec::new();
    for e in examples {
        for pt in cache.get(&e.id, Origin::Teacher, cfg.method).unwrap_or(&[]) {
            let len = pt.tokens.iter().position(|&t| t == EOS).unwrap_or(pt.tokens.len());
            if len == 0 {
                warn!("skipping empty PT {} of `{}`", pt.index, e.id);
                continue;
            }
            let tokens: Vec<String> = pt.tokens[..len].iter().map(|&t| sym(t)).collect::<Result<_>>()?;
            let rows = pt.topk.as_ref().ok_or_else(|| Error::InvalidArgument("PT generated without top-k".into()))?;
            let topk = rows[..len]
                .iter()
                .map(|r| r.iter().map(|x| Ok(ExternalTopK { token: sym(x.t)?, logprob: x.lp })).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            let rec = ExternalRecord { example_id: e.id.clone(), text: tokens.concat(), tokens, topk };
            rec.validate()?;
            out.push(rec);
        }
    }
    Ok(out)
}

/// One condition of the extreme grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremeCondition {
    pub name: String,
    pub objective: Objective,
    pub pts_per_input: usize,
}

pub fn extreme_conditions(multi: usize) -> Vec<ExtremeCondition> {
    let c = |name: &str, objective, pts_per_input| ExtremeCondition { name: name.into(), objective, pts_per_input };
    vec![
        c("Single PT", Objective::Finetune, 1),
        c("Multi PT", Objective::Finetune, multi),
        c("Single PT + Logits", Objective::Logits, 1),
        c("Multi PT + Logits", Objective::Logits, multi),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremeResult {
    pub name: String,
    pub seed: u64,
    pub objective: Objective,
    pub pts_per_input: usize,
    /// Against the teacher's first PT of each held-out input.
    pub dev: MetricReport,
    /// Against ground truth, never seen in training.
    pub test: MetricReport,
    pub epochs: usize,
    pub stop: StopReason,
    pub seconds: f64,
    pub audit: Audit,
    pub labeled_examples_consumed: usize,
}

/// Student-side data built from an external PT file.
pub struct ExtremeData {
    pub tokenizer: BpeLite,
    pub vocab: Vocab,
    pub train: Vec<ParallelExample>,
    pub dev: Vec<ParallelExample>,
    pub test: Vec<ParallelExample>,
    pub pts: PtCache,
    pub projections: HashMap<(String, usize), Vec<ProjectedDistribution>>,
}

fn encode(tok: &BpeLite, vocab: &Vocab, text: &str) -> Vec<usize> {
    tok.tokenize(text).iter().map(|t| vocab.id(t).unwrap_or(UNK)).collect()
}

impl ExtremeData {
    /// Groups `records` by example id (file order). The first `n_dev` ids form
    /// the PT-referenced dev set, the next `n_train` the training inputs.
    /// Sources come from `dataset`; its targets are read for the test split only.
    pub fn build(records: &[ExternalRecord], dataset: &Dataset, n_train: usize, n_dev: usize, merges: usize) -> Result<Self> {
        let mut order: Vec<&str> = Vec::new();
        let mut by_id: HashMap<&str, Vec<&ExternalRecord>> = HashMap::new();
        for r in records {
            r.validate()?;
            by_id.entry(&r.example_id).or_insert_with(|| {
                order.push(&r.example_id);
                Vec::new()
            });
            by_id.get_mut(r.example_id.as_str()).expect("inserted").push(r);
        }
        if order.len() < n_dev + 1 {
            return Err(Error::InvalidArgument(format!("{} external inputs cannot fill {n_dev} dev inputs plus training", order.len())));
        }
        let sources: HashMap<&str, &TextExample> = dataset
            .train_unlabeled
            .iter()
            .chain(&dataset.train_labeled)
            .chain(&dataset.dev)
            .map(|e| (e.id.as_str(), e))
            .collect();
        let source_of = |id: &str| {
            sources.get(id).map(|e| e.source.clone()).ok_or_else(|| Error::InvalidArgument(format!("external PT for unknown input `{id}`")))
        };
        let dev_ids = &order[..n_dev];
        let train_ids = &order[n_dev..(n_dev + n_train).min(order.len())];
        let mut corpus: Vec<String> = Vec::new();
        for id in train_ids {
            corpus.push(source_of(id)?);
            corpus.extend(by_id[id].iter().map(|r| r.text.clone()));
        }
        let tokenizer = BpeLite::train(&corpus, merges);
        let vocab = tokenizer.vocab();
        let scoring = NwScoring::default();
        let mut pts = PtCache::new();
        let mut projections = HashMap::new();
        let mut train = Vec::new();
        for id in train_ids {
            let mut set = Vec::new();
            for (index, r) in by_id[id].iter().enumerate() {
                let (ids, proj) = r.project(&tokenizer, &vocab, &scoring)?;
                set.push(PseudoTarget { example_id: id.to_string(), origin: Origin::External, method: EXTERNAL_METHOD, index, tokens: ids, topk: None });
                projections.insert((id.to_string(), index), proj);
            }
            pts.insert_set(set)?;
            train.push(ParallelExample { id: id.to_string(), source: encode(&tokenizer, &vocab, &source_of(id)?), target: None });
        }
        let mut dev = Vec::new();
        for id in dev_ids {
            let mut target = encode(&tokenizer, &vocab, &by_id[id][0].text);
            target.push(EOS);
            dev.push(ParallelExample { id: id.to_string(), source: encode(&tokenizer, &vocab, &source_of(id)?), target: Some(target) });
        }
        let test = dataset
            .test
            .iter()
            .filter_map(|e| {
                e.target.as_ref().map(|t| {
                    let mut target = encode(&tokenizer, &vocab, t);
                    target.push(EOS);
                    ParallelExample { id: e.id.clone(), source: encode(&tokenizer, &vocab, &e.source), target: Some(target) }
                })
            })
            .collect();
        info!("extreme setup: {} train inputs, {} dev, student vocab {}", train.len(), dev.len(), vocab.len());
        Ok(Self { tokenizer, vocab, train, dev, test, pts, projections })
    }

    /// Trains one condition from a fresh student.
    pub fn run(&self, cfg: &ExperimentConfig, c: &ExtremeCondition, seed: u64) -> Result<ExtremeResult> {
        let started = Instant::now();
        let recipe = Recipe {
            objective: c.objective,
            gold: false,
            pts: Some(PtUse { origin: Origin::External, method: EXTERNAL_METHOD, count: Some(c.pts_per_input) }),
            unlabeled: true,
            student_pts: StudentPts::None,
        };
        let model = Seq2SeqModel::new(cfg.student.build(self.vocab.len())?, seed)?;
        let decode = DecodeConfig::greedy(cfg.decode.max_len);
        let ctx = TrainContext { teacher: None, pts: Some(&self.pts), projections: Some(&self.projections), kd: &cfg.kd, decode: &decode };
        let epochs = cfg.extreme.max_epochs;
        let tcfg = TrainConfig { seed, post_finetune_epochs: 0, max_epochs: epochs, patience_epochs: epochs, ..cfg.train.clone() };
        info!("extreme `{}` seed {seed}", c.name);
        let out = train(model, &self.train, &self.dev, &recipe, ctx, &tcfg)?;
        let dev = evaluate(&out.model, &self.dev, &decode, cfg.train.eval_batch)?;
        let test = evaluate(&out.model, &self.test, &decode, cfg.train.eval_batch)?;
        Ok(ExtremeResult {
            name: c.name.clone(),
            seed,
            objective: c.objective,
            pts_per_input: c.pts_per_input,
            dev,
            test,
            epochs: out.state.epoch + 1,
            stop: out.stop,
            seconds: started.elapsed().as_secs_f64(),
            labeled_examples_consumed: out.audit.gold_ids.len(),
            audit: out.audit,
        })
    }
}

/// Runs every condition for every seed.
pub fn run_extreme(cfg: &ExperimentConfig, records: &[ExternalRecord], dataset: &Dataset) -> Result<Vec<ExtremeResult>> {
    let e = &cfg.extreme;
    let data = ExtremeData::build(records, dataset, e.n_train, e.n_dev, e.bpe_merges)?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        for c in extreme_conditions(e.multi_pts) {
            out.push(data.run(cfg, &c, seed)?);
        }
    }
    Ok(out)
}

/// Inputs for a canned external file: unlabeled sources only, dev inputs first.
pub fn external_inputs(dataset: &Dataset, vocab: &Vocab, n_train: usize, n_dev: usize) -> Result<Vec<ParallelExample>> {
    let need = n_train + n_dev;
    if dataset.train_unlabeled.len() < need {
        return Err(Error::InvalidArgument(format!(
            "{} unlabeled inputs, extreme setup needs {need}",
            dataset.train_unlabeled.len()
        )));
    }
    dataset.train_unlabeled[..need]
        .iter()
        .map(|e| Ok(ParallelExample { id: e.id.clone(), source: vocab.encode(&e.source)?, target: None }))
        .collect()
}

/// Results grouped by condition name.
pub fn by_condition(results: &[ExtremeResult]) -> BTreeMap<String, Vec<&ExtremeResult>> {
    let mut m: BTreeMap<String, Vec<&ExtremeResult>> = BTreeMap::new();
    for r in results {
        m.entry(r.name.clone()).or_default().push(r);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, encode_examples, DatasetSpec};
    use crate::model::ModelConfig;

    #[test]
    fn export_build_and_train_without_labels() {
        let spec = DatasetSpec { n_labeled: 20, unlabeled_ratio: 2, n_dev: 5, n_test: 6, min_source_len: 3, max_source_len: 5, vocab_size: 21, ..DatasetSpec::default() };
        let ds = generate(&spec).unwrap();
        let vocab = ds.spec.vocab();
        let teacher = Seq2SeqModel::new(ModelConfig::encoder_decoder((1, 1), 16, 2, vocab.len(), 12), 4).unwrap();
        let inputs = external_inputs(&ds, &vocab, 20, 5).unwrap();
        let mut pt = PtGenConfig { method: PtMethod::Sample, decode: DecodeConfig::sample(3, 8, 9), keep: None, topk: 5, batch_size: 8, threads: 1 };
        pt.decode.nucleus_p = 0.95;
        let records = export_external(&teacher, &vocab, &inputs, &pt).unwrap();
        assert!(!records.is_empty());
        for r in &records {
            assert_eq!(r.text, r.tokens.concat());
            assert!(r.topk.iter().all(|row| row.len() <= 5));
        }
        let data = ExtremeData::build(&records, &ds, 20, 5, 8).unwrap();
        assert_eq!(data.dev.len(), 5);
        assert!(data.train.iter().all(|e| e.target.is_none()));
        let labeled = encode_examples(&vocab, &ds.train_labeled).unwrap();
        assert!(data.train.iter().all(|e| labeled.iter().all(|l| l.id != e.id)));

        let mut cfg = ExperimentConfig::default();
        cfg.student = crate::pipeline::config::ModelSpec::ed(1, 1, 16, 2);
        cfg.extreme.max_epochs = 2;
        cfg.train.micro_batch = 8;
        cfg.train.examples_per_update = 8;
        cfg.decode.max_len = 12;
        for c in extreme_conditions(3) {
            let r = data.run(&cfg, &c, 1).unwrap();
            assert_eq!(r.labeled_examples_consumed, 0);
            assert_eq!(r.audit.gold_terms + r.audit.gold_terms_unlabeled, 0);
            assert!(r.audit.external_pt_terms > 0);
        }
    }
}
