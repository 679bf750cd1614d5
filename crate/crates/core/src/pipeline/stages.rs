//! The stage manifest (stage id -> conditions) and the runner that trains and
//! scores each condition.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{encode_examples, Dataset, ParallelExample};
use crate::decoding::{DecodeConfig, DecodeMethod};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, GapReport, MetricName, MetricReport};
use crate::model::{Part, Seq2SeqModel};
use crate::objectives::Objective;
use crate::pipeline::config::ExperimentConfig;
use crate::pipeline::trainer::{
    train, train_with_post_finetune, Audit, PtUse, Recipe, Selected, StopReason, StudentPts, TrainConfig, TrainContext, TrainResult,
};
use crate::pseudo_targets::{generate_teacher_pts, Origin, PtCache, PtGenConfig, PtMethod};
use crate::vocab::Vocab;

/// How the student of a condition is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    Fresh,
    DecoderOnly,
    /// The teacher with its encoder cut to the first and last layers.
    PruneTeacherEncoder,
    PruneTeacherDecoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub stage: u8,
    pub name: String,
    pub init: StudentInit,
    pub recipe: Recipe,
    pub post_finetune: bool,
}

fn cond(stage: u8, name: &str, init: StudentInit, recipe: Recipe, post_finetune: bool) -> Condition {
    Condition { stage, name: name.to_string(), init, recipe, post_finetune }
}

fn kd(objective: Objective, gold: bool, pts: Option<PtUse>, unlabeled: bool, student_pts: StudentPts) -> Recipe {
    Recipe { objective, gold, pts, unlabeled, student_pts }
}

fn teacher_pts(method: PtMethod, count: Option<usize>) -> Option<PtUse> {
    Some(PtUse { origin: Origin::Teacher, method, count })
}

/// Built-in manifest. `gold` is the ground-truth interpolation flag for PT stages.
pub fn default_manifest(gold: bool) -> Vec<Condition> {
    use Objective::*;
    use StudentInit::*;
    let single = teacher_pts(PtMethod::Beam, Some(1));
    let beams = teacher_pts(PtMethod::Beam, None);
    let samples = teacher_pts(PtMethod::Sample, None);
    let hot = teacher_pts(PtMethod::HSample, None);
    vec![
        cond(1, "ED", Fresh, Recipe::finetune(), false),
        cond(1, "DO", DecoderOnly, Recipe::finetune(), false),
        cond(2, "Prune-Enc", PruneTeacherEncoder, Recipe::finetune(), false),
        cond(2, "Prune-Dec", PruneTeacherDecoder, Recipe::finetune(), false),
        cond(3, "Logits", Fresh, kd(Logits, true, None, false, StudentPts::None), true),
        cond(3, "Noisy", Fresh, kd(Noisy, true, None, false, StudentPts::None), true),
        cond(3, "Att-Rel", Fresh, kd(AttRel, true, None, false, StudentPts::None), true),
        cond(4, "Seq-lvl", Fresh, kd(Finetune, gold, single, false, StudentPts::None), true),
        cond(4, "Logits+Seq", Fresh, kd(Logits, gold, single, false, StudentPts::None), true),
        cond(5, "Unlabeled", Fresh, kd(Logits, gold, single, true, StudentPts::None), true),
        cond(6, "K-Beams", Fresh, kd(Logits, gold, beams, true, StudentPts::None), true),
        cond(7, "Sampling", Fresh, kd(Logits, gold, samples, true, StudentPts::None), true),
        cond(7, "H-Sampling", Fresh, kd(Logits, gold, hot, true, StudentPts::None), true),
        cond(8, "Only Teacher", Fresh, kd(Logits, gold, samples, true, StudentPts::None), true),
        cond(8, "Only Student", Fresh, kd(Logits, gold, None, true, StudentPts::Only), true),
        cond(8, "Joint-Teaching", Fresh, kd(Logits, gold, samples, true, StudentPts::Joint), true),
    ]
}

/// PT methods a set of conditions reads from the teacher cache.
pub fn required_pt_methods(conditions: &[&Condition]) -> Vec<PtMethod> {
    let mut m: Vec<PtMethod> = conditions
        .iter()
        .filter_map(|c| c.recipe.pts)
        .filter(|p| p.origin == Origin::Teacher)
        .map(|p| p.method)
        .collect();
    m.sort();
    m.dedup();
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub stage: u8,
    pub name: String,
    pub seed: u64,
    pub params: usize,
    pub dev: MetricReport,
    pub test: MetricReport,
    pub selected: Selected,
    pub best_step: usize,
    pub epochs: usize,
    pub stop: StopReason,
    pub seconds: f64,
    pub audit: Audit,
    /// Against the fine-tuned student and the teacher, on dev.
    pub gaps: Vec<GapReport>,
}

/// Encoded splits plus configuration.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub vocab: Vocab,
    /// Labeled followed by unlabeled training examples.
    pub train: Vec<ParallelExample>,
    pub dev: Vec<ParallelExample>,
    pub test: Vec<ParallelExample>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        dataset.validate()?;
        let vocab = dataset.spec.vocab();
        let mut train = encode_examples(&vocab, &dataset.train_labeled)?;
        train.extend(encode_examples(&vocab, &dataset.train_unlabeled)?);
        let dev = encode_examples(&vocab, &dataset.dev)?;
        let test = encode_examples(&vocab, &dataset.test)?;
        Ok(Self { cfg, vocab, train, dev, test })
    }

    pub fn labeled(&self) -> Vec<ParallelExample> {
        self.train.iter().filter(|e| e.is_labeled()).cloned().collect()
    }

    pub fn manifest(&self) -> Vec<Condition> {
        self.cfg.manifest.clone().unwrap_or_else(|| default_manifest(self.cfg.kd.interpolate_ground_truth))
    }

    pub fn stage(&self, stage: u8) -> Result<Vec<Condition>> {
        let c: Vec<Condition> = self.manifest().into_iter().filter(|c| c.stage == stage).collect();
        if c.is_empty() {
            return Err(Error::Config(format!("stage {stage} has no conditions in the manifest")));
        }
        Ok(c)
    }

    pub fn eval_decode(&self) -> DecodeConfig {
        DecodeConfig::greedy(self.cfg.decode.max_len)
    }

    fn seeded(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..base.clone() }
    }

    pub fn evaluate(&self, model: &Seq2SeqModel, split: &[ParallelExample]) -> Result<MetricReport> {
        evaluate(model, split, &self.eval_decode(), self.cfg.train.eval_batch)
    }

    fn context<'a>(&'a self, teacher: Option<&'a Seq2SeqModel>, pts: Option<&'a PtCache>, decode: &'a DecodeConfig) -> TrainContext<'a> {
        TrainContext { teacher, pts, projections: None, kd: &self.cfg.kd, decode }
    }

    fn student_decode(&self, seed: u64) -> DecodeConfig {
        DecodeConfig {
            method: DecodeMethod::Sample,
            nucleus_p: self.cfg.pts.nucleus_p,
            max_len: self.cfg.decode.max_len,
            seed,
            ..DecodeConfig::default()
        }
    }

    /// Fine-tunes a fresh teacher on the labeled data.
    pub fn train_teacher(&self, seed: u64) -> Result<TrainResult> {
        let cfg = self.cfg.teacher.build(self.vocab.len())?;
        let model = Seq2SeqModel::new(cfg, seed)?;
        let decode = self.eval_decode();
        let ctx = self.context(None, None, &decode);
        train(model, &self.labeled(), &self.dev, &Recipe::finetune(), ctx, &self.seeded(&self.cfg.teacher_train, seed))
    }

    /// Fine-tunes a fresh student on the labeled data (the "S" of gap closure).
    pub fn train_student(&self, seed: u64) -> Result<TrainResult> {
        let cfg = self.cfg.student.build(self.vocab.len())?;
        let model = Seq2SeqModel::new(cfg, seed)?;
        let decode = self.eval_decode();
        let ctx = self.context(None, None, &decode);
        train(model, &self.labeled(), &self.dev, &Recipe::finetune(), ctx, &self.seeded(&self.cfg.train, seed))
    }

    pub fn pt_config(&self, method: PtMethod) -> PtGenConfig {
        let p = &self.cfg.pts;
        let decode = DecodeConfig {
            method: if method == PtMethod::Beam { DecodeMethod::Beam } else { DecodeMethod::Sample },
            beam_k: p.beam_k,
            nucleus_p: p.nucleus_p,
            temperature: if method == PtMethod::HSample { p.high_temperature } else { 1.0 },
            max_len: self.cfg.decode.max_len,
            num_samples: p.num_samples,
            seed: p.seed,
        };
        PtGenConfig { method, decode, keep: None, topk: 0, batch_size: p.batch_size, threads: p.threads }
    }

    /// Teacher PTs for every training example (labeled and unlabeled).
    pub fn generate_pts(&self, teacher: &Seq2SeqModel, methods: &[PtMethod]) -> Result<PtCache> {
        let mut cache = PtCache::new();
        for &m in methods {
            info!("generating {m:?} PTs for {} examples", self.train.len());
            cache.merge(generate_teacher_pts(teacher, &self.train, &self.pt_config(m))?);
        }
        Ok(cache)
    }

    fn init_student(&self, init: StudentInit, seed: u64, teacher: Option<&Seq2SeqModel>) -> Result<Seq2SeqModel> {
        let v = self.vocab.len();
        let need_teacher = || teacher.ok_or_else(|| Error::MissingArtifact("teacher model (needed for pruning)".into()));
        let mut m = match init {
            StudentInit::Fresh => Seq2SeqModel::new(self.cfg.student.build(v)?, seed)?,
            StudentInit::DecoderOnly => Seq2SeqModel::new(self.cfg.student.as_decoder_only().build(v)?, seed)?,
            StudentInit::PruneTeacherEncoder => need_teacher()?.prune_layers(Part::Encoder)?,
            StudentInit::PruneTeacherDecoder => need_teacher()?.prune_layers(Part::Decoder)?,
        };
        m.params_mut().set_trainable(true);
        Ok(m)
    }

    /// Trains one condition and scores it on dev and test. `baseline` and
    /// `teacher_dev` fill in the gap-closure rows when given.
    pub fn run_condition(
        &self,
        c: &Condition,
        seed: u64,
        teacher: Option<&Seq2SeqModel>,
        pts: Option<&PtCache>,
        baseline: Option<&MetricReport>,
        teacher_dev: Option<&MetricReport>,
    ) -> Result<(ConditionResult, Seq2SeqModel)> {
        if c.recipe.needs_teacher() && teacher.is_none() {
            return Err(Error::MissingArtifact(format!("teacher model (needed by `{}`)", c.name)));
        }
        if c.recipe.pts.is_some() && pts.is_none() {
            return Err(Error::MissingArtifact(format!("PT cache (needed by `{}`)", c.name)));
        }
        let student = self.init_student(c.init, seed, teacher)?;
        let decode = self.student_decode(seed);
        let ctx = self.context(teacher, pts, &decode);
        let mut tcfg = self.seeded(&self.cfg.train, seed);
        if !c.post_finetune {
            tcfg.post_finetune_epochs = 0;
        }
        info!("stage {} `{}` seed {seed}", c.stage, c.name);
        let out = train_with_post_finetune(student, &self.train, &self.dev, &c.recipe, ctx, &tcfg)?;
        let dev = self.evaluate(&out.model, &self.dev)?;
        let test = self.evaluate(&out.model, &self.test)?;
        let gaps = match (baseline, teacher_dev) {
            (Some(s), Some(t)) => GapReport::all(s, t, &dev),
            _ => Vec::new(),
        };
        let mut audit = out.kd.audit.clone();
        let mut seconds = out.kd.seconds;
        if let Some(p) = &out.post {
            audit.merge(&p.audit);
            seconds += p.seconds;
        }
        let result = ConditionResult {
            stage: c.stage,
            name: c.name.clone(),
            seed,
            params: out.model.num_parameters(),
            dev,
            test,
            selected: out.selected,
            best_step: out.kd.state.best_step,
            epochs: out.kd.state.epoch + 1,
            stop: out.kd.stop,
            seconds,
            audit,
            gaps,
        };
        Ok((result, out.model))
    }
}

/// Reports written under a workdir.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Median of the dev gap closure on `metric` over several results.
pub fn median_gap_closure(results: &[ConditionResult], metric: MetricName) -> Option<f64> {
    let mut v: Vec<f64> = results
        .iter()
        .filter_map(|r| r.gaps.iter().find(|g| g.metric == metric).and_then(|g| g.closed_fraction))
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite gap closure"));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}
