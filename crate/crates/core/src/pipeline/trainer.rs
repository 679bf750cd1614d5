//! The training loop shared by fine-tuning, every KD condition and the
//! extreme setup.

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{cross_tokenizer_logits_kd, ProjectedDistribution};
use crate::data::ParallelExample;
use crate::decoding::{example_seed, DecodeConfig};
use crate::error::{Error, Result};
use crate::metrics::{perplexity, predict, score_outputs, MetricName};
use crate::model::{ForwardTrace, Seq2SeqModel};
use crate::objectives::{
    att_rel_kd_loss, logits_kd_loss, noisy_kd_loss, relation_heads, teacher_signal, JointMode, KDConfig,
    Objective, RelationScaler,
};
use crate::pseudo_targets::{generate_student_pts, Origin, PtCache, PtMethod};
use crate::tensor::{AdamW, Graph, OptimizerConfig, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    /// Fraction of all updates used for linear warmup; overrides `optimizer.warmup_steps`.
    pub warmup_fraction: f64,
    pub micro_batch: usize,
    pub examples_per_update: usize,
    pub max_epochs: usize,
    pub patience_epochs: usize,
    pub evals_per_epoch: usize,
    pub post_finetune_epochs: usize,
    pub dev_metric: MetricName,
    pub max_dev_examples: usize,
    pub eval_batch: usize,
    /// Wall-clock ceiling for one call to [`train`]; `None` disables it.
    pub time_budget_secs: Option<f64>,
    /// Teacher logits kept in memory across epochs.
    pub teacher_cache_bytes: usize,
    pub keep_snapshots: bool,
    pub checkpoint_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig { learning_rate: 1e-3, warmup_steps: 0, ..OptimizerConfig::default() },
            warmup_fraction: 0.05,
            micro_batch: 32,
            examples_per_update: 96,
            max_epochs: 192,
            patience_epochs: 16,
            evals_per_epoch: 2,
            post_finetune_epochs: 10,
            dev_metric: MetricName::Bleu,
            max_dev_examples: 1000,
            eval_batch: 100,
            time_budget_secs: None,
            teacher_cache_bytes: 1 << 30,
            keep_snapshots: false,
            checkpoint_dir: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.micro_batch == 0 || self.examples_per_update == 0 || self.evals_per_epoch == 0 {
            return Err(Error::Config("micro_batch, examples_per_update and evals_per_epoch must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if self.patience_epochs > self.max_epochs {
            return Err(Error::Config(format!(
                "patience_epochs {} exceeds max_epochs {}",
                self.patience_epochs, self.max_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Which cached PTs a recipe trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PtUse {
    pub origin: Origin,
    pub method: PtMethod,
    /// Rotate over the first `count` PTs (`None`: all of them; `Some(1)`: a single PT).
    pub count: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentPts {
    None,
    /// Student PTs replace teacher PTs on every update.
    Only,
    /// Teacher and student PTs mixed per [`JointMode`].
    Joint,
}

/// What one training run optimizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub objective: Objective,
    /// Train on ground truth of labeled examples.
    pub gold: bool,
    pub pts: Option<PtUse>,
    /// Include unlabeled examples (PT terms only).
    pub unlabeled: bool,
    pub student_pts: StudentPts,
}

impl Recipe {
    pub fn finetune() -> Self {
        Self { objective: Objective::Finetune, gold: true, pts: None, unlabeled: false, student_pts: StudentPts::None }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gold && self.pts.is_none() && self.student_pts == StudentPts::None {
            return Err(Error::Config("recipe has no training targets".into()));
        }
        if self.unlabeled && self.pts.is_none() && self.student_pts == StudentPts::None {
            return Err(Error::Config("unlabeled examples need pseudo-targets".into()));
        }
        if let Some(p) = self.pts {
            if p.origin == Origin::External && (self.gold || self.student_pts != StudentPts::None) {
                return Err(Error::Config("external PTs cannot be mixed with ground truth or student PTs".into()));
            }
            if p.count == Some(0) {
                return Err(Error::Config("PT count must be positive".into()));
            }
            if p.origin == Origin::Student {
                return Err(Error::Config("student PTs are generated on the fly, not read from a cache".into()));
            }
        }
        if self.student_pts == StudentPts::Joint && self.pts.is_none() {
            return Err(Error::Config("joint teaching needs teacher PTs".into()));
        }
        if self.objective == Objective::AttRel && (self.pts.is_some() || self.student_pts != StudentPts::None) {
            return Err(Error::Config("attention-relation KD is defined on ground-truth targets only".into()));
        }
        Ok(())
    }

    pub fn needs_teacher(&self) -> bool {
        let external = matches!(self.pts, Some(PtUse { origin: Origin::External, .. }));
        !external && self.objective != Objective::Finetune
    }
}

/// Read-only inputs a recipe may need.
#[derive(Clone, Copy)]
pub struct TrainContext<'a> {
    pub teacher: Option<&'a Seq2SeqModel>,
    pub pts: Option<&'a PtCache>,
    /// Cross-tokenizer projections of external PTs, keyed by (example id, PT index).
    pub projections: Option<&'a HashMap<(String, usize), Vec<ProjectedDistribution>>>,
    pub kd: &'a KDConfig,
    /// Sampling setup for on-the-fly student PTs; also fixes eval `max_len`.
    pub decode: &'a DecodeConfig,
}

/// Evidence of which targets a run consumed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub gold_terms: usize,
    /// Ground-truth terms attributed to unlabeled examples; must stay 0.
    pub gold_terms_unlabeled: usize,
    pub teacher_pt_terms: usize,
    pub external_pt_terms: usize,
    pub student_pt_terms: usize,
    /// Labeled examples whose ground truth entered a loss.
    pub gold_ids: BTreeSet<String>,
}

impl Audit {
    pub fn merge(&mut self, other: &Audit) {
        self.gold_terms += other.gold_terms;
        self.gold_terms_unlabeled += other.gold_terms_unlabeled;
        self.teacher_pt_terms += other.teacher_pt_terms;
        self.external_pt_terms += other.external_pt_terms;
        self.student_pt_terms += other.student_pt_terms;
        self.gold_ids.extend(other.gold_ids.iter().cloned());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    TimeBudget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub best_dev_score: Option<f64>,
    pub best_step: usize,
    pub best_checkpoint_path: Option<PathBuf>,
    pub evals_since_improvement: usize,
}

pub struct TrainResult {
    /// Parameters at the best dev evaluation.
    pub model: Seq2SeqModel,
    pub state: TrainState,
    pub history: Vec<EvalRecord>,
    pub stop: StopReason,
    pub audit: Audit,
    pub seconds: f64,
    /// `(step, model)` at every evaluation when `keep_snapshots` is set.
    pub snapshots: Vec<(usize, Seq2SeqModel)>,
}

impl TrainResult {
    pub fn best_score(&self) -> f64 {
        self.state.best_dev_score.unwrap_or(f64::NAN)
    }
}

/// Dev-set score of `model` on the configured metric.
pub fn dev_score(model: &Seq2SeqModel, dev: &[ParallelExample], metric: MetricName, decode: &DecodeConfig, batch: usize) -> Result<f64> {
    if dev.is_empty() {
        return Err(Error::InvalidArgument("empty dev set".into()));
    }
    if metric == MetricName::Ppl {
        return perplexity(model, dev, batch);
    }
    let sources: Vec<Vec<usize>> = dev.iter().map(|e| e.source.clone()).collect();
    let refs: Vec<Vec<usize>> = dev
        .iter()
        .map(|e| e.target.clone().ok_or_else(|| Error::InvalidArgument(format!("dev example `{}` is unlabeled", e.id))))
        .collect::<Result<_>>()?;
    let outputs = predict(model, &sources, &DecodeConfig::greedy(decode.max_len), batch)?;
    Ok(score_outputs(&outputs, &refs, f64::NAN)?.get(metric))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Gold,
    Pt(Origin),
}

#[derive(Debug, Clone)]
struct Seq {
    ex: usize,
    target: Vec<usize>,
    kind: Kind,
    weight: f64,
    pt_index: usize,
}

struct TeacherCache {
    map: HashMap<(usize, Vec<usize>), Vec<f64>>,
    bytes: usize,
    cap: usize,
}

impl TeacherCache {
    /// Per-position teacher logits (`len * V`) for each sequence; missing ones
    /// are computed in one batched forward pass.
    fn logits(&mut self, teacher: &Seq2SeqModel, examples: &[ParallelExample], seqs: &[Seq], kd: &KDConfig) -> Result<Vec<Vec<f64>>> {
        let v = teacher.config().vocab_size;
        let missing: Vec<usize> = (0..seqs.len())
            .filter(|&i| !self.map.contains_key(&(seqs[i].ex, seqs[i].target.clone())))
            .collect();
        let mut fresh: HashMap<usize, Vec<f64>> = HashMap::new();
        if !missing.is_empty() {
            let sources: Vec<Vec<usize>> = missing.iter().map(|&i| examples[seqs[i].ex].source.clone()).collect();
            let targets: Vec<Vec<usize>> = missing.iter().map(|&i| seqs[i].target.clone()).collect();
            let sig = teacher_signal(teacher, &sources, &targets, kd, None)?;
            let t = targets.iter().map(Vec::len).max().unwrap_or(0);
            for (b, &i) in missing.iter().enumerate() {
                let len = seqs[i].target.len();
                let rows = sig.logits[b * t * v..(b * t + len) * v].to_vec();
                let cacheable = seqs[i].kind != Kind::Pt(Origin::Student);
                if cacheable && self.bytes + rows.len() * 8 <= self.cap {
                    self.bytes += rows.len() * 8;
                    self.map.insert((seqs[i].ex, seqs[i].target.clone()), rows.clone());
                }
                fresh.insert(i, rows);
            }
        }
        Ok((0..seqs.len())
            .map(|i| match fresh.remove(&i) {
                Some(r) => r,
                None => self.map[&(seqs[i].ex, seqs[i].target.clone())].clone(),
            })
            .collect())
    }
}

fn padded_teacher_logits(per_seq: &[Vec<f64>], t: usize, v: usize) -> Vec<f64> {
    let mut out = vec![0.0; per_seq.len() * t * v];
    for (b, rows) in per_seq.iter().enumerate() {
        out[b * t * v..b * t * v + rows.len()].copy_from_slice(rows);
    }
    out
}

fn weighted_mask(trace: &ForwardTrace, seqs: &[Seq]) -> Vec<f64> {
    let mut mask = trace.mask.clone();
    for (b, s) in seqs.iter().enumerate() {
        for m in &mut mask[b * trace.target_len..(b + 1) * trace.target_len] {
            *m *= s.weight;
        }
    }
    mask
}

struct Run<'a> {
    examples: &'a [ParallelExample],
    recipe: &'a Recipe,
    ctx: TrainContext<'a>,
    cache: TeacherCache,
    scaler: RelationScaler,
    rel_heads: Option<usize>,
    audit: Audit,
}

impl Run<'_> {
    fn pt_seq(&self, ex: usize, epoch: usize, pts: PtUse, weight: f64) -> Result<Seq> {
        let cache = self.ctx.pts.ok_or_else(|| Error::MissingArtifact("PT cache".into()))?;
        let id = &self.examples[ex].id;
        let set = cache
            .get(id, pts.origin, pts.method)
            .ok_or_else(|| Error::MissingArtifact(format!("no {:?}/{:?} PTs for `{id}`", pts.origin, pts.method)))?;
        let k = pts.count.map_or(set.len(), |c| c.min(set.len()));
        let pt = &set[epoch % k];
        Ok(Seq { ex, target: pt.tokens.clone(), kind: Kind::Pt(pts.origin), weight, pt_index: pt.index })
    }

    /// Sequences for one update group. `student` holds this update's on-the-fly PTs.
    fn sequences(&self, group: &[usize], epoch: usize, student: &HashMap<usize, Vec<usize>>, use_student: bool) -> Result<Vec<Vec<Seq>>> {
        let r = self.recipe;
        let (wt, ws) = match (r.student_pts, self.ctx.kd.joint_mode) {
            (StudentPts::Joint, JointMode::Weighted) => (self.ctx.kd.alpha, 1.0 - self.ctx.kd.alpha),
            _ => (1.0, 1.0),
        };
        group
            .iter()
            .map(|&ex| {
                let mut out = Vec::new();
                let e = &self.examples[ex];
                if r.gold {
                    if let Some(t) = &e.target {
                        out.push(Seq { ex, target: t.clone(), kind: Kind::Gold, weight: 1.0, pt_index: 0 });
                    }
                }
                let student_seq = |w: f64| Seq { ex, target: student[&ex].clone(), kind: Kind::Pt(Origin::Student), weight: w, pt_index: 0 };
                match r.student_pts {
                    StudentPts::Only => out.push(student_seq(1.0)),
                    StudentPts::Joint => match self.ctx.kd.joint_mode {
                        JointMode::Alternate if use_student => out.push(student_seq(1.0)),
                        JointMode::Alternate => out.push(self.pt_seq(ex, epoch, r.pts.expect("validated"), 1.0)?),
                        JointMode::Weighted => {
                            if wt > 0.0 {
                                out.push(self.pt_seq(ex, epoch, r.pts.expect("validated"), wt)?);
                            }
                            if ws > 0.0 {
                                out.push(student_seq(ws));
                            }
                        }
                    },
                    StudentPts::None => {
                        if let Some(p) = r.pts {
                            out.push(self.pt_seq(ex, epoch, p, 1.0)?);
                        }
                    }
                }
                Ok(out)
            })
            .collect()
    }

    fn record(&mut self, seqs: &[Seq]) {
        for s in seqs {
            match s.kind {
                Kind::Gold => {
                    let e = &self.examples[s.ex];
                    if e.is_labeled() {
                        self.audit.gold_terms += 1;
                        self.audit.gold_ids.insert(e.id.clone());
                    } else {
                        self.audit.gold_terms_unlabeled += 1;
                    }
                }
                Kind::Pt(Origin::Teacher) => self.audit.teacher_pt_terms += 1,
                Kind::Pt(Origin::External) => self.audit.external_pt_terms += 1,
                Kind::Pt(Origin::Student) => self.audit.student_pt_terms += 1,
            }
        }
    }

    /// Loss over one micro-batch, already divided by `scale`.
    fn micro_batch_grads(&mut self, student: &Seq2SeqModel, seqs: &[Seq], scale: f64, rng: &mut ChaCha8Rng, noise_seed: u64) -> Result<(f64, crate::tensor::Gradients)> {
        self.record(seqs);
        let sources: Vec<Vec<usize>> = seqs.iter().map(|s| self.examples[s.ex].source.clone()).collect();
        let targets: Vec<Vec<usize>> = seqs.iter().map(|s| s.target.clone()).collect();
        let v = student.config().vocab_size;
        let objective = self.recipe.objective;
        let teacher_rows = if self.recipe.needs_teacher() && objective != Objective::AttRel {
            let teacher = self.ctx.teacher.ok_or_else(|| Error::MissingArtifact("teacher model".into()))?;
            Some(self.cache.logits(teacher, self.examples, seqs, self.ctx.kd)?)
        } else {
            None
        };
        let att_sig = if objective == Objective::AttRel {
            let teacher = self.ctx.teacher.ok_or_else(|| Error::MissingArtifact("teacher model".into()))?;
            Some(teacher_signal(teacher, &sources, &targets, self.ctx.kd, self.rel_heads)?)
        } else {
            None
        };
        let mut g = Graph::new();
        let trace = student.forward(&mut g, &sources, &targets, true, rng)?;
        let mask = weighted_mask(&trace, seqs);
        let external = matches!(self.recipe.pts, Some(PtUse { origin: Origin::External, .. }));
        let loss: Var = match objective {
            Objective::Finetune => g.cross_entropy(trace.logits, &trace.targets, &mask)?,
            _ if external => {
                let proj = self.ctx.projections.ok_or_else(|| Error::MissingArtifact("cross-tokenizer projections".into()))?;
                let rows: Vec<Vec<ProjectedDistribution>> = seqs
                    .iter()
                    .map(|s| {
                        proj.get(&(self.examples[s.ex].id.clone(), s.pt_index))
                            .cloned()
                            .ok_or_else(|| Error::MissingArtifact(format!("projection for `{}`", self.examples[s.ex].id)))
                    })
                    .collect::<Result<_>>()?;
                cross_tokenizer_logits_kd(&mut g, &trace, &rows)?
            }
            Objective::Logits | Objective::Noisy => {
                let tl = padded_teacher_logits(teacher_rows.as_ref().expect("teacher rows"), trace.target_len, v);
                let mut weighted = trace.clone();
                weighted.mask = mask;
                if objective == Objective::Noisy {
                    noisy_kd_loss(&mut g, &weighted, &tl, self.ctx.kd.noise_sigma, noise_seed)?
                } else {
                    logits_kd_loss(&mut g, &weighted, &tl)?
                }
            }
            Objective::AttRel => {
                let sig = att_sig.expect("signal");
                let lk = logits_kd_loss(&mut g, &trace, &sig.logits)?;
                let heads = self.rel_heads.expect("relation heads");
                let lr = att_rel_kd_loss(&mut g, &trace, &sig.relations, heads, &mut self.scaler)?;
                g.add(lk, lr)?
            }
        };
        let value = g.scalar_value(loss);
        let scaled = g.scale(loss, scale)?;
        let grads = g.backward(scaled)?;
        Ok((value, grads))
    }
}

/// Trains `student` under `recipe` with early stopping on the dev metric and
/// returns the best evaluated parameters.
pub fn train(
    student: Seq2SeqModel,
    train_set: &[ParallelExample],
    dev: &[ParallelExample],
    recipe: &Recipe,
    ctx: TrainContext<'_>,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    recipe.validate()?;
    ctx.kd.validate()?;
    let started = Instant::now();
    let members: Vec<usize> = (0..train_set.len())
        .filter(|&i| {
            let e = &train_set[i];
            (e.is_labeled() && (recipe.gold || recipe.pts.is_some() || recipe.student_pts != StudentPts::None)) || (!e.is_labeled() && recipe.unlabeled)
        })
        .collect();
    if members.is_empty() {
        return Err(Error::InvalidArgument("no training examples match the recipe".into()));
    }
    let dev = &dev[..dev.len().min(cfg.max_dev_examples)];
    let updates_per_epoch = members.len().div_ceil(cfg.examples_per_update);
    let total = updates_per_epoch * cfg.max_epochs;
    let mut opt_cfg = cfg.optimizer.clone();
    opt_cfg.total_steps = total;
    opt_cfg.warmup_steps = (cfg.warmup_fraction * total as f64).round() as usize;
    let mut opt = AdamW::new(opt_cfg)?;
    let rel_heads = match (recipe.objective, ctx.teacher) {
        (Objective::AttRel, Some(t)) => Some(ctx.kd.relation_heads.unwrap_or_else(|| relation_heads(t.config().heads, student.config().heads))),
        _ => None,
    };
    let mut run = Run {
        examples: train_set,
        recipe,
        ctx,
        cache: TeacherCache { map: HashMap::new(), bytes: 0, cap: cfg.teacher_cache_bytes },
        scaler: RelationScaler::default(),
        rel_heads,
        audit: Audit::default(),
    };
    let mut model = student;
    model.params_mut().set_trainable(true);
    model.params_mut().zero_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = TrainState { step: 0, epoch: 0, best_dev_score: None, best_step: 0, best_checkpoint_path: None, evals_since_improvement: 0 };
    let mut best: Option<ParamStore> = None;
    let mut history = Vec::new();
    let mut snapshots = Vec::new();
    let patience = cfg.patience_epochs * cfg.evals_per_epoch;
    let eval_points: Vec<usize> = (1..=cfg.evals_per_epoch)
        .map(|k| (k * updates_per_epoch).div_ceil(cfg.evals_per_epoch).max(1))
        .collect();
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 0..cfg.max_epochs {
        state.epoch = epoch;
        let mut order = members.clone();
        order.shuffle(&mut rng);
        for (u, group) in order.chunks(cfg.examples_per_update).enumerate() {
            let use_student = match recipe.student_pts {
                StudentPts::None => false,
                StudentPts::Only => true,
                StudentPts::Joint => match ctx.kd.joint_mode {
                    JointMode::Alternate => rng.random_bool(ctx.kd.student_pt_fraction),
                    JointMode::Weighted => ctx.kd.alpha < 1.0,
                },
            };
            let mut student_pts = HashMap::new();
            if use_student {
                let exs: Vec<ParallelExample> = group.iter().map(|&i| train_set[i].clone()).collect();
                let mut dc = ctx.decode.clone();
                dc.seed = example_seed(cfg.seed, "student-pts");
                for (&i, pt) in group.iter().zip(generate_student_pts(&model, &exs, &dc, state.step as u64)?) {
                    student_pts.insert(i, pt.tokens);
                }
            }
            let per_example = run.sequences(group, epoch, &student_pts, use_student)?;
            let scale = 1.0 / group.len() as f64;
            let mut loss_sum = 0.0;
            for (mb, chunk) in per_example.chunks(cfg.micro_batch).enumerate() {
                let seqs: Vec<Seq> = chunk.iter().flatten().cloned().collect();
                if seqs.is_empty() {
                    continue;
                }
                let noise_seed = cfg.seed ^ ((state.step as u64) << 16) ^ mb as u64;
                let (value, grads) = run.micro_batch_grads(&model, &seqs, scale, &mut rng, noise_seed)?;
                loss_sum += value;
                model.params_mut().accumulate(&grads);
            }
            state.step += 1;
            opt.step(model.params_mut(), state.step)?;
            debug!("epoch {epoch} step {} loss/example {:.4}", state.step, loss_sum * scale);

            if eval_points.contains(&(u + 1)) {
                let score = dev_score(&model, dev, cfg.dev_metric, ctx.decode, cfg.eval_batch)?;
                history.push(EvalRecord { step: state.step, epoch, score });
                if cfg.keep_snapshots {
                    snapshots.push((state.step, model.clone()));
                }
                let improved = state.best_dev_score.is_none_or(|b| cfg.dev_metric.better(score, b));
                if improved {
                    state.best_dev_score = Some(score);
                    state.best_step = state.step;
                    state.evals_since_improvement = 0;
                    best = Some(model.params().clone());
                    if let Some(dir) = &cfg.checkpoint_dir {
                        std::fs::create_dir_all(dir)?;
                        let path = dir.join("best.ckpt");
                        model.save(&path)?;
                        state.best_checkpoint_path = Some(path);
                    }
                } else {
                    state.evals_since_improvement += 1;
                }
                info!(
                    "epoch {epoch} step {} dev {} {score:.4} (best {:.4} @ {})",
                    state.step,
                    cfg.dev_metric.as_str(),
                    state.best_dev_score.unwrap_or(f64::NAN),
                    state.best_step
                );
                if state.evals_since_improvement >= patience && patience > 0 {
                    stop = StopReason::Patience;
                    break 'epochs;
                }
                if cfg.time_budget_secs.is_some_and(|b| started.elapsed().as_secs_f64() > b) {
                    stop = StopReason::TimeBudget;
                    break 'epochs;
                }
            }
        }
    }
    let params = best.ok_or_else(|| Error::InvalidArgument("training ended before any evaluation".into()))?;
    let mut best_model = Seq2SeqModel::from_params(model.config().clone(), params)?;
    best_model.params_mut().zero_grad();
    Ok(TrainResult {
        model: best_model,
        state,
        history,
        stop,
        audit: run.audit,
        seconds: started.elapsed().as_secs_f64(),
        snapshots,
    })
}

/// Where the final checkpoint of a KD run came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selected {
    Distillation,
    PostFinetune,
}

pub struct KdOutcome {
    pub model: Seq2SeqModel,
    pub score: f64,
    pub selected: Selected,
    pub kd: TrainResult,
    pub post: Option<TrainResult>,
}

/// Distills, then fine-tunes the best checkpoint on ground truth for
/// `post_finetune_epochs` and keeps whichever scores better on dev.
pub fn train_with_post_finetune(
    student: Seq2SeqModel,
    train_set: &[ParallelExample],
    dev: &[ParallelExample],
    recipe: &Recipe,
    ctx: TrainContext<'_>,
    cfg: &TrainConfig,
) -> Result<KdOutcome> {
    let kd = train(student, train_set, dev, recipe, ctx, cfg)?;
    let kd_score = kd.best_score();
    let labeled = train_set.iter().any(ParallelExample::is_labeled);
    if cfg.post_finetune_epochs == 0 || !labeled {
        return Ok(KdOutcome { model: kd.model.clone(), score: kd_score, selected: Selected::Distillation, kd, post: None });
    }
    let post_cfg = TrainConfig {
        max_epochs: cfg.post_finetune_epochs,
        patience_epochs: cfg.post_finetune_epochs,
        checkpoint_dir: cfg.checkpoint_dir.as_ref().map(|d| d.join("post")),
        seed: cfg.seed ^ 0x5eed,
        ..cfg.clone()
    };
    let post = train(kd.model.clone(), train_set, dev, &Recipe::finetune(), ctx, &post_cfg)?;
    let (model, score, selected) = if cfg.dev_metric.better(post.best_score(), kd_score) {
        (post.model.clone(), post.best_score(), Selected::PostFinetune)
    } else {
        (kd.model.clone(), kd_score, Selected::Distillation)
    };
    Ok(KdOutcome { model, score, selected, kd, post: Some(post) })
}
