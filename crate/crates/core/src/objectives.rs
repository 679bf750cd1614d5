//! Distillation losses.
//!
//! Teacher quantities enter the student graph as constants, computed in a
//! separate no-grad pass by [`teacher_signal`], so no loss can reach teacher
//! parameters. Every loss returned here is summed over positions and over the
//! examples of the batch; the trainer divides by the examples per update.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{attention_relations, ForwardTrace, Part, RelationKind, Seq2SeqModel};
use crate::tensor::{kernels, Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Finetune,
    Logits,
    Noisy,
    AttRel,
}

/// How Joint-Teaching mixes teacher and student PTs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointMode {
    /// Each update uses student PTs with probability `student_pt_fraction`, teacher PTs otherwise.
    Alternate,
    /// Every update evaluates `alpha * L(teacher PT) + (1 - alpha) * L(student PT)`.
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KDConfig {
    pub objective: Objective,
    pub alpha: f64,
    pub student_pt_fraction: f64,
    pub noise_sigma: f64,
    pub relation_layers: Vec<Part>,
    pub relation_kinds: Vec<RelationKind>,
    /// Defaults to gcd(teacher heads, student heads).
    pub relation_heads: Option<usize>,
    pub interpolate_ground_truth: bool,
    pub joint_mode: JointMode,
}

impl Default for KDConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Logits,
            alpha: 0.5,
            student_pt_fraction: 0.5,
            noise_sigma: 0.1,
            relation_layers: vec![Part::Encoder, Part::Decoder],
            relation_kinds: vec![RelationKind::QQ, RelationKind::KK, RelationKind::VV],
            relation_heads: None,
            interpolate_ground_truth: true,
            joint_mode: JointMode::Alternate,
        }
    }
}

impl KDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.student_pt_fraction) {
            return Err(Error::Config(format!("student_pt_fraction {} outside [0, 1]", self.student_pt_fraction)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn needs_teacher(&self) -> bool {
        self.objective != Objective::Finetune
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Common relation-head count for a teacher/student pair.
pub fn relation_heads(teacher_heads: usize, student_heads: usize) -> usize {
    gcd(teacher_heads, student_heads)
}

/// A teacher relation matrix for one (part, kind), as probabilities `[rows, len]`.
#[derive(Debug, Clone)]
pub struct RelationTarget {
    pub part: Part,
    pub kind: RelationKind,
    pub probs: Vec<f64>,
}

/// Constant teacher quantities for one batch.
#[derive(Debug, Clone)]
pub struct TeacherSignal {
    /// `[batch * target_len, V]`, same layout as the student logits.
    pub logits: Vec<f64>,
    pub relations: Vec<RelationTarget>,
}

fn last_layer(trace: &ForwardTrace, part: Part) -> Result<usize> {
    let n = match part {
        Part::Encoder => trace.encoder.len(),
        Part::Decoder => trace.decoder.len(),
    };
    n.checked_sub(1).ok_or_else(|| Error::InvalidArgument(format!("trace has no {part:?} layers")))
}

/// Teacher-forces `targets` through the frozen teacher. Relations are taken
/// from the last encoder/decoder layers when `relations` is `Some(heads)`.
pub fn teacher_signal(
    teacher: &Seq2SeqModel,
    sources: &[Vec<usize>],
    targets: &[Vec<usize>],
    cfg: &KDConfig,
    relations: Option<usize>,
) -> Result<TeacherSignal> {
    let mut g = Graph::no_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trace = teacher.forward(&mut g, sources, targets, false, &mut rng)?;
    let mut rel = Vec::new();
    if let Some(heads) = relations {
        for &part in &cfg.relation_layers {
            if part == Part::Encoder && trace.encoder.is_empty() {
                continue;
            }
            let layer = last_layer(&trace, part)?;
            for &kind in &cfg.relation_kinds {
                let r = attention_relations(&mut g, &trace, part, layer, kind, heads)?;
                let probs = g.value(r.log_probs).iter().map(|x| x.exp()).collect();
                rel.push(RelationTarget { part, kind, probs });
            }
        }
    }
    Ok(TeacherSignal { logits: g.value(trace.logits).to_vec(), relations: rel })
}

fn softmax_rows(logits: &[f64], v: usize) -> Vec<f64> {
    let mut p = logits.to_vec();
    for row in p.chunks_mut(v) {
        kernels::softmax_row(row);
    }
    p
}

/// `sum_i mask_i * KL(P_T(.|i) || P_S(.|i))` over every target row of the batch.
pub fn logits_kd_loss(g: &mut Graph<'_>, student: &ForwardTrace, teacher_logits: &[f64]) -> Result<Var> {
    let v = student.vocab_size(g);
    let rows = student.batch * student.target_len;
    if teacher_logits.len() != rows * v {
        return Err(Error::Shape(format!(
            "teacher logits hold {} values, student trace needs {rows} x {v}",
            teacher_logits.len()
        )));
    }
    g.kl_const_target(student.logits, softmax_rows(teacher_logits, v), &student.mask)
}

/// Logits KD against teacher logits perturbed by i.i.d. `N(0, sigma^2)` noise.
pub fn noisy_kd_loss(
    g: &mut Graph<'_>,
    student: &ForwardTrace,
    teacher_logits: &[f64],
    sigma: f64,
    seed: u64,
) -> Result<Var> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise sigma {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return logits_kd_loss(g, student, teacher_logits);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let noisy: Vec<f64> = teacher_logits.iter().map(|z| z + noise.sample(&mut rng)).collect();
    logits_kd_loss(g, student, &noisy)
}

/// Initial component values at or below this are left unscaled.
pub const SCALER_FLOOR: f64 = 1e-9;

/// Per-component weights fixed at the first evaluation so that each relation
/// component starts at magnitude 1.
#[derive(Debug, Clone, Default)]
pub struct RelationScaler {
    weights: BTreeMap<(Part, RelationKind), f64>,
}

impl RelationScaler {
    pub fn weight(&self, part: Part, kind: RelationKind) -> Option<f64> {
        self.weights.get(&(part, kind)).copied()
    }

    fn weight_or_init(&mut self, part: Part, kind: RelationKind, initial: f64) -> f64 {
        *self
            .weights
            .entry((part, kind))
            .or_insert_with(|| if initial > SCALER_FLOOR { 1.0 / initial } else { 1.0 })
    }
}

/// Scaled sum over components of `KL(teacher relation row || student relation row)`.
pub fn att_rel_kd_loss(
    g: &mut Graph<'_>,
    student: &ForwardTrace,
    teacher: &[RelationTarget],
    heads: usize,
    scaler: &mut RelationScaler,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for target in teacher {
        let layer = last_layer(student, target.part)?;
        let rel = attention_relations(g, student, target.part, layer, target.kind, heads)?;
        let shape = g.shape(rel.log_probs).to_vec();
        if shape[0] * shape[1] != target.probs.len() {
            return Err(Error::Shape(format!(
                "{:?}/{:?} relations: student {:?}, teacher {} values",
                target.part,
                target.kind,
                shape,
                target.probs.len()
            )));
        }
        let kl = g.kl_const_target(rel.log_probs, target.probs.clone(), &rel.row_weights)?;
        let w = scaler.weight_or_init(target.part, target.kind, g.scalar_value(kl));
        let term = g.scale(kl, w)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => g.constant(vec![], vec![0.0]),
    }
}

/// `loss(x, pt) + loss(x, y)` when the ground truth exists, `loss(x, pt)` otherwise.
pub fn interpolated_loss(g: &mut Graph<'_>, pt_loss: Option<Var>, ground_truth_loss: Option<Var>) -> Result<Var> {
    match (pt_loss, ground_truth_loss) {
        (Some(a), Some(b)) => g.add(a, b),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Err(Error::InvalidArgument("neither a pseudo-target nor a ground truth is available".into())),
    }
}

/// `alpha * L(x, teacher PT) + (1 - alpha) * L(x, student PT)`.
///
/// A side with zero weight may be absent; a weighted side may not.
pub fn joint_teaching_loss(
    g: &mut Graph<'_>,
    teacher_pt_loss: Option<Var>,
    student_pt_loss: Option<Var>,
    alpha: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let weighted = |g: &mut Graph<'_>, v: Option<Var>, w: f64, what: &str| -> Result<Option<Var>> {
        match (v, w > 0.0) {
            (Some(v), true) => Ok(Some(g.scale(v, w)?)),
            (None, true) => Err(Error::InvalidArgument(format!("missing teacher-scored loss on the {what} PT"))),
            (_, false) => Ok(None),
        }
    };
    let t = weighted(g, teacher_pt_loss, alpha, "teacher")?;
    let s = weighted(g, student_pt_loss, 1.0 - alpha, "student")?;
    match (t, s) {
        (Some(a), Some(b)) => g.add(a, b),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => unreachable!("alpha and 1 - alpha cannot both be zero"),
    }
}

/// Ground-truth NLL summed over the batch's target tokens.
pub fn nll_loss(g: &mut Graph<'_>, student: &ForwardTrace) -> Result<Var> {
    g.cross_entropy(student.logits, &student.targets, &student.mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(seed: u64, d: usize, heads: usize, layers: usize) -> Seq2SeqModel {
        let mut cfg = ModelConfig::encoder_decoder((layers, layers), d, heads, 14, 16);
        cfg.dropout = 0.0;
        Seq2SeqModel::new(cfg, seed).unwrap()
    }

    fn batch() -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        (vec![vec![5, 6, 7, 8], vec![9, 10]], vec![vec![11, 12, 2], vec![6, 2]])
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn copy_of_teacher_has_zero_losses() {
        let t = model(1, 8, 2, 2);
        let s = t.clone();
        let (src, tgt) = batch();
        let cfg = KDConfig::default();
        let sig = teacher_signal(&t, &src, &tgt, &cfg, Some(2)).unwrap();
        let mut g = Graph::new();
        let tr = s.forward(&mut g, &src, &tgt, false, &mut rng()).unwrap();
        let l = logits_kd_loss(&mut g, &tr, &sig.logits).unwrap();
        assert!(g.scalar_value(l).abs() < 1e-9);
        let mut scaler = RelationScaler::default();
        let r = att_rel_kd_loss(&mut g, &tr, &sig.relations, 2, &mut scaler).unwrap();
        assert!(g.scalar_value(r).abs() < 1e-9);
        assert_eq!(sig.relations.len(), 6);
    }

    #[test]
    fn single_position_kl_matches_closed_form() {
        // P_T = [0.5, 0.5], P_S = [0.25, 0.75]
        let mut g = Graph::new();
        let student = g.constant(vec![1, 2], vec![0.25f64.ln(), 0.75f64.ln()]).unwrap();
        let trace = ForwardTrace {
            logits: student,
            batch: 1,
            target_len: 1,
            targets: vec![0],
            mask: vec![1.0],
            encoder: vec![],
            decoder: vec![],
        };
        let l = logits_kd_loss(&mut g, &trace, &[0.0, 0.0]).unwrap();
        let oracle = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((g.scalar_value(l) - oracle).abs() < 1e-12);
        assert!((oracle - 0.14384).abs() < 1e-5);
        assert!(logits_kd_loss(&mut g, &trace, &[0.0; 3]).is_err());
    }

    #[test]
    fn masked_rows_do_not_contribute() {
        let t = model(1, 8, 2, 1);
        let s = model(2, 8, 2, 1);
        let (src, tgt) = batch();
        let sig = teacher_signal(&t, &src, &tgt, &KDConfig::default(), None).unwrap();
        let mut g = Graph::new();
        let tr = s.forward(&mut g, &src, &tgt, false, &mut rng()).unwrap();
        let full = logits_kd_loss(&mut g, &tr, &sig.logits).unwrap();
        let mut oracle = 0.0;
        let v = 14;
        for b in 0..2 {
            for i in 0..tgt[b].len() {
                let row = b * tr.target_len + i;
                let p = crate::tensor::TokenDistribution::from_logits(&sig.logits[row * v..(row + 1) * v]);
                let q = crate::tensor::TokenDistribution::from_logits(&g.value(tr.logits)[row * v..(row + 1) * v]);
                oracle += crate::tensor::kl_divergence(&p, &q).unwrap();
            }
        }
        assert!((g.scalar_value(full) - oracle).abs() < 1e-9);
    }

    #[test]
    fn noise_is_seeded_and_zero_sigma_is_exact() {
        let t = model(1, 8, 2, 1);
        let s = model(2, 8, 2, 1);
        let (src, tgt) = batch();
        let sig = teacher_signal(&t, &src, &tgt, &KDConfig::default(), None).unwrap();
        let mut g = Graph::new();
        let tr = s.forward(&mut g, &src, &tgt, false, &mut rng()).unwrap();
        let base = logits_kd_loss(&mut g, &tr, &sig.logits).unwrap();
        let zero = noisy_kd_loss(&mut g, &tr, &sig.logits, 0.0, 3).unwrap();
        assert_eq!(g.scalar_value(base), g.scalar_value(zero));
        let a = noisy_kd_loss(&mut g, &tr, &sig.logits, 0.1, 3).unwrap();
        let b = noisy_kd_loss(&mut g, &tr, &sig.logits, 0.1, 3).unwrap();
        assert_eq!(g.scalar_value(a), g.scalar_value(b));
        assert_ne!(g.scalar_value(a), g.scalar_value(base));
        assert!(noisy_kd_loss(&mut g, &tr, &sig.logits, -1.0, 3).is_err());
    }

    #[test]
    fn noisy_expectation_is_close_to_clean() {
        let t = model(1, 8, 2, 1);
        let s = model(2, 8, 2, 1);
        let (src, tgt) = batch();
        let sig = teacher_signal(&t, &src, &tgt, &KDConfig::default(), None).unwrap();
        let mut g = Graph::no_grad();
        let tr = s.forward(&mut g, &src, &tgt, false, &mut rng()).unwrap();
        let base = logits_kd_loss(&mut g, &tr, &sig.logits).unwrap();
        let base = g.scalar_value(base);
        let mean: f64 = (0..1000)
            .map(|seed| {
                let l = noisy_kd_loss(&mut g, &tr, &sig.logits, 0.1, seed).unwrap();
                g.scalar_value(l)
            })
            .sum::<f64>()
            / 1000.0;
        assert!((mean - base).abs() / base < 0.05, "mean {mean} base {base}");
    }

    #[test]
    fn relation_loss_matches_naive_double_loop() {
        let t = model(1, 16, 4, 2);
        let s = model(2, 8, 2, 1);
        let (src, tgt) = batch();
        let heads = relation_heads(4, 2);
        let cfg = KDConfig::default();
        let sig = teacher_signal(&t, &src, &tgt, &cfg, Some(heads)).unwrap();
        let mut g = Graph::new();
        let tr = s.forward(&mut g, &src, &tgt, false, &mut rng()).unwrap();
        let mut scaler = RelationScaler::default();
        let loss = att_rel_kd_loss(&mut g, &tr, &sig.relations, heads, &mut scaler).unwrap();
        // Naive oracle straight from the student's Q/K/V states.
        let mut oracle = 0.0;
        for target in &sig.relations {
            let lt = match target.part {
                Part::Encoder => tr.encoder.last().unwrap(),
                Part::Decoder => tr.decoder.last().unwrap(),
            };
            let states = g.value(match target.kind {
                RelationKind::QQ => lt.q,
                RelationKind::KK => lt.k,
                RelationKind::VV => lt.v,
            });
            let (len, d) = (lt.len, 8);
            let dr = d / heads;
            let mut comp = 0.0;
            for b in 0..lt.batch {
                for h in 0..heads {
                    for i in 0..len {
                        if !lt.valid[b * len + i] {
                            continue;
                        }
                        let mut scores = Vec::new();
                        let mut keys = Vec::new();
                        for j in 0..len {
                            if !lt.valid[b * len + j] || (lt.causal && j > i) {
                                continue;
                            }
                            let mut dot = 0.0;
                            for c in 0..dr {
                                dot += states[(b * len + i) * d + h * dr + c] * states[(b * len + j) * d + h * dr + c];
                            }
                            scores.push(dot / (dr as f64).sqrt());
                            keys.push(j);
                        }
                        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = scores.iter().map(|x| (x - max).exp()).sum();
                        let row = ((b * heads + h) * len + i) * len;
                        for (k, &j) in keys.iter().enumerate() {
                            let q = (scores[k] - max).exp() / z;
                            let p = target.probs[row + j];
                            if p > 0.0 {
                                comp += p * (p.ln() - q.ln());
                            }
                        }
                    }
                }
            }
            let w = scaler.weight(target.part, target.kind).unwrap();
            assert!((comp * w - 1.0).abs() < 1e-9);
            oracle += comp * w;
        }
        assert!((g.scalar_value(loss) - oracle).abs() < 1e-9);
    }

    #[test]
    fn relation_term_is_zero_for_single_positions() {
        let t = model(1, 16, 4, 1);
        let s = model(2, 8, 2, 1);
        let cfg = KDConfig { relation_layers: vec![Part::Encoder, Part::Decoder], ..KDConfig::default() };
        let src = vec![vec![5]];
        let tgt = vec![vec![2]];
        let sig = teacher_signal(&t, &src, &tgt, &cfg, Some(2)).unwrap();
        let mut g = Graph::new();
        let tr = s.forward(&mut g, &src, &tgt, false, &mut rng()).unwrap();
        let mut scaler = RelationScaler::default();
        let l = att_rel_kd_loss(&mut g, &tr, &sig.relations, 2, &mut scaler).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
    }

    #[test]
    fn interpolation_and_joint_teaching_arithmetic() {
        let mut g = Graph::new();
        let a = g.constant(vec![], vec![1.2]).unwrap();
        let b = g.constant(vec![], vec![0.8]).unwrap();
        let s = interpolated_loss(&mut g, Some(b), Some(a)).unwrap();
        assert!((g.scalar_value(s) - 2.0).abs() < 1e-12);
        let only = interpolated_loss(&mut g, Some(b), None).unwrap();
        assert_eq!(g.scalar_value(only), 0.8);
        assert!(interpolated_loss(&mut g, None, None).is_err());

        let lt = g.constant(vec![], vec![2.0]).unwrap();
        let ls = g.constant(vec![], vec![4.0]).unwrap();
        let j = joint_teaching_loss(&mut g, Some(lt), Some(ls), 0.5).unwrap();
        assert_eq!(g.scalar_value(j), 3.0);
        let j1 = joint_teaching_loss(&mut g, Some(lt), None, 1.0).unwrap();
        assert_eq!(g.scalar_value(j1), 2.0);
        let j0 = joint_teaching_loss(&mut g, None, Some(ls), 0.0).unwrap();
        assert_eq!(g.scalar_value(j0), 4.0);
        assert!(joint_teaching_loss(&mut g, Some(lt), None, 0.5).is_err());
    }

    #[test]
    fn losses_never_reach_the_teacher_and_match_finite_differences() {
        let t = model(1, 8, 2, 1);
        let mut s = model(2, 8, 2, 1);
        let (src, tgt) = batch();
        let cfg = KDConfig::default();
        let sig = teacher_signal(&t, &src, &tgt, &cfg, Some(2)).unwrap();
        let mut scaler = RelationScaler::default();
        let eval = |s: &Seq2SeqModel, scaler: &mut RelationScaler, grad: bool| {
            let mut g = if grad { Graph::new() } else { Graph::no_grad() };
            let tr = s.forward(&mut g, &src, &tgt, false, &mut rng()).unwrap();
            let a = logits_kd_loss(&mut g, &tr, &sig.logits).unwrap();
            let r = att_rel_kd_loss(&mut g, &tr, &sig.relations, 2, scaler).unwrap();
            let n = nll_loss(&mut g, &tr).unwrap();
            let ar = g.add(a, r).unwrap();
            let root = g.add(ar, n).unwrap();
            let value = g.scalar_value(root);
            let grads = if grad { Some(g.backward(root).unwrap()) } else { None };
            (value, grads)
        };
        let (_, grads) = eval(&s, &mut scaler, true);
        let grads = grads.unwrap();
        assert!(!grads.touches(t.params()));
        for name in ["embed.w", "encoder.0.self.q.w", "decoder.0.cross.k.w", "decoder.0.ff.w2"] {
            let idx = s.params().index_of(name).unwrap();
            let analytic = grads.param(s.params(), idx).unwrap().to_vec();
            for k in [0usize, 5, 17] {
                let h = 1e-5;
                s.params_mut().get_mut(name).unwrap().data_mut()[k] += h;
                let (up, _) = eval(&s, &mut scaler, false);
                s.params_mut().get_mut(name).unwrap().data_mut()[k] -= 2.0 * h;
                let (down, _) = eval(&s, &mut scaler, false);
                s.params_mut().get_mut(name).unwrap().data_mut()[k] += h;
                let fd = (up - down) / (2.0 * h);
                let err = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-3);
                assert!(err < 1e-5, "{name}[{k}] fd {fd} analytic {}", analytic[k]);
            }
        }
    }
}
