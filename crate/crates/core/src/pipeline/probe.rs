//! Exposure-bias probe: a student writes the first part of each output, then
//! either the student or the teacher finishes it.

use serde::{Deserialize, Serialize};

use crate::data::ParallelExample;
use crate::decoding::{continue_greedy, greedy};
use crate::error::{Error, Result};
use crate::metrics::{score_outputs, MetricReport};
use crate::model::infer::IncrementalDecoder;
use crate::model::Seq2SeqModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub checkpoint: String,
    pub rho: f64,
    pub prefix_len: usize,
    pub student_continuation: MetricReport,
    pub teacher_continuation: MetricReport,
}

impl ProbeRow {
    pub fn teacher_advantage_bleu(&self) -> f64 {
        self.teacher_continuation.bleu - self.student_continuation.bleu
    }
}

/// Student prefix length for a fraction `rho` of `max_len`.
pub fn prefix_len(rho: f64, max_len: usize) -> Result<usize> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidArgument(format!("prefix fraction {rho} outside (0, 1]")));
    }
    Ok((rho * max_len as f64).floor() as usize)
}

/// One row per checkpoint. Outputs are scored against the references of
/// `examples` (all must be labeled).
pub fn exposure_probe(
    teacher: &Seq2SeqModel,
    checkpoints: &[(String, &Seq2SeqModel)],
    examples: &[ParallelExample],
    rho: f64,
    max_len: usize,
    batch: usize,
) -> Result<Vec<ProbeRow>> {
    if checkpoints.len() < 2 {
        return Err(Error::InvalidArgument("the probe needs at least two student checkpoints".into()));
    }
    let k = prefix_len(rho, max_len)?;
    let refs: Vec<Vec<usize>> = examples
        .iter()
        .map(|e| e.target.clone().ok_or_else(|| Error::InvalidArgument(format!("probe example `{}` is unlabeled", e.id))))
        .collect::<Result<_>>()?;
    let sources: Vec<Vec<usize>> = examples.iter().map(|e| e.source.clone()).collect();
    let tdec = IncrementalDecoder::new(teacher);
    let mut rows = Vec::new();
    for (name, student) in checkpoints {
        let sdec = IncrementalDecoder::new(student);
        let mut by_student = Vec::with_capacity(sources.len());
        let mut by_teacher = Vec::with_capacity(sources.len());
        for chunk in sources.chunks(batch.max(1)) {
            let prefixes: Vec<Vec<usize>> = if k == 0 { vec![Vec::new(); chunk.len()] } else { greedy(&sdec, chunk, k)? };
            by_student.extend(continue_greedy(&sdec, chunk, &prefixes, max_len)?);
            by_teacher.extend(continue_greedy(&tdec, chunk, &prefixes, max_len)?);
        }
        rows.push(ProbeRow {
            checkpoint: name.clone(),
            rho,
            prefix_len: k,
            student_continuation: score_outputs(&by_student, &refs, f64::NAN)?,
            teacher_continuation: score_outputs(&by_teacher, &refs, f64::NAN)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate;
    use crate::decoding::DecodeConfig;
    use crate::model::ModelConfig;

    fn fixture() -> (Seq2SeqModel, Seq2SeqModel, Seq2SeqModel, Vec<ParallelExample>) {
        let cfg = ModelConfig::encoder_decoder((1, 1), 16, 2, 9, 12);
        let t = Seq2SeqModel::new(cfg.clone(), 1).unwrap();
        let a = Seq2SeqModel::new(cfg.clone(), 2).unwrap();
        let b = Seq2SeqModel::new(cfg, 3).unwrap();
        let ex = (0..6)
            .map(|i| ParallelExample { id: format!("e{i}"), source: vec![5 + i % 4, 6, 7], target: Some(vec![7, 6, 5 + i % 4, 2]) })
            .collect();
        (t, a, b, ex)
    }

    #[test]
    fn boundaries() {
        let (t, a, b, ex) = fixture();
        let cps = vec![("a".to_string(), &a), ("b".to_string(), &b)];
        // Tiny rho leaves no prefix: the teacher continuation is the teacher alone.
        let rows = exposure_probe(&t, &cps, &ex, 0.01, 8, 4).unwrap();
        let pure = evaluate(&t, &ex, &DecodeConfig::greedy(8), 4).unwrap();
        assert_eq!(rows[0].prefix_len, 0);
        assert_eq!(rows[0].teacher_continuation.bleu, pure.bleu);
        // rho = 1 leaves nothing to continue.
        for r in exposure_probe(&t, &cps, &ex, 1.0, 8, 4).unwrap() {
            assert_eq!(r.student_continuation.bleu, r.teacher_continuation.bleu);
            assert_eq!(r.student_continuation.rouge_avg, r.teacher_continuation.rouge_avg);
        }
        assert!(exposure_probe(&t, &cps, &ex, 0.0, 8, 4).is_err());
        assert!(exposure_probe(&t, &cps, &ex, 1.5, 8, 4).is_err());
        assert!(exposure_probe(&t, &cps[..1], &ex, 0.5, 8, 4).is_err());
    }
}
