//! Fixed-width text tables for stage, extreme, probe and eval reports.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::metrics::{MetricName, MetricReport};
use crate::pipeline::extreme::{by_condition, ExtremeResult};
use crate::pipeline::probe::ProbeRow;
use crate::pipeline::stages::{median_gap_closure, ConditionResult};
use crate::pipeline::study::StageReport;
use crate::pipeline::trainer::Selected;

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn pm(v: &[f64], scale: f64) -> String {
    let (m, s) = mean_sd(v);
    format!("{:.2}±{:.2}", m * scale, s * scale)
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{:+.3}", x))
}

/// Conditions in first-seen order.
fn grouped(results: &[ConditionResult]) -> Vec<(String, Vec<&ConditionResult>)> {
    let mut order: Vec<String> = Vec::new();
    let mut m: BTreeMap<String, Vec<&ConditionResult>> = BTreeMap::new();
    for r in results {
        if !m.contains_key(&r.name) {
            order.push(r.name.clone());
        }
        m.entry(r.name.clone()).or_default().push(r);
    }
    order.into_iter().map(|n| (n.clone(), m.remove(&n).expect("present"))).collect()
}

/// BLEU and ROUGE are shown ×100.
pub fn stage_table(report: &StageReport) -> String {
    let mut s = String::new();
    let t = &report.teacher_dev;
    writeln!(s, "stage {}  (teacher dev: BLEU {:.2}, ROUGE {:.2}, PPL {:.3})", report.stage, t.bleu * 100.0, t.rouge_avg * 100.0, t.ppl).unwrap();
    writeln!(
        s,
        "{:<16} {:>5} {:>13} {:>13} {:>13} {:>13} {:>9} {:>9} {:>5}",
        "condition", "seeds", "dev BLEU", "dev ROUGE", "dev PPL", "test BLEU", "gap BLEU", "gap ROUGE", "post"
    )
    .unwrap();
    for (name, rs) in grouped(&report.results) {
        let col = |f: &dyn Fn(&ConditionResult) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<f64>>();
        let owned: Vec<ConditionResult> = rs.iter().map(|r| (*r).clone()).collect();
        writeln!(
            s,
            "{:<16} {:>5} {:>13} {:>13} {:>13} {:>13} {:>9} {:>9} {:>5}",
            name,
            rs.len(),
            pm(&col(&|r| r.dev.bleu), 100.0),
            pm(&col(&|r| r.dev.rouge_avg), 100.0),
            pm(&col(&|r| r.dev.ppl), 1.0),
            pm(&col(&|r| r.test.bleu), 100.0),
            opt(median_gap_closure(&owned, MetricName::Bleu)),
            opt(median_gap_closure(&owned, MetricName::RougeAvg)),
            rs.iter().filter(|r| r.selected == Selected::PostFinetune).count(),
        )
        .unwrap();
    }
    s
}

pub fn extreme_table(results: &[ExtremeResult]) -> String {
    let mut s = String::new();
    writeln!(s, "{:<20} {:>4} {:>5} {:>13} {:>13} {:>8} {:>8}", "condition", "PTs", "seeds", "dev BLEU", "test BLEU", "labeled", "gold").unwrap();
    for (name, rs) in by_condition(results) {
        writeln!(
            s,
            "{:<20} {:>4} {:>5} {:>13} {:>13} {:>8} {:>8}",
            name,
            rs[0].pts_per_input,
            rs.len(),
            pm(&rs.iter().map(|r| r.dev.bleu).collect::<Vec<_>>(), 100.0),
            pm(&rs.iter().map(|r| r.test.bleu).collect::<Vec<_>>(), 100.0),
            rs.iter().map(|r| r.labeled_examples_consumed).sum::<usize>(),
            rs.iter().map(|r| r.audit.gold_terms + r.audit.gold_terms_unlabeled).sum::<usize>(),
        )
        .unwrap();
    }
    s
}

pub fn probe_table(rows: &[ProbeRow]) -> String {
    let mut s = String::new();
    writeln!(s, "{:<16} {:>5} {:>6} {:>12} {:>12} {:>8}", "checkpoint", "rho", "prefix", "student BLEU", "teacher BLEU", "delta").unwrap();
    for r in rows {
        writeln!(
            s,
            "{:<16} {:>5.2} {:>6} {:>12.2} {:>12.2} {:>+8.2}",
            r.checkpoint,
            r.rho,
            r.prefix_len,
            r.student_continuation.bleu * 100.0,
            r.teacher_continuation.bleu * 100.0,
            r.teacher_advantage_bleu() * 100.0
        )
        .unwrap();
    }
    s
}

/// One line per metric in a fixed order.
pub fn metric_table(label: &str, m: &MetricReport) -> String {
    let mut s = String::new();
    writeln!(s, "{label}").unwrap();
    for name in MetricName::ALL {
        writeln!(s, "  {:<8} {:>10.4}", name.as_str(), m.get(name)).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_sd_matches_hand_values() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_sd(&[7.0]), (7.0, 0.0));
        assert!(mean_sd(&[]).0.is_nan());
    }
}
