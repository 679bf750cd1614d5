//! Dense tensors, reverse-mode autodiff, losses, optimizer, and checkpoint I/O.

mod checkpoint;
mod graph;
pub mod kernels;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};
pub use graph::{Gradients, Graph, ParamStore, SupportRow, Tensor, Var};
pub use optim::{AdamW, OptimizerConfig};

use crate::error::{Error, Result};

/// Log-probabilities over a vocabulary at one decoding position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    logprobs: Vec<f64>,
}

impl TokenDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut logprobs = logits.to_vec();
        kernels::log_softmax_row(&mut logprobs);
        Self { logprobs }
    }

    /// Builds a distribution from probabilities that must sum to one (within 1e-9).
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 || probs.iter().any(|p| *p < 0.0) {
            return Err(Error::InvalidArgument(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(Self { logprobs: probs.iter().map(|p| p.ln()).collect() })
    }

    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logprobs.iter().map(|l| l.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        -self
            .logprobs
            .iter()
            .filter(|l| l.is_finite())
            .map(|l| l.exp() * l)
            .sum::<f64>()
    }
}

/// `KL(p || q) = sum_i p_i (ln p_i - ln q_i)`, with `0 ln 0 := 0`.
pub fn kl_divergence(p: &TokenDistribution, q: &TokenDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("vocabulary sizes differ: {} vs {}", p.len(), q.len())));
    }
    Ok(p.logprobs
        .iter()
        .zip(&q.logprobs)
        .filter(|(lp, _)| lp.is_finite())
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum())
}

/// Summed negative log-likelihood of `targets` under `logits` (`[len, V]`).
///
/// `mask[i] == 0` drops position `i`. Targets may be shorter than the logits;
/// only the leading rows are scored.
pub fn nll(graph: &mut Graph<'_>, logits: Var, targets: &[usize], mask: &[f64]) -> Result<Var> {
    let rows = graph.shape(logits)[0];
    if targets.len() > rows {
        return Err(Error::Shape(format!("{} targets for {rows} logit rows", targets.len())));
    }
    if mask.len() != targets.len() {
        return Err(Error::Shape("mask length differs from target length".into()));
    }
    let logits = if targets.len() < rows {
        let keep: Vec<usize> = (0..targets.len()).collect();
        graph.select_rows(logits, &keep)?
    } else {
        logits
    };
    graph.cross_entropy(logits, targets, mask)
}

/// Per-token mean NLL; `exp` of this is the perplexity.
pub fn mean_nll(graph: &mut Graph<'_>, logits: Var, targets: &[usize], mask: &[f64]) -> Result<Var> {
    let count: f64 = mask.iter().sum();
    let total = nll(graph, logits, targets, mask)?;
    graph.scale(total, 1.0 / count.max(1.0))
}

#[cfg(test)]
mod tests;
