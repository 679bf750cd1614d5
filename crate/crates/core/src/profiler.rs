//! Inference cost: closed-form operation counts, instrumented MAC counts,
//! wall-clock latency and batch throughput.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoding::greedy;
use crate::error::{Error, Result};
use crate::model::infer::{DecodeState, IncrementalDecoder};
use crate::model::{Arch, ModelConfig, Seq2SeqModel};
use crate::tensor::{kernels, Graph};

pub const WARMUP_RUNS: usize = 10;
pub const MEASURED_RUNS: usize = 100;

/// Attention-cell units: ED `m^2 E + n(m+n) D`, DO `m^2 D + n(m+n) D`.
pub fn theoretical_cost(cfg: &ModelConfig, m: u64, n: u64) -> u64 {
    let dec = n * (m + n) * cfg.decoder_layers as u64;
    match cfg.arch {
        Arch::EncoderDecoder => m * m * cfg.encoder_layers as u64 + dec,
        Arch::DecoderOnly => m * m * cfg.decoder_layers as u64 + dec,
    }
}

/// Cell units scaled to multiply-accumulates by the `2 d_model` per-cell
/// constant (one score and one weighted value per cell).
pub fn scaled_cost(cfg: &ModelConfig, m: u64, n: u64) -> u64 {
    2 * cfg.d_model as u64 * theoretical_cost(cfg, m, n)
}

/// Multiply-accumulates of one teacher-forced forward pass over a source of
/// length `m` and a target of length `n`: projections, attention and FFN of
/// every layer plus the output projection.
pub fn forward_macs(cfg: &ModelConfig, m: u64, n: u64) -> u64 {
    let (d, f, v) = (cfg.d_model as u64, cfg.d_ff as u64, cfg.vocab_size as u64);
    let out = n * d * v;
    match cfg.arch {
        Arch::EncoderDecoder => {
            let enc = 4 * m * d * d + 2 * m * m * d + 2 * m * d * f;
            let dec = 4 * n * d * d + 2 * n * n * d + 2 * n * d * d + 2 * m * d * d + 2 * n * m * d + 2 * n * d * f;
            cfg.encoder_layers as u64 * enc + cfg.decoder_layers as u64 * dec + out
        }
        Arch::DecoderOnly => {
            let t = m + n;
            let layer = 4 * t * d * d + 2 * t * t * d + 2 * t * d * f;
            cfg.decoder_layers as u64 * layer + out
        }
    }
}

/// MACs actually executed by one forward pass with target length `n`.
pub fn instrumented_forward_macs(model: &Seq2SeqModel, source: &[usize], n: usize) -> Result<u64> {
    let target = vec![crate::vocab::EOS; n];
    let mut g = Graph::no_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    kernels::start_mac_count();
    let r = model.forward(&mut g, &[source.to_vec()], &[target], false, &mut rng);
    let macs = kernels::stop_mac_count();
    r.map(|_| macs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub sd_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: Vec<f64>) -> Self {
        let k = samples_ms.len() as f64;
        let mean_ms = samples_ms.iter().sum::<f64>() / k;
        let var = if samples_ms.len() > 1 {
            samples_ms.iter().map(|x| (x - mean_ms).powi(2)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        Self { samples_ms, mean_ms, sd_ms: var.sqrt() }
    }

    pub fn cv(&self) -> f64 {
        self.sd_ms / self.mean_ms
    }
}

/// Welch's t statistic for `mean(a) - mean(b)`.
pub fn welch_t(a: &LatencyStats, b: &LatencyStats) -> f64 {
    let va = a.sd_ms.powi(2) / a.samples_ms.len() as f64;
    let vb = b.sd_ms.powi(2) / b.samples_ms.len() as f64;
    (a.mean_ms - b.mean_ms) / (va + vb).sqrt()
}

/// One-sided 95% critical value of the normal approximation, used with >= 30 runs per side.
pub const Z_95: f64 = 1.6449;

/// True when `a` is faster than `b` at 95% confidence.
pub fn significantly_faster(a: &LatencyStats, b: &LatencyStats) -> bool {
    welch_t(a, b) < -Z_95
}

/// Times `warmups + runs` calls and keeps the last `runs`.
pub fn time_runs<F: FnMut() -> Result<()>>(warmups: usize, runs: usize, mut f: F) -> Result<LatencyStats> {
    if runs == 0 {
        return Err(Error::InvalidArgument("at least one measured run is required".into()));
    }
    for _ in 0..warmups {
        f()?;
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        f()?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyStats::from_samples(samples))
}

/// Greedy generation of exactly `n` tokens (EOS does not stop it), so models
/// that would stop at different points are timed on equal work.
pub fn generate_fixed(dec: &IncrementalDecoder<'_>, source: &[usize], n: usize) -> Result<Vec<usize>> {
    let (mut state, mut logits) = dec.start(&[source.to_vec()])?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = argmax(&logits);
        out.push(t);
        if i + 1 < n {
            logits = dec.step(&mut state, &[t])?;
        }
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |b, (i, &x)| if x > row[b] { i } else { b })
}

/// Single-example latency of fixed-length generation.
pub fn measure_latency(model: &Seq2SeqModel, source: &[usize], n: usize, warmups: usize, runs: usize) -> Result<LatencyStats> {
    let dec = IncrementalDecoder::new(model);
    time_runs(warmups, runs, || generate_fixed(&dec, source, n).map(|_| ()))
}

/// Single-example latency of ordinary greedy decoding (stops at EOS).
pub fn measure_greedy_latency(model: &Seq2SeqModel, source: &[usize], max_len: usize, warmups: usize, runs: usize) -> Result<LatencyStats> {
    let dec = IncrementalDecoder::new(model);
    let src = [source.to_vec()];
    time_runs(warmups, runs, || greedy(&dec, &src, max_len).map(|_| ()))
}

/// Cache bytes of one generated example at full length.
pub fn bytes_per_example(cfg: &ModelConfig, m: usize, n: usize) -> usize {
    match cfg.arch {
        Arch::EncoderDecoder => DecodeState::bytes_per_row(cfg.decoder_layers, cfg.d_model, n, m),
        Arch::DecoderOnly => DecodeState::bytes_per_row(cfg.decoder_layers, cfg.d_model, m + 1 + n, 0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub batch_size: usize,
    pub examples: usize,
    pub seconds: f64,
    pub per_min: f64,
}

/// Largest batch whose decoding caches fit in `budget` bytes.
pub fn max_batch(cfg: &ModelConfig, m: usize, n: usize, budget: usize) -> Result<usize> {
    let per = bytes_per_example(cfg, m, n);
    if per > budget {
        return Err(Error::BudgetTooSmall { budget, needed: per });
    }
    Ok(budget / per)
}

/// Greedy-decodes `sources` in batches of `batch_size` and reports examples per minute.
pub fn throughput_at(model: &Seq2SeqModel, sources: &[Vec<usize>], max_len: usize, batch_size: usize) -> Result<ThroughputReport> {
    if sources.is_empty() || batch_size == 0 {
        return Err(Error::InvalidArgument("throughput needs sources and a positive batch size".into()));
    }
    let dec = IncrementalDecoder::new(model);
    greedy(&dec, &sources[..batch_size.min(sources.len())], max_len)?;
    let t0 = Instant::now();
    for chunk in sources.chunks(batch_size) {
        greedy(&dec, chunk, max_len)?;
    }
    let seconds = t0.elapsed().as_secs_f64();
    Ok(ThroughputReport { batch_size, examples: sources.len(), seconds, per_min: sources.len() as f64 * 60.0 / seconds })
}

/// Throughput at the largest batch allowed by `budget` bytes of decoding caches.
pub fn measure_throughput(model: &Seq2SeqModel, sources: &[Vec<usize>], max_len: usize, budget: usize) -> Result<ThroughputReport> {
    let m = sources.iter().map(Vec::len).max().unwrap_or(0);
    let batch = max_batch(model.config(), m, max_len, budget)?.min(sources.len().max(1));
    throughput_at(model, sources, max_len, batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub model: String,
    pub m: usize,
    pub n: usize,
    pub params: usize,
    pub cost_units: u64,
    pub flops_forward: u64,
    pub latency_ms: f64,
    pub latency_sd: f64,
    pub throughput_per_min: f64,
}

pub struct ProfileSpec<'a> {
    pub name: &'a str,
    pub source: &'a [usize],
    pub n: usize,
    pub throughput_sources: &'a [Vec<usize>],
    pub memory_budget: usize,
    pub warmups: usize,
    pub runs: usize,
}

pub fn profile(model: &Seq2SeqModel, spec: &ProfileSpec<'_>) -> Result<ComplexityReport> {
    let cfg = model.config();
    let (m, n) = (spec.source.len(), spec.n);
    let lat = measure_latency(model, spec.source, n, spec.warmups, spec.runs)?;
    let thr = measure_throughput(model, spec.throughput_sources, n, spec.memory_budget)?;
    Ok(ComplexityReport {
        model: spec.name.to_string(),
        m,
        n,
        params: model.num_parameters(),
        cost_units: theoretical_cost(cfg, m as u64, n as u64),
        flops_forward: 2 * forward_macs(cfg, m as u64, n as u64),
        latency_ms: lat.mean_ms,
        latency_sd: lat.sd_ms,
        throughput_per_min: thr.per_min,
    })
}

pub const CSV_HEADER: &str = "model,m,n,params,flops,latency_ms,latency_sd,throughput_per_min";

pub fn write_csv<W: Write>(mut w: W, rows: &[ComplexityReport]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{:.6},{:.6},{:.3}",
            r.model, r.m, r.n, r.params, r.flops_forward, r.latency_ms, r.latency_sd, r.throughput_per_min
        )?;
    }
    Ok(())
}
