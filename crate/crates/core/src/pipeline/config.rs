//! Experiment configuration: one TOML file, every field overridable with
//! `key.path=value`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::decoding::{DecodeConfig, HIGH_TEMPERATURE};
use crate::error::{Error, Result};
use crate::model::{Arch, ModelConfig};
use crate::objectives::KDConfig;
use crate::pipeline::stages::Condition;
use crate::pipeline::trainer::TrainConfig;

/// Architecture without the vocabulary, which comes from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub arch: Arch,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Defaults to 2 * d_model.
    pub d_ff: Option<usize>,
    pub dropout: f64,
    pub max_len: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::ed(2, 2, 64, 2)
    }
}

impl ModelSpec {
    pub fn ed(encoder_layers: usize, decoder_layers: usize, d_model: usize, heads: usize) -> Self {
        Self {
            arch: Arch::EncoderDecoder,
            encoder_layers,
            decoder_layers,
            d_model,
            heads,
            d_ff: None,
            dropout: 0.1,
            max_len: 32,
            tie_embeddings: true,
        }
    }

    pub fn build(&self, vocab_size: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            arch: self.arch,
            encoder_layers: if self.arch == Arch::DecoderOnly { 0 } else { self.encoder_layers },
            decoder_layers: self.decoder_layers,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff.unwrap_or(2 * self.d_model),
            vocab_size,
            max_len: self.max_len,
            dropout: self.dropout,
            tie_embeddings: self.tie_embeddings,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Decoder-only counterpart with as many layers as this model has in total.
    pub fn as_decoder_only(&self) -> Self {
        Self { arch: Arch::DecoderOnly, encoder_layers: 0, decoder_layers: self.encoder_layers + self.decoder_layers, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PtSettings {
    pub beam_k: usize,
    pub num_samples: usize,
    pub nucleus_p: f64,
    pub high_temperature: f64,
    pub batch_size: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for PtSettings {
    fn default() -> Self {
        Self { beam_k: 16, num_samples: 48, nucleus_p: 0.95, high_temperature: HIGH_TEMPERATURE, batch_size: 64, threads: 1, seed: 17 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileSettings {
    pub warmups: usize,
    pub runs: usize,
    pub memory_budget_bytes: usize,
    pub throughput_examples: usize,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        Self { warmups: 10, runs: 100, memory_budget_bytes: 64 << 20, throughput_examples: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtremeConfig {
    /// Unlabeled inputs the external teacher is queried on.
    pub n_train: usize,
    /// Inputs held out as the PT-referenced dev set.
    pub n_dev: usize,
    /// PTs per input in the multi-PT conditions.
    pub multi_pts: usize,
    pub bpe_merges: usize,
    pub topk: usize,
    /// Student epochs here, in place of `train.max_epochs`; no early stopping.
    pub max_epochs: usize,
}

impl Default for ExtremeConfig {
    fn default() -> Self {
        Self { n_train: 4000, n_dev: 100, multi_pts: 5, bpe_merges: crate::align::BPE_MERGES, topk: crate::align::K_TOP, max_epochs: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub workdir: PathBuf,
    pub seeds: Vec<u64>,
    pub data: DatasetSpec,
    pub teacher: ModelSpec,
    pub student: ModelSpec,
    pub teacher_train: TrainConfig,
    pub train: TrainConfig,
    pub kd: KDConfig,
    pub pts: PtSettings,
    /// Evaluation decoding; `max_len` also caps PT length.
    pub decode: DecodeConfig,
    pub profile: ProfileSettings,
    pub extreme: ExtremeConfig,
    /// Replaces the built-in stage manifest when present.
    pub manifest: Option<Vec<Condition>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("runs/default"),
            seeds: vec![1, 2, 3],
            data: DatasetSpec::default(),
            teacher: ModelSpec::ed(4, 4, 128, 4),
            student: ModelSpec::ed(2, 2, 64, 2),
            teacher_train: TrainConfig::default(),
            train: TrainConfig::default(),
            kd: KDConfig::default(),
            pts: PtSettings::default(),
            decode: DecodeConfig::greedy(16),
            profile: ProfileSettings::default(),
            extreme: ExtremeConfig::default(),
            manifest: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.teacher_train.validate()?;
        self.train.validate()?;
        self.kd.validate()?;
        self.decode.validate()?;
        if self.extreme.max_epochs == 0 {
            return Err(Error::Config("extreme.max_epochs must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    /// Reads `path` (or starts from defaults) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|_| Error::MissingArtifact(p.display().to_string()))?;
            let file = toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Overlays `top` onto `base`, descending into tables present in both.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets a dotted `key.path=value`; intermediate tables are created as needed.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_override() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let o = ExperimentConfig::load(
            None,
            &["train.max_epochs=7".into(), "train.patience_epochs=3".into(), "seeds=[4, 5]".into(), "data.task=\"arithmetic\"".into(), "train.optimizer.learning_rate=0.01".into()],
        )
        .unwrap();
        assert_eq!(o.train.max_epochs, 7);
        assert_eq!(o.seeds, vec![4, 5]);
        assert_eq!(o.train.optimizer.learning_rate, 0.01);
        assert!(ExperimentConfig::load(None, &["train.patience_epochs=500".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["nonsense".into()]).is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seeds = [9]\n[student]\nd_model = 32\n[teacher]\nheads = 8\n").unwrap();
        let cfg = ExperimentConfig::load(Some(&p), &[]).unwrap();
        assert_eq!(cfg.seeds, vec![9]);
        assert_eq!(cfg.student.d_model, 32);
        assert_eq!(cfg.student.heads, ModelSpec::default().heads);
        assert_eq!(cfg.teacher, ModelSpec { heads: 8, ..ModelSpec::ed(4, 4, 128, 4) });
    }
}
