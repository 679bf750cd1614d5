//! Workdir-backed runner: trains or reloads the artifacts each stage needs.
//!
//! Layout under `workdir`:
//! `data/`, `teacher.ckpt`, `teacher_dev.json`, `student_seed{S}.ckpt`,
//! `student_seed{S}_dev.json`, `pts/{method}.jsonl`, `stages/stage{N}.json`,
//! `extreme/external.jsonl`, `extreme/results.json`, `probe.json`, `profile.csv`.

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::align::{load_external, save_external, K_TOP};
use crate::data::{generate, Dataset};
use crate::error::Result;
use crate::metrics::MetricReport;
use crate::model::{Part, Seq2SeqModel};
use crate::pipeline::config::ExperimentConfig;
use crate::pipeline::extreme::{export_external, external_inputs, run_extreme, ExtremeResult};
use crate::pipeline::stages::{load_json, required_pt_methods, save_json, Condition, ConditionResult, Experiment, StudentInit};
use crate::profiler::{profile, write_csv, ComplexityReport, ProfileSpec};
use crate::pseudo_targets::{PtCache, PtMethod};

fn method_name(m: PtMethod) -> &'static str {
    match m {
        PtMethod::Beam => "beam",
        PtMethod::Sample => "sample",
        PtMethod::HSample => "h_sample",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub teacher_dev: MetricReport,
    pub results: Vec<ConditionResult>,
}

pub struct Study {
    pub exp: Experiment,
    pub dataset: Dataset,
    pub dir: PathBuf,
}

impl Study {
    /// Loads the dataset from `workdir/data`, generating it on first use.
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        let dir = cfg.workdir.clone();
        let data_dir = dir.join("data");
        let dataset = if data_dir.join("dev.jsonl").exists() {
            Dataset::load(&data_dir)?
        } else {
            let d = generate(&cfg.data)?;
            d.save(&data_dir)?;
            d
        };
        Self::with_dataset(cfg, dataset)
    }

    pub fn with_dataset(cfg: ExperimentConfig, dataset: Dataset) -> Result<Self> {
        let dir = cfg.workdir.clone();
        std::fs::create_dir_all(&dir)?;
        let exp = Experiment::new(cfg, &dataset)?;
        Ok(Self { exp, dataset, dir })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn cached_model(&self, ckpt: &Path, report: &Path, train: impl FnOnce() -> Result<Seq2SeqModel>) -> Result<(Seq2SeqModel, MetricReport)> {
        if ckpt.exists() && report.exists() {
            return Ok((Seq2SeqModel::load(ckpt)?, load_json(report)?));
        }
        let model = train()?;
        let dev = self.exp.evaluate(&model, &self.exp.dev)?;
        model.save(ckpt)?;
        save_json(report, &dev)?;
        Ok((model, dev))
    }

    /// The fine-tuned teacher (trained with the first seed) and its dev scores.
    pub fn teacher(&self) -> Result<(Seq2SeqModel, MetricReport)> {
        let seed = self.exp.cfg.seeds[0];
        self.cached_model(&self.path("teacher.ckpt"), &self.path("teacher_dev.json"), || {
            info!("training teacher");
            Ok(self.exp.train_teacher(seed)?.model)
        })
    }

    /// The fine-tuned student baseline for `seed`.
    pub fn student(&self, seed: u64) -> Result<(Seq2SeqModel, MetricReport)> {
        let ckpt = self.path(&format!("student_seed{seed}.ckpt"));
        let report = self.path(&format!("student_seed{seed}_dev.json"));
        self.cached_model(&ckpt, &report, || {
            info!("training student baseline, seed {seed}");
            Ok(self.exp.train_student(seed)?.model)
        })
    }

    /// Teacher PTs for `methods`, generated once per method and kept on disk.
    pub fn pts(&self, teacher: &Seq2SeqModel, methods: &[PtMethod]) -> Result<PtCache> {
        let mut cache = PtCache::new();
        for &m in methods {
            let path = self.path(&format!("pts/{}.jsonl", method_name(m)));
            let part = if path.exists() {
                PtCache::load(&path)?
            } else {
                let c = self.exp.generate_pts(teacher, &[m])?;
                std::fs::create_dir_all(path.parent().expect("has parent"))?;
                c.save(&path)?;
                c
            };
            cache.merge(part);
        }
        Ok(cache)
    }

    /// Runs `conditions` for every seed.
    pub fn run_conditions(&self, stage: u8, conditions: &[Condition]) -> Result<StageReport> {
        let needs_teacher = conditions
            .iter()
            .any(|c| c.recipe.needs_teacher() || matches!(c.init, StudentInit::PruneTeacherEncoder | StudentInit::PruneTeacherDecoder));
        let (teacher, teacher_dev) = self.teacher()?;
        let refs: Vec<&Condition> = conditions.iter().collect();
        let methods = required_pt_methods(&refs);
        let pts = if methods.is_empty() { None } else { Some(self.pts(&teacher, &methods)?) };
        let mut results = Vec::new();
        for &seed in &self.exp.cfg.seeds {
            let (_, baseline) = self.student(seed)?;
            for c in conditions {
                let t = needs_teacher.then_some(&teacher);
                let (r, _) = self.exp.run_condition(c, seed, t, pts.as_ref(), Some(&baseline), Some(&teacher_dev))?;
                info!("stage {stage} `{}` seed {seed}: dev bleu {:.4}", r.name, r.dev.bleu);
                results.push(r);
            }
        }
        Ok(StageReport { stage, teacher_dev, results })
    }

    pub fn run_stage(&self, stage: u8) -> Result<StageReport> {
        let report = self.run_conditions(stage, &self.exp.stage(stage)?)?;
        save_json(&self.path(&format!("stages/stage{stage}.json")), &report)?;
        Ok(report)
    }

    pub fn load_stage(&self, stage: u8) -> Result<StageReport> {
        load_json(&self.path(&format!("stages/stage{stage}.json")))
    }

    /// Writes the canned external-teacher file from the desk teacher's samples.
    pub fn export_external(&self, teacher: &Seq2SeqModel) -> Result<PathBuf> {
        let e = &self.exp.cfg.extreme;
        let inputs = external_inputs(&self.dataset, &self.exp.vocab, e.n_train, e.n_dev)?;
        let mut pt = self.exp.pt_config(PtMethod::Sample);
        pt.decode.num_samples = e.multi_pts;
        pt.topk = e.topk.min(K_TOP);
        let records = export_external(teacher, &self.exp.vocab, &inputs, &pt)?;
        let path = self.path("extreme/external.jsonl");
        std::fs::create_dir_all(path.parent().expect("has parent"))?;
        save_external(&path, &records)?;
        Ok(path)
    }

    /// Runs the extreme grid from `external` (exported from the teacher when absent).
    pub fn run_extreme(&self, external: Option<&Path>) -> Result<Vec<ExtremeResult>> {
        let path = match external {
            Some(p) => p.to_path_buf(),
            None => {
                let p = self.path("extreme/external.jsonl");
                if p.exists() {
                    p
                } else {
                    let (teacher, _) = self.teacher()?;
                    self.export_external(&teacher)?
                }
            }
        };
        let records = load_external(&path)?;
        let results = run_extreme(&self.exp.cfg, &records, &self.dataset)?;
        save_json(&self.path("extreme/results.json"), &results)?;
        Ok(results)
    }

    /// Cost, latency and throughput of the teacher, its two pruned variants and
    /// the first seed's student, on the longest dev source with n = m.
    pub fn profile(&self) -> Result<Vec<ComplexityReport>> {
        let (teacher, _) = self.teacher()?;
        let (student, _) = self.student(self.exp.cfg.seeds[0])?;
        let models = [
            ("teacher", teacher.clone()),
            ("prune-enc", teacher.prune_layers(Part::Encoder)?),
            ("prune-dec", teacher.prune_layers(Part::Decoder)?),
            ("student", student),
        ];
        let source = self.exp.dev.iter().map(|e| &e.source).max_by_key(|s| s.len()).expect("dev set is non-empty").clone();
        let p = &self.exp.cfg.profile;
        let sources: Vec<Vec<usize>> = self.exp.dev.iter().cycle().take(p.throughput_examples).map(|e| e.source.clone()).collect();
        let mut rows = Vec::new();
        for (name, model) in &models {
            let spec = ProfileSpec {
                name,
                source: &source,
                n: source.len(),
                throughput_sources: &sources,
                memory_budget: p.memory_budget_bytes,
                warmups: p.warmups,
                runs: p.runs,
            };
            rows.push(profile(model, &spec)?);
        }
        let f = std::fs::File::create(self.path("profile.csv"))?;
        write_csv(f, &rows)?;
        Ok(rows)
    }
}
