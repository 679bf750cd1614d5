use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use seqkd::align::{nw_align, NwScoring, OpKind};
use seqkd::data::{generate, Dataset};
use seqkd::model::Seq2SeqModel;
use seqkd::pipeline::config::ExperimentConfig;
use seqkd::pipeline::extreme::ExtremeResult;
use seqkd::pipeline::probe::{exposure_probe, ProbeRow};
use seqkd::pipeline::report::{extreme_table, metric_table, probe_table, stage_table};
use seqkd::pipeline::stages::{load_json, save_json};
use seqkd::pipeline::study::Study;
use seqkd::pipeline::trainer::TrainConfig;
use seqkd::pseudo_targets::PtMethod;
use seqkd::Result;

#[derive(Parser)]
#[command(name = "seqkd", version, about = "Knowledge distillation lab for small seq2seq transformers")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// TOML experiment config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set train.max_epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Log level (error, warn, info, debug).
    #[arg(long, default_value = "info", global = true)]
    log: String,
}

#[derive(Subcommand)]
enum Cmd {
    /// Dataset generation and checks.
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
    /// Fine-tune the teacher or a student baseline on labeled data.
    Train {
        #[arg(long, value_enum)]
        role: Role,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every condition of one stage for every seed.
    Distill {
        #[arg(long)]
        stage: u8,
    },
    /// Pseudo-target caches.
    Pts {
        #[command(subcommand)]
        cmd: PtsCmd,
    },
    /// Align two token sequences (space separated) and print the edit operations.
    Align {
        #[arg(long)]
        teacher: String,
        #[arg(long)]
        student: String,
    },
    /// Score a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cost, latency and throughput of teacher, pruned teachers and student.
    Profile,
    /// Student-prefix / teacher-continuation probe.
    ProbeExposure {
        #[arg(long, default_value_t = 0.5)]
        rho: f64,
        /// Student checkpoints; with fewer than two, a student is trained and
        /// its evaluation snapshots are probed.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// The external-teacher setup.
    Extreme {
        #[command(subcommand)]
        cmd: ExtremeCmd,
    },
    /// Print every saved report under the workdir.
    Report,
    /// Print the effective configuration.
    Config,
}

#[derive(Subcommand)]
enum DataCmd {
    /// Generate the configured dataset.
    Gen {
        /// Defaults to `<workdir>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Load and check a dataset directory.
    Validate { dir: PathBuf },
}

#[derive(Subcommand)]
enum PtsCmd {
    /// Generate (or reuse) teacher PTs for every training example.
    Generate {
        #[arg(long, value_enum)]
        method: Method,
    },
}

#[derive(Subcommand)]
enum ExtremeCmd {
    /// Write the canned external-teacher file from the desk teacher.
    Export,
    /// Run the four extreme conditions for every seed.
    Run {
        #[arg(long)]
        external: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Teacher,
    Student,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Beam,
    Sample,
    HSample,
}

impl From<Method> for PtMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Beam => PtMethod::Beam,
            Method::Sample => PtMethod::Sample,
            Method::HSample => PtMethod::HSample,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.global.log)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = ExperimentConfig::load(cli.global.config.as_deref(), &cli.global.overrides)?;
    match cli.cmd {
        Cmd::Config => print!("{}", cfg.to_toml()?),
        Cmd::Data { cmd: DataCmd::Gen { out } } => {
            let dir = out.unwrap_or_else(|| cfg.workdir.join("data"));
            let d = generate(&cfg.data)?;
            d.save(&dir)?;
            println!(
                "wrote {} labeled, {} unlabeled, {} dev, {} test to {}",
                d.train_labeled.len(),
                d.train_unlabeled.len(),
                d.dev.len(),
                d.test.len(),
                dir.display()
            );
        }
        Cmd::Data { cmd: DataCmd::Validate { dir } } => {
            let d = Dataset::load(&dir)?;
            d.validate()?;
            println!("ok: {} labeled, {} unlabeled, {} dev, {} test", d.train_labeled.len(), d.train_unlabeled.len(), d.dev.len(), d.test.len());
        }
        Cmd::Align { teacher, student } => {
            let t: Vec<&str> = teacher.split_whitespace().collect();
            let s: Vec<&str> = student.split_whitespace().collect();
            for op in nw_align(&t, &s, &NwScoring::default()) {
                let tt = op.teacher_index.map_or("-", |i| t[i]);
                let ss = op.student_index.map_or("-", |i| s[i]);
                let kind = match op.kind {
                    OpKind::Replace if op.is_prefix_match => "prefix-match".to_string(),
                    k => format!("{k:?}").to_lowercase(),
                };
                println!("{kind:<13} {tt:<12} {ss}");
            }
        }
        cmd => run_study(cmd, Study::open(cfg)?)?,
    }
    Ok(())
}

fn run_study(cmd: Cmd, study: Study) -> Result<()> {
    match cmd {
        Cmd::Train { role, seed } => {
            let (label, dev) = match role {
                Role::Teacher => ("teacher", study.teacher()?.1),
                Role::Student => {
                    let seed = seed.unwrap_or(study.exp.cfg.seeds[0]);
                    ("student", study.student(seed)?.1)
                }
            };
            print!("{}", metric_table(&format!("{label} dev"), &dev));
        }
        Cmd::Distill { stage } => print!("{}", stage_table(&study.run_stage(stage)?)),
        Cmd::Pts { cmd: PtsCmd::Generate { method } } => {
            let (teacher, _) = study.teacher()?;
            let cache = study.pts(&teacher, &[method.into()])?;
            println!("{} PTs for {} examples", cache.len(), study.exp.train.len());
        }
        Cmd::Eval { checkpoint, split, out } => {
            let model = Seq2SeqModel::load(&checkpoint)?;
            let examples = match split.as_str() {
                "dev" => &study.exp.dev,
                "test" => &study.exp.test,
                other => return Err(seqkd::Error::InvalidArgument(format!("unknown split `{other}` (dev or test)"))),
            };
            let report = study.exp.evaluate(&model, examples)?;
            print!("{}", metric_table(&format!("{} on {split}", checkpoint.display()), &report));
            if let Some(p) = out {
                save_json(&p, &report)?;
            }
        }
        Cmd::Profile => {
            println!("{:<10} {:>4} {:>4} {:>8} {:>12} {:>14} {:>14}", "model", "m", "n", "params", "cost", "latency ms", "examples/min");
            for r in study.profile()? {
                println!(
                    "{:<10} {:>4} {:>4} {:>8} {:>12} {:>8.3}±{:<5.3} {:>14.0}",
                    r.model, r.m, r.n, r.params, r.cost_units, r.latency_ms, r.latency_sd, r.throughput_per_min
                );
            }
        }
        Cmd::ProbeExposure { rho, checkpoint } => {
            let (teacher, _) = study.teacher()?;
            let owned: Vec<(String, Seq2SeqModel)> = if checkpoint.len() >= 2 {
                checkpoint.iter().map(|p| Ok((label(p), Seq2SeqModel::load(p)?))).collect::<Result<_>>()?
            } else {
                probe_snapshots(&study)?
            };
            let cps: Vec<(String, &Seq2SeqModel)> = owned.iter().map(|(n, m)| (n.clone(), m)).collect();
            let rows = exposure_probe(&teacher, &cps, &study.exp.dev, rho, study.exp.cfg.decode.max_len, study.exp.cfg.train.eval_batch)?;
            save_json(&study.path("probe.json"), &rows)?;
            print!("{}", probe_table(&rows));
        }
        Cmd::Extreme { cmd: ExtremeCmd::Export } => {
            let (teacher, _) = study.teacher()?;
            println!("wrote {}", study.export_external(&teacher)?.display());
        }
        Cmd::Extreme { cmd: ExtremeCmd::Run { external } } => print!("{}", extreme_table(&study.run_extreme(external.as_deref())?)),
        Cmd::Report => {
            let mut any = false;
            for stage in 1..=8u8 {
                if let Ok(r) = study.load_stage(stage) {
                    println!("{}", stage_table(&r));
                    any = true;
                }
            }
            if let Ok(r) = load_json::<Vec<ExtremeResult>>(&study.path("extreme/results.json")) {
                println!("extreme setup\n{}", extreme_table(&r));
                any = true;
            }
            if let Ok(r) = load_json::<Vec<ProbeRow>>(&study.path("probe.json")) {
                println!("exposure probe\n{}", probe_table(&r));
                any = true;
            }
            if !any {
                println!("no reports under {}", study.dir.display());
            }
        }
        Cmd::Config | Cmd::Data { .. } | Cmd::Align { .. } => unreachable!("handled before the study is opened"),
    }
    Ok(())
}

fn label(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// Trains a student with snapshots kept and returns up to four of them,
/// evenly spaced over training.
fn probe_snapshots(study: &Study) -> Result<Vec<(String, Seq2SeqModel)>> {
    let exp = &study.exp;
    let seed = exp.cfg.seeds[0];
    let cfg = exp.cfg.student.build(exp.vocab.len())?;
    let model = Seq2SeqModel::new(cfg, seed)?;
    let decode = exp.eval_decode();
    let ctx = seqkd::pipeline::trainer::TrainContext { teacher: None, pts: None, projections: None, kd: &exp.cfg.kd, decode: &decode };
    let tcfg = TrainConfig { keep_snapshots: true, seed, ..exp.cfg.train.clone() };
    let res = seqkd::pipeline::trainer::train(model, &exp.labeled(), &exp.dev, &seqkd::pipeline::trainer::Recipe::finetune(), ctx, &tcfg)?;
    let n = res.snapshots.len();
    let picks: Vec<usize> = if n <= 4 { (0..n).collect() } else { (0..4).map(|k| k * (n - 1) / 3).collect() };
    Ok(res.snapshots.into_iter().enumerate().filter(|(i, _)| picks.contains(i)).map(|(_, (step, m))| (format!("step {step}"), m)).collect())
}
