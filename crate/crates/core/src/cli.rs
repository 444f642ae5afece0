//! Command-line entry point.
//!
//! Every verb writes its results under `--out` and nowhere else.
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{generate_pair, load_dataset, save_dataset, DomainPair, DomainSpec, Role};
use crate::error::{Error, Result};
use crate::metrics::ReportMetadata;
use crate::model::{Learner, Model};
use crate::pipeline::{
    self, config_hash, run_ablation, write_file, AblationOptions, PhaseConfig, RunRecord,
};
use crate::pseudo::save_pseudo_sets;
use crate::svg;

pub const SEED_ENV: &str = "PRSFDA_SEED";

/// Experiment file: data spec, phase settings and an optional seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spec: DomainSpec,
    pub phases: PhaseConfig,
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at_path(path))?;
        serde_json::from_str(&text).map_err(|e| Error::from(e).at_path(path))
    }

    /// Applies the seed precedence `--seed` > config > `PRSFDA_SEED` > 0
    /// to both the data spec and the phase config.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        let seed = flag.or(self.seed).or(env).unwrap_or(0);
        self.seed = Some(seed);
        self.spec.seed = seed;
        self.phases.seed = seed;
        Ok(seed)
    }
}

#[derive(Debug, Parser)]
#[command(name = "prsfda", version, about = "Source-free domain adaptation on synthetic segmentation scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment JSON (`spec`, `phases`, `seed`); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Seed override; wins over the config file and PRSFDA_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory written by `generate-data`; data is regenerated from the `spec` section otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also write SVG charts.
    #[arg(long)]
    report: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    SourceVal,
    TargetEval,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the four synthetic splits.
    GenerateData(Common),
    /// Phase 0: class-balanced source training.
    TrainSource(Common),
    /// Phase 1: unsupervised adaptation with the configured regularizer.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to start from
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Phase 2: self-training on pseudo labels.
    SelfTrain {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to start from
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run the naive self-training baseline instead.
        #[arg(long)]
        naive: bool,
        /// Save the pseudo-label sets used for training.
        #[arg(long)]
        save_pseudo: bool,
    },
    /// Score a checkpoint on a labeled split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to start from
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "target-eval")]
        split: Split,
    },
    /// Run every ablation arm and the lambda sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Worker threads for independent arms.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

/// Parses `argv` (program name first), runs the verb and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

struct Context {
    exp: ExperimentConfig,
    seed: u64,
    out: PathBuf,
    data: Option<PathBuf>,
    report: bool,
}

impl Context {
    fn new(common: Common) -> Result<Self> {
        let mut exp = match &common.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let seed = exp.resolve_seed(common.seed)?;
        exp.spec.validate()?;
        std::fs::create_dir_all(&common.out).map_err(|e| Error::from(e).at_path(&common.out))?;
        Ok(Self {
            exp,
            seed,
            out: common.out,
            data: common.data,
            report: common.report,
        })
    }

    fn config_hash(&self) -> String {
        config_hash(&self.exp.spec, &self.exp.phases)
    }

    fn pair(&self) -> Result<DomainPair> {
        match &self.data {
            None => generate_pair(&self.exp.spec),
            Some(dir) => Ok(DomainPair {
                source_train: load_dataset(&dir.join(SOURCE_TRAIN), Some(Role::Source))?,
                source_val: load_dataset(&dir.join(SOURCE_VAL), Some(Role::Source))?,
                target_train: load_dataset(&dir.join(TARGET_TRAIN), Some(Role::Target))?,
                target_eval: load_dataset(&dir.join(TARGET_EVAL), Some(Role::Target))?,
            }),
        }
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        write_file(&self.out.join(name), bytes)
    }

    /// Evaluates on target eval, then writes checkpoint, record, reports and curves.
    fn finish_phase(&self, name: &str, model: &Model, mut record: RunRecord, pair: &DomainPair) -> Result<()> {
        let ckpt = format!("{name}.ckpt");
        model.save(&self.out.join(&ckpt))?;
        record.checkpoint_path = Some(PathBuf::from(&ckpt));
        let report = pipeline::evaluate(model, &pair.target_eval)?.with_metadata(ReportMetadata {
            phase: record.phase.clone(),
            seed: self.seed,
            config_hash: self.config_hash(),
            checkpoint_hash: record.output_checkpoint.clone(),
        });
        self.write(&format!("{name}_report.csv"), report.to_csv().as_bytes())?;
        self.write(&format!("{name}_report.json"), report.to_json()?.as_bytes())?;
        record.reports.push(report);
        self.write(&format!("{name}_loss.csv"), loss_csv(&record).as_bytes())?;
        self.write(&format!("{name}_record.json"), serde_json::to_string_pretty(&record)?.as_bytes())?;
        if self.report {
            let chart = svg::line_chart(&format!("{name} loss"), &[(record.phase.clone(), record.loss_curve())]);
            self.write(&format!("{name}_loss.svg"), chart.as_bytes())?;
        }
        eprintln!("{name}: target mIoU {:.4}, checkpoint {}", record.reports[0].miou, self.out.join(&ckpt).display());
        Ok(())
    }
}

const SOURCE_TRAIN: &str = "source_train.ds";
const SOURCE_VAL: &str = "source_val.ds";
const TARGET_TRAIN: &str = "target_train.ds";
const TARGET_EVAL: &str = "target_eval.ds";

fn loss_csv(record: &RunRecord) -> String {
    let mut out = String::from("phase,epoch,mean_loss,final_lr,valid_fraction\n");
    for e in &record.epochs {
        out.push_str(&format!(
            "{},{},{:.9},{:.9},{}\n",
            record.phase,
            e.epoch,
            e.mean_loss,
            e.final_lr,
            e.valid_fraction.map_or(String::new(), |v| format!("{v:.6}"))
        ));
    }
    out
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenerateData(common) => {
            let ctx = Context::new(common)?;
            let pair = generate_pair(&ctx.exp.spec)?;
            for (name, ds) in [
                (SOURCE_TRAIN, &pair.source_train),
                (SOURCE_VAL, &pair.source_val),
                (TARGET_TRAIN, &pair.target_train),
                (TARGET_EVAL, &pair.target_eval),
            ] {
                save_dataset(ds, &ctx.out.join(name))?;
            }
            ctx.write("spec.json", serde_json::to_string_pretty(&ctx.exp.spec)?.as_bytes())
        }
        Command::TrainSource(common) => {
            let ctx = Context::new(common)?;
            let pair = ctx.pair()?;
            let (model, record) = pipeline::train_source(&pair.source_train, &ctx.exp.phases)?;
            let val = pipeline::evaluate(&model, &pair.source_val)?;
            eprintln!("source: source-val mIoU {:.4}", val.miou);
            ctx.finish_phase("source", &model, record, &pair)
        }
        Command::Adapt { common, checkpoint } => {
            let model = Model::load(&checkpoint)?;
            let ctx = Context::new(common)?;
            let pair = ctx.pair()?;
            let learner = Learner::new(model, ctx.exp.phases.target_optimizer);
            let (learner, record) =
                pipeline::adapt_unsupervised(learner, pair.target_train.unlabeled_view(), &ctx.exp.phases)?;
            ctx.finish_phase("adapted", &learner.into_model(), record, &pair)
        }
        Command::SelfTrain {
            common,
            checkpoint,
            naive,
            save_pseudo,
        } => {
            let model = Model::load(&checkpoint)?;
            let ctx = Context::new(common)?;
            let pair = ctx.pair()?;
            let target = pair.target_train.unlabeled_view();
            if save_pseudo {
                let sets = pipeline::generate_pseudo_sets(&model, target, ctx.exp.phases.threshold)?;
                save_pseudo_sets(&ctx.out.join("pseudo_labels.pl"), &sets, &model.fingerprint())?;
            }
            let learner = Learner::new(model, ctx.exp.phases.target_optimizer);
            let (learner, record) = if naive {
                pipeline::naive_self_train(learner, target, &ctx.exp.phases)?
            } else {
                pipeline::self_train_plnl(learner, target, &ctx.exp.phases)?
            };
            let name = if naive { "naive_st" } else { "self_trained" };
            ctx.finish_phase(name, &learner.into_model(), record, &pair)
        }
        Command::Evaluate {
            common,
            checkpoint,
            split,
        } => {
            let model = Model::load(&checkpoint)?;
            let ctx = Context::new(common)?;
            let dataset = match &ctx.data {
                Some(dir) => match split {
                    Split::SourceVal => load_dataset(&dir.join(SOURCE_VAL), Some(Role::Source))?,
                    Split::TargetEval => load_dataset(&dir.join(TARGET_EVAL), Some(Role::Target))?,
                },
                None => {
                    let pair = generate_pair(&ctx.exp.spec)?;
                    match split {
                        Split::SourceVal => pair.source_val,
                        Split::TargetEval => pair.target_eval,
                    }
                }
            };
            let phase = match split {
                Split::SourceVal => "evaluate_source_val",
                Split::TargetEval => "evaluate_target_eval",
            };
            let report = pipeline::evaluate(&model, &dataset)?.with_metadata(ReportMetadata {
                phase: phase.into(),
                seed: ctx.seed,
                config_hash: ctx.config_hash(),
                checkpoint_hash: model.fingerprint(),
            });
            ctx.write("eval_report.csv", report.to_csv().as_bytes())?;
            ctx.write("eval_report.json", report.to_json()?.as_bytes())?;
            eprintln!("mIoU {:.4}, pixel accuracy {:.4}", report.miou, report.pixel_accuracy);
            Ok(())
        }
        Command::Ablate { common, jobs } => {
            let ctx = Context::new(common)?;
            let opts = AblationOptions {
                out_dir: Some(ctx.out.clone()),
                jobs,
            };
            let table = run_ablation(&ctx.exp.spec, &ctx.exp.phases, ctx.seed, &opts)?;
            let records: Vec<&RunRecord> = table
                .phases
                .iter()
                .chain(&table.lambda_sweep)
                .map(|r| &r.record)
                .collect();
            ctx.write("records.json", serde_json::to_string_pretty(&records)?.as_bytes())?;
            if ctx.report {
                let curves: Vec<(String, Vec<f64>)> = table
                    .phases
                    .iter()
                    .map(|r| (r.name.clone(), r.record.loss_curve()))
                    .collect();
                ctx.write("loss_curves.svg", svg::line_chart("loss per epoch", &curves).as_bytes())?;
                let bars: Vec<(String, f64)> = table
                    .phases
                    .iter()
                    .map(|r| (r.arm.label().to_string(), r.target.miou))
                    .collect();
                ctx.write("miou.svg", svg::bar_chart("target mIoU", &bars).as_bytes())?;
            }
            eprintln!("ablation tables written to {}", ctx.out.display());
            Ok(())
        }
    }
}
