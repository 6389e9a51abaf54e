//! Command-line front end.
//!
//! Every subcommand reads one JSON config (all-defaults when omitted),
//! patched by repeatable `--set section.key=value` overrides and the
//! `--seed` shorthand, then validated strictly. Data goes to files under
//! `--out` or to standard output; diagnostics go to standard error.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 numerical failure,
//! 3 IO failure.

use crate::harness::{
    ablate_lambda, accounting_table, pretrain_only, run_experiment, score_dump, totals_from_csv,
    write_datasets, DumpSplit, ExperimentConfig, HarnessError, RunMode,
};
use crate::selfcheck::{all_passed, run_selfcheck};
use crate::VERSION;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "regate",
    version,
    about = "Reference-guided token gating for transformer training, desk scale",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON experiment config; built-in defaults apply when omitted
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dotted-path config override, repeatable (e.g. train.seed=3)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed, shorthand for --set train.seed=N
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("train.seed={seed}"));
        }
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Regate,
    Both,
}

impl From<ModeArg> for RunMode {
    fn from(m: ModeArg) -> RunMode {
        match m {
            ModeArg::Baseline => RunMode::Baseline,
            ModeArg::Regate => RunMode::Regate,
            ModeArg::Both => RunMode::Both,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

impl From<SplitArg> for DumpSplit {
    fn from(s: SplitArg) -> DumpSplit {
        match s {
            SplitArg::Train => DumpSplit::Train,
            SplitArg::Eval => DumpSplit::Eval,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Write the pretrain / train / eval sample sets as JSON lines
    GenData {
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the frozen text-only teacher and checkpoint it
    PretrainTeacher {
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run baseline and/or gated fine-tuning arms
    Train {
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Which arms to run, overriding the config
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Reuse a teacher checkpoint instead of pretraining one
        #[arg(long, value_name = "FILE")]
        teacher: Option<PathBuf>,
    },
    /// Run one gated arm per lambda in the config's list
    AblateLambda {
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Reuse a teacher checkpoint instead of pretraining one
        #[arg(long, value_name = "FILE")]
        teacher: Option<PathBuf>,
    },
    /// Dump per-token scores for inspection as JSON lines
    ScoreDump {
        /// Output file
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Which sample set to score
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Sample id to dump, repeatable; all samples when omitted
        #[arg(long = "sample", value_name = "ID")]
        samples: Vec<u64>,
        /// Reuse a teacher checkpoint instead of pretraining one
        #[arg(long, value_name = "FILE")]
        teacher: Option<PathBuf>,
    },
    /// Summarize metrics CSVs: per-arm totals and reduction vs baseline
    Accounting {
        /// Metrics CSV files, one per arm
        #[arg(required = true, value_name = "CSV")]
        files: Vec<PathBuf>,
    },
    /// Run the embedded invariant suite
    Selfcheck,
}

fn dispatch(cli: Cli) -> Result<(), HarnessError> {
    match cli.cmd {
        Cmd::GenData { out } => {
            let cfg = cli.common.load()?;
            write_datasets(&cfg, &out)?;
            println!("# regate v{VERSION} gen-data");
            println!("wrote pretrain.jsonl, train.jsonl, eval.jsonl to {}", out.display());
        }
        Cmd::PretrainTeacher { out } => {
            let cfg = cli.common.load()?;
            let report = pretrain_only(&cfg, &out)?;
            println!("# regate v{VERSION} pretrain-teacher");
            println!(
                "teacher: {} steps, copy loss {:.4} (target {}), reached_target={}, hash {}",
                report.steps,
                report.final_copy_loss,
                report.target_copy_loss,
                report.reached_target,
                &report.param_hash[..12]
            );
        }
        Cmd::Train { out, mode, teacher } => {
            let mut cfg = cli.common.load()?;
            if let Some(m) = mode {
                cfg.mode = m.into();
            }
            let result = run_experiment(&cfg, &out, teacher.as_deref())?;
            println!("# regate v{VERSION} train");
            for arm in &result.arms {
                println!(
                    "{}: {} steps, {} tokens forwarded, {} label tokens kept, heldout {:.4}",
                    arm.arm, arm.total_steps, arm.total_tokens, arm.label_tokens_kept,
                    arm.final_heldout_loss
                );
            }
        }
        Cmd::AblateLambda { out, teacher } => {
            let cfg = cli.common.load()?;
            let report = ablate_lambda(&cfg, &out, teacher.as_deref())?;
            println!("# regate v{VERSION} ablate-lambda");
            print!("{}", report.table());
        }
        Cmd::ScoreDump { out, split, samples, teacher } => {
            let cfg = cli.common.load()?;
            let records = score_dump(&cfg, &out, &samples, split.into(), teacher.as_deref())?;
            println!("# regate v{VERSION} score-dump");
            println!("wrote {} records to {}", records.len(), out.display());
        }
        Cmd::Accounting { files } => {
            let mut totals = Vec::new();
            for f in &files {
                totals.push(totals_from_csv(f)?);
            }
            println!("# regate v{VERSION} accounting");
            print!("{}", accounting_table(&totals));
        }
        Cmd::Selfcheck => {
            println!("# regate v{VERSION} selfcheck");
            let results = run_selfcheck();
            for r in &results {
                let status = if r.passed { "PASS" } else { "FAIL" };
                println!("{status} {} ({})", r.name, r.detail);
            }
            if !all_passed(&results) {
                return Err(HarnessError::Config("selfcheck failed".into()));
            }
        }
    }
    Ok(())
}

fn exit_code_for(e: &HarnessError) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else if e.is_io() {
        EXIT_IO
    } else {
        EXIT_USAGE
    }
}

/// Parses arguments, runs one subcommand, and returns the process exit
/// code. Help and version requests exit 0; any usage problem exits 1.
pub fn main_entry() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!("{e}");
            exit_code_for(&e)
        }
    }
}
