//! Command-line entry points, experiment configuration and on-disk formats.

pub mod checkpoint;
pub mod config;
pub mod run;
pub mod verify;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::data::{corpus_jsonl, gen_corpus, split_forget, vocab_json};
use crate::error::{Error, Result};
use config::ExperimentConfig;
use run::sha256_hex;
use verify::{run_suite, Suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "reglu", version, about = "Representation-guided low-rank unlearning on a tiny language model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its forget/retain split.
    GenData {
        #[arg(long, default_value_t = 50)]
        authors: usize,
        #[arg(long, default_value_t = 8)]
        qa: usize,
        #[arg(long, default_value_t = 0.1)]
        forget: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run pretraining, initialization, unlearning and evaluation.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config field, e.g. `--set unlearn.beta=0.3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Run a verification suite: kyfan | projection-energy | concentration | init-identity.
    Verify {
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against a run directory's data.
    Eval {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Recompute energy / orthogonality diagnostics for a run's checkpoint.
    Diag {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Verification(_) => EXIT_VERIFY,
        Error::Numeric { .. } | Error::EmptyAccumulator => EXIT_NUMERIC,
        Error::Config(_)
        | Error::InvalidInput(_)
        | Error::InvalidShape(_)
        | Error::Checkpoint(_)
        | Error::Io(_)
        | Error::Json(_) => EXIT_CONFIG,
    }
}

#[derive(Serialize)]
pub struct GenDataReport {
    pub records: usize,
    pub forget_records: usize,
    pub retain_records: usize,
    pub forget_authors: usize,
    pub corpus_sha256: String,
}

pub fn cmd_gen_data(authors: usize, qa: usize, forget: f64, seed: u64, out: &Path) -> Result<GenDataReport> {
    let corpus = gen_corpus(authors, qa, seed)?;
    let split = split_forget(&corpus, forget, seed)?;
    fs::create_dir_all(out)?;
    let jsonl = corpus_jsonl(&corpus, Some(&split))?;
    fs::write(out.join("corpus.jsonl"), &jsonl)?;
    fs::write(out.join("vocab.json"), vocab_json(&corpus.vocab)? + "\n")?;
    Ok(GenDataReport {
        records: corpus.records.len(),
        forget_records: split.forget.len(),
        retain_records: split.retain.len(),
        forget_authors: split.forget_authors.len(),
        corpus_sha256: sha256_hex(jsonl.as_bytes()),
    })
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { authors, qa, forget, seed, out } => print_json(&cmd_gen_data(authors, qa, forget, seed, &out)?),
        Command::Run { config, sets } => {
            let base = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            let cfg = base.with_overrides(&sets)?;
            let summaries = run::cmd_run(&cfg)?;
            print_json(&summaries)
        }
        Command::Verify { suite, seed, out } => {
            let suite: Suite = suite.parse()?;
            let report = run_suite(suite, seed)?;
            for line in report.lines() {
                println!("{line}");
            }
            if let Some(out) = out {
                fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
            }
            if report.passed() {
                Ok(())
            } else {
                Err(Error::Verification(format!("suite {suite} failed")))
            }
        }
        Command::Eval { run_dir, checkpoint } => print_json(&run::cmd_eval(&run_dir, checkpoint.as_deref())?),
        Command::Diag { run_dir, checkpoint } => print_json(&run::cmd_diag(&run_dir, checkpoint.as_deref())?),
    }
}

/// Parses `std::env::args`, runs the command, and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_data_is_byte_identical_and_counts_match() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = cmd_gen_data(50, 8, 0.1, 3, a.path()).unwrap();
        let rb = cmd_gen_data(50, 8, 0.1, 3, b.path()).unwrap();
        assert_eq!(ra.records, 400);
        assert_eq!((ra.forget_authors, ra.forget_records, ra.retain_records), (5, 40, 360));
        assert_eq!(ra.corpus_sha256, rb.corpus_sha256);
        for f in ["corpus.jsonl", "vocab.json"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Verification("x".into())), EXIT_VERIFY);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(
            exit_code(&Error::Numeric {
                op: "a".into(),
                detail: "b".into()
            }),
            EXIT_NUMERIC
        );
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let c = Cli::try_parse_from(["reglu", "run", "--set", "unlearn.beta=0.3", "--set", "unlearn.rank=4"]).unwrap();
        assert!(matches!(c.command, Command::Run { ref sets, .. } if sets.len() == 2));
    }
}
