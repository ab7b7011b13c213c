// SPDX-License-Identifier: MIT OR Apache-2.0

//! Orchestration for the `setke` binary: one function per subcommand, each
//! writing its outputs and a manifest into an output directory.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

pub use commands::{
    cmd_attribute, cmd_classify, cmd_edit, cmd_eval, cmd_report, cmd_sweep, cmd_train,
    AttributeArgs, ClassifyArgs, EditArgs, EvalArgs, ReportArgs, SweepArgs,
};
pub use config::{RunConfig, CONFIG_ENV};
pub use manifest::Manifest;

#[derive(Debug, Parser)]
#[command(
    name = "setke",
    version,
    about = "Knowledge-set editing experiments on toy transformers"
)]
pub struct Cli {
    /// Run config (TOML).
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and train a model on it.
    Train,
    /// Count overlap categories in a triplet list or edit set.
    Classify(ClassifyArgs),
    /// Edit a checkpoint and save the result.
    Edit(EditArgs),
    /// Score a model, optionally editing each case first.
    Eval(EvalArgs),
    /// Score editors across object counts.
    Sweep(SweepArgs),
    /// Attribute facts to FFN neurons with integrated gradients.
    Attribute(AttributeArgs),
    /// Summarize metric CSVs as tables.
    Report(ReportArgs),
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref())?.with_seed(cli.seed);
    cfg.validate()?;
    let out = &cli.out;
    match &cli.command {
        Command::Train => {
            let s = cmd_train(&cfg, out)?;
            println!(
                "trained {} parameters on {} sentences, recall {:.3}",
                s.parameters, s.sentences, s.recall
            );
        }
        Command::Classify(a) => {
            let r = cmd_classify(&cfg, a, out)?;
            println!(
                "total {} normal {} rso {} roo {} soo {} duplicate {} (normal {:.2}%)",
                r.total, r.normal, r.rso, r.roo, r.soo, r.duplicate, r.normal_ratio
            );
        }
        Command::Edit(a) => {
            let r = cmd_edit(&cfg, a, out)?;
            println!(
                "ES {:.2} GS {:.2} LS {:.2} Score {:.2}",
                r.es, r.gs, r.ls, r.score
            );
        }
        Command::Eval(a) => {
            let r = cmd_eval(&cfg, a, out)?.overall;
            println!(
                "ES {:.2} GS {:.2} LS {:.2} Score {:.2}",
                r.es, r.gs, r.ls, r.score
            );
        }
        Command::Sweep(a) => {
            let rows = cmd_sweep(&cfg, a, out)?;
            println!("{} metric rows", rows.len());
        }
        Command::Attribute(a) => {
            let r = cmd_attribute(&cfg, a, out)?;
            for f in &r.facts {
                println!(
                    "{} -> {}: {} neurons, gap {:.2e}",
                    f.prompt,
                    f.target,
                    f.neurons.len(),
                    f.completeness_gap
                );
            }
        }
        Command::Report(a) => print!("{}", cmd_report(&cfg, a, out)?),
    }
    println!("wrote {}", out.display());
    Ok(())
}
