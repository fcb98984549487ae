//! Command-line interface.

use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use crate::config::{DataSpec, RunConfig};
use crate::dataset::save_dataset;
use crate::export::summary_text;
use crate::runner::{execute_all, load_bundle, regenerate, thread_cap};

#[derive(Debug, Parser)]
#[command(name = "agnn", version, about = "Graph neural architecture search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one or more searches.
    Search(SearchArgs),
    /// Regenerate CSV reports from a run directory's trial log.
    Report {
        #[arg(long)]
        log: PathBuf,
    },
    /// Concatenate the trials.csv of several run directories.
    MergeLogs {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset in the text format.
    MakeData {
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Flags override values from `--config`.
#[derive(Debug, Default, Args)]
pub struct SearchArgs {
    /// TOML file with the same keys as these flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset path, `sbm:k=v,...` or `surrogate:[seed=K]`.
    #[arg(long)]
    pub data: Option<String>,
    /// agnn, resample or random.
    #[arg(long)]
    pub controller: Option<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Classes mutated per proposal (1..=6).
    #[arg(long)]
    pub s: Option<usize>,
    /// on, relaxed or off.
    #[arg(long)]
    pub share: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub restart_slots: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Record wall-clock seconds per trial (logs are then not reproducible).
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub large_graph: bool,
    #[arg(long)]
    pub controller_lr: Option<f64>,
}

impl SearchArgs {
    pub fn to_config(&self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { c.$field = v.clone(); })*
            };
        }
        take!(data, controller, trials, layers, s, share, seed, restart_slots, repeats);
        macro_rules! take_opt {
            ($($field:ident),*) => {
                $(if self.$field.is_some() { c.$field = self.$field.clone(); })*
            };
        }
        take_opt!(out, epochs, warmup_epochs, lr, l2, dropout, controller_lr);
        c.timing |= self.timing;
        c.large_graph |= self.large_graph;
        Ok(c)
    }
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Search(args) => {
            let cfg = args.to_config()?;
            let runs = cfg.resolve()?;
            let toml = cfg.to_toml();
            let outputs = execute_all(&runs, Some(&toml), thread_cap())?;
            for out in &outputs {
                writeln!(stdout, "{}", summary_text(&out.report.summary))?;
            }
            if cfg.out.is_none() {
                log::info!("no --out given; nothing was written to disk");
            }
        }
        Command::Report { log } => {
            let report = regenerate(&log)?;
            write!(stdout, "{}", summary_text(&report.summary))?;
        }
        Command::MergeLogs { dirs, out } => match out {
            Some(path) => {
                let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                crate::export::merge_logs(&dirs, file)?;
            }
            None => {
                crate::export::merge_logs(&dirs, &mut *stdout)?;
            }
        },
        Command::MakeData { data, out } => {
            let spec: DataSpec = data.parse()?;
            let bundle = load_bundle(&spec)?;
            for path in save_dataset(&bundle, &out)? {
                writeln!(stdout, "{}", path.display())?;
            }
        }
    }
    Ok(())
}
