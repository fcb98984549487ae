//! Executes resolved runs and writes their directories.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use rayon::prelude::*;

use agnn_core::graph::{generate_inductive_sbm, generate_sbm, DatasetBundle, Setting};
use agnn_core::search::{run_search, Clock, Evaluator, GnnEvaluator, NullClock, SearchLog, SurrogateEvaluator};
use agnn_core::train::{EvaluationRecord, TrainingData};

use crate::config::{DataSpec, ResolvedRun};
use crate::dataset::load_dataset;
use crate::export::{jsonl_line, write_report, Report, RunSummary, TrialRow, TRIALS_JSONL};
use crate::snapshot;

pub const CONTROLLER_CKPT: &str = "controller.ckpt";
pub const REGISTRY_SNAP: &str = "registry.snap";
pub const MODEL_SNAP: &str = "best_model.snap";
pub const CONFIG_TOML: &str = "config.toml";
/// Caps the worker pool used for multi-run invocations.
pub const THREADS_ENV: &str = "AGNN_THREADS";

pub struct WallClock(Instant);

impl Default for WallClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

pub fn load_bundle(spec: &DataSpec) -> anyhow::Result<DatasetBundle> {
    match spec {
        DataSpec::File(path) => {
            let (bundle, report) = load_dataset(path)?;
            let e = report.edges;
            if e.symmetrized > 0 {
                log::info!("{}: added the reverse of {} single-direction edge(s)", path.display(), e.symmetrized);
            }
            if e.duplicates + e.self_loops > 0 {
                log::warn!(
                    "{}: dropped {} duplicate edge(s) and {} self-loop(s)",
                    path.display(),
                    e.duplicates,
                    e.self_loops
                );
            }
            Ok(bundle)
        }
        DataSpec::Sbm { cfg, graphs: None } => Ok(generate_sbm(cfg)?),
        DataSpec::Sbm {
            cfg,
            graphs: Some((a, b, c)),
        } => Ok(generate_inductive_sbm(cfg, *a, *b, *c)?),
        DataSpec::Surrogate(_) => anyhow::bail!("the surrogate has no dataset"),
    }
}

enum Backend {
    Surrogate(SurrogateEvaluator),
    Gnn(Box<GnnEvaluator>),
}

impl Backend {
    fn evaluator(&mut self) -> &mut dyn Evaluator {
        match self {
            Backend::Surrogate(e) => e,
            Backend::Gnn(e) => e.as_mut(),
        }
    }
}

/// Result of one run; `log` carries the final controller state.
pub struct RunOutput {
    pub log: SearchLog,
    pub report: Report,
}

/// Runs one search. With an output directory, trial records are appended to
/// `trials.jsonl` as they complete and every report file plus the controller,
/// registry and best-model snapshots are written at the end.
pub fn execute(run: &ResolvedRun, config_toml: Option<&str>) -> anyhow::Result<RunOutput> {
    let mut backend = match run.surrogate_seed() {
        Some(seed) => Backend::Surrogate(SurrogateEvaluator::new(seed, run.search.n_layers)),
        None => {
            let bundle = load_bundle(&run.data)?;
            if bundle.setting == Setting::Inductive && run.train.setting != Setting::Inductive {
                anyhow::bail!("dataset is inductive but the training recipe is transductive");
            }
            let data = TrainingData::new(bundle)?;
            Backend::Gnn(Box::new(GnnEvaluator::new(data, run.train, run.share.policy())?))
        }
    };

    let mut live: Option<BufWriter<File>> = match &run.out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            if let Some(text) = config_toml {
                fs::write(dir.join(CONFIG_TOML), text)?;
            }
            Some(BufWriter::new(File::create(dir.join(TRIALS_JSONL))?))
        }
        None => None,
    };
    let mut observer = |rec: &EvaluationRecord| -> agnn_core::Result<()> {
        log::debug!("trial {} val={} {}", rec.trial_id, rec.val_metric, rec.architecture);
        if let Some(w) = live.as_mut() {
            // The search cannot recover from a broken log, so the I/O error
            // surfaces through the core error type.
            w.write_all(jsonl_line(&TrialRow::from(rec)).as_bytes())
                .and_then(|_| w.flush())
                .map_err(|e| agnn_core::Error::InvalidArgument(format!("writing trial log: {}", e)))?;
        }
        Ok(())
    };
    let wall = WallClock::default();
    let clock: &dyn Clock = if run.timing { &wall } else { &NullClock };
    let log = run_search(&run.search, backend.evaluator(), clock, &mut observer)?;
    drop(live);

    let best = log.best();
    let summary = RunSummary {
        name: run.name.clone(),
        data: data_label(&run.data),
        controller: run.search.controller.name().to_string(),
        s: run.search.s,
        layers: run.search.n_layers,
        share: run.share.to_string(),
        seed: run.search.seed,
        trials: log.records.len(),
        best_trial: log.best_trial,
        best_architecture: best.architecture.to_string(),
        best_val_metric: best.val_metric,
        test_metric: log.test_metric,
        total_seconds: log.total_seconds,
        surrogate_optimum: match &backend {
            Backend::Surrogate(e) => Some(e.landscape().optimum().0),
            Backend::Gnn(_) => None,
        },
    };
    let report = Report::from_log(&log, summary);
    if let Some(dir) = &run.out {
        write_report(dir, &report)?;
        if let Some(state) = &log.controller {
            snapshot::save_controller(&dir.join(CONTROLLER_CKPT), state)?;
        }
        if let Backend::Gnn(e) = &backend {
            if let Some(reg) = e.registry() {
                snapshot::save(&dir.join(REGISTRY_SNAP), &snapshot::registry_tensors(reg))?;
            }
            if let Some(model) = e.best_model() {
                snapshot::save(&dir.join(MODEL_SNAP), &snapshot::model_tensors(model))?;
            }
        }
    }
    Ok(RunOutput { log, report })
}

fn data_label(spec: &DataSpec) -> String {
    match spec {
        DataSpec::File(p) => p.display().to_string(),
        DataSpec::Sbm { cfg, graphs } => {
            let mut s = format!(
                "sbm:nodes={},classes={},p_in={},p_out={},feats={},noise={},seed={}",
                cfg.nodes, cfg.classes, cfg.p_in, cfg.p_out, cfg.feat_dim, cfg.noise, cfg.seed
            );
            if let Some((a, b, c)) = graphs {
                s.push_str(&format!(",graphs={}/{}/{}", a, b, c));
            }
            s
        }
        DataSpec::Surrogate(None) => String::from("surrogate:"),
        DataSpec::Surrogate(Some(seed)) => format!("surrogate:seed={}", seed),
    }
}

/// Worker count from `AGNN_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Runs independent searches in parallel, at most `threads` at a time.
/// Results come back in input order.
pub fn execute_all(runs: &[ResolvedRun], config_toml: Option<&str>, threads: Option<usize>) -> anyhow::Result<Vec<RunOutput>> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.unwrap_or(0)).build()?;
    pool.install(|| {
        runs.par_iter()
            .map(|r| execute(r, config_toml).with_context(|| format!("run `{}`", r.name)))
            .collect()
    })
}

/// Rewrites the derived CSV and summary files of a run directory.
pub fn regenerate(dir: &Path) -> anyhow::Result<Report> {
    let report = Report::load(dir)?;
    write_report(dir, &report)?;
    Ok(report)
}
