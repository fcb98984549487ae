//! Run configuration: a TOML file with the same keys as the command-line
//! flags, expanded into one resolved run per (variant, seed).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use agnn_core::graph::{SbmConfig, Setting};
use agnn_core::registry::SharingPolicy;
use agnn_core::search::{ControllerKind, SearchConfig};
use agnn_core::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset path, `sbm:<k=v,...>` or `surrogate:[seed=K]`.
    pub data: String,
    pub controller: String,
    pub trials: usize,
    pub layers: usize,
    pub s: usize,
    /// `on` (constrained), `relaxed` (name and shape only) or `off`.
    pub share: String,
    pub seed: u64,
    pub restart_slots: usize,
    /// Record wall-clock seconds; off keeps logs byte-reproducible.
    pub timing: bool,
    /// Independent seeds `seed, seed + 1, ...` per variant.
    pub repeats: usize,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub warmup_epochs: Option<usize>,
    pub lr: Option<f64>,
    pub l2: Option<f64>,
    pub dropout: Option<f64>,
    /// Use the large-citation-graph optimizer recipe for transductive data.
    pub large_graph: bool,
    pub controller_lr: Option<f64>,
    /// Variants for comparative runs; empty means a single run.
    pub runs: Vec<RunVariant>,
}

/// Fields a comparative variant may change; data and budget stay shared.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunVariant {
    pub name: Option<String>,
    pub controller: Option<String>,
    pub s: Option<usize>,
    pub share: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: String::from("surrogate:"),
            controller: String::from("agnn"),
            trials: 300,
            layers: 2,
            s: 1,
            share: String::from("on"),
            seed: 0,
            restart_slots: 1,
            timing: false,
            repeats: 1,
            out: None,
            epochs: None,
            warmup_epochs: None,
            lr: None,
            l2: None,
            dropout: None,
            large_graph: false,
            controller_lr: None,
            runs: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Share {
    Off,
    On,
    Relaxed,
}

impl Share {
    pub fn policy(self) -> Option<SharingPolicy> {
        match self {
            Share::Off => None,
            Share::On => Some(SharingPolicy::Constrained),
            Share::Relaxed => Some(SharingPolicy::Relaxed),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Share::Off => "off",
            Share::On => "on",
            Share::Relaxed => "relaxed",
        }
    }
}

impl FromStr for Share {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "off" | "false" | "0" => Share::Off,
            "on" | "true" | "1" | "constrained" => Share::On,
            "relaxed" | "unconstrained" => Share::Relaxed,
            other => bail!("unknown sharing mode `{}` (expected on, off or relaxed)", other),
        })
    }
}

impl fmt::Display for Share {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    File(PathBuf),
    Sbm {
        cfg: SbmConfig,
        /// `(train, val, test)` graph counts for an inductive bundle.
        graphs: Option<(usize, usize, usize)>,
    },
    /// Landscape seed; `None` follows the run seed.
    Surrogate(Option<u64>),
}

fn key_values(body: &str) -> anyhow::Result<Vec<(&str, &str)>> {
    body.split(',')
        .map(str::trim)
        .filter(|kv| !kv.is_empty())
        .map(|kv| kv.split_once('=').map(|(k, v)| (k.trim(), v.trim())).with_context(|| format!("`{}` is not key=value", kv)))
        .collect()
}

fn num<T: FromStr>(key: &str, v: &str) -> anyhow::Result<T> {
    v.parse().map_err(|_| anyhow::anyhow!("`{}` is not a valid value for {}", v, key))
}

impl FromStr for DataSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        if let Some(body) = s.strip_prefix("surrogate:") {
            let mut seed = None;
            for (k, v) in key_values(body)? {
                match k {
                    "seed" => seed = Some(num(k, v)?),
                    _ => bail!("unknown surrogate option `{}`", k),
                }
            }
            return Ok(DataSpec::Surrogate(seed));
        }
        if let Some(body) = s.strip_prefix("sbm:") {
            let mut cfg = SbmConfig {
                nodes: 300,
                classes: 3,
                p_in: 0.3,
                p_out: 0.01,
                feat_dim: 0,
                noise: 0.1,
                seed: 7,
            };
            let mut graphs = None;
            for (k, v) in key_values(body)? {
                match k {
                    "nodes" => cfg.nodes = num(k, v)?,
                    "classes" => cfg.classes = num(k, v)?,
                    "p_in" => cfg.p_in = num(k, v)?,
                    "p_out" => cfg.p_out = num(k, v)?,
                    "feats" => cfg.feat_dim = num(k, v)?,
                    "noise" => cfg.noise = num(k, v)?,
                    "seed" => cfg.seed = num(k, v)?,
                    "graphs" => {
                        let parts: Vec<&str> = v.split('/').collect();
                        let [a, b, c] = parts[..] else {
                            bail!("graphs must be train/val/test counts, got `{}`", v)
                        };
                        graphs = Some((num(k, a)?, num(k, b)?, num(k, c)?));
                    }
                    _ => bail!("unknown sbm option `{}`", k),
                }
            }
            if cfg.feat_dim == 0 {
                cfg.feat_dim = cfg.classes;
            }
            return Ok(DataSpec::Sbm { cfg, graphs });
        }
        if s.trim().is_empty() {
            bail!("empty data specification");
        }
        Ok(DataSpec::File(PathBuf::from(s)))
    }
}

/// One fully resolved search.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedRun {
    pub name: String,
    pub data: DataSpec,
    pub search: SearchConfig,
    pub share: Share,
    pub train: TrainConfig,
    pub timing: bool,
    /// Output directory, if any.
    pub out: Option<PathBuf>,
}

impl ResolvedRun {
    pub fn is_surrogate(&self) -> bool {
        matches!(self.data, DataSpec::Surrogate(_))
    }

    pub fn surrogate_seed(&self) -> Option<u64> {
        match self.data {
            DataSpec::Surrogate(seed) => Some(seed.unwrap_or(self.search.seed)),
            _ => None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    fn train_config(&self, setting: Setting, seed: u64) -> TrainConfig {
        let base = match setting {
            Setting::Inductive => TrainConfig::inductive(),
            Setting::Transductive if self.large_graph => TrainConfig::transductive_large(),
            Setting::Transductive => TrainConfig::transductive(),
        };
        TrainConfig {
            epochs: self.epochs.unwrap_or(base.epochs),
            warmup_epochs: self.warmup_epochs.unwrap_or(base.warmup_epochs),
            lr: self.lr.unwrap_or(base.lr),
            l2: self.l2.unwrap_or(base.l2),
            dropout: self.dropout.unwrap_or(base.dropout),
            seed,
            ..base
        }
    }

    /// Expands variants and repeats, validating every combination. With a
    /// single run the output goes to `out` itself; otherwise each run gets
    /// `out/<name>`.
    pub fn resolve(&self) -> anyhow::Result<Vec<ResolvedRun>> {
        if self.repeats == 0 {
            bail!("repeats must be at least 1");
        }
        let data: DataSpec = self.data.parse().with_context(|| format!("data `{}`", self.data))?;
        let setting = match &data {
            DataSpec::File(p) if p.is_dir() => Setting::Inductive,
            DataSpec::Sbm { graphs: Some(_), .. } => Setting::Inductive,
            _ => Setting::Transductive,
        };
        let variants = if self.runs.is_empty() { vec![RunVariant::default()] } else { self.runs.clone() };
        let multi = variants.len() * self.repeats > 1;
        let mut out = Vec::new();
        for v in &variants {
            let controller_name = v.controller.as_deref().unwrap_or(&self.controller);
            let controller: ControllerKind = controller_name
                .parse()
                .map_err(|e| anyhow::anyhow!("{}", e))
                .with_context(|| format!("controller `{}`", controller_name))?;
            let share: Share = v.share.as_deref().unwrap_or(&self.share).parse()?;
            let s = v.s.unwrap_or(self.s);
            let base_name = v
                .name
                .clone()
                .unwrap_or_else(|| format!("{}-s{}-share-{}", controller.name(), s, share));
            for r in 0..self.repeats {
                let seed = self.seed + r as u64;
                let mut search = SearchConfig {
                    controller,
                    trials: self.trials,
                    n_layers: self.layers,
                    s,
                    restart_slots: self.restart_slots,
                    seed,
                    ..SearchConfig::default()
                };
                if let Some(lr) = self.controller_lr {
                    search.controller_cfg.lr = lr;
                }
                search.validate().map_err(|e| anyhow::anyhow!("{}", e))?;
                let run = ResolvedRun {
                    name: if self.repeats > 1 { format!("{}-seed{}", base_name, seed) } else { base_name.clone() },
                    data: data.clone(),
                    search,
                    share,
                    train: self.train_config(setting, seed),
                    timing: self.timing,
                    out: None,
                };
                check_layers(&run, setting)?;
                run.train.validate().map_err(|e| anyhow::anyhow!("{}", e))?;
                out.push(run);
            }
        }
        if let Some(dir) = &self.out {
            for run in &mut out {
                run.out = Some(if multi { dir.join(&run.name) } else { dir.clone() });
            }
        }
        let mut names: Vec<&str> = out.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            bail!("run names must be unique; give variants distinct `name`s");
        }
        Ok(out)
    }
}

/// Layer-count rules: real data needs 2 or 3 layers; the surrogate accepts
/// any positive count; inductive data below 3 layers is legal but warned.
fn check_layers(run: &ResolvedRun, setting: Setting) -> anyhow::Result<()> {
    let n = run.search.n_layers;
    if run.is_surrogate() {
        if !(2..=3).contains(&n) {
            log::warn!("surrogate search with {} layer(s); real-data searches use 2 or 3", n);
        }
        return Ok(());
    }
    if !(2..=3).contains(&n) {
        bail!("layers must be 2 or 3 for dataset searches, got {}", n);
    }
    if setting == Setting::Inductive && n < 3 {
        log::warn!("inductive data with {} layers; skip connections need 3", n);
    }
    Ok(())
}
