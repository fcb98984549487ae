//! The propose → train → evaluate → update loop and its summaries.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::controller::{ControllerConfig, ControllerState, Proposal};
use crate::error::{Error, Result};
use crate::gnn::CompiledModel;
use crate::graph::Split;
use crate::math::mix_seed;
use crate::registry::{ParameterRegistry, SharingPolicy};
use crate::space::Architecture;
use crate::train::{evaluate, train, EvaluationRecord, SurrogateLandscape, TrainConfig, TrainingData};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControllerKind {
    /// Guided rewrite of `s` classes of the best architecture.
    Agnn,
    /// Rewrite all six classes each trial.
    FullResample,
    /// Uniform random architectures.
    Random,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Agnn => "agnn",
            ControllerKind::FullResample => "resample",
            ControllerKind::Random => "random",
        }
    }
}

impl core::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agnn" => Ok(ControllerKind::Agnn),
            "resample" | "full_resample" | "full-resample" => Ok(ControllerKind::FullResample),
            "random" => Ok(ControllerKind::Random),
            other => Err(Error::InvalidArgument(format!(
                "unknown controller `{}` (expected agnn, resample or random)",
                other
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchConfig {
    pub controller: ControllerKind,
    pub trials: usize,
    pub n_layers: usize,
    pub s: usize,
    pub restart_slots: usize,
    pub seed: u64,
    /// Controller hyperparameters; `s`, `n_layers`, `restart_slots` and
    /// `seed` are overwritten from the fields above.
    pub controller_cfg: ControllerConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            controller: ControllerKind::Agnn,
            trials: 300,
            n_layers: 2,
            s: 1,
            restart_slots: 1,
            seed: 0,
            controller_cfg: ControllerConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn controller_config(&self) -> ControllerConfig {
        ControllerConfig {
            s: self.s,
            n_layers: self.n_layers,
            restart_slots: self.restart_slots,
            seed: self.seed,
            ..self.controller_cfg
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidArgument(String::from("trials must be positive")));
        }
        self.controller_config().validate()
    }
}

/// Scores architectures for the search loop.
pub trait Evaluator {
    /// Trains (or scores) `arch` and reports its validation metric.
    fn evaluate(&mut self, arch: &Architecture, trial_id: usize) -> Result<EvaluationRecord>;

    /// Held-out metric of the trial chosen as the final best; called at most
    /// once per search.
    fn test(&mut self, arch: &Architecture, trial_id: usize) -> Result<Option<f64>>;
}

/// Monotone seconds counter used to time trials.
pub trait Clock {
    fn now(&self) -> f64;
}

/// Clock that always reads zero, for reproducible logs.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullClock;

impl Clock for NullClock {
    fn now(&self) -> f64 {
        0.0
    }
}

/// Synthetic fitness; no training involved.
#[derive(Clone, Debug)]
pub struct SurrogateEvaluator {
    landscape: SurrogateLandscape,
}

impl SurrogateEvaluator {
    pub fn new(landscape_seed: u64, n_layers: usize) -> Self {
        Self {
            landscape: SurrogateLandscape::new(landscape_seed, n_layers),
        }
    }

    pub fn landscape(&self) -> &SurrogateLandscape {
        &self.landscape
    }
}

impl Evaluator for SurrogateEvaluator {
    fn evaluate(&mut self, arch: &Architecture, trial_id: usize) -> Result<EvaluationRecord> {
        Ok(EvaluationRecord {
            trial_id,
            architecture: arch.clone(),
            val_metric: self.landscape.score(arch)?,
            test_metric: None,
            shared_tensor_count: 0,
            train_seconds: 0.0,
            epochs_run: 0,
            aborted: false,
        })
    }

    fn test(&mut self, arch: &Architecture, _trial_id: usize) -> Result<Option<f64>> {
        Ok(Some(self.landscape.score(arch)?))
    }
}

/// Builds, trains and validates a real GNN per trial, keeping the best
/// trained model so the final test score uses those exact weights.
#[derive(Clone, Debug)]
pub struct GnnEvaluator {
    data: TrainingData,
    cfg: TrainConfig,
    registry: Option<ParameterRegistry>,
    best: Option<(usize, f64, CompiledModel)>,
}

impl GnnEvaluator {
    /// `sharing` of `None` trains every trial from scratch.
    pub fn new(data: TrainingData, cfg: TrainConfig, sharing: Option<SharingPolicy>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            data,
            cfg: TrainConfig {
                use_sharing: sharing.is_some(),
                ..cfg
            },
            registry: sharing.map(ParameterRegistry::new),
            best: None,
        })
    }

    pub fn registry(&self) -> Option<&ParameterRegistry> {
        self.registry.as_ref()
    }

    pub fn data(&self) -> &TrainingData {
        &self.data
    }

    pub fn best_model(&self) -> Option<&CompiledModel> {
        self.best.as_ref().map(|b| &b.2)
    }
}

impl Evaluator for GnnEvaluator {
    fn evaluate(&mut self, arch: &Architecture, trial_id: usize) -> Result<EvaluationRecord> {
        let mut model = CompiledModel::build(
            arch,
            self.data.feat_dim(),
            self.data.num_classes(),
            mix_seed(self.cfg.seed, 0x6d0d_0000 + trial_id as u64),
        )?;
        let rec = train(&mut model, &self.data, &self.cfg, self.registry.as_mut(), trial_id)?;
        if self.best.as_ref().is_none_or(|b| rec.val_metric > b.1) {
            self.best = Some((trial_id, rec.val_metric, model));
        }
        Ok(rec)
    }

    fn test(&mut self, _arch: &Architecture, trial_id: usize) -> Result<Option<f64>> {
        match &self.best {
            Some((t, _, model)) if *t == trial_id => Ok(Some(evaluate(model, &self.data, Split::Test)?)),
            _ => Err(Error::Invariant(format!("trial {} is not the retained best model", trial_id))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SearchLog {
    pub config: SearchConfig,
    pub records: Vec<EvaluationRecord>,
    /// Trial id of the final best architecture.
    pub best_trial: usize,
    pub test_metric: Option<f64>,
    pub total_seconds: f64,
    /// Final controller state (absent for random search).
    pub controller: Option<ControllerState>,
}

impl SearchLog {
    pub fn best(&self) -> &EvaluationRecord {
        &self.records[self.best_trial - 1]
    }

    pub fn val_metrics(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.val_metric).collect()
    }
}

/// Runs `cfg.trials` evaluations. Each restart slot's random starting
/// architecture counts as a trial. `observer` sees every record as soon as
/// it is produced.
pub fn run_search(
    cfg: &SearchConfig,
    evaluator: &mut dyn Evaluator,
    clock: &dyn Clock,
    observer: &mut dyn FnMut(&EvaluationRecord) -> Result<()>,
) -> Result<SearchLog> {
    cfg.validate()?;
    let start = clock.now();
    let mut state = ControllerState::new(cfg.controller_config())?;
    let mut records: Vec<EvaluationRecord> = Vec::with_capacity(cfg.trials);
    let mut run_trial = |arch: &Architecture, records: &mut Vec<EvaluationRecord>| -> Result<f64> {
        let id = records.len() + 1;
        let t0 = clock.now();
        let mut rec = evaluator.evaluate(arch, id)?;
        rec.trial_id = id;
        rec.train_seconds = clock.now() - t0;
        if !(0.0..=1.0).contains(&rec.val_metric) {
            return Err(Error::Invariant(format!("trial {} reported metric {}", id, rec.val_metric)));
        }
        observer(&rec)?;
        let m = rec.val_metric;
        records.push(rec);
        Ok(m)
    };
    if cfg.controller != ControllerKind::Random {
        for slot in 0..cfg.restart_slots {
            if records.len() == cfg.trials {
                break;
            }
            let arch = state.initial_candidate()?;
            let m = run_trial(&arch, &mut records)?;
            state.set_best(slot, arch, m)?;
        }
    }
    while records.len() < cfg.trials {
        let proposal: Proposal = match cfg.controller {
            ControllerKind::Agnn => state.propose()?,
            ControllerKind::FullResample => state.propose_full_resample()?,
            ControllerKind::Random => state.propose_random()?,
        };
        let m = run_trial(&proposal.offspring, &mut records)?;
        state.update(&proposal, m)?;
    }
    let mut best_idx = 0;
    for (i, r) in records.iter().enumerate() {
        if r.val_metric > records[best_idx].val_metric {
            best_idx = i;
        }
    }
    let best_trial = best_idx + 1;
    let arch = records[best_idx].architecture.clone();
    let test_metric = evaluator.test(&arch, best_trial)?;
    records[best_idx].test_metric = test_metric;
    Ok(SearchLog {
        config: *cfg,
        records,
        best_trial,
        test_metric,
        total_seconds: clock.now() - start,
        controller: match cfg.controller {
            ControllerKind::Random => None,
            _ => Some(state),
        },
    })
}

/// Convenience wrapper without an observer.
pub fn run_search_quiet(cfg: &SearchConfig, evaluator: &mut dyn Evaluator) -> Result<SearchLog> {
    let mut noop = |_: &EvaluationRecord| Ok(());
    run_search(cfg, evaluator, &NullClock, &mut noop)
}

/// `(trial, mean of the k largest metrics among trials 1..=trial)`.
pub fn top_k_progression(metrics: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(Error::InvalidArgument(String::from("k must be at least 1")));
    }
    if metrics.is_empty() {
        return Err(Error::Empty("search log"));
    }
    // descending top-k buffer
    let mut top: Vec<f64> = Vec::with_capacity(k + 1);
    let mut out = Vec::with_capacity(metrics.len());
    for (i, &m) in metrics.iter().enumerate() {
        let pos = top.iter().position(|&v| m > v).unwrap_or(top.len());
        if pos < k {
            top.insert(pos, m);
            top.truncate(k);
        }
        out.push((i + 1, top.iter().sum::<f64>() / top.len() as f64));
    }
    Ok(out)
}

/// Empirical CDF: distinct metric values ascending with the fraction of
/// trials at or below each.
pub fn cumulative_distribution(metrics: &[f64]) -> Result<Vec<(f64, f64)>> {
    if metrics.is_empty() {
        return Err(Error::Empty("search log"));
    }
    let mut sorted = metrics.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => out.push((v, frac)),
        }
    }
    Ok(out)
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("sample"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Boxed evaluator, for callers that pick the kind at runtime.
pub type DynEvaluator = Box<dyn Evaluator + Send>;

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn progression_examples() {
        let p = top_k_progression(&[0.1, 0.9], 2).unwrap();
        assert_eq!(p, vec![(1, 0.1), (2, 0.5)]);
        let run = top_k_progression(&[0.3, 0.1, 0.5, 0.2], 1).unwrap();
        assert_eq!(run.iter().map(|x| x.1).collect::<Vec<_>>(), vec![0.3, 0.3, 0.5, 0.5]);
        assert!(top_k_progression(&[], 1).is_err());
        assert!(top_k_progression(&[0.1], 0).is_err());
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(cumulative_distribution(&[0.4]).unwrap(), vec![(0.4, 1.0)]);
        let c = cumulative_distribution(&[0.2, 0.1, 0.2, 0.3]).unwrap();
        assert_eq!(c, vec![(0.1, 0.25), (0.2, 0.75), (0.3, 1.0)]);
        assert!(cumulative_distribution(&[]).is_err());
    }

    #[test]
    fn single_trial_search() {
        let cfg = SearchConfig {
            trials: 1,
            ..Default::default()
        };
        let mut ev = SurrogateEvaluator::new(1, 2);
        let log = run_search_quiet(&cfg, &mut ev).unwrap();
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.best_trial, 1);
        assert_eq!(log.records[0].test_metric, log.test_metric);
    }

    #[test]
    fn controller_names_parse() {
        for k in [ControllerKind::Agnn, ControllerKind::FullResample, ControllerKind::Random] {
            assert_eq!(k.name().parse::<ControllerKind>().unwrap(), k);
        }
        assert!("evolution".parse::<ControllerKind>().is_err());
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
    }
}
