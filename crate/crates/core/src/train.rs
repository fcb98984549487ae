//! Training recipes, evaluation metrics and the surrogate fitness landscape.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gnn::{CompiledModel, Topology};
use crate::graph::{DatasetBundle, Graph, Labels, Setting, Split};
use crate::math::mix_seed;
use crate::registry::ParameterRegistry;
use crate::space::{ActionClass, Architecture, LayerSpec};
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub setting: Setting,
    /// Epochs for a freshly initialized model.
    pub epochs: usize,
    /// Epochs after inheriting shared weights.
    pub warmup_epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub dropout: f64,
    /// Graphs per minibatch (inductive only).
    pub batch_graphs: usize,
    pub seed: u64,
    pub use_sharing: bool,
}

impl TrainConfig {
    /// Citation-style recipe: 200 epochs, 20 warm-up, dropout 0.6, L2 5e-4, lr 0.005.
    pub fn transductive() -> Self {
        Self {
            setting: Setting::Transductive,
            epochs: 200,
            warmup_epochs: 20,
            lr: 0.005,
            l2: 5e-4,
            dropout: 0.6,
            batch_graphs: 1,
            seed: 0,
            use_sharing: false,
        }
    }

    /// Variant for larger, sparser citation graphs: L2 1e-3, lr 0.01.
    pub fn transductive_large() -> Self {
        Self {
            lr: 0.01,
            l2: 1e-3,
            ..Self::transductive()
        }
    }

    /// Multi-graph recipe: 20 epochs fresh, 5 warm-up, batches of 2 graphs.
    pub fn inductive() -> Self {
        Self {
            setting: Setting::Inductive,
            epochs: 20,
            warmup_epochs: 5,
            lr: 0.005,
            l2: 0.0,
            dropout: 0.0,
            batch_graphs: 2,
            seed: 0,
            use_sharing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(Error::InvalidArgument(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.lr > 0.0) || self.l2 < 0.0 || self.batch_graphs == 0 {
            return Err(Error::InvalidArgument(String::from("dropout must be in [0,1), lr > 0, l2 >= 0, batch_graphs >= 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationRecord {
    pub trial_id: usize,
    pub architecture: Architecture,
    pub val_metric: f64,
    pub test_metric: Option<f64>,
    pub shared_tensor_count: usize,
    pub train_seconds: f64,
    pub epochs_run: usize,
    /// Set when training hit a non-finite loss.
    pub aborted: bool,
}

/// A dataset with per-graph message-passing structure precomputed.
#[derive(Clone, Debug)]
pub struct TrainingData {
    bundle: DatasetBundle,
    topologies: Vec<Topology>,
}

impl TrainingData {
    pub fn new(bundle: DatasetBundle) -> Result<Self> {
        let topologies = bundle.graphs.iter().map(Topology::new).collect::<Result<_>>()?;
        Ok(Self { bundle, topologies })
    }

    pub fn bundle(&self) -> &DatasetBundle {
        &self.bundle
    }

    pub fn feat_dim(&self) -> usize {
        self.bundle.feat_dim
    }

    pub fn num_classes(&self) -> usize {
        self.bundle.num_classes
    }

    fn eval_graphs(&self, split: Split) -> Vec<(&Graph, &Topology, Split)> {
        match self.bundle.setting {
            Setting::Transductive => vec![(&self.bundle.graphs[0], &self.topologies[0], split)],
            Setting::Inductive => self
                .bundle
                .graphs
                .iter()
                .zip(&self.topologies)
                .zip(&self.bundle.roles)
                .filter(|(_, &r)| r == split)
                .map(|((g, t), _)| (g, t, split))
                .collect(),
        }
    }
}

/// Counts for pooled metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Tally {
    correct: usize,
    total: usize,
    tp: usize,
    fp: usize,
    fnn: usize,
}

fn tally(logits: &Tensor, g: &Graph, split: Split, acc: &mut Tally) {
    let c = logits.cols();
    let mask = g.mask(split);
    match g.labels() {
        Labels::Single(labels) => {
            for (node, &m) in mask.iter().enumerate() {
                let Some(target) = labels[node].filter(|_| m) else {
                    continue;
                };
                let row = logits.row(node);
                let mut best = 0;
                for k in 1..c {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                acc.total += 1;
                acc.correct += usize::from(best == target);
            }
        }
        Labels::Multi(labels) => {
            for (node, &m) in mask.iter().enumerate() {
                if !m {
                    continue;
                }
                acc.total += 1;
                for (k, &t) in labels[node].iter().enumerate() {
                    let p = logits.row(node)[k] > 0.0;
                    match (p, t) {
                        (true, true) => acc.tp += 1,
                        (true, false) => acc.fp += 1,
                        (false, true) => acc.fnn += 1,
                        _ => {}
                    }
                }
            }
        }
    }
}

fn f1_from_counts(tp: usize, fp: usize, fnn: usize) -> f64 {
    let denom = 2 * tp + fp + fnn;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Micro-averaged F1 over all `(node, class)` cells.
pub fn micro_f1(pred: &[Vec<bool>], target: &[Vec<bool>]) -> Result<f64> {
    if pred.len() != target.len() || pred.iter().zip(target).any(|(p, t)| p.len() != t.len()) {
        return Err(Error::Shape {
            op: "micro_f1",
            detail: format!("{} prediction rows vs {} target rows", pred.len(), target.len()),
        });
    }
    let (mut tp, mut fp, mut fnn) = (0, 0, 0);
    for (p, t) in pred.iter().zip(target) {
        for (&a, &b) in p.iter().zip(t) {
            match (a, b) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                _ => {}
            }
        }
    }
    Ok(f1_from_counts(tp, fp, fnn))
}

/// Accuracy (single-label, argmax) or micro-F1 (multi-label, logit > 0) on
/// `split`, in eval mode.
pub fn evaluate(model: &CompiledModel, data: &TrainingData, split: Split) -> Result<f64> {
    let mut acc = Tally::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (g, topo, s) in data.eval_graphs(split) {
        let logits = model.predict(g, topo, false, 0.0, &mut rng)?;
        if !logits.is_finite() {
            return Ok(0.0);
        }
        tally(&logits, g, s, &mut acc);
    }
    if acc.total == 0 {
        return Err(Error::Empty("evaluation split"));
    }
    Ok(if data.bundle.multi_label {
        f1_from_counts(acc.tp, acc.fp, acc.fnn)
    } else {
        acc.correct as f64 / acc.total as f64
    })
}

/// One optimization step on `g`; returns the loss value.
fn step(
    model: &mut CompiledModel,
    g: &Graph,
    topo: &Topology,
    cfg: &TrainConfig,
    adam: &AdamConfig,
    states: &mut [AdamState],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let x = tape.constant(g.features().clone());
    let out = model.forward(&mut tape, &vars, x, topo, true, cfg.dropout, rng)?;
    let rows = g.split_nodes(Split::Train);
    if rows.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let loss = match g.labels() {
        Labels::Single(labels) => {
            let targets: Vec<usize> = rows.iter().map(|&r| labels[r].expect("masked nodes are labeled")).collect();
            tape.cross_entropy(out.logits, &rows, &targets)?
        }
        Labels::Multi(labels) => {
            let targets: Vec<f64> = rows
                .iter()
                .flat_map(|&r| labels[r].iter().map(|&b| if b { 1.0 } else { 0.0 }))
                .collect();
            tape.bce_with_logits(out.logits, &rows, &targets)?
        }
    };
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Ok(value);
    }
    let stats = out.batch_stats;
    let mut grads = tape.backward(loss)?;
    for (i, var) in vars.iter().enumerate() {
        if let Some(gr) = grads.take(*var) {
            adam_step(&mut model.params_mut()[i], &gr, &mut states[i], adam)?;
        }
    }
    model.update_running_stats(&stats);
    Ok(value)
}

/// Trains `model` under `cfg` and scores it on the validation split.
///
/// With sharing enabled and a registry given, matching tensors are inherited
/// first and only `warmup_epochs` are run; the trained shareable tensors are
/// written back afterwards unless the run aborted on a non-finite loss.
pub fn train(
    model: &mut CompiledModel,
    data: &TrainingData,
    cfg: &TrainConfig,
    mut reg: Option<&mut ParameterRegistry>,
    trial_id: usize,
) -> Result<EvaluationRecord> {
    cfg.validate()?;
    if model.in_dim() != data.feat_dim() || model.num_classes() != data.num_classes() {
        return Err(Error::Shape {
            op: "train",
            detail: format!(
                "model {}→{} vs data {}→{}",
                model.in_dim(),
                model.num_classes(),
                data.feat_dim(),
                data.num_classes()
            ),
        });
    }
    let sharing = cfg.use_sharing && reg.is_some();
    let shared = match reg.as_deref_mut() {
        Some(r) if sharing => r.inherit(model)?,
        _ => 0,
    };
    let epochs = if sharing { cfg.warmup_epochs } else { cfg.epochs };
    let adam = AdamConfig::new(cfg.lr, cfg.l2);
    let mut states: Vec<AdamState> = model.params().iter().map(|p| AdamState::new(p.len())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, trial_id as u64));
    let mut aborted = false;
    let mut run = 0;
    'epochs: for _ in 0..epochs {
        match data.bundle.setting {
            Setting::Transductive => {
                let loss = step(model, &data.bundle.graphs[0], &data.topologies[0], cfg, &adam, &mut states, &mut rng)?;
                if !loss.is_finite() {
                    aborted = true;
                    break 'epochs;
                }
            }
            Setting::Inductive => {
                let mut order: Vec<usize> = (0..data.bundle.graphs.len())
                    .filter(|&i| data.bundle.roles[i] == Split::Train)
                    .collect();
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_graphs) {
                    let loss = if chunk.len() == 1 {
                        step(model, &data.bundle.graphs[chunk[0]], &data.topologies[chunk[0]], cfg, &adam, &mut states, &mut rng)?
                    } else {
                        let parts: Vec<&Graph> = chunk.iter().map(|&i| &data.bundle.graphs[i]).collect();
                        let union = Graph::disjoint_union(&parts)?;
                        let topo = Topology::new(&union)?;
                        step(model, &union, &topo, cfg, &adam, &mut states, &mut rng)?
                    };
                    if !loss.is_finite() {
                        aborted = true;
                        break 'epochs;
                    }
                }
            }
        }
        run += 1;
    }
    let val_metric = if aborted || model.params().iter().any(|p| !p.is_finite()) {
        aborted = true;
        0.0
    } else {
        evaluate(model, data, Split::Val)?
    };
    if let Some(r) = reg {
        if sharing && !aborted {
            r.writeback(model, trial_id, val_metric);
        }
    }
    Ok(EvaluationRecord {
        trial_id,
        architecture: model.architecture().clone(),
        val_metric,
        test_metric: None,
        shared_tensor_count: shared,
        train_seconds: 0.0,
        epochs_run: run,
        aborted,
    })
}

/// Weight of the per-layer aggregator × activation interaction term.
pub const SURROGATE_INTERACTION: f64 = 0.2;

/// Deterministic synthetic fitness over architectures.
///
/// Each layer draws a utility in `[0, 1)` for every `(class, value)` pair plus
/// an aggregator × activation interaction table, all from `(seed, layer)`.
/// The score of an architecture is the sum over its layers of the six
/// utilities plus the weighted interaction, divided by its maximum possible
/// value `n · (6 + λ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateLandscape {
    seed: u64,
    utilities: Vec<[Vec<f64>; 6]>,
    interaction: Vec<Vec<f64>>,
}

impl SurrogateLandscape {
    pub fn new(seed: u64, n_layers: usize) -> Self {
        let mut utilities = Vec::with_capacity(n_layers);
        let mut interaction = Vec::with_capacity(n_layers);
        for layer in 0..n_layers {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5eed_0000 + layer as u64));
            let table = ActionClass::ALL.map(|c| (0..c.cardinality()).map(|_| rng.random::<f64>()).collect::<Vec<f64>>());
            let agg = ActionClass::ALL[3].cardinality();
            let act = ActionClass::ALL[5].cardinality();
            interaction.push((0..agg * act).map(|_| rng.random::<f64>()).collect());
            utilities.push(table);
        }
        Self {
            seed,
            utilities,
            interaction,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_layers(&self) -> usize {
        self.utilities.len()
    }

    /// Unnormalized contribution of `spec` placed at `layer`.
    pub fn layer_raw(&self, layer: usize, spec: &LayerSpec) -> f64 {
        let ch = spec.choices();
        let u = &self.utilities[layer];
        let act_n = ActionClass::ALL[5].cardinality();
        let sep: f64 = (0..6).map(|c| u[c][ch[c]]).sum();
        sep + SURROGATE_INTERACTION * self.interaction[layer][ch[3] * act_n + ch[5]]
    }

    pub fn score(&self, a: &Architecture) -> Result<f64> {
        let n = a.num_layers();
        if n != self.num_layers() {
            return Err(Error::InvalidArgument(format!(
                "landscape has {} layers, architecture {}",
                self.num_layers(),
                n
            )));
        }
        let raw: f64 = a.layers().iter().enumerate().map(|(l, s)| self.layer_raw(l, s)).sum();
        Ok(raw / (n as f64 * (6.0 + SURROGATE_INTERACTION)))
    }

    /// Best achievable score and one maximizer, by enumerating all 14112
    /// combinations of every layer independently.
    pub fn optimum(&self) -> (f64, Architecture) {
        let mut layers = Vec::with_capacity(self.num_layers());
        let mut raw = 0.0;
        for l in 0..self.num_layers() {
            let mut best = (f64::NEG_INFINITY, LayerSpec::default());
            for_each_layer_spec(|spec| {
                let v = self.layer_raw(l, &spec);
                if v > best.0 {
                    best = (v, spec);
                }
            });
            raw += best.0;
            layers.push(best.1);
        }
        let n = self.num_layers() as f64;
        (
            raw / (n * (6.0 + SURROGATE_INTERACTION)),
            Architecture::new(layers).expect("at least one layer"),
        )
    }
}

/// Calls `f` on each of the 14112 single-layer specs in lexicographic order
/// of class choices.
pub fn for_each_layer_spec(mut f: impl FnMut(LayerSpec)) {
    let card = ActionClass::ALL.map(ActionClass::cardinality);
    let mut ch = [0usize; 6];
    loop {
        f(LayerSpec::from_choices(ch));
        let mut pos = 5;
        loop {
            ch[pos] += 1;
            if ch[pos] < card[pos] {
                break;
            }
            ch[pos] = 0;
            if pos == 0 {
                return;
            }
            pos -= 1;
        }
    }
}

/// Score of `a` on the landscape drawn from `landscape_seed`.
pub fn surrogate_evaluate(a: &Architecture, landscape_seed: u64) -> f64 {
    SurrogateLandscape::new(landscape_seed, a.num_layers())
        .score(a)
        .expect("landscape sized to the architecture")
}
