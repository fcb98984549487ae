//! Graphs, datasets and the planted-partition benchmark generator.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math::mix_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    /// One class id per node; `None` for unlabeled nodes.
    Single(Vec<Option<usize>>),
    /// Independent binary targets per class.
    Multi(Vec<Vec<bool>>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Single(v) => v.len(),
            Labels::Multi(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_multi(&self) -> bool {
        matches!(self, Labels::Multi(_))
    }

    pub fn has_label(&self, node: usize) -> bool {
        match self {
            Labels::Single(v) => v[node].is_some(),
            Labels::Multi(_) => true,
        }
    }
}

/// Counters for edge-list cleanup performed by [`Graph::new`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EdgeReport {
    /// Input pairs whose reverse direction was missing and had to be added.
    pub symmetrized: usize,
    pub duplicates: usize,
    pub self_loops: usize,
}

/// Undirected node-labelled graph in compressed neighbor-list form.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    features: Tensor,
    labels: Labels,
    num_classes: usize,
    masks: [Vec<bool>; 3],
}

impl Graph {
    /// Builds a validated graph. Edges are symmetrized, deduplicated and
    /// stripped of self-loops; `masks` are indexed by [`Split`] order.
    pub fn new(
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Tensor,
        labels: Labels,
        num_classes: usize,
        masks: [Vec<bool>; 3],
    ) -> Result<(Self, EdgeReport)> {
        if features.rows() != num_nodes || features.shape().len() != 2 {
            return Err(Error::Invariant(format!(
                "feature matrix {:?} does not have {} rows",
                features.shape(),
                num_nodes
            )));
        }
        if labels.len() != num_nodes {
            return Err(Error::Invariant(format!("{} labels for {} nodes", labels.len(), num_nodes)));
        }
        match &labels {
            Labels::Single(v) => {
                if let Some(c) = v.iter().flatten().find(|&&c| c >= num_classes) {
                    return Err(Error::Invariant(format!("label {} outside {} classes", c, num_classes)));
                }
            }
            Labels::Multi(v) => {
                if v.iter().any(|b| b.len() != num_classes) {
                    return Err(Error::Invariant(String::from("multi-label row width differs from class count")));
                }
            }
        }
        for m in &masks {
            if m.len() != num_nodes {
                return Err(Error::Invariant(format!("mask of length {} for {} nodes", m.len(), num_nodes)));
            }
        }
        for i in 0..num_nodes {
            let count = masks.iter().filter(|m| m[i]).count();
            if count > 1 {
                return Err(Error::Invariant(format!("masks overlap at node {}", i)));
            }
            if count == 1 && !labels.has_label(i) {
                return Err(Error::Invariant(format!("masked node {} has no label", i)));
            }
        }

        let mut report = EdgeReport::default();
        let mut directed: Vec<(usize, usize)> = Vec::with_capacity(edges.len() * 2);
        for &(a, b) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::Invariant(format!("edge ({}, {}) references a node >= {}", a, b, num_nodes)));
            }
            if a == b {
                report.self_loops += 1;
                continue;
            }
            directed.push((a, b));
        }
        directed.sort_unstable();
        let before = directed.len();
        directed.dedup();
        report.duplicates = before - directed.len();
        let mut missing = 0;
        for &(a, b) in &directed {
            if directed.binary_search(&(b, a)).is_err() {
                missing += 1;
            }
        }
        report.symmetrized = missing;
        let mut all: Vec<(usize, usize)> = directed.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
        all.sort_unstable();
        all.dedup();

        let mut offsets = vec![0usize; num_nodes + 1];
        for &(a, _) in &all {
            offsets[a + 1] += 1;
        }
        for i in 0..num_nodes {
            offsets[i + 1] += offsets[i];
        }
        let neighbors = all.into_iter().map(|(_, b)| b).collect();
        Ok((
            Self {
                offsets,
                neighbors,
                features,
                labels,
                num_classes,
                masks,
            },
            report,
        ))
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    /// Sorted neighbor ids of `node`.
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    /// Undirected edges as `(i, j)` with `i < j`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes()).flat_map(move |i| self.neighbors(i).iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn mask(&self, split: Split) -> &[bool] {
        &self.masks[split as usize]
    }

    pub fn masks(&self) -> &[Vec<bool>; 3] {
        &self.masks
    }

    pub fn split_nodes(&self, split: Split) -> Vec<usize> {
        self.mask(split).iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(String::from("not a permutation of the node set")));
        }
        let cols = self.feat_dim();
        let mut feats = vec![0.0; n * cols];
        for i in 0..n {
            feats[perm[i] * cols..(perm[i] + 1) * cols].copy_from_slice(self.features.row(i));
        }
        let labels = match &self.labels {
            Labels::Single(v) => {
                let mut out = vec![None; n];
                for i in 0..n {
                    out[perm[i]] = v[i];
                }
                Labels::Single(out)
            }
            Labels::Multi(v) => {
                let mut out = vec![Vec::new(); n];
                for i in 0..n {
                    out[perm[i]] = v[i].clone();
                }
                Labels::Multi(out)
            }
        };
        let masks = self.masks.clone().map(|m| {
            let mut out = vec![false; n];
            for i in 0..n {
                out[perm[i]] = m[i];
            }
            out
        });
        let edges: Vec<(usize, usize)> = self.edges().map(|(a, b)| (perm[a], perm[b])).collect();
        Ok(Self::new(n, &edges, Tensor::matrix(n, cols, feats)?, labels, self.num_classes, masks)?.0)
    }

    /// Disjoint union with node ids offset graph by graph.
    pub fn disjoint_union(graphs: &[&Graph]) -> Result<Self> {
        let Some(first) = graphs.first() else {
            return Err(Error::Empty("graph list"));
        };
        let cols = first.feat_dim();
        let classes = first.num_classes;
        let multi = first.labels.is_multi();
        let total: usize = graphs.iter().map(|g| g.num_nodes()).sum();
        let mut feats = Vec::with_capacity(total * cols);
        let mut single = Vec::new();
        let mut multi_rows = Vec::new();
        let mut masks: [Vec<bool>; 3] = Default::default();
        let mut edges = Vec::new();
        let mut offset = 0;
        for g in graphs {
            if g.feat_dim() != cols || g.num_classes != classes || g.labels.is_multi() != multi {
                return Err(Error::InvalidArgument(String::from("graphs in a union must share feature and label layout")));
            }
            feats.extend_from_slice(g.features.data());
            match &g.labels {
                Labels::Single(v) => single.extend_from_slice(v),
                Labels::Multi(v) => multi_rows.extend(v.iter().cloned()),
            }
            for (m, src) in masks.iter_mut().zip(&g.masks) {
                m.extend_from_slice(src);
            }
            edges.extend(g.edges().map(|(a, b)| (a + offset, b + offset)));
            offset += g.num_nodes();
        }
        let labels = if multi { Labels::Multi(multi_rows) } else { Labels::Single(single) };
        Ok(Self::new(total, &edges, Tensor::matrix(total, cols, feats)?, labels, classes, masks)?.0)
    }
}

/// `deg(i) = |N(i)|` for every node.
pub fn degrees(g: &Graph) -> Vec<usize> {
    (0..g.num_nodes()).map(|i| g.degree(i)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Setting {
    Transductive,
    Inductive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub setting: Setting,
    pub graphs: Vec<Graph>,
    /// Role of each graph; only meaningful for inductive bundles.
    pub roles: Vec<Split>,
    pub num_classes: usize,
    pub multi_label: bool,
    pub feat_dim: usize,
}

impl DatasetBundle {
    pub fn transductive(graph: Graph) -> Self {
        Self {
            setting: Setting::Transductive,
            num_classes: graph.num_classes(),
            multi_label: graph.labels().is_multi(),
            feat_dim: graph.feat_dim(),
            roles: vec![Split::Train],
            graphs: vec![graph],
        }
    }

    pub fn inductive(graphs: Vec<Graph>, roles: Vec<Split>) -> Result<Self> {
        let Some(first) = graphs.first() else {
            return Err(Error::Empty("inductive bundle"));
        };
        if roles.len() != graphs.len() {
            return Err(Error::Invariant(format!("{} roles for {} graphs", roles.len(), graphs.len())));
        }
        let (classes, multi, feats) = (first.num_classes(), first.labels().is_multi(), first.feat_dim());
        if graphs.iter().any(|g| g.num_classes() != classes || g.labels().is_multi() != multi || g.feat_dim() != feats) {
            return Err(Error::Invariant(String::from("graphs disagree on feature or label layout")));
        }
        for split in [Split::Train, Split::Val] {
            if !roles.contains(&split) {
                return Err(Error::Invariant(format!("inductive bundle has no {} graph", split.name())));
            }
        }
        Ok(Self {
            setting: Setting::Inductive,
            graphs,
            roles,
            num_classes: classes,
            multi_label: multi,
            feat_dim: feats,
        })
    }

    pub fn graphs_with_role(&self, split: Split) -> Vec<&Graph> {
        self.graphs.iter().zip(&self.roles).filter(|(_, &r)| r == split).map(|(g, _)| g).collect()
    }
}

/// Planted-partition benchmark parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SbmConfig {
    pub nodes: usize,
    pub classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feat_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

pub const TRAIN_PER_CLASS: usize = 20;
pub const VAL_CAP: usize = 500;

fn check_sbm(cfg: &SbmConfig) -> Result<()> {
    if !(0.0 <= cfg.p_out && cfg.p_out < cfg.p_in && cfg.p_in <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= p_out < p_in <= 1, got p_in={} p_out={}",
            cfg.p_in, cfg.p_out
        )));
    }
    if cfg.classes == 0 || cfg.nodes == 0 || cfg.nodes % cfg.classes != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} nodes are not divisible into {} classes",
            cfg.nodes, cfg.classes
        )));
    }
    if cfg.feat_dim < cfg.classes {
        return Err(Error::InvalidArgument(format!(
            "feature width {} cannot hold a one-hot of {} classes",
            cfg.feat_dim, cfg.classes
        )));
    }
    Ok(())
}

struct SbmDraw {
    classes: Vec<usize>,
    edges: Vec<(usize, usize)>,
    features: Tensor,
}

fn draw_sbm(cfg: &SbmConfig, rng: &mut ChaCha8Rng) -> Result<SbmDraw> {
    let n = cfg.nodes;
    let block = n / cfg.classes;
    let classes: Vec<usize> = (0..n).map(|i| i / block).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if classes[i] == classes[j] { cfg.p_in } else { cfg.p_out };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let mut feats = vec![0.0; n * cfg.feat_dim];
    for i in 0..n {
        feats[i * cfg.feat_dim + classes[i]] = 1.0;
    }
    if cfg.noise != 0.0 {
        for v in feats.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += cfg.noise * z;
        }
    }
    Ok(SbmDraw {
        classes,
        edges,
        features: Tensor::matrix(n, cfg.feat_dim, feats)?,
    })
}

/// Single-graph transductive planted-partition dataset.
///
/// Nodes `[c·n/k, (c+1)·n/k)` form class `c`. Each class contributes
/// `min(20, class_size / 2)` training nodes; of the rest, `min(500, rest / 2)`
/// go to validation and the remainder to test.
pub fn generate_sbm(cfg: &SbmConfig) -> Result<DatasetBundle> {
    check_sbm(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draw = draw_sbm(cfg, &mut rng)?;
    let n = cfg.nodes;
    let block = n / cfg.classes;
    let per_class = TRAIN_PER_CLASS.min(block / 2);
    let mut masks: [Vec<bool>; 3] = [vec![false; n], vec![false; n], vec![false; n]];
    let mut rest = Vec::new();
    for c in 0..cfg.classes {
        let mut members: Vec<usize> = (c * block..(c + 1) * block).collect();
        members.shuffle(&mut rng);
        for (k, &v) in members.iter().enumerate() {
            if k < per_class {
                masks[0][v] = true;
            } else {
                rest.push(v);
            }
        }
    }
    rest.shuffle(&mut rng);
    let n_val = VAL_CAP.min(rest.len() / 2);
    for (k, &v) in rest.iter().enumerate() {
        masks[if k < n_val { 1 } else { 2 }][v] = true;
    }
    let labels = Labels::Single(draw.classes.into_iter().map(Some).collect());
    let (g, _) = Graph::new(n, &draw.edges, draw.features, labels, cfg.classes, masks)?;
    Ok(DatasetBundle::transductive(g))
}

/// Multi-graph, multi-label inductive dataset built from independent
/// planted-partition graphs.
///
/// Targets have `classes + 1` bits: the community one-hot plus a structural
/// bit set when the node's degree exceeds its graph's mean degree. Every node
/// of a graph is masked with that graph's role.
pub fn generate_inductive_sbm(cfg: &SbmConfig, train: usize, val: usize, test: usize) -> Result<DatasetBundle> {
    check_sbm(cfg)?;
    let roles: Vec<Split> = core::iter::repeat_n(Split::Train, train)
        .chain(core::iter::repeat_n(Split::Val, val))
        .chain(core::iter::repeat_n(Split::Test, test))
        .collect();
    let mut graphs = Vec::with_capacity(roles.len());
    for (idx, &role) in roles.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, idx as u64 + 1));
        let draw = draw_sbm(cfg, &mut rng)?;
        let n = cfg.nodes;
        let mut deg = vec![0usize; n];
        for &(a, b) in &draw.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        let mean = deg.iter().sum::<usize>() as f64 / n as f64;
        let labels = Labels::Multi(
            (0..n)
                .map(|i| {
                    let mut bits = vec![false; cfg.classes + 1];
                    bits[draw.classes[i]] = true;
                    bits[cfg.classes] = deg[i] as f64 > mean;
                    bits
                })
                .collect(),
        );
        let mut masks: [Vec<bool>; 3] = [vec![false; n], vec![false; n], vec![false; n]];
        masks[role as usize] = vec![true; n];
        let (g, _) = Graph::new(n, &draw.edges, draw.features, labels, cfg.classes + 1, masks)?;
        graphs.push(g);
    }
    DatasetBundle::inductive(graphs, roles)
}
