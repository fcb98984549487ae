//! Compiles an [`Architecture`] into a multi-head message-passing network.
//!
//! Per layer and head: `z = X W`; edge coefficients from the attention row
//! (softmax-normalized over each destination's in-edges for learned rows,
//! used raw for `constant` and `gcn`); `h_i = AGG_j(coef_ij · z_j)`;
//! `c_i = [z_i ‖ h_i]` passed through the combiner. Heads are concatenated in
//! intermediate layers and averaged in the last one, then batch-norm and the
//! activation are applied. A linear head maps to class logits.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::math::{self, mix_seed};
use crate::registry::{Role, ShareKey};
use crate::space::{Aggregator, Architecture, AttentionFn, Combiner, LayerSpec};
use crate::tensor::{glorot_init, Activation, ReduceMode, Segments, Tape, Tensor, Var};

/// Hidden width of the MLP combiner.
pub const MLP_HIDDEN: usize = 128;
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Edge structure of a graph in destination-sorted order, ready for
/// message passing. Edge `e` carries a message from `src[e]` into `dst[e]`.
#[derive(Clone, Debug)]
pub struct Topology {
    num_nodes: usize,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    reverse: Arc<[usize]>,
    segments: Segments,
    gcn: Tensor,
}

impl Topology {
    pub fn new(g: &Graph) -> Result<Self> {
        let n = g.num_nodes();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for i in 0..n {
            for &j in g.neighbors(i) {
                dst.push(i);
                src.push(j);
            }
        }
        let offsets: Vec<usize> = (0..=n).scan(0, |acc, i| {
            let out = *acc;
            if i < n {
                *acc += g.degree(i);
            }
            Some(out)
        }).collect();
        let reverse: Vec<usize> = dst
            .iter()
            .zip(&src)
            .map(|(&i, &j)| {
                let pos = g.neighbors(j).binary_search(&i).expect("graph adjacency is symmetric");
                offsets[j] + pos
            })
            .collect();
        let gcn: Vec<f64> = dst
            .iter()
            .zip(&src)
            .map(|(&i, &j)| 1.0 / math::sqrt((g.degree(i) * g.degree(j)) as f64))
            .collect();
        let e = dst.len();
        Ok(Self {
            num_nodes: n,
            segments: Segments::new(dst.clone(), n)?,
            src: src.into(),
            dst: dst.into(),
            reverse: reverse.into(),
            gcn: Tensor::new(&[e, 1], gcn)?,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn segments(&self) -> &Segments {
        &self.segments
    }
}

/// Raw (pre-normalization) score of one edge for a single head.
///
/// `z_dst`/`z_src` are the transformed embeddings of the receiving node `i`
/// and the sending node `j`. Rows whose formula references only `z_i` use it
/// twice, exactly as written in the attention table.
pub fn attention_score(
    kind: AttentionFn,
    params: &AttentionParams<'_>,
    z_dst: &[f64],
    z_src: &[f64],
    deg_dst: usize,
    deg_src: usize,
) -> Result<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let d = z_dst.len();
    let gat = |zi: &[f64], zj: &[f64], a: &[f64]| dot(&a[..d], zi) + dot(&a[d..], zj);
    fn need<'a>(kind: AttentionFn, p: Option<&'a [f64]>) -> Result<&'a [f64]> {
        p.ok_or_else(|| Error::InvalidArgument(format!("{} needs attention parameters", kind.name())))
    }
    Ok(match kind {
        AttentionFn::Constant => 1.0,
        AttentionFn::Gcn => {
            if deg_dst == 0 || deg_src == 0 {
                return Err(Error::InvalidArgument(String::from("gcn coefficient on an isolated node")));
            }
            1.0 / math::sqrt((deg_dst * deg_src) as f64)
        }
        AttentionFn::Gat => Activation::LeakyRelu.apply(gat(z_dst, z_src, need(kind, params.vector)?)),
        AttentionFn::SymGat => {
            let a = need(kind, params.vector)?;
            Activation::LeakyRelu.apply(gat(z_dst, z_src, a)) + Activation::LeakyRelu.apply(gat(z_src, z_dst, a))
        }
        AttentionFn::Cos => gat(z_dst, z_src, need(kind, params.vector)?),
        AttentionFn::Linear => math::tanh(dot(need(kind, params.left)?, z_dst) + dot(need(kind, params.right)?, z_dst)),
        AttentionFn::GeneLinear => {
            let wg = need(kind, params.matrix)?;
            let t: Vec<f64> = z_dst.iter().map(|v| math::tanh(2.0 * v)).collect();
            // ones-vector reduction of W_G · tanh(...)
            let mut total = 0.0;
            for (k, tk) in t.iter().enumerate() {
                total += tk * wg[k * d..(k + 1) * d].iter().sum::<f64>();
            }
            total
        }
    })
}

/// Borrowed attention parameters for [`attention_score`].
#[derive(Clone, Copy, Debug, Default)]
pub struct AttentionParams<'a> {
    pub vector: Option<&'a [f64]>,
    pub left: Option<&'a [f64]>,
    pub right: Option<&'a [f64]>,
    /// Row-major `d × d`, applied as `t · W_G`.
    pub matrix: Option<&'a [f64]>,
}

/// Metadata for one trainable tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub key: ShareKey,
}

#[derive(Clone, Debug, PartialEq)]
enum AttnSlots {
    None,
    Vector(usize),
    Split(usize, usize),
    Matrix(usize),
}

#[derive(Clone, Debug, PartialEq)]
struct HeadSlots {
    w: usize,
    attn: AttnSlots,
    mlp: Option<[usize; 4]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompiledLayer {
    pub spec: LayerSpec,
    pub index: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub is_last: bool,
    heads: Vec<HeadSlots>,
    bn_gamma: usize,
    bn_beta: usize,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl CompiledLayer {
    /// Width contributed by one head after the combiner.
    pub fn head_out_dim(&self) -> usize {
        match self.spec.combiner {
            Combiner::Identity => 2 * self.spec.hidden_dim,
            Combiner::Mlp => self.spec.hidden_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Skip {
    from: usize,
    to: usize,
    scale: usize,
}

/// Output of a taped forward pass.
pub struct ForwardOutput {
    pub logits: Var,
    /// Batch mean and variance per layer, present in training mode.
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompiledModel {
    arch: Architecture,
    in_dim: usize,
    num_classes: usize,
    layers: Vec<CompiledLayer>,
    skips: Vec<Skip>,
    out_w: usize,
    out_b: usize,
    params: Vec<Tensor>,
    manifest: Vec<ParamInfo>,
}

struct Builder {
    seed: u64,
    params: Vec<Tensor>,
    manifest: Vec<ParamInfo>,
}

enum Init {
    Glorot,
    Zeros,
    Ones,
}

impl Builder {
    fn add(&mut self, name: String, mut key: ShareKey, shape: &[usize], init: Init) -> Result<usize> {
        let idx = self.params.len();
        key.tensor = match shape {
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            _ => return Err(Error::Invariant(format!("parameter {} has rank {}", name, shape.len()))),
        };
        let t = match init {
            Init::Glorot => glorot_init(shape, mix_seed(self.seed, idx as u64))?,
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
        };
        self.params.push(t);
        self.manifest.push(ParamInfo { name, key });
        Ok(idx)
    }
}

/// Dimension rule: per-head width `2d` (identity) or `d` (MLP); heads
/// concatenated except in the last layer. Skips (n >= 3) feed layer `k`'s
/// output into layer `k + 2`'s input.
pub fn layer_dims(arch: &Architecture, in_dim: usize) -> Vec<(usize, usize)> {
    let n = arch.num_layers();
    let mut dims: Vec<(usize, usize)> = Vec::with_capacity(n);
    for (k, spec) in arch.layers().iter().enumerate() {
        let per_head = match spec.combiner {
            Combiner::Identity => 2 * spec.hidden_dim,
            Combiner::Mlp => spec.hidden_dim,
        };
        let out = if k + 1 == n { per_head } else { per_head * spec.heads };
        let input = match k {
            0 => in_dim,
            _ => dims[k - 1].1 + if has_skip_into(n, k) { dims[k - 2].1 } else { 0 },
        };
        dims.push((input, out));
    }
    dims
}

fn has_skip_into(n_layers: usize, layer: usize) -> bool {
    n_layers >= 3 && layer >= 2
}

impl CompiledModel {
    /// Builds and initializes every parameter deterministically from `seed`.
    pub fn build(arch: &Architecture, in_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || num_classes == 0 {
            return Err(Error::InvalidArgument(String::from("input width and class count must be positive")));
        }
        let n = arch.num_layers();
        let dims = layer_dims(arch, in_dim);
        let mut b = Builder {
            seed,
            params: Vec::new(),
            manifest: Vec::new(),
        };
        let mut layers = Vec::with_capacity(n);
        for (k, spec) in arch.layers().iter().enumerate() {
            let (lin, lout) = dims[k];
            let d = spec.hidden_dim;
            let key = |role: Role, head: usize, part: u8| ShareKey {
                layer_index: k,
                role,
                in_dim: lin,
                out_dim: lout,
                heads: spec.heads,
                attention: spec.attention,
                activation: spec.activation,
                head,
                part,
                tensor: (0, 0),
            };
            let mut heads = Vec::with_capacity(spec.heads);
            for h in 0..spec.heads {
                let w = b.add(format!("l{}.h{}.w", k, h), key(Role::TransformW, h, 0), &[lin, d], Init::Glorot)?;
                let attn = match spec.attention {
                    AttentionFn::Constant | AttentionFn::Gcn => AttnSlots::None,
                    AttentionFn::Gat | AttentionFn::SymGat | AttentionFn::Cos => AttnSlots::Vector(b.add(
                        format!("l{}.h{}.att", k, h),
                        key(Role::AttnVec, h, 0),
                        &[2 * d],
                        Init::Glorot,
                    )?),
                    AttentionFn::Linear => AttnSlots::Split(
                        b.add(format!("l{}.h{}.att_l", k, h), key(Role::AttnVecL, h, 0), &[d], Init::Glorot)?,
                        b.add(format!("l{}.h{}.att_r", k, h), key(Role::AttnVecR, h, 0), &[d], Init::Glorot)?,
                    ),
                    AttentionFn::GeneLinear => AttnSlots::Matrix(b.add(
                        format!("l{}.h{}.att_g", k, h),
                        key(Role::AttnMat, h, 0),
                        &[d, d],
                        Init::Glorot,
                    )?),
                };
                let mlp = match spec.combiner {
                    Combiner::Identity => None,
                    Combiner::Mlp => Some([
                        b.add(format!("l{}.h{}.mlp1.w", k, h), key(Role::CombinerMlp1, h, 0), &[2 * d, MLP_HIDDEN], Init::Glorot)?,
                        b.add(format!("l{}.h{}.mlp1.b", k, h), key(Role::CombinerMlp1, h, 1), &[MLP_HIDDEN], Init::Zeros)?,
                        b.add(format!("l{}.h{}.mlp2.w", k, h), key(Role::CombinerMlp2, h, 0), &[MLP_HIDDEN, d], Init::Glorot)?,
                        b.add(format!("l{}.h{}.mlp2.b", k, h), key(Role::CombinerMlp2, h, 1), &[d], Init::Zeros)?,
                    ]),
                };
                heads.push(HeadSlots { w, attn, mlp });
            }
            let bn_gamma = b.add(format!("l{}.bn.gamma", k), key(Role::NonShareable, 0, 0), &[lout], Init::Ones)?;
            let bn_beta = b.add(format!("l{}.bn.beta", k), key(Role::NonShareable, 0, 1), &[lout], Init::Zeros)?;
            layers.push(CompiledLayer {
                spec: *spec,
                index: k,
                in_dim: lin,
                out_dim: lout,
                is_last: k + 1 == n,
                heads,
                bn_gamma,
                bn_beta,
                running_mean: vec![0.0; lout],
                running_var: vec![1.0; lout],
            });
        }
        let mut skips = Vec::new();
        for to in 2..n {
            if has_skip_into(n, to) {
                let from = to - 2;
                let width = dims[from].1;
                let spec = arch.layers()[from];
                let key = ShareKey {
                    layer_index: from,
                    role: Role::NonShareable,
                    in_dim: width,
                    out_dim: width,
                    heads: spec.heads,
                    attention: spec.attention,
                    activation: spec.activation,
                    head: 0,
                    part: 2,
                    tensor: (0, 0),
                };
                let scale = b.add(format!("skip{}to{}.scale", from, to), key, &[width], Init::Ones)?;
                skips.push(Skip { from, to, scale });
            }
        }
        let last = dims[n - 1].1;
        let last_spec = arch.layers()[n - 1];
        let out_key = |part| ShareKey {
            layer_index: n,
            role: Role::NonShareable,
            in_dim: last,
            out_dim: num_classes,
            heads: 1,
            attention: last_spec.attention,
            activation: last_spec.activation,
            head: 0,
            part,
            tensor: (0, 0),
        };
        let out_w = b.add(String::from("out.w"), out_key(0), &[last, num_classes], Init::Glorot)?;
        let out_b = b.add(String::from("out.b"), out_key(1), &[num_classes], Init::Zeros)?;
        Ok(Self {
            arch: arch.clone(),
            in_dim,
            num_classes,
            layers,
            skips,
            out_w,
            out_b,
            params: b.params,
            manifest: b.manifest,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[CompiledLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CompiledLayer] {
        &mut self.layers
    }

    /// Layer indices `(from, to)` joined by a skip connection.
    pub fn skip_connections(&self) -> Vec<(usize, usize)> {
        self.skips.iter().map(|s| (s.from, s.to)).collect()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// One entry per trainable tensor, aligned with [`CompiledModel::params`].
    pub fn parameter_manifest(&self) -> &[ParamInfo] {
        &self.manifest
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape` (trainable when `trainable`).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.param(p) } else { tape.constant(p.clone()) })
            .collect()
    }

    /// Taped forward pass. In training mode dropout is applied to layer inputs
    /// and attention coefficients and batch-norm uses batch statistics;
    /// otherwise batch-norm uses the running statistics.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &[Var],
        features: Var,
        topo: &Topology,
        train: bool,
        dropout: f64,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let (rows, width) = tape.value(features).dims2();
        if width != self.in_dim || rows != topo.num_nodes() {
            return Err(Error::Shape {
                op: "model_forward",
                detail: format!("features [{}x{}] for {} nodes and input width {}", rows, width, topo.num_nodes(), self.in_dim),
            });
        }
        let mut outputs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut batch_stats = Vec::new();
        let mut x = features;
        for layer in &self.layers {
            if let Some(skip) = self.skips.iter().find(|s| s.to == layer.index) {
                let scaled = tape.mul_row(outputs[skip.from], params[skip.scale])?;
                x = tape.concat_cols(&[x, scaled])?;
            }
            let (y, stats) = self.layer_forward(layer, tape, params, x, topo, train, dropout, rng)?;
            if let Some(s) = stats {
                batch_stats.push(s);
            }
            outputs.push(y);
            x = y;
        }
        let logits = tape.matmul(x, params[self.out_w])?;
        let logits = tape.add_row(logits, params[self.out_b])?;
        Ok(ForwardOutput { logits, batch_stats })
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_forward<R: Rng + ?Sized>(
        &self,
        layer: &CompiledLayer,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        topo: &Topology,
        train: bool,
        dropout: f64,
        rng: &mut R,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let width = tape.value(x).cols();
        if width != layer.in_dim {
            return Err(Error::Shape {
                op: "layer_forward",
                detail: format!("layer {} expects width {}, got {}", layer.index, layer.in_dim, width),
            });
        }
        let spec = &layer.spec;
        let d = spec.hidden_dim;
        let segs = topo.segments();
        let x = tape.dropout(x, dropout, train, rng)?;
        let mut head_outs = Vec::with_capacity(layer.heads.len());
        for head in &layer.heads {
            let z = tape.matmul(x, p[head.w])?;
            let raw = match (&head.attn, spec.attention) {
                (_, AttentionFn::Constant) => None,
                (_, AttentionFn::Gcn) => Some(tape.constant(topo.gcn.clone())),
                (AttnSlots::Vector(a), kind) => {
                    let a_dst = tape.slice_rows(p[*a], 0, d)?;
                    let a_src = tape.slice_rows(p[*a], d, 2 * d)?;
                    let s_dst = tape.matmul(z, a_dst)?;
                    let s_src = tape.matmul(z, a_src)?;
                    let e_dst = tape.gather_rows(s_dst, topo.dst.clone())?;
                    let e_src = tape.gather_rows(s_src, topo.src.clone())?;
                    let e = tape.add(e_dst, e_src)?;
                    match kind {
                        AttentionFn::Cos => Some(e),
                        AttentionFn::Gat => Some(tape.activation(e, Activation::LeakyRelu)),
                        _ => {
                            let e = tape.activation(e, Activation::LeakyRelu);
                            let back = tape.gather_rows(e, topo.reverse.clone())?;
                            Some(tape.add(e, back)?)
                        }
                    }
                }
                (AttnSlots::Split(l, r), _) => {
                    let sl = tape.matmul(z, p[*l])?;
                    let sr = tape.matmul(z, p[*r])?;
                    let s = tape.add(sl, sr)?;
                    let s = tape.activation(s, Activation::Tanh);
                    Some(tape.gather_rows(s, topo.dst.clone())?)
                }
                (AttnSlots::Matrix(wg), _) => {
                    let doubled = tape.scale(z, 2.0);
                    let t = tape.activation(doubled, Activation::Tanh);
                    let v = tape.matmul(t, p[*wg])?;
                    let ones = tape.constant(Tensor::full(&[d, 1], 1.0));
                    let s = tape.matmul(v, ones)?;
                    Some(tape.gather_rows(s, topo.dst.clone())?)
                }
                (AttnSlots::None, kind) => {
                    return Err(Error::InvalidArgument(format!("{} head built without attention parameters", kind.name())))
                }
            };
            let coef = match raw {
                Some(e) if spec.attention.is_normalized() => Some(tape.segment_softmax(e, segs)?),
                other => other,
            };
            let coef = match coef {
                None if train && dropout > 0.0 => Some(tape.constant(Tensor::full(&[topo.num_edges(), 1], 1.0))),
                other => other,
            };
            let coef = match coef {
                Some(c) => Some(tape.dropout(c, dropout, train, rng)?),
                None => None,
            };
            let msgs = tape.gather_rows(z, topo.src.clone())?;
            let msgs = match coef {
                Some(c) => tape.mul_col(msgs, c)?,
                None => msgs,
            };
            let mode = match spec.aggregator {
                Aggregator::Sum => ReduceMode::Sum,
                Aggregator::Mean => ReduceMode::Mean,
                Aggregator::MaxPool => ReduceMode::Max,
            };
            let h = tape.segment_reduce(msgs, segs, mode)?;
            let c = tape.concat_cols(&[z, h])?;
            let out = match head.mlp {
                None => c,
                Some([w1, b1, w2, b2]) => {
                    let u = tape.matmul(c, p[w1])?;
                    let u = tape.add_row(u, p[b1])?;
                    let u = tape.activation(u, Activation::Relu);
                    let v = tape.matmul(u, p[w2])?;
                    tape.add_row(v, p[b2])?
                }
            };
            head_outs.push(out);
        }
        let merged = if layer.is_last {
            let mut acc = head_outs[0];
            for &h in &head_outs[1..] {
                acc = tape.add(acc, h)?;
            }
            if head_outs.len() > 1 {
                tape.scale(acc, 1.0 / head_outs.len() as f64)
            } else {
                acc
            }
        } else if head_outs.len() == 1 {
            head_outs[0]
        } else {
            tape.concat_cols(&head_outs)?
        };
        let (normed, stats) = if train {
            let mean = tape.mean_rows(merged)?;
            let neg = tape.scale(mean, -1.0);
            let centered = tape.add_row(merged, neg)?;
            let sq = tape.square(centered);
            let var = tape.mean_rows(sq)?;
            let shifted = tape.add_scalar(var, BN_EPS);
            let inv = tape.rsqrt(shifted);
            let normed = tape.mul_row(centered, inv)?;
            let stats = (tape.value(mean).data().to_vec(), tape.value(var).data().to_vec());
            (normed, Some(stats))
        } else {
            let shift: Vec<f64> = layer.running_mean.iter().map(|m| -m).collect();
            let inv: Vec<f64> = layer.running_var.iter().map(|v| 1.0 / math::sqrt(v + BN_EPS)).collect();
            let shift = tape.constant(Tensor::new(&[shift.len()], shift)?);
            let inv = tape.constant(Tensor::new(&[inv.len()], inv)?);
            let centered = tape.add_row(merged, shift)?;
            (tape.mul_row(centered, inv)?, None)
        };
        let y = tape.mul_row(normed, p[layer.bn_gamma])?;
        let y = tape.add_row(y, p[layer.bn_beta])?;
        Ok((tape.activation(y, spec.activation), stats))
    }

    /// Folds batch statistics from a training forward pass into the running
    /// estimates: `running = momentum · running + (1 - momentum) · batch`.
    pub fn update_running_stats(&mut self, stats: &[(Vec<f64>, Vec<f64>)]) {
        for (layer, (mean, var)) in self.layers.iter_mut().zip(stats) {
            for (r, b) in layer.running_mean.iter_mut().zip(mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            for (r, b) in layer.running_var.iter_mut().zip(var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }

    /// Untaped logits over `g` (eval mode unless `train`).
    pub fn predict<R: Rng + ?Sized>(&self, g: &Graph, topo: &Topology, train: bool, dropout: f64, rng: &mut R) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(g.features().clone());
        let out = self.forward(&mut tape, &vars, x, topo, train, dropout, rng)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Index of the batch-norm `(gamma, beta)` parameters of `layer`.
    pub fn batch_norm_params(&self, layer: usize) -> (usize, usize) {
        (self.layers[layer].bn_gamma, self.layers[layer].bn_beta)
    }
}
