//! Constrained weight sharing between homogeneous layers.
//!
//! A tensor moves from the registry into a model only when every component of
//! its [`ShareKey`] matches: depth, role, layer input/output width, head
//! count, attention kind, activation, head index and part. Batch-norm, skip
//! and output tensors carry [`Role::NonShareable`] and are never stored.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::gnn::CompiledModel;
use crate::space::AttentionFn;
use crate::tensor::{Activation, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    TransformW,
    AttnVec,
    AttnVecL,
    AttnVecR,
    AttnMat,
    CombinerMlp1,
    CombinerMlp2,
    NonShareable,
}

impl Role {
    pub const ALL: [Role; 8] = [
        Role::TransformW,
        Role::AttnVec,
        Role::AttnVecL,
        Role::AttnVecR,
        Role::AttnMat,
        Role::CombinerMlp1,
        Role::CombinerMlp2,
        Role::NonShareable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::TransformW => "W",
            Role::AttnVec => "a",
            Role::AttnVecL => "al",
            Role::AttnVecR => "ar",
            Role::AttnMat => "WG",
            Role::CombinerMlp1 => "mlp1",
            Role::CombinerMlp2 => "mlp2",
            Role::NonShareable => "fixed",
        }
    }

    pub fn is_shareable(self) -> bool {
        self != Role::NonShareable
    }
}

/// Structural signature of one trainable tensor.
///
/// `in_dim`/`out_dim` are the input and output widths of the owning layer.
/// `head` and `part` pick out one tensor among several with the same role
/// (per-head copies, weight versus bias).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ShareKey {
    pub layer_index: usize,
    pub role: Role,
    pub in_dim: usize,
    pub out_dim: usize,
    pub heads: usize,
    pub attention: AttentionFn,
    pub activation: Activation,
    pub head: usize,
    pub part: u8,
    /// Shape of the tensor itself as `rows × cols` (`len × 1` for vectors).
    /// Two layers can agree on input width, output width and head count yet
    /// differ in hidden width and combiner, which changes this shape.
    pub tensor: (usize, usize),
}

impl fmt::Display for ShareKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L{}/{}/{}x{}/h{}/{}/{}/k{}/p{}/t{}x{}",
            self.layer_index,
            self.role.name(),
            self.in_dim,
            self.out_dim,
            self.heads,
            self.attention.name(),
            self.activation.name(),
            self.head,
            self.part,
            self.tensor.0,
            self.tensor.1
        )
    }
}

impl FromStr for ShareKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed share key `{}`", s));
        let parts: Vec<&str> = s.split('/').collect();
        if parts.len() != 9 {
            return Err(bad());
        }
        let num = |p: &str, prefix: &str| -> Result<usize> {
            p.strip_prefix(prefix).and_then(|v| v.parse().ok()).ok_or_else(bad)
        };
        let (i, o) = parts[2].split_once('x').ok_or_else(bad)?;
        let (tr, tc) = parts[8].strip_prefix('t').and_then(|t| t.split_once('x')).ok_or_else(bad)?;
        Ok(ShareKey {
            layer_index: num(parts[0], "L")?,
            role: Role::ALL.into_iter().find(|r| r.name() == parts[1]).ok_or_else(bad)?,
            in_dim: i.parse().map_err(|_| bad())?,
            out_dim: o.parse().map_err(|_| bad())?,
            heads: num(parts[3], "h")?,
            attention: parts[4].parse().map_err(|_| bad())?,
            activation: parts[5].parse().map_err(|_| bad())?,
            head: num(parts[6], "k")?,
            part: u8::try_from(num(parts[7], "p")?).map_err(|_| bad())?,
            tensor: (tr.parse().map_err(|_| bad())?, tc.parse().map_err(|_| bad())?),
        })
    }
}

/// Which tensors may be transferred and how they are matched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SharingPolicy {
    /// Full structural key; non-shareable roles excluded.
    #[default]
    Constrained,
    /// Match by parameter name and shape only, every tensor eligible. Used as
    /// the unconstrained comparison arm.
    Relaxed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistryEntry {
    pub value: Tensor,
    pub source_trial: usize,
    pub source_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct RegistryStats {
    /// Stored entries per role, indexed like [`Role::ALL`].
    pub per_role: [usize; 8],
    pub total: usize,
    pub lookups: u64,
    pub transfers: u64,
}

impl RegistryStats {
    pub fn hit_rate(&self) -> f64 {
        if self.lookups == 0 {
            0.0
        } else {
            self.transfers as f64 / self.lookups as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Slot {
    Key(ShareKey),
    Named(String, Vec<usize>),
}

/// Latest-wins store of trained tensors.
#[derive(Clone, Debug, Default)]
pub struct ParameterRegistry {
    policy: SharingPolicy,
    entries: BTreeMap<Slot, RegistryEntry>,
    lookups: u64,
    transfers: u64,
}

impl ParameterRegistry {
    pub fn new(policy: SharingPolicy) -> Self {
        Self {
            policy,
            ..Self::default()
        }
    }

    pub fn policy(&self) -> SharingPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn slot(&self, name: &str, key: &ShareKey, shape: &[usize]) -> Option<Slot> {
        match self.policy {
            SharingPolicy::Constrained if key.role.is_shareable() => Some(Slot::Key(*key)),
            SharingPolicy::Constrained => None,
            SharingPolicy::Relaxed => Some(Slot::Named(name.to_string(), shape.to_vec())),
        }
    }

    /// Copies every matching stored tensor into `model`; returns the count.
    pub fn inherit(&mut self, model: &mut CompiledModel) -> Result<usize> {
        let mut slots = Vec::new();
        for (i, info) in model.parameter_manifest().iter().enumerate() {
            if let Some(slot) = self.slot(&info.name, &info.key, model.params()[i].shape()) {
                slots.push((i, slot));
            }
        }
        let mut count = 0;
        for (i, slot) in slots {
            self.lookups += 1;
            if let Some(entry) = self.entries.get(&slot) {
                let target = &mut model.params_mut()[i];
                if entry.value.shape() != target.shape() {
                    return Err(Error::RegistryCorrupt {
                        key: slot_name(&slot),
                        stored: entry.value.shape().to_vec(),
                        expected: target.shape().to_vec(),
                    });
                }
                target.data_mut().copy_from_slice(entry.value.data());
                self.transfers += 1;
                count += 1;
            }
        }
        Ok(count)
    }

    /// Stores every eligible tensor of `model`, replacing older values.
    pub fn writeback(&mut self, model: &CompiledModel, trial: usize, metric: f64) {
        for (info, value) in model.parameter_manifest().iter().zip(model.params()) {
            if let Some(slot) = self.slot(&info.name, &info.key, value.shape()) {
                self.entries.insert(
                    slot,
                    RegistryEntry {
                        value: value.clone(),
                        source_trial: trial,
                        source_metric: metric,
                    },
                );
            }
        }
    }

    pub fn stats(&self) -> RegistryStats {
        let mut per_role = [0usize; 8];
        for slot in self.entries.keys() {
            let role = match slot {
                Slot::Key(k) => k.role,
                Slot::Named(..) => Role::NonShareable,
            };
            per_role[Role::ALL.iter().position(|r| *r == role).unwrap_or(7)] += 1;
        }
        RegistryStats {
            per_role,
            total: self.entries.len(),
            lookups: self.lookups,
            transfers: self.transfers,
        }
    }

    /// Entries as `(serialized key, entry)` in key order.
    pub fn entries(&self) -> Vec<(String, &RegistryEntry)> {
        self.entries.iter().map(|(s, e)| (slot_name(s), e)).collect()
    }

    /// Inserts an entry from its serialized key (snapshot restore). Keys that
    /// do not parse as a structural key are stored by name and shape, which is
    /// only meaningful for the relaxed policy.
    pub fn insert_serialized(&mut self, key: &str, entry: RegistryEntry) -> Result<()> {
        let slot = match key.parse::<ShareKey>() {
            Ok(k) if k.role.is_shareable() => Slot::Key(k),
            Ok(_) => return Err(Error::InvalidArgument(format!("non-shareable key `{}` in registry", key))),
            Err(_) if self.policy == SharingPolicy::Relaxed => Slot::Named(
                key.strip_prefix("name:").unwrap_or(key).to_string(),
                entry.value.shape().to_vec(),
            ),
            Err(e) => return Err(e),
        };
        self.entries.insert(slot, entry);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.lookups = 0;
        self.transfers = 0;
    }
}

fn slot_name(slot: &Slot) -> String {
    match slot {
        Slot::Key(k) => k.to_string(),
        Slot::Named(n, _) => format!("name:{}", n),
    }
}

/// Free-function form of [`ParameterRegistry::inherit`].
pub fn inherit(model: &mut CompiledModel, reg: &mut ParameterRegistry) -> Result<usize> {
    reg.inherit(model)
}

/// Free-function form of [`ParameterRegistry::writeback`].
pub fn writeback(model: &CompiledModel, reg: &mut ParameterRegistry, trial: usize, metric: f64) {
    reg.writeback(model, trial, metric)
}

pub fn registry_stats(reg: &ParameterRegistry) -> RegistryStats {
    reg.stats()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{Aggregator, Architecture, Combiner, LayerSpec};
    use alloc::vec;

    fn layer(att: AttentionFn, act: Activation, heads: usize, comb: Combiner) -> LayerSpec {
        LayerSpec {
            hidden_dim: 8,
            attention: att,
            heads,
            aggregator: Aggregator::Mean,
            combiner: comb,
            activation: act,
        }
    }

    #[test]
    fn key_roundtrip() {
        let k = ShareKey {
            layer_index: 2,
            role: Role::AttnVecL,
            in_dim: 16,
            out_dim: 32,
            heads: 4,
            attention: AttentionFn::GeneLinear,
            activation: Activation::LeakyRelu,
            head: 3,
            part: 1,
            tensor: (8, 1),
        };
        let s = k.to_string();
        assert_eq!(s, "L2/al/16x32/h4/gene-linear/leaky_relu/k3/p1/t8x1");
        assert_eq!(s.parse::<ShareKey>().unwrap(), k);
        assert!("L2/al/16x32".parse::<ShareKey>().is_err());
    }

    #[test]
    fn empty_registry_transfers_nothing() {
        let a = Architecture::new(vec![layer(AttentionFn::Gat, Activation::Relu, 2, Combiner::Mlp)]).unwrap();
        let mut m = CompiledModel::build(&a, 4, 2, 0).unwrap();
        let mut reg = ParameterRegistry::default();
        assert_eq!(reg.inherit(&mut m).unwrap(), 0);
        assert_eq!(reg.stats().transfers, 0);
        assert_eq!(ParameterRegistry::default().stats(), RegistryStats::default());
    }

    #[test]
    fn constant_identity_writeback_counts() {
        let heads = 4;
        let s = layer(AttentionFn::Constant, Activation::Tanh, heads, Combiner::Identity);
        let a = Architecture::new(vec![s, s]).unwrap();
        let m = CompiledModel::build(&a, 5, 2, 0).unwrap();
        let mut reg = ParameterRegistry::default();
        reg.writeback(&m, 0, 0.5);
        assert_eq!(reg.len(), 2 * heads);
        assert_eq!(reg.stats().per_role[7], 0);
    }

    #[test]
    fn latest_wins_and_activation_blocks_transfer() {
        let a = Architecture::new(vec![
            layer(AttentionFn::Gat, Activation::Relu, 1, Combiner::Identity),
            layer(AttentionFn::Gat, Activation::Relu, 1, Combiner::Identity),
        ])
        .unwrap();
        let m1 = CompiledModel::build(&a, 4, 2, 1).unwrap();
        let m2 = CompiledModel::build(&a, 4, 2, 2).unwrap();
        let mut reg = ParameterRegistry::default();
        reg.writeback(&m1, 0, 0.1);
        reg.writeback(&m2, 1, 0.2);
        let mut fresh = CompiledModel::build(&a, 4, 2, 3).unwrap();
        let n = reg.inherit(&mut fresh).unwrap();
        assert_eq!(n, 4);
        for (i, info) in fresh.parameter_manifest().iter().enumerate() {
            if info.key.role.is_shareable() {
                assert_eq!(fresh.params()[i], m2.params()[i]);
            }
        }
        let mut b = a.clone();
        b.layers_mut()[0].activation = Activation::Elu;
        let mut other = CompiledModel::build(&b, 4, 2, 4).unwrap();
        assert_eq!(reg.inherit(&mut other).unwrap(), 2);
        for (i, info) in other.parameter_manifest().iter().enumerate() {
            if info.key.layer_index == 0 && info.key.role.is_shareable() {
                assert_ne!(other.params()[i], m2.params()[i]);
            }
        }
        let st = reg.stats();
        assert!(st.hit_rate() > 0.0 && st.hit_rate() <= 1.0);
    }

    #[test]
    fn relaxed_moves_batch_norm() {
        let a = Architecture::new(vec![layer(AttentionFn::Cos, Activation::Relu, 1, Combiner::Identity)]).unwrap();
        let mut m = CompiledModel::build(&a, 4, 2, 1).unwrap();
        let (g, _) = m.batch_norm_params(0);
        m.params_mut()[g].data_mut()[0] = 7.0;
        let mut reg = ParameterRegistry::new(SharingPolicy::Relaxed);
        reg.writeback(&m, 0, 0.0);
        let mut b = a.clone();
        b.layers_mut()[0].activation = Activation::Sigmoid;
        let mut other = CompiledModel::build(&b, 4, 2, 2).unwrap();
        reg.inherit(&mut other).unwrap();
        assert_eq!(other.params()[g].data()[0], 7.0);
    }
}
