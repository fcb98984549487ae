//! Independent reference computations shared by the property and acceptance
//! suites.
#![allow(dead_code)]

use agnn_core::gnn::{CompiledModel, Topology};
use agnn_core::graph::Graph;
use agnn_core::registry::{ParameterRegistry, Role, SharingPolicy};
use agnn_core::space::{ActionClass, Architecture, LayerSpec, HEADS, HIDDEN_DIMS};
use agnn_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform architecture restricted to hidden widths `<= max_dim` and head
/// counts `<= max_heads`, keeping model sizes small enough for bulk tests.
pub fn capped_architecture(rng: &mut ChaCha8Rng, n_layers: usize, max_dim: usize, max_heads: usize) -> Architecture {
    let dims = HIDDEN_DIMS.iter().filter(|&&d| d <= max_dim).count();
    let heads = HEADS.iter().filter(|&&h| h <= max_heads).count();
    let layers = (0..n_layers)
        .map(|_| {
            let mut ch = ActionClass::ALL.map(|c| rng.random_range(0..c.cardinality()));
            ch[0] = rng.random_range(0..dims);
            ch[2] = rng.random_range(0..heads);
            LayerSpec::from_choices(ch)
        })
        .collect();
    Architecture::new(layers).unwrap()
}

/// Copy of `a` with `k` random (layer, class) slots resampled, so pairs of
/// descriptors overlap often enough for transfers to happen.
pub fn mutate(rng: &mut ChaCha8Rng, a: &Architecture, k: usize, max_dim: usize, max_heads: usize) -> Architecture {
    let fresh = capped_architecture(rng, a.num_layers(), max_dim, max_heads);
    let mut out = a.clone();
    for _ in 0..k {
        let l = rng.random_range(0..a.num_layers());
        let c = ActionClass::ALL[rng.random_range(0..6)];
        let v = fresh.layers()[l].choice(c);
        out.layers_mut()[l].set_choice(c, v);
    }
    out
}

/// Tensor `j` of `to` may receive tensor `i` of `from` exactly when the two
/// agree on depth, role, owning-layer shape, head count, attention kind,
/// activation, head index, part and tensor shape, and the role is shareable.
pub fn expected_source(from: &CompiledModel, to: &CompiledModel, j: usize) -> Option<usize> {
    let t = &to.parameter_manifest()[j].key;
    if t.role == Role::NonShareable {
        return None;
    }
    let shape = to.params()[j].shape();
    from.parameter_manifest().iter().enumerate().position(|(i, f)| {
        let f = &f.key;
        from.params()[i].shape() == shape &&
        f.layer_index == t.layer_index
            && f.role == t.role
            && f.in_dim == t.in_dim
            && f.out_dim == t.out_dim
            && f.heads == t.heads
            && f.attention == t.attention
            && f.activation == t.activation
            && f.head == t.head
            && f.part == t.part
    })
}

/// Outcome of one fuzz pair.
#[derive(Debug, Default)]
pub struct FuzzTally {
    pub pairs: usize,
    pub transfers: usize,
    /// Tensors whose post-inherit value disagrees with the oracle.
    pub violations: usize,
    /// Registry entries with a non-shareable role.
    pub forbidden_entries: usize,
    pub shape_changes: usize,
}

/// Writes back a model of `a` (values marked per tensor), inherits into a
/// fresh model of `b`, and checks every tensor against [`expected_source`].
pub fn fuzz_pair(a: &Architecture, b: &Architecture, in_dim: usize, seed: u64, tally: &mut FuzzTally) {
    let mut src = CompiledModel::build(a, in_dim, 3, seed).unwrap();
    for (i, p) in src.params_mut().iter_mut().enumerate() {
        // make every source tensor recognizable
        for v in p.data_mut() {
            *v = 1000.0 + i as f64;
        }
    }
    let mut reg = ParameterRegistry::new(SharingPolicy::Constrained);
    reg.writeback(&src, 1, 0.5);
    for (key, _) in reg.entries() {
        if key.contains("/fixed/") {
            tally.forbidden_entries += 1;
        }
    }
    let fresh = CompiledModel::build(b, in_dim, 3, seed + 1).unwrap();
    let mut dst = fresh.clone();
    let n = reg.inherit(&mut dst).unwrap();
    tally.transfers += n;
    tally.pairs += 1;
    let mut expected_count = 0;
    for j in 0..dst.params().len() {
        let got = &dst.params()[j];
        if got.shape() != fresh.params()[j].shape() {
            tally.shape_changes += 1;
        }
        let want: &Tensor = match expected_source(&src, &fresh, j) {
            Some(i) => {
                expected_count += 1;
                &src.params()[i]
            }
            None => &fresh.params()[j],
        };
        if got != want {
            tally.violations += 1;
        }
    }
    if expected_count != n {
        tally.violations += 1;
    }
}

/// Max absolute difference between `model(π·g)` and `π·model(g)` in eval mode.
pub fn equivariance_gap(model: &CompiledModel, g: &Graph, perm: &[usize]) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base = model.predict(g, &Topology::new(g).unwrap(), false, 0.0, &mut rng).unwrap();
    let pg = g.permute(perm).unwrap();
    let moved = model.predict(&pg, &Topology::new(&pg).unwrap(), false, 0.0, &mut rng).unwrap();
    let mut gap: f64 = 0.0;
    for (i, &p) in perm.iter().enumerate() {
        for (a, b) in base.row(i).iter().zip(moved.row(p)) {
            gap = gap.max((a - b).abs());
        }
    }
    gap
}

pub fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Fresh seeded generator for test code.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
