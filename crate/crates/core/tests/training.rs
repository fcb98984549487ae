use agnn_core::gnn::CompiledModel;
use agnn_core::graph::{generate_sbm, SbmConfig, Split};
use agnn_core::space::{Aggregator, Architecture, AttentionFn, Combiner, LayerSpec};
use agnn_core::tensor::Activation;
use agnn_core::train::{evaluate, train, TrainConfig, TrainingData};

fn sbm(seed: u64) -> TrainingData {
    let cfg = SbmConfig {
        nodes: 300,
        classes: 3,
        p_in: 0.3,
        p_out: 0.01,
        feat_dim: 3,
        noise: 0.1,
        seed,
    };
    TrainingData::new(generate_sbm(&cfg).unwrap()).unwrap()
}

fn gcn_like() -> Architecture {
    let s = LayerSpec {
        hidden_dim: 16,
        attention: AttentionFn::Gcn,
        heads: 1,
        aggregator: Aggregator::Sum,
        combiner: Combiner::Mlp,
        activation: Activation::Relu,
    };
    Architecture::new(vec![s, s]).unwrap()
}

/// Predicts each validation node's class as the most common training label
/// among its neighbors and their neighbors.
fn majority_vote(data: &TrainingData) -> f64 {
    let g = &data.bundle().graphs[0];
    let labels = match g.labels() {
        agnn_core::graph::Labels::Single(l) => l,
        _ => unreachable!(),
    };
    let train = g.mask(Split::Train);
    let val = g.split_nodes(Split::Val);
    let mut correct = 0;
    for &v in &val {
        let mut votes = vec![0usize; g.num_classes()];
        for &u in g.neighbors(v) {
            for &w in g.neighbors(u).iter().chain(std::iter::once(&u)) {
                if train[w] && w != v {
                    votes[labels[w].unwrap()] += 1;
                }
            }
        }
        let pred = (0..votes.len()).max_by_key(|&k| (votes[k], std::cmp::Reverse(k))).unwrap();
        correct += usize::from(Some(pred) == labels[v]);
    }
    correct as f64 / val.len() as f64
}

#[test]
fn gcn_like_descriptor_learns_planted_communities() {
    let data = sbm(7);
    let oracle = majority_vote(&data);
    assert!(oracle > 0.9, "majority vote oracle {oracle}");
    let mut model = CompiledModel::build(&gcn_like(), 3, 3, 7).unwrap();
    let cfg = TrainConfig {
        seed: 7,
        ..TrainConfig::transductive()
    };
    let rec = train(&mut model, &data, &cfg, None, 1).unwrap();
    assert!(rec.val_metric > 0.85, "val accuracy {} (oracle {oracle})", rec.val_metric);
    assert!(rec.val_metric >= oracle - 0.05);
    assert_eq!(rec.val_metric, evaluate(&model, &data, Split::Val).unwrap());
}
