//! Analytic gradients against central finite differences.

mod common;

use rand::Rng;
use rankdfm::model::{DeepFmModel, ModelConfig, Tape};
use rankdfm::train::{objective, TrainConfig};

use common::*;

const PROBES: usize = 100;
const TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
enum Class {
    Embedding,
    Linear,
    Bias,
    FmGate,
    DeepGate,
    MlpWeight,
    MlpBias,
}

const CLASSES: [Class; 7] = [
    Class::Embedding,
    Class::Linear,
    Class::Bias,
    Class::FmGate,
    Class::DeepGate,
    Class::MlpWeight,
    Class::MlpBias,
];

/// A parameter of `class` that the given items actually read.
fn pick(model: &DeepFmModel, class: Class, items: &[&[u16]], r: &mut impl Rng) -> usize {
    let lay = model.layout();
    let rows = model.rows_per_field();
    let k = model.embedding_dim();
    let item = items[r.random_range(0..items.len())];
    let f = r.random_range(0..model.num_fields());
    match class {
        Class::Embedding => lay.embeddings.start + (f * rows + item[f] as usize) * k + r.random_range(0..k),
        Class::Linear => lay.linear.start + f * rows + item[f] as usize,
        Class::Bias => lay.bias,
        Class::FmGate => r.random_range(lay.fm_gates.clone()),
        Class::DeepGate => r.random_range(lay.deep_gates.clone()),
        Class::MlpWeight => {
            let l = &lay.layers[r.random_range(0..lay.layers.len())];
            r.random_range(l.weights.clone())
        }
        Class::MlpBias => {
            let l = &lay.layers[r.random_range(0..lay.layers.len())];
            r.random_range(l.bias.clone())
        }
    }
}

fn central(model: &DeepFmModel, at: usize, h: f64, f: impl Fn(&DeepFmModel) -> f64) -> f64 {
    let mut m = model.clone();
    let x = m.params()[at];
    m.params_mut()[at] = x + h;
    let up = f(&m);
    m.params_mut()[at] = x - h;
    let down = f(&m);
    (up - down) / (2.0 * h)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn score_grad(model: &DeepFmModel, item: &[u16]) -> Vec<f64> {
    let gates = model.gate_values();
    let mut tape = Tape::new(model);
    model.forward(&gates, item, &mut tape);
    let mut grad = vec![0.0; model.params().len()];
    model.backward(&gates, item, &mut tape, 1.0, &mut grad);
    grad
}

#[test]
fn score_gradient_matches_finite_differences() {
    let schema = toy_schema(5, 0.1);
    let rows = schema.rows_per_field();
    let mut r = rng(1);
    for class in CLASSES {
        let mut worst: f64 = 0.0;
        for probe in 0..PROBES {
            let model = random_model(&schema, &ModelConfig::default(), probe as u64);
            let item = random_item(&mut r, 5, rows);
            let at = pick(&model, class, &[&item], &mut r);
            let analytic = score_grad(&model, &item)[at];
            let numeric = central(&model, at, 1e-6, |m| m.score(&item).unwrap());
            worst = worst.max(rel_err(analytic, numeric));
        }
        assert!(worst < TOL, "{class:?}: worst relative error {worst:e}");
    }
}

#[test]
fn pruned_score_gradient_matches_finite_differences() {
    let schema = toy_schema(5, 0.1);
    let rows = schema.rows_per_field();
    let mut r = rng(2);
    for probe in 0..PROBES {
        let base = random_model(&schema, &small_config(), probe as u64);
        let pair_keep: Vec<bool> = (0..10).map(|p| (p + probe) % 3 != 0).collect();
        let field_keep = [true, false, true, true, probe % 2 == 0];
        let model = base.restructured(&pair_keep, &field_keep).unwrap();
        let item = random_item(&mut r, 5, rows);
        for class in [Class::Embedding, Class::Linear, Class::MlpWeight, Class::MlpBias] {
            let at = pick(&model, class, &[&item], &mut r);
            let analytic = score_grad(&model, &item)[at];
            let numeric = central(&model, at, 1e-6, |m| m.score(&item).unwrap());
            assert!(rel_err(analytic, numeric) < TOL, "{class:?} probe {probe}: {analytic} vs {numeric}");
        }
    }
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let schema = toy_schema(5, 0.1);
    let corpus = random_corpus(&schema, 3, 20, 3);
    let cfg = TrainConfig {
        alpha: 0.7,
        margin: 0.3,
        ..TrainConfig::default()
    };
    let lambda = 0.05;
    let mut r = rng(4);
    for class in CLASSES {
        let mut worst: f64 = 0.0;
        for probe in 0..PROBES {
            let model = random_model(&schema, &small_config(), 1000 + probe as u64);
            let pairs = random_pairs(&corpus, 3, probe as u64);
            let items: Vec<&[u16]> = pairs
                .iter()
                .flat_map(|p| {
                    let q = corpus.query(p.query_id).unwrap();
                    [p.pos_item_id, p.neg_item_id].map(|id| q.item(q.item_ids.iter().position(|&x| x == id).unwrap()))
                })
                .collect();
            let at = pick(&model, class, &items, &mut r);
            let (_, grad) = objective(&model, &corpus, &pairs, &cfg, lambda).unwrap();
            let numeric = central(&model, at, 1e-6, |m| objective(m, &corpus, &pairs, &cfg, lambda).unwrap().0.total);
            worst = worst.max(rel_err(grad[at], numeric));
        }
        assert!(worst < TOL, "{class:?}: worst relative error {worst:e}");
    }
}

#[test]
fn objective_reports_the_blended_loss() {
    let schema = toy_schema(4, 0.1);
    let corpus = random_corpus(&schema, 2, 15, 5);
    let pairs = random_pairs(&corpus, 4, 5);
    let model = random_model(&schema, &small_config(), 9);
    let cfg = TrainConfig {
        alpha: 0.6,
        margin: 0.2,
        ..TrainConfig::default()
    };
    let (loss, _) = objective(&model, &corpus, &pairs, &cfg, 0.1).unwrap();
    let mut pair = 0.0;
    let mut point = 0.0;
    for p in &pairs {
        let q = corpus.query(p.query_id).unwrap();
        let s = |id: u64| model.score(q.item(q.item_ids.iter().position(|&x| x == id).unwrap())).unwrap();
        let (sp, sn) = (s(p.pos_item_id), s(p.neg_item_id));
        pair += rankdfm::train::pair_loss(sp, sn, cfg.margin);
        point += rankdfm::train::point_loss(sp, sn, p.r_p, p.r_n);
    }
    let n = pairs.len() as f64;
    let sparsity = rankdfm::train::sparsity_loss(&model);
    let expect = 0.6 * pair / n + 0.4 * point / n + 0.1 * sparsity;
    assert!((loss.total - expect).abs() < 1e-12, "{} vs {expect}", loss.total);
}
