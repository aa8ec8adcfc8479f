//! Siamese pairwise training with pointwise anchoring and gate sparsity.
//!
//! Both items of a pair are scored by the same [`DeepFmModel`]; the two
//! "towers" are two call sites of one parameter set. Per pair:
//!
//! ```text
//! pair  = max(S_n − S_p + σ, 0)
//! point = (S_n − r_n)² + (S_p − r_p)²
//! total = α·pair + (1 − α)·point + λ·mean_gates g(raw)
//! ```
//!
//! Batches are drawn within a query. Every distinct item of a batch runs one
//! forward and one backward pass, with the per-pair score gradients summed
//! onto it first, so a batch costs one pass per distinct item rather than two
//! per pair.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::features::FeaturizedCorpus;
use crate::model::{polarize, polarize_grad, DeepFmModel, Tape};
use crate::pairs::OrderedPair;
use crate::rng::{domain, substream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Maximum pairs per batch. Batches never span queries.
    pub batch_size: usize,
    pub sparsity_weight: f64,
    /// Leading epochs trained with the sparsity weight forced to zero.
    pub warmup_epochs: usize,
    pub optimizer: Optimizer,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            margin: 0.05,
            learning_rate: 1e-4,
            epochs: 4,
            batch_size: 256,
            sparsity_weight: 0.01,
            warmup_epochs: 1,
            optimizer: Optimizer::Adam,
            momentum: 0.9,
            seed: 29,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("train.alpha", "must lie in [0, 1]"));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::config("train.margin", "must be finite and positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.sparsity_weight >= 0.0 && self.sparsity_weight.is_finite()) {
            return Err(Error::config("train.sparsity_weight", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pair: f64,
    pub point: f64,
    pub sparsity: f64,
    pub total: f64,
}

/// Zero exactly when the computed gap `S_p − S_n` reaches the margin.
pub fn pair_loss(s_p: f64, s_n: f64, margin: f64) -> f64 {
    let gap = s_p - s_n;
    if gap >= margin {
        0.0
    } else {
        margin - gap
    }
}

pub fn point_loss(s_p: f64, s_n: f64, r_p: f64, r_n: f64) -> f64 {
    (s_n - r_n).powi(2) + (s_p - r_p).powi(2)
}

pub fn total_loss(pair: f64, point: f64, sparsity: f64, alpha: f64, sparsity_weight: f64) -> LossBreakdown {
    LossBreakdown {
        pair,
        point,
        sparsity,
        total: alpha * pair + (1.0 - alpha) * point + sparsity_weight * sparsity,
    }
}

/// Mean applied gate value over every FM and deep gate. Hardened models
/// have no trainable gates and report 0.
pub fn sparsity_loss(model: &DeepFmModel) -> f64 {
    if model.gates_hardened() {
        return 0.0;
    }
    let beta = model.beta();
    let raw = model.fm_gate_raw().iter().chain(model.deep_gate_raw());
    let n = model.fm_gate_raw().len() + model.deep_gate_raw().len();
    raw.map(|&x| polarize(x, beta)).sum::<f64>() / n as f64
}

fn add_sparsity_grad(model: &DeepFmModel, weight: f64, grad: &mut [f64]) {
    if model.gates_hardened() || weight == 0.0 {
        return;
    }
    let lay = model.layout();
    let n = (lay.fm_gates.len() + lay.deep_gates.len()) as f64;
    let beta = model.beta();
    for range in [lay.fm_gates.clone(), lay.deep_gates.clone()] {
        for i in range {
            grad[i] += weight * polarize_grad(model.params()[i], beta) / n;
        }
    }
}

/// Gate counts below a threshold, reported per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub threshold: f64,
    pub fm_total: usize,
    pub fm_below: usize,
    pub deep_total: usize,
    pub deep_below: usize,
    pub mean_gate: f64,
}

pub fn gate_summary(model: &DeepFmModel, threshold: f64) -> GateSummary {
    let g = model.gate_values();
    let count = |v: &[f64]| v.iter().filter(|&&x| x < threshold).count();
    let n = g.fm.len() + g.deep.len();
    GateSummary {
        threshold,
        fm_total: g.fm.len(),
        fm_below: count(&g.fm),
        deep_total: g.deep.len(),
        deep_below: count(&g.deep),
        mean_gate: g.fm.iter().chain(&g.deep).sum::<f64>() / n.max(1) as f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub sparsity_weight: f64,
    /// Pair-weighted mean over the epoch's batches.
    pub loss: LossBreakdown,
    pub gates: GateSummary,
    pub heldout_accuracy: Option<f64>,
}

/// Pairs resolved to candidate rows of a featurized corpus.
#[derive(Clone, Copy, Debug)]
struct Resolved {
    query: usize,
    pos: usize,
    neg: usize,
    r_p: f64,
    r_n: f64,
}

fn resolve(corpus: &FeaturizedCorpus, pairs: &[OrderedPair]) -> Result<Vec<Resolved>> {
    let by_query: HashMap<u64, usize> = corpus.queries.iter().enumerate().map(|(i, q)| (q.query_id, i)).collect();
    let mut rows: Vec<Option<HashMap<u64, usize>>> = vec![None; corpus.queries.len()];
    pairs
        .iter()
        .map(|p| {
            let &q = by_query
                .get(&p.query_id)
                .ok_or_else(|| Error::Corpus(format!("pair refers to unknown query {}", p.query_id)))?;
            let index = rows[q].get_or_insert_with(|| {
                corpus.queries[q].item_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
            });
            let find = |id: u64| {
                index.get(&id).copied().ok_or_else(|| {
                    Error::Corpus(format!("pair refers to item {id} not in query {}", p.query_id))
                })
            };
            if !(p.r_p.is_finite() && p.r_n.is_finite()) {
                return Err(Error::Corpus(format!("non-finite teacher score in pair of query {}", p.query_id)));
            }
            Ok(Resolved {
                query: q,
                pos: find(p.pos_item_id)?,
                neg: find(p.neg_item_id)?,
                r_p: p.r_p,
                r_n: p.r_n,
            })
        })
        .collect()
}

fn check_inputs(model: &DeepFmModel, corpus: &FeaturizedCorpus) -> Result<()> {
    if model.schema_hash() != corpus.schema_hash {
        return Err(Error::ModelMismatch("featurized corpus was built with a different schema".into()));
    }
    for q in &corpus.queries {
        model.check_rows(&q.buckets)?;
        if q.buckets.len() != q.len() * model.num_fields() {
            return Err(Error::ModelMismatch(format!("query {} has a ragged bucket block", q.query_id)));
        }
    }
    Ok(())
}

/// Reusable per-batch buffers.
struct Workspace {
    tapes: Vec<Tape>,
    slot_of: HashMap<(usize, usize), usize>,
    keys: Vec<(usize, usize)>,
    d_score: Vec<f64>,
}

impl Workspace {
    fn new() -> Self {
        Self {
            tapes: Vec::new(),
            slot_of: HashMap::new(),
            keys: Vec::new(),
            d_score: Vec::new(),
        }
    }

    fn slot(&mut self, key: (usize, usize)) -> usize {
        let next = self.keys.len();
        *self.slot_of.entry(key).or_insert_with(|| {
            self.keys.push(key);
            next
        })
    }
}

/// Mean loss over `batch` and, when `grad` is given, its gradient
/// accumulated into `grad`.
#[allow(clippy::too_many_arguments)]
fn batch_objective(
    model: &DeepFmModel,
    corpus: &FeaturizedCorpus,
    batch: &[Resolved],
    alpha: f64,
    margin: f64,
    sparsity_weight: f64,
    ws: &mut Workspace,
    grad: Option<&mut [f64]>,
) -> LossBreakdown {
    ws.slot_of.clear();
    ws.keys.clear();
    let slots: Vec<(usize, usize)> = batch
        .iter()
        .map(|p| (ws.slot((p.query, p.pos)), ws.slot((p.query, p.neg))))
        .collect();
    while ws.tapes.len() < ws.keys.len() {
        ws.tapes.push(Tape::new(model));
    }
    let gates = model.gate_values();
    for (slot, &(q, row)) in ws.keys.iter().enumerate() {
        model.forward(&gates, corpus.queries[q].item(row), &mut ws.tapes[slot]);
    }

    let n = batch.len() as f64;
    ws.d_score.clear();
    ws.d_score.resize(ws.keys.len(), 0.0);
    let (mut pair_sum, mut point_sum) = (0.0, 0.0);
    for (p, &(sp_slot, sn_slot)) in batch.iter().zip(&slots) {
        let s_p = ws.tapes[sp_slot].score;
        let s_n = ws.tapes[sn_slot].score;
        let hinge = pair_loss(s_p, s_n, margin);
        pair_sum += hinge;
        point_sum += point_loss(s_p, s_n, p.r_p, p.r_n);
        let active = if hinge > 0.0 { alpha } else { 0.0 };
        ws.d_score[sp_slot] += (-active + (1.0 - alpha) * 2.0 * (s_p - p.r_p)) / n;
        ws.d_score[sn_slot] += (active + (1.0 - alpha) * 2.0 * (s_n - p.r_n)) / n;
    }
    let sparsity = sparsity_loss(model);
    let loss = total_loss(pair_sum / n, point_sum / n, sparsity, alpha, sparsity_weight);

    if let Some(grad) = grad {
        for (slot, &(q, row)) in ws.keys.iter().enumerate() {
            let d = ws.d_score[slot];
            if d != 0.0 {
                model.backward(&gates, corpus.queries[q].item(row), &mut ws.tapes[slot], d, grad);
            }
        }
        add_sparsity_grad(model, sparsity_weight, grad);
    }
    loss
}

/// Mean loss over `pairs` treated as one batch, and its gradient with
/// respect to every model parameter.
pub fn objective(
    model: &DeepFmModel,
    corpus: &FeaturizedCorpus,
    pairs: &[OrderedPair],
    config: &TrainConfig,
    sparsity_weight: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    config.validate()?;
    check_inputs(model, corpus)?;
    if pairs.is_empty() {
        return Err(Error::Precondition("no pairs".into()));
    }
    let resolved = resolve(corpus, pairs)?;
    let mut grad = vec![0.0; model.params().len()];
    let mut ws = Workspace::new();
    let loss = batch_objective(
        model,
        corpus,
        &resolved,
        config.alpha,
        config.margin,
        sparsity_weight,
        &mut ws,
        Some(&mut grad),
    );
    Ok((loss, grad))
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    momentum: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    fn new(config: &TrainConfig, n: usize) -> Self {
        let (m, v) = match config.optimizer {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::Momentum => (vec![0.0; n], Vec::new()),
            Optimizer::Adam => (vec![0.0; n], vec![0.0; n]),
        };
        Self {
            kind: config.optimizer,
            lr: config.learning_rate,
            momentum: config.momentum,
            m,
            v,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            Optimizer::Momentum => {
                for ((p, g), m) in params.iter_mut().zip(grad).zip(&mut self.m) {
                    *m = self.momentum * *m + g;
                    *p -= self.lr * *m;
                }
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                let lr = self.lr;
                for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    if g == 0.0 && *m == 0.0 {
                        // Untouched rows stay exactly where they are.
                        *v *= B2;
                        continue;
                    }
                    *m = B1 * *m + (1.0 - B1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                }
            }
        }
    }
}

/// Held-out pairs whose accuracy is logged after every epoch.
pub struct HeldOut<'a> {
    pub corpus: &'a FeaturizedCorpus,
    pub pairs: &'a [OrderedPair],
}

fn make_batches(resolved: &[Resolved], num_queries: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<Resolved>> {
    let mut by_query: Vec<Vec<Resolved>> = vec![Vec::new(); num_queries];
    for p in resolved {
        by_query[p.query].push(*p);
    }
    let mut rng = substream(seed, domain::SHUFFLE, epoch as u64);
    let mut batches = Vec::new();
    for mut list in by_query {
        list.shuffle(&mut rng);
        batches.extend(list.chunks(batch_size).map(<[Resolved]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

/// Trains `model` in place and returns one record per epoch.
pub fn train(
    model: &mut DeepFmModel,
    pairs: &[OrderedPair],
    corpus: &FeaturizedCorpus,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    train_monitored(model, pairs, corpus, config, None)
}

pub fn train_monitored(
    model: &mut DeepFmModel,
    pairs: &[OrderedPair],
    corpus: &FeaturizedCorpus,
    config: &TrainConfig,
    heldout: Option<HeldOut<'_>>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Precondition("no training pairs".into()));
    }
    check_inputs(model, corpus)?;
    if let Some(h) = &heldout {
        check_inputs(model, h.corpus)?;
    }
    let resolved = resolve(corpus, pairs)?;
    let mut opt = OptimizerState::new(config, model.params().len());
    let mut grad = vec![0.0; model.params().len()];
    let mut ws = Workspace::new();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lambda = if epoch < config.warmup_epochs { 0.0 } else { config.sparsity_weight };
        let batches = make_batches(&resolved, corpus.queries.len(), config.batch_size, config.seed, epoch);
        let mut sum = LossBreakdown::default();
        let mut seen = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            grad.fill(0.0);
            let loss = batch_objective(
                model,
                corpus,
                batch,
                config.alpha,
                config.margin,
                lambda,
                &mut ws,
                Some(&mut grad),
            );
            if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss or gradient in epoch {epoch}, batch {b} (query {})",
                    corpus.queries[batch[0].query].query_id
                )));
            }
            opt.step(model.params_mut(), &grad);
            let w = batch.len() as f64;
            sum.pair += w * loss.pair;
            sum.point += w * loss.point;
            sum.sparsity += w * loss.sparsity;
            sum.total += w * loss.total;
            seen += w;
        }
        if !model.is_finite() {
            return Err(Error::Numeric(format!("parameters became non-finite in epoch {epoch}")));
        }
        let heldout_accuracy = match &heldout {
            Some(h) => Some(crate::eval::pairwise_accuracy(model, h.corpus, h.pairs)?),
            None => None,
        };
        trace.push(EpochRecord {
            epoch,
            sparsity_weight: lambda,
            loss: LossBreakdown {
                pair: sum.pair / seen,
                point: sum.point / seen,
                sparsity: sum.sparsity / seen,
                total: sum.total / seen,
            },
            gates: gate_summary(model, 0.1),
            heldout_accuracy,
        });
    }
    Ok(trace)
}
