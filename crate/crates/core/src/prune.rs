//! Structural pruning of closed gates.
//!
//! A pair whose FM gate falls below `τ` loses its interaction term; a field
//! whose deep gate falls below `τ` leaves the MLP input, taking its rows of
//! the first weight matrix with it. Surviving gates are hardened to exactly
//! one, so the pruned scorer does no gate multiplies at all.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::features::FeaturizedCorpus;
use crate::model::DeepFmModel;
use crate::pairs::OrderedPair;
use crate::rng::{domain, substream};
use crate::train::{train, EpochRecord, TrainConfig};
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.1;
pub const MIN_AUDIT_ITEMS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GateId {
    Pair { i: usize, j: usize },
    Field { field: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateValue {
    pub gate: GateId,
    pub value: f64,
}

/// Every applied gate value, ascending. Pair gates come before field gates
/// on ties.
pub fn gate_histogram(model: &DeepFmModel) -> Vec<GateValue> {
    let g = model.gate_values();
    let mut out: Vec<GateValue> = model
        .field_pairs()
        .iter()
        .zip(&g.fm)
        .map(|(&(i, j), &value)| GateValue {
            gate: GateId::Pair { i, j },
            value,
        })
        .chain(g.deep.iter().enumerate().map(|(field, &value)| GateValue {
            gate: GateId::Field { field },
            value,
        }))
        .collect();
    out.sort_by(|a, b| a.value.total_cmp(&b.value));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub threshold: f64,
    pub pairs_total: usize,
    pub pairs_removed: usize,
    pub fields_total: usize,
    pub fields_removed: usize,
    pub multiply_count_before: u64,
    pub multiply_count_after: u64,
    pub audit_items: usize,
    pub max_score_delta: f64,
}

/// `n` candidate rows drawn without replacement from the whole corpus.
pub fn sample_audit_items(corpus: &FeaturizedCorpus, n: usize, seed: u64) -> Vec<u16> {
    let total = corpus.num_items();
    let n = n.min(total);
    let mut rng = substream(seed, domain::AUDIT, 0);
    let mut picks = index::sample(&mut rng, total, n).into_vec();
    picks.sort_unstable();
    let mut out = Vec::with_capacity(n * corpus.num_fields);
    let mut base = 0;
    let mut qi = 0;
    for p in picks {
        while p >= base + corpus.queries[qi].len() {
            base += corpus.queries[qi].len();
            qi += 1;
        }
        out.extend_from_slice(corpus.queries[qi].item(p - base));
    }
    out
}

/// Prunes every gate below `threshold` and audits the score drift on
/// `audit` (a row-major block of discretized items).
pub fn prune(model: &DeepFmModel, threshold: f64, audit: &[u16]) -> Result<(DeepFmModel, PruneReport)> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::config("prune.threshold", "must lie in [0, 1)"));
    }
    model.check_rows(audit)?;
    let g = model.gate_values();
    let pair_keep: Vec<bool> = g.fm.iter().map(|&v| v >= threshold).collect();
    let field_keep: Vec<bool> = g.deep.iter().map(|&v| v >= threshold).collect();
    let pruned = model.restructured(&pair_keep, &field_keep)?;

    let mut before = Vec::new();
    let mut after = Vec::new();
    model.score_rows(audit, &mut before);
    pruned.score_rows(audit, &mut after);
    let max_score_delta = before
        .iter()
        .zip(&after)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let report = PruneReport {
        threshold,
        pairs_total: pruned.pair_mask().len(),
        pairs_removed: pruned.pair_mask().iter().filter(|&&m| !m).count(),
        fields_total: pruned.field_mask().len(),
        fields_removed: pruned.field_mask().iter().filter(|&&m| !m).count(),
        multiply_count_before: model.multiply_count(),
        multiply_count_after: pruned.multiply_count(),
        audit_items: before.len(),
        max_score_delta,
    };
    Ok((pruned, report))
}

/// Continues training a pruned model with its masks and hardened gates
/// frozen. Sparsity pressure is off since no trainable gates remain.
pub fn finetune_after_prune(
    model: &mut DeepFmModel,
    pairs: &[OrderedPair],
    corpus: &FeaturizedCorpus,
    config: &TrainConfig,
    epochs: usize,
) -> Result<Vec<EpochRecord>> {
    if !model.gates_hardened() {
        return Err(Error::Precondition("fine-tuning expects a pruned model".into()));
    }
    if epochs == 0 {
        return Ok(Vec::new());
    }
    let cfg = TrainConfig {
        epochs,
        sparsity_weight: 0.0,
        warmup_epochs: 0,
        ..config.clone()
    };
    train(model, pairs, corpus, &cfg)
}
