//! DeepFM scorer with polarization gates.
//!
//! ```text
//! score = bias
//!       + Σ_f linear_f[b_f]
//!       + Σ_{i<j, pair kept} g(a_ij) · ⟨e_i, e_j⟩
//!       + MLP(concat_{f kept} g(d_f) · e_f)
//! ```
//!
//! where `e_f` is field `f`'s embedding row for bucket `b_f`. The MLP uses
//! ReLU hidden layers and an identity output. One parameter set serves both
//! siamese towers during pairwise training.
//!
//! All trainable parameters live in one flat vector addressed through a
//! [`Layout`], so optimizers and gradient checks treat the model uniformly.
//! After pruning, gates are hardened: kept interactions use a gate of exactly
//! one and the gate multiply disappears from the inference path.

mod artifact;
pub mod gates;

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use artifact::{ModelArtifact, MODEL_FORMAT, MODEL_VERSION};
pub use gates::{polarize, polarize_grad};

use crate::features::FeatureSchema;
use crate::rng::{domain, substream};
use crate::{Error, Result};

pub const DEFAULT_EMBEDDING_DIM: usize = 3;
pub const DEFAULT_HIDDEN: [usize; 4] = [128, 64, 32, 16];
pub const DEFAULT_BETA: f64 = 0.01;
/// Raw gate value at init; `g_0.01(1) = 1/1.01 > 0.99`.
pub const GATE_INIT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub beta: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            hidden: DEFAULT_HIDDEN.to_vec(),
            beta: DEFAULT_BETA,
            seed: 23,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::config("model.embedding_dim", "must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "layer widths must be positive"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("model.beta", "must be finite and positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerLayout {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `inputs × outputs`.
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

/// Offsets of every parameter block inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub embeddings: Range<usize>,
    pub linear: Range<usize>,
    pub bias: usize,
    pub fm_gates: Range<usize>,
    pub deep_gates: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub total: usize,
}

impl Layout {
    fn new(num_fields: usize, rows: usize, k: usize, deep_inputs: usize, hidden: &[usize]) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let embeddings = take(num_fields * rows * k);
        let linear = take(num_fields * rows);
        let bias = take(1).start;
        let fm_gates = take(num_fields * num_fields.saturating_sub(1) / 2);
        let deep_gates = take(num_fields);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut inputs = deep_inputs;
        for &outputs in hidden.iter().chain(std::iter::once(&1)) {
            layers.push(LayerLayout {
                inputs,
                outputs,
                weights: take(inputs * outputs),
                bias: take(outputs),
            });
            inputs = outputs;
        }
        Self {
            embeddings,
            linear,
            bias,
            fm_gates,
            deep_gates,
            layers,
            total: at,
        }
    }
}

/// Gate values as applied in the forward pass. Pruned pairs are never read.
#[derive(Clone, Debug, PartialEq)]
pub struct GateValues {
    pub fm: Vec<f64>,
    pub deep: Vec<f64>,
    pub hardened: bool,
}

impl GateValues {
    /// Every gate at exactly one.
    pub fn open(model: &DeepFmModel) -> Self {
        Self {
            fm: vec![1.0; model.pairs.len()],
            deep: vec![1.0; model.num_fields],
            hardened: false,
        }
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct Tape {
    emb: Vec<f64>,
    input: Vec<f64>,
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    pub score: f64,
}

impl Tape {
    pub fn new(model: &DeepFmModel) -> Self {
        let widest = model.layout.layers.iter().map(|l| l.inputs.max(l.outputs)).max().unwrap_or(1);
        Self {
            emb: vec![0.0; model.num_fields * model.k],
            input: vec![0.0; model.deep_fields.len() * model.k],
            acts: model.layout.layers.iter().map(|l| vec![0.0; l.outputs]).collect(),
            delta: vec![0.0; widest],
            delta_prev: vec![0.0; widest],
            score: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepFmModel {
    schema_hash: String,
    num_fields: usize,
    rows_per_field: usize,
    k: usize,
    hidden: Vec<usize>,
    beta: f64,
    /// Unordered field pairs `(i, j)`, `i < j`, in lexicographic order.
    pairs: Vec<(usize, usize)>,
    pair_mask: Vec<bool>,
    field_mask: Vec<bool>,
    /// Fields feeding the MLP, in field order.
    deep_fields: Vec<usize>,
    gates_hardened: bool,
    layout: Layout,
    params: Vec<f64>,
}

fn field_pairs(num_fields: usize) -> Vec<(usize, usize)> {
    (0..num_fields)
        .flat_map(|i| (i + 1..num_fields).map(move |j| (i, j)))
        .collect()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn init_model(schema: &FeatureSchema, config: &ModelConfig) -> Result<DeepFmModel> {
    config.validate()?;
    let num_fields = schema.num_fields();
    let rows = schema.rows_per_field();
    let k = config.embedding_dim;
    let layout = Layout::new(num_fields, rows, k, num_fields * k, &config.hidden);
    let mut params = vec![0.0; layout.total];
    let mut rng = substream(config.seed, domain::MODEL_INIT, 0);

    let emb_std = 1.0 / ((num_fields * k) as f64).sqrt();
    for p in &mut params[layout.embeddings.clone()] {
        *p = emb_std * rng.sample::<f64, _>(StandardNormal);
    }
    params[layout.fm_gates.clone()].fill(GATE_INIT);
    params[layout.deep_gates.clone()].fill(GATE_INIT);
    let last = layout.layers.len() - 1;
    for (l, layer) in layout.layers.iter().enumerate() {
        // He scaling for ReLU layers, plain fan-in scaling for the output.
        let gain = if l == last { 1.0 } else { 2.0 };
        let std = (gain / layer.inputs as f64).sqrt();
        for p in &mut params[layer.weights.clone()] {
            *p = std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let pairs = field_pairs(num_fields);
    Ok(DeepFmModel {
        schema_hash: schema.hash(),
        num_fields,
        rows_per_field: rows,
        k,
        hidden: config.hidden.clone(),
        beta: config.beta,
        pair_mask: vec![true; pairs.len()],
        pairs,
        field_mask: vec![true; num_fields],
        deep_fields: (0..num_fields).collect(),
        gates_hardened: false,
        layout,
        params,
    })
}

impl DeepFmModel {
    pub fn schema_hash(&self) -> &str {
        &self.schema_hash
    }

    pub fn num_fields(&self) -> usize {
        self.num_fields
    }

    pub fn rows_per_field(&self) -> usize {
        self.rows_per_field
    }

    pub fn embedding_dim(&self) -> usize {
        self.k
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn field_pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn pair_mask(&self) -> &[bool] {
        &self.pair_mask
    }

    pub fn field_mask(&self) -> &[bool] {
        &self.field_mask
    }

    pub fn deep_fields(&self) -> &[usize] {
        &self.deep_fields
    }

    pub fn gates_hardened(&self) -> bool {
        self.gates_hardened
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * self.num_fields - i * (i + 1) / 2 + (j - i - 1)
    }

    pub fn embedding(&self, field: usize, bucket: usize) -> &[f64] {
        let start = self.layout.embeddings.start + (field * self.rows_per_field + bucket) * self.k;
        &self.params[start..start + self.k]
    }

    pub fn embedding_mut(&mut self, field: usize, bucket: usize) -> &mut [f64] {
        let start = self.layout.embeddings.start + (field * self.rows_per_field + bucket) * self.k;
        &mut self.params[start..start + self.k]
    }

    pub fn linear_weight(&self, field: usize, bucket: usize) -> f64 {
        self.params[self.layout.linear.start + field * self.rows_per_field + bucket]
    }

    pub fn bias(&self) -> f64 {
        self.params[self.layout.bias]
    }

    pub fn fm_gate_raw(&self) -> &[f64] {
        &self.params[self.layout.fm_gates.clone()]
    }

    pub fn deep_gate_raw(&self) -> &[f64] {
        &self.params[self.layout.deep_gates.clone()]
    }

    pub fn fm_gate_raw_mut(&mut self) -> &mut [f64] {
        let r = self.layout.fm_gates.clone();
        &mut self.params[r]
    }

    pub fn deep_gate_raw_mut(&mut self) -> &mut [f64] {
        let r = self.layout.deep_gates.clone();
        &mut self.params[r]
    }

    /// Gate values used by the forward pass.
    pub fn gate_values(&self) -> GateValues {
        if self.gates_hardened {
            return GateValues {
                fm: self.pair_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
                deep: self.field_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
                hardened: true,
            };
        }
        GateValues {
            fm: self.fm_gate_raw().iter().map(|&a| polarize(a, self.beta)).collect(),
            deep: self.deep_gate_raw().iter().map(|&d| polarize(d, self.beta)).collect(),
            hardened: false,
        }
    }

    /// Analytic multiplies per scored item: `k` per kept pair (plus the gate
    /// multiply while gates are soft), `k` per kept deep field while soft,
    /// and every MLP weight.
    pub fn multiply_count(&self) -> u64 {
        let k = self.k as u64;
        let soft = u64::from(!self.gates_hardened);
        let kept_pairs = self.pair_mask.iter().filter(|&&m| m).count() as u64;
        let fm = kept_pairs * (k + soft);
        let deep_gates = soft * k * self.deep_fields.len() as u64;
        let mlp: u64 = self.layout.layers.iter().map(|l| (l.inputs * l.outputs) as u64).sum();
        fm + deep_gates + mlp
    }

    pub fn check_item(&self, item: &[u16]) -> Result<()> {
        if item.len() != self.num_fields {
            return Err(Error::ModelMismatch(format!(
                "item has {} fields, model expects {}",
                item.len(),
                self.num_fields
            )));
        }
        if let Some((f, &b)) = item.iter().enumerate().find(|(_, &b)| b as usize >= self.rows_per_field) {
            return Err(Error::ModelMismatch(format!(
                "bucket {b} of field {f} outside table of {} rows",
                self.rows_per_field
            )));
        }
        Ok(())
    }

    fn gather(&self, item: &[u16], emb: &mut [f64]) {
        let k = self.k;
        for (f, &b) in item.iter().enumerate() {
            emb[f * k..(f + 1) * k].copy_from_slice(self.embedding(f, b as usize));
        }
    }

    fn fm_term(&self, gates: &GateValues, emb: &[f64]) -> f64 {
        let k = self.k;
        let mut sum = 0.0;
        for (p, &(i, j)) in self.pairs.iter().enumerate() {
            if !self.pair_mask[p] {
                continue;
            }
            let d = dot(&emb[i * k..(i + 1) * k], &emb[j * k..(j + 1) * k]);
            sum += if gates.hardened { d } else { gates.fm[p] * d };
        }
        sum
    }

    /// The second-order term for `item` under the given gate values.
    pub fn fm_interaction(&self, gates: &GateValues, item: &[u16]) -> f64 {
        let mut emb = vec![0.0; self.num_fields * self.k];
        self.gather(item, &mut emb);
        self.fm_term(gates, &emb)
    }

    /// Forward pass recording activations. `item` must already be validated.
    pub fn forward(&self, gates: &GateValues, item: &[u16], tape: &mut Tape) -> f64 {
        let k = self.k;
        self.gather(item, &mut tape.emb);

        let mut score = self.bias();
        let lin = &self.params[self.layout.linear.clone()];
        for (f, &b) in item.iter().enumerate() {
            score += lin[f * self.rows_per_field + b as usize];
        }
        score += self.fm_term(gates, &tape.emb);

        for (s, &f) in self.deep_fields.iter().enumerate() {
            let src = &tape.emb[f * k..(f + 1) * k];
            let dst = &mut tape.input[s * k..(s + 1) * k];
            if gates.hardened {
                dst.copy_from_slice(src);
            } else {
                let g = gates.deep[f];
                for (d, e) in dst.iter_mut().zip(src) {
                    *d = g * e;
                }
            }
        }

        let last = self.layout.layers.len() - 1;
        for (l, layer) in self.layout.layers.iter().enumerate() {
            let (before, rest) = tape.acts.split_at_mut(l);
            let input: &[f64] = if l == 0 { &tape.input } else { &before[l - 1] };
            let out = &mut rest[0];
            out.copy_from_slice(&self.params[layer.bias.clone()]);
            let w = &self.params[layer.weights.clone()];
            for (i, &x) in input.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let row = &w[i * layer.outputs..(i + 1) * layer.outputs];
                for (o, &wv) in out.iter_mut().zip(row) {
                    *o += x * wv;
                }
            }
            if l != last {
                for o in out.iter_mut() {
                    if *o < 0.0 {
                        *o = 0.0;
                    }
                }
            }
        }
        score += tape.acts[last][0];
        tape.score = score;
        score
    }

    /// Accumulates `d_score · ∂score/∂θ` into `grad` for the item last run
    /// through `forward` with this tape.
    pub fn backward(&self, gates: &GateValues, item: &[u16], tape: &mut Tape, d_score: f64, grad: &mut [f64]) {
        let k = self.k;
        let rows = self.rows_per_field;
        let lay = &self.layout;
        grad[lay.bias] += d_score;
        for (f, &b) in item.iter().enumerate() {
            grad[lay.linear.start + f * rows + b as usize] += d_score;
        }

        let emb_at = |f: usize| lay.embeddings.start + (f * rows + item[f] as usize) * k;

        let fm_gate_raw = &self.params[lay.fm_gates.clone()];
        for (p, &(i, j)) in self.pairs.iter().enumerate() {
            if !self.pair_mask[p] {
                continue;
            }
            let ei = &tape.emb[i * k..(i + 1) * k];
            let ej = &tape.emb[j * k..(j + 1) * k];
            let g = if gates.hardened { 1.0 } else { gates.fm[p] };
            let scale = d_score * g;
            let (gi, gj) = (emb_at(i), emb_at(j));
            for c in 0..k {
                grad[gi + c] += scale * ej[c];
                grad[gj + c] += scale * ei[c];
            }
            if !gates.hardened {
                grad[lay.fm_gates.start + p] += d_score * polarize_grad(fm_gate_raw[p], self.beta) * dot(ei, ej);
            }
        }

        // MLP, output layer first.
        let nl = lay.layers.len();
        tape.delta[0] = d_score;
        for l in (0..nl).rev() {
            let layer = &lay.layers[l];
            let input: &[f64] = if l == 0 { &tape.input } else { &tape.acts[l - 1] };
            let delta = &tape.delta[..layer.outputs];
            for (gb, &d) in grad[layer.bias.clone()].iter_mut().zip(delta) {
                *gb += d;
            }
            let w = &self.params[layer.weights.clone()];
            let gw = &mut grad[layer.weights.clone()];
            let prev = &mut tape.delta_prev[..layer.inputs];
            for (i, &x) in input.iter().enumerate() {
                let row = &w[i * layer.outputs..(i + 1) * layer.outputs];
                // Hidden inputs are ReLU outputs: zero means no gradient flows.
                if l > 0 && x == 0.0 {
                    prev[i] = 0.0;
                    continue;
                }
                prev[i] = dot(row, delta);
                if x != 0.0 {
                    let grow = &mut gw[i * layer.outputs..(i + 1) * layer.outputs];
                    for (g, &d) in grow.iter_mut().zip(delta) {
                        *g += x * d;
                    }
                }
            }
            std::mem::swap(&mut tape.delta, &mut tape.delta_prev);
        }
        // tape.delta now holds ∂score/∂input, already scaled by d_score.
        let deep_gate_raw = &self.params[lay.deep_gates.clone()];
        for (s, &f) in self.deep_fields.iter().enumerate() {
            let dx = &tape.delta[s * k..(s + 1) * k];
            let g = if gates.hardened { 1.0 } else { gates.deep[f] };
            let at = emb_at(f);
            for c in 0..k {
                grad[at + c] += g * dx[c];
            }
            if !gates.hardened {
                let e = &tape.emb[f * k..(f + 1) * k];
                grad[lay.deep_gates.start + f] += polarize_grad(deep_gate_raw[f], self.beta) * dot(e, dx);
            }
        }
    }

    /// Scores one discretized item.
    pub fn score(&self, item: &[u16]) -> Result<f64> {
        self.check_item(item)?;
        let gates = self.gate_values();
        let mut tape = Tape::new(self);
        Ok(self.forward(&gates, item, &mut tape))
    }

    /// Scores items in order; elementwise identical to [`Self::score`].
    pub fn score_batch<'a>(&self, items: impl IntoIterator<Item = &'a [u16]>) -> Result<Vec<f64>> {
        let gates = self.gate_values();
        let mut tape = Tape::new(self);
        items
            .into_iter()
            .map(|item| {
                self.check_item(item)?;
                Ok(self.forward(&gates, item, &mut tape))
            })
            .collect()
    }

    /// Scores a row-major block of `n × num_fields` buckets without
    /// per-item validation. Callers validate the block once.
    pub fn score_rows(&self, buckets: &[u16], out: &mut Vec<f64>) {
        let gates = self.gate_values();
        let mut tape = Tape::new(self);
        out.clear();
        out.extend(buckets.chunks_exact(self.num_fields).map(|item| self.forward(&gates, item, &mut tape)));
    }

    pub fn check_rows(&self, buckets: &[u16]) -> Result<()> {
        if !buckets.len().is_multiple_of(self.num_fields) {
            return Err(Error::ModelMismatch("bucket block is not a whole number of items".into()));
        }
        if buckets.iter().any(|&b| b as usize >= self.rows_per_field) {
            return Err(Error::ModelMismatch("bucket index outside embedding table".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn param_hash(&self) -> String {
        crate::hashing::hash_f64s(&self.params)
    }

    /// A structurally reduced copy: masked pairs dropped, masked fields
    /// removed from the MLP input (their first-layer rows deleted), and all
    /// remaining gates hardened to one. A surviving deep gate's value is
    /// folded into its first-layer rows, so only FM gates lose their soft
    /// value. Masks only ever shrink.
    pub fn restructured(&self, pair_keep: &[bool], field_keep: &[bool]) -> Result<DeepFmModel> {
        if pair_keep.len() != self.pairs.len() || field_keep.len() != self.num_fields {
            return Err(Error::Precondition("mask length does not match the model".into()));
        }
        let pair_mask: Vec<bool> = self.pair_mask.iter().zip(pair_keep).map(|(&a, &b)| a && b).collect();
        let field_mask: Vec<bool> = self.field_mask.iter().zip(field_keep).map(|(&a, &b)| a && b).collect();
        let deep_fields: Vec<usize> = (0..self.num_fields).filter(|&f| field_mask[f]).collect();
        if deep_fields.is_empty() {
            return Err(Error::PruneRefused("every field would be removed from the deep side".into()));
        }
        let k = self.k;
        let layout = Layout::new(self.num_fields, self.rows_per_field, k, deep_fields.len() * k, &self.hidden);
        let mut params = vec![0.0; layout.total];
        let old = &self.layout;
        let copy = |params: &mut Vec<f64>, dst: Range<usize>, src: Range<usize>| {
            params[dst].copy_from_slice(&self.params[src]);
        };
        copy(&mut params, layout.embeddings.clone(), old.embeddings.clone());
        copy(&mut params, layout.linear.clone(), old.linear.clone());
        params[layout.bias] = self.params[old.bias];
        copy(&mut params, layout.fm_gates.clone(), old.fm_gates.clone());
        copy(&mut params, layout.deep_gates.clone(), old.deep_gates.clone());
        for (l, (new_l, old_l)) in layout.layers.iter().zip(&old.layers).enumerate() {
            copy(&mut params, new_l.bias.clone(), old_l.bias.clone());
            if l > 0 {
                copy(&mut params, new_l.weights.clone(), old_l.weights.clone());
                continue;
            }
            let width = old_l.outputs;
            let mut dst = new_l.weights.start;
            for (old_slot, f) in self.deep_fields.iter().enumerate() {
                if !field_mask[*f] {
                    continue;
                }
                let src = old_l.weights.start + old_slot * k * width;
                params[dst..dst + k * width].copy_from_slice(&self.params[src..src + k * width]);
                if !self.gates_hardened {
                    // The surviving deep gate is folded into its rows, which
                    // keeps the deep side exact without a gate multiply.
                    let g = polarize(self.params[old.deep_gates.start + f], self.beta);
                    for w in &mut params[dst..dst + k * width] {
                        *w *= g;
                    }
                }
                dst += k * width;
            }
        }
        Ok(DeepFmModel {
            schema_hash: self.schema_hash.clone(),
            num_fields: self.num_fields,
            rows_per_field: self.rows_per_field,
            k,
            hidden: self.hidden.clone(),
            beta: self.beta,
            pairs: self.pairs.clone(),
            pair_mask,
            field_mask,
            deep_fields,
            gates_hardened: true,
            layout,
            params,
        })
    }
}
