//! Pointwise linear regressor over bucket indicators: one weight per bucket
//! per field plus a bias, fit to teacher scores by SGD on squared error.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::features::{FeatureSchema, FeaturizedCorpus};
use crate::rng::{domain, substream};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            epochs: 5,
            seed: 31,
        }
    }
}

impl LinearConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("baseline.learning_rate", "must be finite and positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    schema_hash: String,
    num_fields: usize,
    rows_per_field: usize,
    weights: Vec<f64>,
    bias: f64,
}

impl LinearModel {
    pub fn zeros(schema: &FeatureSchema) -> Self {
        Self {
            schema_hash: schema.hash(),
            num_fields: schema.num_fields(),
            rows_per_field: schema.rows_per_field(),
            weights: vec![0.0; schema.num_fields() * schema.rows_per_field()],
            bias: 0.0,
        }
    }

    pub(crate) fn from_parts(
        schema_hash: String,
        num_fields: usize,
        rows_per_field: usize,
        weights: Vec<f64>,
        bias: f64,
    ) -> Self {
        Self {
            schema_hash,
            num_fields,
            rows_per_field,
            weights,
            bias,
        }
    }

    pub fn schema_hash(&self) -> &str {
        &self.schema_hash
    }

    pub fn num_fields(&self) -> usize {
        self.num_fields
    }

    pub fn rows_per_field(&self) -> usize {
        self.rows_per_field
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn set_bias(&mut self, bias: f64) {
        self.bias = bias;
    }

    #[inline]
    fn score_unchecked(&self, item: &[u16]) -> f64 {
        let mut s = self.bias;
        for (f, &b) in item.iter().enumerate() {
            s += self.weights[f * self.rows_per_field + b as usize];
        }
        s
    }

    pub fn check_rows(&self, buckets: &[u16]) -> Result<()> {
        if !buckets.len().is_multiple_of(self.num_fields) {
            return Err(Error::ModelMismatch("bucket block is not a whole number of items".into()));
        }
        if buckets.iter().any(|&b| b as usize >= self.rows_per_field) {
            return Err(Error::ModelMismatch("bucket index outside weight table".into()));
        }
        Ok(())
    }

    pub fn score(&self, item: &[u16]) -> Result<f64> {
        if item.len() != self.num_fields {
            return Err(Error::ModelMismatch(format!(
                "item has {} fields, model expects {}",
                item.len(),
                self.num_fields
            )));
        }
        self.check_rows(item)?;
        Ok(self.score_unchecked(item))
    }

    pub fn score_rows(&self, buckets: &[u16], out: &mut Vec<f64>) {
        out.clear();
        out.extend(buckets.chunks_exact(self.num_fields).map(|item| self.score_unchecked(item)));
    }

    pub fn param_hash(&self) -> String {
        let mut all = self.weights.clone();
        all.push(self.bias);
        crate::hashing::hash_f64s(&all)
    }
}

/// Fits a linear model to the teacher scores of every candidate in `corpus`.
pub fn train_linear(schema: &FeatureSchema, corpus: &FeaturizedCorpus, config: &LinearConfig) -> Result<LinearModel> {
    config.validate()?;
    if corpus.schema_hash != schema.hash() {
        return Err(Error::ModelMismatch("featurized corpus was built with a different schema".into()));
    }
    let mut model = LinearModel::zeros(schema);
    let mut order: Vec<(usize, usize)> = corpus
        .queries
        .iter()
        .enumerate()
        .flat_map(|(q, fq)| (0..fq.len()).map(move |i| (q, i)))
        .collect();
    if order.is_empty() {
        return Err(Error::Precondition("no items to fit".into()));
    }
    for q in &corpus.queries {
        model.check_rows(&q.buckets)?;
    }
    // Start from the mean so the bias does not have to travel.
    let mean = corpus.queries.iter().flat_map(|q| &q.teacher).sum::<f64>() / order.len() as f64;
    model.bias = mean;
    let lr = config.learning_rate;
    for epoch in 0..config.epochs {
        let mut rng = substream(config.seed, domain::BASELINE, epoch as u64);
        order.shuffle(&mut rng);
        for &(q, i) in &order {
            let fq = &corpus.queries[q];
            let item = fq.item(i);
            let err = model.score_unchecked(item) - fq.teacher[i];
            let step = lr * err;
            model.bias -= step;
            for (f, &b) in item.iter().enumerate() {
                model.weights[f * model.rows_per_field + b as usize] -= step;
            }
            if !err.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite baseline residual in epoch {epoch}, query {}",
                    fq.query_id
                )));
            }
        }
    }
    Ok(model)
}
