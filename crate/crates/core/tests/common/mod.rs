//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rankdfm::datagen::PopularityClass;
use rankdfm::features::{
    DistributionKind, FeatureSchema, FeaturizedCorpus, FeaturizedQuery, FieldGroup, FieldSpec, SCHEMA_FORMAT,
    SCHEMA_VERSION,
};
use rankdfm::model::{init_model, DeepFmModel, ModelConfig};
use rankdfm::pairs::OrderedPair;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A schema of `num_fields` uniform fields with bucket width `w`.
pub fn toy_schema(num_fields: usize, w: f64) -> FeatureSchema {
    FeatureSchema {
        format: SCHEMA_FORMAT.into(),
        version: SCHEMA_VERSION,
        bucket_width: w,
        outlier_margin: 0.5,
        fields: (0..num_fields)
            .map(|i| FieldSpec {
                name: format!("f{i}"),
                group: FieldGroup::Item,
                kind: DistributionKind::Uniform,
                observed_min: 0.0,
                observed_max: 1.0,
            })
            .collect(),
    }
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        hidden: vec![16, 8],
        ..ModelConfig::default()
    }
}

/// A freshly initialized model with every parameter perturbed and gates
/// spread over both sides of zero, so no term is trivially inactive.
pub fn random_model(schema: &FeatureSchema, config: &ModelConfig, seed: u64) -> DeepFmModel {
    let mut m = init_model(schema, &ModelConfig { seed, ..config.clone() }).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for p in m.params_mut() {
        *p += r.random_range(-0.2..0.2);
    }
    for g in m.fm_gate_raw_mut() {
        *g = r.random_range(-1.5..1.5);
    }
    for g in m.deep_gate_raw_mut() {
        *g = r.random_range(-1.5..1.5);
    }
    m
}

pub fn random_item(r: &mut impl Rng, num_fields: usize, rows: usize) -> Vec<u16> {
    (0..num_fields).map(|_| r.random_range(0..rows as u16)).collect()
}

/// Random buckets with a teacher that mixes a linear part and a cross term.
pub fn random_corpus(schema: &FeatureSchema, queries: usize, per_query: usize, seed: u64) -> FeaturizedCorpus {
    let mut r = rng(seed);
    let f = schema.num_fields();
    let rows = schema.rows_per_field();
    let queries = (0..queries as u64)
        .map(|q| {
            let buckets: Vec<u16> = (0..per_query * f).map(|_| r.random_range(0..rows as u16)).collect();
            let teacher = buckets
                .chunks(f)
                .map(|item| {
                    let x: Vec<f64> = item.iter().map(|&b| b as f64 / rows as f64).collect();
                    let lin: f64 = x.iter().enumerate().map(|(i, v)| v * (1.0 + i as f64) / f as f64).sum();
                    let cross = x[0] * x[f - 1];
                    1.0 / (1.0 + (-(lin - 1.0 + 2.0 * cross)).exp())
                })
                .collect();
            FeaturizedQuery {
                query_id: q,
                class: if q % 2 == 0 {
                    PopularityClass::Random
                } else {
                    PopularityClass::Longtail
                },
                item_ids: (0..per_query as u64).map(|i| q * 100_000 + i).collect(),
                buckets,
                teacher,
            }
        })
        .collect();
    FeaturizedCorpus {
        schema_hash: schema.hash(),
        num_fields: f,
        rows_per_field: rows,
        queries,
    }
}

/// Random ordered pairs within each query, positive by teacher score.
pub fn random_pairs(corpus: &FeaturizedCorpus, per_query: usize, seed: u64) -> Vec<OrderedPair> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for q in &corpus.queries {
        let mut made = 0;
        while made < per_query {
            let a = r.random_range(0..q.len());
            let b = r.random_range(0..q.len());
            let (ra, rb) = (q.teacher[a], q.teacher[b]);
            if ra == rb {
                continue;
            }
            let (p, n) = if ra > rb { (a, b) } else { (b, a) };
            out.push(OrderedPair {
                query_id: q.query_id,
                pos_item_id: q.item_ids[p],
                neg_item_id: q.item_ids[n],
                r_p: q.teacher[p],
                r_n: q.teacher[n],
            });
            made += 1;
        }
    }
    out
}
