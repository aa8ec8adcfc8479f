//! Synthetic cascade corpus: queries, matching-layer candidate sets, raw
//! features and a deterministic teacher ranker.
//!
//! Every query and item carries a hidden standard-normal latent vector. Raw
//! features are noisy monotone transforms of latent signals, so the teacher is
//! learnable from features alone. The teacher mixes linear terms with
//! multiplicative query×item and item×item crosses, which an interaction-free
//! model cannot represent.
//!
//! # Corpus file layout
//!
//! Line-delimited JSON, one record per line, tagged by `"record"`:
//!
//! ```text
//! {"record":"header","format":"rankdfm-corpus","version":1,"seed":7,"config":{..},"teacher":{..}}
//! {"record":"item","id":12,"latent":[..6 reals..]}                       (sorted by id)
//! {"record":"query","query":{"id":0,"class":"random","latent":[..]},
//!  "candidates":[{"item":12,"features":[0.41,null,..],"teacher":0.73},..]}
//! ```
//!
//! `null` in a feature array is the MISSING marker. Only items referenced by
//! some candidate set are written.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erf_inv};

use crate::features::{DistributionKind, FeatureVector, FieldDecl, FieldGroup};
use crate::rng::{domain, substream};
use crate::{Error, Result};

pub const CORPUS_FORMAT: &str = "rankdfm-corpus";
pub const CORPUS_VERSION: u32 = 1;

/// Item latent coordinates.
pub mod item_coord {
    pub const QUALITY: usize = 0;
    pub const POPULARITY: usize = 1;
    pub const FRESHNESS: usize = 2;
    pub const DURATION: usize = 3;
    pub const TOPIC_A: usize = 4;
    pub const TOPIC_B: usize = 5;
    pub const DIM: usize = 6;
}

/// Query latent coordinates.
pub mod query_coord {
    pub const FREQUENCY: usize = 0;
    pub const INTENT: usize = 1;
    pub const TOPIC_A: usize = 2;
    pub const TOPIC_B: usize = 3;
    pub const DIM: usize = 4;
}

/// Mean shift applied to the popularity/frequency latent of the rare pools.
const LONGTAIL_SHIFT: f64 = -1.5;
/// Injected outliers sit at this multiple of a field's nominal maximum.
const OUTLIER_FACTOR: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopularityClass {
    Random,
    Longtail,
}

/// Where a raw feature draws its signal from. Every source is standard normal
/// over random (query, item) draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "index")]
pub enum SignalSource {
    Item(usize),
    Query(usize),
    /// Topic match between query and item, Laplace-distributed in latent
    /// space and mapped through its CDF and the normal quantile.
    Relevance,
    /// Blend of item quality and relevance.
    Engagement,
    /// Independent noise; carries no information about the teacher.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldRecipe {
    pub name: String,
    pub group: FieldGroup,
    pub kind: DistributionKind,
    pub source: SignalSource,
    /// Upper bound for uniform fields, median for long-tail fields.
    pub scale: f64,
}

impl FieldRecipe {
    fn new(name: &str, group: FieldGroup, kind: DistributionKind, source: SignalSource, scale: f64) -> Self {
        Self {
            name: name.to_string(),
            group,
            kind,
            source,
            scale,
        }
    }

    pub fn decl(&self) -> FieldDecl {
        FieldDecl {
            name: self.name.clone(),
            group: self.group,
            kind: self.kind,
        }
    }

    /// Largest value the field produces in the absence of injected outliers,
    /// up to a 3-sigma cut for long-tail fields.
    pub fn nominal_max(&self) -> f64 {
        match self.kind {
            DistributionKind::Uniform => self.scale,
            DistributionKind::Longtail => self.scale * 3f64.exp(),
        }
    }

    fn realize(&self, z: f64) -> f64 {
        match self.kind {
            DistributionKind::Uniform => self.scale * std_normal_cdf(z),
            DistributionKind::Longtail => self.scale * z.exp(),
        }
    }
}

pub fn default_fields() -> Vec<FieldRecipe> {
    use DistributionKind::{Longtail, Uniform};
    use FieldGroup::{Cross, Item, Query};
    use SignalSource as S;
    vec![
        FieldRecipe::new("item_quality", Item, Uniform, S::Item(item_coord::QUALITY), 1.0),
        FieldRecipe::new("item_popularity", Item, Longtail, S::Item(item_coord::POPULARITY), 200.0),
        FieldRecipe::new("item_freshness", Item, Uniform, S::Item(item_coord::FRESHNESS), 30.0),
        FieldRecipe::new("item_duration", Item, Longtail, S::Item(item_coord::DURATION), 40.0),
        FieldRecipe::new("item_topic_a", Item, Uniform, S::Item(item_coord::TOPIC_A), 1.0),
        FieldRecipe::new("item_topic_b", Item, Uniform, S::Item(item_coord::TOPIC_B), 1.0),
        FieldRecipe::new("query_frequency", Query, Longtail, S::Query(query_coord::FREQUENCY), 50.0),
        FieldRecipe::new("query_intent", Query, Uniform, S::Query(query_coord::INTENT), 1.0),
        FieldRecipe::new("query_topic_a", Query, Uniform, S::Query(query_coord::TOPIC_A), 1.0),
        FieldRecipe::new("query_topic_b", Query, Uniform, S::Query(query_coord::TOPIC_B), 1.0),
        FieldRecipe::new("text_match", Cross, Uniform, S::Relevance, 1.0),
        FieldRecipe::new("click_ratio", Cross, Longtail, S::Engagement, 0.05),
        FieldRecipe::new("author_affinity", Cross, Uniform, S::Noise, 1.0),
        FieldRecipe::new("share_count", Cross, Longtail, S::Noise, 10.0),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub num_queries: usize,
    pub candidates_per_query: usize,
    /// Items drawn per query before the matching cut keeps the best-matching
    /// `candidates_per_query`.
    pub matching_pool_factor: usize,
    pub matching_noise: f64,
    pub item_pool_size: usize,
    pub longtail_pool_size: usize,
    pub missing_rate: f64,
    pub outlier_rate: f64,
    /// Correlation between a latent signal and its observed feature.
    pub feature_fidelity: f64,
    pub teacher_noise: f64,
    pub fields: Vec<FieldRecipe>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_queries: 250,
            candidates_per_query: 1000,
            matching_pool_factor: 2,
            matching_noise: 1.0,
            item_pool_size: 20_000,
            longtail_pool_size: 8_000,
            missing_rate: 0.02,
            outlier_rate: 0.005,
            feature_fidelity: 0.99,
            teacher_noise: 0.1,
            fields: default_fields(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if !(0.0..1.0).contains(&v) {
                Err(Error::config(format!("gen.{name}"), format!("{v} outside [0, 1)")))
            } else {
                Ok(())
            }
        };
        unit("missing_rate", self.missing_rate)?;
        unit("outlier_rate", self.outlier_rate)?;
        if self.missing_rate + self.outlier_rate >= 1.0 {
            return Err(Error::config("gen.outlier_rate", "missing_rate + outlier_rate must be < 1"));
        }
        if self.candidates_per_query < 2 {
            return Err(Error::config("gen.candidates_per_query", "candidate sets need at least 2 items"));
        }
        if self.num_queries == 0 {
            return Err(Error::config("gen.num_queries", "must be positive"));
        }
        if self.matching_pool_factor == 0 {
            return Err(Error::config("gen.matching_pool_factor", "must be positive"));
        }
        let draw = self.candidates_per_query * self.matching_pool_factor;
        if self.item_pool_size < draw {
            return Err(Error::config(
                "gen.item_pool_size",
                format!("pool of {} cannot supply {draw} matching draws", self.item_pool_size),
            ));
        }
        if self.num_queries > 1 && self.longtail_pool_size < draw {
            return Err(Error::config(
                "gen.longtail_pool_size",
                format!("pool of {} cannot supply {draw} matching draws", self.longtail_pool_size),
            ));
        }
        if self.item_pool_size + self.longtail_pool_size > u32::MAX as usize || self.num_queries > u32::MAX as usize {
            return Err(Error::config("gen", "ids must fit in 32 bits"));
        }
        if !(self.feature_fidelity > 0.0 && self.feature_fidelity <= 1.0) {
            return Err(Error::config("gen.feature_fidelity", "must lie in (0, 1]"));
        }
        if !(self.teacher_noise >= 0.0 && self.teacher_noise.is_finite()) {
            return Err(Error::config("gen.teacher_noise", "must be finite and non-negative"));
        }
        if !(self.matching_noise >= 0.0 && self.matching_noise.is_finite()) {
            return Err(Error::config("gen.matching_noise", "must be finite and non-negative"));
        }
        if self.fields.is_empty() {
            return Err(Error::config("gen.fields", "at least one field is required"));
        }
        let mut names = HashSet::new();
        for (i, f) in self.fields.iter().enumerate() {
            if !names.insert(f.name.as_str()) {
                return Err(Error::config(format!("gen.fields[{i}].name"), format!("duplicate `{}`", f.name)));
            }
            if !(f.scale > 0.0 && f.scale.is_finite()) {
                return Err(Error::config(format!("gen.fields[{i}].scale"), "must be finite and positive"));
            }
            let bad = match f.source {
                SignalSource::Item(c) => c >= item_coord::DIM,
                SignalSource::Query(c) => c >= query_coord::DIM,
                _ => false,
            };
            if bad {
                return Err(Error::config(format!("gen.fields[{i}].source"), "latent coordinate out of range"));
            }
        }
        Ok(())
    }

    pub fn field_decls(&self) -> Vec<FieldDecl> {
        self.fields.iter().map(FieldRecipe::decl).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub class: PopularityClass,
    pub latent: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: u64,
    pub latent: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub item_id: u64,
    pub features: FeatureVector,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSet {
    pub query_id: u64,
    pub item_ids: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item_id: u64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherScoredSet {
    pub query_id: u64,
    pub entries: Vec<ScoredItem>,
}

impl TeacherScoredSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One query with its matching-layer output and the teacher's scores.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBlock {
    pub query: Query,
    pub candidates: Vec<Candidate>,
    pub teacher_scores: Vec<f64>,
}

impl QueryBlock {
    pub fn candidate_set(&self) -> CandidateSet {
        CandidateSet {
            query_id: self.query.id,
            item_ids: self.candidates.iter().map(|c| c.item_id).collect(),
        }
    }

    pub fn scored_set(&self) -> TeacherScoredSet {
        TeacherScoredSet {
            query_id: self.query.id,
            entries: self
                .candidates
                .iter()
                .zip(&self.teacher_scores)
                .map(|(c, &score)| ScoredItem {
                    item_id: c.item_id,
                    score,
                })
                .collect(),
        }
    }
}

/// The simulated ranking layer.
///
/// `logit = 0.9·quality + 0.6·popularity + relevance + 0.8·intent·freshness
///          + 0.6·quality·duration − 0.4·frequency·popularity + noise·jitter`
///
/// and the score is the logistic of the logit. The jitter is a pseudo-random
/// standard normal keyed by `(seed, query, item)`, fixed at generation time, so
/// repeated scoring of the same pair is exact.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    pub seed: u64,
    pub noise: f64,
}

impl Teacher {
    /// The noise-free part of the logit: what an oracle with latent access sees.
    pub fn latent_logit(query: &Query, item: &Item) -> f64 {
        use item_coord as ic;
        use query_coord as qc;
        let v = &item.latent;
        let q = &query.latent;
        let relevance = q[qc::TOPIC_A] * v[ic::TOPIC_A] + q[qc::TOPIC_B] * v[ic::TOPIC_B];
        0.9 * v[ic::QUALITY] + 0.6 * v[ic::POPULARITY] + relevance
            + 0.8 * q[qc::INTENT] * v[ic::FRESHNESS]
            + 0.6 * v[ic::QUALITY] * v[ic::DURATION]
            - 0.4 * q[qc::FREQUENCY] * v[ic::POPULARITY]
    }

    fn jitter(&self, query_id: u64, item_id: u64) -> f64 {
        let mut rng = substream(self.seed, domain::TEACHER_JITTER, (query_id << 32) | (item_id & 0xFFFF_FFFF));
        rng.sample(StandardNormal)
    }

    pub fn score(&self, query: &Query, item: &Item) -> f64 {
        let logit = Self::latent_logit(query, item) + self.noise * self.jitter(query.id, item.id);
        logistic(logit)
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

pub fn std_normal_quantile(u: f64) -> f64 {
    let u = u.clamp(1e-15, 1.0 - 1e-15);
    std::f64::consts::SQRT_2 * erf_inv(2.0 * u - 1.0)
}

/// CDF of the standard Laplace distribution, the law of a sum of two
/// independent products of standard normals.
fn laplace_cdf(x: f64) -> f64 {
    if x < 0.0 {
        0.5 * x.exp()
    } else {
        1.0 - 0.5 * (-x).exp()
    }
}

fn relevance(query: &Query, item: &Item) -> f64 {
    query.latent[query_coord::TOPIC_A] * item.latent[item_coord::TOPIC_A]
        + query.latent[query_coord::TOPIC_B] * item.latent[item_coord::TOPIC_B]
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub config: GenConfig,
    pub teacher: Teacher,
    items: Vec<Item>,
    item_index: HashMap<u64, usize>,
    pub blocks: Vec<QueryBlock>,
}

fn normal_vec<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn make_item(seed: u64, id: u64, longtail: bool) -> Item {
    let mut rng = substream(seed, domain::ITEM, id);
    let mut latent = normal_vec(&mut rng, item_coord::DIM);
    if longtail {
        latent[item_coord::POPULARITY] += LONGTAIL_SHIFT;
    }
    Item { id, latent }
}

fn make_query(seed: u64, id: u64) -> Query {
    let mut rng = substream(seed, domain::QUERY, id);
    let class = if id.is_multiple_of(2) {
        PopularityClass::Random
    } else {
        PopularityClass::Longtail
    };
    let mut latent = normal_vec(&mut rng, query_coord::DIM);
    if class == PopularityClass::Longtail {
        latent[query_coord::FREQUENCY] += LONGTAIL_SHIFT;
    }
    Query { id, class, latent }
}

/// Draws the raw feature vector of one (query, item) pair, including missing
/// and outlier injection.
fn draw_features<R: Rng>(config: &GenConfig, query: &Query, item: &Item, rng: &mut R) -> FeatureVector {
    let rho = config.feature_fidelity;
    let resid = (1.0 - rho * rho).max(0.0).sqrt();
    let rel_z = std_normal_quantile(laplace_cdf(relevance(query, item)));
    let values = config
        .fields
        .iter()
        .map(|field| {
            let noise: f64 = rng.sample(StandardNormal);
            let signal = match field.source {
                SignalSource::Item(c) => item.latent[c],
                SignalSource::Query(c) => query.latent[c],
                SignalSource::Relevance => rel_z,
                SignalSource::Engagement => (item.latent[item_coord::QUALITY] + rel_z) / std::f64::consts::SQRT_2,
                SignalSource::Noise => rng.sample(StandardNormal),
            };
            let observed = field.realize(rho * signal + resid * noise);
            let u: f64 = rng.random();
            if u < config.missing_rate {
                None
            } else if u < config.missing_rate + config.outlier_rate {
                Some(round6(OUTLIER_FACTOR * field.nominal_max()))
            } else {
                Some(round6(observed))
            }
        })
        .collect();
    FeatureVector(values)
}

/// Draws `n` feature vectors from random (query, item) pairs of the main
/// pools, without the matching-layer selection. This is the generating
/// distribution of each field before any candidate filtering.
pub fn sample_unmatched_features(config: &GenConfig, seed: u64, n: usize) -> Vec<FeatureVector> {
    let mut rng = substream(seed, domain::ITEM, u64::MAX);
    (0..n)
        .map(|_| {
            let item = Item {
                id: 0,
                latent: normal_vec(&mut rng, item_coord::DIM),
            };
            let query = Query {
                id: 0,
                class: PopularityClass::Random,
                latent: normal_vec(&mut rng, query_coord::DIM),
            };
            draw_features(config, &query, &item, &mut rng)
        })
        .collect()
}

pub fn generate_corpus(config: &GenConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let teacher = Teacher {
        seed,
        noise: config.teacher_noise,
    };
    let main_pool = config.item_pool_size as u64;
    let longtail_pool = config.longtail_pool_size as u64;
    let draw = config.candidates_per_query * config.matching_pool_factor;

    let mut items: BTreeMap<u64, Item> = BTreeMap::new();
    let mut blocks = Vec::with_capacity(config.num_queries);
    for qid in 0..config.num_queries as u64 {
        let query = make_query(seed, qid);
        let mut rng = substream(seed, domain::QUERY, (1 << 40) | qid);
        let (base, pool, longtail) = match query.class {
            PopularityClass::Random => (0, main_pool, false),
            PopularityClass::Longtail => (main_pool, longtail_pool, true),
        };
        let drawn = index::sample(&mut rng, pool as usize, draw);
        let mut matched: Vec<(f64, Item)> = drawn
            .into_iter()
            .map(|offset| {
                let id = base + offset as u64;
                let item = items
                    .get(&id)
                    .cloned()
                    .unwrap_or_else(|| make_item(seed, id, longtail));
                let noise: f64 = rng.sample(StandardNormal);
                (relevance(&query, &item) + config.matching_noise * noise, item)
            })
            .collect();
        matched.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
        matched.truncate(config.candidates_per_query);

        let mut candidates = Vec::with_capacity(matched.len());
        let mut teacher_scores = Vec::with_capacity(matched.len());
        for (_, item) in matched {
            let features = draw_features(config, &query, &item, &mut rng);
            teacher_scores.push(teacher.score(&query, &item));
            candidates.push(Candidate {
                item_id: item.id,
                features,
            });
            items.entry(item.id).or_insert(item);
        }
        blocks.push(QueryBlock {
            query,
            candidates,
            teacher_scores,
        });
    }
    Ok(Corpus::from_parts(seed, config.clone(), teacher, items.into_values().collect(), blocks))
}

/// Queries `i` with `i mod 2h ∈ {2h−2, 2h−1}` are held out, which keeps both
/// popularity classes equally represented in each split.
pub fn is_holdout(query_id: u64, holdout_every: u64) -> bool {
    if holdout_every == 0 {
        return false;
    }
    query_id % (2 * holdout_every) >= 2 * (holdout_every - 1)
}

impl Corpus {
    fn from_parts(seed: u64, config: GenConfig, teacher: Teacher, items: Vec<Item>, blocks: Vec<QueryBlock>) -> Self {
        let item_index = items.iter().enumerate().map(|(i, it)| (it.id, i)).collect();
        Self {
            seed,
            config,
            teacher,
            items,
            item_index,
            blocks,
        }
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, id: u64) -> Option<&Item> {
        self.item_index.get(&id).map(|&i| &self.items[i])
    }

    pub fn query(&self, id: u64) -> Option<&Query> {
        self.blocks.iter().map(|b| &b.query).find(|q| q.id == id)
    }

    pub fn field_decls(&self) -> Vec<FieldDecl> {
        self.config.field_decls()
    }

    pub fn teacher_score(&self, query: &Query, item: &Item) -> f64 {
        self.teacher.score(query, item)
    }

    /// Teacher scores for a matching-layer candidate set, in input order.
    pub fn score_candidates(&self, set: &CandidateSet) -> Result<TeacherScoredSet> {
        if set.item_ids.is_empty() {
            return Err(Error::Precondition(format!("candidate set for query {} is empty", set.query_id)));
        }
        let query = self
            .query(set.query_id)
            .ok_or_else(|| Error::Corpus(format!("unknown query id {}", set.query_id)))?;
        let entries = set
            .item_ids
            .iter()
            .map(|&id| {
                let item = self
                    .item(id)
                    .ok_or_else(|| Error::Corpus(format!("unknown item id {id} in query {}", set.query_id)))?;
                Ok(ScoredItem {
                    item_id: id,
                    score: self.teacher.score(query, item),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TeacherScoredSet {
            query_id: set.query_id,
            entries,
        })
    }

    /// Returns the (train, holdout) blocks.
    pub fn split(&self, holdout_every: u64) -> (Vec<&QueryBlock>, Vec<&QueryBlock>) {
        self.blocks.iter().partition(|b| !is_holdout(b.query.id, holdout_every))
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = CorpusRecord::Header {
            format: CORPUS_FORMAT.to_string(),
            version: CORPUS_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            teacher: self.teacher,
        };
        write_record(&mut out, &header)?;
        for item in &self.items {
            write_record(
                &mut out,
                &CorpusRecord::Item {
                    id: item.id,
                    latent: item.latent.clone(),
                },
            )?;
        }
        for block in &self.blocks {
            let candidates = block
                .candidates
                .iter()
                .zip(&block.teacher_scores)
                .map(|(c, &teacher)| CandidateRecord {
                    item: c.item_id,
                    features: c.features.clone(),
                    teacher,
                })
                .collect();
            write_record(
                &mut out,
                &CorpusRecord::Query {
                    query: block.query.clone(),
                    candidates,
                },
            )?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let first = lines.next().ok_or_else(|| Error::format("corpus", "empty file"))??;
        let (seed, config, teacher) = match serde_json::from_str(&first).map_err(|e| Error::format("corpus header", e))? {
            CorpusRecord::Header {
                format,
                version,
                seed,
                config,
                teacher,
            } => {
                if format != CORPUS_FORMAT {
                    return Err(Error::format("corpus header", format!("unexpected format `{format}`")));
                }
                if version != CORPUS_VERSION {
                    return Err(Error::format("corpus header", format!("unsupported version {version}")));
                }
                (seed, config, teacher)
            }
            _ => return Err(Error::format("corpus", "first record must be the header")),
        };
        config.validate()?;
        let num_fields = config.fields.len();

        let mut items: Vec<Item> = Vec::new();
        let mut blocks: Vec<QueryBlock> = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: CorpusRecord =
                serde_json::from_str(&line).map_err(|e| Error::format("corpus record", format!("line {}: {e}", lineno + 2)))?;
            match record {
                CorpusRecord::Header { .. } => return Err(Error::format("corpus", "duplicate header")),
                CorpusRecord::Item { id, latent } => {
                    if !blocks.is_empty() {
                        return Err(Error::format("corpus", "item record after query records"));
                    }
                    if latent.len() != item_coord::DIM || latent.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Corpus(format!("item {id} has a malformed latent vector")));
                    }
                    if items.last().is_some_and(|last| last.id >= id) {
                        return Err(Error::Corpus(format!("item {id} out of order or duplicated")));
                    }
                    items.push(Item { id, latent });
                }
                CorpusRecord::Query { query, candidates } => {
                    if query.latent.len() != query_coord::DIM || query.latent.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Corpus(format!("query {} has a malformed latent vector", query.id)));
                    }
                    if blocks.iter().any(|b| b.query.id == query.id) {
                        return Err(Error::Corpus(format!("duplicate query id {}", query.id)));
                    }
                    let mut seen = HashSet::new();
                    let mut cands = Vec::with_capacity(candidates.len());
                    let mut scores = Vec::with_capacity(candidates.len());
                    for c in candidates {
                        if !seen.insert(c.item) {
                            return Err(Error::Corpus(format!("duplicate item {} in query {}", c.item, query.id)));
                        }
                        if c.features.0.len() != num_fields {
                            return Err(Error::Corpus(format!(
                                "item {} in query {} has {} features, expected {num_fields}",
                                c.item,
                                query.id,
                                c.features.0.len()
                            )));
                        }
                        if c.features.0.iter().flatten().any(|v| !v.is_finite()) || !c.teacher.is_finite() {
                            return Err(Error::Corpus(format!("non-finite value for item {} in query {}", c.item, query.id)));
                        }
                        scores.push(c.teacher);
                        cands.push(Candidate {
                            item_id: c.item,
                            features: c.features,
                        });
                    }
                    if cands.len() < 2 {
                        return Err(Error::Corpus(format!("query {} has fewer than 2 candidates", query.id)));
                    }
                    blocks.push(QueryBlock {
                        query,
                        candidates: cands,
                        teacher_scores: scores,
                    });
                }
            }
        }
        let corpus = Corpus::from_parts(seed, config, teacher, items, blocks);
        for block in &corpus.blocks {
            if let Some(c) = block.candidates.iter().find(|c| corpus.item(c.item_id).is_none()) {
                return Err(Error::Corpus(format!("query {} references unknown item {}", block.query.id, c.item_id)));
            }
        }
        Ok(corpus)
    }
}

fn write_record<W: Write>(out: &mut W, record: &CorpusRecord) -> Result<()> {
    serde_json::to_writer(&mut *out, record).map_err(|e| Error::format("corpus record", e))?;
    out.write_all(b"\n")?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", deny_unknown_fields)]
enum CorpusRecord {
    Header {
        format: String,
        version: u32,
        seed: u64,
        config: GenConfig,
        teacher: Teacher,
    },
    Item {
        id: u64,
        latent: Vec<f64>,
    },
    Query {
        query: Query,
        candidates: Vec<CandidateRecord>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateRecord {
    item: u64,
    features: FeatureVector,
    teacher: f64,
}
