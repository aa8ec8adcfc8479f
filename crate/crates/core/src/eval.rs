//! Recall@N against the teacher, pairwise ordering accuracy, and cost
//! measurement for any scorer.
//!
//! Rankings sort by descending score with ties broken by ascending item id,
//! for both the model and the teacher. Recall@N is computed per query as
//! `|top-keep_k(model) ∩ top-N(teacher)| / N` and macro-averaged over the
//! queries of a slice.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baseline::LinearModel;
use crate::datagen::PopularityClass;
use crate::features::{FeaturizedCorpus, FeaturizedQuery};
use crate::model::{DeepFmModel, ModelArtifact};
use crate::pairs::{make_pairs, OrderedPair, PairConfig};
use crate::{Error, Result};

/// Anything that scores discretized items.
pub trait Scorer {
    fn schema_hash(&self) -> &str;

    fn check_rows(&self, buckets: &[u16]) -> Result<()>;

    /// Scores a validated row-major bucket block into `out`.
    fn score_rows(&self, buckets: &[u16], out: &mut Vec<f64>);

    /// Analytic multiplies per scored item.
    fn multiply_count(&self) -> u64;

    /// Scores every candidate of `query`, in candidate order.
    fn score_query(&self, query: &FeaturizedQuery, out: &mut Vec<f64>) {
        self.score_rows(&query.buckets, out);
    }
}

impl Scorer for DeepFmModel {
    fn schema_hash(&self) -> &str {
        DeepFmModel::schema_hash(self)
    }

    fn check_rows(&self, buckets: &[u16]) -> Result<()> {
        DeepFmModel::check_rows(self, buckets)
    }

    fn score_rows(&self, buckets: &[u16], out: &mut Vec<f64>) {
        DeepFmModel::score_rows(self, buckets, out)
    }

    fn multiply_count(&self) -> u64 {
        DeepFmModel::multiply_count(self)
    }
}

impl Scorer for LinearModel {
    fn schema_hash(&self) -> &str {
        LinearModel::schema_hash(self)
    }

    fn check_rows(&self, buckets: &[u16]) -> Result<()> {
        LinearModel::check_rows(self, buckets)
    }

    fn score_rows(&self, buckets: &[u16], out: &mut Vec<f64>) {
        LinearModel::score_rows(self, buckets, out)
    }

    /// Table lookups and additions only.
    fn multiply_count(&self) -> u64 {
        0
    }
}

impl Scorer for ModelArtifact {
    fn schema_hash(&self) -> &str {
        ModelArtifact::schema_hash(self)
    }

    fn check_rows(&self, buckets: &[u16]) -> Result<()> {
        match self {
            ModelArtifact::DeepFm(m) => m.check_rows(buckets),
            ModelArtifact::Linear(m) => m.check_rows(buckets),
        }
    }

    fn score_rows(&self, buckets: &[u16], out: &mut Vec<f64>) {
        match self {
            ModelArtifact::DeepFm(m) => m.score_rows(buckets, out),
            ModelArtifact::Linear(m) => m.score_rows(buckets, out),
        }
    }

    fn multiply_count(&self) -> u64 {
        match self {
            ModelArtifact::DeepFm(m) => Scorer::multiply_count(m),
            ModelArtifact::Linear(m) => Scorer::multiply_count(m),
        }
    }
}

/// Returns the teacher's own scores: the ceiling every metric is measured
/// against.
#[derive(Clone, Debug)]
pub struct TeacherScorer {
    pub schema_hash: String,
}

impl Scorer for TeacherScorer {
    fn schema_hash(&self) -> &str {
        &self.schema_hash
    }

    fn check_rows(&self, _: &[u16]) -> Result<()> {
        Ok(())
    }

    fn score_rows(&self, buckets: &[u16], out: &mut Vec<f64>) {
        out.clear();
        out.resize(buckets.len(), 0.0);
    }

    fn multiply_count(&self) -> u64 {
        0
    }

    fn score_query(&self, query: &FeaturizedQuery, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&query.teacher);
    }
}

/// Item ids ordered by descending score, ties by ascending id.
pub fn rank_ids(ids: &[u64], scores: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    order.into_iter().map(|i| ids[i]).collect()
}

/// `|top-keep_k(model) ∩ top-n(teacher)| / n`.
pub fn recall_at_n(model_ranking: &[u64], teacher_ranking: &[u64], keep_k: usize, n: usize) -> Result<f64> {
    let len = model_ranking.len();
    if teacher_ranking.len() != len {
        return Err(Error::Eval(format!(
            "rankings differ in length ({len} vs {})",
            teacher_ranking.len()
        )));
    }
    if n == 0 || n > len {
        return Err(Error::Eval(format!("n = {n} outside 1..={len}")));
    }
    if keep_k > len {
        return Err(Error::Eval(format!("keep_k = {keep_k} exceeds set size {len}")));
    }
    let mut a = model_ranking.to_vec();
    let mut b = teacher_ranking.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    if a.windows(2).any(|w| w[0] == w[1]) || b.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Eval("ranking contains a duplicate id".into()));
    }
    if a != b {
        return Err(Error::Eval("rankings are over different id sets".into()));
    }
    let kept: HashSet<u64> = model_ranking[..keep_k].iter().copied().collect();
    let hits = teacher_ranking[..n].iter().filter(|id| kept.contains(id)).count();
    Ok(hits as f64 / n as f64)
}

fn check_scorer(scorer: &dyn Scorer, corpus: &FeaturizedCorpus) -> Result<()> {
    if scorer.schema_hash() != corpus.schema_hash {
        return Err(Error::ModelMismatch(
            "model and featurized corpus were built with different schemas".into(),
        ));
    }
    for q in &corpus.queries {
        scorer.check_rows(&q.buckets)?;
    }
    Ok(())
}

/// Fraction of pairs with `S_p > S_n`. Ties count as failures.
pub fn pairwise_accuracy(scorer: &dyn Scorer, corpus: &FeaturizedCorpus, pairs: &[OrderedPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Eval("no pairs to evaluate".into()));
    }
    check_scorer(scorer, corpus)?;
    let mut wanted: BTreeMap<u64, Vec<&OrderedPair>> = BTreeMap::new();
    for p in pairs {
        wanted.entry(p.query_id).or_default().push(p);
    }
    let mut correct = 0usize;
    let mut scores = Vec::new();
    for (qid, list) in wanted {
        let q = corpus
            .query(qid)
            .ok_or_else(|| Error::Eval(format!("pair refers to query {qid} missing from the corpus")))?;
        scorer.score_query(q, &mut scores);
        let row: HashMap<u64, usize> = q.item_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        for p in list {
            let (Some(&a), Some(&b)) = (row.get(&p.pos_item_id), row.get(&p.neg_item_id)) else {
                return Err(Error::Eval(format!("pair item missing from query {qid}")));
            };
            if scores[a] > scores[b] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slice {
    Random,
    Longtail,
    All,
}

impl Slice {
    pub const ALL: [Slice; 3] = [Slice::Random, Slice::Longtail, Slice::All];

    pub fn name(self) -> &'static str {
        match self {
            Slice::Random => "random",
            Slice::Longtail => "longtail",
            Slice::All => "all",
        }
    }

    pub fn contains(self, class: PopularityClass) -> bool {
        match self {
            Slice::Random => class == PopularityClass::Random,
            Slice::Longtail => class == PopularityClass::Longtail,
            Slice::All => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub keep_k: usize,
    pub recall_at: Vec<usize>,
    /// Held-out pairs for the accuracy column.
    pub pairs: PairConfig,
    pub bench_items: usize,
    pub bench_repetitions: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            keep_k: 100,
            recall_at: vec![10, 50, 100],
            pairs: PairConfig {
                seed: 101,
                pairs_per_anchor: 1,
                ..PairConfig::default()
            },
            bench_items: 2000,
            bench_repetitions: 5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.keep_k == 0 {
            return Err(Error::config("eval.keep_k", "must be at least 1"));
        }
        if self.recall_at.is_empty() || self.recall_at.contains(&0) {
            return Err(Error::config("eval.recall_at", "needs at least one positive N"));
        }
        if self.bench_repetitions < 3 {
            return Err(Error::config("eval.bench_repetitions", "at least 3 repetitions are required"));
        }
        if self.bench_items == 0 {
            return Err(Error::config("eval.bench_items", "must be at least 1"));
        }
        self.pairs.validate().map_err(|e| match e {
            Error::Config { path, reason } => Error::Config {
                path: path.replacen("pairs.", "eval.pairs.", 1),
                reason,
            },
            other => other,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub slice: Slice,
    pub queries: usize,
    pub keep_k: usize,
    pub recall_at: BTreeMap<usize, f64>,
    pub pairwise_accuracy: f64,
    pub multiply_count: u64,
    pub mean_latency_us: Option<f64>,
}

/// Per-query Recall@N for every configured N, in `config.recall_at` order.
pub fn query_recalls(scorer: &dyn Scorer, query: &FeaturizedQuery, config: &EvalConfig, scores: &mut Vec<f64>) -> Result<Vec<f64>> {
    scorer.score_query(query, scores);
    let model = rank_ids(&query.item_ids, scores);
    let teacher = rank_ids(&query.item_ids, &query.teacher);
    let keep = config.keep_k.min(query.len());
    config
        .recall_at
        .iter()
        .map(|&n| recall_at_n(&model, &teacher, keep, n))
        .collect()
}

/// Builds the held-out pair set used for the accuracy column.
pub fn eval_pairs(corpus: &FeaturizedCorpus, config: &PairConfig) -> Result<Vec<OrderedPair>> {
    let mut out = Vec::new();
    for q in &corpus.queries {
        out.extend(make_pairs(&q.scored_set(), config)?);
    }
    Ok(out)
}

/// One report per slice. An empty slice is an error naming the slice.
pub fn evaluate(scorer: &dyn Scorer, corpus: &FeaturizedCorpus, config: &EvalConfig) -> Result<Vec<EvalReport>> {
    config.validate()?;
    check_scorer(scorer, corpus)?;
    let mut scores = Vec::new();
    let mut per_query = Vec::with_capacity(corpus.queries.len());
    for q in &corpus.queries {
        per_query.push(query_recalls(scorer, q, config, &mut scores)?);
    }
    let all_pairs = eval_pairs(corpus, &config.pairs)?;
    Slice::ALL
        .iter()
        .map(|&slice| {
            let members: Vec<usize> = (0..corpus.queries.len())
                .filter(|&i| slice.contains(corpus.queries[i].class))
                .collect();
            if members.is_empty() {
                return Err(Error::Eval(format!("slice `{}` has no queries", slice.name())));
            }
            let mut recall_at = BTreeMap::new();
            for (j, &n) in config.recall_at.iter().enumerate() {
                let sum: f64 = members.iter().map(|&i| per_query[i][j]).sum();
                recall_at.insert(n, sum / members.len() as f64);
            }
            let ids: HashSet<u64> = members.iter().map(|&i| corpus.queries[i].query_id).collect();
            let pairs: Vec<OrderedPair> = all_pairs.iter().filter(|p| ids.contains(&p.query_id)).copied().collect();
            let pairwise_accuracy = if pairs.is_empty() {
                0.0
            } else {
                pairwise_accuracy(scorer, corpus, &pairs)?
            };
            Ok(EvalReport {
                slice,
                queries: members.len(),
                keep_k: config.keep_k,
                recall_at,
                pairwise_accuracy,
                multiply_count: scorer.multiply_count(),
                mean_latency_us: None,
            })
        })
        .collect()
}

/// Flat table, one row per slice × N.
pub fn report_table(reports: &[EvalReport]) -> String {
    let mut out = String::from("slice\tn\tkeep_k\trecall\tpairwise_accuracy\tmultiply_count\n");
    for r in reports {
        for (n, recall) in &r.recall_at {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{}",
                r.slice.name(),
                n,
                r.keep_k,
                recall,
                r.pairwise_accuracy,
                r.multiply_count
            );
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub items: usize,
    pub repetitions: usize,
    /// Median over repetitions of the per-item mean wall time.
    pub mean_latency_us: f64,
    pub per_repetition_us: Vec<f64>,
    pub latency_stddev_us: f64,
    pub multiply_count: u64,
}

/// Times single-threaded scoring of `buckets` after one warm-up pass.
pub fn benchmark(scorer: &dyn Scorer, buckets: &[u16], num_fields: usize, repetitions: usize) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(Error::Eval("benchmark needs at least 3 repetitions".into()));
    }
    if num_fields == 0 || buckets.is_empty() || !buckets.len().is_multiple_of(num_fields) {
        return Err(Error::Eval("benchmark needs a non-empty whole block of items".into()));
    }
    scorer.check_rows(buckets)?;
    let items = buckets.len() / num_fields;
    let mut out = Vec::with_capacity(items);
    scorer.score_rows(buckets, &mut out);
    black_box(&out);
    let mut per_rep: Vec<f64> = (0..repetitions)
        .map(|_| {
            let start = Instant::now();
            scorer.score_rows(black_box(buckets), &mut out);
            black_box(&out);
            start.elapsed().as_secs_f64() * 1e6 / items as f64
        })
        .collect();
    let mean = per_rep.iter().sum::<f64>() / repetitions as f64;
    let var = per_rep.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (repetitions - 1) as f64;
    let reported = per_rep.clone();
    per_rep.sort_by(f64::total_cmp);
    let median = if repetitions % 2 == 1 {
        per_rep[repetitions / 2]
    } else {
        0.5 * (per_rep[repetitions / 2 - 1] + per_rep[repetitions / 2])
    };
    Ok(BenchReport {
        items,
        repetitions,
        mean_latency_us: median,
        per_repetition_us: reported,
        latency_stddev_us: var.sqrt(),
        multiply_count: scorer.multiply_count(),
    })
}

/// Up to `n` items taken round-robin across queries, as one bucket block.
pub fn bench_block(corpus: &FeaturizedCorpus, n: usize) -> Vec<u16> {
    let mut out = Vec::with_capacity(n * corpus.num_fields);
    let longest = corpus.queries.iter().map(FeaturizedQuery::len).max().unwrap_or(0);
    'outer: for i in 0..longest {
        for q in &corpus.queries {
            if out.len() >= n * corpus.num_fields {
                break 'outer;
            }
            if i < q.len() {
                out.extend_from_slice(q.item(i));
            }
        }
    }
    out
}
