//! Partially ordered training pairs built over the full matching-layer
//! candidate set of each query.
//!
//! Three schemes are available. The level schemes split a query's candidates
//! into four score bands and draw up to `pairs_per_anchor` counterparts per
//! band; `BetweenLevels` skips the anchor's own band, `AllLevels` includes it.
//! `Random` ignores bands and draws counterparts whose teacher score differs
//! from the anchor's by more than `epsilon`. Ties are never paired.

use std::io::{BufRead, Write};

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::TeacherScoredSet;
use crate::rng::{domain, substream};
use crate::{Error, Result};

pub const PAIRS_FORMAT: &str = "rankdfm-pairs";
pub const PAIRS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairScheme {
    BetweenLevels,
    AllLevels,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairConfig {
    pub scheme: PairScheme,
    pub pairs_per_anchor: usize,
    pub epsilon: f64,
    /// Score cut points between levels 4|3, 3|2 and 2|1. `None` uses the
    /// quartiles of each query's scores.
    pub level_boundaries: Option<[f64; 3]>,
    pub seed: u64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            scheme: PairScheme::Random,
            pairs_per_anchor: 4,
            epsilon: 0.05,
            level_boundaries: None,
            seed: 17,
        }
    }
}

impl PairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs_per_anchor == 0 {
            return Err(Error::config("pairs.pairs_per_anchor", "must be at least 1"));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("pairs.epsilon", "must be finite and non-negative"));
        }
        if let Some(b) = self.level_boundaries {
            if b.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
                return Err(Error::config("pairs.level_boundaries", "boundaries must lie in (0, 1)"));
            }
            if !(b[0] < b[1] && b[1] < b[2]) {
                return Err(Error::config("pairs.level_boundaries", "boundaries must be strictly increasing"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderedPair {
    pub query_id: u64,
    #[serde(rename = "pos")]
    pub pos_item_id: u64,
    #[serde(rename = "neg")]
    pub neg_item_id: u64,
    pub r_p: f64,
    pub r_n: f64,
}

/// Score quartiles of a set, used as default level boundaries.
pub fn quartile_boundaries(set: &TeacherScoredSet) -> [f64; 3] {
    let mut scores: Vec<f64> = set.entries.iter().map(|e| e.score).collect();
    scores.sort_by(f64::total_cmp);
    let n = scores.len();
    if n == 0 {
        return [0.25, 0.5, 0.75];
    }
    [scores[n / 4], scores[n / 2], scores[(3 * n) / 4]]
}

/// Level per entry, aligned with `set.entries`: 1 is the top band
/// `[b3, ∞)`, 4 the bottom band `(−∞, b1)`.
pub fn assign_levels(set: &TeacherScoredSet, boundaries: [f64; 3]) -> Vec<u8> {
    set.entries
        .iter()
        .map(|e| {
            if e.score >= boundaries[2] {
                1
            } else if e.score >= boundaries[1] {
                2
            } else if e.score >= boundaries[0] {
                3
            } else {
                4
            }
        })
        .collect()
}

fn query_rng(config: &PairConfig, query_id: u64) -> ChaCha8Rng {
    substream(config.seed, domain::PAIRS, query_id)
}

fn orient(set: &TeacherScoredSet, a: usize, b: usize) -> Option<OrderedPair> {
    let (ea, eb) = (&set.entries[a], &set.entries[b]);
    let (pos, neg) = if ea.score > eb.score {
        (ea, eb)
    } else if eb.score > ea.score {
        (eb, ea)
    } else {
        return None;
    };
    Some(OrderedPair {
        query_id: set.query_id,
        pos_item_id: pos.item_id,
        neg_item_id: neg.item_id,
        r_p: pos.score,
        r_n: neg.score,
    })
}

fn require_scheme(config: &PairConfig, scheme: PairScheme) -> Result<()> {
    config.validate()?;
    if config.scheme != scheme {
        return Err(Error::Precondition(format!(
            "pair config selects {:?}, called {:?}",
            config.scheme, scheme
        )));
    }
    Ok(())
}

fn level_pairs(set: &TeacherScoredSet, config: &PairConfig, same_level: bool) -> Vec<OrderedPair> {
    let boundaries = config.level_boundaries.unwrap_or_else(|| quartile_boundaries(set));
    let levels = assign_levels(set, boundaries);
    let mut members: [Vec<usize>; 4] = Default::default();
    for (i, &l) in levels.iter().enumerate() {
        members[(l - 1) as usize].push(i);
    }
    let mut rng = query_rng(config, set.query_id);
    let mut pairs = Vec::new();
    let mut pool = Vec::new();
    for (anchor, (&own, entry)) in levels.iter().zip(&set.entries).enumerate() {
        let score = entry.score;
        for (l, group) in members.iter().enumerate() {
            if !same_level && l as u8 + 1 == own {
                continue;
            }
            pool.clear();
            pool.extend(group.iter().copied().filter(|&j| j != anchor && set.entries[j].score != score));
            let take = config.pairs_per_anchor.min(pool.len());
            for k in index::sample(&mut rng, pool.len(), take) {
                pairs.extend(orient(set, anchor, pool[k]));
            }
        }
    }
    pairs
}

/// Counterparts come only from the three levels other than the anchor's.
pub fn make_pairs_between_levels(set: &TeacherScoredSet, config: &PairConfig) -> Result<Vec<OrderedPair>> {
    require_scheme(config, PairScheme::BetweenLevels)?;
    Ok(level_pairs(set, config, false))
}

/// Counterparts come from all four levels, including hard same-level items.
pub fn make_pairs_all_levels(set: &TeacherScoredSet, config: &PairConfig) -> Result<Vec<OrderedPair>> {
    require_scheme(config, PairScheme::AllLevels)?;
    Ok(level_pairs(set, config, true))
}

/// Counterparts drawn uniformly from items whose score differs from the
/// anchor's by more than `epsilon`.
pub fn make_pairs_random(set: &TeacherScoredSet, config: &PairConfig) -> Result<Vec<OrderedPair>> {
    require_scheme(config, PairScheme::Random)?;
    let eps = config.epsilon;
    let n = set.entries.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.entries[a].score.total_cmp(&set.entries[b].score).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| set.entries[i].score).collect();

    let mut rng = query_rng(config, set.query_id);
    let mut pairs = Vec::with_capacity(n * config.pairs_per_anchor);
    for anchor in 0..n {
        let r = set.entries[anchor].score;
        // Prefix strictly more than eps below r, suffix strictly more than eps above.
        let below = sorted.partition_point(|&s| r - s > eps);
        let above_start = sorted.partition_point(|&s| !(s - r > eps)).max(below);
        let eligible = below + (n - above_start);
        let take = config.pairs_per_anchor.min(eligible);
        for k in index::sample(&mut rng, eligible, take) {
            let j = if k < below { order[k] } else { order[above_start + k - below] };
            pairs.extend(orient(set, anchor, j));
        }
    }
    Ok(pairs)
}

pub fn make_pairs(set: &TeacherScoredSet, config: &PairConfig) -> Result<Vec<OrderedPair>> {
    match config.scheme {
        PairScheme::BetweenLevels => make_pairs_between_levels(set, config),
        PairScheme::AllLevels => make_pairs_all_levels(set, config),
        PairScheme::Random => make_pairs_random(set, config),
    }
}

/// Pairs for many query sets, concatenated in input order.
pub fn make_pairs_for_sets<'a>(
    sets: impl IntoIterator<Item = &'a TeacherScoredSet>,
    config: &PairConfig,
) -> Result<Vec<OrderedPair>> {
    let mut all = Vec::new();
    for set in sets {
        all.extend(make_pairs(set, config)?);
    }
    Ok(all)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsHeader {
    pub format: String,
    pub version: u32,
    pub config: PairConfig,
    /// Content hash of the corpus the pairs were drawn from.
    pub corpus_hash: String,
}

pub fn write_pairs_jsonl<W: Write>(mut out: W, config: &PairConfig, corpus_hash: &str, pairs: &[OrderedPair]) -> Result<()> {
    let header = PairsHeader {
        format: PAIRS_FORMAT.into(),
        version: PAIRS_VERSION,
        config: config.clone(),
        corpus_hash: corpus_hash.into(),
    };
    serde_json::to_writer(&mut out, &header).map_err(|e| Error::format("pairs header", e))?;
    out.write_all(b"\n")?;
    for p in pairs {
        serde_json::to_writer(&mut out, p).map_err(|e| Error::format("pair", e))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_pairs_jsonl<R: BufRead>(input: R) -> Result<(PairsHeader, Vec<OrderedPair>)> {
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| Error::format("pairs", "empty file"))??;
    let header: PairsHeader = serde_json::from_str(&first).map_err(|e| Error::format("pairs header", e))?;
    if header.format != PAIRS_FORMAT || header.version != PAIRS_VERSION {
        return Err(Error::format("pairs header", "unexpected format or version"));
    }
    let mut pairs = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: OrderedPair = serde_json::from_str(&line).map_err(|e| Error::format("pair", format!("line {}: {e}", i + 2)))?;
        if !(p.r_p > p.r_n) || p.pos_item_id == p.neg_item_id || !p.r_p.is_finite() || !p.r_n.is_finite() {
            return Err(Error::format("pair", format!("line {}: pair is not strictly ordered", i + 2)));
        }
        pairs.push(p);
    }
    Ok((header, pairs))
}
