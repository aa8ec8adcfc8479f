//! Per-distribution normalization and equal-width discretization.
//!
//! Each field is first mapped to `[0, 1]` (min-max for uniform fields,
//! log-scaled for long-tail fields) and then cut into `B = ceil(1/w)` buckets
//! of width `w`. Two extra rows per field hold outliers (index `B`) and
//! missing values (index `B + 1`), so every field addresses exactly `B + 2`
//! embedding rows.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::datagen::{Corpus, PopularityClass, QueryBlock};
use crate::hashing::sha256_hex;
use crate::{Error, Result};

pub const SCHEMA_FORMAT: &str = "rankdfm-schema";
pub const SCHEMA_VERSION: u32 = 1;
pub const FEATURIZED_FORMAT: &str = "rankdfm-featurized";
pub const FEATURIZED_VERSION: u32 = 1;

pub const DEFAULT_BUCKET_WIDTH: f64 = 0.02;
pub const DEFAULT_OUTLIER_MARGIN: f64 = 0.5;
/// Fraction trimmed from each tail before fitting min/max.
pub const TRIM_FRACTION: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionKind {
    Uniform,
    Longtail,
}

/// Which of the item / query / item×query groups a field belongs to. Kept as
/// metadata only; all groups share one flat field order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldGroup {
    Item,
    Query,
    Cross,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDecl {
    pub name: String,
    pub group: FieldGroup,
    pub kind: DistributionKind,
}

/// Raw values aligned with the schema's field order; `None` is MISSING.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub Vec<Option<f64>>);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Normalized {
    Value(f64),
    Outlier,
    Missing,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscretizedItem {
    pub buckets: Vec<u16>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub group: FieldGroup,
    pub kind: DistributionKind,
    pub observed_min: f64,
    pub observed_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub format: String,
    pub version: u32,
    pub bucket_width: f64,
    pub outlier_margin: f64,
    pub fields: Vec<FieldSpec>,
}

/// `ceil(1/w)`, tolerant of `1/w` landing a rounding error above an integer.
pub fn bucket_count(w: f64) -> usize {
    let r = 1.0 / w;
    let nearest = r.round();
    if (r - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest as usize
    } else {
        r.ceil() as usize
    }
}

fn check_width(w: f64) -> Result<()> {
    if !(w > 0.0 && w < 1.0) {
        return Err(Error::config("features.bucket_width", format!("{w} outside (0, 1)")));
    }
    if bucket_count(w) + 2 > u16::MAX as usize {
        return Err(Error::config("features.bucket_width", "too many buckets"));
    }
    Ok(())
}

/// Fits per-field min/max on trimmed non-missing values.
pub fn fit_schema(sample: &[FeatureVector], decls: &[FieldDecl], bucket_width: f64) -> Result<FeatureSchema> {
    check_width(bucket_width)?;
    if sample.is_empty() {
        return Err(Error::Precondition("schema fit needs a non-empty sample".into()));
    }
    if let Some((i, v)) = sample.iter().enumerate().find(|(_, v)| v.0.len() != decls.len()) {
        return Err(Error::Pipeline(format!(
            "sample vector {i} has {} values, expected {}",
            v.0.len(),
            decls.len()
        )));
    }
    let mut fields = Vec::with_capacity(decls.len());
    let mut column = Vec::with_capacity(sample.len());
    for (f, decl) in decls.iter().enumerate() {
        column.clear();
        column.extend(sample.iter().filter_map(|v| v.0[f]).filter(|x| x.is_finite()));
        if column.len() < 2 {
            return Err(Error::SchemaFit {
                field: decl.name.clone(),
                reason: format!("only {} usable values", column.len()),
            });
        }
        column.sort_by(f64::total_cmp);
        let last = (column.len() - 1) as f64;
        let lo = column[(TRIM_FRACTION * last).floor() as usize];
        let hi = column[((1.0 - TRIM_FRACTION) * last).ceil() as usize];
        if !(hi > lo) {
            return Err(Error::SchemaFit {
                field: decl.name.clone(),
                reason: format!("degenerate range [{lo}, {hi}]"),
            });
        }
        fields.push(FieldSpec {
            name: decl.name.clone(),
            group: decl.group,
            kind: decl.kind,
            observed_min: lo,
            observed_max: hi,
        });
    }
    Ok(FeatureSchema {
        format: SCHEMA_FORMAT.to_string(),
        version: SCHEMA_VERSION,
        bucket_width,
        outlier_margin: DEFAULT_OUTLIER_MARGIN,
        fields,
    })
}

/// Maps a raw value into `[0, 1]`, flagging values more than `outlier_margin`
/// beyond the top of the fitted range. NaN is treated as missing.
pub fn normalize(value: Option<f64>, field: &FieldSpec, outlier_margin: f64) -> Normalized {
    let x = match value {
        Some(x) if !x.is_nan() => x,
        _ => return Normalized::Missing,
    };
    let (lo, hi) = (field.observed_min, field.observed_max);
    let t = match field.kind {
        DistributionKind::Uniform => (x - lo) / (hi - lo),
        DistributionKind::Longtail => (x.max(lo) - lo).ln_1p() / (hi - lo).ln_1p(),
    };
    if t > 1.0 + outlier_margin {
        Normalized::Outlier
    } else {
        Normalized::Value(t.clamp(0.0, 1.0))
    }
}

impl FeatureSchema {
    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    /// Normal buckets per field.
    pub fn bucket_count(&self) -> usize {
        bucket_count(self.bucket_width)
    }

    pub fn outlier_bucket(&self) -> u16 {
        self.bucket_count() as u16
    }

    pub fn missing_bucket(&self) -> u16 {
        self.bucket_count() as u16 + 1
    }

    /// Embedding rows addressed per field.
    pub fn rows_per_field(&self) -> usize {
        self.bucket_count() + 2
    }

    pub fn normalize(&self, field: usize, value: Option<f64>) -> Normalized {
        normalize(value, &self.fields[field], self.outlier_margin)
    }

    pub fn bucket_of(&self, normalized: Normalized) -> u16 {
        match normalized {
            Normalized::Value(v) => {
                let b = self.bucket_count();
                ((v / self.bucket_width).floor() as usize).min(b - 1) as u16
            }
            Normalized::Outlier => self.outlier_bucket(),
            Normalized::Missing => self.missing_bucket(),
        }
    }

    /// Writes bucket indices for `values` into `out`.
    pub fn discretize_into(&self, values: &[Option<f64>], out: &mut [u16]) -> Result<()> {
        if values.len() != self.fields.len() || out.len() != self.fields.len() {
            return Err(Error::Pipeline(format!(
                "feature vector has {} values, schema has {} fields",
                values.len(),
                self.fields.len()
            )));
        }
        for (f, (v, slot)) in values.iter().zip(out.iter_mut()).enumerate() {
            *slot = self.bucket_of(self.normalize(f, *v));
        }
        Ok(())
    }

    pub fn discretize(&self, vector: &FeatureVector) -> Result<DiscretizedItem> {
        let mut buckets = vec![0u16; self.fields.len()];
        self.discretize_into(&vector.0, &mut buckets)?;
        Ok(DiscretizedItem { buckets })
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != SCHEMA_FORMAT {
            return Err(Error::format("schema", format!("unexpected format `{}`", self.format)));
        }
        if self.version != SCHEMA_VERSION {
            return Err(Error::format("schema", format!("unsupported version {}", self.version)));
        }
        check_width(self.bucket_width)?;
        if !(self.outlier_margin >= 0.0 && self.outlier_margin.is_finite()) {
            return Err(Error::config("features.outlier_margin", "must be finite and non-negative"));
        }
        if self.fields.is_empty() {
            return Err(Error::format("schema", "no fields"));
        }
        for f in &self.fields {
            let ok = f.observed_min.is_finite() && f.observed_max.is_finite() && f.observed_min < f.observed_max;
            if !ok {
                return Err(Error::format("schema", format!("field `{}` has an invalid range", f.name)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Self = serde_json::from_str(text).map_err(|e| Error::format("schema", e))?;
        schema.validate()?;
        Ok(schema)
    }

    /// Content hash identifying this schema in downstream artifacts.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("schema serializes").as_bytes())
    }

    pub fn decls(&self) -> Vec<FieldDecl> {
        self.fields
            .iter()
            .map(|f| FieldDecl {
                name: f.name.clone(),
                group: f.group,
                kind: f.kind,
            })
            .collect()
    }
}

/// Discretized candidates of one query, row-major `len × num_fields`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturizedQuery {
    pub query_id: u64,
    pub class: PopularityClass,
    pub item_ids: Vec<u64>,
    pub buckets: Vec<u16>,
    pub teacher: Vec<f64>,
}

impl FeaturizedQuery {
    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn num_fields(&self) -> usize {
        if self.item_ids.is_empty() {
            0
        } else {
            self.buckets.len() / self.item_ids.len()
        }
    }

    pub fn item(&self, i: usize) -> &[u16] {
        let f = self.num_fields();
        &self.buckets[i * f..(i + 1) * f]
    }

    pub fn scored_set(&self) -> crate::datagen::TeacherScoredSet {
        crate::datagen::TeacherScoredSet {
            query_id: self.query_id,
            entries: self
                .item_ids
                .iter()
                .zip(&self.teacher)
                .map(|(&item_id, &score)| crate::datagen::ScoredItem { item_id, score })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturizedCorpus {
    pub schema_hash: String,
    pub num_fields: usize,
    pub rows_per_field: usize,
    pub queries: Vec<FeaturizedQuery>,
}

impl FeaturizedCorpus {
    pub fn query(&self, id: u64) -> Option<&FeaturizedQuery> {
        self.queries.iter().find(|q| q.query_id == id)
    }

    pub fn num_items(&self) -> usize {
        self.queries.iter().map(FeaturizedQuery::len).sum()
    }

    /// A corpus view restricted to the queries accepted by `keep`.
    pub fn filter(&self, keep: impl Fn(&FeaturizedQuery) -> bool) -> Self {
        Self {
            schema_hash: self.schema_hash.clone(),
            num_fields: self.num_fields,
            rows_per_field: self.rows_per_field,
            queries: self.queries.iter().filter(|q| keep(q)).cloned().collect(),
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = serde_json::json!({
            "format": FEATURIZED_FORMAT,
            "version": FEATURIZED_VERSION,
            "schema_hash": self.schema_hash,
            "num_fields": self.num_fields,
            "rows_per_field": self.rows_per_field,
        });
        serde_json::to_writer(&mut out, &header).map_err(|e| Error::format("featurized corpus", e))?;
        out.write_all(b"\n")?;
        for q in &self.queries {
            serde_json::to_writer(&mut out, q).map_err(|e| Error::format("featurized corpus", e))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Header {
            format: String,
            version: u32,
            schema_hash: String,
            num_fields: usize,
            rows_per_field: usize,
        }
        let mut lines = input.lines();
        let first = lines.next().ok_or_else(|| Error::format("featurized corpus", "empty file"))??;
        let header: Header = serde_json::from_str(&first).map_err(|e| Error::format("featurized corpus header", e))?;
        if header.format != FEATURIZED_FORMAT || header.version != FEATURIZED_VERSION {
            return Err(Error::format("featurized corpus header", "unexpected format or version"));
        }
        if header.num_fields == 0 || header.rows_per_field < 3 || header.rows_per_field > u16::MAX as usize {
            return Err(Error::format("featurized corpus header", "invalid dimensions"));
        }
        let mut queries = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let q: FeaturizedQuery = serde_json::from_str(&line).map_err(|e| Error::format("featurized query", e))?;
            let n = q.item_ids.len();
            if n == 0 || q.teacher.len() != n || q.buckets.len() != n * header.num_fields {
                return Err(Error::format("featurized query", format!("query {} has inconsistent lengths", q.query_id)));
            }
            if q.buckets.iter().any(|&b| b as usize >= header.rows_per_field) {
                return Err(Error::format("featurized query", format!("query {} has an out-of-range bucket", q.query_id)));
            }
            if q.teacher.iter().any(|t| !t.is_finite()) {
                return Err(Error::format("featurized query", format!("query {} has a non-finite score", q.query_id)));
            }
            queries.push(q);
        }
        Ok(Self {
            schema_hash: header.schema_hash,
            num_fields: header.num_fields,
            rows_per_field: header.rows_per_field,
            queries,
        })
    }
}

/// Field declarations of `schema` and `corpus` must agree in name and order.
pub fn check_compatible(schema: &FeatureSchema, corpus: &Corpus) -> Result<()> {
    let decls = corpus.field_decls();
    if decls != schema.decls() {
        return Err(Error::ModelMismatch("schema fields differ from the corpus field declarations".into()));
    }
    Ok(())
}

pub fn featurize_block(schema: &FeatureSchema, block: &QueryBlock) -> Result<FeaturizedQuery> {
    let f = schema.num_fields();
    let mut buckets = vec![0u16; block.candidates.len() * f];
    for (c, out) in block.candidates.iter().zip(buckets.chunks_mut(f)) {
        schema.discretize_into(&c.features.0, out)?;
    }
    Ok(FeaturizedQuery {
        query_id: block.query.id,
        class: block.query.class,
        item_ids: block.candidates.iter().map(|c| c.item_id).collect(),
        buckets,
        teacher: block.teacher_scores.clone(),
    })
}

pub fn featurize(schema: &FeatureSchema, corpus: &Corpus) -> Result<FeaturizedCorpus> {
    check_compatible(schema, corpus)?;
    let queries = corpus
        .blocks
        .iter()
        .map(|b| featurize_block(schema, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeaturizedCorpus {
        schema_hash: schema.hash(),
        num_fields: schema.num_fields(),
        rows_per_field: schema.rows_per_field(),
        queries,
    })
}

/// Fits a schema on the candidates of the given blocks.
pub fn fit_on_blocks(blocks: &[&QueryBlock], decls: &[FieldDecl], bucket_width: f64) -> Result<FeatureSchema> {
    let sample: Vec<FeatureVector> = blocks
        .iter()
        .flat_map(|b| b.candidates.iter().map(|c| c.features.clone()))
        .collect();
    fit_schema(&sample, decls, bucket_width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn decl(name: &str, kind: DistributionKind) -> FieldDecl {
        FieldDecl {
            name: name.into(),
            group: FieldGroup::Item,
            kind,
        }
    }

    fn spec(kind: DistributionKind, lo: f64, hi: f64) -> FieldSpec {
        FieldSpec {
            name: "f".into(),
            group: FieldGroup::Item,
            kind,
            observed_min: lo,
            observed_max: hi,
        }
    }

    fn unit_schema(w: f64) -> FeatureSchema {
        FeatureSchema {
            format: SCHEMA_FORMAT.into(),
            version: SCHEMA_VERSION,
            bucket_width: w,
            outlier_margin: DEFAULT_OUTLIER_MARGIN,
            fields: vec![spec(DistributionKind::Uniform, 0.0, 1.0)],
        }
    }

    #[test]
    fn bucket_count_is_exact_for_common_widths() {
        assert_eq!(bucket_count(0.02), 50);
        assert_eq!(bucket_count(0.01), 100);
        assert_eq!(bucket_count(0.05), 20);
        assert_eq!(bucket_count(0.3), 4);
    }

    #[test]
    fn fit_uniform_grid() {
        let sample: Vec<_> = (0..=100).map(|i| FeatureVector(vec![Some(i as f64 / 100.0)])).collect();
        let schema = fit_schema(&sample, &[decl("u", DistributionKind::Uniform)], 0.02).unwrap();
        let f = &schema.fields[0];
        assert!(f.observed_min.abs() < 0.01 && (f.observed_max - 1.0).abs() < 0.01);
    }

    #[test]
    fn fit_rejects_all_missing_field_by_name() {
        let sample: Vec<_> = (0..10).map(|i| FeatureVector(vec![Some(i as f64), None])).collect();
        let decls = [decl("ok", DistributionKind::Uniform), decl("empty", DistributionKind::Longtail)];
        match fit_schema(&sample, &decls, 0.02) {
            Err(Error::SchemaFit { field, .. }) => assert_eq!(field, "empty"),
            other => panic!("expected schema-fit error, got {other:?}"),
        }
    }

    #[test]
    fn trimming_resists_a_single_outlier() {
        let mut values: Vec<f64> = (0..10_000).map(|i| (i as f64 + 0.5) / 10_000.0).collect();
        let clean = fit_schema(
            &values.iter().map(|&v| FeatureVector(vec![Some(v)])).collect::<Vec<_>>(),
            &[decl("u", DistributionKind::Uniform)],
            0.02,
        )
        .unwrap();
        values.push(10.0);
        let dirty = fit_schema(
            &values.iter().map(|&v| FeatureVector(vec![Some(v)])).collect::<Vec<_>>(),
            &[decl("u", DistributionKind::Uniform)],
            0.02,
        )
        .unwrap();
        let (a, b) = (clean.fields[0].observed_max, dirty.fields[0].observed_max);
        assert!((b - a).abs() / a <= 0.01, "{a} vs {b}");
    }

    #[test]
    fn refit_is_byte_identical() {
        let sample: Vec<_> = (0..500)
            .map(|i| FeatureVector(vec![Some((i * 37 % 101) as f64), Some((i as f64).exp2().ln())]))
            .collect();
        let decls = [decl("a", DistributionKind::Uniform), decl("b", DistributionKind::Longtail)];
        let s1 = fit_schema(&sample, &decls, 0.02).unwrap();
        let s2 = fit_schema(&sample, &decls, 0.02).unwrap();
        assert_eq!(s1.to_json(), s2.to_json());
        assert_eq!(s1.hash(), s2.hash());
    }

    #[test]
    fn normalize_boundaries() {
        let u = spec(DistributionKind::Uniform, 2.0, 6.0);
        assert_eq!(normalize(Some(2.0), &u, 0.5), Normalized::Value(0.0));
        assert_eq!(normalize(Some(6.0), &u, 0.5), Normalized::Value(1.0));
        assert_eq!(normalize(None, &u, 0.5), Normalized::Missing);
        assert_eq!(normalize(Some(7.0), &u, 0.5), Normalized::Value(1.0));
        assert_eq!(normalize(Some(8.1), &u, 0.5), Normalized::Outlier);
        assert_eq!(normalize(Some(-100.0), &u, 0.5), Normalized::Value(0.0));

        let e = std::f64::consts::E;
        let l = spec(DistributionKind::Longtail, 0.0, e - 1.0);
        assert_eq!(normalize(Some(0.0), &l, 0.5), Normalized::Value(0.0));
        assert_eq!(normalize(Some(e - 1.0), &l, 0.5), Normalized::Value(1.0));
        assert_eq!(normalize(Some(-3.0), &l, 0.5), Normalized::Value(0.0));
    }

    #[test]
    fn discretize_examples() {
        let s = unit_schema(0.02);
        let bucket = |v: Option<f64>| s.discretize(&FeatureVector(vec![v])).unwrap().buckets[0];
        assert_eq!(bucket(Some(0.031)), 1);
        assert_eq!(bucket(Some(1.0)), 49);
        assert_eq!(bucket(None), 51);
        assert_eq!(bucket(Some(10.0)), 50);
        assert_eq!(bucket(Some(f64::INFINITY)), 50);
        assert_eq!(bucket(Some(f64::NAN)), 51);
        assert!(matches!(s.discretize(&FeatureVector(vec![None, None])), Err(Error::Pipeline(_))));
    }

    #[test]
    fn schema_json_round_trip_and_validation() {
        let s = unit_schema(0.02);
        assert_eq!(FeatureSchema::from_json(&s.to_json()).unwrap(), s);
        let mut bad = s.clone();
        bad.fields[0].observed_max = -1.0;
        assert!(FeatureSchema::from_json(&bad.to_json()).is_err());
        let mut bad = s;
        bad.version = 2;
        assert!(FeatureSchema::from_json(&bad.to_json()).is_err());
    }

    fn any_value() -> impl Strategy<Value = Option<f64>> {
        prop_oneof![
            Just(None),
            any::<f64>().prop_map(Some),
            (-1e3f64..1e3).prop_map(Some),
        ]
    }

    proptest! {
        #[test]
        fn discretize_is_total(w in 0.005f64..0.5, v in any_value(), longtail in any::<bool>()) {
            let kind = if longtail { DistributionKind::Longtail } else { DistributionKind::Uniform };
            let schema = FeatureSchema { fields: vec![spec(kind, -2.0, 40.0)], ..unit_schema(w) };
            let b = schema.discretize(&FeatureVector(vec![v])).unwrap().buckets[0];
            prop_assert!((b as usize) < schema.rows_per_field());
            if let Normalized::Value(t) = schema.normalize(0, v) {
                prop_assert!((0.0..=1.0).contains(&t));
                prop_assert!((b as usize) < schema.bucket_count());
            }
        }

        #[test]
        fn buckets_are_monotone(w in 0.005f64..0.5, x in -5.0f64..50.0, dy in 0.0f64..20.0, longtail in any::<bool>()) {
            let kind = if longtail { DistributionKind::Longtail } else { DistributionKind::Uniform };
            let schema = FeatureSchema { fields: vec![spec(kind, -2.0, 40.0)], ..unit_schema(w) };
            let y = x + dy;
            let (nx, ny) = (schema.normalize(0, Some(x)), schema.normalize(0, Some(y)));
            if let (Normalized::Value(_), Normalized::Value(_)) = (nx, ny) {
                prop_assert!(schema.bucket_of(nx) <= schema.bucket_of(ny));
            }
        }
    }
}
