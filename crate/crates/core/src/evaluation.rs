//! Workload comparison reports: one row per method against a reference workload.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{attr_correlation, feature_wd, matrix_cosine, sequence_mmd, MetricError, ValidityRates, LOG_FEATURES};
use crate::oracle::{FeatureVector, QueryOracle};
use crate::preprocess::{bucketize, debucketize_query, qualify_columns, restructure, BucketMap, PreprocessError};
use crate::schema::Schema;
use crate::semantics::BoundGrammar;
use crate::sql::Query;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference workload is empty")]
    EmptyReference,
    #[error("reference query {line}: {source}")]
    Reference { line: usize, source: PreprocessError },
    #[error("method {0:?} has no usable queries")]
    EmptyMethod(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// What the evaluator can use beyond the schema. Without an oracle only
/// structural features are compared; without a bound grammar validity is skipped.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub schema: &'a Schema,
    pub buckets: Option<&'a BucketMap>,
    pub bound: Option<&'a BoundGrammar>,
    pub oracle: Option<&'a dyn QueryOracle>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub queries: usize,
    /// Queries that parsed and mapped onto the schema.
    pub parsed: usize,
    /// Queries the oracle measured.
    pub measured: usize,
    pub sequence_mmd: f64,
    pub cardinality_wd: Option<f64>,
    pub cost_wd: Option<f64>,
    pub length_wd: f64,
    pub joins_wd: f64,
    pub correlation_similarity: f64,
    pub validity: Option<ValidityRates>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub reference: String,
    pub reference_queries: usize,
    /// Set when no feature oracle was available: cardinality and cost are absent.
    pub structural_only: bool,
    pub log1p_features: Vec<String>,
    pub schema_digest: String,
    pub grammar_digest: Option<String>,
    pub rows: Vec<MethodRow>,
}

impl EvaluationReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

struct Prepared {
    query: Query,
    canonical: String,
    features: FeatureVector,
    measured: bool,
}

fn prepare(ctx: &EvalContext, sql: &str) -> Result<Prepared, PreprocessError> {
    let q = qualify_columns(&restructure(sql)?, ctx.schema)?;
    let canonical = match ctx.buckets {
        Some(m) if !q.has_keys() => bucketize(&q, m)?.to_canonical(),
        _ => q.to_canonical(),
    };
    let mut features = FeatureVector::structural(&q);
    let mut measured = false;
    if let Some(oracle) = ctx.oracle {
        let h = Sha256::digest(canonical.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ u64::from_le_bytes(h[..8].try_into().expect("8 bytes")));
        let exec = match ctx.buckets {
            Some(m) => debucketize_query(&q, m, &mut rng).ok(),
            None if !q.has_keys() => Some(q.clone()),
            None => None,
        };
        if let Some(e) = exec.and_then(|e| oracle.measure(&e.to_executable()).ok()) {
            features.cardinality = e.cardinality;
            features.cost = e.cost;
            measured = true;
        }
    }
    Ok(Prepared { query: q, canonical, features, measured })
}

struct Side {
    queries: usize,
    ok: Vec<Prepared>,
    validity: Option<ValidityRates>,
}

impl Side {
    fn build<S: AsRef<str> + Sync>(ctx: &EvalContext, workload: &[S]) -> (Self, Vec<(usize, PreprocessError)>) {
        let results: Vec<Result<Prepared, PreprocessError>> = workload.par_iter().map(|s| prepare(ctx, s.as_ref())).collect();
        let validity = ctx.bound.map(|bg| {
            if workload.is_empty() {
                return ValidityRates { syntactic: 1.0, semantic: 1.0, vacuous: true };
            }
            let (syn, sem) = results
                .par_iter()
                .map(|r| match r {
                    Ok(p) => {
                        let v = bg.validate(&p.canonical);
                        (usize::from(v.syntactic), usize::from(v.semantic))
                    }
                    Err(_) => (0, 0),
                })
                .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            let n = workload.len() as f64;
            ValidityRates { syntactic: syn as f64 / n, semantic: sem as f64 / n, vacuous: false }
        });
        let mut ok = Vec::new();
        let mut errors = Vec::new();
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(p) => ok.push(p),
                Err(e) => errors.push((i, e)),
            }
        }
        (Side { queries: workload.len(), ok, validity }, errors)
    }

    fn texts(&self) -> Vec<&str> {
        self.ok.iter().map(|p| p.canonical.as_str()).collect()
    }

    fn features(&self) -> Vec<FeatureVector> {
        self.ok.iter().map(|p| p.features.clone()).collect()
    }

    fn measured(&self) -> Vec<FeatureVector> {
        self.ok.iter().filter(|p| p.measured).map(|p| p.features.clone()).collect()
    }

    fn queries(&self) -> Vec<Query> {
        self.ok.iter().map(|p| p.query.clone()).collect()
    }
}

/// Compares each `(name, workload)` against `reference`. Queries are raw SQL
/// or canonical text; method queries that fail to parse only lower validity.
pub fn evaluate<S, T>(ctx: &EvalContext, reference: (&str, &[S]), methods: &[(&str, &[T])]) -> Result<EvaluationReport, EvalError>
where
    S: AsRef<str> + Sync,
    T: AsRef<str> + Sync,
{
    let (ref_name, ref_queries) = reference;
    if ref_queries.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let (real, errors) = Side::build(ctx, ref_queries);
    if let Some((line, source)) = errors.into_iter().next() {
        return Err(EvalError::Reference { line: line + 1, source });
    }
    let real_texts = real.texts();
    let real_features = real.features();
    let real_measured = real.measured();
    let real_corr = attr_correlation(&real.queries(), ctx.schema);
    let structural_only = ctx.oracle.is_none();
    let mut rows = Vec::with_capacity(methods.len());
    for (name, workload) in methods {
        let (side, _) = Side::build(ctx, workload);
        if side.ok.is_empty() {
            return Err(EvalError::EmptyMethod(name.to_string()));
        }
        let features = side.features();
        let measured = side.measured();
        let measured_wd = |feature: &str| -> Option<f64> {
            if structural_only || measured.is_empty() || real_measured.is_empty() {
                None
            } else {
                feature_wd(&measured, &real_measured, feature).ok()
            }
        };
        rows.push(MethodRow {
            method: name.to_string(),
            queries: side.queries,
            parsed: side.ok.len(),
            measured: measured.len(),
            sequence_mmd: sequence_mmd(&side.texts(), &real_texts)?,
            cardinality_wd: measured_wd("cardinality"),
            cost_wd: measured_wd("cost"),
            length_wd: feature_wd(&features, &real_features, "length")?,
            joins_wd: feature_wd(&features, &real_features, "joins")?,
            correlation_similarity: matrix_cosine(&attr_correlation(&side.queries(), ctx.schema), &real_corr)?,
            validity: side.validity,
        });
    }
    Ok(EvaluationReport {
        reference: ref_name.to_string(),
        reference_queries: real.queries,
        structural_only,
        log1p_features: LOG_FEATURES.iter().map(|s| s.to_string()).collect(),
        schema_digest: ctx.schema.digest(),
        grammar_digest: ctx.bound.map(|b| b.grammar.digest().to_string()),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{extract_templates, random_generate, template_generate};
    use crate::fixtures::{synthetic_database, synthetic_workload, WorkloadShape};
    use crate::grammar::DEFAULT_SQL_GRAMMAR;
    use crate::preprocess::{debucketize, preprocess_workload};
    use crate::semantics::RuleSet;
    use std::sync::Arc;

    #[test]
    fn self_comparison_and_shape() {
        let db = synthetic_database(6, 2);
        let raw = synthetic_workload(&db, 60, WorkloadShape::Mixed, 4);
        let (canon, map) = preprocess_workload(&raw, db.schema(), 6).unwrap();
        let bound = BoundGrammar::new(DEFAULT_SQL_GRAMMAR, db.schema(), Arc::new(map.clone())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let templates = extract_templates(&canon, &map).unwrap();
        let tmpl: Vec<String> = template_generate(&templates, &map, 60, &mut rng)
            .unwrap()
            .iter()
            .map(|c| debucketize(&crate::sql::parse_sql(c).unwrap(), &map, &mut rng).unwrap())
            .collect();
        let random: Vec<String> = random_generate(&bound.semantics, RuleSet::all(), 60, &mut rng).unwrap().into_iter().map(|g| g.text).collect();
        let ctx = EvalContext { schema: db.schema(), buckets: Some(&map), bound: Some(&bound), oracle: Some(&db), seed: 9 };
        let methods: [(&str, &[String]); 3] = [("real", &raw), ("template", &tmpl), ("random", &random)];
        let report = evaluate(&ctx, ("real", &raw), &methods).unwrap();
        assert_eq!(report.rows.len(), 3);
        let same = report.row("real").unwrap();
        assert!(same.sequence_mmd.abs() < 1e-9);
        assert_eq!((same.cardinality_wd, same.cost_wd, same.length_wd, same.joins_wd), (Some(0.0), Some(0.0), 0.0, 0.0));
        assert_eq!(same.correlation_similarity, 1.0);
        assert_eq!(report.row("template").unwrap().length_wd, 0.0);
        let v = report.row("random").unwrap().validity.unwrap();
        assert_eq!((v.syntactic, v.semantic), (1.0, 1.0));
        assert!(report.row("random").unwrap().sequence_mmd > report.row("template").unwrap().sequence_mmd);
        assert!(!report.structural_only);
    }

    #[test]
    fn structural_only_without_oracle() {
        let db = synthetic_database(4, 2);
        let raw = synthetic_workload(&db, 20, WorkloadShape::Short, 4);
        let ctx = EvalContext { schema: db.schema(), buckets: None, bound: None, oracle: None, seed: 0 };
        let bad = vec!["SELECT nope FROM".to_string(), raw[0].clone()];
        let report = evaluate(&ctx, ("real", &raw), &[("x", &bad[..])]).unwrap();
        let row = &report.rows[0];
        assert!(report.structural_only);
        assert_eq!((row.cardinality_wd, row.cost_wd, row.parsed, row.measured), (None, None, 1, 0));
        assert!(row.validity.is_none());
        assert!(matches!(evaluate(&ctx, ("real", &bad), &[("x", &raw[..])]), Err(EvalError::Reference { line: 1, .. })));
    }
}
