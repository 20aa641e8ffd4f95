//! Shared fixture for the benchmarks.

use std::sync::Arc;

use qgen_core::fixtures::{synthetic_database, synthetic_workload, WorkloadShape};
use qgen_core::oracle::Database;
use qgen_core::preprocess::preprocess_workload;
use qgen_core::semantics::{BoundGrammar, RuleSet};
use qgen_core::training::{prepare_examples, Example};
use qgen_core::DEFAULT_SQL_GRAMMAR;

pub struct Setup {
    pub db: Database,
    pub raw: Vec<String>,
    pub canonical: Vec<String>,
    pub bound: BoundGrammar,
    pub examples: Vec<Example>,
}

/// The 500-query mixed workload over the 20-studio database used in the
/// desk-scale experiments.
pub fn setup(n: usize) -> Setup {
    let db = synthetic_database(20, 1);
    let raw = synthetic_workload(&db, n, WorkloadShape::Mixed, 1);
    let (canon, map) = preprocess_workload(&raw, db.schema(), 16).expect("fixture preprocesses");
    let bound = BoundGrammar::new(DEFAULT_SQL_GRAMMAR, db.schema(), Arc::new(map)).expect("grammar binds");
    let canonical: Vec<String> = canon.iter().map(|q| q.to_canonical()).collect();
    let examples = prepare_examples(&bound, RuleSet::all(), &canonical, None).expect("fixture parses");
    Setup { db, raw, canonical, bound, examples }
}
