//! Query features from a naive in-memory evaluator over CSV tables.
//!
//! Execution is a left-deep nested loop over the FROM list in textual order.
//! Single-table predicates filter each scan up front; a join predicate is
//! checked as soon as every table it mentions is bound. `IN` subqueries are
//! uncorrelated and evaluated once.
//!
//! The cost proxy counts processed rows under that plan: every scan, every
//! intermediate cross product `|R_{j-1}| * |f_j|` (where `f_j` is the filtered
//! scan of the j-th table), the grouping input when the query aggregates, and
//! the cost of the subquery.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{debucketize_query, qualify_columns, BucketMap, PreprocessError};
use crate::schema::{ColumnType, Schema, Value};
use crate::sql::{parse_sql, AggFn, ColumnRef, CompareOp, Comparison, Operand, Predicate, Query, SelectItem, SqlError, SubQuery};

/// Enumeration budget for one query; protects against runaway cross products.
pub const MAX_ENUMERATED_TUPLES: u64 = 50_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("missing data file {0}")]
    MissingFile(String),
    #[error("table `{table}`: {message}")]
    Csv { table: String, message: String },
    #[error("table `{table}`: header {found:?} does not match schema columns {expected:?}")]
    HeaderMismatch { table: String, expected: Vec<String>, found: Vec<String> },
    #[error("table `{table}` row {row}: cannot parse `{text}` as {ty} for column `{column}`")]
    Parse { table: String, row: usize, column: String, text: String, ty: &'static str },
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("query still contains bucket key `{0}`")]
    UnboundKey(String),
    #[error("semantic error: {0}")]
    Semantic(String),
    #[error("query enumerates more than {0} tuples")]
    TooLarge(u64),
    #[error("external database: {0}")]
    External(String),
}

/// In-memory, column-typed tables. Immutable after load.
#[derive(Debug, Clone)]
pub struct Database {
    schema: Schema,
    rows: Vec<Vec<Vec<Value>>>,
}

impl Database {
    /// Builds a database from rows given in schema column order.
    pub fn new(schema: Schema, rows: Vec<Vec<Vec<Value>>>) -> Result<Self, OracleError> {
        if rows.len() != schema.tables().len() {
            return Err(OracleError::Semantic("one row set per schema table is required".into()));
        }
        for (t, rs) in schema.tables().iter().zip(&rows) {
            if let Some(i) = rs.iter().position(|r| r.len() != t.columns.len()) {
                return Err(OracleError::Csv { table: t.name.clone(), message: format!("row {} has wrong arity", i + 1) });
            }
        }
        Ok(Database { schema, rows })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self, table: &str) -> Option<&[Vec<Value>]> {
        self.schema.table_index(table).map(|i| self.rows[i].as_slice())
    }

    pub fn row_count(&self, table: &str) -> Option<usize> {
        self.rows(table).map(<[_]>::len)
    }

    pub fn total_rows(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Writes one `<table>.csv` per table with a header row.
    pub fn write_csv(&self, dir: &Path) -> Result<(), OracleError> {
        for (t, rs) in self.schema.tables().iter().zip(&self.rows) {
            let path = dir.join(format!("{}.csv", t.name));
            let csv_err = |e: csv::Error| OracleError::Csv { table: t.name.clone(), message: e.to_string() };
            let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
            w.write_record(t.columns.iter().map(|c| c.name.as_str())).map_err(csv_err)?;
            for r in rs {
                w.write_record(r.iter().map(cell_text)).map_err(csv_err)?;
            }
            w.flush().map_err(|e| OracleError::Csv { table: t.name.clone(), message: e.to_string() })?;
        }
        Ok(())
    }
}

fn cell_text(v: &Value) -> String {
    match v {
        Value::Int(i) => i.to_string(),
        Value::Float(f) => format!("{f:?}"),
        Value::Str(s) => s.clone(),
    }
}

/// Loads `<data_dir>/<table>.csv` for every schema table. Header names must
/// match the schema columns; their order may differ.
pub fn load_database(schema: &Schema, data_dir: &Path) -> Result<Database, OracleError> {
    let mut all = Vec::new();
    for t in schema.tables() {
        let path = data_dir.join(format!("{}.csv", t.name));
        if !path.is_file() {
            return Err(OracleError::MissingFile(path.display().to_string()));
        }
        let csv_err = |e: csv::Error| OracleError::Csv { table: t.name.clone(), message: e.to_string() };
        let mut rdr = csv::Reader::from_path(&path).map_err(csv_err)?;
        let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();
        let expected: Vec<String> = t.columns.iter().map(|c| c.name.clone()).collect();
        let order: Option<Vec<usize>> = expected.iter().map(|c| header.iter().position(|h| h == c)).collect();
        let order = match order {
            Some(o) if header.len() == expected.len() => o,
            _ => return Err(OracleError::HeaderMismatch { table: t.name.clone(), expected, found: header }),
        };
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let row = t
                .columns
                .iter()
                .zip(&order)
                .map(|(c, &j)| {
                    let text = rec.get(j).unwrap_or("");
                    Value::parse_as(text, c.ty).ok_or_else(|| OracleError::Parse {
                        table: t.name.clone(),
                        row: i + 1,
                        column: c.name.clone(),
                        text: text.to_string(),
                        ty: c.ty.name(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        log::debug!("loaded {} rows into `{}`", rows.len(), t.name);
        all.push(rows);
    }
    Database::new(schema.clone(), all)
}

/// Result of running one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Execution {
    pub cardinality: u64,
    pub cost: f64,
}

/// Column position inside a tuple: FROM slot and column index.
type Slot = (usize, usize);

enum Rhs {
    Const(Value),
    Col(Slot),
    In(InSet),
}

struct BoundPred {
    left: Slot,
    op: CompareOp,
    rhs: Rhs,
}

/// Values returned by an `IN` subquery, indexed for membership tests.
#[derive(Default)]
struct InSet {
    nums: Vec<f64>,
    strs: BTreeSet<String>,
}

impl InSet {
    fn contains(&self, v: &Value) -> bool {
        match v {
            Value::Str(s) => self.strs.contains(s),
            _ => {
                let x = v.as_f64().unwrap();
                self.nums.binary_search_by(|p| p.total_cmp(&x)).is_ok()
            }
        }
    }
}

impl BoundPred {
    fn slots(&self) -> Vec<usize> {
        match self.rhs {
            Rhs::Col((s, _)) => vec![self.left.0, s],
            _ => vec![self.left.0],
        }
    }

    fn holds(&self, db: &Database, tables: &[usize], tuple: &[usize]) -> bool {
        let get = |(s, c): Slot| &db.rows[tables[s]][tuple[s]][c];
        let l = get(self.left);
        match &self.rhs {
            Rhs::Const(v) => l.compare(v).is_some_and(|o| self.op.holds(o)),
            Rhs::Col(r) => l.compare(get(*r)).is_some_and(|o| self.op.holds(o)),
            Rhs::In(set) => set.contains(l),
        }
    }
}

struct Plan<'a> {
    db: &'a Database,
    tables: Vec<usize>,
    /// Filtered row ids per slot.
    scans: Vec<Vec<usize>>,
    /// Join predicates keyed by the slot at which they become checkable.
    joins: Vec<Vec<BoundPred>>,
    cost: f64,
}

fn slot_of(from: &[String], schema: &Schema, c: &ColumnRef) -> Result<Slot, OracleError> {
    let table = c.table.as_deref().ok_or_else(|| OracleError::Semantic(format!("unqualified column {c}")))?;
    let s = from.iter().position(|t| t == table).ok_or_else(|| OracleError::Semantic(format!("{c} not in scope")))?;
    let ci = schema.table(table).and_then(|t| t.column_index(&c.column)).ok_or_else(|| OracleError::Semantic(format!("unknown column {c}")))?;
    Ok((s, ci))
}

fn literal(o: &Operand) -> Result<Value, OracleError> {
    match o {
        Operand::Value(v) => Ok(v.clone()),
        Operand::Key(k) => Err(OracleError::UnboundKey(k.clone())),
        Operand::Column(c) => Err(OracleError::Semantic(format!("column {c} where a constant is required"))),
    }
}

impl<'a> Plan<'a> {
    fn new(db: &'a Database, from: &[String], preds: Vec<(Slot, CompareOp, RhsSpec)>) -> Result<Self, OracleError> {
        let tables = from
            .iter()
            .map(|t| db.schema.table_index(t).ok_or_else(|| OracleError::Semantic(format!("unknown table {t}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let mut local: Vec<Vec<BoundPred>> = (0..tables.len()).map(|_| Vec::new()).collect();
        let mut joins: Vec<Vec<BoundPred>> = (0..tables.len()).map(|_| Vec::new()).collect();
        let mut cost = 0.0;
        for (left, op, rhs) in preds {
            let rhs = match rhs {
                RhsSpec::Const(v) => Rhs::Const(v),
                RhsSpec::Col(s) => Rhs::Col(s),
                RhsSpec::In(set, sub_cost) => {
                    cost += sub_cost;
                    Rhs::In(set)
                }
            };
            let p = BoundPred { left, op, rhs };
            let slots = p.slots();
            let last = *slots.iter().max().unwrap();
            if slots.iter().all(|&s| s == last) {
                local[last].push(p);
            } else {
                joins[last].push(p);
            }
        }
        let mut scans = Vec::with_capacity(tables.len());
        for (s, &t) in tables.iter().enumerate() {
            let n = db.rows[t].len();
            cost += n as f64;
            let mut tuple = vec![0; tables.len()];
            let keep: Vec<usize> = (0..n)
                .filter(|&r| {
                    tuple[s] = r;
                    local[s].iter().all(|p| p.holds(db, &tables, &tuple))
                })
                .collect();
            scans.push(keep);
        }
        Ok(Plan { db, tables, scans, joins, cost })
    }

    /// Nested-loop enumeration; `emit` sees every result tuple. Adds
    /// intermediate cross-product sizes to the cost.
    fn run(&mut self, mut emit: impl FnMut(&[usize])) -> Result<(), OracleError> {
        let k = self.tables.len();
        let mut tuple = vec![0; k];
        let mut level_counts = vec![0u64; k];
        let mut enumerated = 0u64;
        #[allow(clippy::too_many_arguments)]
        fn go(
            plan: &Plan,
            depth: usize,
            tuple: &mut [usize],
            counts: &mut [u64],
            enumerated: &mut u64,
            emit: &mut dyn FnMut(&[usize]),
        ) -> Result<(), OracleError> {
            for &r in &plan.scans[depth] {
                *enumerated += 1;
                if *enumerated > MAX_ENUMERATED_TUPLES {
                    return Err(OracleError::TooLarge(MAX_ENUMERATED_TUPLES));
                }
                tuple[depth] = r;
                if !plan.joins[depth].iter().all(|p| p.holds(plan.db, &plan.tables, tuple)) {
                    continue;
                }
                counts[depth] += 1;
                if depth + 1 == tuple.len() {
                    emit(tuple);
                } else {
                    go(plan, depth + 1, tuple, counts, enumerated, emit)?;
                }
            }
            Ok(())
        }
        if k > 0 {
            go(self, 0, &mut tuple, &mut level_counts, &mut enumerated, &mut emit)?;
        }
        for j in 1..k {
            self.cost += level_counts[j - 1] as f64 * self.scans[j].len() as f64;
        }
        Ok(())
    }
}

enum RhsSpec {
    Const(Value),
    Col(Slot),
    In(InSet, f64),
}

fn bind_comparisons(db: &Database, from: &[String], cs: &[&Comparison]) -> Result<Vec<(Slot, CompareOp, RhsSpec)>, OracleError> {
    cs.iter()
        .map(|c| {
            let left = slot_of(from, &db.schema, &c.left)?;
            let rhs = match &c.right {
                Operand::Column(r) => RhsSpec::Col(slot_of(from, &db.schema, r)?),
                o => RhsSpec::Const(literal(o)?),
            };
            Ok((left, c.op, rhs))
        })
        .collect()
}

fn run_subquery(db: &Database, sq: &SubQuery) -> Result<(InSet, f64), OracleError> {
    let preds = bind_comparisons(db, &sq.from, &sq.predicates.iter().collect::<Vec<_>>())?;
    let col = slot_of(&sq.from, &db.schema, &sq.column)?;
    let mut plan = Plan::new(db, &sq.from, preds)?;
    let mut set = InSet::default();
    let tables = plan.tables.clone();
    plan.run(|t| match &db.rows[tables[col.0]][t[col.0]][col.1] {
        Value::Str(s) => {
            set.strs.insert(s.clone());
        }
        v => set.nums.push(v.as_f64().unwrap()),
    })?;
    set.nums.sort_by(f64::total_cmp);
    set.nums.dedup();
    Ok((set, plan.cost))
}

#[derive(Debug, Clone, Default)]
struct AggState {
    count: u64,
    sum: f64,
    int_sum: i64,
    min: Option<Value>,
    max: Option<Value>,
}

impl AggState {
    fn push(&mut self, v: &Value) {
        self.count += 1;
        if let Some(x) = v.as_f64() {
            self.sum += x;
        }
        if let Value::Int(i) = v {
            self.int_sum = self.int_sum.wrapping_add(*i);
        }
        if self.min.as_ref().is_none_or(|m| v.compare(m) == Some(std::cmp::Ordering::Less)) {
            self.min = Some(v.clone());
        }
        if self.max.as_ref().is_none_or(|m| v.compare(m) == Some(std::cmp::Ordering::Greater)) {
            self.max = Some(v.clone());
        }
    }

    fn result(&self, f: AggFn, ty: ColumnType) -> Option<Value> {
        match f {
            AggFn::Count => Some(Value::Int(self.count as i64)),
            _ if self.count == 0 => None,
            AggFn::Sum if ty == ColumnType::Int => Some(Value::Int(self.int_sum)),
            AggFn::Sum => Some(Value::Float(self.sum)),
            AggFn::Avg => Some(Value::Float(self.sum / self.count as f64)),
            AggFn::Min => self.min.clone(),
            AggFn::Max => self.max.clone(),
        }
    }
}

/// Id of each row's value in column `c`; equal values share an id.
fn value_ids(rows: &[Vec<Value>], c: usize) -> Vec<u32> {
    let mut seen: HashMap<String, u32> = HashMap::new();
    rows.iter()
        .map(|r| {
            let n = seen.len() as u32;
            *seen.entry(r[c].sql()).or_insert(n)
        })
        .collect()
}

/// Runs a qualified executable query.
pub fn execute(db: &Database, q: &Query) -> Result<Execution, OracleError> {
    let q = qualify_columns(q, &db.schema)?;
    let mut cs: Vec<&Comparison> = Vec::new();
    let mut ins = Vec::new();
    for p in &q.predicates {
        match p {
            Predicate::Compare(c) => cs.push(c),
            Predicate::In { column, subquery } => ins.push((column, subquery)),
        }
    }
    let mut preds = bind_comparisons(db, &q.from, &cs)?;
    for (column, sq) in ins {
        let (set, cost) = run_subquery(db, sq)?;
        preds.push((slot_of(&q.from, &db.schema, column)?, CompareOp::Eq, RhsSpec::In(set, cost)));
    }
    let mut plan = Plan::new(db, &q.from, preds)?;

    let grouped = !q.group_by.is_empty() || q.has_aggregate_projection() || !q.having.is_empty();
    if !grouped {
        let mut n = 0u64;
        plan.run(|_| n += 1)?;
        return Ok(Execution { cardinality: n, cost: plan.cost });
    }

    let mut group_slots = q.group_by.iter().map(|c| slot_of(&q.from, &db.schema, c)).collect::<Result<Vec<_>, _>>()?;
    group_slots.sort_unstable();
    group_slots.dedup();
    // Distinct aggregate inputs needed by HAVING.
    let mut agg_cols: Vec<Slot> = Vec::new();
    let mut having = Vec::new();
    for h in &q.having {
        let (item_slot, agg) = match &h.left {
            SelectItem::Column(c) => (slot_of(&q.from, &db.schema, c)?, None),
            SelectItem::Aggregate(f, c) => (slot_of(&q.from, &db.schema, c)?, Some(*f)),
        };
        let pos = agg_cols.iter().position(|s| *s == item_slot).unwrap_or_else(|| {
            agg_cols.push(item_slot);
            agg_cols.len() - 1
        });
        let ty = db.schema.tables()[plan.tables[item_slot.0]].columns[item_slot.1].ty;
        having.push((pos, agg, ty, h.op, literal(&h.right)?));
    }
    let tables = plan.tables.clone();
    // Groups are keyed by dense per-column value ids rather than the values.
    let dicts: Vec<Vec<u32>> = group_slots.iter().map(|&(s, c)| value_ids(&db.rows[tables[s]], c)).collect();
    let mut groups: HashMap<Vec<u32>, Vec<AggState>> = HashMap::new();
    let mut input = 0u64;
    plan.run(|t| {
        input += 1;
        let key: Vec<u32> = group_slots.iter().zip(&dicts).map(|(&(s, _), ids)| ids[t[s]]).collect();
        let states = groups.entry(key).or_insert_with(|| vec![AggState::default(); agg_cols.len()]);
        for (st, &(s, c)) in states.iter_mut().zip(&agg_cols) {
            st.push(&db.rows[tables[s]][t[s]][c]);
        }
    })?;
    plan.cost += input as f64;
    if group_slots.is_empty() && groups.is_empty() {
        // Aggregates without GROUP BY still produce one row over empty input.
        groups.insert(Vec::new(), vec![AggState::default(); agg_cols.len()]);
    }
    let passes = |states: &Vec<AggState>| {
        having.iter().all(|(pos, agg, ty, op, v)| {
            let st = &states[*pos];
            // A plain HAVING column is a grouping column, constant within the group.
            let lhs = match agg {
                Some(f) => st.result(*f, *ty),
                None => st.min.clone(),
            };
            lhs.and_then(|l| l.compare(v)).is_some_and(|o| op.holds(o))
        })
    };
    let cardinality = groups.values().filter(|s| passes(s)).count() as u64;
    Ok(Execution { cardinality, cost: plan.cost })
}

pub fn execute_sql(db: &Database, sql: &str) -> Result<Execution, OracleError> {
    execute(db, &parse_sql(sql)?)
}

pub fn execute_cardinality(db: &Database, sql: &str) -> Result<u64, OracleError> {
    Ok(execute_sql(db, sql)?.cardinality)
}

pub fn estimate_cost(db: &Database, sql: &str) -> Result<f64, OracleError> {
    Ok(execute_sql(db, sql)?.cost)
}

/// Per-query measurements used for conditioning and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub cardinality: u64,
    pub cost: f64,
    pub length: usize,
    pub join_count: usize,
    pub aggregate_counts: BTreeMap<String, usize>,
    pub operator_counts: BTreeMap<String, usize>,
    pub nested: bool,
}

/// Names accepted by [`FeatureVector::get`].
pub const FEATURE_NAMES: [&str; 4] = ["cardinality", "cost", "length", "joins"];

impl FeatureVector {
    /// Structural fields only; cardinality and cost are left at zero.
    pub fn structural(q: &Query) -> Self {
        let mut aggregate_counts = BTreeMap::new();
        for a in q.aggregates() {
            *aggregate_counts.entry(a.keyword().to_string()).or_insert(0) += 1;
        }
        let mut operator_counts = BTreeMap::new();
        for o in q.operators() {
            *operator_counts.entry(o.symbol().to_string()).or_insert(0) += 1;
        }
        let sub = q.subquery();
        FeatureVector {
            cardinality: 0,
            cost: 0.0,
            length: q.canonical_tokens().len(),
            // An IN subquery counts as one semi-join plus its own joins.
            join_count: q.from.len().saturating_sub(1) + sub.map_or(0, |s| s.from.len()),
            aggregate_counts,
            operator_counts,
            nested: sub.is_some(),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "cardinality" => Some(self.cardinality as f64),
            "cost" => Some(self.cost),
            "length" => Some(self.length as f64),
            "joins" => Some(self.join_count as f64),
            _ => None,
        }
    }

    /// Dense scalars fed to the discriminator.
    pub fn scalars(&self) -> Vec<f64> {
        vec![
            self.cardinality as f64,
            self.cost,
            self.length as f64,
            self.join_count as f64,
            self.aggregate_counts.values().sum::<usize>() as f64,
            self.operator_counts.values().sum::<usize>() as f64,
            f64::from(u8::from(self.nested)),
        ]
    }
}

/// Number of entries in [`FeatureVector::scalars`].
pub const NUM_SCALAR_FEATURES: usize = 7;

/// Debucketizes a canonical query with `rng`, executes it and fills every field.
pub fn featurize<R: Rng + ?Sized>(db: &Database, q: &Query, m: &BucketMap, rng: &mut R) -> Result<FeatureVector, OracleError> {
    let exec = debucketize_query(q, m, rng)?;
    let e = execute(db, &exec)?;
    let mut f = FeatureVector::structural(q);
    f.cardinality = e.cardinality;
    f.cost = e.cost;
    Ok(f)
}

/// Anything that can measure executable SQL.
pub trait QueryOracle: Send + Sync {
    fn measure(&self, sql: &str) -> Result<Execution, OracleError>;
}

impl QueryOracle for Database {
    fn measure(&self, sql: &str) -> Result<Execution, OracleError> {
        execute_sql(self, sql)
    }
}

/// Hook for a real DBMS. No driver ships with the crate; wrap one in
/// [`ExternalOracle`] to use it wherever a [`QueryOracle`] is expected.
pub trait ExternalDbAdapter: Send {
    fn connect(&mut self) -> Result<(), OracleError>;
    fn count_rows(&mut self, sql: &str) -> Result<u64, OracleError>;
    fn estimated_cost(&mut self, sql: &str) -> Result<f64, OracleError>;
}

pub struct ExternalOracle<A: ExternalDbAdapter>(std::sync::Mutex<A>);

impl<A: ExternalDbAdapter> ExternalOracle<A> {
    pub fn connect(mut adapter: A) -> Result<Self, OracleError> {
        adapter.connect()?;
        Ok(ExternalOracle(std::sync::Mutex::new(adapter)))
    }
}

impl<A: ExternalDbAdapter> QueryOracle for ExternalOracle<A> {
    fn measure(&self, sql: &str) -> Result<Execution, OracleError> {
        let mut a = self.0.lock().map_err(|_| OracleError::External("adapter lock poisoned".into()))?;
        Ok(Execution { cardinality: a.count_rows(sql)?, cost: a.estimated_cost(sql)? })
    }
}

/// Like [`featurize`] but through any oracle.
pub fn featurize_with<R: Rng + ?Sized>(
    oracle: &dyn QueryOracle,
    q: &Query,
    m: &BucketMap,
    rng: &mut R,
) -> Result<FeatureVector, OracleError> {
    let exec = debucketize_query(q, m, rng)?;
    let e = oracle.measure(&exec.to_executable())?;
    let mut f = FeatureVector::structural(q);
    f.cardinality = e.cardinality;
    f.cost = e.cost;
    Ok(f)
}
