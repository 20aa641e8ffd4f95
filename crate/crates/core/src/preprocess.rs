//! Clause restructuring, column qualification, and constant bucketization.
//!
//! Constants are replaced by keys naming a histogram bucket of their value
//! domain. A domain is either a column or an aggregate over a column (for
//! `HAVING COUNT(t.c) > 3`). Numeric domains use equi-depth buckets over the
//! distinct observed constants; string domains get one bucket per frequent
//! value and pool the rest.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::IndexedRandom;
use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lexer::{lex, quote, unquote, LexemeKind};
use crate::schema::{ColumnType, QualifiedColumn, Schema, Value};
use crate::sql::{parse_sql, AggFn, ColumnRef, Operand, Predicate, Query, SelectItem, SqlError};

pub const DEFAULT_BUCKET_COUNT: usize = 16;
const FORMAT_VERSION: u32 = 1;

/// `K` followed by eight lowercase hex digits.
pub fn is_bucket_key(s: &str) -> bool {
    s.len() == 9
        && s.starts_with('K')
        && s[1..].chars().all(|c| c.is_ascii_digit() || ('a'..='f').contains(&c))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("column `{0}` is ambiguous; qualify it with a table name")]
    AmbiguousColumn(String),
    #[error("column `{0}` refers to a table outside the FROM list")]
    NotInScope(String),
    #[error("constant {value} does not match the {ty} type of `{domain}`")]
    TypeMismatch { domain: String, ty: &'static str, value: String },
    #[error("unknown bucket key `{0}`")]
    UnknownKey(String),
    #[error("bucket map line {line}: {message}")]
    Format { line: usize, message: String },
}

/// Parses supported SQL and returns it in canonical clause order.
pub fn restructure(raw_sql: &str) -> Result<Query, PreprocessError> {
    Ok(parse_sql(raw_sql)?)
}

/// Canonical text back to executable clause order.
pub fn revert(canonical: &str) -> Result<String, PreprocessError> {
    Ok(parse_sql(canonical)?.to_executable())
}

/// A value domain that constants are drawn from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Column(QualifiedColumn),
    Aggregate(AggFn, QualifiedColumn),
}

impl Domain {
    pub fn column(&self) -> &QualifiedColumn {
        match self {
            Domain::Column(c) | Domain::Aggregate(_, c) => c,
        }
    }

    /// Type of the domain's values given the underlying column type.
    pub fn value_type(&self, column_type: ColumnType) -> ColumnType {
        match self {
            Domain::Column(_) => column_type,
            Domain::Aggregate(AggFn::Count, _) => ColumnType::Int,
            Domain::Aggregate(AggFn::Avg, _) => ColumnType::Float,
            Domain::Aggregate(_, _) => column_type,
        }
    }

    pub fn parse(s: &str) -> Option<Domain> {
        if let Some((agg, rest)) = s.split_once('(') {
            let agg = AggFn::from_keyword(agg)?;
            let col = QualifiedColumn::parse(rest.strip_suffix(')')?)?;
            Some(Domain::Aggregate(agg, col))
        } else {
            QualifiedColumn::parse(s).map(Domain::Column)
        }
    }

    pub fn of_item(item: &SelectItem) -> Option<Domain> {
        match item {
            SelectItem::Column(c) => c.to_qualified().map(Domain::Column),
            SelectItem::Aggregate(a, c) => c.to_qualified().map(|q| Domain::Aggregate(*a, q)),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Column(c) => write!(f, "{c}"),
            Domain::Aggregate(a, c) => write!(f, "{}({c})", a.keyword()),
        }
    }
}

fn resolve(
    c: &ColumnRef,
    scope: &[String],
    schema: &Schema,
) -> Result<ColumnRef, PreprocessError> {
    match &c.table {
        Some(t) => {
            if !scope.contains(t) {
                return Err(PreprocessError::NotInScope(c.to_string()));
            }
            schema
                .table(t)
                .and_then(|td| td.column(&c.column))
                .ok_or_else(|| PreprocessError::UnknownColumn(c.to_string()))?;
            Ok(c.clone())
        }
        None => {
            let owners: Vec<&String> = scope
                .iter()
                .filter(|t| schema.table(t).is_some_and(|td| td.column(&c.column).is_some()))
                .collect();
            match owners.as_slice() {
                [t] => Ok(ColumnRef::qualified(t.as_str(), &c.column)),
                [] => Err(PreprocessError::UnknownColumn(c.column.clone())),
                _ => Err(PreprocessError::AmbiguousColumn(c.column.clone())),
            }
        }
    }
}

fn check_tables(from: &[String], schema: &Schema) -> Result<(), PreprocessError> {
    match from.iter().find(|t| schema.table(t).is_none()) {
        Some(t) => Err(PreprocessError::UnknownTable(t.clone())),
        None => Ok(()),
    }
}

/// Coerces a literal to the domain type: integers widen to floats, nothing else converts.
fn coerce(v: &Value, ty: ColumnType, domain: &Domain) -> Result<Value, PreprocessError> {
    match (v, ty) {
        (Value::Int(_), ColumnType::Int) | (Value::Float(_), ColumnType::Float) | (Value::Str(_), ColumnType::String) => {
            Ok(v.clone())
        }
        (Value::Int(i), ColumnType::Float) => Ok(Value::Float(*i as f64)),
        _ => Err(PreprocessError::TypeMismatch { domain: domain.to_string(), ty: ty.name(), value: v.sql() }),
    }
}

fn domain_type(d: &Domain, schema: &Schema) -> Result<ColumnType, PreprocessError> {
    let ct = schema.column_type(d.column()).ok_or_else(|| PreprocessError::UnknownColumn(d.column().to_string()))?;
    Ok(d.value_type(ct))
}

/// Qualifies every column against its FROM scope and types literal constants.
pub fn qualify_columns(q: &Query, schema: &Schema) -> Result<Query, PreprocessError> {
    check_tables(&q.from, schema)?;
    let mut out = q.clone();
    let scope = q.from.clone();
    let fix_item = |item: &mut SelectItem| -> Result<(), PreprocessError> {
        match item {
            SelectItem::Column(c) | SelectItem::Aggregate(_, c) => *c = resolve(c, &scope, schema)?,
        }
        Ok(())
    };
    if let crate::sql::Projection::Items(items) = &mut out.projection {
        for item in items {
            fix_item(item)?;
        }
    }
    for p in &mut out.predicates {
        match p {
            Predicate::Compare(c) => {
                c.left = resolve(&c.left, &scope, schema)?;
                match &mut c.right {
                    Operand::Column(r) => *r = resolve(r, &scope, schema)?,
                    Operand::Value(v) => {
                        let d = Domain::Column(c.left.to_qualified().unwrap());
                        *v = coerce(v, domain_type(&d, schema)?, &d)?;
                    }
                    Operand::Key(_) => {}
                }
            }
            Predicate::In { column, subquery } => {
                *column = resolve(column, &scope, schema)?;
                check_tables(&subquery.from, schema)?;
                let sub_scope = subquery.from.clone();
                subquery.column = resolve(&subquery.column, &sub_scope, schema)?;
                for c in &mut subquery.predicates {
                    c.left = resolve(&c.left, &sub_scope, schema)?;
                    match &mut c.right {
                        Operand::Column(r) => *r = resolve(r, &sub_scope, schema)?,
                        Operand::Value(v) => {
                            let d = Domain::Column(c.left.to_qualified().unwrap());
                            *v = coerce(v, domain_type(&d, schema)?, &d)?;
                        }
                        Operand::Key(_) => {}
                    }
                }
            }
        }
    }
    for h in &mut out.having {
        fix_item(&mut h.left)?;
        if let Operand::Value(v) = &mut h.right {
            let d = Domain::of_item(&h.left).unwrap();
            *v = coerce(v, domain_type(&d, schema)?, &d)?;
        }
    }
    for c in &mut out.group_by {
        *c = resolve(c, &scope, schema)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum BucketRange {
    Int { lo: i64, hi: i64 },
    Float { lo: f64, hi: f64 },
    Strings(Vec<String>),
}

impl BucketRange {
    pub fn contains(&self, v: &Value) -> bool {
        match (self, v) {
            (BucketRange::Int { lo, hi }, Value::Int(x)) => lo <= x && x <= hi,
            (BucketRange::Float { lo, hi }, _) => v.as_f64().is_some_and(|x| *lo <= x && x <= *hi),
            (BucketRange::Int { lo, hi }, Value::Float(x)) => (*lo as f64) <= *x && *x <= (*hi as f64),
            (BucketRange::Strings(vals), Value::Str(s)) => vals.binary_search(s).is_ok(),
            _ => false,
        }
    }

    /// Distance from `x` to the range; zero inside.
    fn gap(&self, x: f64) -> f64 {
        let (lo, hi) = match self {
            BucketRange::Int { lo, hi } => (*lo as f64, *hi as f64),
            BucketRange::Float { lo, hi } => (*lo, *hi),
            BucketRange::Strings(_) => return f64::INFINITY,
        };
        if x < lo {
            lo - x
        } else if x > hi {
            x - hi
        } else {
            0.0
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Value {
        match self {
            BucketRange::Int { lo, hi } => Value::Int(rng.random_range(*lo..=*hi)),
            BucketRange::Float { lo, hi } if lo == hi => Value::Float(*lo),
            BucketRange::Float { lo, hi } => Value::Float(rng.random_range(*lo..=*hi)),
            BucketRange::Strings(vals) => Value::Str(vals.choose(rng).expect("nonempty bucket").clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    pub key: String,
    pub range: BucketRange,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainBuckets {
    pub domain: Domain,
    pub ty: ColumnType,
    pub buckets: Vec<Bucket>,
}

/// Per-domain histogram buckets with stable keys.
#[derive(Debug)]
pub struct BucketMap {
    pub bucket_count: usize,
    pub workload_digest: String,
    domains: Vec<DomainBuckets>,
    by_domain: HashMap<Domain, usize>,
    by_key: HashMap<String, (usize, usize)>,
    out_of_range: AtomicUsize,
}

impl Clone for BucketMap {
    fn clone(&self) -> Self {
        BucketMap {
            bucket_count: self.bucket_count,
            workload_digest: self.workload_digest.clone(),
            domains: self.domains.clone(),
            by_domain: self.by_domain.clone(),
            by_key: self.by_key.clone(),
            out_of_range: AtomicUsize::new(self.out_of_range()),
        }
    }
}

impl PartialEq for BucketMap {
    fn eq(&self, other: &Self) -> bool {
        self.bucket_count == other.bucket_count
            && self.workload_digest == other.workload_digest
            && self.domains == other.domains
    }
}

fn key_for(domain: &Domain, index: usize, salt: usize) -> String {
    let seed = if salt == 0 { format!("{domain}#{index}") } else { format!("{domain}#{index}#{salt}") };
    let digest = hex::encode(Sha256::digest(seed.as_bytes()));
    format!("K{}", &digest[..8])
}

/// Splits `n` items into `k` contiguous chunks whose sizes differ by at most one.
pub fn equi_depth_sizes(n: usize, k: usize) -> Vec<usize> {
    let k = k.min(n).max(1);
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

impl BucketMap {
    fn assemble(bucket_count: usize, workload_digest: String, domains: Vec<DomainBuckets>) -> Self {
        let by_domain = domains.iter().enumerate().map(|(i, d)| (d.domain.clone(), i)).collect();
        let mut by_key = HashMap::new();
        for (i, d) in domains.iter().enumerate() {
            for (j, b) in d.buckets.iter().enumerate() {
                by_key.insert(b.key.clone(), (i, j));
            }
        }
        BucketMap { bucket_count, workload_digest, domains, by_domain, by_key, out_of_range: AtomicUsize::new(0) }
    }

    pub fn empty() -> Self {
        BucketMap::assemble(DEFAULT_BUCKET_COUNT, String::new(), Vec::new())
    }

    pub fn domains(&self) -> &[DomainBuckets] {
        &self.domains
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn domain(&self, d: &Domain) -> Option<&DomainBuckets> {
        self.by_domain.get(d).map(|&i| &self.domains[i])
    }

    pub fn domain_index(&self, d: &Domain) -> Option<usize> {
        self.by_domain.get(d).copied()
    }

    /// (domain index, bucket index) of a key.
    pub fn locate(&self, key: &str) -> Option<(usize, usize)> {
        self.by_key.get(key).copied()
    }

    pub fn bucket(&self, key: &str) -> Option<(&DomainBuckets, &Bucket)> {
        let (d, b) = self.locate(key)?;
        Some((&self.domains[d], &self.domains[d].buckets[b]))
    }

    /// Constants that fell outside every bucket and were mapped to the nearest one.
    pub fn out_of_range(&self) -> usize {
        self.out_of_range.load(Ordering::Relaxed)
    }

    /// Key of the bucket holding `v`; out-of-range values go to the nearest bucket.
    pub fn key_for_value(&self, domain: &Domain, v: &Value) -> Option<&str> {
        let d = self.domain(domain)?;
        if let Some(b) = d.buckets.iter().find(|b| b.range.contains(v)) {
            return Some(&b.key);
        }
        self.out_of_range.fetch_add(1, Ordering::Relaxed);
        let b = match v.as_f64() {
            Some(x) => d
                .buckets
                .iter()
                .min_by(|a, b| a.range.gap(x).partial_cmp(&b.range.gap(x)).unwrap())
                .unwrap(),
            None => d.buckets.last().unwrap(),
        };
        Some(&b.key)
    }

    /// Serializes to the versioned text format.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# qgen bucket map\nversion {FORMAT_VERSION}\nworkload {}\nbucket_count {}\n",
            self.workload_digest, self.bucket_count
        );
        for d in &self.domains {
            out.push_str(&format!("domain {} {}\n", d.domain, d.ty.name()));
            for b in &d.buckets {
                let body = match &b.range {
                    BucketRange::Int { lo, hi } => format!("{lo} {hi}"),
                    BucketRange::Float { lo, hi } => format!("{lo:?} {hi:?}"),
                    BucketRange::Strings(vals) => vals.iter().map(|v| quote(v)).collect::<Vec<_>>().join(" "),
                };
                out.push_str(&format!("bucket {} {body}\n", b.key));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<BucketMap, PreprocessError> {
        let err = |line: usize, message: &str| PreprocessError::Format { line, message: message.to_string() };
        let mut version = None;
        let mut digest = None;
        let mut bucket_count = None;
        let mut domains: Vec<DomainBuckets> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let (head, rest) = content.split_once(' ').unwrap_or((content, ""));
            match head {
                "version" => {
                    let v: u32 = rest.trim().parse().map_err(|_| err(line, "bad version"))?;
                    if v != FORMAT_VERSION {
                        return Err(err(line, "unsupported version"));
                    }
                    version = Some(v);
                }
                "workload" => digest = Some(rest.trim().to_string()),
                "bucket_count" => {
                    bucket_count = Some(rest.trim().parse().map_err(|_| err(line, "bad bucket_count"))?)
                }
                "domain" => {
                    let parts: Vec<&str> = rest.split_whitespace().collect();
                    let [d, ty] = parts.as_slice() else { return Err(err(line, "expected `domain <name> <type>`")) };
                    let domain = Domain::parse(d).ok_or_else(|| err(line, "bad domain name"))?;
                    let ty = ColumnType::parse(ty).ok_or_else(|| err(line, "bad type"))?;
                    domains.push(DomainBuckets { domain, ty, buckets: Vec::new() });
                }
                "bucket" => {
                    let d = domains.last_mut().ok_or_else(|| err(line, "bucket before domain"))?;
                    let lexemes = lex(rest).map_err(|e| err(line, &e.to_string()))?;
                    let (key, vals) = lexemes.split_first().ok_or_else(|| err(line, "missing key"))?;
                    if !is_bucket_key(&key.text) {
                        return Err(err(line, "bad key"));
                    }
                    let range = match d.ty {
                        ColumnType::String => {
                            if vals.is_empty() || vals.iter().any(|l| l.kind != LexemeKind::Str) {
                                return Err(err(line, "expected quoted strings"));
                            }
                            let mut v: Vec<String> = vals.iter().map(|l| unquote(&l.text)).collect();
                            v.sort();
                            BucketRange::Strings(v)
                        }
                        ty => {
                            let [lo, hi] = vals else { return Err(err(line, "expected `lo hi`")) };
                            let parse = |s: &str| Value::parse_as(s, ty).ok_or_else(|| err(line, "bad bound"));
                            match (parse(&lo.text)?, parse(&hi.text)?) {
                                (Value::Int(lo), Value::Int(hi)) => BucketRange::Int { lo, hi },
                                (Value::Float(lo), Value::Float(hi)) => BucketRange::Float { lo, hi },
                                _ => unreachable!(),
                            }
                        }
                    };
                    d.buckets.push(Bucket { key: key.text.clone(), range });
                }
                _ => return Err(err(line, "unknown directive")),
            }
        }
        version.ok_or_else(|| err(0, "missing version"))?;
        let bucket_count = bucket_count.ok_or_else(|| err(0, "missing bucket_count"))?;
        Ok(BucketMap::assemble(bucket_count, digest.unwrap_or_default(), domains))
    }

    /// Sorted list of all keys, domain-major.
    pub fn keys(&self) -> Vec<&str> {
        self.domains.iter().flat_map(|d| d.buckets.iter().map(|b| b.key.as_str())).collect()
    }
}

pub fn workload_digest<S: AsRef<str>>(queries: &[S]) -> String {
    let mut h = Sha256::new();
    for q in queries {
        h.update(q.as_ref().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn for_each_constant<'q>(q: &'q Query, mut f: impl FnMut(Domain, &'q Value)) {
    for p in &q.predicates {
        match p {
            Predicate::Compare(c) => {
                if let (Operand::Value(v), Some(col)) = (&c.right, c.left.to_qualified()) {
                    f(Domain::Column(col), v);
                }
            }
            Predicate::In { subquery, .. } => {
                for c in &subquery.predicates {
                    if let (Operand::Value(v), Some(col)) = (&c.right, c.left.to_qualified()) {
                        f(Domain::Column(col), v);
                    }
                }
            }
        }
    }
    for h in &q.having {
        if let (Operand::Value(v), Some(d)) = (&h.right, Domain::of_item(&h.left)) {
            f(d, v);
        }
    }
}

/// Builds buckets over the constants of qualified queries.
pub fn build_bucket_map(
    workload: &[Query],
    schema: &Schema,
    bucket_count: usize,
    workload_digest: &str,
) -> Result<BucketMap, PreprocessError> {
    let bucket_count = bucket_count.max(1);
    let mut observed: BTreeMap<Domain, Vec<Value>> = BTreeMap::new();
    let mut error = None;
    for q in workload {
        for_each_constant(q, |d, v| {
            if schema.column_type(d.column()).is_none() {
                error.get_or_insert(PreprocessError::UnknownColumn(d.column().to_string()));
            }
            observed.entry(d).or_default().push(v.clone());
        });
    }
    if let Some(e) = error {
        return Err(e);
    }
    let mut used_keys: HashSet<String> = HashSet::new();
    let mut domains = Vec::new();
    for (domain, values) in observed {
        let ty = domain_type(&domain, schema)?;
        let values = values.iter().map(|v| coerce(v, ty, &domain)).collect::<Result<Vec<_>, _>>()?;
        let ranges: Vec<BucketRange> = match ty {
            ColumnType::Int => {
                let mut d: Vec<i64> = values.iter().map(|v| if let Value::Int(i) = v { *i } else { unreachable!() }).collect();
                d.sort_unstable();
                d.dedup();
                let mut start = 0;
                equi_depth_sizes(d.len(), bucket_count)
                    .into_iter()
                    .map(|n| {
                        let r = BucketRange::Int { lo: d[start], hi: d[start + n - 1] };
                        start += n;
                        r
                    })
                    .collect()
            }
            ColumnType::Float => {
                let mut d: Vec<f64> = values.iter().filter_map(Value::as_f64).collect();
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                d.dedup();
                let mut start = 0;
                equi_depth_sizes(d.len(), bucket_count)
                    .into_iter()
                    .map(|n| {
                        let r = BucketRange::Float { lo: d[start], hi: d[start + n - 1] };
                        start += n;
                        r
                    })
                    .collect()
            }
            ColumnType::String => {
                let mut counts: BTreeMap<String, usize> = BTreeMap::new();
                for v in &values {
                    if let Value::Str(s) = v {
                        *counts.entry(s.clone()).or_default() += 1;
                    }
                }
                let mut by_freq: Vec<(String, usize)> = counts.into_iter().collect();
                by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                if by_freq.len() <= bucket_count {
                    by_freq.into_iter().map(|(s, _)| BucketRange::Strings(vec![s])).collect()
                } else {
                    let mut ranges: Vec<BucketRange> =
                        by_freq[..bucket_count - 1].iter().map(|(s, _)| BucketRange::Strings(vec![s.clone()])).collect();
                    let mut pool: Vec<String> = by_freq[bucket_count - 1..].iter().map(|(s, _)| s.clone()).collect();
                    pool.sort();
                    ranges.push(BucketRange::Strings(pool));
                    ranges
                }
            }
        };
        let buckets = ranges
            .into_iter()
            .enumerate()
            .map(|(i, range)| {
                let mut salt = 0;
                let mut key = key_for(&domain, i, salt);
                while !used_keys.insert(key.clone()) {
                    salt += 1;
                    key = key_for(&domain, i, salt);
                }
                Bucket { key, range }
            })
            .collect();
        domains.push(DomainBuckets { domain, ty, buckets });
    }
    Ok(BucketMap::assemble(bucket_count, workload_digest.to_string(), domains))
}

fn bucketize_operand(
    right: &mut Operand,
    domain: Option<Domain>,
    m: &BucketMap,
) -> Result<(), PreprocessError> {
    if let (Operand::Value(v), Some(d)) = (&*right, domain) {
        let key = m.key_for_value(&d, v).ok_or_else(|| PreprocessError::UnknownColumn(d.to_string()))?;
        *right = Operand::Key(key.to_string());
    }
    Ok(())
}

/// Replaces every constant of a qualified query by its bucket key.
pub fn bucketize(q: &Query, m: &BucketMap) -> Result<Query, PreprocessError> {
    let mut out = q.clone();
    for p in &mut out.predicates {
        match p {
            Predicate::Compare(c) => bucketize_operand(&mut c.right, c.left.to_qualified().map(Domain::Column), m)?,
            Predicate::In { subquery, .. } => {
                for c in &mut subquery.predicates {
                    bucketize_operand(&mut c.right, c.left.to_qualified().map(Domain::Column), m)?;
                }
            }
        }
    }
    for h in &mut out.having {
        bucketize_operand(&mut h.right, Domain::of_item(&h.left), m)?;
    }
    Ok(out)
}

fn sample_operand<R: Rng + ?Sized>(right: &mut Operand, m: &BucketMap, rng: &mut R) -> Result<(), PreprocessError> {
    if let Operand::Key(k) = right {
        let (_, b) = m.bucket(k).ok_or_else(|| PreprocessError::UnknownKey(k.clone()))?;
        *right = Operand::Value(b.range.sample(rng));
    }
    Ok(())
}

/// Replaces each key by a value drawn uniformly from its bucket.
pub fn debucketize_query<R: Rng + ?Sized>(q: &Query, m: &BucketMap, rng: &mut R) -> Result<Query, PreprocessError> {
    let mut out = q.clone();
    for p in &mut out.predicates {
        match p {
            Predicate::Compare(c) => sample_operand(&mut c.right, m, rng)?,
            Predicate::In { subquery, .. } => {
                for c in &mut subquery.predicates {
                    sample_operand(&mut c.right, m, rng)?;
                }
            }
        }
    }
    for h in &mut out.having {
        sample_operand(&mut h.right, m, rng)?;
    }
    Ok(out)
}

/// Canonical bucketized query to executable SQL with sampled constants.
pub fn debucketize<R: Rng + ?Sized>(q: &Query, m: &BucketMap, rng: &mut R) -> Result<String, PreprocessError> {
    Ok(debucketize_query(q, m, rng)?.to_executable())
}

/// Raw workload to canonical bucketized queries plus the bucket map built from it.
pub fn preprocess_workload<S: AsRef<str>>(
    raw: &[S],
    schema: &Schema,
    bucket_count: usize,
) -> Result<(Vec<Query>, BucketMap), (usize, PreprocessError)> {
    let qualified = raw
        .iter()
        .enumerate()
        .map(|(i, s)| restructure(s.as_ref()).and_then(|q| qualify_columns(&q, schema)).map_err(|e| (i, e)))
        .collect::<Result<Vec<_>, _>>()?;
    let map = build_bucket_map(&qualified, schema, bucket_count, &workload_digest(raw)).map_err(|e| (0, e))?;
    let canonical = qualified
        .iter()
        .enumerate()
        .map(|(i, q)| bucketize(q, &map).map_err(|e| (i, e)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((canonical, map))
}
