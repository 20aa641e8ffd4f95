//! Synthetic studio / movie / review database and workloads over it, with
//! Zipf-skewed data and constants. Used by tests, benches and the `synth` command.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::oracle::Database;
use crate::schema::{parse_schema, Schema, Value};

pub const SYNTHETIC_SCHEMA: &str = "\
studio.id:int
studio.name:string
studio.country:string
studio.founded:int
movie.id:int
movie.title:string
movie.studio_id:int
movie.year:int
movie.budget:float
movie.genre:string
review.id:int
review.movie_id:int
review.score:float
review.votes:int
review.source:string
";

const COUNTRIES: [&str; 6] = ["US", "UK", "FR", "JP", "IN", "KR"];
const GENRES: [&str; 7] = ["drama", "comedy", "action", "horror", "scifi", "romance", "documentary"];
const SOURCES: [&str; 4] = ["critic", "audience", "festival", "press"];

pub fn synthetic_schema() -> Schema {
    parse_schema(SYNTHETIC_SCHEMA).expect("built-in schema parses")
}

/// Zipf-distributed rank in `0..n`.
fn zipf_index<R: Rng + ?Sized>(rng: &mut R, n: usize, s: f64) -> usize {
    let z = Zipf::new(n as f64, s).expect("valid zipf parameters");
    (z.sample(rng) as usize).clamp(1, n) - 1
}

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, items: &[&'a str]) -> &'a str {
    items[zipf_index(rng, items.len(), 1.1)]
}

/// Table sizes: `studios`, `10 * studios` movies, `20 * studios` reviews.
pub fn synthetic_database(studios: usize, seed: u64) -> Database {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let movies = studios * 10;
    let reviews = studios * 20;
    let studio_rows = (0..studios)
        .map(|i| {
            vec![
                Value::Int(i as i64 + 1),
                Value::Str(format!("studio{}", i + 1)),
                Value::Str(pick(&mut rng, &COUNTRIES).to_string()),
                Value::Int(1920 + rng.random_range(0..90)),
            ]
        })
        .collect();
    let movie_rows = (0..movies)
        .map(|i| {
            let year = 2023 - zipf_index(&mut rng, 60, 0.8) as i64;
            let budget = (rng.random_range(1.0f64..200.0) * 10.0).round() / 10.0;
            vec![
                Value::Int(i as i64 + 1),
                Value::Str(format!("movie{}", i + 1)),
                Value::Int(zipf_index(&mut rng, studios, 1.0) as i64 + 1),
                Value::Int(year),
                Value::Float(budget),
                Value::Str(pick(&mut rng, &GENRES).to_string()),
            ]
        })
        .collect();
    let review_rows = (0..reviews)
        .map(|i| {
            vec![
                Value::Int(i as i64 + 1),
                Value::Int(zipf_index(&mut rng, movies, 0.9) as i64 + 1),
                Value::Float(rng.random_range(0..=100) as f64 / 10.0),
                Value::Int(zipf_index(&mut rng, 1000, 1.2) as i64),
                Value::Str(pick(&mut rng, &SOURCES).to_string()),
            ]
        })
        .collect();
    Database::new(synthetic_schema(), vec![studio_rows, movie_rows, review_rows]).expect("fixture rows match schema")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkloadShape {
    /// Single-table, one or two predicates.
    Short,
    /// Joins, nesting, grouping.
    Long,
    Mixed,
}

/// A constant drawn from the column's stored values with Zipf skew over
/// their sorted distinct list.
fn constant<R: Rng + ?Sized>(db: &Database, rng: &mut R, table: &str, col: usize) -> String {
    let mut vals: Vec<Value> = db.rows(table).unwrap().iter().map(|r| r[col].clone()).collect();
    vals.sort_by(|a, b| a.compare(b).unwrap());
    vals.dedup();
    if vals.is_empty() {
        return "0".into();
    }
    vals[zipf_index(rng, vals.len(), 0.9)].sql()
}

/// Raw executable SQL drawn from a fixed mix of query shapes.
pub fn synthetic_workload(db: &Database, n: usize, shape: WorkloadShape, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let short: [(u32, fn(&Database, &mut ChaCha8Rng) -> String); 6] = [
        (6, |db, r| format!("SELECT * FROM movie WHERE movie.year > {}", constant(db, r, "movie", 3))),
        (4, |db, r| {
            format!("SELECT movie.title FROM movie WHERE movie.genre = {} AND movie.budget < {}", constant(db, r, "movie", 5), constant(db, r, "movie", 4))
        }),
        (3, |db, r| format!("SELECT studio.name FROM studio WHERE studio.country = {}", constant(db, r, "studio", 2))),
        (3, |_, _| "SELECT movie.genre, COUNT(movie.id) FROM movie GROUP BY movie.genre".to_string()),
        (3, |db, r| format!("SELECT COUNT(review.id) FROM review WHERE review.score >= {}", constant(db, r, "review", 2))),
        (2, |db, r| format!("SELECT review.score FROM review WHERE review.source != {}", constant(db, r, "review", 4))),
    ];
    let long: [(u32, fn(&Database, &mut ChaCha8Rng) -> String); 5] = [
        (5, |db, r| {
            format!(
                "SELECT movie.title, studio.name FROM movie, studio WHERE movie.studio_id = studio.id AND movie.year >= {}",
                constant(db, r, "movie", 3)
            )
        }),
        (4, |db, r| {
            format!(
                "SELECT review.score FROM review, movie WHERE review.movie_id = movie.id AND movie.genre = {} AND review.votes > {}",
                constant(db, r, "movie", 5),
                constant(db, r, "review", 3)
            )
        }),
        (3, |db, r| {
            format!(
                "SELECT movie.genre, AVG(movie.budget) FROM movie WHERE movie.year > {} GROUP BY movie.genre HAVING COUNT(movie.id) > {}",
                constant(db, r, "movie", 3),
                r.random_range(1..15)
            )
        }),
        (3, |db, r| {
            format!(
                "SELECT movie.title FROM movie WHERE movie.id IN (SELECT review.movie_id FROM review WHERE review.votes > {})",
                constant(db, r, "review", 3)
            )
        }),
        (2, |db, r| {
            format!(
                "SELECT MAX(review.score) FROM review, movie, studio WHERE review.movie_id = movie.id AND movie.studio_id = studio.id AND studio.country = {}",
                constant(db, r, "studio", 2)
            )
        }),
    ];
    let mut mix: Vec<(u32, fn(&Database, &mut ChaCha8Rng) -> String)> = Vec::new();
    if shape != WorkloadShape::Long {
        mix.extend(short);
    }
    if shape != WorkloadShape::Short {
        mix.extend(long);
    }
    (0..n)
        .map(|_| {
            let (_, f) = mix.choose_weighted(&mut rng, |e| e.0).expect("nonempty mix");
            f(db, &mut rng)
        })
        .collect()
}

/// Conjunctive filters with a predicate count drawn uniformly from `preds`,
/// over the same base queries regardless of the range. Two disjoint ranges
/// give a pair of workloads that differ mainly in length.
pub fn predicate_chain_workload(db: &Database, n: usize, preds: std::ops::RangeInclusive<usize>, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // (weight, select list, from, join condition, filterable (table, column index, column))
    type Base = (u32, &'static str, &'static str, Option<&'static str>, &'static [(&'static str, usize, &'static str)]);
    const MOVIE: &[(&str, usize, &str)] = &[("movie", 3, "year"), ("movie", 4, "budget"), ("movie", 5, "genre"), ("movie", 2, "studio_id")];
    const REVIEW: &[(&str, usize, &str)] = &[("review", 2, "score"), ("review", 3, "votes"), ("review", 4, "source")];
    const JOINED: &[(&str, usize, &str)] =
        &[("movie", 3, "year"), ("movie", 4, "budget"), ("movie", 5, "genre"), ("studio", 2, "country"), ("studio", 3, "founded")];
    let bases: [Base; 3] = [
        (5, "movie.title", "movie", None, MOVIE),
        (3, "COUNT(review.id)", "review", None, REVIEW),
        (3, "movie.title, studio.name", "movie, studio", Some("movie.studio_id = studio.id"), JOINED),
    ];
    let ops = ["=", "<", ">", "<=", ">=", "!="];
    (0..n)
        .map(|_| {
            let (_, select, from, join, cols) = bases.choose_weighted(&mut rng, |b| b.0).expect("nonempty bases");
            let k = rng.random_range(preds.clone());
            let mut conds: Vec<String> = join.iter().map(|j| j.to_string()).collect();
            for _ in 0..k {
                let (t, idx, c) = cols[zipf_index(&mut rng, cols.len(), 0.7)];
                let op = if c == "genre" || c == "country" || c == "source" { "=" } else { ops[zipf_index(&mut rng, ops.len(), 1.0)] };
                conds.push(format!("{t}.{c} {op} {}", constant(db, &mut rng, t, idx)));
            }
            if conds.is_empty() {
                format!("SELECT {select} FROM {from}")
            } else {
                format!("SELECT {select} FROM {from} WHERE {}", conds.join(" AND "))
            }
        })
        .collect()
}
