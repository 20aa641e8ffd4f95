//! Workload distances: per-feature Wasserstein, kernel MMD, attribute
//! co-occurrence correlation, q-error and validity rates.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::FeatureVector;
use crate::schema::{QualifiedColumn, Schema};
use crate::semantics::BoundGrammar;
use crate::sql::Query;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("empty sample")]
    Empty,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("q-error needs positive values, got {0}")]
    NonPositive(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("matrix shape mismatch: {0} vs {1} attributes")]
    ShapeMismatch(usize, usize),
}

/// Exact 1-Wasserstein distance between two empirical distributions: the
/// area between their step cdfs.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut area = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(x), Some(y)) => x.min(*y),
            (Some(x), None) => *x,
            (None, Some(y)) => *y,
            (None, None) => unreachable!(),
        };
        area += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] <= next {
            i += 1;
        }
        while j < b.len() && b[j] <= next {
            j += 1;
        }
        prev = next;
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    Linear,
    /// `exp(-gamma * |x - y|^2)`
    Rbf { gamma: f64 },
}

impl Kernel {
    pub fn eval(self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Kernel::Linear => x.iter().zip(y).map(|(a, b)| a * b).sum(),
            Kernel::Rbf { gamma } => (-gamma * x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MmdEstimator {
    /// V-statistic; exactly zero for identical samples.
    #[default]
    Biased,
    /// U-statistic; drops the diagonal terms and may dip slightly below zero.
    Unbiased,
}

/// Squared maximum mean discrepancy between two sample sets.
pub fn mmd(x: &[Vec<f64>], y: &[Vec<f64>], kernel: Kernel, estimator: MmdEstimator) -> Result<f64, MetricError> {
    if x.is_empty() || y.is_empty() {
        return Err(MetricError::Empty);
    }
    let d = x[0].len();
    if let Some(v) = x.iter().chain(y).find(|v| v.len() != d) {
        return Err(MetricError::DimensionMismatch(d, v.len()));
    }
    let within = |s: &[Vec<f64>]| -> f64 {
        let n = s.len() as f64;
        let total: f64 = (0..s.len())
            .into_par_iter()
            .map(|i| {
                s.iter()
                    .enumerate()
                    .filter(|(j, _)| estimator == MmdEstimator::Biased || *j != i)
                    .map(|(_, v)| kernel.eval(&s[i], v))
                    .sum::<f64>()
            })
            .sum();
        match estimator {
            MmdEstimator::Biased => total / (n * n),
            MmdEstimator::Unbiased if s.len() < 2 => 0.0,
            MmdEstimator::Unbiased => total / (n * (n - 1.0)),
        }
    };
    let cross: f64 = x.par_iter().map(|a| y.iter().map(|b| kernel.eval(a, b)).sum::<f64>()).sum::<f64>()
        / (x.len() as f64 * y.len() as f64);
    Ok(within(x) + within(y) - 2.0 * cross)
}

/// Sparse character 3-gram counts, sorted by gram index.
type Sparse = Vec<(u32, f64)>;

fn sparse_dot(a: &Sparse, b: &Sparse) -> f64 {
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                s += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    s
}

fn trigram_vectors<S: AsRef<str>>(qs: &[S], vocab: &mut HashMap<[char; 3], u32>) -> Vec<Sparse> {
    qs.iter()
        .map(|q| {
            let chars: Vec<char> = q.as_ref().chars().collect();
            let mut counts: HashMap<u32, f64> = HashMap::new();
            for w in chars.windows(3) {
                let next = vocab.len() as u32;
                let id = *vocab.entry([w[0], w[1], w[2]]).or_insert(next);
                *counts.entry(id).or_insert(0.0) += 1.0;
            }
            let mut v: Sparse = counts.into_iter().collect();
            v.sort_unstable_by_key(|e| e.0);
            v
        })
        .collect()
}

/// Identical texts collapse into one weighted point.
fn dedupe<S: AsRef<str>>(qs: &[S]) -> (Vec<&str>, Vec<f64>) {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut texts = Vec::new();
    let mut weights = Vec::new();
    for q in qs {
        let q = q.as_ref();
        match index.get(q) {
            Some(&i) => weights[i] += 1.0,
            None => {
                index.insert(q, texts.len());
                texts.push(q);
                weights.push(1.0);
            }
        }
    }
    let n = qs.len() as f64;
    weights.iter_mut().for_each(|w| *w /= n);
    (texts, weights)
}

/// Median of pairwise squared distances over the pooled sample, computed on
/// at most 400 evenly spaced points.
fn median_sq_distance(points: &[(Sparse, f64)]) -> f64 {
    let step = points.len().div_ceil(400).max(1);
    let sub: Vec<&(Sparse, f64)> = points.iter().step_by(step).collect();
    let mut d: Vec<f64> = Vec::new();
    for i in 0..sub.len() {
        for j in i + 1..sub.len() {
            d.push((sub[i].1 + sub[j].1 - 2.0 * sparse_dot(&sub[i].0, &sub[j].0)).max(0.0));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let m = *d.select_nth_unstable_by(mid, f64::total_cmp).1;
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Biased squared MMD between two query workloads embedded as character
/// 3-gram count vectors, RBF kernel with median-heuristic bandwidth.
pub fn sequence_mmd<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::Empty);
    }
    let (ta, wa) = dedupe(a);
    let (tb, wb) = dedupe(b);
    let mut vocab = HashMap::new();
    let va = trigram_vectors(&ta, &mut vocab);
    let vb = trigram_vectors(&tb, &mut vocab);
    let with_norm = |v: Vec<Sparse>| -> Vec<(Sparse, f64)> {
        v.into_iter()
            .map(|s| {
                let n = sparse_dot(&s, &s);
                (s, n)
            })
            .collect()
    };
    let pa = with_norm(va);
    let pb = with_norm(vb);
    // Median over the pooled multiset, duplicates included through the union.
    let mut pooled: Vec<(Sparse, f64)> = pa.clone();
    pooled.extend(pb.iter().cloned());
    let gamma = 1.0 / median_sq_distance(&pooled);
    let k = |x: &(Sparse, f64), y: &(Sparse, f64)| (-gamma * (x.1 + y.1 - 2.0 * sparse_dot(&x.0, &y.0)).max(0.0)).exp();
    let block = |p: &[(Sparse, f64)], wp: &[f64], q: &[(Sparse, f64)], wq: &[f64]| -> f64 {
        p.par_iter().zip(wp).map(|(x, wx)| wx * q.iter().zip(wq).map(|(y, wy)| wy * k(x, y)).sum::<f64>()).sum()
    };
    let v = block(&pa, &wa, &pa, &wa) + block(&pb, &wb, &pb, &wb) - 2.0 * block(&pa, &wa, &pb, &wb);
    Ok(v.max(0.0))
}

/// Features whose heavy tails are compressed with `log1p` before comparison.
pub const LOG_FEATURES: [&str; 2] = ["cardinality", "cost"];

/// Wasserstein distance of one named feature between two featurized workloads.
pub fn feature_wd(a: &[FeatureVector], b: &[FeatureVector], feature: &str) -> Result<f64, MetricError> {
    let pick = |w: &[FeatureVector]| -> Result<Vec<f64>, MetricError> {
        w.iter()
            .map(|f| {
                let v = f.get(feature).ok_or_else(|| MetricError::UnknownFeature(feature.to_string()))?;
                Ok(if LOG_FEATURES.contains(&feature) { v.ln_1p() } else { v })
            })
            .collect()
    };
    wasserstein_1d(&pick(a)?, &pick(b)?)
}

/// Pearson correlations of attribute occurrence indicators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub attributes: Vec<QualifiedColumn>,
    /// Row-major `n x n`.
    pub values: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.attributes.len() + j]
    }
}

/// Occurrence indicator `o_i(A)` is 1 when attribute A appears anywhere in
/// query i. Attributes with zero occurrence variance get 0 everywhere,
/// including the diagonal.
pub fn attr_correlation(workload: &[Query], schema: &Schema) -> CorrelationMatrix {
    let attributes = schema.columns();
    let n = attributes.len();
    let index: HashMap<String, usize> = attributes.iter().enumerate().map(|(i, c)| (c.to_string(), i)).collect();
    let occ: Vec<Vec<f64>> = workload
        .iter()
        .map(|q| {
            let mut o = vec![0.0; n];
            for c in q.column_refs() {
                if let Some(&i) = index.get(&c.to_string()) {
                    o[i] = 1.0;
                }
            }
            o
        })
        .collect();
    let m = occ.len() as f64;
    let mean: Vec<f64> = (0..n).map(|a| occ.iter().map(|o| o[a]).sum::<f64>() / m.max(1.0)).collect();
    let mut values = vec![0.0; n * n];
    for a in 0..n {
        for b in a..n {
            let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
            for o in &occ {
                let (x, y) = (o[a] - mean[a], o[b] - mean[b]);
                cov += x * y;
                va += x * x;
                vb += y * y;
            }
            let r = if va > 0.0 && vb > 0.0 { (cov / (va * vb).sqrt()).clamp(-1.0, 1.0) } else { 0.0 };
            values[a * n + b] = r;
            values[b * n + a] = r;
        }
    }
    CorrelationMatrix { attributes, values }
}

/// Cosine similarity of the row-concatenated matrices. Two all-zero
/// matrices count as identical (1); exactly one all-zero matrix gives 0.
pub fn matrix_cosine(a: &CorrelationMatrix, b: &CorrelationMatrix) -> Result<f64, MetricError> {
    if a.attributes.len() != b.attributes.len() {
        return Err(MetricError::ShapeMismatch(a.attributes.len(), b.attributes.len()));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        // rounding in the norms would otherwise leave identical inputs a few ulps short of 1
        _ if a.values == b.values => 1.0,
        _ => (dot / (na * nb)).clamp(-1.0, 1.0),
    })
}

/// Mean of `max(y, ŷ) / min(y, ŷ)`.
pub fn qerror(truth: &[f64], estimates: &[f64]) -> Result<f64, MetricError> {
    if truth.len() != estimates.len() {
        return Err(MetricError::LengthMismatch(truth.len(), estimates.len()));
    }
    if truth.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut total = 0.0;
    for (&y, &e) in truth.iter().zip(estimates) {
        if let Some(bad) = [y, e].into_iter().find(|v| v.is_nan() || *v <= 0.0) {
            return Err(MetricError::NonPositive(bad));
        }
        total += y.max(e) / y.min(e);
    }
    Ok(total / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityRates {
    pub syntactic: f64,
    pub semantic: f64,
    /// Set when the workload is empty and both rates are vacuously 1.
    pub vacuous: bool,
}

pub fn validity_rates<S: AsRef<str> + Sync>(workload: &[S], bound: &BoundGrammar) -> ValidityRates {
    if workload.is_empty() {
        return ValidityRates { syntactic: 1.0, semantic: 1.0, vacuous: true };
    }
    let (syn, sem) = workload
        .par_iter()
        .map(|q| {
            let r = bound.validate(q.as_ref());
            (usize::from(r.syntactic), usize::from(r.semantic))
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = workload.len() as f64;
    ValidityRates { syntactic: syn as f64 / n, semantic: sem as f64 / n, vacuous: false }
}
