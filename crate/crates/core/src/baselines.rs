//! Comparison generators: uniform random derivation under the masks, and
//! constant re-sampling of templates extracted from a workload.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use thiserror::Error;

use crate::decoding::{DecodeError, Episode};
use crate::derivation::DerivationError;
use crate::grammar::ProductionId;
use crate::preprocess::{is_bucket_key, BucketMap};
use crate::semantics::{RuleSet, SemanticContext};
use crate::sql::Query;

/// Attempts per query before random generation gives up.
pub const RANDOM_RETRY_LIMIT: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BaselineError {
    #[error("random generation hit the step cap {0} times in a row")]
    RetriesExhausted(usize),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("no templates to sample from")]
    NoTemplates,
    #[error("bucket key `{0}` is not in the bucket map")]
    UnknownKey(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    pub sequence: Vec<ProductionId>,
    pub text: String,
}

/// One derivation choosing uniformly among the surviving productions.
pub fn random_episode<R: Rng + ?Sized>(ctx: &Arc<SemanticContext>, rules: RuleSet, rng: &mut R) -> Result<Generated, DecodeError> {
    let mut ep = Episode::new(ctx, rules);
    while !ep.is_complete() {
        let c = ep.candidates();
        let p = *c.choose(rng).expect("progress guarantee keeps a candidate");
        ep.apply(p)?;
    }
    Ok(Generated { sequence: ep.sequence().to_vec(), text: ep.render() })
}

/// `n` random queries; derivations that run into the step cap are retried.
pub fn random_generate<R: Rng + ?Sized>(
    ctx: &Arc<SemanticContext>,
    rules: RuleSet,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Generated>, BaselineError> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut attempts = 0;
        loop {
            match random_episode(ctx, rules, rng) {
                Ok(g) => {
                    out.push(g);
                    break;
                }
                Err(DecodeError::Derivation(DerivationError::StepCap(_))) => {
                    attempts += 1;
                    if attempts >= RANDOM_RETRY_LIMIT {
                        return Err(BaselineError::RetriesExhausted(attempts));
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TemplateToken {
    Fixed(String),
    /// A constant slot drawing keys from one bucket domain.
    Slot(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub tokens: Vec<TemplateToken>,
    pub multiplicity: usize,
}

impl Template {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn fill<R: Rng + ?Sized>(&self, m: &BucketMap, rng: &mut R) -> String {
        self.tokens
            .iter()
            .map(|t| match t {
                TemplateToken::Fixed(s) => s.clone(),
                TemplateToken::Slot(d) => m.domains()[*d].buckets.choose(rng).expect("domains are nonempty").key.clone(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Abstracts bucket keys into domain slots and collapses duplicates,
/// keeping first-appearance order.
pub fn extract_templates(workload: &[Query], m: &BucketMap) -> Result<Vec<Template>, BaselineError> {
    let mut index: HashMap<Vec<TemplateToken>, usize> = HashMap::new();
    let mut out: Vec<Template> = Vec::new();
    for q in workload {
        let tokens = q
            .canonical_tokens()
            .into_iter()
            .map(|t| {
                if is_bucket_key(&t) {
                    m.locate(&t).map(|(d, _)| TemplateToken::Slot(d)).ok_or(BaselineError::UnknownKey(t))
                } else {
                    Ok(TemplateToken::Fixed(t))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        match index.get(&tokens) {
            Some(&i) => out[i].multiplicity += 1,
            None => {
                index.insert(tokens.clone(), out.len());
                out.push(Template { tokens, multiplicity: 1 });
            }
        }
    }
    Ok(out)
}

/// Per-template counts proportional to multiplicity, largest remainders
/// first. When `n` equals the source size the counts equal the multiplicities.
pub fn stratified_counts(templates: &[Template], n: usize) -> Vec<usize> {
    let total: usize = templates.iter().map(|t| t.multiplicity).sum();
    if total == 0 {
        return vec![0; templates.len()];
    }
    let mut counts: Vec<usize> = templates.iter().map(|t| t.multiplicity * n / total).collect();
    let mut rest: Vec<(usize, usize)> = templates.iter().enumerate().map(|(i, t)| ((t.multiplicity * n) % total, i)).collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = n - counts.iter().sum::<usize>();
    for &(_, i) in rest.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// `n` queries: templates allocated by [`stratified_counts`], slots filled
/// with uniformly drawn keys of their domain, output order shuffled.
pub fn template_generate<R: Rng + ?Sized>(
    templates: &[Template],
    m: &BucketMap,
    n: usize,
    rng: &mut R,
) -> Result<Vec<String>, BaselineError> {
    if templates.is_empty() {
        return Err(BaselineError::NoTemplates);
    }
    let mut out = Vec::with_capacity(n);
    for (t, c) in templates.iter().zip(stratified_counts(templates, n)) {
        for _ in 0..c {
            out.push(t.fill(m, rng));
        }
    }
    out.shuffle(rng);
    Ok(out)
}
