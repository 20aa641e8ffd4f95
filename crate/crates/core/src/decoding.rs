//! Stepwise decoding under the combined syntax and semantic masks.

use std::sync::Arc;

use thiserror::Error;

use crate::derivation::{new_derivation, render_tokens, DerivationError, DerivationState};
use crate::grammar::ProductionId;
use crate::semantics::{init_semantic_state, RuleSet, SemanticContext, SemanticState};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error(transparent)]
    Derivation(#[from] DerivationError),
    #[error("step {step}: production {production} is masked")]
    Masked { step: usize, production: ProductionId },
}

/// One derivation in progress: pushdown state, semantic state and the chosen prefix.
#[derive(Debug, Clone)]
pub struct Episode {
    ctx: Arc<SemanticContext>,
    derivation: DerivationState,
    semantic: SemanticState,
    sequence: Vec<ProductionId>,
}

impl Episode {
    pub fn new(ctx: &Arc<SemanticContext>, rules: RuleSet) -> Self {
        Episode {
            ctx: Arc::clone(ctx),
            derivation: new_derivation(ctx.grammar()),
            semantic: init_semantic_state(ctx, rules),
            sequence: Vec::new(),
        }
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.derivation.max_steps = max_steps;
        self
    }

    pub fn context(&self) -> &Arc<SemanticContext> {
        &self.ctx
    }

    pub fn is_complete(&self) -> bool {
        self.derivation.is_complete()
    }

    pub fn leftmost_nonterminal(&self) -> Option<usize> {
        self.derivation.leftmost_nonterminal()
    }

    pub fn sequence(&self) -> &[ProductionId] {
        &self.sequence
    }

    pub fn semantic(&self) -> &SemanticState {
        &self.semantic
    }

    pub fn derivation(&self) -> &DerivationState {
        &self.derivation
    }

    /// Productions surviving both masks; empty once the derivation is complete.
    pub fn candidates(&self) -> Vec<ProductionId> {
        match self.leftmost_nonterminal() {
            Some(v) => {
                self.ctx.grammar().productions_of(v).iter().copied().filter(|&p| self.semantic.is_allowed(p)).collect()
            }
            None => Vec::new(),
        }
    }

    /// `M(v) ⊙ m_s` as a dense bit vector over all productions.
    pub fn combined_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.ctx.grammar().num_productions()];
        for p in self.candidates() {
            mask[p] = true;
        }
        mask
    }

    pub fn apply(&mut self, p: ProductionId) -> Result<(), DecodeError> {
        let step = self.sequence.len();
        if p >= self.ctx.grammar().num_productions() {
            return Err(DerivationError::UnknownProduction(p).into());
        }
        if !self.semantic.is_allowed(p) {
            return Err(DecodeError::Masked { step, production: p });
        }
        self.apply_unchecked(p)
    }

    /// Applies `p` even when the semantic mask excludes it (teacher forcing on
    /// sequences that break a rule).
    pub fn apply_unchecked(&mut self, p: ProductionId) -> Result<(), DecodeError> {
        self.derivation.apply(self.ctx.grammar(), p)?;
        self.semantic.update(p).expect("derivation and semantic stacks agree");
        self.sequence.push(p);
        Ok(())
    }

    /// Space-joined terminals emitted so far.
    pub fn render(&self) -> String {
        render_tokens(self.ctx.grammar(), &self.derivation.emitted)
    }
}

/// Candidate sets along a known sequence, the target always included.
pub fn teacher_forcing_candidates(
    ctx: &Arc<SemanticContext>,
    rules: RuleSet,
    ids: &[ProductionId],
) -> Result<Vec<Vec<ProductionId>>, DecodeError> {
    let mut ep = Episode::new(ctx, rules).with_max_steps(ids.len().max(crate::derivation::DEFAULT_MAX_DERIVATION_STEPS));
    let mut out = Vec::with_capacity(ids.len());
    for &p in ids {
        let mut c = ep.candidates();
        if !c.contains(&p) {
            c.push(p);
            c.sort_unstable();
        }
        out.push(c);
        ep.apply_unchecked(p)?;
    }
    if !ep.is_complete() {
        return Err(DerivationError::PrematureExhaustion { consumed: ids.len() }.into());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::DEFAULT_SQL_GRAMMAR;
    use crate::preprocess::preprocess_workload;
    use crate::schema::parse_schema;
    use crate::semantics::BoundGrammar;

    fn bound() -> BoundGrammar {
        let schema = parse_schema("a.x:int\na.s:string\nb.y:float\n").unwrap();
        let (_, map) = preprocess_workload(&["SELECT * FROM a WHERE a.x = 3", "SELECT * FROM b WHERE b.y > 1.5"], &schema, 4).unwrap();
        BoundGrammar::new(DEFAULT_SQL_GRAMMAR, &schema, Arc::new(map)).unwrap()
    }

    #[test]
    fn candidates_share_the_leftmost_head() {
        let bg = bound();
        let mut ep = Episode::new(&bg.semantics, RuleSet::all());
        while !ep.is_complete() {
            let v = ep.leftmost_nonterminal().unwrap();
            let c = ep.candidates();
            assert!(!c.is_empty());
            assert!(c.iter().all(|&p| bg.grammar.production(p).head == v));
            ep.apply(c[0]).unwrap();
        }
        assert!(ep.candidates().is_empty());
        let r = bg.validate(&ep.render());
        assert!(r.syntactic && r.semantic, "{} {r:?}", ep.render());
    }

    #[test]
    fn masked_production_is_refused() {
        let bg = bound();
        let seq = bg.parser.sequence_of("FROM a SELECT a.x").unwrap();
        let mut ep = Episode::new(&bg.semantics, RuleSet::all());
        for &p in &seq.ids[..3] {
            ep.apply(p).unwrap();
        }
        let by = bg.grammar.find_production(
            bg.grammar.nonterminal("Column").unwrap(),
            &[bg.grammar.lookup(&crate::grammar::Symbol { name: "b.y".into(), kind: crate::grammar::SymbolKind::Terminal }).unwrap()],
        );
        // Projection is on top, so Column productions are not yet candidates, but b.y is already masked.
        assert!(!ep.semantic().is_allowed(by.unwrap()));
        let tf = teacher_forcing_candidates(&bg.semantics, RuleSet::all(), &seq.ids).unwrap();
        assert_eq!(tf.len(), seq.ids.len());
        assert!(tf.iter().zip(&seq.ids).all(|(c, p)| c.contains(p)));
    }
}
