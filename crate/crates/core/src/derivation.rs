//! Leftmost derivation replay (production sequence to tokens) and its stepwise state.

use thiserror::Error;

use crate::grammar::{Grammar, ProductionId, SymbolRef};

pub const DEFAULT_MAX_DERIVATION_STEPS: usize = 512;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DerivationError {
    #[error("step {step}: production {production} has head `{found}` but the leftmost nonterminal is `{expected}`")]
    HeadMismatch { step: usize, production: ProductionId, expected: String, found: String },
    #[error("step {step}: derivation is already complete")]
    AlreadyComplete { step: usize },
    #[error("sequence exhausted after {consumed} productions with nonterminals remaining")]
    PrematureExhaustion { consumed: usize },
    #[error("{surplus} surplus production(s) after the derivation completed")]
    Surplus { surplus: usize },
    #[error("production id {0} out of range")]
    UnknownProduction(ProductionId),
    #[error("derivation exceeded {0} steps")]
    StepCap(usize),
}

/// Pushdown state of a leftmost derivation. The stack top is the last element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerivationState {
    pub stack: Vec<SymbolRef>,
    pub emitted: Vec<usize>,
    pub consumed: usize,
    pub max_steps: usize,
}

pub fn new_derivation(g: &Grammar) -> DerivationState {
    DerivationState {
        stack: vec![SymbolRef::Nonterminal(g.start())],
        emitted: Vec::new(),
        consumed: 0,
        max_steps: DEFAULT_MAX_DERIVATION_STEPS,
    }
}

impl DerivationState {
    pub fn is_complete(&self) -> bool {
        self.stack.is_empty()
    }

    /// The nonterminal to expand next. Terminals never sit on top between steps.
    pub fn leftmost_nonterminal(&self) -> Option<usize> {
        match self.stack.last() {
            Some(SymbolRef::Nonterminal(n)) => Some(*n),
            _ => None,
        }
    }

    /// Expands the leftmost nonterminal and emits any terminals that surface.
    /// Returns the number of terminals emitted.
    pub fn apply(&mut self, g: &Grammar, p: ProductionId) -> Result<usize, DerivationError> {
        if p >= g.num_productions() {
            return Err(DerivationError::UnknownProduction(p));
        }
        let Some(top) = self.leftmost_nonterminal() else {
            return Err(DerivationError::AlreadyComplete { step: self.consumed });
        };
        if self.consumed >= self.max_steps {
            return Err(DerivationError::StepCap(self.max_steps));
        }
        let prod = g.production(p);
        if prod.head != top {
            return Err(DerivationError::HeadMismatch {
                step: self.consumed,
                production: p,
                expected: g.nonterminal_name(top).to_string(),
                found: g.nonterminal_name(prod.head).to_string(),
            });
        }
        self.stack.pop();
        self.stack.extend(prod.body.iter().rev());
        self.consumed += 1;
        let before = self.emitted.len();
        while let Some(SymbolRef::Terminal(t)) = self.stack.last() {
            self.emitted.push(*t);
            self.stack.pop();
        }
        Ok(self.emitted.len() - before)
    }
}

pub fn leftmost_nonterminal(s: &DerivationState) -> Option<usize> {
    s.leftmost_nonterminal()
}

pub fn apply_production(
    g: &Grammar,
    s: &DerivationState,
    p: ProductionId,
) -> Result<DerivationState, DerivationError> {
    let mut next = s.clone();
    next.apply(g, p)?;
    Ok(next)
}

/// Full replay of a sequence into terminal ids.
pub fn productions_to_query(g: &Grammar, ids: &[ProductionId]) -> Result<Vec<usize>, DerivationError> {
    let mut s = new_derivation(g);
    s.max_steps = s.max_steps.max(ids.len());
    for (i, &p) in ids.iter().enumerate() {
        if s.is_complete() {
            return Err(DerivationError::Surplus { surplus: ids.len() - i });
        }
        s.apply(g, p)?;
    }
    if !s.is_complete() {
        return Err(DerivationError::PrematureExhaustion { consumed: s.consumed });
    }
    Ok(s.emitted)
}

/// Space-joined terminal names.
pub fn render_tokens(g: &Grammar, terminals: &[usize]) -> String {
    terminals.iter().map(|&t| g.terminal_name(t)).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SequenceFileError {
    #[error("missing `#grammar=<hash>` header")]
    MissingHeader,
    #[error("sequence file was written for grammar {found}, expected {expected}")]
    GrammarMismatch { expected: String, found: String },
    #[error("line {line}: invalid production id `{text}`")]
    BadId { line: usize, text: String },
}

pub fn write_sequence_file(grammar_digest: &str, seqs: &[Vec<ProductionId>]) -> String {
    let mut out = format!("#grammar={grammar_digest}\n");
    for s in seqs {
        let parts: Vec<String> = s.iter().map(|i| i.to_string()).collect();
        out.push_str(&parts.join(" "));
        out.push('\n');
    }
    out
}

/// Reads a sequence file, checking its header against `expected_digest` when given.
pub fn read_sequence_file(
    text: &str,
    expected_digest: Option<&str>,
) -> Result<Vec<Vec<ProductionId>>, SequenceFileError> {
    let mut lines = text.lines().enumerate();
    let digest = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .and_then(|(_, l)| l.trim().strip_prefix("#grammar="))
        .ok_or(SequenceFileError::MissingHeader)?;
    if let Some(expected) = expected_digest {
        if digest != expected {
            return Err(SequenceFileError::GrammarMismatch {
                expected: expected.to_string(),
                found: digest.to_string(),
            });
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ids = line
            .split_whitespace()
            .map(|w| w.parse().map_err(|_| SequenceFileError::BadId { line: i + 1, text: w.to_string() }))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(ids);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::load_grammar;
    use crate::grammar::MINI_GRAMMAR;

    #[test]
    fn fresh_state() {
        let g = load_grammar(MINI_GRAMMAR).unwrap();
        let s = new_derivation(&g);
        assert_eq!(s.stack, vec![SymbolRef::Nonterminal(g.start())]);
        assert!(s.emitted.is_empty());
        assert_eq!(s.consumed, 0);
        assert_eq!(leftmost_nonterminal(&s), Some(g.start()));
    }

    #[test]
    fn first_step_emits_from() {
        let g = load_grammar(MINI_GRAMMAR).unwrap();
        let s = apply_production(&g, &new_derivation(&g), 0).unwrap();
        assert_eq!(render_tokens(&g, &s.emitted), "FROM");
        assert_eq!(s.leftmost_nonterminal(), g.nonterminal("TableRefs"));
    }

    #[test]
    fn wrong_head_is_rejected() {
        let g = load_grammar(MINI_GRAMMAR).unwrap();
        let mut s = new_derivation(&g);
        for p in [0, 1, 4, 2] {
            s.apply(&g, p).unwrap();
        }
        assert_eq!(s.leftmost_nonterminal(), g.nonterminal("WhereClause"));
        let err = s.apply(&g, 4).unwrap_err();
        assert!(matches!(err, DerivationError::HeadMismatch { step: 4, production: 4, .. }));
    }

    #[test]
    fn mini_replay() {
        let g = load_grammar(MINI_GRAMMAR).unwrap();
        let tokens = productions_to_query(&g, &[0, 1, 4, 2, 3, 5, 6, 7]).unwrap();
        assert_eq!(render_tokens(&g, &tokens), "FROM TITLE SELECT * WHERE ID = 1");
    }

    #[test]
    fn replay_errors() {
        let g = load_grammar(MINI_GRAMMAR).unwrap();
        assert_eq!(
            productions_to_query(&g, &[0, 1, 4]),
            Err(DerivationError::PrematureExhaustion { consumed: 3 })
        );
        assert_eq!(
            productions_to_query(&g, &[0, 1, 4, 2, 3, 5, 6, 7, 7]),
            Err(DerivationError::Surplus { surplus: 1 })
        );
    }

    #[test]
    fn step_cap() {
        let g = load_grammar("%start S\nS -> 'a' S | 'a'\n").unwrap();
        let mut s = new_derivation(&g);
        s.max_steps = 3;
        for _ in 0..3 {
            s.apply(&g, 0).unwrap();
        }
        assert_eq!(s.apply(&g, 1), Err(DerivationError::StepCap(3)));
    }

    #[test]
    fn sequence_file_roundtrip() {
        let text = write_sequence_file("abc", &[vec![0, 1, 4], vec![2]]);
        assert_eq!(read_sequence_file(&text, Some("abc")).unwrap(), vec![vec![0, 1, 4], vec![2]]);
        assert!(matches!(
            read_sequence_file(&text, Some("xyz")),
            Err(SequenceFileError::GrammarMismatch { .. })
        ));
        assert_eq!(read_sequence_file("1 2\n", None), Err(SequenceFileError::MissingHeader));
    }
}
