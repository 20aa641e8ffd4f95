//! Canonical-form tokenizer, LALR(1) parser, and parse tree to production sequence conversion.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::grammar::{Grammar, ProductionId, SymbolRef};
use crate::lalr::{build_table, Action, ConflictReport, ParseTable};
use crate::lexer::{lex, LexError};

/// A terminal occurrence in canonical input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub terminal: usize,
    /// 1-based column in the source text.
    pub column: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("unknown token `{text}` at column {column}")]
    UnknownToken { text: String, column: usize },
    #[error("unexpected `{found}` at column {column}; expected one of: {}", expected.join(", "))]
    UnexpectedToken { found: String, column: usize, expected: Vec<String> },
    #[error("unexpected end of input; expected one of: {}", expected.join(", "))]
    UnexpectedEnd { expected: Vec<String> },
    #[error("corrupt parse tree: node `{0}` matches no production")]
    CorruptTree(String),
    #[error(transparent)]
    Conflicts(#[from] ConflictReport),
}

impl From<LexError> for ParseError {
    fn from(e: LexError) -> Self {
        let text = match &e {
            LexError::UnexpectedChar { ch, .. } => ch.to_string(),
            LexError::UnterminatedString { .. } => "'".to_string(),
        };
        ParseError::UnknownToken { text, column: e.column() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseNode {
    pub symbol: SymbolRef,
    pub children: Vec<ParseNode>,
}

impl ParseNode {
    /// Terminal leaves left to right.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<usize>) {
        match self.symbol {
            SymbolRef::Terminal(t) => out.push(t),
            SymbolRef::Nonterminal(_) => self.children.iter().for_each(|c| c.collect_leaves(out)),
        }
    }
}

pub type ParseTree = ParseNode;

/// Production ids of one query's leftmost derivation, bound to a grammar digest.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ProductionSequence {
    pub ids: Vec<ProductionId>,
    pub grammar_id: String,
}

impl ProductionSequence {
    pub fn new(ids: Vec<ProductionId>, g: &Grammar) -> Self {
        ProductionSequence { ids, grammar_id: g.digest().to_string() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl fmt::Display for ProductionSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.ids.iter().map(|i| i.to_string()).collect();
        f.write_str(&parts.join(" "))
    }
}

/// Maps canonical text to terminals. Whitespace-insensitive.
pub fn tokenize(g: &Grammar, sql: &str) -> Result<Vec<Token>, ParseError> {
    lex(sql)?
        .into_iter()
        .map(|l| match g.terminal(&l.text) {
            Some(terminal) => Ok(Token { terminal, column: l.column }),
            None => Err(ParseError::UnknownToken { text: l.text, column: l.column }),
        })
        .collect()
}

/// A grammar with its LALR(1) table; cheap to clone and share across threads.
#[derive(Debug, Clone)]
pub struct Parser {
    grammar: Arc<Grammar>,
    table: Arc<ParseTable>,
}

impl Parser {
    pub fn new(grammar: Arc<Grammar>) -> Result<Self, ConflictReport> {
        let table = Arc::new(build_table(&grammar)?);
        Ok(Parser { grammar, table })
    }

    pub fn grammar(&self) -> &Arc<Grammar> {
        &self.grammar
    }

    pub fn parse(&self, tokens: &[Token]) -> Result<ParseTree, ParseError> {
        parse_with_table(&self.grammar, &self.table, tokens)
    }

    pub fn parse_text(&self, sql: &str) -> Result<ParseTree, ParseError> {
        self.parse(&tokenize(&self.grammar, sql)?)
    }

    /// Canonical text to production sequence (Algorithm 1 for a single query).
    pub fn sequence_of(&self, sql: &str) -> Result<ProductionSequence, ParseError> {
        tree_to_productions(&self.grammar, &self.parse_text(sql)?)
    }
}

/// One-shot parse that builds the table on the fly.
pub fn parse(g: &Grammar, tokens: &[Token]) -> Result<ParseTree, ParseError> {
    let table = build_table(g)?;
    parse_with_table(g, &table, tokens)
}

fn expected_names(g: &Grammar, table: &ParseTable, state: usize) -> Vec<String> {
    table
        .expected(state)
        .into_iter()
        .map(|t| match t {
            Some(t) => format!("'{}'", g.terminal_name(t)),
            None => "end of input".to_string(),
        })
        .collect()
}

fn parse_with_table(g: &Grammar, table: &ParseTable, tokens: &[Token]) -> Result<ParseTree, ParseError> {
    let mut states = vec![0usize];
    let mut nodes: Vec<ParseNode> = Vec::new();
    let mut pos = 0;
    loop {
        let state = *states.last().unwrap();
        let lookahead = tokens.get(pos).map(|t| t.terminal);
        match table.action(state, lookahead) {
            Action::Shift(next) => {
                nodes.push(ParseNode { symbol: SymbolRef::Terminal(tokens[pos].terminal), children: Vec::new() });
                states.push(next);
                pos += 1;
            }
            Action::Reduce(p) => {
                let prod = g.production(p);
                let k = prod.body.len();
                let children = nodes.split_off(nodes.len() - k);
                states.truncate(states.len() - k);
                nodes.push(ParseNode { symbol: SymbolRef::Nonterminal(prod.head), children });
                let top = *states.last().unwrap();
                states.push(table.goto(top, prod.head).expect("goto defined after reduce"));
            }
            Action::Accept => return Ok(nodes.pop().unwrap()),
            Action::Error => {
                let expected = expected_names(g, table, state);
                return Err(match tokens.get(pos) {
                    Some(tok) => ParseError::UnexpectedToken {
                        found: g.terminal_name(tok.terminal).to_string(),
                        column: tok.column,
                        expected,
                    },
                    None => ParseError::UnexpectedEnd { expected },
                });
            }
        }
    }
}

/// Preorder listing of the production at each internal node.
pub fn tree_to_productions(g: &Grammar, tree: &ParseTree) -> Result<ProductionSequence, ParseError> {
    let mut ids = Vec::new();
    let mut stack = vec![tree];
    while let Some(node) = stack.pop() {
        let SymbolRef::Nonterminal(head) = node.symbol else { continue };
        let body: Vec<SymbolRef> = node.children.iter().map(|c| c.symbol).collect();
        let id = g
            .find_production(head, &body)
            .ok_or_else(|| ParseError::CorruptTree(g.nonterminal_name(head).to_string()))?;
        ids.push(id);
        stack.extend(node.children.iter().rev());
    }
    Ok(ProductionSequence::new(ids, g))
}

#[derive(Debug, Error)]
#[error("{} of {total} queries failed to parse; first: query {}: {}", failures.len(), failures[0].0, failures[0].1)]
pub struct WorkloadParseError {
    pub total: usize,
    /// (query index, error) pairs in input order.
    pub failures: Vec<(usize, ParseError)>,
}

/// Algorithm 1 over a workload of canonical queries, preserving order.
pub fn workload_to_sequences<S: AsRef<str>>(
    parser: &Parser,
    queries: &[S],
) -> Result<Vec<ProductionSequence>, WorkloadParseError> {
    let mut out = Vec::with_capacity(queries.len());
    let mut failures = Vec::new();
    for (i, q) in queries.iter().enumerate() {
        match parser.sequence_of(q.as_ref()) {
            Ok(seq) => out.push(seq),
            Err(e) => failures.push((i, e)),
        }
    }
    if failures.is_empty() {
        Ok(out)
    } else {
        Err(WorkloadParseError { total: queries.len(), failures })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::load_grammar;
    use crate::grammar::MINI_GRAMMAR;

    const MINI_QUERY: &str = "FROM TITLE SELECT * WHERE ID = 1";

    fn mini() -> Parser {
        Parser::new(Arc::new(load_grammar(MINI_GRAMMAR).unwrap())).unwrap()
    }

    #[test]
    fn tokenize_mini() {
        let p = mini();
        let g = p.grammar();
        let names: Vec<&str> =
            tokenize(g, MINI_QUERY).unwrap().iter().map(|t| g.terminal_name(t.terminal)).collect();
        assert_eq!(names, ["FROM", "TITLE", "SELECT", "*", "WHERE", "ID", "=", "1"]);
        assert!(tokenize(g, "").unwrap().is_empty());
        assert_eq!(
            tokenize(g, "FROM @@@").unwrap_err(),
            ParseError::UnknownToken { text: "@".into(), column: 6 }
        );
        assert!(matches!(tokenize(g, "FROM MOVIE"), Err(ParseError::UnknownToken { column: 6, .. })));
    }

    #[test]
    fn mini_tree_shape() {
        let p = mini();
        let g = p.grammar();
        let tree = p.parse_text(MINI_QUERY).unwrap();
        assert_eq!(tree.symbol, SymbolRef::Nonterminal(g.nonterminal("Start").unwrap()));
        let refs = &tree.children[1];
        assert_eq!(g.symbol_name(refs.symbol), "TableRefs");
        assert_eq!(g.symbol_name(refs.children[0].symbol), "TableName");
        assert_eq!(g.symbol_name(refs.children[0].children[0].symbol), "TITLE");
        assert_eq!(tree.leaves(), tokenize(g, MINI_QUERY).unwrap().iter().map(|t| t.terminal).collect::<Vec<_>>());
    }

    #[test]
    fn mini_sequence() {
        let p = mini();
        assert_eq!(p.sequence_of(MINI_QUERY).unwrap().ids, vec![0, 1, 4, 2, 3, 5, 6, 7]);
        let seqs = workload_to_sequences(&p, &[MINI_QUERY]).unwrap();
        assert_eq!(seqs.len(), 1);
        assert!(workload_to_sequences::<&str>(&p, &[]).unwrap().is_empty());
    }

    #[test]
    fn incomplete_query_fails() {
        let p = mini();
        assert!(matches!(p.parse_text("FROM TITLE SELECT *"), Err(ParseError::UnexpectedEnd { .. })));
        let err = p.parse_text("FROM TITLE TITLE").unwrap_err();
        assert!(matches!(err, ParseError::UnexpectedToken { column: 12, .. }));
    }

    #[test]
    fn single_rule_grammar() {
        let g = load_grammar("%start S\nS -> 'a'\n").unwrap();
        let tree = parse(&g, &tokenize(&g, "a").unwrap()).unwrap();
        assert_eq!(tree.children.len(), 1);
        assert!(tree.children[0].children.is_empty());
        assert_eq!(tree_to_productions(&g, &tree).unwrap().ids, vec![0]);
    }

    #[test]
    fn corrupt_tree_is_reported() {
        let g = load_grammar("%start S\nS -> 'a'\n").unwrap();
        let tree = ParseNode { symbol: SymbolRef::Nonterminal(0), children: vec![] };
        assert!(matches!(tree_to_productions(&g, &tree), Err(ParseError::CorruptTree(_))));
    }

    #[test]
    fn workload_errors_carry_indices() {
        let p = mini();
        let err = workload_to_sequences(&p, &[MINI_QUERY, "FROM", MINI_QUERY, "SELECT"]).unwrap_err();
        let idx: Vec<usize> = err.failures.iter().map(|f| f.0).collect();
        assert_eq!(idx, vec![1, 3]);
    }
}
