//! Context-free grammar over productions, its text format, and the syntax mask matrix.
//!
//! Grammar files are line oriented:
//!
//! ```text
//! %start Start
//! # comment
//! Start -> 'FROM' TableRefs 'SELECT' SelectStmt
//! Op    -> '=' | '!='
//!        | '<'
//! ```
//!
//! Terminals are single-quoted, nonterminals are bare identifiers. A line that
//! starts with `|` continues the alternatives of the previous rule. Production ids
//! are assigned in file order, alternatives left to right. Empty bodies are rejected.

use std::collections::{HashMap, HashSet};
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub type ProductionId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SymbolRef {
    Terminal(usize),
    Nonterminal(usize),
}

impl SymbolRef {
    pub fn is_terminal(self) -> bool {
        matches!(self, SymbolRef::Terminal(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SymbolKind {
    Terminal,
    Nonterminal,
}

/// A named grammar symbol.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Symbol {
    pub name: String,
    pub kind: SymbolKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Production {
    pub id: ProductionId,
    /// Nonterminal index of the head.
    pub head: usize,
    pub body: Vec<SymbolRef>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GrammarError {
    #[error("line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("line {line}, column {column}: undefined nonterminal `{name}`")]
    UndefinedNonterminal { name: String, line: usize, column: usize },
    #[error("line {line}: duplicate %start declaration")]
    DuplicateStart { line: usize },
    #[error("missing %start declaration")]
    MissingStart,
    #[error("line {line}: duplicate production for `{head}`")]
    DuplicateProduction { head: String, line: usize },
    #[error("`{0}` is not a nonterminal of this grammar")]
    NotANonterminal(String),
}

/// An ordered production set with terminal and nonterminal alphabets.
#[derive(Debug, Clone)]
pub struct Grammar {
    nonterminals: Vec<String>,
    terminals: Vec<String>,
    productions: Vec<Production>,
    start: usize,
    nt_index: HashMap<String, usize>,
    t_index: HashMap<String, usize>,
    by_head: Vec<Vec<ProductionId>>,
    by_body: HashMap<(usize, Vec<SymbolRef>), ProductionId>,
    digest: String,
}

/// The shipped simplified-SQL grammar. Schema-dependent rules (`TableName`,
/// `Column`, `Value`) are appended by [`crate::semantics::bind_grammar`].
pub const DEFAULT_SQL_GRAMMAR: &str = include_str!("../grammars/sql.cfg");

/// Eight-production grammar over a single table; handy for examples and tests.
pub const MINI_GRAMMAR: &str = include_str!("../grammars/mini.cfg");

#[derive(Debug)]
struct RawRule {
    head: String,
    line: usize,
    alternatives: Vec<Vec<(String, bool, usize)>>, // (name, quoted, column)
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> GrammarError {
    GrammarError::Syntax { line, column, message: message.into() }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Splits a rule body into alternatives of (symbol, quoted, column).
fn scan_body(
    text: &str,
    line: usize,
    offset: usize,
) -> Result<Vec<Vec<(String, bool, usize)>>, GrammarError> {
    let chars: Vec<char> = text.chars().collect();
    let mut alternatives = vec![Vec::new()];
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = offset + i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c == '#' {
            break;
        } else if c == '|' {
            if alternatives.last().is_some_and(|a| a.is_empty()) {
                return Err(syntax(line, column, "empty alternative"));
            }
            alternatives.push(Vec::new());
            i += 1;
        } else if c == '\'' {
            let start = i + 1;
            let end = chars[start..]
                .iter()
                .position(|&d| d == '\'')
                .map(|p| start + p)
                .ok_or_else(|| syntax(line, column, "unterminated terminal"))?;
            if end == start {
                return Err(syntax(line, column, "empty terminal"));
            }
            let name: String = chars[start..end].iter().collect();
            if name.chars().any(char::is_whitespace) {
                return Err(syntax(line, column, "terminal contains whitespace"));
            }
            alternatives.last_mut().unwrap().push((name, true, column));
            i = end + 1;
        } else {
            let start = i;
            while i < chars.len() && !chars[i].is_whitespace() && !matches!(chars[i], '|' | '\'' | '#')
            {
                i += 1;
            }
            let name: String = chars[start..i].iter().collect();
            if !is_ident(&name) {
                return Err(syntax(line, column, format!("invalid symbol `{name}`")));
            }
            alternatives.last_mut().unwrap().push((name, false, column));
        }
    }
    if alternatives.last().is_some_and(|a| a.is_empty()) {
        return Err(syntax(line, offset + chars.len() + 1, "empty alternative"));
    }
    Ok(alternatives)
}

/// Parses grammar spec text into a validated [`Grammar`].
pub fn load_grammar(spec_text: &str) -> Result<Grammar, GrammarError> {
    let mut start: Option<(String, usize, usize)> = None;
    let mut rules: Vec<RawRule> = Vec::new();

    for (idx, raw_line) in spec_text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw_line.trim_start();
        let indent = raw_line.len() - trimmed.len();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix("%start") {
            if start.is_some() {
                return Err(GrammarError::DuplicateStart { line });
            }
            let name = rest.split('#').next().unwrap_or("").trim();
            if !is_ident(name) {
                return Err(syntax(line, indent + 7, "expected nonterminal after %start"));
            }
            start = Some((name.to_string(), line, indent + 8));
            continue;
        }
        if trimmed.starts_with('%') {
            return Err(syntax(line, indent + 1, "unknown directive"));
        }
        if let Some(rest) = trimmed.strip_prefix('|') {
            let Some(rule) = rules.last_mut() else {
                return Err(syntax(line, indent + 1, "continuation line without a rule"));
            };
            let alts = scan_body(rest, line, indent + 1)?;
            rule.alternatives.extend(alts);
            continue;
        }
        let Some(arrow) = trimmed.find("->") else {
            return Err(syntax(line, indent + 1, "expected `Head -> body`"));
        };
        let head = trimmed[..arrow].trim();
        if !is_ident(head) {
            return Err(syntax(line, indent + 1, format!("invalid rule head `{head}`")));
        }
        let body_offset = indent + arrow + 2;
        let alternatives = scan_body(&trimmed[arrow + 2..], line, body_offset)?;
        rules.push(RawRule { head: head.to_string(), line, alternatives });
    }

    let (start_name, start_line, start_col) = start.ok_or(GrammarError::MissingStart)?;

    let mut nonterminals: Vec<String> = Vec::new();
    let mut nt_index: HashMap<String, usize> = HashMap::new();
    for rule in &rules {
        if !nt_index.contains_key(&rule.head) {
            nt_index.insert(rule.head.clone(), nonterminals.len());
            nonterminals.push(rule.head.clone());
        }
    }
    let start = *nt_index.get(&start_name).ok_or(GrammarError::UndefinedNonterminal {
        name: start_name.clone(),
        line: start_line,
        column: start_col,
    })?;

    let mut terminals: Vec<String> = Vec::new();
    let mut t_index: HashMap<String, usize> = HashMap::new();
    let mut productions = Vec::new();
    let mut seen: HashSet<(usize, Vec<SymbolRef>)> = HashSet::new();
    for rule in &rules {
        let head = nt_index[&rule.head];
        for alt in &rule.alternatives {
            let mut body = Vec::with_capacity(alt.len());
            for (name, quoted, column) in alt {
                if *quoted {
                    let id = *t_index.entry(name.clone()).or_insert_with(|| {
                        terminals.push(name.clone());
                        terminals.len() - 1
                    });
                    body.push(SymbolRef::Terminal(id));
                } else {
                    let id = nt_index.get(name).ok_or_else(|| GrammarError::UndefinedNonterminal {
                        name: name.clone(),
                        line: rule.line,
                        column: *column,
                    })?;
                    body.push(SymbolRef::Nonterminal(*id));
                }
            }
            if !seen.insert((head, body.clone())) {
                return Err(GrammarError::DuplicateProduction { head: rule.head.clone(), line: rule.line });
            }
            productions.push(Production { id: productions.len(), head, body });
        }
    }
    Ok(Grammar::assemble(nonterminals, terminals, productions, start, nt_index, t_index))
}

impl Grammar {
    fn assemble(
        nonterminals: Vec<String>,
        terminals: Vec<String>,
        productions: Vec<Production>,
        start: usize,
        nt_index: HashMap<String, usize>,
        t_index: HashMap<String, usize>,
    ) -> Grammar {
        let mut by_head = vec![Vec::new(); nonterminals.len()];
        let mut by_body = HashMap::new();
        for p in &productions {
            by_head[p.head].push(p.id);
            by_body.insert((p.head, p.body.clone()), p.id);
        }
        let mut g = Grammar {
            nonterminals,
            terminals,
            productions,
            start,
            nt_index,
            t_index,
            by_head,
            by_body,
            digest: String::new(),
        };
        g.digest = hex::encode(Sha256::digest(g.to_string().as_bytes()));
        g
    }

    pub fn productions(&self) -> &[Production] {
        &self.productions
    }

    pub fn production(&self, id: ProductionId) -> &Production {
        &self.productions[id]
    }

    pub fn num_productions(&self) -> usize {
        self.productions.len()
    }

    pub fn num_nonterminals(&self) -> usize {
        self.nonterminals.len()
    }

    pub fn num_terminals(&self) -> usize {
        self.terminals.len()
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn nonterminal_name(&self, id: usize) -> &str {
        &self.nonterminals[id]
    }

    pub fn terminal_name(&self, id: usize) -> &str {
        &self.terminals[id]
    }

    pub fn terminals(&self) -> &[String] {
        &self.terminals
    }

    pub fn nonterminals(&self) -> &[String] {
        &self.nonterminals
    }

    pub fn nonterminal(&self, name: &str) -> Option<usize> {
        self.nt_index.get(name).copied()
    }

    pub fn terminal(&self, name: &str) -> Option<usize> {
        self.t_index.get(name).copied()
    }

    pub fn symbol(&self, s: SymbolRef) -> Symbol {
        match s {
            SymbolRef::Terminal(t) => Symbol { name: self.terminals[t].clone(), kind: SymbolKind::Terminal },
            SymbolRef::Nonterminal(n) => {
                Symbol { name: self.nonterminals[n].clone(), kind: SymbolKind::Nonterminal }
            }
        }
    }

    pub fn symbol_name(&self, s: SymbolRef) -> &str {
        match s {
            SymbolRef::Terminal(t) => &self.terminals[t],
            SymbolRef::Nonterminal(n) => &self.nonterminals[n],
        }
    }

    /// Resolves a [`Symbol`] to its index form.
    pub fn lookup(&self, s: &Symbol) -> Option<SymbolRef> {
        match s.kind {
            SymbolKind::Terminal => self.terminal(&s.name).map(SymbolRef::Terminal),
            SymbolKind::Nonterminal => self.nonterminal(&s.name).map(SymbolRef::Nonterminal),
        }
    }

    pub fn productions_of(&self, head: usize) -> &[ProductionId] {
        &self.by_head[head]
    }

    pub fn find_production(&self, head: usize, body: &[SymbolRef]) -> Option<ProductionId> {
        self.by_body.get(&(head, body.to_vec())).copied()
    }

    /// SHA-256 over the canonical rendering; insensitive to comments and layout.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn render_production(&self, id: ProductionId) -> String {
        let p = &self.productions[id];
        let body: Vec<String> = p
            .body
            .iter()
            .map(|s| match s {
                SymbolRef::Terminal(t) => format!("'{}'", self.terminals[*t]),
                SymbolRef::Nonterminal(n) => self.nonterminals[*n].clone(),
            })
            .collect();
        format!("{} -> {}", self.nonterminals[p.head], body.join(" "))
    }
}

impl fmt::Display for Grammar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "%start {}", self.nonterminals[self.start])?;
        for id in 0..self.productions.len() {
            writeln!(f, "{}", self.render_production(id))?;
        }
        Ok(())
    }
}

/// Per-nonterminal bit rows over the production set: `row(v)[i]` iff production `i` has head `v`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    rows: Vec<Vec<bool>>,
}

pub fn build_mask_matrix(g: &Grammar) -> MaskMatrix {
    let mut rows = vec![vec![false; g.num_productions()]; g.num_nonterminals()];
    for p in g.productions() {
        rows[p.head][p.id] = true;
    }
    MaskMatrix { rows }
}

impl MaskMatrix {
    pub fn row(&self, nonterminal: usize) -> &[bool] {
        &self.rows[nonterminal]
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }
}

/// Looks up the syntax mask of a symbol; terminals have no row.
pub fn mask_vector<'m>(
    m: &'m MaskMatrix,
    g: &Grammar,
    v: &Symbol,
) -> Result<&'m [bool], GrammarError> {
    match g.lookup(v) {
        Some(SymbolRef::Nonterminal(n)) => Ok(m.row(n)),
        _ => Err(GrammarError::NotANonterminal(v.name.clone())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;


    fn nt(name: &str) -> Symbol {
        Symbol { name: name.into(), kind: SymbolKind::Nonterminal }
    }

    #[test]
    fn mini_production_zero() {
        let g = load_grammar(MINI_GRAMMAR).unwrap();
        assert_eq!(g.num_productions(), 8);
        assert_eq!(
            g.render_production(0),
            "Start -> 'FROM' TableRefs 'SELECT' SelectStmt 'WHERE' WhereClause"
        );
        assert_eq!(g.nonterminal_name(g.start()), "Start");
    }

    #[test]
    fn minimal_grammar() {
        let g = load_grammar("%start S\nS -> 'a'\n").unwrap();
        assert_eq!((g.num_nonterminals(), g.num_terminals(), g.num_productions()), (1, 1, 1));
    }

    #[test]
    fn undefined_nonterminal_has_location() {
        let err = load_grammar("%start S\nS -> 'a' X\n").unwrap_err();
        assert_eq!(err, GrammarError::UndefinedNonterminal { name: "X".into(), line: 2, column: 10 });
    }

    #[test]
    fn duplicate_start() {
        let err = load_grammar("%start S\n%start S\nS -> 'a'\n").unwrap_err();
        assert_eq!(err, GrammarError::DuplicateStart { line: 2 });
    }

    #[test]
    fn syntax_errors_are_located() {
        assert!(matches!(
            load_grammar("%start S\nS -> 'a' |\n"),
            Err(GrammarError::Syntax { line: 2, .. })
        ));
        assert!(matches!(load_grammar("%start S\nS 'a'\n"), Err(GrammarError::Syntax { line: 2, .. })));
        assert!(matches!(load_grammar("S -> 'a'\n"), Err(GrammarError::MissingStart)));
        assert!(matches!(
            load_grammar("%start S\nS -> ''\n"),
            Err(GrammarError::Syntax { line: 2, .. })
        ));
    }

    #[test]
    fn continuation_lines_and_alternative_order() {
        let g = load_grammar("%start S\nS -> A | 'b'\n  | 'c'\nA -> 'a'\n").unwrap();
        let s = g.nonterminal("S").unwrap();
        assert_eq!(g.productions_of(s), &[0, 1, 2]);
        assert_eq!(g.render_production(2), "S -> 'c'");
    }

    #[test]
    fn mask_rows() {
        let g = load_grammar(MINI_GRAMMAR).unwrap();
        let m = build_mask_matrix(&g);
        let start = mask_vector(&m, &g, &nt("Start")).unwrap();
        assert_eq!(start, &[true, false, false, false, false, false, false, false]);
        let op = mask_vector(&m, &g, &nt("Op")).unwrap();
        let set: Vec<usize> = op.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect();
        assert_eq!(set, vec![6]);
        let term = Symbol { name: "TITLE".into(), kind: SymbolKind::Terminal };
        assert!(mask_vector(&m, &g, &term).is_err());
    }

    #[test]
    fn mask_rows_partition_productions() {
        let g = load_grammar("%start S\nS -> A 'x' | B\nA -> 'a' | 'b'\nB -> A | 'c'\n").unwrap();
        let m = build_mask_matrix(&g);
        let b = g.nonterminal("B").unwrap();
        let set: Vec<usize> = m.row(b).iter().enumerate().filter(|(_, x)| **x).map(|(i, _)| i).collect();
        assert_eq!(set, vec![4, 5]);
        let total: usize = (0..m.num_rows()).map(|r| m.row(r).iter().filter(|x| **x).count()).sum();
        assert_eq!(total, g.num_productions());
        for p in 0..g.num_productions() {
            assert_eq!((0..m.num_rows()).filter(|&r| m.row(r)[p]).count(), 1);
        }
    }

    #[test]
    fn digest_ignores_layout() {
        let a = load_grammar("%start S\nS -> 'a' | 'b'\n").unwrap();
        let b = load_grammar("# hi\n%start S\nS -> 'a'\n   | 'b'   # trailing\n").unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = load_grammar("%start S\nS -> 'b' | 'a'\n").unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn shipped_grammar_needs_binding() {
        assert!(matches!(
            load_grammar(DEFAULT_SQL_GRAMMAR),
            Err(GrammarError::UndefinedNonterminal { .. })
        ));
    }
}
