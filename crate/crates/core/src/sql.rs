//! AST for the supported SQL subset, a parser accepting both standard and
//! canonical clause order, and the two renderings (canonical and executable).

use std::fmt;

use thiserror::Error;

use crate::lexer::{lex, LexError, Lexeme, LexemeKind};
use crate::preprocess::is_bucket_key;
use crate::schema::{QualifiedColumn, Value};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ColumnRef {
    pub table: Option<String>,
    pub column: String,
}

impl ColumnRef {
    pub fn qualified(table: impl Into<String>, column: impl Into<String>) -> Self {
        ColumnRef { table: Some(table.into()), column: column.into() }
    }

    pub fn to_qualified(&self) -> Option<QualifiedColumn> {
        self.table.as_ref().map(|t| QualifiedColumn::new(t, &self.column))
    }
}

impl From<&QualifiedColumn> for ColumnRef {
    fn from(c: &QualifiedColumn) -> Self {
        ColumnRef::qualified(&c.table, &c.column)
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.table {
            Some(t) => write!(f, "{t}.{}", self.column),
            None => f.write_str(&self.column),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AggFn {
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

impl AggFn {
    pub const ALL: [AggFn; 5] = [AggFn::Count, AggFn::Sum, AggFn::Avg, AggFn::Min, AggFn::Max];

    pub fn keyword(self) -> &'static str {
        match self {
            AggFn::Count => "COUNT",
            AggFn::Sum => "SUM",
            AggFn::Avg => "AVG",
            AggFn::Min => "MIN",
            AggFn::Max => "MAX",
        }
    }

    pub fn from_keyword(s: &str) -> Option<AggFn> {
        AggFn::ALL.into_iter().find(|a| a.keyword().eq_ignore_ascii_case(s))
    }

    /// SUM and AVG need numeric arguments.
    pub fn needs_numeric(self) -> bool {
        matches!(self, AggFn::Sum | AggFn::Avg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CompareOp {
    Eq,
    Ne,
    Lt,
    Gt,
    Le,
    Ge,
}

impl CompareOp {
    pub const ALL: [CompareOp; 6] =
        [CompareOp::Eq, CompareOp::Ne, CompareOp::Lt, CompareOp::Gt, CompareOp::Le, CompareOp::Ge];

    pub fn symbol(self) -> &'static str {
        match self {
            CompareOp::Eq => "=",
            CompareOp::Ne => "!=",
            CompareOp::Lt => "<",
            CompareOp::Gt => ">",
            CompareOp::Le => "<=",
            CompareOp::Ge => ">=",
        }
    }

    pub fn from_symbol(s: &str) -> Option<CompareOp> {
        match s {
            "<>" => Some(CompareOp::Ne),
            _ => CompareOp::ALL.into_iter().find(|o| o.symbol() == s),
        }
    }

    /// Whether string operands may use this operator.
    pub fn is_equality(self) -> bool {
        matches!(self, CompareOp::Eq | CompareOp::Ne)
    }

    pub fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            CompareOp::Eq => ord == Equal,
            CompareOp::Ne => ord != Equal,
            CompareOp::Lt => ord == Less,
            CompareOp::Gt => ord == Greater,
            CompareOp::Le => ord != Greater,
            CompareOp::Ge => ord != Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Value(Value),
    Key(String),
    Column(ColumnRef),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SelectItem {
    Column(ColumnRef),
    Aggregate(AggFn, ColumnRef),
}

impl SelectItem {
    pub fn column(&self) -> &ColumnRef {
        match self {
            SelectItem::Column(c) | SelectItem::Aggregate(_, c) => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Star,
    Items(Vec<SelectItem>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub left: ColumnRef,
    pub op: CompareOp,
    pub right: Operand,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubQuery {
    pub from: Vec<String>,
    pub column: ColumnRef,
    pub predicates: Vec<Comparison>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    Compare(Comparison),
    In { column: ColumnRef, subquery: Box<SubQuery> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HavingPredicate {
    pub left: SelectItem,
    pub op: CompareOp,
    pub right: Operand,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub from: Vec<String>,
    pub projection: Projection,
    pub predicates: Vec<Predicate>,
    pub having: Vec<HavingPredicate>,
    pub group_by: Vec<ColumnRef>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SqlError {
    #[error(transparent)]
    Lex(#[from] LexError),
    #[error("unsupported construct `{construct}` at column {column}")]
    Unsupported { construct: String, column: usize },
    #[error("unexpected `{found}` at column {column}; expected {expected}")]
    Unexpected { found: String, column: usize, expected: &'static str },
    #[error("unexpected end of query; expected {expected}")]
    UnexpectedEnd { expected: &'static str },
    #[error("duplicate {0} clause")]
    DuplicateClause(&'static str),
    #[error("missing {0} clause")]
    MissingClause(&'static str),
}

const UNSUPPORTED: &[&str] = &[
    "ORDER", "LIMIT", "OFFSET", "JOIN", "INNER", "LEFT", "RIGHT", "OUTER", "FULL", "CROSS", "ON",
    "USING", "UNION", "INTERSECT", "EXCEPT", "DISTINCT", "OR", "NOT", "LIKE", "BETWEEN", "IS",
    "NULL", "AS", "CASE", "EXISTS", "ANY", "ALL", "OVER", "PARTITION", "WITH", "WINDOW", "INSERT",
    "UPDATE", "DELETE",
];

const CLAUSES: &[&str] = &["SELECT", "FROM", "WHERE", "GROUP", "HAVING"];

fn is_keyword(word: &str, kw: &str) -> bool {
    word.eq_ignore_ascii_case(kw)
}

struct SqlParser {
    lexemes: Vec<Lexeme>,
    pos: usize,
}

impl SqlParser {
    fn peek(&self) -> Option<&Lexeme> {
        self.lexemes.get(self.pos)
    }

    fn peek_word(&self, kw: &str) -> bool {
        self.peek().is_some_and(|l| l.kind == LexemeKind::Word && is_keyword(&l.text, kw))
    }

    fn peek_punct(&self, p: &str) -> bool {
        self.peek().is_some_and(|l| l.kind == LexemeKind::Punct && l.text == p)
    }

    fn unexpected(&self, expected: &'static str) -> SqlError {
        match self.peek() {
            None => SqlError::UnexpectedEnd { expected },
            Some(l) if l.kind == LexemeKind::Word && UNSUPPORTED.iter().any(|k| is_keyword(&l.text, k)) => {
                SqlError::Unsupported { construct: l.text.to_ascii_uppercase(), column: l.column }
            }
            Some(l) => SqlError::Unexpected { found: l.text.clone(), column: l.column, expected },
        }
    }

    fn expect_word(&mut self, kw: &'static str) -> Result<(), SqlError> {
        if self.peek_word(kw) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.unexpected(kw))
        }
    }

    fn expect_punct(&mut self, p: &'static str) -> Result<(), SqlError> {
        if self.peek_punct(p) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.unexpected(p))
        }
    }

    fn is_reserved(word: &str) -> bool {
        CLAUSES.iter().chain(UNSUPPORTED).chain(["AND", "IN", "BY"].iter()).any(|k| is_keyword(word, k))
            || AggFn::from_keyword(word).is_some()
    }

    fn identifier(&mut self, expected: &'static str) -> Result<String, SqlError> {
        match self.peek() {
            Some(l) if l.kind == LexemeKind::Word && !Self::is_reserved(&l.text) => {
                let text = l.text.clone();
                self.pos += 1;
                Ok(text)
            }
            _ => Err(self.unexpected(expected)),
        }
    }

    fn column(&mut self) -> Result<ColumnRef, SqlError> {
        let column = self.peek().map(|l| l.column).unwrap_or(0);
        let word = self.identifier("a column name")?;
        match word.split_once('.') {
            None => Ok(ColumnRef { table: None, column: word }),
            Some((t, c)) if !t.is_empty() && !c.is_empty() && !c.contains('.') => Ok(ColumnRef::qualified(t, c)),
            Some(_) => Err(SqlError::Unexpected { found: word, column, expected: "a column name" }),
        }
    }

    fn table_list(&mut self) -> Result<Vec<String>, SqlError> {
        let mut tables = vec![self.table_name()?];
        while self.peek_punct(",") {
            self.pos += 1;
            tables.push(self.table_name()?);
        }
        Ok(tables)
    }

    fn table_name(&mut self) -> Result<String, SqlError> {
        let column = self.peek().map(|l| l.column).unwrap_or(0);
        let name = self.identifier("a table name")?;
        if name.contains('.') {
            return Err(SqlError::Unexpected { found: name, column, expected: "a table name" });
        }
        if self.peek().is_some_and(|l| l.kind == LexemeKind::Word && !Self::is_reserved(&l.text)) {
            let l = self.peek().unwrap();
            return Err(SqlError::Unsupported { construct: "table alias".into(), column: l.column });
        }
        Ok(name)
    }

    fn select_item(&mut self) -> Result<SelectItem, SqlError> {
        if let Some(agg) = self.peek().filter(|l| l.kind == LexemeKind::Word).and_then(|l| AggFn::from_keyword(&l.text)) {
            self.pos += 1;
            self.expect_punct("(")?;
            if self.peek_punct("*") {
                let l = self.peek().unwrap();
                return Err(SqlError::Unsupported { construct: format!("{}(*)", agg.keyword()), column: l.column });
            }
            let c = self.column()?;
            self.expect_punct(")")?;
            Ok(SelectItem::Aggregate(agg, c))
        } else {
            Ok(SelectItem::Column(self.column()?))
        }
    }

    fn projection(&mut self) -> Result<Projection, SqlError> {
        if self.peek_punct("*") {
            self.pos += 1;
            return Ok(Projection::Star);
        }
        let mut items = vec![self.select_item()?];
        while self.peek_punct(",") {
            self.pos += 1;
            items.push(self.select_item()?);
        }
        Ok(Projection::Items(items))
    }

    fn op(&mut self) -> Result<CompareOp, SqlError> {
        match self.peek() {
            Some(l) if l.kind == LexemeKind::Punct => {
                let op = CompareOp::from_symbol(&l.text).ok_or_else(|| self.unexpected("a comparison operator"))?;
                self.pos += 1;
                Ok(op)
            }
            _ => Err(self.unexpected("a comparison operator")),
        }
    }

    fn operand(&mut self, allow_column: bool) -> Result<Operand, SqlError> {
        let l = self.peek().cloned().ok_or(SqlError::UnexpectedEnd { expected: "a value" })?;
        match l.kind {
            LexemeKind::Number => {
                self.pos += 1;
                let v = if l.text.contains('.') {
                    Value::Float(l.text.parse().map_err(|_| SqlError::Unexpected {
                        found: l.text.clone(),
                        column: l.column,
                        expected: "a number",
                    })?)
                } else {
                    Value::Int(l.text.parse().map_err(|_| SqlError::Unexpected {
                        found: l.text.clone(),
                        column: l.column,
                        expected: "a 64-bit integer",
                    })?)
                };
                Ok(Operand::Value(v))
            }
            LexemeKind::Str => {
                self.pos += 1;
                Ok(Operand::Value(Value::Str(crate::lexer::unquote(&l.text))))
            }
            LexemeKind::Word if is_bucket_key(&l.text) => {
                self.pos += 1;
                Ok(Operand::Key(l.text))
            }
            LexemeKind::Word if allow_column => Ok(Operand::Column(self.column()?)),
            _ => Err(self.unexpected("a value")),
        }
    }

    fn comparison(&mut self) -> Result<Comparison, SqlError> {
        let left = self.column()?;
        let op = self.op()?;
        let right = self.operand(true)?;
        Ok(Comparison { left, op, right })
    }

    fn predicate(&mut self) -> Result<Predicate, SqlError> {
        let save = self.pos;
        let column = self.column()?;
        if self.peek_word("IN") {
            self.pos += 1;
            self.expect_punct("(")?;
            let subquery = self.subquery()?;
            self.expect_punct(")")?;
            return Ok(Predicate::In { column, subquery: Box::new(subquery) });
        }
        self.pos = save;
        Ok(Predicate::Compare(self.comparison()?))
    }

    fn conjunction<T>(&mut self, mut item: impl FnMut(&mut Self) -> Result<T, SqlError>) -> Result<Vec<T>, SqlError> {
        let mut out = vec![item(self)?];
        while self.peek_word("AND") {
            self.pos += 1;
            out.push(item(self)?);
        }
        Ok(out)
    }

    fn subquery(&mut self) -> Result<SubQuery, SqlError> {
        let (from, column) = if self.peek_word("SELECT") {
            self.pos += 1;
            let column = self.subquery_column()?;
            self.expect_word("FROM")?;
            (self.table_list()?, column)
        } else {
            self.expect_word("FROM")?;
            let from = self.table_list()?;
            self.expect_word("SELECT")?;
            (from, self.subquery_column()?)
        };
        let predicates = if self.peek_word("WHERE") {
            self.pos += 1;
            self.conjunction(|p| {
                let save = p.pos;
                p.column()?;
                if p.peek_word("IN") {
                    let l = p.peek().unwrap();
                    return Err(SqlError::Unsupported { construct: "nested subquery".into(), column: l.column });
                }
                p.pos = save;
                p.comparison()
            })?
        } else {
            Vec::new()
        };
        if !self.peek_punct(")") {
            return Err(self.unexpected("`)` closing the subquery"));
        }
        Ok(SubQuery { from, column, predicates })
    }

    fn subquery_column(&mut self) -> Result<ColumnRef, SqlError> {
        match self.select_item()? {
            SelectItem::Column(c) => Ok(c),
            SelectItem::Aggregate(..) => {
                let column = self.lexemes[self.pos - 1].column;
                Err(SqlError::Unsupported { construct: "aggregate in subquery".into(), column })
            }
        }
    }

    fn having_predicate(&mut self) -> Result<HavingPredicate, SqlError> {
        let left = self.select_item()?;
        let op = self.op()?;
        let right = self.operand(false)?;
        Ok(HavingPredicate { left, op, right })
    }

    fn query(&mut self) -> Result<Query, SqlError> {
        let mut from = None;
        let mut projection = None;
        let mut predicates = None;
        let mut having = None;
        let mut group_by = None;
        fn once<T>(slot: &mut Option<T>, name: &'static str, v: T) -> Result<(), SqlError> {
            if slot.is_some() {
                return Err(SqlError::DuplicateClause(name));
            }
            *slot = Some(v);
            Ok(())
        }
        loop {
            if self.peek().is_none() {
                break;
            }
            if self.peek_punct(";") {
                self.pos += 1;
                if self.peek().is_some() {
                    return Err(self.unexpected("end of query"));
                }
                break;
            }
            if self.peek_word("SELECT") {
                self.pos += 1;
                let p = self.projection()?;
                once(&mut projection, "SELECT", p)?;
            } else if self.peek_word("FROM") {
                self.pos += 1;
                let t = self.table_list()?;
                once(&mut from, "FROM", t)?;
            } else if self.peek_word("WHERE") {
                self.pos += 1;
                let p = self.conjunction(Self::predicate)?;
                once(&mut predicates, "WHERE", p)?;
            } else if self.peek_word("GROUP") {
                self.pos += 1;
                self.expect_word("BY")?;
                let mut cols = vec![self.column()?];
                while self.peek_punct(",") {
                    self.pos += 1;
                    cols.push(self.column()?);
                }
                once(&mut group_by, "GROUP BY", cols)?;
            } else if self.peek_word("HAVING") {
                self.pos += 1;
                let h = self.conjunction(Self::having_predicate)?;
                once(&mut having, "HAVING", h)?;
            } else {
                return Err(self.unexpected("a clause keyword"));
            }
        }
        Ok(Query {
            from: from.ok_or(SqlError::MissingClause("FROM"))?,
            projection: projection.ok_or(SqlError::MissingClause("SELECT"))?,
            predicates: predicates.unwrap_or_default(),
            having: having.unwrap_or_default(),
            group_by: group_by.unwrap_or_default(),
        })
    }
}

/// Parses a query in either standard (`SELECT ... FROM ...`) or canonical
/// (`FROM ... SELECT ...`) clause order. Keywords are case-insensitive.
pub fn parse_sql(text: &str) -> Result<Query, SqlError> {
    let lexemes = lex(text)?;
    SqlParser { lexemes, pos: 0 }.query()
}

fn operand_text(o: &Operand) -> String {
    match o {
        Operand::Value(v) => v.sql(),
        Operand::Key(k) => k.clone(),
        Operand::Column(c) => c.to_string(),
    }
}

fn item_tokens(item: &SelectItem, out: &mut Vec<String>) {
    match item {
        SelectItem::Column(c) => out.push(c.to_string()),
        SelectItem::Aggregate(a, c) => {
            out.extend([a.keyword().to_string(), "(".into(), c.to_string(), ")".into()]);
        }
    }
}

fn comparison_tokens(c: &Comparison, out: &mut Vec<String>) {
    out.extend([c.left.to_string(), c.op.symbol().to_string(), operand_text(&c.right)]);
}

fn join_list(out: &mut Vec<String>, items: impl IntoIterator<Item = String>) {
    for (i, s) in items.into_iter().enumerate() {
        if i > 0 {
            out.push(",".into());
        }
        out.push(s);
    }
}

impl Query {
    /// Tokens in canonical clause order: FROM, SELECT, WHERE, HAVING, GROUP BY.
    pub fn canonical_tokens(&self) -> Vec<String> {
        let mut out = vec!["FROM".to_string()];
        join_list(&mut out, self.from.iter().cloned());
        out.push("SELECT".into());
        match &self.projection {
            Projection::Star => out.push("*".into()),
            Projection::Items(items) => {
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(",".into());
                    }
                    item_tokens(item, &mut out);
                }
            }
        }
        for (i, p) in self.predicates.iter().enumerate() {
            out.push(if i == 0 { "WHERE" } else { "AND" }.into());
            match p {
                Predicate::Compare(c) => comparison_tokens(c, &mut out),
                Predicate::In { column, subquery } => {
                    out.extend([column.to_string(), "IN".into(), "(".into(), "FROM".into()]);
                    join_list(&mut out, subquery.from.iter().cloned());
                    out.extend(["SELECT".into(), subquery.column.to_string()]);
                    for (j, c) in subquery.predicates.iter().enumerate() {
                        out.push(if j == 0 { "WHERE" } else { "AND" }.into());
                        comparison_tokens(c, &mut out);
                    }
                    out.push(")".into());
                }
            }
        }
        for (i, h) in self.having.iter().enumerate() {
            out.push(if i == 0 { "HAVING" } else { "AND" }.into());
            item_tokens(&h.left, &mut out);
            out.extend([h.op.symbol().to_string(), operand_text(&h.right)]);
        }
        if !self.group_by.is_empty() {
            out.extend(["GROUP".into(), "BY".into()]);
            join_list(&mut out, self.group_by.iter().map(|c| c.to_string()));
        }
        out
    }

    pub fn to_canonical(&self) -> String {
        self.canonical_tokens().join(" ")
    }

    /// Standard clause order: SELECT, FROM, WHERE, GROUP BY, HAVING.
    pub fn to_executable(&self) -> String {
        fn item(i: &SelectItem) -> String {
            match i {
                SelectItem::Column(c) => c.to_string(),
                SelectItem::Aggregate(a, c) => format!("{}({c})", a.keyword()),
            }
        }
        fn cmp(c: &Comparison) -> String {
            format!("{} {} {}", c.left, c.op.symbol(), operand_text(&c.right))
        }
        let projection = match &self.projection {
            Projection::Star => "*".to_string(),
            Projection::Items(items) => items.iter().map(item).collect::<Vec<_>>().join(", "),
        };
        let mut s = format!("SELECT {projection} FROM {}", self.from.join(", "));
        if !self.predicates.is_empty() {
            let preds: Vec<String> = self
                .predicates
                .iter()
                .map(|p| match p {
                    Predicate::Compare(c) => cmp(c),
                    Predicate::In { column, subquery } => {
                        let mut sub = format!("SELECT {} FROM {}", subquery.column, subquery.from.join(", "));
                        if !subquery.predicates.is_empty() {
                            let sp: Vec<String> = subquery.predicates.iter().map(cmp).collect();
                            sub.push_str(&format!(" WHERE {}", sp.join(" AND ")));
                        }
                        format!("{column} IN ({sub})")
                    }
                })
                .collect();
            s.push_str(&format!(" WHERE {}", preds.join(" AND ")));
        }
        if !self.group_by.is_empty() {
            let cols: Vec<String> = self.group_by.iter().map(|c| c.to_string()).collect();
            s.push_str(&format!(" GROUP BY {}", cols.join(", ")));
        }
        if !self.having.is_empty() {
            let hs: Vec<String> = self
                .having
                .iter()
                .map(|h| format!("{} {} {}", item(&h.left), h.op.symbol(), operand_text(&h.right)))
                .collect();
            s.push_str(&format!(" HAVING {}", hs.join(" AND ")));
        }
        s
    }

    /// Every column reference, outer query first, in textual canonical order.
    pub fn column_refs(&self) -> Vec<&ColumnRef> {
        let mut out = Vec::new();
        if let Projection::Items(items) = &self.projection {
            out.extend(items.iter().map(SelectItem::column));
        }
        for p in &self.predicates {
            match p {
                Predicate::Compare(c) => {
                    out.push(&c.left);
                    if let Operand::Column(r) = &c.right {
                        out.push(r);
                    }
                }
                Predicate::In { column, subquery } => {
                    out.push(column);
                    out.push(&subquery.column);
                    for c in &subquery.predicates {
                        out.push(&c.left);
                        if let Operand::Column(r) = &c.right {
                            out.push(r);
                        }
                    }
                }
            }
        }
        out.extend(self.having.iter().map(|h| h.left.column()));
        out.extend(self.group_by.iter());
        out
    }

    pub fn aggregates(&self) -> Vec<AggFn> {
        let mut out = Vec::new();
        if let Projection::Items(items) = &self.projection {
            out.extend(items.iter().filter_map(|i| match i {
                SelectItem::Aggregate(a, _) => Some(*a),
                _ => None,
            }));
        }
        out.extend(self.having.iter().filter_map(|h| match h.left {
            SelectItem::Aggregate(a, _) => Some(a),
            _ => None,
        }));
        out
    }

    pub fn operators(&self) -> Vec<CompareOp> {
        let mut out = Vec::new();
        for p in &self.predicates {
            match p {
                Predicate::Compare(c) => out.push(c.op),
                Predicate::In { subquery, .. } => out.extend(subquery.predicates.iter().map(|c| c.op)),
            }
        }
        out.extend(self.having.iter().map(|h| h.op));
        out
    }

    pub fn subquery(&self) -> Option<&SubQuery> {
        self.predicates.iter().find_map(|p| match p {
            Predicate::In { subquery, .. } => Some(subquery.as_ref()),
            _ => None,
        })
    }

    /// True when any constant is still a bucket key.
    pub fn has_keys(&self) -> bool {
        let key = |o: &Operand| matches!(o, Operand::Key(_));
        self.predicates.iter().any(|p| match p {
            Predicate::Compare(c) => key(&c.right),
            Predicate::In { subquery, .. } => subquery.predicates.iter().any(|c| key(&c.right)),
        }) || self.having.iter().any(|h| key(&h.right))
    }

    pub fn has_aggregate_projection(&self) -> bool {
        matches!(&self.projection, Projection::Items(items) if items.iter().any(|i| matches!(i, SelectItem::Aggregate(..))))
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_canonical())
    }
}
