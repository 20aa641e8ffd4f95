//! Semantic state of a partial derivation and the semantic mask over productions.
//!
//! The state mirrors the derivation stack, tagging each pending nonterminal with
//! the role it plays (a `Column` in a SELECT list behaves differently from one in
//! a GROUP BY list). After every production the mask is recomputed. Column
//! membership (R1) is applied to all `Column` productions; the other rules only
//! constrain the productions of the current leftmost nonterminal, and several of
//! them look ahead so that a masked choice never leads into a dead end.
//!
//! Rules:
//! - R1: columns come from tables in the current FROM scope; no table twice in one FROM list.
//! - R2: string operands admit only `=`/`!=`; compared columns share a type class;
//!   a subquery selects a column compatible with the outer `IN` column.
//! - R3: SUM and AVG take numeric arguments.
//! - R4: plain columns next to aggregates force a GROUP BY covering every plain
//!   column of SELECT and HAVING; `*` never groups.
//! - R5: a bucket key is only legal for the domain of the operand it is compared to.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::grammar::{load_grammar, Grammar, GrammarError, ProductionId, SymbolRef};
use crate::parser::{ParseError, Parser};
use crate::preprocess::{BucketMap, Domain};
use crate::schema::{ColumnType, QualifiedColumn, Schema};
use crate::sql::{AggFn, CompareOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    R1,
    R2,
    R3,
    R4,
    R5,
}

impl Rule {
    pub const ALL: [Rule; 5] = [Rule::R1, Rule::R2, Rule::R3, Rule::R4, Rule::R5];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn parse(s: &str) -> Option<Rule> {
        Rule::ALL.into_iter().find(|r| r.to_string().eq_ignore_ascii_case(s))
    }

    pub fn describe(self) -> &'static str {
        match self {
            Rule::R1 => "column-table membership",
            Rule::R2 => "operand typing",
            Rule::R3 => "aggregate typing",
            Rule::R4 => "grouping",
            Rule::R5 => "value-column binding",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{}", *self as u8 + 1)
    }
}

/// Which semantic rules are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RuleSet(u8);

impl RuleSet {
    pub fn all() -> Self {
        RuleSet(0b11111)
    }

    pub fn none() -> Self {
        RuleSet(0)
    }

    pub fn contains(self, r: Rule) -> bool {
        self.0 & r.bit() != 0
    }

    pub fn without(self, r: Rule) -> Self {
        RuleSet(self.0 & !r.bit())
    }

    pub fn with(self, r: Rule) -> Self {
        RuleSet(self.0 | r.bit())
    }

    pub fn rules(self) -> Vec<Rule> {
        Rule::ALL.into_iter().filter(|r| self.contains(*r)).collect()
    }
}

impl Default for RuleSet {
    fn default() -> Self {
        RuleSet::all()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BindError {
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error("bucket map has no keys, so `Value` would have no productions")]
    NoBucketKeys,
    #[error("grammar table `{0}` is not in the schema")]
    UnknownTable(String),
    #[error("grammar column `{0}` is not in the schema")]
    UnknownColumn(String),
    #[error("grammar value `{0}` is not a key of the bucket map")]
    UnknownKey(String),
}

/// Appends schema- and bucket-derived `TableName`, `Column` and `Value` rules to
/// a base grammar and loads the result.
pub fn bind_grammar(base: &str, schema: &Schema, buckets: &BucketMap) -> Result<Grammar, BindError> {
    Ok(load_grammar(&bound_grammar_text(base, schema, buckets)?)?)
}

pub fn bound_grammar_text(base: &str, schema: &Schema, buckets: &BucketMap) -> Result<String, BindError> {
    let keys = buckets.keys();
    if keys.is_empty() {
        return Err(BindError::NoBucketKeys);
    }
    let alts = |items: Vec<String>| items.iter().map(|s| format!("'{s}'")).collect::<Vec<_>>().join("\n    | ");
    let mut text = base.trim_end().to_string();
    text.push_str("\n\n# generated from the schema and bucket map\n");
    text.push_str(&format!("TableName -> {}\n", alts(schema.tables().iter().map(|t| t.name.clone()).collect())));
    text.push_str(&format!("Column -> {}\n", alts(schema.columns().iter().map(|c| c.to_string()).collect())));
    text.push_str(&format!("Value -> {}\n", alts(keys.iter().map(|k| k.to_string()).collect())));
    Ok(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProdKind {
    Other,
    TableListLast,
    TableListMore,
    TableName(usize),
    ProjStar,
    ProjStarTail,
    ProjItems,
    ItemsLast,
    ItemsTail,
    ItemsMore,
    SelectColumn,
    SelectAgg,
    AggCall,
    Agg(AggFn),
    TailWhere,
    TailWhereGroup,
    TailGroup,
    PredValue,
    PredColumn,
    PredIn,
    SubQuery,
    GroupHaving,
    GroupOnly,
    HavingColumn,
    HavingAgg,
    GroupListLast,
    GroupListMore,
    Op(CompareOp),
    Column(usize),
    /// A bucket key; the payload is the bucket map's domain index.
    Value(usize),
}

#[derive(Debug, Clone)]
struct ColInfo {
    name: QualifiedColumn,
    table: usize,
    ty: ColumnType,
}

/// Immutable per-grammar semantic tables, shared by all episodes.
#[derive(Debug)]
pub struct SemanticContext {
    grammar: Arc<Grammar>,
    schema: Schema,
    buckets: Arc<BucketMap>,
    kinds: Vec<ProdKind>,
    columns: Vec<ColInfo>,
    column_prods: Vec<(ProductionId, usize)>,
    /// Bucket domain of each column, if any.
    col_domain: Vec<Option<usize>>,
    agg_domain: HashMap<(AggFn, usize), usize>,
}

impl SemanticContext {
    pub fn new(grammar: Arc<Grammar>, schema: Schema, buckets: Arc<BucketMap>) -> Result<Self, BindError> {
        let columns: Vec<ColInfo> = schema
            .tables()
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| {
                t.columns.iter().map(move |c| ColInfo { name: QualifiedColumn::new(&t.name, &c.name), table: ti, ty: c.ty })
            })
            .collect();
        let col_index: HashMap<String, usize> = columns.iter().enumerate().map(|(i, c)| (c.name.to_string(), i)).collect();

        let mut col_domain = vec![None; columns.len()];
        let mut agg_domain = HashMap::new();
        for (i, d) in buckets.domains().iter().enumerate() {
            let Some(&c) = col_index.get(&d.domain.column().to_string()) else { continue };
            match &d.domain {
                Domain::Column(_) => col_domain[c] = Some(i),
                Domain::Aggregate(a, _) => {
                    agg_domain.insert((*a, c), i);
                }
            }
        }

        let g = &grammar;
        let name = |s: &SymbolRef| g.symbol_name(*s).to_string();
        let mut kinds = Vec::with_capacity(g.num_productions());
        let mut column_prods = Vec::new();
        for p in g.productions() {
            let head = g.nonterminal_name(p.head);
            let body: Vec<String> = p.body.iter().map(name).collect();
            let body: Vec<&str> = body.iter().map(String::as_str).collect();
            let terminal = |i: usize| p.body.get(i).is_some_and(|s| s.is_terminal());
            let kind = match (head, body.as_slice()) {
                ("TableList", [_]) => ProdKind::TableListLast,
                ("TableList", [_, ",", _]) => ProdKind::TableListMore,
                ("TableName", [t]) if terminal(0) => {
                    let ti = schema.table_index(t).ok_or_else(|| BindError::UnknownTable(t.to_string()))?;
                    ProdKind::TableName(ti)
                }
                ("Projection", ["*"]) => ProdKind::ProjStar,
                ("Projection", ["*", "Tail"]) => ProdKind::ProjStarTail,
                ("Projection", ["Items"]) => ProdKind::ProjItems,
                ("Items", ["SelectItem"]) => ProdKind::ItemsLast,
                ("Items", ["SelectItem", "Tail"]) => ProdKind::ItemsTail,
                ("Items", ["SelectItem", ",", "Items"]) => ProdKind::ItemsMore,
                ("SelectItem", ["Column"]) => ProdKind::SelectColumn,
                ("SelectItem", ["AggCall"]) => ProdKind::SelectAgg,
                ("AggCall", _) => ProdKind::AggCall,
                ("Agg", [a]) => AggFn::from_keyword(a).map_or(ProdKind::Other, ProdKind::Agg),
                ("Tail", ["WHERE", "Preds"]) => ProdKind::TailWhere,
                ("Tail", ["WHERE", "Preds", "GroupPart"]) => ProdKind::TailWhereGroup,
                ("Tail", ["GroupPart"]) => ProdKind::TailGroup,
                ("Pred" | "SubPred", ["Column", "Op", "Value"]) => ProdKind::PredValue,
                ("Pred" | "SubPred", ["Column", "Op", "Column"]) => ProdKind::PredColumn,
                ("Pred", ["Column", "IN", "(", "SubQuery", ")"]) => ProdKind::PredIn,
                ("SubQuery", _) => ProdKind::SubQuery,
                ("GroupPart", ["HavingClause", "GroupClause"]) => ProdKind::GroupHaving,
                ("GroupPart", ["GroupClause"]) => ProdKind::GroupOnly,
                ("HavingPred", ["Column", "Op", "Value"]) => ProdKind::HavingColumn,
                ("HavingPred", ["AggCall", "Op", "Value"]) => ProdKind::HavingAgg,
                ("GroupList", ["Column"]) => ProdKind::GroupListLast,
                ("GroupList", ["Column", ",", "GroupList"]) => ProdKind::GroupListMore,
                ("Op", [o]) => CompareOp::from_symbol(o).map_or(ProdKind::Other, ProdKind::Op),
                ("Column", [c]) if terminal(0) => {
                    let ci = *col_index.get(*c).ok_or_else(|| BindError::UnknownColumn(c.to_string()))?;
                    column_prods.push((p.id, ci));
                    ProdKind::Column(ci)
                }
                ("Value", [k]) if terminal(0) => {
                    let (d, _) = buckets.locate(k).ok_or_else(|| BindError::UnknownKey(k.to_string()))?;
                    ProdKind::Value(d)
                }
                _ => ProdKind::Other,
            };
            kinds.push(kind);
        }
        Ok(SemanticContext {
            grammar,
            schema,
            buckets,
            kinds,
            columns,
            column_prods,
            col_domain,
            agg_domain,
        })
    }

    pub fn grammar(&self) -> &Arc<Grammar> {
        &self.grammar
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn buckets(&self) -> &Arc<BucketMap> {
        &self.buckets
    }

    pub fn kind(&self, p: ProductionId) -> ProdKind {
        self.kinds[p]
    }

    pub fn kinds(&self) -> &[ProdKind] {
        &self.kinds
    }

    pub fn column_name(&self, c: usize) -> &QualifiedColumn {
        &self.columns[c].name
    }

    pub fn column_type(&self, c: usize) -> ColumnType {
        self.columns[c].ty
    }

    fn num_tables(&self) -> usize {
        self.schema.tables().len()
    }

    fn table_columns(&self, t: usize) -> impl Iterator<Item = usize> + '_ {
        self.columns.iter().enumerate().filter(move |(_, c)| c.table == t).map(|(i, _)| i)
    }

    fn table_has_compatible(&self, t: usize, ty: ColumnType) -> bool {
        self.table_columns(t).any(|c| self.columns[c].ty.compatible(ty))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ColRole {
    SelectPlain,
    AggArg { having: bool },
    PredLeft { value: bool },
    HavingLeft,
    PredRight,
    InSelect,
    GroupBy { last: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ctx {
    None,
    TableName { last: bool },
    SelectItem { last_no_tail: bool },
    AggCall { having: bool },
    Agg { having: bool },
    Column(ColRole),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Frame {
    Sym(SymbolRef, Ctx),
    /// Marks the end of a subquery; popping it restores the enclosing scope.
    ScopeEnd,
}

#[derive(Debug, Clone, Default)]
struct Scope {
    tables: Vec<usize>,
    /// Type of the outer `IN` column when this scope is a subquery.
    in_type: Option<ColumnType>,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    ty: ColumnType,
    domain: Option<usize>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SemanticError {
    #[error("production {production} does not expand the leftmost nonterminal")]
    HeadMismatch { production: ProductionId },
    #[error("derivation is already complete")]
    Complete,
}

/// Episode-local semantic tracker producing the mask `m_s`.
#[derive(Debug, Clone)]
pub struct SemanticState {
    ctx: Arc<SemanticContext>,
    rules: RuleSet,
    stack: Vec<Frame>,
    scopes: Vec<Scope>,
    star: bool,
    has_plain: bool,
    has_agg: bool,
    required_group: BTreeSet<usize>,
    group_columns: BTreeSet<usize>,
    pending: Option<Pending>,
    last_left: Option<usize>,
    current_agg: Option<AggFn>,
    blame: Vec<u8>,
    mask: Vec<bool>,
    steps: usize,
    diagnostics: Vec<String>,
}

pub fn init_semantic_state(ctx: &Arc<SemanticContext>, rules: RuleSet) -> SemanticState {
    let p = ctx.grammar.num_productions();
    SemanticState {
        ctx: Arc::clone(ctx),
        rules,
        stack: vec![Frame::Sym(SymbolRef::Nonterminal(ctx.grammar.start()), Ctx::None)],
        scopes: vec![Scope::default()],
        star: false,
        has_plain: false,
        has_agg: false,
        required_group: BTreeSet::new(),
        group_columns: BTreeSet::new(),
        pending: None,
        last_left: None,
        current_agg: None,
        blame: vec![0; p],
        mask: vec![true; p],
        steps: 0,
        diagnostics: Vec::new(),
    }
}

impl SemanticState {
    pub fn context(&self) -> &Arc<SemanticContext> {
        &self.ctx
    }

    pub fn rules(&self) -> RuleSet {
        self.rules
    }

    /// The current mask `m_s`: `true` keeps a production.
    pub fn semantic_mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_allowed(&self, p: ProductionId) -> bool {
        self.mask[p]
    }

    /// Rules that currently exclude production `p`.
    pub fn violations(&self, p: ProductionId) -> Vec<Rule> {
        Rule::ALL.into_iter().filter(|r| self.blame[p] & r.bit() != 0).collect()
    }

    /// Relaxations applied to keep at least one candidate alive.
    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    /// Tables bound by the innermost FROM list.
    pub fn active_tables(&self) -> Vec<&str> {
        let scope = self.scopes.last().unwrap();
        scope.tables.iter().map(|&t| self.ctx.schema.tables()[t].name.as_str()).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.stack.is_empty()
    }

    fn top(&self) -> Option<(usize, Ctx)> {
        match self.stack.last() {
            Some(Frame::Sym(SymbolRef::Nonterminal(n), ctx)) => Some((*n, *ctx)),
            _ => None,
        }
    }

    /// Advances the state past production `p` and recomputes the mask.
    pub fn update(&mut self, p: ProductionId) -> Result<(), SemanticError> {
        let (head, ctx) = self.top().ok_or(SemanticError::Complete)?;
        let ctx_arc = Arc::clone(&self.ctx);
        let prod = ctx_arc.grammar.production(p);
        if prod.head != head {
            return Err(SemanticError::HeadMismatch { production: p });
        }
        self.stack.pop();
        let kind = self.ctx.kinds[p];
        self.apply_effects(kind, ctx);

        let mut children: Vec<Frame> = prod.body.iter().map(|s| Frame::Sym(*s, Ctx::None)).collect();
        let arity = children.len();
        let mut set = |i: usize, c: Ctx| {
            if let Frame::Sym(s, _) = children[i] {
                children[i] = Frame::Sym(s, c);
            }
        };
        match kind {
            ProdKind::TableListLast => set(0, Ctx::TableName { last: true }),
            ProdKind::TableListMore => set(0, Ctx::TableName { last: false }),
            ProdKind::ItemsLast => set(0, Ctx::SelectItem { last_no_tail: true }),
            ProdKind::ItemsTail | ProdKind::ItemsMore => set(0, Ctx::SelectItem { last_no_tail: false }),
            ProdKind::SelectColumn => set(0, Ctx::Column(ColRole::SelectPlain)),
            ProdKind::SelectAgg => set(0, Ctx::AggCall { having: false }),
            ProdKind::AggCall => {
                let having = matches!(ctx, Ctx::AggCall { having: true });
                set(0, Ctx::Agg { having });
                if arity > 2 {
                    set(2, Ctx::Column(ColRole::AggArg { having }));
                }
            }
            ProdKind::PredValue => set(0, Ctx::Column(ColRole::PredLeft { value: true })),
            ProdKind::PredColumn => {
                set(0, Ctx::Column(ColRole::PredLeft { value: false }));
                set(2, Ctx::Column(ColRole::PredRight));
            }
            ProdKind::PredIn => set(0, Ctx::Column(ColRole::PredLeft { value: false })),
            ProdKind::SubQuery => set(3, Ctx::Column(ColRole::InSelect)),
            ProdKind::HavingColumn => set(0, Ctx::Column(ColRole::HavingLeft)),
            ProdKind::HavingAgg => set(0, Ctx::AggCall { having: true }),
            ProdKind::GroupListLast => set(0, Ctx::Column(ColRole::GroupBy { last: true })),
            ProdKind::GroupListMore => set(0, Ctx::Column(ColRole::GroupBy { last: false })),
            _ => {}
        }
        if kind == ProdKind::PredIn {
            // Close the subquery scope right after SubQuery is fully derived.
            children.insert(4, Frame::ScopeEnd);
        }
        self.stack.extend(children.into_iter().rev());
        while let Some(f) = self.stack.last() {
            match f {
                Frame::Sym(SymbolRef::Nonterminal(_), _) => break,
                Frame::Sym(SymbolRef::Terminal(_), _) => {
                    self.stack.pop();
                }
                Frame::ScopeEnd => {
                    self.stack.pop();
                    self.scopes.pop();
                }
            }
        }
        self.steps += 1;
        self.recompute();
        Ok(())
    }

    fn apply_effects(&mut self, kind: ProdKind, ctx: Ctx) {
        match kind {
            ProdKind::TableName(t) => self.scopes.last_mut().unwrap().tables.push(t),
            ProdKind::ProjStar | ProdKind::ProjStarTail => self.star = true,
            ProdKind::SelectColumn => self.has_plain = true,
            ProdKind::SelectAgg => self.has_agg = true,
            ProdKind::Agg(a) => self.current_agg = Some(a),
            ProdKind::SubQuery => {
                let in_type = self.last_left.map(|c| self.ctx.columns[c].ty);
                self.scopes.push(Scope { tables: Vec::new(), in_type });
            }
            ProdKind::Value(_) => self.pending = None,
            ProdKind::Column(c) => {
                let ty = self.ctx.columns[c].ty;
                let Ctx::Column(role) = ctx else { return };
                match role {
                    ColRole::SelectPlain => {
                        self.required_group.insert(c);
                    }
                    ColRole::AggArg { having: true } => {
                        let agg = self.current_agg.unwrap_or(AggFn::Count);
                        let domain = self.ctx.agg_domain.get(&(agg, c)).copied();
                        let dty = Domain::Aggregate(agg, self.ctx.columns[c].name.clone()).value_type(ty);
                        self.pending = Some(Pending { ty: dty, domain });
                    }
                    ColRole::PredLeft { .. } => {
                        self.pending = Some(Pending { ty, domain: self.ctx.col_domain[c] });
                        self.last_left = Some(c);
                    }
                    ColRole::HavingLeft => {
                        self.pending = Some(Pending { ty, domain: self.ctx.col_domain[c] });
                        self.required_group.insert(c);
                    }
                    ColRole::PredRight => self.pending = None,
                    ColRole::GroupBy { .. } => {
                        self.group_columns.insert(c);
                    }
                    ColRole::AggArg { having: false } | ColRole::InSelect => {}
                }
            }
            _ => {}
        }
    }

    fn scope(&self) -> &Scope {
        self.scopes.last().unwrap()
    }

    /// Columns a rule may assume are reachable: the current scope under R1, else all.
    fn available_columns(&self) -> Vec<usize> {
        let scope = self.scope();
        if self.rules.contains(Rule::R1) && !scope.tables.is_empty() {
            scope.tables.iter().flat_map(|&t| self.ctx.table_columns(t)).collect()
        } else {
            (0..self.ctx.columns.len()).collect()
        }
    }

    fn scope_compatible(&self, tables: &[usize], ty: ColumnType) -> bool {
        tables.iter().any(|&t| self.ctx.table_has_compatible(t, ty))
    }

    /// Whether `k` more tables can be added to `tables` so that the subquery
    /// scope offers a column compatible with `ty`.
    fn subquery_feasible(&self, tables: &[usize], k: usize, ty: ColumnType) -> bool {
        let n = self.ctx.num_tables();
        let distinct = self.rules.contains(Rule::R1);
        if distinct && n < tables.len() + k {
            return false;
        }
        self.scope_compatible(tables, ty)
            || (0..n).any(|t| (!distinct || !tables.contains(&t)) && self.ctx.table_has_compatible(t, ty))
    }

    fn uncovered_group(&self) -> Vec<usize> {
        self.required_group.difference(&self.group_columns).copied().collect()
    }

    fn having_column_possible(&self, avail: &[usize]) -> bool {
        avail.iter().any(|&c| self.ctx.col_domain[c].is_some())
    }

    fn having_agg_possible(&self, avail: &[usize], agg: Option<AggFn>) -> bool {
        self.ctx.agg_domain.keys().any(|(a, c)| {
            agg.is_none_or(|x| x == *a)
                && avail.contains(c)
                && (!self.rules.contains(Rule::R3) || !a.needs_numeric() || self.ctx.columns[*c].ty.is_numeric())
        })
    }

    fn recompute(&mut self) {
        let ctx = Arc::clone(&self.ctx);
        let rules = self.rules;
        self.blame.iter_mut().for_each(|b| *b = 0);
        let mut blame = std::mem::take(&mut self.blame);
        let mut mark = |p: ProductionId, r: Rule| {
            if rules.contains(r) {
                blame[p] |= r.bit();
            }
        };

        let scope_tables = self.scope().tables.clone();
        if !scope_tables.is_empty() {
            for &(p, c) in &ctx.column_prods {
                if !scope_tables.contains(&ctx.columns[c].table) {
                    mark(p, Rule::R1);
                }
            }
        }

        if let Some((head, fctx)) = self.top() {
            let avail = self.available_columns();
            let in_type = self.scope().in_type;
            for &p in ctx.grammar.productions_of(head) {
                match ctx.kinds[p] {
                    ProdKind::TableListMore => {
                        if ctx.num_tables() < scope_tables.len() + 2 {
                            mark(p, Rule::R1);
                        }
                        if let Some(ty) = in_type.filter(|_| rules.contains(Rule::R2)) {
                            if !self.subquery_feasible(&scope_tables, 2, ty) {
                                mark(p, Rule::R2);
                            }
                        }
                    }
                    ProdKind::TableListLast => {
                        if let Some(ty) = in_type.filter(|_| rules.contains(Rule::R2)) {
                            if !self.subquery_feasible(&scope_tables, 1, ty) {
                                mark(p, Rule::R2);
                            }
                        }
                    }
                    ProdKind::TableName(t) => {
                        if scope_tables.contains(&t) {
                            mark(p, Rule::R1);
                        }
                        if let Some(ty) = in_type.filter(|_| rules.contains(Rule::R2)) {
                            let mut with = scope_tables.clone();
                            with.push(t);
                            let ok = match fctx {
                                Ctx::TableName { last: false } => self.subquery_feasible(&with, 1, ty),
                                _ => self.scope_compatible(&with, ty),
                            };
                            if !ok {
                                mark(p, Rule::R2);
                            }
                        }
                    }
                    ProdKind::ItemsLast => {
                        if self.has_plain && self.has_agg {
                            mark(p, Rule::R4);
                        }
                    }
                    ProdKind::SelectColumn => {
                        if fctx == (Ctx::SelectItem { last_no_tail: true }) && self.has_agg {
                            mark(p, Rule::R4);
                        }
                    }
                    ProdKind::SelectAgg => {
                        if fctx == (Ctx::SelectItem { last_no_tail: true }) && self.has_plain {
                            mark(p, Rule::R4);
                        }
                    }
                    ProdKind::TailWhere => {
                        if self.has_plain && self.has_agg {
                            mark(p, Rule::R4);
                        }
                    }
                    ProdKind::TailWhereGroup | ProdKind::TailGroup => {
                        if self.star {
                            mark(p, Rule::R4);
                        }
                    }
                    ProdKind::Agg(a) => {
                        if a.needs_numeric() && !avail.iter().any(|&c| ctx.columns[c].ty.is_numeric()) {
                            mark(p, Rule::R3);
                        }
                        if fctx == (Ctx::Agg { having: true }) && !self.having_agg_possible(&avail, Some(a)) {
                            mark(p, Rule::R5);
                        }
                    }
                    ProdKind::Column(c) => {
                        let ty = ctx.columns[c].ty;
                        match fctx {
                            Ctx::Column(ColRole::AggArg { having }) => {
                                let agg = self.current_agg.unwrap_or(AggFn::Count);
                                if agg.needs_numeric() && !ty.is_numeric() {
                                    mark(p, Rule::R3);
                                }
                                if having && !ctx.agg_domain.contains_key(&(agg, c)) {
                                    mark(p, Rule::R5);
                                }
                            }
                            Ctx::Column(ColRole::PredLeft { value: true } | ColRole::HavingLeft) => {
                                if ctx.col_domain[c].is_none() {
                                    mark(p, Rule::R5);
                                }
                            }
                            Ctx::Column(ColRole::PredRight) => {
                                if self.pending.is_some_and(|pd| !pd.ty.compatible(ty)) {
                                    mark(p, Rule::R2);
                                }
                            }
                            Ctx::Column(ColRole::InSelect) => {
                                if in_type.is_some_and(|it| !it.compatible(ty)) {
                                    mark(p, Rule::R2);
                                }
                            }
                            Ctx::Column(ColRole::GroupBy { last: true }) => {
                                if let [only] = self.uncovered_group().as_slice() {
                                    if *only != c {
                                        mark(p, Rule::R4);
                                    }
                                }
                            }
                            _ => {}
                        }
                    }
                    ProdKind::GroupListLast => {
                        if self.uncovered_group().len() >= 2 {
                            mark(p, Rule::R4);
                        }
                    }
                    ProdKind::Op(op) => {
                        if self.pending.is_some_and(|pd| pd.ty == ColumnType::String) && !op.is_equality() {
                            mark(p, Rule::R2);
                        }
                    }
                    ProdKind::Value(d) => {
                        if self.pending.and_then(|pd| pd.domain).is_some_and(|pd| pd != d) {
                            mark(p, Rule::R5);
                        }
                    }
                    ProdKind::PredValue => {
                        if !self.having_column_possible(&avail) {
                            mark(p, Rule::R5);
                        }
                    }
                    ProdKind::HavingColumn => {
                        if !self.having_column_possible(&avail) {
                            mark(p, Rule::R5);
                        }
                    }
                    ProdKind::HavingAgg => {
                        if !self.having_agg_possible(&avail, None) {
                            mark(p, Rule::R5);
                        }
                    }
                    ProdKind::GroupHaving => {
                        if !self.having_column_possible(&avail) && !self.having_agg_possible(&avail, None) {
                            mark(p, Rule::R5);
                        }
                    }
                    _ => {}
                }
            }

            // Progress guarantee: relax the latest rules until a candidate survives.
            let candidates = ctx.grammar.productions_of(head);
            if !candidates.iter().any(|&p| blame[p] == 0) {
                for r in Rule::ALL.into_iter().rev() {
                    if !candidates.iter().any(|&p| blame[p] & r.bit() != 0) {
                        continue;
                    }
                    for &p in candidates {
                        blame[p] &= !r.bit();
                    }
                    self.diagnostics.push(format!(
                        "step {}: relaxed {r} for `{}`",
                        self.steps,
                        ctx.grammar.nonterminal_name(head)
                    ));
                    log::debug!("{}", self.diagnostics.last().unwrap());
                    if candidates.iter().any(|&p| blame[p] == 0) {
                        break;
                    }
                }
            }
        }
        for (m, b) in self.mask.iter_mut().zip(&blame) {
            *m = *b == 0;
        }
        self.blame = blame;
    }
}

/// Outcome of checking one canonical query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityReport {
    pub syntactic: bool,
    pub semantic: bool,
    pub violations: Vec<Violation>,
    pub parse_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub step: usize,
    pub production: ProductionId,
    pub rules: Vec<Rule>,
}

/// Parses `canonical` and replays its production sequence through a fresh
/// semantic state with every rule active, recording masked selections.
pub fn validate_query(ctx: &Arc<SemanticContext>, parser: &Parser, canonical: &str) -> ValidityReport {
    let seq = match parser.sequence_of(canonical) {
        Ok(s) => s,
        Err(e) => {
            return ValidityReport {
                syntactic: false,
                semantic: false,
                violations: Vec::new(),
                parse_error: Some(e.to_string()),
            }
        }
    };
    validate_sequence(ctx, &seq.ids)
}

pub fn validate_sequence(ctx: &Arc<SemanticContext>, ids: &[ProductionId]) -> ValidityReport {
    let mut state = init_semantic_state(ctx, RuleSet::all());
    let mut violations = Vec::new();
    for (step, &p) in ids.iter().enumerate() {
        if !state.is_allowed(p) {
            violations.push(Violation { step, production: p, rules: state.violations(p) });
        }
        if state.update(p).is_err() {
            return ValidityReport {
                syntactic: false,
                semantic: false,
                violations,
                parse_error: Some(format!("production {p} at step {step} does not expand the leftmost nonterminal")),
            };
        }
    }
    let complete = state.is_complete();
    ValidityReport {
        syntactic: complete,
        semantic: complete && violations.is_empty(),
        violations,
        parse_error: (!complete).then(|| "sequence ends before the derivation completes".to_string()),
    }
}

/// The shipped grammar bound to a schema, with parser and semantic tables.
#[derive(Debug, Clone)]
pub struct BoundGrammar {
    pub grammar: Arc<Grammar>,
    pub parser: Parser,
    pub semantics: Arc<SemanticContext>,
}

#[derive(Debug, Error)]
pub enum BoundGrammarError {
    #[error(transparent)]
    Bind(#[from] BindError),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

impl BoundGrammar {
    pub fn new(base: &str, schema: &Schema, buckets: Arc<BucketMap>) -> Result<Self, BoundGrammarError> {
        let grammar = Arc::new(bind_grammar(base, schema, &buckets)?);
        let parser = Parser::new(Arc::clone(&grammar)).map_err(ParseError::from)?;
        let semantics = Arc::new(SemanticContext::new(Arc::clone(&grammar), schema.clone(), buckets)?);
        Ok(BoundGrammar { grammar, parser, semantics })
    }

    pub fn validate(&self, canonical: &str) -> ValidityReport {
        validate_query(&self.semantics, &self.parser, canonical)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::DEFAULT_SQL_GRAMMAR;
    use crate::preprocess::preprocess_workload;
    use crate::schema::parse_schema;

    pub(crate) fn toy() -> (BoundGrammar, Vec<String>) {
        let schema = parse_schema(
            "title.id:int\ntitle.name:string\ntitle.year:int\nstudio.id:int\nstudio.name:string\nstudio.rating:float\n",
        )
        .unwrap();
        let raw = [
            "SELECT * FROM title WHERE title.id = 1",
            "SELECT * FROM title WHERE title.name = 'a'",
            "SELECT * FROM title WHERE title.year > 1990",
            "SELECT * FROM studio WHERE studio.rating < 2.5",
            "SELECT title.name, COUNT(title.id) FROM title GROUP BY title.name HAVING COUNT(title.id) > 2",
        ];
        let (canon, map) = preprocess_workload(&raw, &schema, 4).unwrap();
        let bg = BoundGrammar::new(DEFAULT_SQL_GRAMMAR, &schema, Arc::new(map)).unwrap();
        (bg, canon.iter().map(|q| q.to_canonical()).collect())
    }

    fn replay(bg: &BoundGrammar, sql: &str, upto: usize) -> SemanticState {
        let seq = bg.parser.sequence_of(sql).unwrap();
        let mut s = init_semantic_state(&bg.semantics, RuleSet::all());
        for &p in &seq.ids[..upto] {
            s.update(p).unwrap();
        }
        s
    }

    #[test]
    fn shipped_grammar_is_lalr_after_binding() {
        let (bg, canon) = toy();
        for q in &canon {
            let r = bg.validate(q);
            assert!(r.syntactic && r.semantic, "{q}: {r:?}");
        }
    }

    #[test]
    fn fresh_mask_is_all_ones() {
        let (bg, _) = toy();
        let s = init_semantic_state(&bg.semantics, RuleSet::all());
        assert!(s.semantic_mask().iter().all(|b| *b));
        assert!(s.active_tables().is_empty());
    }

    #[test]
    fn from_title_masks_exactly_foreign_columns() {
        let (bg, _) = toy();
        // Start, TableListLast, TableName(title)
        let s = replay(&bg, "FROM title SELECT *", 3);
        assert_eq!(s.active_tables(), vec!["title"]);
        let g = &bg.grammar;
        for p in 0..g.num_productions() {
            let expect_masked = matches!(bg.semantics.kind(p), ProdKind::Column(c) if bg.semantics.column_name(c).table != "title");
            assert_eq!(!s.is_allowed(p), expect_masked, "{}", g.render_production(p));
        }
    }

    #[test]
    fn string_operand_restricts_operators() {
        let (bg, canon) = toy();
        let q = &canon[1]; // title.name = key
        let seq = bg.parser.sequence_of(q).unwrap();
        let op_step = seq.ids.iter().position(|&p| matches!(bg.semantics.kind(p), ProdKind::Op(_))).unwrap();
        let s = replay(&bg, q, op_step);
        for p in 0..bg.grammar.num_productions() {
            if let ProdKind::Op(op) = bg.semantics.kind(p) {
                assert_eq!(s.is_allowed(p), op.is_equality(), "{op:?}");
            }
        }
    }

    #[test]
    fn aggregate_on_string_column_masks_sum_avg() {
        let schema = parse_schema("t.s:string\nt.n:int\n").unwrap();
        let (_, map) = preprocess_workload(&["SELECT * FROM t WHERE t.n = 1"], &schema, 4).unwrap();
        let bg = BoundGrammar::new(DEFAULT_SQL_GRAMMAR, &schema, Arc::new(map)).unwrap();
        // SUM over a string column is rejected by R3.
        let r = bg.validate("FROM t SELECT SUM ( t.s )");
        assert!(r.syntactic && !r.semantic);
        assert_eq!(r.violations[0].rules, vec![Rule::R3]);
        // A string-only scope masks SUM and AVG before the argument is chosen.
        let schema = parse_schema("t.s:string\nu.n:int\n").unwrap();
        let (_, map) = preprocess_workload(&["SELECT * FROM u WHERE u.n = 1"], &schema, 4).unwrap();
        let bg = BoundGrammar::new(DEFAULT_SQL_GRAMMAR, &schema, Arc::new(map)).unwrap();
        let s = replay(&bg, "FROM t SELECT COUNT ( t.s )", 7);
        for p in 0..bg.grammar.num_productions() {
            if let ProdKind::Agg(a) = bg.semantics.kind(p) {
                assert_eq!(s.is_allowed(p), !a.needs_numeric(), "{a:?}");
            }
        }
    }

    #[test]
    fn mixed_projection_forces_group_by() {
        let (bg, _) = toy();
        let q = "FROM title SELECT title.name , COUNT ( title.id ) GROUP BY title.name";
        assert!(bg.validate(q).semantic);
        let seq = bg.parser.sequence_of(q).unwrap();
        let tail_step = seq.ids.iter().position(|&p| bg.semantics.kind(p) == ProdKind::TailGroup).unwrap();
        let s = replay(&bg, q, tail_step);
        for p in 0..bg.grammar.num_productions() {
            if bg.semantics.kind(p) == ProdKind::TailWhere {
                assert!(!s.is_allowed(p));
                assert_eq!(s.violations(p), vec![Rule::R4]);
            }
        }
        let r = bg.validate("FROM title SELECT title.name , COUNT ( title.id ) GROUP BY title.id");
        assert!(!r.semantic);
        assert_eq!(r.violations[0].rules, vec![Rule::R4]);
    }

    #[test]
    fn foreign_column_is_r1() {
        let (bg, canon) = toy();
        let key = canon[1].rsplit(' ').next().unwrap();
        let r = bg.validate(&format!("FROM title SELECT studio.name WHERE title.name = {key}"));
        assert!(r.syntactic && !r.semantic);
        assert_eq!(r.violations[0].rules, vec![Rule::R1]);
        let r = bg.validate("SELECT **");
        assert!(!r.syntactic);
    }

    #[test]
    fn key_of_other_column_is_r5() {
        let (bg, canon) = toy();
        let id_key = canon[0].rsplit(' ').next().unwrap();
        let r = bg.validate(&format!("FROM title SELECT * WHERE title.year = {id_key}"));
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].rules, vec![Rule::R5]);
    }

    #[test]
    fn subquery_scope_is_restored() {
        let (bg, canon) = toy();
        let id_key = canon[0].rsplit(' ').next().unwrap();
        let q = format!("FROM title SELECT title.name WHERE title.id IN ( FROM studio SELECT studio.id ) AND title.id = {id_key}");
        let r = bg.validate(&q);
        assert!(r.semantic, "{r:?}");
        let bad = "FROM title SELECT title.name WHERE title.id IN ( FROM studio SELECT studio.name )";
        assert_eq!(bg.validate(bad).violations[0].rules, vec![Rule::R2]);
    }

    #[test]
    fn rule_names() {
        assert_eq!(Rule::parse("r3"), Some(Rule::R3));
        assert_eq!(Rule::R5.to_string(), "R5");
        assert_eq!(RuleSet::all().without(Rule::R2).rules(), vec![Rule::R1, Rule::R3, Rule::R4, Rule::R5]);
    }
}
