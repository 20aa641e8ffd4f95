//! LALR(1) table construction by lookahead propagation over the LR(0) automaton.
//!
//! The grammar is augmented with `S' -> Start` and an end marker. Conflicts are
//! reported when the table is built, never at parse time.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use crate::grammar::{Grammar, SymbolRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Shift(usize),
    Reduce(usize),
    Accept,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conflict {
    pub state: usize,
    pub lookahead: String,
    pub actions: Vec<String>,
}

impl fmt::Display for Conflict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "state {} on {}: {}", self.state, self.lookahead, self.actions.join(" vs "))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("grammar is not LALR(1): {} conflict(s); first: {}", .0.len(), .0[0])]
pub struct ConflictReport(pub Vec<Conflict>);

/// Dense action/goto tables. Terminal column `num_terminals` is the end marker.
#[derive(Debug, Clone)]
pub struct ParseTable {
    actions: Vec<Vec<Action>>,
    gotos: Vec<Vec<Option<usize>>>,
    num_terminals: usize,
}

impl ParseTable {
    pub fn action(&self, state: usize, terminal: Option<usize>) -> Action {
        self.actions[state][terminal.unwrap_or(self.num_terminals)]
    }

    pub fn goto(&self, state: usize, nonterminal: usize) -> Option<usize> {
        self.gotos[state][nonterminal]
    }

    pub fn num_states(&self) -> usize {
        self.actions.len()
    }

    /// Terminals with a non-error action in `state`; `None` stands for end of input.
    pub fn expected(&self, state: usize) -> Vec<Option<usize>> {
        self.actions[state]
            .iter()
            .enumerate()
            .filter(|(_, a)| **a != Action::Error)
            .map(|(t, _)| if t == self.num_terminals { None } else { Some(t) })
            .collect()
    }
}

type Item = (usize, usize); // (augmented production, dot)

struct Augmented {
    bodies: Vec<Vec<SymbolRef>>,
    by_head: Vec<Vec<usize>>,
    accept: usize,
    num_terminals: usize,
    first: Vec<Vec<bool>>,
}

impl Augmented {
    fn new(g: &Grammar) -> Self {
        let t = g.num_terminals();
        let mut bodies: Vec<Vec<SymbolRef>> = g.productions().iter().map(|p| p.body.clone()).collect();
        let mut by_head: Vec<Vec<usize>> =
            (0..g.num_nonterminals()).map(|n| g.productions_of(n).to_vec()).collect();
        let accept = bodies.len();
        bodies.push(vec![SymbolRef::Nonterminal(g.start())]);
        by_head.push(vec![accept]);

        // No empty bodies, so FIRST only looks at the leading symbol.
        let mut first = vec![vec![false; t]; g.num_nonterminals()];
        let mut changed = true;
        while changed {
            changed = false;
            for p in g.productions() {
                match p.body[0] {
                    SymbolRef::Terminal(a) => {
                        if !first[p.head][a] {
                            first[p.head][a] = true;
                            changed = true;
                        }
                    }
                    SymbolRef::Nonterminal(b) => {
                        for a in 0..t {
                            if first[b][a] && !first[p.head][a] {
                                first[p.head][a] = true;
                                changed = true;
                            }
                        }
                    }
                }
            }
        }
        Augmented { bodies, by_head, accept, num_terminals: t, first }
    }

    fn after_dot(&self, (p, d): Item) -> Option<SymbolRef> {
        self.bodies[p].get(d).copied()
    }

    fn closure(&self, kernel: &BTreeSet<Item>) -> BTreeSet<Item> {
        let mut set = kernel.clone();
        let mut work: Vec<Item> = kernel.iter().copied().collect();
        while let Some(item) = work.pop() {
            if let Some(SymbolRef::Nonterminal(b)) = self.after_dot(item) {
                for &q in &self.by_head[b] {
                    if set.insert((q, 0)) {
                        work.push((q, 0));
                    }
                }
            }
        }
        set
    }

    /// LR(1) closure of a single item with lookahead set `la` (the extra
    /// column `num_terminals + 1` is the propagation marker).
    fn closure_lr1(&self, item: Item, la: Vec<bool>) -> HashMap<Item, Vec<bool>> {
        let mut set: HashMap<Item, Vec<bool>> = HashMap::new();
        set.insert(item, la);
        let mut work = vec![item];
        while let Some(it) = work.pop() {
            let Some(SymbolRef::Nonterminal(b)) = self.after_dot(it) else { continue };
            let mut follow = vec![false; self.num_terminals + 2];
            match self.after_dot((it.0, it.1 + 1)) {
                Some(SymbolRef::Terminal(a)) => follow[a] = true,
                Some(SymbolRef::Nonterminal(c)) => {
                    for (a, f) in self.first[c].iter().enumerate() {
                        follow[a] = *f;
                    }
                }
                None => follow.clone_from(&set[&it]),
            }
            for &q in &self.by_head[b] {
                let entry = set.entry((q, 0)).or_insert_with(|| vec![false; self.num_terminals + 2]);
                let mut grew = false;
                for (e, f) in entry.iter_mut().zip(&follow) {
                    if *f && !*e {
                        *e = true;
                        grew = true;
                    }
                }
                if grew {
                    work.push((q, 0));
                }
            }
        }
        set
    }
}

/// Builds LALR(1) tables for `g`.
pub fn build_table(g: &Grammar) -> Result<ParseTable, ConflictReport> {
    let aug = Augmented::new(g);
    let t = aug.num_terminals;
    let end = t;
    let marker = t + 1;

    // LR(0) automaton over kernels.
    let mut kernels: Vec<BTreeSet<Item>> = vec![BTreeSet::from([(aug.accept, 0)])];
    let mut index: HashMap<BTreeSet<Item>, usize> = HashMap::from([(kernels[0].clone(), 0)]);
    let mut transitions: Vec<Vec<(SymbolRef, usize)>> = Vec::new();
    let mut s = 0;
    while s < kernels.len() {
        let closed = aug.closure(&kernels[s]);
        let mut moves: Vec<(SymbolRef, BTreeSet<Item>)> = Vec::new();
        for &item in &closed {
            if let Some(x) = aug.after_dot(item) {
                match moves.iter_mut().find(|(y, _)| *y == x) {
                    Some((_, k)) => {
                        k.insert((item.0, item.1 + 1));
                    }
                    None => moves.push((x, BTreeSet::from([(item.0, item.1 + 1)]))),
                }
            }
        }
        let mut out = Vec::with_capacity(moves.len());
        for (x, k) in moves {
            let id = match index.get(&k) {
                Some(&id) => id,
                None => {
                    kernels.push(k.clone());
                    index.insert(k, kernels.len() - 1);
                    kernels.len() - 1
                }
            };
            out.push((x, id));
        }
        transitions.push(out);
        s += 1;
    }

    // Lookahead determination: spontaneous generation plus propagation links.
    let mut la: Vec<HashMap<Item, Vec<bool>>> = kernels
        .iter()
        .map(|k| k.iter().map(|&i| (i, vec![false; t + 2])).collect())
        .collect();
    la[0].get_mut(&(aug.accept, 0)).unwrap()[end] = true;
    let mut links: Vec<((usize, Item), (usize, Item))> = Vec::new();
    for (s, kernel) in kernels.iter().enumerate() {
        for &k in kernel {
            let mut probe = vec![false; t + 2];
            probe[marker] = true;
            for (item, lookahead) in aug.closure_lr1(k, probe) {
                let Some(x) = aug.after_dot(item) else { continue };
                let target = transitions[s].iter().find(|(y, _)| *y == x).unwrap().1;
                let moved = (item.0, item.1 + 1);
                let slot = la[target].get_mut(&moved).unwrap();
                for a in 0..=end {
                    if lookahead[a] {
                        slot[a] = true;
                    }
                }
                if lookahead[marker] {
                    links.push(((s, k), (target, moved)));
                }
            }
        }
    }
    let mut changed = true;
    while changed {
        changed = false;
        for &((fs, fi), (ts, ti)) in &links {
            let from = la[fs][&fi].clone();
            let to = la[ts].get_mut(&ti).unwrap();
            for a in 0..=end {
                if from[a] && !to[a] {
                    to[a] = true;
                    changed = true;
                }
            }
        }
    }

    // Tables.
    let n = kernels.len();
    let mut actions = vec![vec![Action::Error; t + 1]; n];
    let mut gotos = vec![vec![None; g.num_nonterminals()]; n];
    let mut conflicts = Vec::new();
    let describe = |a: Action| match a {
        Action::Shift(s) => format!("shift {s}"),
        Action::Reduce(p) => format!("reduce `{}`", g.render_production(p)),
        Action::Accept => "accept".to_string(),
        Action::Error => "error".to_string(),
    };
    for s in 0..n {
        for &(x, target) in &transitions[s] {
            match x {
                SymbolRef::Terminal(a) => actions[s][a] = Action::Shift(target),
                SymbolRef::Nonterminal(b) => gotos[s][b] = Some(target),
            }
        }
        let mut completed: Vec<&Item> = kernels[s].iter().filter(|i| aug.after_dot(**i).is_none()).collect();
        completed.sort();
        for item in completed {
            let new = if item.0 == aug.accept { Action::Accept } else { Action::Reduce(item.0) };
            for a in 0..=end {
                if !la[s][item][a] {
                    continue;
                }
                let old = actions[s][a];
                if old == Action::Error {
                    actions[s][a] = new;
                } else if old != new {
                    let lookahead = if a == end { "end of input".to_string() } else { format!("'{}'", g.terminal_name(a)) };
                    conflicts.push(Conflict { state: s, lookahead, actions: vec![describe(old), describe(new)] });
                }
            }
        }
    }
    if conflicts.is_empty() {
        Ok(ParseTable { actions, gotos, num_terminals: t })
    } else {
        Err(ConflictReport(conflicts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::load_grammar;

    #[test]
    fn ambiguous_grammar_reports_conflict() {
        let g = load_grammar("%start E\nE -> E '+' E | 'x'\n").unwrap();
        let err = build_table(&g).unwrap_err();
        assert!(err.0.iter().any(|c| c.lookahead == "'+'"));
    }

    #[test]
    fn lalr_but_not_slr() {
        // Classic grammar that SLR(1) rejects and LALR(1) accepts.
        let g = load_grammar(
            "%start S\nS -> L '=' R | R\nL -> '*' R | 'id'\nR -> L\n",
        )
        .unwrap();
        assert!(build_table(&g).is_ok());
    }

    #[test]
    fn left_recursion_is_fine() {
        let g = load_grammar("%start E\nE -> E '+' T | T\nT -> 'x'\n").unwrap();
        let table = build_table(&g).unwrap();
        assert!(table.num_states() > 3);
        assert_eq!(table.expected(0), vec![Some(g.terminal("x").unwrap())]);
    }
}
