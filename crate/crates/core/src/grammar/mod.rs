//! Grammar representation: rules of select/join nodes over byte-level
//! terminals, plus the `.g` text format parser.
//!
//! A grammar is normalized at construction: sugared constructs (`?`, `*`,
//! `+`, groups, quoted strings, ranges) are reduced to select/join trees,
//! the nullable set is computed, and every rule is checked to derive at
//! least one finite string.

mod parse;

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// Index of a rule inside its owning [`Grammar`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RuleId(pub(crate) u32);

impl RuleId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// One node of a normalized grammar tree.
///
/// After normalization the shape is restricted: a `Join` contains only
/// atoms (`Byte`, `ByteRange`, `Ref`), and a `Select` contains atoms,
/// joins, or `Epsilon` — never another `Select`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GrammarNode {
    Select(Vec<GrammarNode>),
    Join(Vec<GrammarNode>),
    Byte(u8),
    ByteRange(u8, u8),
    Ref(RuleId),
    Epsilon,
}

/// Flattened alternative symbol used by the recognizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Sym {
    Byte(u8),
    Range(u8, u8),
    Rule(RuleId),
}

impl Sym {
    pub(crate) fn matches(self, b: u8) -> bool {
        match self {
            Sym::Byte(x) => x == b,
            Sym::Range(lo, hi) => lo <= b && b <= hi,
            Sym::Rule(_) => false,
        }
    }
}

#[derive(Debug, Clone)]
struct RuleDef {
    name: String,
    node: GrammarNode,
    /// Alternatives as flat symbol sequences; an empty sequence is epsilon.
    alts: Vec<Vec<Sym>>,
    nullable: bool,
}

/// An immutable, normalized context-free grammar with byte terminals.
#[derive(Debug, Clone)]
pub struct Grammar {
    rules: Vec<RuleDef>,
    by_name: HashMap<String, RuleId>,
    start: RuleId,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GrammarError {
    #[error("syntax error at line {line}, column {col}: {message}")]
    Syntax {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("reference to unknown rule `{0}`")]
    UnknownRule(String),
    #[error("grammar has no `start` rule")]
    MissingStart,
    #[error("rule `{0}` cannot derive any finite string")]
    UselessRule(String),
}

impl Grammar {
    /// Parse the textual grammar format into a normalized grammar.
    pub fn parse(source: &str) -> Result<Grammar, GrammarError> {
        parse::parse_grammar(source)
    }

    pub fn start(&self) -> RuleId {
        self.start
    }

    pub fn rule_count(&self) -> usize {
        self.rules.len()
    }

    pub fn rule_id(&self, name: &str) -> Option<RuleId> {
        self.by_name.get(name).copied()
    }

    pub fn rule_name(&self, id: RuleId) -> &str {
        &self.rules[id.index()].name
    }

    pub fn node(&self, id: RuleId) -> &GrammarNode {
        &self.rules[id.index()].node
    }

    pub fn is_nullable(&self, id: RuleId) -> bool {
        self.rules[id.index()].nullable
    }

    /// Names of all rules deriving the empty string, sorted.
    pub fn nullable_rule_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self
            .rules
            .iter()
            .filter(|r| r.nullable)
            .map(|r| r.name.as_str())
            .collect();
        names.sort_unstable();
        names
    }

    pub fn rule_ids(&self) -> impl Iterator<Item = RuleId> + '_ {
        (0..self.rules.len() as u32).map(RuleId)
    }

    pub(crate) fn alts(&self, id: RuleId) -> &[Vec<Sym>] {
        &self.rules[id.index()].alts
    }

    /// Every byte that can appear in a sentence of the grammar.
    pub fn terminal_alphabet(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for rule in &self.rules {
            for alt in &rule.alts {
                for sym in alt {
                    match *sym {
                        Sym::Byte(b) => seen[b as usize] = true,
                        Sym::Range(lo, hi) => {
                            for b in lo..=hi {
                                seen[b as usize] = true;
                            }
                        }
                        Sym::Rule(_) => {}
                    }
                }
            }
        }
        (0..=255u8).filter(|&b| seen[b as usize]).collect()
    }

    /// Build a grammar from already-normalized rule bodies. Used by the
    /// format parser; callers must hand in normal-form nodes.
    pub(crate) fn from_normalized(
        names: Vec<String>,
        bodies: Vec<GrammarNode>,
    ) -> Result<Grammar, GrammarError> {
        debug_assert_eq!(names.len(), bodies.len());
        let mut by_name = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            by_name.insert(name.clone(), RuleId(i as u32));
        }
        let start = *by_name.get("start").ok_or(GrammarError::MissingStart)?;

        let mut rules: Vec<RuleDef> = names
            .into_iter()
            .zip(bodies)
            .map(|(name, node)| {
                let alts = compile_alts(&node);
                RuleDef {
                    name,
                    node,
                    alts,
                    nullable: false,
                }
            })
            .collect();

        if let Some(bad) = first_unproductive(&rules, start) {
            return Err(GrammarError::UselessRule(rules[bad.index()].name.clone()));
        }
        let nullable = compute_nullable(&rules);
        for (i, rule) in rules.iter_mut().enumerate() {
            rule.nullable = nullable[i];
        }

        Ok(Grammar {
            rules,
            by_name,
            start,
        })
    }
}

impl fmt::Display for Grammar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for id in self.rule_ids() {
            writeln!(f, "{}: {:?}", self.rule_name(id), self.node(id))?;
        }
        Ok(())
    }
}

fn compile_alts(node: &GrammarNode) -> Vec<Vec<Sym>> {
    match node {
        GrammarNode::Select(children) => children.iter().map(compile_seq).collect(),
        other => vec![compile_seq(other)],
    }
}

fn compile_seq(node: &GrammarNode) -> Vec<Sym> {
    match node {
        GrammarNode::Epsilon => Vec::new(),
        GrammarNode::Byte(b) => vec![Sym::Byte(*b)],
        GrammarNode::ByteRange(lo, hi) => vec![Sym::Range(*lo, *hi)],
        GrammarNode::Ref(id) => vec![Sym::Rule(*id)],
        GrammarNode::Join(children) => children
            .iter()
            .map(|c| match c {
                GrammarNode::Byte(b) => Sym::Byte(*b),
                GrammarNode::ByteRange(lo, hi) => Sym::Range(*lo, *hi),
                GrammarNode::Ref(id) => Sym::Rule(*id),
                _ => unreachable!("join children are atoms after normalization"),
            })
            .collect(),
        GrammarNode::Select(_) => unreachable!("select cannot nest after normalization"),
    }
}

/// Least fixpoint: a rule is nullable iff some alternative consists
/// entirely of nullable rule references (or is empty).
fn compute_nullable(rules: &[RuleDef]) -> Vec<bool> {
    let mut nullable = vec![false; rules.len()];
    loop {
        let mut changed = false;
        for (i, rule) in rules.iter().enumerate() {
            if nullable[i] {
                continue;
            }
            let derives_empty = rule.alts.iter().any(|alt| {
                alt.iter().all(|sym| match sym {
                    Sym::Rule(r) => nullable[r.index()],
                    _ => false,
                })
            });
            if derives_empty {
                nullable[i] = true;
                changed = true;
            }
        }
        if !changed {
            return nullable;
        }
    }
}

/// Returns a rule that derives no finite string, if any. The start rule
/// is usually unproductive only by inheritance, so prefer naming another
/// rule when one exists.
fn first_unproductive(rules: &[RuleDef], start: RuleId) -> Option<RuleId> {
    let mut productive = vec![false; rules.len()];
    loop {
        let mut changed = false;
        for (i, rule) in rules.iter().enumerate() {
            if productive[i] {
                continue;
            }
            let ok = rule.alts.iter().any(|alt| {
                alt.iter().all(|sym| match sym {
                    Sym::Rule(r) => productive[r.index()],
                    _ => true,
                })
            });
            if ok {
                productive[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let bad: Vec<RuleId> = (0..rules.len())
        .filter(|&i| !productive[i])
        .map(|i| RuleId(i as u32))
        .collect();
    bad.iter().find(|&&id| id != start).or(bad.first()).copied()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn byte(b: u8) -> GrammarNode {
        GrammarNode::Byte(b)
    }

    #[test]
    fn toy_grammar_tree_shape() {
        let g = Grammar::parse("start: \"a\" | \"a\" \"b\"\n").unwrap();
        let expected = GrammarNode::Select(vec![
            byte(b'a'),
            GrammarNode::Join(vec![byte(b'a'), byte(b'b')]),
        ]);
        assert_eq!(g.node(g.start()), &expected);
        assert!(g.nullable_rule_names().is_empty());
    }

    #[test]
    fn single_terminal_collapses() {
        let g = Grammar::parse("start: \"x\"\n").unwrap();
        assert_eq!(g.node(g.start()), &byte(b'x'));
        assert!(g.nullable_rule_names().is_empty());
    }

    #[test]
    fn plus_desugars_right_recursive() {
        let g = Grammar::parse("start: (\"0\"..\"9\")+\n").unwrap();
        let rep = g.rule_id("__rep0").expect("fresh repetition rule");
        assert_eq!(
            g.node(g.start()),
            &GrammarNode::Join(vec![GrammarNode::ByteRange(b'0', b'9'), GrammarNode::Ref(rep)])
        );
        assert_eq!(
            g.node(rep),
            &GrammarNode::Select(vec![
                GrammarNode::Epsilon,
                GrammarNode::Join(vec![GrammarNode::ByteRange(b'0', b'9'), GrammarNode::Ref(rep)]),
            ])
        );
    }

    #[test]
    fn string_desugars_to_byte_join() {
        let g = Grammar::parse("start: \"ab\"\n").unwrap();
        assert_eq!(
            g.node(g.start()),
            &GrammarNode::Join(vec![byte(b'a'), byte(b'b')])
        );
    }

    #[test]
    fn optional_desugars_to_select_epsilon() {
        let g = Grammar::parse("start: \"a\"?\n").unwrap();
        assert_eq!(
            g.node(g.start()),
            &GrammarNode::Select(vec![byte(b'a'), GrammarNode::Epsilon])
        );
        assert_eq!(g.nullable_rule_names(), vec!["start"]);
    }

    #[test]
    fn star_desugars_to_fresh_rule() {
        let g = Grammar::parse("start: \"a\"*\n").unwrap();
        let rep = g.rule_id("__rep0").unwrap();
        assert_eq!(g.node(g.start()), &GrammarNode::Ref(rep));
        assert_eq!(
            g.node(rep),
            &GrammarNode::Select(vec![
                GrammarNode::Epsilon,
                GrammarNode::Join(vec![byte(b'a'), GrammarNode::Ref(rep)]),
            ])
        );
        assert_eq!(g.nullable_rule_names(), vec!["__rep0", "start"]);
    }

    #[test]
    fn nullable_two_step_fixpoint() {
        let g = Grammar::parse("start: a\na: b b\nb: \"x\"?\n").unwrap();
        assert_eq!(g.nullable_rule_names(), vec!["a", "b", "start"]);
    }

    #[test]
    fn non_nullable_terminal() {
        let g = Grammar::parse("start: \"a\"\n").unwrap();
        assert!(!g.is_nullable(g.start()));
    }

    #[test]
    fn naive_epsilon_oracle_agrees() {
        // "derives epsilon within rule_count+1 expansion rounds" oracle.
        fn derives_eps(g: &Grammar, node: &GrammarNode, depth: usize) -> bool {
            match node {
                GrammarNode::Epsilon => true,
                GrammarNode::Byte(_) | GrammarNode::ByteRange(_, _) => false,
                GrammarNode::Join(ch) => ch.iter().all(|c| derives_eps(g, c, depth)),
                GrammarNode::Select(ch) => ch.iter().any(|c| derives_eps(g, c, depth)),
                GrammarNode::Ref(r) => depth > 0 && derives_eps(g, g.node(*r), depth - 1),
            }
        }
        let sources = [
            "start: \"a\"?\n",
            "start: a\na: b b\nb: \"x\"?\n",
            "start: \"a\"\n",
            "start: ws \"x\" ws\nws: (\" \" | \"\\t\")*\n",
            "start: a b\na: \"a\"*\nb: \"b\"+\n",
        ];
        for src in sources {
            let g = Grammar::parse(src).unwrap();
            let depth = g.rule_count() + 1;
            for id in g.rule_ids() {
                assert_eq!(
                    g.is_nullable(id),
                    derives_eps(&g, g.node(id), depth),
                    "nullable mismatch for {} in {src:?}",
                    g.rule_name(id)
                );
            }
        }
    }

    #[test]
    fn useless_rule_rejected() {
        let err = Grammar::parse("start: a\na: \"x\" a\n").unwrap_err();
        assert_eq!(err, GrammarError::UselessRule("a".into()));
    }

    #[test]
    fn missing_start_rejected() {
        let err = Grammar::parse("top: \"x\"\n").unwrap_err();
        assert_eq!(err, GrammarError::MissingStart);
    }

    #[test]
    fn unknown_rule_rejected() {
        let err = Grammar::parse("start: nope\n").unwrap_err();
        assert_eq!(err, GrammarError::UnknownRule("nope".into()));
    }

    #[test]
    fn terminal_alphabet_collects_ranges() {
        let g = Grammar::parse("start: (\"0\"..\"2\" | \"x\")+\n").unwrap();
        assert_eq!(g.terminal_alphabet(), vec![b'0', b'1', b'2', b'x']);
    }
}
