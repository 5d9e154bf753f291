//! Incremental byte-level Earley recognizer.
//!
//! A [`ParserState`] is advanced one byte at a time and answers, at every
//! position, whether the consumed prefix is still extendable, whether it
//! already forms a complete sentence, and which bytes may come next.
//! Chart columns are immutable once sealed and shared between clones, so
//! probing (advance, inspect, rewind) is cheap.
//!
//! Nullable rules are handled by advancing the predicting item past a
//! nullable nonterminal at prediction time, which avoids the classic
//! Earley epsilon-completion bug.

use std::collections::HashSet;
use std::sync::Arc;

use serde::de::{SeqAccess, Visitor};
use serde::ser::SerializeSeq;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::grammar::{Grammar, RuleId, Sym};

/// Set of byte values, used for "which bytes may come next" answers.
#[derive(Clone, Copy, PartialEq, Eq, Default)]
pub struct ByteSet([u64; 4]);

impl ByteSet {
    pub fn new() -> Self {
        ByteSet([0; 4])
    }

    pub fn insert(&mut self, b: u8) {
        self.0[(b >> 6) as usize] |= 1 << (b & 63);
    }

    pub fn insert_range(&mut self, lo: u8, hi: u8) {
        for b in lo..=hi {
            self.insert(b);
        }
    }

    pub fn contains(&self, b: u8) -> bool {
        self.0[(b >> 6) as usize] & (1 << (b & 63)) != 0
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0 == [0; 4]
    }

    /// The single member, if the set has exactly one.
    pub fn only(&self) -> Option<u8> {
        if self.len() == 1 {
            self.iter().next()
        } else {
            None
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        (0u16..=255).map(|b| b as u8).filter(|&b| self.contains(b))
    }
}

impl FromIterator<u8> for ByteSet {
    fn from_iter<T: IntoIterator<Item = u8>>(iter: T) -> Self {
        let mut set = ByteSet::new();
        for b in iter {
            set.insert(b);
        }
        set
    }
}

impl std::fmt::Debug for ByteSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set()
            .entries(self.iter().map(|b| b as char))
            .finish()
    }
}

impl Serialize for ByteSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.len()))?;
        for b in self.iter() {
            seq.serialize_element(&(b as u16))?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for ByteSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = ByteSet;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a sequence of byte values")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<ByteSet, A::Error> {
                let mut set = ByteSet::new();
                while let Some(b) = seq.next_element::<u8>()? {
                    set.insert(b);
                }
                Ok(set)
            }
        }
        deserializer.deserialize_seq(V)
    }
}

/// Dotted rule with an origin position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Item {
    rule: RuleId,
    alt: u16,
    dot: u16,
    origin: u32,
}

impl Item {
    fn advanced(self) -> Item {
        Item {
            dot: self.dot + 1,
            ..self
        }
    }
}

/// Read-only view of a chart item, for inspection in tests and debugging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItemView {
    pub rule: RuleId,
    pub alt: usize,
    pub dot: usize,
    pub origin: usize,
}

struct Column {
    items: Vec<Item>,
    set: HashSet<Item>,
    /// A completed start item spanning from position 0 ends here.
    complete: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("byte {byte:#04x} rejected at position {position}")]
pub struct RejectedByte {
    pub position: usize,
    pub byte: u8,
    pub expected: ByteSet,
}

/// Outcome of recognizing a full text against a grammar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub accepted: bool,
    pub failure_position: Option<usize>,
    pub expected_bytes: ByteSet,
}

/// Incremental recognizer state. Clones share sealed chart columns.
#[derive(Clone)]
pub struct ParserState {
    grammar: Arc<Grammar>,
    columns: Vec<Arc<Column>>,
    bytes: Vec<u8>,
    items_added: u64,
}

impl ParserState {
    /// State at position 0: the prediction/completion closure of the
    /// start rule. Complete immediately iff the start rule is nullable.
    pub fn new(grammar: Arc<Grammar>) -> Self {
        let mut state = ParserState {
            grammar,
            columns: Vec::new(),
            bytes: Vec::new(),
            items_added: 0,
        };
        let mut col = Column {
            items: Vec::new(),
            set: HashSet::new(),
            complete: false,
        };
        let start = state.grammar.start();
        for alt in 0..state.grammar.alts(start).len() {
            state.add(&mut col, Item {
                rule: start,
                alt: alt as u16,
                dot: 0,
                origin: 0,
            });
        }
        state.closure(&mut col, 0);
        state.columns.push(Arc::new(col));
        state
    }

    pub fn grammar(&self) -> &Arc<Grammar> {
        &self.grammar
    }

    /// Number of bytes scanned so far.
    pub fn consumed(&self) -> usize {
        self.bytes.len()
    }

    /// The bytes scanned so far.
    pub fn scanned(&self) -> &[u8] {
        &self.bytes
    }

    /// True iff the consumed bytes form a sentence of the grammar.
    pub fn is_complete(&self) -> bool {
        self.columns.last().expect("at least one column").complete
    }

    /// Total chart items created over the lifetime of this state (probe
    /// rewinds do not subtract). Advancing never backtracks, so this grows
    /// at most quadratically in the per-column item count per byte.
    pub fn items_added(&self) -> u64 {
        self.items_added
    }

    /// Scan one byte. On rejection the state is unchanged and reusable.
    pub fn advance(&mut self, byte: u8) -> Result<(), RejectedByte> {
        let pos = self.consumed() as u32 + 1;
        let frontier = self.columns.last().expect("at least one column");
        let mut col = Column {
            items: Vec::new(),
            set: HashSet::new(),
            complete: false,
        };
        let mut scanned = Vec::new();
        for item in &frontier.items {
            if let Some(sym) = self.next_sym(item) {
                if sym.matches(byte) {
                    scanned.push(item.advanced());
                }
            }
        }
        if scanned.is_empty() {
            return Err(RejectedByte {
                position: self.consumed(),
                byte,
                expected: self.allowed_next_bytes(),
            });
        }
        for item in scanned {
            self.add(&mut col, item);
        }
        self.closure(&mut col, pos);
        self.columns.push(Arc::new(col));
        self.bytes.push(byte);
        Ok(())
    }

    /// Exactly the set of bytes `advance` would accept here.
    pub fn allowed_next_bytes(&self) -> ByteSet {
        let frontier = self.columns.last().expect("at least one column");
        let mut set = ByteSet::new();
        for item in &frontier.items {
            match self.next_sym(item) {
                Some(Sym::Byte(b)) => set.insert(b),
                Some(Sym::Range(lo, hi)) => set.insert_range(lo, hi),
                _ => {}
            }
        }
        set
    }

    /// Rewind to an earlier position. Sealed columns are shared, so this
    /// just drops references.
    pub fn truncate(&mut self, consumed: usize) {
        assert!(consumed <= self.consumed(), "cannot truncate forward");
        self.columns.truncate(consumed + 1);
        self.bytes.truncate(consumed);
    }

    /// Items of the current frontier column.
    pub fn frontier_items(&self) -> Vec<ItemView> {
        self.columns
            .last()
            .expect("at least one column")
            .items
            .iter()
            .map(|i| ItemView {
                rule: i.rule,
                alt: i.alt as usize,
                dot: i.dot as usize,
                origin: i.origin as usize,
            })
            .collect()
    }

    fn next_sym(&self, item: &Item) -> Option<Sym> {
        self.grammar.alts(item.rule)[item.alt as usize]
            .get(item.dot as usize)
            .copied()
    }

    fn add(&mut self, col: &mut Column, item: Item) -> bool {
        if col.set.insert(item) {
            if item.rule == self.grammar.start()
                && item.origin == 0
                && item.dot as usize == self.grammar.alts(item.rule)[item.alt as usize].len()
            {
                col.complete = true;
            }
            col.items.push(item);
            self.items_added += 1;
            true
        } else {
            false
        }
    }

    /// Prediction/completion closure over the column at `pos`.
    fn closure(&mut self, col: &mut Column, pos: u32) {
        let rule_count = self.grammar.rule_count();
        let mut predicted = vec![false; rule_count];
        let mut i = 0;
        while i < col.items.len() {
            let item = col.items[i];
            i += 1;
            match self.next_sym(&item) {
                Some(Sym::Rule(r)) => {
                    if !predicted[r.index()] {
                        predicted[r.index()] = true;
                        for alt in 0..self.grammar.alts(r).len() {
                            self.add(col, Item {
                                rule: r,
                                alt: alt as u16,
                                dot: 0,
                                origin: pos,
                            });
                        }
                    }
                    // Nullable prediction: the caller may skip over an
                    // empty derivation of r without waiting for a
                    // same-column completion.
                    if self.grammar.is_nullable(r) {
                        self.add(col, item.advanced());
                    }
                }
                Some(_) => {} // terminal: waits for a scan
                None => {
                    // Completed item spanning [origin, pos]. Empty spans
                    // are already covered by nullable prediction.
                    if item.origin == pos {
                        continue;
                    }
                    let parents = Arc::clone(&self.columns[item.origin as usize]);
                    for parent in &parents.items {
                        if self.next_sym(parent) == Some(Sym::Rule(item.rule)) {
                            self.add(col, parent.advanced());
                        }
                    }
                }
            }
        }
    }
}

/// Run the recognizer over a full text.
pub fn recognize(grammar: &Arc<Grammar>, text: &[u8]) -> ParseReport {
    let mut state = ParserState::new(Arc::clone(grammar));
    for (i, &b) in text.iter().enumerate() {
        if let Err(rejected) = state.advance(b) {
            return ParseReport {
                accepted: false,
                failure_position: Some(i),
                expected_bytes: rejected.expected,
            };
        }
    }
    if state.is_complete() {
        ParseReport {
            accepted: true,
            failure_position: None,
            expected_bytes: ByteSet::new(),
        }
    } else {
        ParseReport {
            accepted: false,
            failure_position: Some(text.len()),
            expected_bytes: state.allowed_next_bytes(),
        }
    }
}

/// One node of an extracted derivation: a rule instance covering
/// `start..end`, with child nodes for the rule references of the chosen
/// alternative, in order.
#[derive(Debug, Clone)]
pub(crate) struct Derivation {
    pub rule: RuleId,
    pub children: Vec<Derivation>,
}

/// Extract a single derivation of `text`, or `None` when it is not a
/// sentence. Ambiguity is resolved deterministically: child candidates by
/// smallest origin, then rule alternatives by lowest index.
pub(crate) fn derive(grammar: &Arc<Grammar>, text: &[u8]) -> Option<Derivation> {
    let mut state = ParserState::new(Arc::clone(grammar));
    for &b in text {
        state.advance(b).ok()?;
    }
    if !state.is_complete() {
        return None;
    }
    let mut cx = DeriveCx {
        grammar,
        columns: &state.columns,
        text,
        rule_memo: std::collections::HashMap::new(),
        seq_failures: HashSet::new(),
    };
    cx.derive_rule(grammar.start(), 0, text.len())
}

struct DeriveCx<'a> {
    grammar: &'a Grammar,
    columns: &'a [Arc<Column>],
    text: &'a [u8],
    rule_memo: std::collections::HashMap<(RuleId, usize, usize), Option<Derivation>>,
    seq_failures: HashSet<(RuleId, u16, u16, usize, usize)>,
}

impl DeriveCx<'_> {
    fn derive_rule(&mut self, rule: RuleId, start: usize, end: usize) -> Option<Derivation> {
        if let Some(cached) = self.rule_memo.get(&(rule, start, end)) {
            return cached.clone();
        }
        // Guard against cyclic unit rules while this key is in flight.
        self.rule_memo.insert((rule, start, end), None);
        let mut completed_alts: Vec<u16> = self.columns[end]
            .items
            .iter()
            .filter(|i| {
                i.rule == rule
                    && i.origin as usize == start
                    && i.dot as usize == self.grammar.alts(rule)[i.alt as usize].len()
            })
            .map(|i| i.alt)
            .collect();
        completed_alts.sort_unstable();
        completed_alts.dedup();
        let mut result = None;
        for alt in completed_alts {
            let dot = self.grammar.alts(rule)[alt as usize].len() as u16;
            if let Some(children) = self.derive_seq(rule, alt, dot, start, end) {
                result = Some(Derivation { rule, children });
                break;
            }
        }
        self.rule_memo.insert((rule, start, end), result.clone());
        result
    }

    /// Derive `alts(rule)[alt][..dot]` over `start..end`, matching symbols
    /// right to left.
    fn derive_seq(
        &mut self,
        rule: RuleId,
        alt: u16,
        dot: u16,
        start: usize,
        end: usize,
    ) -> Option<Vec<Derivation>> {
        if dot == 0 {
            return (start == end).then(Vec::new);
        }
        let key = (rule, alt, dot, start, end);
        if self.seq_failures.contains(&key) {
            return None;
        }
        let sym = self.grammar.alts(rule)[alt as usize][dot as usize - 1];
        let result = match sym {
            Sym::Byte(_) | Sym::Range(_, _) => {
                if end > start && sym.matches(self.text[end - 1]) {
                    self.derive_seq(rule, alt, dot - 1, start, end - 1)
                } else {
                    None
                }
            }
            Sym::Rule(child) => {
                let mut origins: Vec<usize> = self.columns[end]
                    .items
                    .iter()
                    .filter(|i| {
                        i.rule == child
                            && i.dot as usize == self.grammar.alts(child)[i.alt as usize].len()
                            && i.origin as usize >= start
                    })
                    .map(|i| i.origin as usize)
                    .collect();
                origins.sort_unstable();
                origins.dedup();
                let mut found = None;
                for origin in origins {
                    if let Some(mut prefix) = self.derive_seq(rule, alt, dot - 1, start, origin) {
                        if let Some(node) = self.derive_rule(child, origin, end) {
                            prefix.push(node);
                            found = Some(prefix);
                            break;
                        }
                    }
                }
                found
            }
        };
        if result.is_none() {
            self.seq_failures.insert(key);
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Arc<Grammar> {
        Arc::new(Grammar::parse("start: \"a\" | \"a\" \"b\"\n").unwrap())
    }

    #[test]
    fn init_not_complete_for_toy() {
        let state = ParserState::new(toy());
        assert_eq!(state.consumed(), 0);
        assert!(!state.is_complete());
    }

    #[test]
    fn init_complete_for_nullable_start() {
        let g = Arc::new(Grammar::parse("start: \"a\"?\n").unwrap());
        assert!(ParserState::new(g).is_complete());
    }

    #[test]
    fn init_predicts_subrules() {
        let g = Arc::new(Grammar::parse("start: a b\na: \"x\"\nb: \"y\"\n").unwrap());
        let state = ParserState::new(Arc::clone(&g));
        let a = g.rule_id("a").unwrap();
        let views = state.frontier_items();
        assert!(
            views
                .iter()
                .any(|v| v.rule == a && v.dot == 0 && v.origin == 0),
            "expected predicted item for `a` at origin 0, got {views:?}"
        );
    }

    #[test]
    fn toy_advance_walkthrough() {
        let mut state = ParserState::new(toy());
        state.advance(b'a').unwrap();
        assert!(state.is_complete(), "\"a\" is a sentence");
        assert_eq!(state.allowed_next_bytes(), ByteSet::from_iter([b'b']));
        state.advance(b'b').unwrap();
        assert!(state.is_complete());
        assert!(state.allowed_next_bytes().is_empty());
    }

    #[test]
    fn rejection_reports_position_and_expected() {
        let mut state = ParserState::new(toy());
        let before = state.frontier_items();
        let err = state.advance(b'c').unwrap_err();
        assert_eq!(err.position, 0);
        assert_eq!(err.byte, b'c');
        assert_eq!(err.expected, ByteSet::from_iter([b'a']));
        // State untouched and reusable.
        assert_eq!(state.frontier_items(), before);
        state.advance(b'a').unwrap();
    }

    #[test]
    fn allowed_at_init() {
        let state = ParserState::new(toy());
        assert_eq!(state.allowed_next_bytes(), ByteSet::from_iter([b'a']));
    }

    #[test]
    fn recognize_toy_examples() {
        let g = toy();
        assert!(recognize(&g, b"ab").accepted);
        assert!(recognize(&g, b"a").accepted);
        let report = recognize(&g, b"b");
        assert!(!report.accepted);
        assert_eq!(report.failure_position, Some(0));
        assert_eq!(report.expected_bytes, ByteSet::from_iter([b'a']));
    }

    #[test]
    fn recognize_incomplete_text_fails_at_end() {
        let g = Arc::new(Grammar::parse("start: \"ab\"\n").unwrap());
        let report = recognize(&g, b"a");
        assert!(!report.accepted);
        assert_eq!(report.failure_position, Some(1));
        assert_eq!(report.expected_bytes, ByteSet::from_iter([b'b']));
    }

    #[test]
    fn nullable_chain_completion() {
        let g = Arc::new(Grammar::parse("start: a\na: b b\nb: \"x\"?\n").unwrap());
        assert!(recognize(&g, b"").accepted);
        assert!(recognize(&g, b"x").accepted);
        assert!(recognize(&g, b"xx").accepted);
        assert!(!recognize(&g, b"xxx").accepted);
    }

    #[test]
    fn truncate_rewinds() {
        let mut state = ParserState::new(toy());
        state.advance(b'a').unwrap();
        state.advance(b'b').unwrap();
        state.truncate(1);
        assert_eq!(state.consumed(), 1);
        assert!(state.is_complete());
        assert_eq!(state.allowed_next_bytes(), ByteSet::from_iter([b'b']));
        state.truncate(0);
        assert_eq!(state.allowed_next_bytes(), ByteSet::from_iter([b'a']));
    }

    #[test]
    fn clone_is_independent() {
        let mut a = ParserState::new(toy());
        a.advance(b'a').unwrap();
        let mut b = a.clone();
        b.advance(b'b').unwrap();
        assert_eq!(a.consumed(), 1);
        assert_eq!(b.consumed(), 2);
        assert_eq!(a.allowed_next_bytes(), ByteSet::from_iter([b'b']));
    }

    #[test]
    fn parse_report_json_shape() {
        let g = toy();
        let report = recognize(&g, b"b");
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["accepted"], serde_json::json!(false));
        assert_eq!(json["failure_position"], serde_json::json!(0));
        assert_eq!(json["expected_bytes"], serde_json::json!([97]));
        let back: ParseReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn byteset_only() {
        let mut s = ByteSet::new();
        assert_eq!(s.only(), None);
        s.insert(b'q');
        assert_eq!(s.only(), Some(b'q'));
        s.insert(b'r');
        assert_eq!(s.only(), None);
    }

    #[test]
    fn derivation_of_toy_sentence() {
        let g = toy();
        let d = derive(&g, b"ab").unwrap();
        assert_eq!(d.rule, g.start());
        assert!(d.children.is_empty());
        assert!(derive(&g, b"ba").is_none());
    }

    #[test]
    fn derivation_counts_nested_rules() {
        let g = Arc::new(Grammar::parse("start: item item\nitem: \"x\" | \"y\"\n").unwrap());
        let d = derive(&g, b"xy").unwrap();
        assert_eq!(d.children.len(), 2);
        let item = g.rule_id("item").unwrap();
        assert!(d.children.iter().all(|c| c.rule == item));
    }
}
