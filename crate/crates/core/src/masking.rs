//! Token-level admissibility: the vocabulary, a prefix trie over token
//! byte strings, and per-step mask computation against a parser state.
//!
//! The trie keeps mask computation cheap: a rejected byte prunes every
//! token in the subtree below it, so only viable prefixes are walked.

use std::fmt;

use serde::Deserialize;
use thiserror::Error;

use crate::earley::ParserState;

pub type TokenId = u32;

/// The decode-time vocabulary: dense token ids mapped to byte strings,
/// with exactly one empty entry acting as the end-of-sequence token.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<Vec<u8>>,
    eos: TokenId,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("duplicate token id {0}")]
    DuplicateId(TokenId),
    #[error("token ids are not dense: missing id {0}")]
    MissingId(TokenId),
    #[error("vocabulary has no EOS entry (empty byte string)")]
    NoEos,
    #[error("vocabulary has multiple EOS entries: ids {0} and {1}")]
    MultipleEos(TokenId, TokenId),
    #[error("vocabulary is missing the single-byte token for {0:#04x}")]
    MissingByteCoverage(u8),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
}

impl Vocabulary {
    /// Build from (id, bytes) pairs in any order. Ids must be dense and
    /// exactly one entry must be empty (EOS).
    pub fn new(entries: Vec<(TokenId, Vec<u8>)>) -> Result<Self, VocabError> {
        let n = entries.len();
        let mut tokens: Vec<Option<Vec<u8>>> = vec![None; n];
        for (id, bytes) in entries {
            match tokens.get_mut(id as usize) {
                Some(slot) if slot.is_some() => return Err(VocabError::DuplicateId(id)),
                Some(slot) => *slot = Some(bytes),
                // An id beyond n-1 implies a hole below it; report the hole.
                None => {}
            }
        }
        let tokens: Vec<Vec<u8>> = tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or(VocabError::MissingId(i as TokenId)))
            .collect::<Result<_, _>>()?;
        let mut eos = None;
        for (id, bytes) in tokens.iter().enumerate() {
            if bytes.is_empty() {
                match eos {
                    None => eos = Some(id as TokenId),
                    Some(first) => return Err(VocabError::MultipleEos(first, id as TokenId)),
                }
            }
        }
        let eos = eos.ok_or(VocabError::NoEos)?;
        Ok(Vocabulary { tokens, eos })
    }

    /// Load the JSON Lines format: one `{"id": int, "bytes_hex": string}`
    /// object per line. Rejects vocabularies that do not cover all 256
    /// single-byte tokens.
    pub fn from_jsonl(text: &str) -> Result<Self, VocabError> {
        #[derive(Deserialize)]
        struct Line {
            id: TokenId,
            bytes_hex: String,
        }
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(line).map_err(|e| VocabError::Format {
                line: i + 1,
                message: e.to_string(),
            })?;
            let bytes = decode_hex(&parsed.bytes_hex).map_err(|message| VocabError::Format {
                line: i + 1,
                message,
            })?;
            entries.push((parsed.id, bytes));
        }
        let vocab = Vocabulary::new(entries)?;
        if let Some(missing) = vocab.first_uncovered_byte() {
            return Err(VocabError::MissingByteCoverage(missing));
        }
        Ok(vocab)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos
    }

    pub fn token_bytes(&self, id: TokenId) -> &[u8] {
        &self.tokens[id as usize]
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, &[u8])> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, b)| (i as TokenId, b.as_slice()))
    }

    pub fn has_full_byte_coverage(&self) -> bool {
        self.first_uncovered_byte().is_none()
    }

    fn first_uncovered_byte(&self) -> Option<u8> {
        let mut covered = [false; 256];
        for bytes in &self.tokens {
            if bytes.len() == 1 {
                covered[bytes[0] as usize] = true;
            }
        }
        (0..=255u8).find(|&b| !covered[b as usize])
    }
}

fn decode_hex(s: &str) -> Result<Vec<u8>, String> {
    if s.len() % 2 != 0 {
        return Err("bytes_hex has odd length".into());
    }
    let nibble = |c: u8| -> Result<u8, String> {
        match c {
            b'0'..=b'9' => Ok(c - b'0'),
            b'a'..=b'f' => Ok(c - b'a' + 10),
            b'A'..=b'F' => Ok(c - b'A' + 10),
            _ => Err(format!("invalid hex digit `{}`", c as char)),
        }
    };
    s.as_bytes()
        .chunks(2)
        .map(|pair| Ok(nibble(pair[0])? << 4 | nibble(pair[1])?))
        .collect()
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    /// Tokens whose byte string ends at this node; sorted ascending.
    token_ids: Vec<TokenId>,
    /// Outgoing edges, sorted by byte.
    children: Vec<(u8, u32)>,
}

/// Prefix tree over the vocabulary's non-EOS token byte strings.
#[derive(Debug, Clone)]
pub struct TokenTrie {
    nodes: Vec<TrieNode>,
}

/// Build the trie for a vocabulary. Tokens with identical bytes share a
/// node and all their ids attach to it.
pub fn build_token_trie(vocab: &Vocabulary) -> TokenTrie {
    let mut nodes = vec![TrieNode::default()];
    for (id, bytes) in vocab.iter() {
        if bytes.is_empty() {
            continue;
        }
        let mut at = 0usize;
        for &b in bytes {
            at = match nodes[at].children.binary_search_by_key(&b, |&(eb, _)| eb) {
                Ok(i) => nodes[at].children[i].1 as usize,
                Err(i) => {
                    let next = nodes.len() as u32;
                    nodes[at].children.insert(i, (b, next));
                    nodes.push(TrieNode::default());
                    next as usize
                }
            };
        }
        nodes[at].token_ids.push(id);
    }
    for node in &mut nodes {
        node.token_ids.sort_unstable();
    }
    TokenTrie { nodes }
}

impl TokenTrie {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Token ids whose byte string is exactly `bytes`.
    pub fn lookup(&self, bytes: &[u8]) -> &[TokenId] {
        let mut at = 0usize;
        for &b in bytes {
            match self.nodes[at].children.binary_search_by_key(&b, |&(eb, _)| eb) {
                Ok(i) => at = self.nodes[at].children[i].1 as usize,
                Err(_) => return &[],
            }
        }
        &self.nodes[at].token_ids
    }

    /// Longest token matching a prefix of `bytes`; ties on byte string are
    /// broken by lowest token id.
    pub fn longest_match(&self, bytes: &[u8]) -> Option<(TokenId, usize)> {
        let mut at = 0usize;
        let mut best = None;
        for (i, &b) in bytes.iter().enumerate() {
            match self.nodes[at].children.binary_search_by_key(&b, |&(eb, _)| eb) {
                Ok(edge) => at = self.nodes[at].children[edge].1 as usize,
                Err(_) => break,
            }
            if let Some(&id) = self.nodes[at].token_ids.first() {
                best = Some((id, i + 1));
            }
        }
        best
    }

    pub fn root_children(&self) -> impl Iterator<Item = u8> + '_ {
        self.nodes[0].children.iter().map(|&(b, _)| b)
    }
}

/// Per-step admissibility bitset over the vocabulary.
#[derive(Clone, PartialEq, Eq)]
pub struct TokenMask {
    bits: Vec<u64>,
    len: usize,
}

impl TokenMask {
    pub fn empty(len: usize) -> Self {
        TokenMask {
            bits: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn all_allowed(len: usize) -> Self {
        let mut mask = TokenMask::empty(len);
        for id in 0..len as TokenId {
            mask.allow(id);
        }
        mask
    }

    pub fn allow(&mut self, id: TokenId) {
        debug_assert!((id as usize) < self.len);
        self.bits[(id / 64) as usize] |= 1 << (id % 64);
    }

    pub fn is_allowed(&self, id: TokenId) -> bool {
        (id as usize) < self.len && self.bits[(id / 64) as usize] & (1 << (id % 64)) != 0
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&w| w == 0)
    }

    pub fn count_allowed(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn iter_allowed(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.len as TokenId).filter(|&id| self.is_allowed(id))
    }
}

impl fmt::Debug for TokenMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter_allowed()).finish()
    }
}

/// Compute the admissible-token mask for a parser state: a token is
/// allowed iff every one of its bytes advances the parser in sequence;
/// EOS is allowed iff the state is complete. Entire trie subtrees are
/// pruned on the first rejected byte.
pub fn compute_mask(state: &ParserState, trie: &TokenTrie, vocab: &Vocabulary) -> TokenMask {
    let mut mask = TokenMask::empty(vocab.size());
    if state.is_complete() {
        mask.allow(vocab.eos_id());
    }
    let mut probe = state.clone();
    walk(trie, 0, &mut probe, &mut mask);
    mask
}

fn walk(trie: &TokenTrie, node: usize, probe: &mut ParserState, mask: &mut TokenMask) {
    let depth = probe.consumed();
    for &(byte, child_idx) in &trie.nodes[node].children {
        if probe.advance(byte).is_ok() {
            let child = child_idx as usize;
            for &id in &trie.nodes[child].token_ids {
                mask.allow(id);
            }
            walk(trie, child, probe, mask);
            probe.truncate(depth);
        }
    }
}

/// Chase the unambiguous continuation: while the state is not complete
/// and exactly one byte is allowed, consume it. The state is advanced
/// past the returned bytes.
pub fn forced_continuation(state: &mut ParserState) -> Vec<u8> {
    let mut forced = Vec::new();
    loop {
        if state.is_complete() {
            return forced;
        }
        let Some(b) = state.allowed_next_bytes().only() else {
            return forced;
        };
        state.advance(b).expect("singleton allowed byte must advance");
        forced.push(b);
    }
}

/// Greedy longest-match tokenization of raw bytes. Bytes matching no
/// token are skipped; a vocabulary with full single-byte coverage never
/// hits that case.
pub fn retokenize(trie: &TokenTrie, bytes: &[u8]) -> Vec<TokenId> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        match trie.longest_match(&bytes[pos..]) {
            Some((id, len)) => {
                out.push(id);
                pos += len;
            }
            None => pos += 1,
        }
    }
    out
}
