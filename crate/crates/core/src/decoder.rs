//! The constrained-generation loop: chase forced continuations, get
//! logits, softmax, masked greedy selection, advance the parser byte by
//! byte. Plus the unconstrained baseline loop for comparison runs.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::earley::ParserState;
use crate::grammar::Grammar;
use crate::masking::{
    compute_mask, forced_continuation, retokenize, TokenId, TokenMask, TokenTrie, Vocabulary,
};

/// Source of next-token logits. Implementations must be deterministic for
/// a fixed context and return exactly one logit per vocabulary entry.
pub trait LogitProvider {
    fn next_logits(&mut self, context: &[TokenId]) -> Result<Vec<f64>, ProviderError>;
}

impl<P: LogitProvider + ?Sized> LogitProvider for Box<P> {
    fn next_logits(&mut self, context: &[TokenId]) -> Result<Vec<f64>, ProviderError> {
        (**self).next_logits(context)
    }
}

impl<P: LogitProvider + ?Sized> LogitProvider for &mut P {
    fn next_logits(&mut self, context: &[TokenId]) -> Result<Vec<f64>, ProviderError> {
        (**self).next_logits(context)
    }
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider protocol error: {0}")]
    Protocol(String),
    #[error("provider i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Exponential normalization into a probability vector, stabilized by
/// subtracting the maximum logit.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no token is admissible")]
pub struct EmptyMask;

/// Greedy pick: the most probable allowed token, ties broken by lowest id.
pub fn select_token(probs: &[f64], mask: &TokenMask) -> Result<TokenId, EmptyMask> {
    let mut best: Option<(TokenId, f64)> = None;
    for id in mask.iter_allowed() {
        let p = probs[id as usize];
        match best {
            Some((_, bp)) if p <= bp => {}
            _ => best = Some((id, p)),
        }
    }
    best.map(|(id, _)| id).ok_or(EmptyMask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStatus {
    /// The output is a full sentence of the grammar (constrained mode) or
    /// the model emitted EOS (unconstrained mode).
    Complete,
    /// The token budget ran out before the generation could stop.
    BudgetExhausted,
    /// No token was admissible and the parse was not complete. Cannot
    /// happen with a vocabulary covering all 256 single-byte tokens.
    DeadEnd,
}

impl std::fmt::Display for DecodeStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DecodeStatus::Complete => "complete",
            DecodeStatus::BudgetExhausted => "budget_exhausted",
            DecodeStatus::DeadEnd => "dead_end",
        };
        f.write_str(s)
    }
}

/// Outcome of one generation. The raw bytes live in `output`; the
/// serialized form carries the accounting fields only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeResult {
    #[serde(skip)]
    pub output: Vec<u8>,
    pub status: DecodeStatus,
    pub tokens_used: usize,
    pub lm_calls: usize,
    pub forced_bytes: usize,
    pub wall_time_s: f64,
}

/// One generation over shared immutable grammar/vocabulary/trie. A
/// session runs once; rebuild it to decode again.
pub struct DecodeSession<P> {
    grammar: Arc<Grammar>,
    vocab: Arc<Vocabulary>,
    trie: Arc<TokenTrie>,
    provider: P,
    prompt_tokens: Vec<TokenId>,
    budget: usize,
    shortcut: bool,
}

impl<P: LogitProvider> DecodeSession<P> {
    pub fn new(
        grammar: Arc<Grammar>,
        vocab: Arc<Vocabulary>,
        trie: Arc<TokenTrie>,
        provider: P,
        prompt_tokens: Vec<TokenId>,
        budget: usize,
    ) -> Self {
        DecodeSession {
            grammar,
            vocab,
            trie,
            provider,
            prompt_tokens,
            budget,
            shortcut: true,
        }
    }

    /// Disable or re-enable the forced-continuation shortcut. Affects
    /// only how often the provider is invoked, never the output bytes.
    pub fn with_shortcut(mut self, on: bool) -> Self {
        self.shortcut = on;
        self
    }

    fn context_for(&self, output: &[u8]) -> Vec<TokenId> {
        let mut context = self.prompt_tokens.clone();
        context.extend(retokenize(&self.trie, output));
        context
    }

    fn call_provider(
        &mut self,
        context: &[TokenId],
        lm_calls: &mut usize,
    ) -> Result<Vec<f64>, ProviderError> {
        let logits = self.provider.next_logits(context)?;
        *lm_calls += 1;
        if logits.len() != self.vocab.size() {
            return Err(ProviderError::Protocol(format!(
                "expected {} logits, got {}",
                self.vocab.size(),
                logits.len()
            )));
        }
        Ok(logits)
    }

    /// Grammar-masked greedy decoding. A `Complete` result is always a
    /// sentence of the grammar.
    pub fn decode(mut self) -> Result<DecodeResult, ProviderError> {
        let started = Instant::now();
        let mut state = ParserState::new(Arc::clone(&self.grammar));
        let mut output: Vec<u8> = Vec::new();
        let mut lm_calls = 0;
        let mut tokens_used = 0;
        let mut forced_bytes = 0;

        let status = loop {
            if self.shortcut {
                let forced = forced_continuation(&mut state);
                forced_bytes += forced.len();
                output.extend_from_slice(&forced);
            }
            if state.is_complete() && state.allowed_next_bytes().is_empty() {
                break DecodeStatus::Complete;
            }
            if tokens_used == self.budget {
                break DecodeStatus::BudgetExhausted;
            }
            let context = self.context_for(&output);
            let logits = self.call_provider(&context, &mut lm_calls)?;
            let probs = softmax(&logits);
            let mask = compute_mask(&state, &self.trie, &self.vocab);
            let Ok(token) = select_token(&probs, &mask) else {
                break DecodeStatus::DeadEnd;
            };
            if token == self.vocab.eos_id() {
                break DecodeStatus::Complete;
            }
            let bytes = self.vocab.token_bytes(token).to_vec();
            for &b in &bytes {
                state
                    .advance(b)
                    .expect("admissible token bytes must advance the parser");
            }
            output.extend_from_slice(&bytes);
            tokens_used += 1;
        };

        Ok(DecodeResult {
            output,
            status,
            tokens_used,
            lm_calls,
            forced_bytes,
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    }

    /// The baseline: same loop with every token allowed and no parser.
    /// Stops on EOS or budget; the output carries no validity guarantee.
    pub fn decode_unconstrained(mut self) -> Result<DecodeResult, ProviderError> {
        let started = Instant::now();
        let mut output: Vec<u8> = Vec::new();
        let mut lm_calls = 0;
        let mut tokens_used = 0;
        let mask = TokenMask::all_allowed(self.vocab.size());

        let status = loop {
            if tokens_used == self.budget {
                break DecodeStatus::BudgetExhausted;
            }
            let context = self.context_for(&output);
            let logits = self.call_provider(&context, &mut lm_calls)?;
            let probs = softmax(&logits);
            let token = select_token(&probs, &mask).expect("all-allowed mask is never empty");
            if token == self.vocab.eos_id() {
                break DecodeStatus::Complete;
            }
            output.extend_from_slice(self.vocab.token_bytes(token));
            tokens_used += 1;
        };

        Ok(DecodeResult {
            output,
            status,
            tokens_used,
            lm_calls,
            forced_bytes: 0,
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::build_token_trie;

    /// Provider returning the same logits at every step.
    pub(crate) struct ConstantProvider(pub Vec<f64>);

    impl LogitProvider for ConstantProvider {
        fn next_logits(&mut self, _context: &[TokenId]) -> Result<Vec<f64>, ProviderError> {
            Ok(self.0.clone())
        }
    }

    fn fixtures() -> (Arc<Grammar>, Arc<Vocabulary>, Arc<TokenTrie>) {
        let grammar = Arc::new(Grammar::parse("start: \"a\" | \"a\" \"b\"\n").unwrap());
        let vocab = Arc::new(
            Vocabulary::new(vec![
                (0, b"a".to_vec()),
                (1, b"b".to_vec()),
                (2, b"ab".to_vec()),
                (3, b"c".to_vec()),
                (4, Vec::new()),
            ])
            .unwrap(),
        );
        let trie = Arc::new(build_token_trie(&vocab));
        (grammar, vocab, trie)
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[2.0f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(softmax(&[5.0]), vec![1.0]);
    }

    #[test]
    fn select_token_examples() {
        let all = TokenMask::all_allowed(3);
        assert_eq!(select_token(&[0.1, 0.7, 0.2], &all).unwrap(), 1);

        let mut no_mid = TokenMask::empty(3);
        no_mid.allow(0);
        no_mid.allow(2);
        assert_eq!(select_token(&[0.1, 0.7, 0.2], &no_mid).unwrap(), 2);

        let mut low_two = TokenMask::empty(3);
        low_two.allow(0);
        low_two.allow(1);
        assert_eq!(select_token(&[0.4, 0.4, 0.2], &low_two).unwrap(), 0);

        let none = TokenMask::empty(3);
        assert_eq!(select_token(&[0.4, 0.4, 0.2], &none), Err(EmptyMask));
    }

    #[test]
    fn forced_chase_completes_without_lm() {
        let grammar = Arc::new(Grammar::parse("start: \"boolean\"\n").unwrap());
        let (_, vocab, trie) = fixtures();
        let provider = ConstantProvider(vec![0.0; 5]);
        let session = DecodeSession::new(grammar, vocab, trie, provider, Vec::new(), 0);
        let result = session.decode().unwrap();
        assert_eq!(result.output, b"boolean".to_vec());
        assert_eq!(result.status, DecodeStatus::Complete);
        assert_eq!(result.lm_calls, 0);
        assert_eq!(result.forced_bytes, 7);
        assert_eq!(result.tokens_used, 0);
    }

    #[test]
    fn constrained_vs_unconstrained_with_c_preferring_provider() {
        let (grammar, vocab, trie) = fixtures();
        // Token 3 ("c") has the highest logit.
        let logits = vec![0.0, 0.0, 0.0, 5.0, 0.0];

        let constrained = DecodeSession::new(
            Arc::clone(&grammar),
            Arc::clone(&vocab),
            Arc::clone(&trie),
            ConstantProvider(logits.clone()),
            Vec::new(),
            8,
        )
        .decode()
        .unwrap();
        assert!(constrained.output == b"a".to_vec() || constrained.output == b"ab".to_vec());
        assert!(crate::earley::recognize(&grammar, &constrained.output).accepted);

        let unconstrained = DecodeSession::new(
            grammar.clone(),
            vocab,
            trie,
            ConstantProvider(logits),
            Vec::new(),
            8,
        )
        .decode_unconstrained()
        .unwrap();
        assert!(unconstrained.output.starts_with(b"c"));
        assert!(!crate::earley::recognize(&grammar, &unconstrained.output).accepted);
    }

    #[test]
    fn eos_is_masked_until_complete() {
        let grammar = Arc::new(Grammar::parse("start: \"a\"+\n").unwrap());
        let (_, vocab, trie) = fixtures();
        // EOS (token 4) always has the highest logit.
        let provider = ConstantProvider(vec![0.0, 0.0, 0.0, 0.0, 9.0]);
        let result = DecodeSession::new(grammar, vocab, trie, provider, Vec::new(), 8)
            .decode()
            .unwrap();
        assert_eq!(result.output, b"a".to_vec());
        assert_eq!(result.status, DecodeStatus::Complete);
    }

    #[test]
    fn unconstrained_eos_preferring_stops_immediately() {
        let (grammar, vocab, trie) = fixtures();
        let provider = ConstantProvider(vec![0.0, 0.0, 0.0, 0.0, 9.0]);
        let result = DecodeSession::new(grammar, vocab, trie, provider, Vec::new(), 512)
            .decode_unconstrained()
            .unwrap();
        assert!(result.output.is_empty());
        assert_eq!(result.status, DecodeStatus::Complete);
        assert_eq!(result.lm_calls, 1);
    }

    #[test]
    fn unconstrained_budget_accounting() {
        let (grammar, vocab, trie) = fixtures();
        // Never prefers EOS.
        let provider = ConstantProvider(vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let result = DecodeSession::new(grammar, vocab, trie, provider, Vec::new(), 3)
            .decode_unconstrained()
            .unwrap();
        assert_eq!(result.status, DecodeStatus::BudgetExhausted);
        assert_eq!(result.tokens_used, 3);
        assert_eq!(result.lm_calls, 3);
        assert_eq!(result.output, b"aaa".to_vec());
    }

    #[test]
    fn decode_is_deterministic() {
        let (grammar, vocab, trie) = fixtures();
        let run = || {
            DecodeSession::new(
                Arc::clone(&grammar),
                Arc::clone(&vocab),
                Arc::clone(&trie),
                ConstantProvider(vec![0.3, 0.1, 0.9, 0.2, 0.0]),
                vec![0, 1],
                16,
            )
            .decode()
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.output, b.output);
        assert_eq!(a.tokens_used, b.tokens_used);
        assert_eq!(a.lm_calls, b.lm_calls);
    }

    #[test]
    fn shortcut_changes_lm_calls_not_bytes() {
        let grammar = Arc::new(Grammar::parse("start: \"ab\" (\"a\" | \"b\")\n").unwrap());
        let (_, vocab, trie) = fixtures();
        let logits = vec![0.5, 0.4, 0.1, 0.0, 0.0];
        let on = DecodeSession::new(
            Arc::clone(&grammar),
            Arc::clone(&vocab),
            Arc::clone(&trie),
            ConstantProvider(logits.clone()),
            Vec::new(),
            16,
        )
        .decode()
        .unwrap();
        let off = DecodeSession::new(grammar, vocab, trie, ConstantProvider(logits), Vec::new(), 16)
            .with_shortcut(false)
            .decode()
            .unwrap();
        assert_eq!(on.output, off.output);
        assert!(on.lm_calls <= off.lm_calls);
        assert_eq!(off.forced_bytes, 0);
    }

    #[test]
    fn sidecar_json_shape() {
        let result = DecodeResult {
            output: b"xyz".to_vec(),
            status: DecodeStatus::BudgetExhausted,
            tokens_used: 7,
            lm_calls: 9,
            forced_bytes: 2,
            wall_time_s: 0.25,
        };
        let json = serde_json::to_value(&result).unwrap();
        assert_eq!(json["status"], "budget_exhausted");
        assert_eq!(json["tokens_used"], 7);
        assert!(json.get("output").is_none());
    }
}
