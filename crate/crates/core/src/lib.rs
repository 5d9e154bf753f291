//! Grammar-masked text generation.
//!
//! Constrains token-by-token generation to a context-free grammar: a
//! byte-level Earley recognizer tracks the partial parse, a token trie
//! prunes the per-step admissibility mask over the vocabulary, forced
//! continuations skip model calls where the grammar leaves no choice,
//! and a greedy decode loop ties it together. A benchmark harness
//! compares constrained and unconstrained generation over bundled DSLs.

pub mod decoder;
pub mod dsl;
pub mod earley;
pub mod grammar;
pub mod harness;
pub mod masking;
pub mod mock_lm;
pub mod prompt;

pub use decoder::{
    select_token, softmax, DecodeResult, DecodeSession, DecodeStatus, EmptyMask, LogitProvider,
    ProviderError,
};
pub use earley::{recognize, ByteSet, ItemView, ParseReport, ParserState, RejectedByte};
pub use grammar::{Grammar, GrammarError, GrammarNode, RuleId};
pub use masking::{
    build_token_trie, compute_mask, forced_continuation, retokenize, TokenId, TokenMask,
    TokenTrie, VocabError, Vocabulary,
};
pub use dsl::{
    count_rule_occurrences, load_bundle, validate, BundleError, DslBundle, ElementCounts,
    NotParsable,
};
pub use harness::{load_tasks, run_bench, BenchConfig, BenchReport, BenchRow, BenchTask, Mode};
pub use mock_lm::{
    train_ngram, ExternalProvider, NGramModel, NoiseWrapper, ProviderRequest, ProviderResponse,
    TrainError,
};
pub use prompt::{assemble_prompt, load_examples_jsonl, PromptBundle, FSL_SEPARATOR};
