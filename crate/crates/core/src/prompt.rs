//! Few-shot prompt assembly: example question/answer pairs are
//! concatenated ahead of the task, separated by a fixed separator, then
//! tokenized by greedy longest match.

use serde::Deserialize;
use thiserror::Error;

use crate::masking::{retokenize, TokenId, TokenTrie};

/// Separator between prompt parts.
pub const FSL_SEPARATOR: &str = "\n\n";

/// Example pairs plus the actual task text.
#[derive(Debug, Clone, Default)]
pub struct PromptBundle {
    pub examples: Vec<(String, String)>,
    pub task: String,
}

impl PromptBundle {
    pub fn task(task: impl Into<String>) -> Self {
        PromptBundle {
            examples: Vec::new(),
            task: task.into(),
        }
    }

    /// `q1 sep a1 sep ... qN sep aN sep task`.
    pub fn assembled_text(&self) -> String {
        let mut text = String::new();
        for (question, answer) in &self.examples {
            text.push_str(question);
            text.push_str(FSL_SEPARATOR);
            text.push_str(answer);
            text.push_str(FSL_SEPARATOR);
        }
        text.push_str(&self.task);
        text
    }
}

/// Deterministic tokenization of the assembled prompt.
pub fn assemble_prompt(bundle: &PromptBundle, trie: &TokenTrie) -> Vec<TokenId> {
    retokenize(trie, bundle.assembled_text().as_bytes())
}

#[derive(Debug, Error)]
#[error("line {line}: {message}")]
pub struct ExamplesFormatError {
    pub line: usize,
    pub message: String,
}

/// Load FSL example pairs from JSON Lines:
/// `{"question": "...", "answer": "..."}` per line.
pub fn load_examples_jsonl(text: &str) -> Result<Vec<(String, String)>, ExamplesFormatError> {
    #[derive(Deserialize)]
    struct Line {
        question: String,
        answer: String,
    }
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(line).map_err(|e| ExamplesFormatError {
            line: i + 1,
            message: e.to_string(),
        })?;
        examples.push((parsed.question, parsed.answer));
    }
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{build_token_trie, Vocabulary};

    fn simple_trie() -> TokenTrie {
        let mut entries: Vec<(TokenId, Vec<u8>)> =
            (0..=255u8).map(|b| (b as TokenId, vec![b])).collect();
        entries.push((256, Vec::new()));
        build_token_trie(&Vocabulary::new(entries).unwrap())
    }

    #[test]
    fn degenerate_prompt_is_task_only() {
        let trie = simple_trie();
        let bundle = PromptBundle::task("T");
        assert_eq!(bundle.assembled_text(), "T");
        assert_eq!(assemble_prompt(&bundle, &trie), vec![b'T' as TokenId]);
    }

    #[test]
    fn one_example_layout() {
        let bundle = PromptBundle {
            examples: vec![("q1".into(), "a1".into())],
            task: "q".into(),
        };
        assert_eq!(bundle.assembled_text(), "q1\n\na1\n\nq");
    }

    #[test]
    fn assembly_is_deterministic() {
        let trie = simple_trie();
        let bundle = PromptBundle {
            examples: vec![("alpha".into(), "beta".into()), ("c".into(), "d".into())],
            task: "task text".into(),
        };
        assert_eq!(
            assemble_prompt(&bundle, &trie),
            assemble_prompt(&bundle, &trie)
        );
    }

    #[test]
    fn examples_jsonl_roundtrip() {
        let text = "{\"question\": \"q1\", \"answer\": \"a1\"}\n\n{\"question\": \"q2\", \"answer\": \"a2\"}\n";
        let examples = load_examples_jsonl(text).unwrap();
        assert_eq!(
            examples,
            vec![("q1".into(), "a1".into()), ("q2".into(), "a2".into())]
        );
        assert!(load_examples_jsonl("{\"q\": 1}").is_err());
    }
}
