//! Bundled DSLs: a bundle directory holds a grammar, valid and invalid
//! sample models, and the list of rules to tally for element-count
//! reports. Loading re-checks every sample against the grammar, so a
//! bundle that loads is internally consistent.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::earley::{self, recognize, ParseReport};
use crate::grammar::{Grammar, GrammarError};

#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub text: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct InvalidSample {
    pub name: String,
    pub text: Vec<u8>,
    pub failure_position: usize,
}

/// A loaded DSL bundle.
#[derive(Debug, Clone)]
pub struct DslBundle {
    pub name: String,
    pub grammar: Arc<Grammar>,
    pub valid: Vec<Sample>,
    pub invalid: Vec<InvalidSample>,
    pub countable: Vec<String>,
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("grammar error: {0}")]
    Grammar(#[from] GrammarError),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("countable rule `{0}` is not defined by the grammar")]
    UnknownCountable(String),
    #[error("valid sample `{name}` rejected at position {position:?}")]
    RejectedValidSample {
        name: String,
        position: Option<usize>,
    },
    #[error("invalid sample `{name}` expected to fail at {expected}, actually {actual:?}")]
    WrongFailurePosition {
        name: String,
        expected: usize,
        actual: Option<usize>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct Expectation {
    failure_position: usize,
}

fn read(path: &Path) -> Result<Vec<u8>, BundleError> {
    std::fs::read(path).map_err(|source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_utf8(path: &Path) -> Result<String, BundleError> {
    String::from_utf8(read(path)?).map_err(|_| BundleError::Format {
        path: path.to_path_buf(),
        message: "not valid UTF-8".into(),
    })
}

fn list_txt_files(dir: &Path) -> Result<Vec<PathBuf>, BundleError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let entries = std::fs::read_dir(dir).map_err(|source| BundleError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "txt"))
        .collect();
    files.sort();
    Ok(files)
}

/// Load `<dir>/grammar.g`, `<dir>/samples/{valid,invalid}/*.txt` (invalid
/// samples carry a `*.expect.json` sidecar with the failure position) and
/// `<dir>/countable.json`. Every sample is verified against the grammar.
pub fn load_bundle(dir: &Path) -> Result<DslBundle, BundleError> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "bundle".into());
    let grammar = Arc::new(Grammar::parse(&read_utf8(&dir.join("grammar.g"))?)?);

    let countable_path = dir.join("countable.json");
    let countable: Vec<String> = serde_json::from_str(&read_utf8(&countable_path)?)
        .map_err(|e| BundleError::Format {
            path: countable_path,
            message: e.to_string(),
        })?;
    for rule in &countable {
        if grammar.rule_id(rule).is_none() {
            return Err(BundleError::UnknownCountable(rule.clone()));
        }
    }

    let mut valid = Vec::new();
    for path in list_txt_files(&dir.join("samples/valid"))? {
        let sample_name = path.file_stem().unwrap().to_string_lossy().into_owned();
        let text = read(&path)?;
        let report = recognize(&grammar, &text);
        if !report.accepted {
            return Err(BundleError::RejectedValidSample {
                name: sample_name,
                position: report.failure_position,
            });
        }
        valid.push(Sample {
            name: sample_name,
            text,
        });
    }

    let mut invalid = Vec::new();
    for path in list_txt_files(&dir.join("samples/invalid"))? {
        let sample_name = path.file_stem().unwrap().to_string_lossy().into_owned();
        let text = read(&path)?;
        let expect_path = path.with_extension("expect.json");
        let expectation: Expectation =
            serde_json::from_str(&read_utf8(&expect_path)?).map_err(|e| BundleError::Format {
                path: expect_path,
                message: e.to_string(),
            })?;
        let report = recognize(&grammar, &text);
        if report.accepted || report.failure_position != Some(expectation.failure_position) {
            return Err(BundleError::WrongFailurePosition {
                name: sample_name,
                expected: expectation.failure_position,
                actual: report.failure_position,
            });
        }
        invalid.push(InvalidSample {
            name: sample_name,
            text,
            failure_position: expectation.failure_position,
        });
    }

    Ok(DslBundle {
        name,
        grammar,
        valid,
        invalid,
        countable,
    })
}

/// Check one text against the bundle's grammar.
pub fn validate(bundle: &DslBundle, text: &[u8]) -> ParseReport {
    recognize(&bundle.grammar, text)
}

/// Occurrence counts of the bundle's countable rules in one model.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ElementCounts(pub BTreeMap<String, u64>);

impl ElementCounts {
    pub fn get(&self, rule: &str) -> u64 {
        self.0.get(rule).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("text is not a sentence of the bundle grammar")]
pub struct NotParsable;

/// Count completed occurrences of each countable rule in one derivation
/// of `text` (ties broken by smallest origin, then lowest alternative).
pub fn count_rule_occurrences(
    bundle: &DslBundle,
    text: &[u8],
) -> Result<ElementCounts, NotParsable> {
    let derivation = earley::derive(&bundle.grammar, text).ok_or(NotParsable)?;
    let mut counts = ElementCounts(
        bundle
            .countable
            .iter()
            .map(|name| (name.clone(), 0))
            .collect(),
    );
    let mut stack = vec![&derivation];
    while let Some(node) = stack.pop() {
        let name = bundle.grammar.rule_name(node.rule);
        if let Some(slot) = counts.0.get_mut(name) {
            *slot += 1;
        }
        stack.extend(node.children.iter());
    }
    Ok(counts)
}
