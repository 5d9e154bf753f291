//! Benchmark harness: run a task list through constrained and
//! unconstrained generation, validate every output against the bundle
//! grammar, and aggregate a report in the shape of the evaluation tables
//! (mean time, parse rates over completed runs, mean element counts,
//! constrained/unconstrained overhead factor).

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{DecodeSession, DecodeStatus, LogitProvider};
use crate::dsl::{count_rule_occurrences, DslBundle, ElementCounts};
use crate::masking::{TokenTrie, Vocabulary};
use crate::prompt::{assemble_prompt, PromptBundle};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchTask {
    pub id: u64,
    pub prompt: String,
}

#[derive(Debug, Error)]
#[error("line {line}: {message}")]
pub struct TaskFormatError {
    pub line: usize,
    pub message: String,
}

/// Load tasks from JSON Lines: `{"id": int, "prompt": string}` per line.
pub fn load_tasks(text: &str) -> Result<Vec<BenchTask>, TaskFormatError> {
    let mut tasks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let task: BenchTask = serde_json::from_str(line).map_err(|e| TaskFormatError {
            line: i + 1,
            message: e.to_string(),
        })?;
        tasks.push(task);
    }
    Ok(tasks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Constrained,
    Unconstrained,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Constrained => "constrained",
            Mode::Unconstrained => "unconstrained",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constrained" => Ok(Mode::Constrained),
            "unconstrained" => Ok(Mode::Unconstrained),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub modes: Vec<Mode>,
    pub budget: usize,
    pub jobs: usize,
    pub shortcut: bool,
    /// Few-shot examples prepended to every task prompt.
    pub examples: Vec<(String, String)>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            modes: vec![Mode::Constrained, Mode::Unconstrained],
            budget: 512,
            jobs: 1,
            shortcut: true,
            examples: Vec::new(),
        }
    }
}

/// One benchmark run. `status` is a decode status string, or `error` for
/// provider failures (recorded per row; a failing row never aborts the
/// whole benchmark).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: Mode,
    pub task_id: u64,
    pub status: String,
    pub time_s: f64,
    pub parsed: bool,
    pub lm_calls: usize,
    pub tokens_used: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub output: Vec<u8>,
    #[serde(skip)]
    pub counts: Option<ElementCounts>,
}

/// Aggregates for one mode. Budget-aborted and errored runs are counted
/// separately and excluded from the completed-run statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeReport {
    pub total: usize,
    pub completed: usize,
    pub aborted: usize,
    pub errors: usize,
    pub parsed: usize,
    pub parsed_pct: Option<f64>,
    pub mean_time_s: Option<f64>,
    pub mean_lm_calls: Option<f64>,
    pub mean_tokens_used: Option<f64>,
    pub mean_element_counts: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub bundle: String,
    pub budget: usize,
    pub modes: BTreeMap<String, ModeReport>,
    /// Mean constrained time over mean unconstrained time, when both are
    /// available.
    pub overhead_factor: Option<f64>,
    pub rows: Vec<BenchRow>,
}

pub const CSV_HEADER: &str = "mode,task_id,status,time_s,parsed,lm_calls,tokens_used";

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut csv = String::from(CSV_HEADER);
        csv.push('\n');
        for row in &self.rows {
            csv.push_str(&format!(
                "{},{},{},{:.6},{},{},{}\n",
                row.mode,
                row.task_id,
                row.status,
                row.time_s,
                row.parsed,
                row.lm_calls,
                row.tokens_used
            ));
        }
        csv
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn mode(&self, mode: Mode) -> Option<&ModeReport> {
        self.modes.get(&mode.to_string())
    }
}

/// Run every task in every configured mode. `make_provider` builds a
/// fresh provider per row, keeping rows independent under `jobs > 1`;
/// aggregation order is fixed by (mode, task) regardless of scheduling.
pub fn run_bench<F>(
    bundle: &DslBundle,
    vocab: &Arc<Vocabulary>,
    trie: &Arc<TokenTrie>,
    make_provider: F,
    tasks: &[BenchTask],
    cfg: &BenchConfig,
) -> BenchReport
where
    F: Fn(&BenchTask) -> Box<dyn LogitProvider + Send> + Sync,
{
    let specs: Vec<(Mode, &BenchTask)> = cfg
        .modes
        .iter()
        .flat_map(|&mode| tasks.iter().map(move |t| (mode, t)))
        .collect();

    let results: Mutex<Vec<Option<BenchRow>>> = Mutex::new(vec![None; specs.len()]);
    let next = AtomicUsize::new(0);
    let workers = cfg.jobs.max(1).min(specs.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= specs.len() {
                    break;
                }
                let (mode, task) = specs[i];
                let row = run_one(bundle, vocab, trie, &make_provider, task, mode, cfg);
                results.lock().unwrap()[i] = Some(row);
            });
        }
    });

    let rows: Vec<BenchRow> = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("all rows executed"))
        .collect();

    let mut modes = BTreeMap::new();
    for &mode in &cfg.modes {
        let mode_rows: Vec<&BenchRow> = rows.iter().filter(|r| r.mode == mode).collect();
        modes.insert(mode.to_string(), aggregate(&mode_rows, bundle));
    }

    let overhead_factor = match (
        modes
            .get(&Mode::Constrained.to_string())
            .and_then(|m| m.mean_time_s),
        modes
            .get(&Mode::Unconstrained.to_string())
            .and_then(|m| m.mean_time_s),
    ) {
        (Some(c), Some(u)) if u > 0.0 => Some(c / u),
        _ => None,
    };

    BenchReport {
        bundle: bundle.name.clone(),
        budget: cfg.budget,
        modes,
        overhead_factor,
        rows,
    }
}

fn run_one<F>(
    bundle: &DslBundle,
    vocab: &Arc<Vocabulary>,
    trie: &Arc<TokenTrie>,
    make_provider: &F,
    task: &BenchTask,
    mode: Mode,
    cfg: &BenchConfig,
) -> BenchRow
where
    F: Fn(&BenchTask) -> Box<dyn LogitProvider + Send> + Sync,
{
    let prompt = PromptBundle {
        examples: cfg.examples.clone(),
        task: task.prompt.clone(),
    };
    let prompt_tokens = assemble_prompt(&prompt, trie);
    let session = DecodeSession::new(
        Arc::clone(&bundle.grammar),
        Arc::clone(vocab),
        Arc::clone(trie),
        make_provider(task),
        prompt_tokens,
        cfg.budget,
    )
    .with_shortcut(cfg.shortcut);

    let outcome = match mode {
        Mode::Constrained => session.decode(),
        Mode::Unconstrained => session.decode_unconstrained(),
    };

    match outcome {
        Ok(result) => {
            let counts = count_rule_occurrences(bundle, &result.output).ok();
            BenchRow {
                mode,
                task_id: task.id,
                status: result.status.to_string(),
                time_s: result.wall_time_s,
                parsed: counts.is_some(),
                lm_calls: result.lm_calls,
                tokens_used: result.tokens_used,
                error: None,
                output: result.output,
                counts,
            }
        }
        Err(e) => BenchRow {
            mode,
            task_id: task.id,
            status: "error".into(),
            time_s: 0.0,
            parsed: false,
            lm_calls: 0,
            tokens_used: 0,
            error: Some(e.to_string()),
            output: Vec::new(),
            counts: None,
        },
    }
}

fn aggregate(rows: &[&BenchRow], bundle: &DslBundle) -> ModeReport {
    let total = rows.len();
    let aborted = rows
        .iter()
        .filter(|r| r.status == DecodeStatus::BudgetExhausted.to_string())
        .count();
    let errors = rows.iter().filter(|r| r.error.is_some()).count();
    let completed: Vec<&&BenchRow> = rows
        .iter()
        .filter(|r| r.error.is_none() && r.status != DecodeStatus::BudgetExhausted.to_string())
        .collect();
    let parsed_rows: Vec<&&&BenchRow> = completed.iter().filter(|r| r.parsed).collect();

    let mean = |values: Vec<f64>| -> Option<f64> {
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };

    let mut mean_element_counts = BTreeMap::new();
    if !parsed_rows.is_empty() {
        for rule in &bundle.countable {
            let sum: u64 = parsed_rows
                .iter()
                .map(|r| r.counts.as_ref().map(|c| c.get(rule)).unwrap_or(0))
                .sum();
            mean_element_counts.insert(rule.clone(), sum as f64 / parsed_rows.len() as f64);
        }
    }

    ModeReport {
        total,
        completed: completed.len(),
        aborted,
        errors,
        parsed: parsed_rows.len(),
        parsed_pct: if completed.is_empty() {
            None
        } else {
            Some(parsed_rows.len() as f64 / completed.len() as f64 * 100.0)
        },
        mean_time_s: mean(completed.iter().map(|r| r.time_s).collect()),
        mean_lm_calls: mean(completed.iter().map(|r| r.lm_calls as f64).collect()),
        mean_tokens_used: mean(completed.iter().map(|r| r.tokens_used as f64).collect()),
        mean_element_counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_file_parses() {
        let tasks =
            load_tasks("{\"id\": 0, \"prompt\": \"one\"}\n{\"id\": 1, \"prompt\": \"two\"}\n")
                .unwrap();
        assert_eq!(tasks.len(), 2);
        assert_eq!(tasks[1].prompt, "two");
        assert!(load_tasks("{\"id\": \"x\"}").is_err());
    }

    #[test]
    fn mode_parse_and_display() {
        assert_eq!("constrained".parse::<Mode>().unwrap(), Mode::Constrained);
        assert_eq!(Mode::Unconstrained.to_string(), "unconstrained");
        assert!("greedy".parse::<Mode>().is_err());
    }
}
