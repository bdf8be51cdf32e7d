//! Grading, Mean@k and cost accounting.

use std::collections::BTreeMap;
use std::path::Path;

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Prices;
use crate::dataset::Sample;
use crate::distill::collect_used_ids;
use crate::gateway::{ModelClient, ModelRole, TokenLedger};
use crate::prompts::{PromptError, PromptLibrary};
use crate::store::{ExperienceId, ExperienceStore};
use crate::trajectory::{answers_equal, extract_answer, Answer};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("score matrix is empty")]
    EmptyMatrix,
    #[error("score matrix row {row} has {len} entries, expected {expected}")]
    Ragged { row: usize, len: usize, expected: usize },
    #[error("score matrix entry ({row}, {col}) is {value}, not 0 or 1")]
    NonBinary { row: usize, col: usize, value: u8 },
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// 1 when the prediction matches gold after normalization, else 0.
pub fn grade(prediction: &Answer, gold: &Answer) -> u8 {
    u8::from(answers_equal(prediction, gold))
}

/// Average over problems of the per-problem average over the `k` runs.
pub fn mean_at_k(scores: &[Vec<u8>]) -> Result<f64, EvalError> {
    let expected = scores
        .first()
        .map(Vec::len)
        .filter(|&k| k > 0)
        .ok_or(EvalError::EmptyMatrix)?;
    let mut total = 0.0;
    for (row, runs) in scores.iter().enumerate() {
        if runs.len() != expected {
            return Err(EvalError::Ragged {
                row,
                len: runs.len(),
                expected,
            });
        }
        if let Some((col, &value)) = runs.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(EvalError::NonBinary { row, col, value });
        }
        total += runs.iter().map(|&s| f64::from(s)).sum::<f64>() / expected as f64;
    }
    Ok(total / scores.len() as f64)
}

/// Σ over roles and token kinds of tokens × price per million.
pub fn cost_report(ledger: &TokenLedger, prices: &Prices) -> f64 {
    [
        (ModelRole::Student, prices.student),
        (ModelRole::Teacher, prices.teacher),
    ]
    .iter()
    .map(|(role, price)| {
        let c = ledger.get(*role);
        (c.prompt_tokens as f64 * price.prompt + c.completion_tokens as f64 * price.completion) / 1_000_000.0
    })
    .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemResult {
    pub id: String,
    pub gold: String,
    pub scores: Vec<u8>,
    /// Canonical answer per run; `None` when the call failed or no answer was found.
    pub answers: Vec<Option<String>>,
    pub errors: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub problems: usize,
    pub mean_at_k: f64,
    pub results: Vec<ProblemResult>,
    pub ledger: TokenLedger,
    pub cost: f64,
    pub store_checksum: String,
    pub store_items: usize,
    pub prompts_checksum: String,
    /// Per-item count of problems whose runs reported using it. Empty when
    /// usage recording is off. The store itself is never modified.
    pub usage: BTreeMap<ExperienceId, u64>,
}

impl EvalReport {
    pub fn score_matrix(&self) -> Vec<Vec<u8>> {
        self.results.iter().map(|r| r.scores.clone()).collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# Evaluation report\n\n");
        out.push_str("| metric | value |\n|---|---|\n");
        out.push_str(&format!("| mean@{} | {:.4} |\n", self.k, self.mean_at_k));
        out.push_str(&format!("| problems (N) | {} |\n", self.problems));
        out.push_str(&format!("| runs per problem (k) | {} |\n", self.k));
        out.push_str(&format!("| student tokens | {} |\n", self.ledger.student.total()));
        out.push_str(&format!("| teacher tokens | {} |\n", self.ledger.teacher.total()));
        out.push_str(&format!("| cost | {:.4} |\n", self.cost));
        out.push_str(&format!("| experience items | {} |\n", self.store_items));
        out.push_str(&format!("| store checksum | `{}` |\n", self.store_checksum));
        out.push_str("\n| problem | gold | scores |\n|---|---|---|\n");
        for r in &self.results {
            let scores: Vec<String> = r.scores.iter().map(u8::to_string).collect();
            out.push_str(&format!("| {} | {} | {} |\n", r.id, r.gold, scores.join(" ")));
        }
        out
    }

    /// Writes `report.json` and `report.md` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self).expect("report serializes") + "\n";
        std::fs::write(dir.join("report.json"), json)?;
        std::fs::write(dir.join("report.md"), self.to_markdown())
    }
}

/// Runs every problem `k` times against the frozen `store`. Failed calls
/// score 0 and are recorded in the report.
pub async fn evaluate(
    dataset: &[Sample],
    store: &ExperienceStore,
    student: &ModelClient,
    prompts: &PromptLibrary,
    k: usize,
    record_usage: bool,
    prices: &Prices,
) -> Result<EvalReport, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if dataset.is_empty() {
        return Err(EvalError::EmptyMatrix);
    }
    let serialized = store.serialize();
    let rendered = dataset
        .iter()
        .map(|s| prompts.build_student_prompt(s, &serialized))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs = rendered.iter().map(|p| {
        let req = student.request(p.messages.clone());
        async move { student.gateway.sample_parallel(&req, k).await }
    });
    let outcomes = join_all(jobs).await;

    let mut ledger = TokenLedger::default();
    let mut usage: BTreeMap<ExperienceId, u64> = BTreeMap::new();
    let mut results = Vec::with_capacity(dataset.len());
    for ((sample, prompt), outcome) in dataset.iter().zip(&rendered).zip(outcomes) {
        let mut result = ProblemResult {
            id: sample.id.clone(),
            gold: sample.gold.canonical_text.clone(),
            scores: vec![0; k],
            answers: vec![None; k],
            errors: vec![None; k],
        };
        let mut used_here = Vec::new();
        match outcome {
            Ok(slots) => {
                for (j, slot) in slots.into_iter().enumerate() {
                    match slot {
                        Ok(resp) => {
                            ledger.record(&resp, ModelRole::Student);
                            let text = resp.first_text();
                            match extract_answer(text) {
                                Ok(answer) => {
                                    result.scores[j] = grade(&answer, &sample.gold);
                                    result.answers[j] = Some(answer.canonical_text);
                                }
                                Err(e) => result.errors[j] = Some(e.to_string()),
                            }
                            if record_usage {
                                used_here.extend(collect_used_ids(text).0);
                            }
                        }
                        Err(e) => {
                            tracing::warn!(problem = %sample.id, run = j, error = %e, "evaluation call failed");
                            result.errors[j] = Some(e.to_string());
                        }
                    }
                }
            }
            Err(e) => {
                tracing::warn!(problem = %sample.id, error = %e, "all evaluation calls failed");
                result.errors = vec![Some(e.to_string()); k];
            }
        }
        used_here.sort();
        used_here.dedup();
        for id in used_here
            .into_iter()
            .filter(|id| prompt.experience_ids_included.contains(id))
        {
            *usage.entry(id).or_default() += 1;
        }
        results.push(result);
    }

    let scores: Vec<Vec<u8>> = results.iter().map(|r| r.scores.clone()).collect();
    Ok(EvalReport {
        k,
        problems: dataset.len(),
        mean_at_k: mean_at_k(&scores)?,
        results,
        cost: cost_report(&ledger, prices),
        ledger,
        store_checksum: store.checksum(),
        store_items: store.len(),
        prompts_checksum: prompts.checksum(),
        usage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TokenPrice;
    use crate::gateway::{ChatResponse, Usage};

    #[test]
    fn grading() {
        assert_eq!(grade(&Answer::new("B"), &Answer::new("B")), 1);
        assert_eq!(grade(&Answer::new("b "), &Answer::new("B")), 1);
        assert_eq!(grade(&Answer::new("B"), &Answer::new("C")), 0);
    }

    #[test]
    fn mean_examples() {
        assert_eq!(mean_at_k(&vec![vec![1; 5]; 10]), Ok(1.0));
        assert_eq!(mean_at_k(&[vec![1, 0, 1, 0, 1]]), Ok(0.6));
        assert_eq!(mean_at_k(&[vec![1], vec![0]]), Ok(0.5));
    }

    #[test]
    fn mean_rejects_bad_matrices() {
        assert_eq!(mean_at_k(&[]), Err(EvalError::EmptyMatrix));
        assert_eq!(mean_at_k(&[vec![]]), Err(EvalError::EmptyMatrix));
        assert!(matches!(
            mean_at_k(&[vec![1, 0], vec![1]]),
            Err(EvalError::Ragged { row: 1, .. })
        ));
        assert!(matches!(mean_at_k(&[vec![2]]), Err(EvalError::NonBinary { .. })));
    }

    fn response(prompt: u64, completion: u64) -> ChatResponse {
        ChatResponse {
            completions: vec!["x".into()],
            usage: Usage {
                prompt_tokens: prompt,
                completion_tokens: completion,
            },
            usage_estimated: false,
            backend_id: "t".into(),
            attempts: 1,
        }
    }

    #[test]
    fn cost_examples() {
        let prices = Prices {
            student: TokenPrice {
                prompt: 0.25,
                completion: 0.5,
            },
            teacher: TokenPrice {
                prompt: 1.0,
                completion: 4.0,
            },
        };
        assert_eq!(cost_report(&TokenLedger::default(), &prices), 0.0);
        let ledger = TokenLedger::default().accumulate(&response(0, 1_000_000), ModelRole::Student);
        assert!((cost_report(&ledger, &prices) - 0.5).abs() < 1e-12);

        // 21M student tokens (15M prompt, 6M completion), 6M teacher (4M, 2M)
        let ledger = TokenLedger::default()
            .accumulate(&response(15_000_000, 6_000_000), ModelRole::Student)
            .accumulate(&response(4_000_000, 2_000_000), ModelRole::Teacher);
        let hand = 15.0 * 0.25 + 6.0 * 0.5 + 4.0 * 1.0 + 2.0 * 4.0;
        assert!((cost_report(&ledger, &prices) - hand).abs() < 1e-9);
    }

    #[test]
    fn cost_is_linear_under_merge() {
        let prices = Prices {
            student: TokenPrice {
                prompt: 0.3,
                completion: 1.1,
            },
            teacher: TokenPrice {
                prompt: 2.0,
                completion: 8.0,
            },
        };
        let a = TokenLedger::default().accumulate(&response(123, 456), ModelRole::Student);
        let b = TokenLedger::default().accumulate(&response(789, 10), ModelRole::Teacher);
        let merged = cost_report(&a.merge(&b), &prices);
        assert!((merged - cost_report(&a, &prices) - cost_report(&b, &prices)).abs() < 1e-12);
    }
}
