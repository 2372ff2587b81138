//! Dataset quality gates: answer judging, multi-expert consensus, re-render
//! acceptance, rejection sampling against a base model, and the pass@k
//! measurement.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agentic::{run_episode, EpisodeConfig, EpisodeError, ANSWER_MARKER};
use crate::datastore::Store;
use crate::gateway::{ChatBackend, ChatMessage, CompletionParams, GatewayError};
use crate::renderer::SandboxPolicy;
use crate::types::{Termination, VQAInstance};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error("judge backend required for the judge_backend method")]
    MissingJudgeBackend,
    #[error("judge backend replied '{0}', expected YES or NO")]
    UnreadableJudgeReply(String),
    #[error("empty answer text")]
    EmptyAnswer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMethod {
    ExactNormalized,
    NumericTolerance,
    JudgeBackend,
}

/// Answer normalization: trim, strip LaTeX inline-math wrappers, case-fold,
/// collapse internal whitespace, strip trailing periods.
pub fn normalize_answer(text: &str) -> String {
    let mut s = text.trim();
    loop {
        let stripped = if s.len() >= 4 && s.starts_with("\\(") && s.ends_with("\\)") {
            &s[2..s.len() - 2]
        } else if s.len() >= 4 && s.starts_with("$$") && s.ends_with("$$") {
            &s[2..s.len() - 2]
        } else if s.len() >= 2 && s.starts_with('$') && s.ends_with('$') {
            &s[1..s.len() - 1]
        } else {
            break;
        };
        s = stripped.trim();
    }
    let lowered = s.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.trim_end_matches('.').trim().to_string()
}

fn parse_number(text: &str, ignored_units: &[String]) -> Option<f64> {
    let mut s = text.trim().to_string();
    for unit in ignored_units {
        let unit = unit.to_lowercase();
        if let Some(stripped) = s.strip_suffix(&unit) {
            s = stripped.trim().to_string();
        }
    }
    if let Ok(v) = s.parse::<f64>() {
        return Some(v);
    }
    // Simple fractions: a/b.
    if let Some((num, den)) = s.split_once('/') {
        let n: f64 = num.trim().parse().ok()?;
        let d: f64 = den.trim().parse().ok()?;
        if d != 0.0 {
            return Some(n / d);
        }
    }
    None
}

/// Deterministic verdict for the two offline methods. The numeric method
/// parses both sides (plain numbers and simple fractions) and compares
/// within relative tolerance; unparseable sides fall back to the
/// exact-normalized rule.
pub fn judge_answer(
    predicted: &str,
    gold: &str,
    method: JudgeMethod,
    tolerance: Option<f64>,
) -> Result<bool, FilterError> {
    judge_answer_with_units(predicted, gold, method, tolerance, &[])
}

pub fn judge_answer_with_units(
    predicted: &str,
    gold: &str,
    method: JudgeMethod,
    tolerance: Option<f64>,
    ignored_units: &[String],
) -> Result<bool, FilterError> {
    if predicted.trim().is_empty() || gold.trim().is_empty() {
        return Err(FilterError::EmptyAnswer);
    }
    let p = normalize_answer(predicted);
    let g = normalize_answer(gold);
    match method {
        JudgeMethod::ExactNormalized => Ok(p == g),
        JudgeMethod::NumericTolerance => {
            match (
                parse_number(&p, ignored_units),
                parse_number(&g, ignored_units),
            ) {
                (Some(x), Some(y)) => {
                    let tol = tolerance.unwrap_or(1e-6);
                    Ok(x == y || (x - y).abs() <= tol * x.abs().max(y.abs()))
                }
                _ => Ok(p == g),
            }
        }
        JudgeMethod::JudgeBackend => Err(FilterError::MissingJudgeBackend),
    }
}

/// Configured judge; wraps the offline methods and the optional backend hook.
#[derive(Clone)]
pub struct Judge {
    pub method: JudgeMethod,
    pub tolerance: f64,
    pub ignored_units: Vec<String>,
    pub backend: Option<Arc<dyn ChatBackend>>,
}

impl Judge {
    pub fn exact() -> Self {
        Judge {
            method: JudgeMethod::ExactNormalized,
            tolerance: 1e-6,
            ignored_units: Vec::new(),
            backend: None,
        }
    }

    pub fn numeric(tolerance: f64) -> Self {
        Judge {
            method: JudgeMethod::NumericTolerance,
            tolerance,
            ignored_units: Vec::new(),
            backend: None,
        }
    }

    pub fn verdict(&self, predicted: &str, gold: &str) -> Result<bool, FilterError> {
        match self.method {
            JudgeMethod::JudgeBackend => {
                let backend = self
                    .backend
                    .as_ref()
                    .ok_or(FilterError::MissingJudgeBackend)?;
                let prompt = format!(
                    "Decide whether the predicted answer matches the gold answer.\nPredicted: {predicted}\nGold: {gold}\nReply with exactly YES or NO."
                );
                let reply =
                    backend.complete(&[ChatMessage::user(prompt)], &CompletionParams::default())?;
                let text = reply.first().map(|m| m.text()).unwrap_or_default();
                let upper = text.trim().to_uppercase();
                if upper.starts_with("YES") {
                    Ok(true)
                } else if upper.starts_with("NO") {
                    Ok(false)
                } else {
                    Err(FilterError::UnreadableJudgeReply(text))
                }
            }
            method => judge_answer_with_units(
                predicted,
                gold,
                method,
                Some(self.tolerance),
                &self.ignored_units,
            ),
        }
    }
}

/// Pulls the answer out of a free-form model reply: the text after a final
/// answer marker when present, the whole reply otherwise.
pub fn extract_answer(reply: &str) -> String {
    for line in reply.lines().rev() {
        if let Some(rest) = line.trim_start().strip_prefix(ANSWER_MARKER) {
            return rest.trim().to_string();
        }
    }
    reply.trim().to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterDecision {
    Keep,
    Discard,
    Undecided,
}

/// What to do when a backend failure leaves an instance undecided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndecidedPolicy {
    /// Count the instance as discarded, flagged in the evidence.
    #[default]
    TreatAsDiscard,
    /// Retry the failing call once; a second failure leaves it undecided.
    Retry,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertSample {
    pub expert: String,
    pub sample_index: u32,
    pub response: String,
    pub verdict: bool,
}

/// Decision record with full evidence; re-running a filter over recorded
/// transcripts reproduces it bit for bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterEvidence {
    pub instance_id: String,
    pub filter: String,
    pub decision: FilterDecision,
    pub samples: Vec<ExpertSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ConsensusConfig {
    pub samples_per_expert: u32,
    pub params: CompletionParams,
    pub early_exit: bool,
    pub undecided: UndecidedPolicy,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            samples_per_expert: 2,
            params: CompletionParams::sampling(0.7, 1),
            early_exit: true,
            undecided: UndecidedPolicy::TreatAsDiscard,
        }
    }
}

fn question_message(instance: &VQAInstance) -> ChatMessage {
    match &instance.image_hash {
        Some(digest) => ChatMessage::user_with_image(&instance.question, digest),
        None => ChatMessage::user(&instance.question),
    }
}

fn call_with_retry(
    backend: &dyn ChatBackend,
    messages: &[ChatMessage],
    params: &CompletionParams,
    policy: UndecidedPolicy,
) -> Result<Vec<ChatMessage>, GatewayError> {
    match backend.complete(messages, params) {
        Ok(r) => Ok(r),
        Err(first) => match policy {
            UndecidedPolicy::TreatAsDiscard => Err(first),
            UndecidedPolicy::Retry => backend.complete(messages, params),
        },
    }
}

/// Keep iff any of the expert samples matches the gold answer. With early
/// exit disabled the call count is exactly experts x samples_per_expert.
pub fn consensus_filter(
    instance: &VQAInstance,
    experts: &[(String, Arc<dyn ChatBackend>)],
    cfg: &ConsensusConfig,
    judge: &Judge,
) -> Result<FilterEvidence, FilterError> {
    let mut samples = Vec::new();
    let mut any_correct = false;
    let mut failure: Option<String> = None;
    let question = question_message(instance);
    let mut params = cfg.params.clone();
    params.n_samples = 1;

    'experts: for (name, backend) in experts {
        for sample_index in 0..cfg.samples_per_expert {
            if cfg.early_exit && any_correct {
                break 'experts;
            }
            let reply = match call_with_retry(
                backend.as_ref(),
                std::slice::from_ref(&question),
                &params,
                cfg.undecided,
            ) {
                Ok(r) => r,
                Err(e) => {
                    failure = Some(e.to_string());
                    break 'experts;
                }
            };
            let response = reply.first().map(|m| m.text()).unwrap_or_default();
            let verdict = judge.verdict(&extract_answer(&response), &instance.answer)?;
            any_correct |= verdict;
            samples.push(ExpertSample {
                expert: name.clone(),
                sample_index,
                response,
                verdict,
            });
        }
    }

    let (decision, detail) = match failure {
        Some(e) => match cfg.undecided {
            UndecidedPolicy::TreatAsDiscard => (
                FilterDecision::Discard,
                Some(format!("undecided (backend error treated as discard): {e}")),
            ),
            UndecidedPolicy::Retry => (FilterDecision::Undecided, Some(e)),
        },
        None if any_correct => (FilterDecision::Keep, None),
        None => (FilterDecision::Discard, None),
    };
    Ok(FilterEvidence {
        instance_id: instance.id.clone(),
        filter: "consensus".into(),
        decision,
        samples,
        detail,
    })
}

/// Accept a re-rendered image iff any solver answers the question correctly
/// from that image alone.
pub fn img2code_accept(
    original: &VQAInstance,
    rerendered_image_hash: &str,
    solvers: &[(String, Arc<dyn ChatBackend>)],
    params: &CompletionParams,
    early_exit: bool,
    undecided: UndecidedPolicy,
    judge: &Judge,
) -> Result<FilterEvidence, FilterError> {
    let mut samples = Vec::new();
    let mut any_correct = false;
    let mut failure: Option<String> = None;
    let question = ChatMessage::user_with_image(&original.question, rerendered_image_hash);
    let mut params = params.clone();
    params.n_samples = 1;

    for (name, backend) in solvers {
        if early_exit && any_correct {
            break;
        }
        let reply = match call_with_retry(
            backend.as_ref(),
            std::slice::from_ref(&question),
            &params,
            undecided,
        ) {
            Ok(r) => r,
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        };
        let response = reply.first().map(|m| m.text()).unwrap_or_default();
        let verdict = judge.verdict(&extract_answer(&response), &original.answer)?;
        any_correct |= verdict;
        samples.push(ExpertSample {
            expert: name.clone(),
            sample_index: 0,
            response,
            verdict,
        });
    }

    let (decision, detail) = match failure {
        Some(e) => match undecided {
            UndecidedPolicy::TreatAsDiscard => (
                FilterDecision::Discard,
                Some(format!("undecided (backend error treated as discard): {e}")),
            ),
            UndecidedPolicy::Retry => (FilterDecision::Undecided, Some(e)),
        },
        None if any_correct => (FilterDecision::Keep, None),
        None => (FilterDecision::Discard, None),
    };
    Ok(FilterEvidence {
        instance_id: original.id.clone(),
        filter: "img2code".into(),
        decision,
        samples,
        detail,
    })
}

/// Drops every instance the base model already answers correctly at
/// temperature zero; the challenging remainder is retained in order.
pub fn rejection_sample(
    instances: &[VQAInstance],
    base_model: &dyn ChatBackend,
    judge: &Judge,
    undecided: UndecidedPolicy,
) -> Result<(Vec<VQAInstance>, Vec<FilterEvidence>), FilterError> {
    let params = CompletionParams {
        temperature: 0.0,
        n_samples: 1,
        ..Default::default()
    };
    let mut retained = Vec::new();
    let mut evidence = Vec::new();
    for instance in instances {
        let question = question_message(instance);
        match call_with_retry(
            base_model,
            std::slice::from_ref(&question),
            &params,
            undecided,
        ) {
            Ok(reply) => {
                let response = reply.first().map(|m| m.text()).unwrap_or_default();
                let verdict = judge.verdict(&extract_answer(&response), &instance.answer)?;
                // Correct base-model answer means the case is easy: drop it.
                let decision = if verdict {
                    FilterDecision::Discard
                } else {
                    FilterDecision::Keep
                };
                if decision == FilterDecision::Keep {
                    retained.push(instance.clone());
                }
                evidence.push(FilterEvidence {
                    instance_id: instance.id.clone(),
                    filter: "rejection".into(),
                    decision,
                    samples: vec![ExpertSample {
                        expert: "base_model".into(),
                        sample_index: 0,
                        response,
                        verdict,
                    }],
                    detail: None,
                });
            }
            Err(e) => {
                let decision = match undecided {
                    UndecidedPolicy::TreatAsDiscard => FilterDecision::Discard,
                    UndecidedPolicy::Retry => FilterDecision::Undecided,
                };
                evidence.push(FilterEvidence {
                    instance_id: instance.id.clone(),
                    filter: "rejection".into(),
                    decision,
                    samples: Vec::new(),
                    detail: Some(e.to_string()),
                });
            }
        }
    }
    Ok((retained, evidence))
}

/// Supplier of answer samples for pass@k: the solver alone, or the solver
/// working inside the full agentic loop.
pub trait AnswerSource {
    fn sample_answers(&self, instance: &VQAInstance, k: u32) -> Result<Vec<String>, FilterError>;
}

pub struct SolverAnswerSource<'a> {
    pub backend: &'a dyn ChatBackend,
    pub params: CompletionParams,
}

impl AnswerSource for SolverAnswerSource<'_> {
    fn sample_answers(&self, instance: &VQAInstance, k: u32) -> Result<Vec<String>, FilterError> {
        let mut params = self.params.clone();
        params.n_samples = k;
        let replies = self
            .backend
            .complete(&[question_message(instance)], &params)?;
        Ok(replies.iter().map(|m| extract_answer(&m.text())).collect())
    }
}

/// Runs the full solver/editor episode once per sample; unanswered episodes
/// contribute an empty (incorrect) sample.
pub struct AgenticAnswerSource<'a> {
    pub solver: &'a dyn ChatBackend,
    pub editor: &'a dyn ChatBackend,
    pub episode: EpisodeConfig,
    pub policy: &'a SandboxPolicy,
    pub store: &'a Store,
}

impl AnswerSource for AgenticAnswerSource<'_> {
    fn sample_answers(&self, instance: &VQAInstance, k: u32) -> Result<Vec<String>, FilterError> {
        let mut answers = Vec::with_capacity(k as usize);
        for sample in 0..k {
            let outcome = run_episode(
                instance,
                self.solver,
                self.editor,
                &self.episode,
                self.policy,
                self.store,
                &format!("passk-{}-{sample}", instance.id),
            )?;
            let answer = match outcome.trajectory.termination {
                Termination::Answered => outcome.trajectory.final_answer.unwrap_or_default(),
                _ => String::new(),
            };
            answers.push(answer);
        }
        Ok(answers)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuestionSamples {
    pub question_id: String,
    pub verdicts: Vec<bool>,
    pub n_correct: u32,
    pub backend_failed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PassAtKReport {
    pub k: u32,
    pub per_question: Vec<QuestionSamples>,
    /// Fraction of evaluated questions with at least one correct sample.
    pub aggregate: f64,
    /// Questions in the denominator (backend failures excluded).
    pub evaluated: usize,
}

impl PassAtKReport {
    /// pass@j over the same samples, j <= k. Monotone non-decreasing in j.
    pub fn aggregate_at(&self, j: u32) -> f64 {
        let evaluated: Vec<&QuestionSamples> = self
            .per_question
            .iter()
            .filter(|q| !q.backend_failed)
            .collect();
        if evaluated.is_empty() {
            return 0.0;
        }
        let solved = evaluated
            .iter()
            .filter(|q| q.verdicts.iter().take(j as usize).any(|v| *v))
            .count();
        solved as f64 / evaluated.len() as f64
    }
}

/// Samples k answers per question and reports the fraction of questions
/// with at least one correct sample. Questions whose sampling failed are
/// flagged and excluded from the denominator.
pub fn pass_at_k(
    questions: &[VQAInstance],
    source: &dyn AnswerSource,
    k: u32,
    judge: &Judge,
) -> Result<PassAtKReport, FilterError> {
    let mut per_question = Vec::with_capacity(questions.len());
    for q in questions {
        match source.sample_answers(q, k) {
            Ok(answers) => {
                let mut verdicts = Vec::with_capacity(answers.len());
                for a in &answers {
                    let v = !a.is_empty() && judge.verdict(a, &q.answer)?;
                    verdicts.push(v);
                }
                let n_correct = verdicts.iter().filter(|v| **v).count() as u32;
                per_question.push(QuestionSamples {
                    question_id: q.id.clone(),
                    verdicts,
                    n_correct,
                    backend_failed: false,
                });
            }
            Err(FilterError::Backend(e)) => {
                per_question.push(QuestionSamples {
                    question_id: q.id.clone(),
                    verdicts: Vec::new(),
                    n_correct: 0,
                    backend_failed: true,
                });
                let _ = e;
            }
            Err(other) => return Err(other),
        }
    }
    let report = PassAtKReport {
        k,
        aggregate: 0.0,
        evaluated: per_question.iter().filter(|q| !q.backend_failed).count(),
        per_question,
    };
    Ok(PassAtKReport {
        aggregate: report.aggregate_at(k),
        ..report
    })
}
