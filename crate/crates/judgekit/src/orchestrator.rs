//! Hierarchical task decomposition and evaluation orchestration.
//!
//! An evaluation request is decomposed into one primary task per aspect and
//! one subtask per sub-aspect, each carrying its instruction text. Every
//! subtask is rendered into a prompt, routed to the expert backend registered
//! for its aspect, and the judge's structured output is parsed back into
//! scored evaluations. A successful run yields a complete
//! [`EvaluationBundle`] covering the whole rubric, with raw judge texts
//! retained for audit.
//!
//! Subtask calls may run concurrently; aggregation is a deterministic merge
//! keyed by (response index, sub-aspect), so completion order never affects
//! the bundle.

use crate::backends::{Judge, JudgeError, JudgeRequest, RequestKey};
use crate::taxonomy::{AspectId, SubAspectEvaluation, TaxonomySpec};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use thiserror::Error;

/// Whether both responses are judged in one prompt or separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Pairwise,
    Single,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Pairwise => "pairwise",
            EvalMode::Single => "single",
        })
    }
}

impl std::str::FromStr for EvalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pairwise" => Ok(EvalMode::Pairwise),
            "single" => Ok(EvalMode::Single),
            other => Err(format!("unknown mode {other:?} (expected pairwise|single)")),
        }
    }
}

/// One evaluation input: a question plus one or two candidate responses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub question: String,
    pub responses: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_info: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SampleError {
    #[error("sample {0:?}: question must be non-empty")]
    EmptyQuestion(String),
    #[error("sample {id:?}: expected 1 or 2 responses, found {found}")]
    ResponseCount { id: String, found: usize },
    #[error("sample id must be non-empty")]
    EmptyId,
}

impl Sample {
    pub fn validate(&self) -> Result<(), SampleError> {
        if self.id.is_empty() {
            return Err(SampleError::EmptyId);
        }
        if self.question.is_empty() {
            return Err(SampleError::EmptyQuestion(self.id.clone()));
        }
        if self.responses.is_empty() || self.responses.len() > 2 {
            return Err(SampleError::ResponseCount {
                id: self.id.clone(),
                found: self.responses.len(),
            });
        }
        Ok(())
    }
}

/// One sub-aspect subtask inside a primary task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskNode {
    pub code: String,
    pub instruction: String,
}

/// A primary per-aspect task with its subtasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimaryTask {
    pub aspect: AspectId,
    pub instruction: String,
    pub subtasks: Vec<SubtaskNode>,
}

/// The decomposed evaluation task for one sample: mirrors the taxonomy
/// exactly (same aspects, same sub-aspects, same order).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTree {
    pub sample_ref: String,
    pub primary_tasks: Vec<PrimaryTask>,
}

/// Flattened view of one subtask together with its parent-aspect context.
#[derive(Debug, Clone, Copy)]
pub struct Subtask<'t> {
    pub aspect: AspectId,
    pub aspect_instruction: &'t str,
    pub code: &'t str,
    pub instruction: &'t str,
}

impl TaskTree {
    /// Subtasks in rubric order, with aspect context attached.
    pub fn subtasks(&self) -> impl Iterator<Item = Subtask<'_>> {
        self.primary_tasks.iter().flat_map(|task| {
            task.subtasks.iter().map(move |sub| Subtask {
                aspect: task.aspect,
                aspect_instruction: &task.instruction,
                code: &sub.code,
                instruction: &sub.instruction,
            })
        })
    }

    /// True when the rubric produced no tasks (degenerate but valid).
    pub fn is_empty(&self) -> bool {
        self.primary_tasks.iter().all(|t| t.subtasks.is_empty())
    }
}

/// Decomposes the evaluation of `sample` into per-aspect tasks and
/// per-sub-aspect subtasks, each carrying its instruction text.
pub fn decompose(spec: &TaxonomySpec, sample: &Sample) -> TaskTree {
    TaskTree {
        sample_ref: sample.id.clone(),
        primary_tasks: spec
            .aspects
            .iter()
            .map(|aspect| PrimaryTask {
                aspect: aspect.id,
                instruction: aspect.instruction.clone(),
                subtasks: aspect
                    .sub_aspects
                    .iter()
                    .map(|sub| SubtaskNode {
                        code: sub.code.clone(),
                        instruction: sub.instruction.clone(),
                    })
                    .collect(),
            })
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Prompt rendering
// ---------------------------------------------------------------------------

const DEFAULT_PAIRWISE_TEMPLATE: &str = "\
{aspect_instruction}

{subaspect_instruction}

Question:
{question}

Response 1:
{response_1}

Response 2:
{response_2}

{reference_block}Output format:
For each response, in order, write a line \"Analysis: <your reasoning>\" followed by a line \"Score: <integer {score_min}-{score_max}>\".
";

const DEFAULT_SINGLE_TEMPLATE: &str = "\
{aspect_instruction}

{subaspect_instruction}

Question:
{question}

Response:
{response_1}

{reference_block}Output format:
Write a line \"Analysis: <your reasoning>\" followed by a line \"Score: <integer {score_min}-{score_max}>\".
";

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("pairwise prompt requires 2 responses, sample {id:?} has {found}")]
    PairwiseNeedsTwo { id: String, found: usize },
    #[error("template file {0}: {1}")]
    TemplateIo(String, std::io::Error),
}

/// Editable plain-text prompt templates with named placeholders.
///
/// Recognized placeholders: `{aspect_instruction}`, `{subaspect_instruction}`,
/// `{question}`, `{response_1}`, `{response_2}`, `{reference_block}`,
/// `{score_min}`, `{score_max}`. Unknown placeholders pass through verbatim.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    pairwise: String,
    single: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            pairwise: DEFAULT_PAIRWISE_TEMPLATE.to_string(),
            single: DEFAULT_SINGLE_TEMPLATE.to_string(),
        }
    }
}

impl PromptTemplates {
    /// Loads `pairwise.txt` and `single.txt` from a directory.
    pub fn from_dir(dir: &Path) -> Result<PromptTemplates, RenderError> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path)
                .map_err(|e| RenderError::TemplateIo(path.display().to_string(), e))
        };
        Ok(PromptTemplates {
            pairwise: read("pairwise.txt")?,
            single: read("single.txt")?,
        })
    }

    pub fn render(
        &self,
        subtask: &Subtask<'_>,
        sample: &Sample,
        mode: EvalMode,
        score_min: i32,
        score_max: i32,
    ) -> Result<String, RenderError> {
        if mode == EvalMode::Pairwise && sample.responses.len() != 2 {
            return Err(RenderError::PairwiseNeedsTwo {
                id: sample.id.clone(),
                found: sample.responses.len(),
            });
        }
        let reference_block = match &sample.reference_info {
            Some(info) => format!("Reference Information:\n{info}\n\n"),
            None => String::new(),
        };
        let empty = String::new();
        let response_2 = sample.responses.get(1).unwrap_or(&empty);
        let min = score_min.to_string();
        let max = score_max.to_string();
        let vars: [(&str, &str); 8] = [
            ("aspect_instruction", subtask.aspect_instruction),
            ("subaspect_instruction", subtask.instruction),
            ("question", &sample.question),
            ("response_1", &sample.responses[0]),
            ("response_2", response_2),
            ("reference_block", &reference_block),
            ("score_min", &min),
            ("score_max", &max),
        ];
        let template = match mode {
            EvalMode::Pairwise => &self.pairwise,
            EvalMode::Single => &self.single,
        };
        Ok(substitute(template, &vars))
    }
}

/// Single-pass placeholder substitution; substituted text is never rescanned.
fn substitute(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = &after[..close];
                if let Some((_, value)) = vars.iter().find(|(k, _)| *k == name) {
                    out.push_str(value);
                } else {
                    out.push('{');
                    out.push_str(name);
                    out.push('}');
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Renders with the default templates and the rubric's score bounds.
pub fn render_prompt(
    subtask: &Subtask<'_>,
    sample: &Sample,
    mode: EvalMode,
    spec: &TaxonomySpec,
) -> Result<String, RenderError> {
    PromptTemplates::default().render(subtask, sample, mode, spec.score_min, spec.score_max)
}

// ---------------------------------------------------------------------------
// Judge output parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Error)]
pub enum ParseError {
    #[error("no score line found in judge output")]
    MissingScore { raw: String },
    #[error("expected {expected} score line(s), found {found}")]
    ScoreCount {
        expected: usize,
        found: usize,
        raw: String,
    },
    #[error("score {score} outside [{min}, {max}]")]
    ScoreOutOfRange { score: i64, min: i32, max: i32 },
    #[error("empty rationale before a score line")]
    EmptyRationale { raw: String },
}

/// Reads the integer off a `Score:` line, tolerating `**` decoration, case,
/// missing space, and trailing text such as `4/5`.
fn score_from_line(line: &str) -> Option<i64> {
    let trimmed = line.trim().trim_matches('*').trim();
    let lower = trimmed.to_ascii_lowercase();
    let rest = lower.strip_prefix("score")?;
    let rest = rest.trim_start();
    let rest = rest.strip_prefix(':')?.trim_start();
    let digits: String = rest
        .chars()
        .take_while(|c| c.is_ascii_digit() || *c == '-' || *c == '+')
        .collect();
    if digits.chars().any(|c| c.is_ascii_digit()) {
        digits.parse().ok()
    } else {
        None
    }
}

/// True for presentation headers that carry no rationale content.
fn is_header_line(line: &str) -> bool {
    let t = line.trim().trim_matches('*').trim();
    t.starts_with("Evaluation of Response") || (t.ends_with(':') && !t.contains(". "))
}

fn clean_rationale(lines: &[&str]) -> String {
    let mut kept = Vec::new();
    for line in lines {
        let t = line.trim().trim_start_matches('*').trim_end_matches('*').trim();
        if t.is_empty() {
            continue;
        }
        let lower = t.to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix("analysis:") {
            let content = t[t.len() - rest.len()..].trim();
            if !content.is_empty() {
                kept.push(content.to_string());
            }
            continue;
        }
        if is_header_line(t) {
            continue;
        }
        kept.push(t.to_string());
    }
    kept.join("\n")
}

/// Extracts, per response, a rationale block and an integer score from the
/// judge text. Single mode expects exactly one `Score:` line, pairwise
/// exactly two (in response order). Text after the final score line is
/// ignored.
pub fn parse_judge_output(
    text: &str,
    sub_aspect: &str,
    mode: EvalMode,
    score_min: i32,
    score_max: i32,
) -> Result<Vec<SubAspectEvaluation>, ParseError> {
    let mut parsed: Vec<(i64, String)> = Vec::new();
    let mut block: Vec<&str> = Vec::new();
    for line in text.lines() {
        if let Some(score) = score_from_line(line) {
            parsed.push((score, clean_rationale(&block)));
            block.clear();
        } else {
            block.push(line);
        }
    }

    let expected = match mode {
        EvalMode::Single => 1,
        EvalMode::Pairwise => 2,
    };
    if parsed.is_empty() {
        return Err(ParseError::MissingScore { raw: text.to_string() });
    }
    if parsed.len() != expected {
        return Err(ParseError::ScoreCount {
            expected,
            found: parsed.len(),
            raw: text.to_string(),
        });
    }
    let mut evaluations = Vec::with_capacity(expected);
    for (score, rationale) in parsed {
        if score < i64::from(score_min) || score > i64::from(score_max) {
            return Err(ParseError::ScoreOutOfRange {
                score,
                min: score_min,
                max: score_max,
            });
        }
        if rationale.is_empty() {
            return Err(ParseError::EmptyRationale { raw: text.to_string() });
        }
        evaluations.push(SubAspectEvaluation {
            sub_aspect: sub_aspect.to_string(),
            score: score as i32,
            rationale,
        });
    }
    Ok(evaluations)
}

// ---------------------------------------------------------------------------
// Bundles and the expert registry
// ---------------------------------------------------------------------------

/// Verbatim judge text retained for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawOutput {
    pub sub_aspect: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_index: Option<usize>,
    pub text: String,
}

/// A full evaluation of one sample: every sub-aspect of the rubric scored
/// once per response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationBundle {
    pub sample_ref: String,
    pub mode: EvalMode,
    /// One map per response, keyed by sub-aspect code.
    pub per_response: Vec<BTreeMap<String, SubAspectEvaluation>>,
    pub backend_id: String,
    pub raw_outputs: Vec<RawOutput>,
}

#[derive(Debug, Clone, Error)]
#[error("bundle for sample {sample_ref:?} incomplete: response {response_index} missing {missing:?}")]
pub struct BundleIncomplete {
    pub sample_ref: String,
    pub response_index: usize,
    pub missing: Vec<String>,
}

impl EvaluationBundle {
    /// Checks that every sub-aspect of the rubric appears exactly once per
    /// response.
    pub fn validate_complete(&self, spec: &TaxonomySpec) -> Result<(), BundleIncomplete> {
        let codes = spec.sub_aspect_codes();
        for (idx, entries) in self.per_response.iter().enumerate() {
            let missing: Vec<String> = codes
                .iter()
                .filter(|c| !entries.contains_key(**c))
                .map(|c| c.to_string())
                .collect();
            if !missing.is_empty() || entries.len() != codes.len() {
                let mut missing = missing;
                if missing.is_empty() {
                    // Extra keys beyond the rubric.
                    missing = entries
                        .keys()
                        .filter(|k| !codes.contains(&k.as_str()))
                        .map(|k| format!("unexpected:{k}"))
                        .collect();
                }
                return Err(BundleIncomplete {
                    sample_ref: self.sample_ref.clone(),
                    response_index: idx,
                    missing,
                });
            }
        }
        Ok(())
    }

    /// Sum of scores for one response across all sub-aspects.
    pub fn response_total(&self, response_index: usize) -> i64 {
        self.per_response
            .get(response_index)
            .map(|m| m.values().map(|e| i64::from(e.score)).sum())
            .unwrap_or(0)
    }

    /// Sum of scores across all responses and sub-aspects.
    pub fn total_score(&self) -> i64 {
        (0..self.per_response.len()).map(|i| self.response_total(i)).sum()
    }
}

/// Maps each aspect to the expert backend that serves it.
#[derive(Clone, Default)]
pub struct ExpertRegistry {
    experts: BTreeMap<AspectId, Arc<dyn Judge>>,
}

impl ExpertRegistry {
    pub fn new() -> ExpertRegistry {
        ExpertRegistry::default()
    }

    pub fn register(mut self, aspect: AspectId, judge: Arc<dyn Judge>) -> Self {
        self.experts.insert(aspect, judge);
        self
    }

    /// Registers the same backend for all three aspects.
    pub fn uniform(judge: Arc<dyn Judge>) -> ExpertRegistry {
        let mut registry = ExpertRegistry::new();
        for aspect in AspectId::ALL {
            registry.experts.insert(aspect, judge.clone());
        }
        registry
    }

    pub fn get(&self, aspect: AspectId) -> Option<&Arc<dyn Judge>> {
        self.experts.get(&aspect)
    }

    /// Aspects of `spec` with no registered expert.
    pub fn missing_for(&self, spec: &TaxonomySpec) -> Vec<AspectId> {
        spec.aspects
            .iter()
            .map(|a| a.id)
            .filter(|id| !self.experts.contains_key(id))
            .collect()
    }

    /// Audit string naming the backend serving each aspect.
    pub fn backend_id_string(&self, spec: &TaxonomySpec) -> String {
        spec.aspects
            .iter()
            .filter_map(|a| self.experts.get(&a.id).map(|j| format!("{}={}", a.id, j.id())))
            .collect::<Vec<_>>()
            .join("|")
    }
}

// ---------------------------------------------------------------------------
// Evaluation runs
// ---------------------------------------------------------------------------

/// One failed subtask inside a partial bundle.
#[derive(Debug, Clone)]
pub struct SubtaskFailure {
    pub sub_aspect: String,
    pub response_index: Option<usize>,
    pub cause: String,
    /// True when the backend reported retry exhaustion.
    pub exhausted: bool,
}

impl fmt::Display for SubtaskFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.sub_aspect)?;
        if let Some(idx) = self.response_index {
            write!(f, "[response {idx}]")?;
        }
        write!(f, ": {}", self.cause)
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    InvalidSample(#[from] SampleError),
    #[error("mode {mode} requires 2 responses, sample {id:?} has {found}")]
    ModeMismatch {
        mode: EvalMode,
        id: String,
        found: usize,
    },
    #[error("no expert registered for aspect(s): {}", .0.iter().map(|a| a.code()).collect::<Vec<_>>().join(", "))]
    MissingExperts(Vec<AspectId>),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("partial bundle for sample {sample_ref:?}; failed subtasks: {}", .failed.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("; "))]
    Partial {
        sample_ref: String,
        failed: Vec<SubtaskFailure>,
    },
}

impl EvalError {
    /// True when any underlying failure was backend retry exhaustion.
    pub fn any_exhausted(&self) -> bool {
        match self {
            EvalError::Partial { failed, .. } => failed.iter().any(|f| f.exhausted),
            _ => false,
        }
    }
}

/// Knobs for an evaluation run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Concurrent backend calls.
    pub workers: usize,
    pub templates: PromptTemplates,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            workers: 4,
            templates: PromptTemplates::default(),
        }
    }
}

const FORMAT_RETRY_SUFFIX: &str = "\n\nRespond in the required format.";

struct CallPlan {
    sub_aspect: String,
    response_index: Option<usize>,
    prompt: String,
    key: RequestKey,
    aspect: AspectId,
}

type CallOutcome = Result<(String, Vec<(usize, SubAspectEvaluation)>), SubtaskFailure>;

/// Runs the full hierarchical evaluation of one sample.
///
/// Invokes each aspect's expert once per subtask (pairwise) or once per
/// (response, subtask) pair (single mode). A judge output that fails to
/// parse is retried once with a format reminder appended to the prompt.
/// Either every subtask succeeds and the bundle is complete, or a
/// [`EvalError::Partial`] names the failed subtasks.
pub fn run_evaluation(
    sample: &Sample,
    spec: &TaxonomySpec,
    registry: &ExpertRegistry,
    mode: EvalMode,
    opts: &RunOptions,
) -> Result<EvaluationBundle, EvalError> {
    sample.validate()?;
    if mode == EvalMode::Pairwise && sample.responses.len() != 2 {
        return Err(EvalError::ModeMismatch {
            mode,
            id: sample.id.clone(),
            found: sample.responses.len(),
        });
    }
    let missing = registry.missing_for(spec);
    if !missing.is_empty() {
        return Err(EvalError::MissingExperts(missing));
    }

    let tree = decompose(spec, sample);
    if tree.is_empty() {
        log::warn!("sample {}: rubric produced an empty task tree", sample.id);
    }

    let mut plans: Vec<CallPlan> = Vec::new();
    match mode {
        EvalMode::Pairwise => {
            for subtask in tree.subtasks() {
                let prompt =
                    opts.templates
                        .render(&subtask, sample, mode, spec.score_min, spec.score_max)?;
                plans.push(CallPlan {
                    sub_aspect: subtask.code.to_string(),
                    response_index: None,
                    prompt,
                    key: RequestKey {
                        sample_id: sample.id.clone(),
                        sub_aspect: subtask.code.to_string(),
                        mode,
                        response_index: None,
                    },
                    aspect: subtask.aspect,
                });
            }
        }
        EvalMode::Single => {
            for response_index in 0..sample.responses.len() {
                let view = Sample {
                    responses: vec![sample.responses[response_index].clone()],
                    ..sample.clone()
                };
                for subtask in tree.subtasks() {
                    let prompt = opts.templates.render(
                        &subtask,
                        &view,
                        mode,
                        spec.score_min,
                        spec.score_max,
                    )?;
                    plans.push(CallPlan {
                        sub_aspect: subtask.code.to_string(),
                        response_index: Some(response_index),
                        prompt,
                        key: RequestKey {
                            sample_id: sample.id.clone(),
                            sub_aspect: subtask.code.to_string(),
                            mode,
                            response_index: Some(response_index),
                        },
                        aspect: subtask.aspect,
                    });
                }
            }
        }
    }

    let outcomes: Vec<CallOutcome> = parallel_map(plans.len(), opts.workers, |i| {
        let plan = &plans[i];
        let judge = registry
            .get(plan.aspect)
            .expect("registry checked total above");
        execute_plan(plan, judge.as_ref(), spec, mode)
    });

    let mut per_response: Vec<BTreeMap<String, SubAspectEvaluation>> =
        vec![BTreeMap::new(); sample.responses.len()];
    let mut raw_outputs = Vec::with_capacity(plans.len());
    let mut failed = Vec::new();
    for (plan, outcome) in plans.iter().zip(outcomes) {
        match outcome {
            Ok((raw, evals)) => {
                raw_outputs.push(RawOutput {
                    sub_aspect: plan.sub_aspect.clone(),
                    response_index: plan.response_index,
                    text: raw,
                });
                for (response_index, eval) in evals {
                    per_response[response_index].insert(plan.sub_aspect.clone(), eval);
                }
            }
            Err(failure) => failed.push(failure),
        }
    }
    if !failed.is_empty() {
        return Err(EvalError::Partial {
            sample_ref: sample.id.clone(),
            failed,
        });
    }

    Ok(EvaluationBundle {
        sample_ref: sample.id.clone(),
        mode,
        per_response,
        backend_id: registry.backend_id_string(spec),
        raw_outputs,
    })
}

/// Evaluates each response independently in single mode and merges the
/// results into one pairwise-comparable bundle (mode recorded as single).
pub fn single_then_compare(
    sample: &Sample,
    spec: &TaxonomySpec,
    registry: &ExpertRegistry,
    opts: &RunOptions,
) -> Result<EvaluationBundle, EvalError> {
    sample.validate()?;
    if sample.responses.len() != 2 {
        return Err(EvalError::ModeMismatch {
            mode: EvalMode::Single,
            id: sample.id.clone(),
            found: sample.responses.len(),
        });
    }
    run_evaluation(sample, spec, registry, EvalMode::Single, opts)
}

fn execute_plan(
    plan: &CallPlan,
    judge: &dyn Judge,
    spec: &TaxonomySpec,
    mode: EvalMode,
) -> CallOutcome {
    let fail = |cause: String, exhausted: bool| SubtaskFailure {
        sub_aspect: plan.sub_aspect.clone(),
        response_index: plan.response_index,
        cause,
        exhausted,
    };

    let mut prompt = plan.prompt.clone();
    let mut last_parse_error = None;
    // One format-reminder retry on unparseable output, then fail.
    for attempt in 0..2 {
        let req = JudgeRequest::new(prompt.clone(), plan.key.clone());
        let text = match judge.complete(&req) {
            Ok(text) => text,
            Err(e) => {
                let exhausted = matches!(e, JudgeError::Exhausted { .. });
                return Err(fail(e.to_string(), exhausted));
            }
        };
        match parse_judge_output(&text, &plan.sub_aspect, mode, spec.score_min, spec.score_max) {
            Ok(evals) => {
                let indexed = match plan.response_index {
                    Some(idx) => vec![(idx, evals.into_iter().next().expect("single parse"))],
                    None => evals.into_iter().enumerate().collect(),
                };
                return Ok((text, indexed));
            }
            Err(e) => {
                last_parse_error = Some(e);
                if attempt == 0 {
                    prompt = format!("{}{}", plan.prompt, FORMAT_RETRY_SUFFIX);
                }
            }
        }
    }
    let cause = last_parse_error.expect("loop ran").to_string();
    Err(fail(format!("judge output unparseable after retry: {cause}"), false))
}

/// Runs `f` over `0..n` on a bounded worker pool, returning results in index
/// order regardless of completion order.
fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let cursor = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.min(n) {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let value = f(i);
                *slots[i].lock().unwrap() = Some(value);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("worker filled slot"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::MockJudge;
    use crate::taxonomy::default_taxonomy;

    fn sample2() -> Sample {
        Sample {
            id: "s1".into(),
            question: "What is dermatophytosis?".into(),
            responses: vec!["A fungal infection.".into(), "A viral infection.".into()],
            reference_info: Some("It is fungal.".into()),
            scenario: Some("knowledge_qa".into()),
        }
    }

    #[test]
    fn decompose_mirrors_taxonomy() {
        let spec = default_taxonomy();
        let tree = decompose(&spec, &sample2());
        assert_eq!(tree.primary_tasks.len(), 3);
        assert_eq!(tree.primary_tasks[0].subtasks.len(), 3);
        assert_eq!(tree.primary_tasks[2].subtasks.len(), 4);
        assert_eq!(tree.subtasks().count(), 10);
        let codes: Vec<&str> = tree.subtasks().map(|s| s.code).collect();
        assert_eq!(codes, spec.sub_aspect_codes());
    }

    #[test]
    fn decompose_empty_spec_gives_empty_tree() {
        let spec = TaxonomySpec {
            aspects: vec![],
            score_min: 0,
            score_max: 5,
        };
        let tree = decompose(&spec, &sample2());
        assert!(tree.is_empty());
    }

    #[test]
    fn render_is_deterministic_and_ordered() {
        let spec = default_taxonomy();
        let sample = sample2();
        let tree = decompose(&spec, &sample);
        let subtask = tree.subtasks().next().unwrap();
        let a = render_prompt(&subtask, &sample, EvalMode::Pairwise, &spec).unwrap();
        let b = render_prompt(&subtask, &sample, EvalMode::Pairwise, &spec).unwrap();
        assert_eq!(a, b);
        // Content appears in the contract order.
        let order = [
            subtask.aspect_instruction,
            subtask.instruction,
            "Question:",
            "A fungal infection.",
            "A viral infection.",
            "Reference Information:",
        ];
        let mut pos = 0;
        for needle in order {
            let at = a[pos..].find(needle).unwrap_or_else(|| panic!("missing {needle:?}"));
            pos += at;
        }
        assert!(a.contains("Response 1:"));
        assert!(a.contains("Response 2:"));
    }

    #[test]
    fn render_pairwise_rejects_single_response() {
        let spec = default_taxonomy();
        let mut sample = sample2();
        sample.responses.truncate(1);
        let tree = decompose(&spec, &sample);
        let subtask = tree.subtasks().next().unwrap();
        assert!(matches!(
            render_prompt(&subtask, &sample, EvalMode::Pairwise, &spec),
            Err(RenderError::PairwiseNeedsTwo { .. })
        ));
    }

    #[test]
    fn parse_single_case_study_format() {
        let evals =
            parse_judge_output("Analysis: relevant.\nScore: 4", "CONT", EvalMode::Single, 0, 5)
                .unwrap();
        assert_eq!(evals.len(), 1);
        assert_eq!(evals[0].score, 4);
        assert_eq!(evals[0].rationale, "relevant.");
    }

    #[test]
    fn parse_round_trips_every_score() {
        for s in 0..=5 {
            let text = format!("Analysis: ok.\nScore: {s}");
            let evals = parse_judge_output(&text, "CONT", EvalMode::Single, 0, 5).unwrap();
            assert_eq!(evals[0].score, s);
        }
    }

    #[test]
    fn parse_rejects_out_of_range() {
        let err = parse_judge_output("Analysis: x.\nScore: 9", "CONT", EvalMode::Single, 0, 5)
            .unwrap_err();
        assert!(matches!(err, ParseError::ScoreOutOfRange { score: 9, .. }));
    }

    #[test]
    fn parse_missing_score_carries_raw_text() {
        let err =
            parse_judge_output("no scores here", "CONT", EvalMode::Single, 0, 5).unwrap_err();
        match err {
            ParseError::MissingScore { raw } => assert_eq!(raw, "no scores here"),
            other => panic!("expected MissingScore, got {other:?}"),
        }
    }

    #[test]
    fn mock_run_is_complete_and_deterministic() {
        let spec = default_taxonomy();
        let sample = sample2();
        let registry = ExpertRegistry::uniform(Arc::new(MockJudge::new(7)));
        let opts = RunOptions::default();
        let a = run_evaluation(&sample, &spec, &registry, EvalMode::Pairwise, &opts).unwrap();
        let b = run_evaluation(&sample, &spec, &registry, EvalMode::Pairwise, &opts).unwrap();
        assert_eq!(a, b);
        a.validate_complete(&spec).unwrap();
        assert_eq!(a.per_response.len(), 2);
        assert_eq!(a.per_response[0].len(), 10);
        assert_eq!(a.per_response[1].len(), 10);
        assert_eq!(a.raw_outputs.len(), 10);
    }

    #[test]
    fn completion_order_does_not_change_bundle() {
        let spec = default_taxonomy();
        let sample = sample2();
        let registry = ExpertRegistry::uniform(Arc::new(MockJudge::new(7)));
        let serial = run_evaluation(
            &sample,
            &spec,
            &registry,
            EvalMode::Pairwise,
            &RunOptions { workers: 1, ..Default::default() },
        )
        .unwrap();
        let parallel = run_evaluation(
            &sample,
            &spec,
            &registry,
            EvalMode::Pairwise,
            &RunOptions { workers: 8, ..Default::default() },
        )
        .unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn aspect_isolation_under_registry_permutation() {
        let spec = default_taxonomy();
        let sample = sample2();
        let opts = RunOptions::default();
        let base = ExpertRegistry::new()
            .register(AspectId::Rel, Arc::new(MockJudge::new(1)))
            .register(AspectId::Cor, Arc::new(MockJudge::new(2)))
            .register(AspectId::Exp, Arc::new(MockJudge::new(3)));
        let permuted = ExpertRegistry::new()
            .register(AspectId::Rel, Arc::new(MockJudge::new(1)))
            .register(AspectId::Cor, Arc::new(MockJudge::new(99)))
            .register(AspectId::Exp, Arc::new(MockJudge::new(42)));
        let a = run_evaluation(&sample, &spec, &base, EvalMode::Pairwise, &opts).unwrap();
        let b = run_evaluation(&sample, &spec, &permuted, EvalMode::Pairwise, &opts).unwrap();
        for code in ["CONT", "COND", "CONC"] {
            assert_eq!(a.per_response[0][code], b.per_response[0][code]);
            assert_eq!(a.per_response[1][code], b.per_response[1][code]);
        }
    }

    #[test]
    fn scripted_missing_fixture_yields_partial_error() {
        use crate::backends::{FixtureRecord, ScriptedJudge};
        let spec = default_taxonomy();
        let sample = sample2();
        // Fixtures for all but one sub-aspect.
        let mock = MockJudge::new(7);
        let mut records = Vec::new();
        let tree = decompose(&spec, &sample);
        for subtask in tree.subtasks() {
            if subtask.code == "LANG" {
                continue;
            }
            let prompt = render_prompt(&subtask, &sample, EvalMode::Pairwise, &spec).unwrap();
            let key = RequestKey {
                sample_id: sample.id.clone(),
                sub_aspect: subtask.code.to_string(),
                mode: EvalMode::Pairwise,
                response_index: None,
            };
            let text = mock.complete(&JudgeRequest::new(prompt, key)).unwrap();
            records.push(FixtureRecord {
                sample_id: sample.id.clone(),
                sub_aspect: subtask.code.to_string(),
                mode: EvalMode::Pairwise,
                response_index: None,
                text,
            });
        }
        let judge = ScriptedJudge::from_records(records, "test").unwrap();
        let registry = ExpertRegistry::uniform(Arc::new(judge));
        let err = run_evaluation(
            &sample,
            &spec,
            &registry,
            EvalMode::Pairwise,
            &RunOptions::default(),
        )
        .unwrap_err();
        match err {
            EvalError::Partial { failed, .. } => {
                assert_eq!(failed.len(), 1);
                assert_eq!(failed[0].sub_aspect, "LANG");
            }
            other => panic!("expected partial error, got {other:?}"),
        }
    }

    #[test]
    fn single_then_compare_equals_independent_single_runs() {
        let spec = default_taxonomy();
        let sample = sample2();
        let registry = ExpertRegistry::uniform(Arc::new(MockJudge::new(7)));
        let opts = RunOptions::default();

        let merged = single_then_compare(&sample, &spec, &registry, &opts).unwrap();
        assert_eq!(merged.mode, EvalMode::Single);
        assert_eq!(merged.per_response.len(), 2);
        merged.validate_complete(&spec).unwrap();

        for (idx, _) in sample.responses.iter().enumerate() {
            let solo = Sample {
                id: sample.id.clone(),
                responses: vec![sample.responses[idx].clone()],
                ..sample.clone()
            };
            let bundle = run_evaluation(&solo, &spec, &registry, EvalMode::Single, &opts).unwrap();
            for (code, eval) in &bundle.per_response[0] {
                assert_eq!(merged.per_response[idx][code].score, eval.score);
            }
        }
    }

    #[test]
    fn single_then_compare_rejects_one_response() {
        let spec = default_taxonomy();
        let mut sample = sample2();
        sample.responses.truncate(1);
        let registry = ExpertRegistry::uniform(Arc::new(MockJudge::new(7)));
        assert!(matches!(
            single_then_compare(&sample, &spec, &registry, &RunOptions::default()),
            Err(EvalError::ModeMismatch { .. })
        ));
    }

    #[test]
    fn missing_expert_detected() {
        let spec = default_taxonomy();
        let registry =
            ExpertRegistry::new().register(AspectId::Rel, Arc::new(MockJudge::new(1)));
        let err = run_evaluation(
            &sample2(),
            &spec,
            &registry,
            EvalMode::Pairwise,
            &RunOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, EvalError::MissingExperts(ref v) if v.len() == 2));
    }

    #[test]
    fn bundle_serde_round_trip() {
        let spec = default_taxonomy();
        let registry = ExpertRegistry::uniform(Arc::new(MockJudge::new(7)));
        let bundle = run_evaluation(
            &sample2(),
            &spec,
            &registry,
            EvalMode::Pairwise,
            &RunOptions::default(),
        )
        .unwrap();
        let json = serde_json::to_string(&bundle).unwrap();
        let back: EvaluationBundle = serde_json::from_str(&json).unwrap();
        assert_eq!(bundle, back);
    }
}
