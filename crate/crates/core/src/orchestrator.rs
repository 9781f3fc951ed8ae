//! Outer loop: generate a program, calibrate it, evaluate it, judge the
//! strategies that shaped it and fold new diagnoses into the playbook.

use std::collections::{BTreeMap, BTreeSet};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::blueprint::{metric_whitelist, Blueprint, Direction};
use crate::calibrator::{self, CalibrationResult, ParamSpace, ParamVector};
use crate::diagnostics::{fingerprint, FailureRegistry, Origin, RegistryEntry, RECURRENCE_THRESHOLD};
use crate::metrics::{classify_links, EventKind, MetricReport, DEFAULT_EPSILON, DEFAULT_TAU};
use crate::playbook::{
    CodeRef, Evidence, Playbook, PlaybookError, PlaybookEvent, Reflection, Severity, Strategy, StrategyState,
    MERGE_THRESHOLD,
};
use crate::selection::{self, PromptLayout, DEFAULT_RECENCY_BUDGET};

pub const DEFAULT_MAX_ITER: usize = 9;
pub const DEFAULT_PATIENCE: usize = 2;
pub const DEFAULT_TAU_STOP: f64 = 0.03;
/// Consecutive failed iterations after which the run gives up.
pub const MAX_CONSECUTIVE_ABORTS: usize = 3;

const DEFAULT_SYSTEM_PROMPT: &str = "You write simulator programs. Follow the blueprint exactly: \
implement every metric it defines, expose every calibratable parameter within its bounds, and \
respect the holdout split. Apply the listed strategies.";

/// Failure reported by a generator, executor or feedback plug-in.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PluginError {
    /// Missing or rejected credentials; retrying cannot help.
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("{0}")]
    Failed(String),
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("malformed diagnosis document: {0}")]
    MalformedDocument(String),
    #[error("loop aborted after {consecutive} consecutive failed iterations; last error: {last_error}")]
    LoopAborted { consecutive: usize, last_error: String },
    #[error(transparent)]
    Fatal(PluginError),
    #[error("persisting iteration {iteration} failed: {message}")]
    Observer { iteration: u32, message: String },
    #[error(transparent)]
    Playbook(#[from] PlaybookError),
}

/// Opaque simulator artifact produced by a generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub id: String,
    pub source: String,
}

/// Calibration settings proposed alongside a program.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibratorSpec {
    #[serde(default)]
    pub weights: BTreeMap<String, f64>,
    #[serde(default)]
    pub n_trials: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct GeneratorRequest {
    pub iteration: u32,
    pub blueprint: Blueprint,
    pub blueprint_text: String,
    pub previous_program: Option<Program>,
    pub selected: Vec<Strategy>,
    pub layout: PromptLayout,
    pub registry: FailureRegistry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorResponse {
    pub program: Program,
    pub calibrator_spec: Option<CalibratorSpec>,
}

/// Proposes the next program from the blueprint and selected strategies.
pub trait Generator {
    fn generate(&mut self, request: &GeneratorRequest) -> Result<GeneratorResponse, PluginError>;

    fn system_prompt(&self) -> String {
        DEFAULT_SYSTEM_PROMPT.to_string()
    }

    /// Task context placed between the system prompt and the instructions.
    fn background(&self, blueprint: &Blueprint, previous: Option<&Program>) -> String {
        default_background(blueprint, previous)
    }
}

/// Runs a program under a parameter vector. Called from parallel
/// calibration trials, so it must be thread-safe.
pub trait Executor: Sync {
    fn execute(&self, program: &Program, params: &ParamVector, seed: u64) -> Result<MetricReport, PluginError>;
}

#[derive(Debug, Clone)]
pub struct FeedbackRequest<'a> {
    pub iteration: u32,
    pub program: Option<&'a Program>,
    pub report: Option<&'a MetricReport>,
    pub error_log: Option<&'a str>,
    pub blueprint: &'a Blueprint,
}

/// Diagnoses a program run; returns the raw, unvalidated document.
pub trait FeedbackAgent {
    fn diagnose(&mut self, request: &FeedbackRequest<'_>) -> Result<String, PluginError>;
}

/// Persistence hook invoked after every iteration.
pub trait LoopObserver {
    fn on_iteration(
        &mut self,
        record: &IterationRecord,
        playbook: &Playbook,
        calibration: Option<&CalibrationResult>,
    ) -> Result<(), String>;
}

/// Observer that keeps nothing.
pub struct NoopObserver;

impl LoopObserver for NoopObserver {
    fn on_iteration(&mut self, _: &IterationRecord, _: &Playbook, _: Option<&CalibrationResult>) -> Result<(), String> {
        Ok(())
    }
}

pub fn default_background(blueprint: &Blueprint, previous: Option<&Program>) -> String {
    let mut out = format!("Project: {}\n", blueprint.project_name());
    for (name, text) in blueprint.schema_sections() {
        out.push_str(&format!("\n## {name}\n{text}\n"));
    }
    match previous {
        Some(p) => out.push_str(&format!("\n## Previous program ({})\n{}\n", p.id, p.source)),
        None => out.push_str("\nNo previous program: write the first version.\n"),
    }
    out
}

/// One accepted diagnosis entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub symptom: String,
    pub mechanism_hypothesis: String,
    pub remediation: String,
    pub severity: Severity,
    pub metric_links: BTreeSet<String>,
    pub issue_type: String,
    #[serde(default)]
    pub code_refs: Vec<CodeRef>,
    #[serde(default)]
    pub key_insight: Option<String>,
}

impl Issue {
    pub fn to_reflection(&self, report: Option<&MetricReport>, error_log: Option<&str>) -> Reflection {
        Reflection {
            issue_type: self.issue_type.clone(),
            severity: self.severity,
            from_user_feedback: false,
            blueprint_refs: Vec::new(),
            code_refs: self.code_refs.clone(),
            evidence: Evidence {
                metrics: report.map(MetricReport::summary).unwrap_or_default(),
                error_logs: error_log.map(str::to_string),
                user_feedback: None,
            },
            error_identification: self.symptom.clone(),
            root_cause_analysis: self.mechanism_hypothesis.clone(),
            correct_approach: self.remediation.clone(),
            key_insight: self.key_insight.clone(),
            metric_links: self.metric_links.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub iteration: u32,
    pub issues: Vec<Issue>,
}

/// Why a diagnosis entry was turned away; the first failed check wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "snake_case")]
pub enum RejectReason {
    NotAnObject,
    MissingField(String),
    WrongType(String),
    EmptyField(String),
    BadSeverity(String),
    EmptyMetricLinks,
    UnknownMetricKey(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    pub index: usize,
    pub entry: Value,
    #[serde(flatten)]
    pub reason: RejectReason,
}

const TEXT_FIELDS: [&str; 3] = ["symptom", "mechanism_hypothesis", "remediation"];

/// Splits a raw feedback document into accepted issues and rejected
/// entries.
///
/// Accepts a JSON array of issues, an object with an `issues` array, or
/// either of those inside the first fenced code block of a text.
pub fn validate_diagnosis(
    raw: &str,
    whitelist: &BTreeSet<String>,
) -> Result<(Vec<Issue>, Vec<Rejected>), OrchestratorError> {
    let doc = parse_document(raw)?;
    let entries = match doc {
        Value::Array(items) => items,
        Value::Object(mut map) => match map.remove("issues") {
            Some(Value::Array(items)) => items,
            _ => return Err(OrchestratorError::MalformedDocument("expected an `issues` array".into())),
        },
        _ => return Err(OrchestratorError::MalformedDocument("expected an array of issues".into())),
    };
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for (index, entry) in entries.into_iter().enumerate() {
        match check_issue(&entry, whitelist) {
            Ok(issue) => accepted.push(issue),
            Err(reason) => rejected.push(Rejected { index, entry, reason }),
        }
    }
    Ok((accepted, rejected))
}

fn parse_document(raw: &str) -> Result<Value, OrchestratorError> {
    if let Ok(v) = serde_json::from_str::<Value>(raw.trim()) {
        return Ok(v);
    }
    let block = first_fenced_block(raw)
        .ok_or_else(|| OrchestratorError::MalformedDocument("no JSON document or fenced block found".into()))?;
    serde_json::from_str(block.trim()).map_err(|e| OrchestratorError::MalformedDocument(e.to_string()))
}

/// Body of the first ``` fenced block, ignoring its info string.
pub fn first_fenced_block(text: &str) -> Option<&str> {
    fenced_blocks(text).into_iter().next().map(|(_, body)| body)
}

/// All ``` fenced blocks as `(info string, body)` pairs, in order.
pub fn fenced_blocks(text: &str) -> Vec<(&str, &str)> {
    let mut blocks = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let Some(nl) = after.find('\n') else { break };
        let info = after[..nl].trim();
        let body_start = &after[nl + 1..];
        let Some(end) = body_start.find("```") else { break };
        blocks.push((info, &body_start[..end]));
        rest = &body_start[end + 3..];
    }
    blocks
}

fn check_issue(entry: &Value, whitelist: &BTreeSet<String>) -> Result<Issue, RejectReason> {
    let obj = entry.as_object().ok_or(RejectReason::NotAnObject)?;
    let mut texts = Vec::new();
    for name in TEXT_FIELDS {
        let text = match obj.get(name) {
            None | Some(Value::Null) => return Err(RejectReason::MissingField(name.into())),
            Some(Value::String(s)) => s,
            Some(_) => return Err(RejectReason::WrongType(name.into())),
        };
        if text.trim().is_empty() {
            return Err(RejectReason::EmptyField(name.into()));
        }
        texts.push(text.clone());
    }
    let severity = match obj.get("severity") {
        None | Some(Value::Null) => return Err(RejectReason::MissingField("severity".into())),
        Some(Value::String(s)) => s.parse::<Severity>().map_err(|_| RejectReason::BadSeverity(s.clone()))?,
        Some(other) => return Err(RejectReason::BadSeverity(other.to_string())),
    };
    let links = match obj.get("metric_links") {
        None | Some(Value::Null) => return Err(RejectReason::MissingField("metric_links".into())),
        Some(Value::Array(items)) => items,
        Some(_) => return Err(RejectReason::WrongType("metric_links".into())),
    };
    if links.is_empty() {
        return Err(RejectReason::EmptyMetricLinks);
    }
    let mut metric_links = BTreeSet::new();
    for link in links {
        let key = link.as_str().ok_or_else(|| RejectReason::WrongType("metric_links".into()))?;
        // exact match, no case folding or trimming
        if !whitelist.contains(key) {
            return Err(RejectReason::UnknownMetricKey(key.to_string()));
        }
        metric_links.insert(key.to_string());
    }
    let issue_type = match obj.get("issue_type") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        _ => "MODEL_STRUCTURE".to_string(),
    };
    let code_refs = obj
        .get("code_refs")
        .and_then(|v| serde_json::from_value::<Vec<CodeRef>>(v.clone()).ok())
        .unwrap_or_default();
    let key_insight = obj
        .get("key_insight")
        .and_then(Value::as_str)
        .filter(|s| !s.trim().is_empty())
        .map(str::to_string);
    let [symptom, mechanism_hypothesis, remediation]: [String; 3] = texts.try_into().expect("three text fields");
    Ok(Issue {
        symptom,
        mechanism_hypothesis,
        remediation,
        severity,
        metric_links,
        issue_type,
        code_refs,
        key_insight,
    })
}

/// Outcome of judging one INPROGRESS strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchedEvent {
    pub strategy: String,
    pub kind: EventKind,
    /// Mean directed improvement over the strategy's links, when computable.
    pub improvement: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Resolves, falsifies or defers every INPROGRESS strategy by comparing the
/// linked metrics of `prev` and `cur`. Without both reports every strategy
/// is deferred (uncertain).
pub fn dispatch_events(
    pb: &mut Playbook,
    prev: Option<&MetricReport>,
    cur: Option<&MetricReport>,
    directions: &BTreeMap<String, Direction>,
    tau: f64,
) -> Result<Vec<DispatchedEvent>, PlaybookError> {
    let active: Vec<(String, BTreeSet<String>)> = pb
        .strategies()
        .filter(|s| s.state == StrategyState::InProgress)
        .map(|s| (s.id.clone(), s.reflection.metric_links.clone()))
        .collect();
    let mut events = Vec::with_capacity(active.len());
    for (id, links) in active {
        let (kind, improvement, note) = match (prev, cur) {
            (Some(p), Some(c)) => match classify_links(p, c, &links, directions, DEFAULT_EPSILON, tau) {
                Ok((mean, kind)) => (kind, Some(mean), None),
                Err(e) => {
                    warn!("strategy {id}: {e}; treating as uncertain");
                    (EventKind::Uncertain, None, Some(e.to_string()))
                }
            },
            (None, _) => (EventKind::Uncertain, None, Some("no baseline report".to_string())),
            (_, None) => (EventKind::Uncertain, None, Some("iteration produced no report".to_string())),
        };
        let event = match kind {
            EventKind::Resolved => PlaybookEvent::Resolved,
            EventKind::Falsified => PlaybookEvent::Falsified,
            EventKind::Uncertain => PlaybookEvent::Uncertain,
        };
        pb.apply(&id, event)?;
        events.push(DispatchedEvent {
            strategy: id,
            kind,
            improvement,
            note,
        });
    }
    Ok(events)
}

/// Issue-to-strategy assignment made during admission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueLink {
    pub issue: String,
    pub strategy: String,
    pub merged: bool,
}

/// Folds accepted issues into the playbook through merge-or-insert.
pub fn admit_diagnosis(
    pb: &mut Playbook,
    diagnosis: &Diagnosis,
    report: Option<&MetricReport>,
    error_log: Option<&str>,
    merge_threshold: f64,
) -> Vec<IssueLink> {
    diagnosis
        .issues
        .iter()
        .enumerate()
        .map(|(i, issue)| {
            let (strategy, merged) = pb.merge_or_insert(issue.to_reflection(report, error_log), merge_threshold);
            IssueLink {
                issue: format!("{}-{i}", diagnosis.iteration),
                strategy,
                merged,
            }
        })
        .collect()
}

/// Whether to stop after the objectives in `history` (one per iteration,
/// `+∞` for failed ones).
///
/// Stops at `max_iter` entries, or once the best-so-far objective has gone
/// `patience` consecutive iterations without a relative improvement larger
/// than `tau_stop`.
pub fn should_stop(history: &[f64], tau_stop: f64, patience: usize, max_iter: usize) -> bool {
    if history.len() >= max_iter {
        return true;
    }
    let Some((&first, rest)) = history.split_first() else {
        return false;
    };
    let mut best = first;
    let mut stale = 0;
    for &h in rest {
        let improved = if best.is_finite() {
            h.is_finite() && (best - h) / (best.abs() + DEFAULT_EPSILON) > tau_stop
        } else {
            h.is_finite()
        };
        if improved {
            stale = 0;
        } else {
            stale += 1;
        }
        if h < best {
            best = h;
        }
    }
    patience > 0 && stale >= patience
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub seed: u64,
    pub max_iter: usize,
    pub patience: usize,
    pub tau: f64,
    pub tau_stop: f64,
    pub recency_budget: usize,
    pub n_trials: usize,
    pub merge_threshold: f64,
    pub cre_threshold: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            seed: 0,
            max_iter: DEFAULT_MAX_ITER,
            patience: DEFAULT_PATIENCE,
            tau: DEFAULT_TAU,
            tau_stop: DEFAULT_TAU_STOP,
            recency_budget: DEFAULT_RECENCY_BUDGET,
            n_trials: calibrator::DEFAULT_N_TRIALS,
            merge_threshold: MERGE_THRESHOLD,
            cre_threshold: RECURRENCE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationStatus {
    Ok,
    GeneratorFailed,
    ExecutorFailed,
}

/// Recurrent-error counts for one iteration, split by artifact kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreCounts {
    pub programs: usize,
    pub strategies: usize,
}

impl CreCounts {
    pub fn total(&self) -> usize {
        self.programs + self.strategies
    }
}

/// Fingerprints of what an iteration generated.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifacts {
    pub program: Option<String>,
    pub remediations: Vec<String>,
}

/// Everything one outer iteration did, as written to the history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: u32,
    pub status: IterationStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub program_id: Option<String>,
    pub selected: Vec<String>,
    pub theta_star: Option<ParamVector>,
    pub report: Option<MetricReport>,
    /// Blueprint-weighted objective of `report`; `None` when the iteration failed.
    pub objective: Option<f64>,
    pub diagnosis: Diagnosis,
    pub rejected: Vec<Rejected>,
    pub issue_strategies: Vec<IssueLink>,
    pub events: Vec<DispatchedEvent>,
    /// Strategy states right after event dispatch.
    pub strategy_states: BTreeMap<String, StrategyState>,
    pub cre: CreCounts,
    pub artifacts: Artifacts,
    pub registry_additions: Vec<RegistryEntry>,
}

impl IterationRecord {
    pub fn objective_or_inf(&self) -> f64 {
        self.objective.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    Plateau,
}

#[derive(Debug, Clone)]
pub struct LoopOutcome {
    /// Successful iteration with the lowest objective (earliest on ties).
    pub best: Option<IterationRecord>,
    pub history: Vec<IterationRecord>,
    pub playbook: Playbook,
    pub registry: FailureRegistry,
    pub stop_reason: StopReason,
}

/// History file contents: one canonical JSON record per line.
pub fn history_jsonl(history: &[IterationRecord]) -> String {
    let mut out = String::new();
    for rec in history {
        // derived Serialize on plain data cannot fail
        let value = serde_json::to_value(rec).expect("record serializes");
        out.push_str(&crate::canonical::to_canonical_compact(&value));
        out.push('\n');
    }
    out
}

/// Parses a history file written by [`history_jsonl`].
pub fn parse_history(text: &str) -> Result<Vec<IterationRecord>, OrchestratorError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| OrchestratorError::MalformedDocument(format!("history line {}: {e}", i + 1)))
        })
        .collect()
}

/// Per-iteration CRE recomputed from history records alone.
pub fn cre_series(history: &[IterationRecord], threshold: f64) -> Vec<CreCounts> {
    let mut registry = FailureRegistry::new();
    history
        .iter()
        .map(|rec| {
            let counts = cre_counts(&rec.artifacts, &registry, threshold);
            for e in &rec.registry_additions {
                registry.record_fingerprint(e.fingerprint.clone(), e.iteration, e.origin.clone());
            }
            counts
        })
        .collect()
}

/// IRR for each consecutive pair `(t, t+1)` of the history.
pub fn irr_series(history: &[IterationRecord]) -> Vec<(u32, f64)> {
    history
        .windows(2)
        .map(|w| {
            let issues: Vec<(String, String)> = w[0]
                .issue_strategies
                .iter()
                .map(|l| (l.issue.clone(), l.strategy.clone()))
                .collect();
            (w[0].t, crate::diagnostics::irr(&issues, &w[1].strategy_states))
        })
        .collect()
}

fn cre_counts(artifacts: &Artifacts, registry: &FailureRegistry, threshold: f64) -> CreCounts {
    CreCounts {
        programs: artifacts
            .program
            .iter()
            .filter(|fp| registry.is_recurrent(fp, threshold))
            .count(),
        strategies: artifacts
            .remediations
            .iter()
            .filter(|fp| registry.is_recurrent(fp, threshold))
            .count(),
    }
}

/// Calibration seed for iteration `t`.
pub fn iteration_seed(seed: u64, t: u32) -> u64 {
    calibrator::trial_seed(seed ^ 0xA5A5_5A5A_0F0F_F0F0, t as usize)
}

/// Drops weights for unknown or non-positive keys; falls back to the
/// blueprint weights when nothing usable remains.
fn calibration_weights(spec: Option<&CalibratorSpec>, blueprint: &Blueprint) -> BTreeMap<String, f64> {
    let whitelist = metric_whitelist(blueprint);
    let proposed: BTreeMap<String, f64> = spec
        .map(|s| {
            s.weights
                .iter()
                .filter(|(k, w)| whitelist.contains(*k) && w.is_finite() && **w >= 0.0)
                .map(|(k, w)| (k.clone(), *w))
                .collect()
        })
        .unwrap_or_default();
    if proposed.values().any(|w| *w > 0.0) {
        proposed
    } else {
        blueprint.weights()
    }
}

struct Attempt {
    program: Option<Program>,
    calibration: Option<CalibrationResult>,
    report: Option<MetricReport>,
    error: Option<(IterationStatus, PluginError)>,
}

/// Runs the bi-level loop until the stop rule fires.
#[allow(clippy::too_many_arguments)]
pub fn run_loop(
    blueprint: &Blueprint,
    generator: &mut dyn Generator,
    executor: &dyn Executor,
    feedback: &mut dyn FeedbackAgent,
    config: &LoopConfig,
    mut playbook: Playbook,
    observer: &mut dyn LoopObserver,
) -> Result<LoopOutcome, OrchestratorError> {
    let whitelist = metric_whitelist(blueprint);
    let directions = blueprint.directions();
    let weights = blueprint.weights();
    let space = ParamSpace::from_blueprint(blueprint);
    let blueprint_text = blueprint.to_json();

    let mut registry = FailureRegistry::new();
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut objectives: Vec<f64> = Vec::new();
    let mut previous_program: Option<Program> = None;
    let mut baseline: Option<MetricReport> = None;
    let mut consecutive_aborts = 0;

    let stop_reason = loop {
        let t = history.len() as u32;

        // selection
        let pool = selection::candidate_pool(&playbook);
        let choice = selection::select_knapsack(&selection::candidates(&pool), config.recency_budget);
        selection::mark_selection(&mut playbook, &choice)?;
        let selected: Vec<Strategy> = choice
            .chosen
            .iter()
            .filter_map(|id| playbook.get(id).cloned())
            .collect();
        let selected_refs: Vec<&Strategy> = selected.iter().collect();
        let layout = selection::layout_prompt(
            &generator.system_prompt(),
            &generator.background(blueprint, previous_program.as_ref()),
            &blueprint_text,
            &selected_refs,
            config.recency_budget,
        )
        .expect("knapsack selection fits the recency budget");

        // generation, calibration, evaluation
        let request = GeneratorRequest {
            iteration: t,
            blueprint: blueprint.clone(),
            blueprint_text: blueprint_text.clone(),
            previous_program: previous_program.clone(),
            selected: selected.clone(),
            layout,
            registry: registry.clone(),
        };
        let attempt = attempt_iteration(generator, executor, &request, blueprint, &space, &directions, config, t)?;

        let artifacts_program = attempt.program.as_ref().map(|p| fingerprint(&p.source));
        let objective = match &attempt.report {
            Some(r) => match calibrator::objective(r, &weights, &directions) {
                Ok(v) => Some(v),
                Err(e) => {
                    warn!("iteration {t}: {e}");
                    None
                }
            },
            None => None,
        };

        // judge strategies applied in this iteration
        let events = dispatch_events(&mut playbook, baseline.as_ref(), attempt.report.as_ref(), &directions, config.tau)?;
        let strategy_states = playbook.states();
        let mut registry_additions = Vec::new();
        for ev in events.iter().filter(|e| e.kind == EventKind::Falsified) {
            let s = playbook.get(&ev.strategy).expect("dispatched strategy exists");
            registry_additions.push(RegistryEntry {
                fingerprint: fingerprint(&s.reflection.correct_approach),
                iteration: t,
                origin: Origin::Strategy(s.id.clone()),
            });
        }
        if let (Some((IterationStatus::ExecutorFailed, _)), Some(p)) = (&attempt.error, &attempt.program) {
            registry_additions.push(RegistryEntry {
                fingerprint: fingerprint(&p.source),
                iteration: t,
                origin: Origin::Program(p.id.clone()),
            });
        }

        // diagnosis
        let error_text = attempt.error.as_ref().map(|(_, e)| e.to_string());
        let raw = feedback.diagnose(&FeedbackRequest {
            iteration: t,
            program: attempt.program.as_ref(),
            report: attempt.report.as_ref(),
            error_log: error_text.as_deref(),
            blueprint,
        });
        let (mut issues, rejected) = match raw {
            Ok(raw) => match validate_diagnosis(&raw, &whitelist) {
                Ok(split) => split,
                Err(e) => {
                    warn!("iteration {t}: {e}; treating diagnosis as empty");
                    (Vec::new(), Vec::new())
                }
            },
            Err(PluginError::Auth(msg)) => return Err(OrchestratorError::Fatal(PluginError::Auth(msg))),
            Err(e) => {
                warn!("iteration {t}: feedback failed: {e}");
                (Vec::new(), Vec::new())
            }
        };
        if attempt.error.is_some() {
            for issue in &mut issues {
                issue.severity = Severity::Blocker;
            }
        }
        let diagnosis = Diagnosis { iteration: t, issues };
        let artifacts = Artifacts {
            program: artifacts_program,
            remediations: diagnosis.issues.iter().map(|i| fingerprint(&i.remediation)).collect(),
        };
        let cre = cre_counts(&artifacts, &registry, config.cre_threshold);
        let issue_strategies = admit_diagnosis(
            &mut playbook,
            &diagnosis,
            attempt.report.as_ref(),
            error_text.as_deref(),
            config.merge_threshold,
        );
        for e in &registry_additions {
            registry.record_fingerprint(e.fingerprint.clone(), e.iteration, e.origin.clone());
        }
        playbook.metadata.last_updated_iteration = Some(t);

        let (status, error) = match &attempt.error {
            Some((status, e)) => (*status, Some(e.to_string())),
            None => (IterationStatus::Ok, None),
        };
        let record = IterationRecord {
            t,
            status,
            error,
            program_id: attempt.program.as_ref().map(|p| p.id.clone()),
            selected: choice.chosen.clone(),
            theta_star: attempt.calibration.as_ref().map(|c| c.best.params.clone()),
            report: attempt.report.clone(),
            objective,
            diagnosis,
            rejected,
            issue_strategies,
            events,
            strategy_states,
            cre,
            artifacts,
            registry_additions,
        };
        info!(
            "iteration {t}: program={} objective={:?} issues={} events={}",
            record.program_id.as_deref().unwrap_or("-"),
            record.objective,
            record.diagnosis.issues.len(),
            record.events.len()
        );
        observer
            .on_iteration(&record, &playbook, attempt.calibration.as_ref())
            .map_err(|message| OrchestratorError::Observer { iteration: t, message })?;

        if let Some(report) = &attempt.report {
            baseline = Some(report.clone());
        }
        if attempt.program.is_some() {
            previous_program = attempt.program.clone();
        }
        objectives.push(record.objective_or_inf());
        let last_error = record.error.clone();
        history.push(record);

        match last_error {
            Some(err) => {
                consecutive_aborts += 1;
                if consecutive_aborts >= MAX_CONSECUTIVE_ABORTS {
                    return Err(OrchestratorError::LoopAborted {
                        consecutive: consecutive_aborts,
                        last_error: err,
                    });
                }
            }
            None => consecutive_aborts = 0,
        }
        if objectives.len() >= config.max_iter {
            break StopReason::MaxIterations;
        }
        if should_stop(&objectives, config.tau_stop, config.patience, config.max_iter) {
            break StopReason::Plateau;
        }
    };

    let best = history
        .iter()
        .filter(|r| r.objective.is_some())
        .fold(None::<&IterationRecord>, |best, r| match best {
            Some(b) if b.objective_or_inf() <= r.objective_or_inf() => Some(b),
            _ => Some(r),
        })
        .cloned();
    Ok(LoopOutcome {
        best,
        history,
        playbook,
        registry,
        stop_reason,
    })
}

#[allow(clippy::too_many_arguments)]
fn attempt_iteration(
    generator: &mut dyn Generator,
    executor: &dyn Executor,
    request: &GeneratorRequest,
    blueprint: &Blueprint,
    space: &ParamSpace,
    directions: &BTreeMap<String, Direction>,
    config: &LoopConfig,
    t: u32,
) -> Result<Attempt, OrchestratorError> {
    let response = match generator.generate(request) {
        Ok(r) => r,
        Err(PluginError::Auth(msg)) => return Err(OrchestratorError::Fatal(PluginError::Auth(msg))),
        Err(e) => {
            return Ok(Attempt {
                program: None,
                calibration: None,
                report: None,
                error: Some((IterationStatus::GeneratorFailed, e)),
            })
        }
    };
    let program = response.program;
    let weights = calibration_weights(response.calibrator_spec.as_ref(), blueprint);
    let n_trials = response
        .calibrator_spec
        .as_ref()
        .and_then(|s| s.n_trials)
        .filter(|n| *n >= 1)
        .map_or(config.n_trials, |n| n.min(config.n_trials));

    let simulate = |params: &ParamVector, seed: u64| {
        executor
            .execute(&program, params, seed)
            .map_err(|e| e.to_string())
    };
    let calibration = match calibrator::calibrate(
        &simulate,
        space,
        n_trials,
        iteration_seed(config.seed, t),
        &weights,
        directions,
    ) {
        Ok(c) => c,
        Err(e) => {
            return Ok(Attempt {
                program: Some(program),
                calibration: None,
                report: None,
                error: Some((IterationStatus::ExecutorFailed, PluginError::Failed(e.to_string()))),
            })
        }
    };
    match executor.execute(&program, &calibration.best.params, calibration.best.seed) {
        Ok(report) => Ok(Attempt {
            program: Some(program),
            report: Some(MetricReport { iteration: t, ..report }),
            calibration: Some(calibration),
            error: None,
        }),
        Err(e) => Ok(Attempt {
            program: Some(program),
            calibration: Some(calibration),
            report: None,
            error: Some((IterationStatus::ExecutorFailed, e)),
        }),
    }
}
