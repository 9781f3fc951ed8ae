//! Strategy playbook: the remediation store with its lifecycle state
//! machine, Beta–Bernoulli reliability and persisted JSON layout.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::canonical::{to_canonical_compact, to_canonical_pretty};
use crate::diagnostics::{fingerprint, similarity};

/// Default similarity at which incoming feedback merges into an existing
/// strategy.
pub const MERGE_THRESHOLD: f64 = 0.8;
/// Per-unit backlog urgency bonus.
pub const BACKLOG_LAMBDA: f64 = 0.05;
/// Backlog cap for the urgency bonus.
pub const BACKLOG_CAP: u32 = 10;

const MAX_SLUG_LEN: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum PlaybookError {
    #[error("illegal transition: {event} from {}", state.map(|s| s.to_string()).unwrap_or_else(|| "absent".into()))]
    IllegalTransition {
        state: Option<StrategyState>,
        event: PlaybookEvent,
    },
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("malformed playbook document: {0}")]
    MalformedDocument(String),
    #[error("playbook schema violation: {0}")]
    SchemaViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Severity {
    Blocker,
    High,
    Medium,
    Low,
}

impl Severity {
    pub fn weight(self) -> f64 {
        match self {
            Severity::Blocker => 1.0,
            Severity::High => 0.8,
            Severity::Medium => 0.4,
            Severity::Low => 0.2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Blocker => "blocker",
            Severity::High => "high",
            Severity::Medium => "medium",
            Severity::Low => "low",
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_str().to_ascii_uppercase())
    }
}

impl FromStr for Severity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "blocker" => Ok(Severity::Blocker),
            "high" => Ok(Severity::High),
            "medium" => Ok(Severity::Medium),
            "low" => Ok(Severity::Low),
            other => Err(format!("unknown severity {other:?}")),
        }
    }
}

impl Serialize for Severity {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Severity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StrategyState {
    Open,
    Queued,
    #[serde(rename = "INPROGRESS")]
    InProgress,
    Resolved,
}

impl StrategyState {
    pub const ALL: [StrategyState; 4] = [
        StrategyState::Open,
        StrategyState::Queued,
        StrategyState::InProgress,
        StrategyState::Resolved,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyState::Open => "OPEN",
            StrategyState::Queued => "QUEUED",
            StrategyState::InProgress => "INPROGRESS",
            StrategyState::Resolved => "RESOLVED",
        }
    }
}

impl fmt::Display for StrategyState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyState::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown state {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaybookEvent {
    New,
    Merge,
    Selected,
    NotSelected,
    Resolved,
    Falsified,
    Uncertain,
}

impl PlaybookEvent {
    pub const ALL: [PlaybookEvent; 7] = [
        PlaybookEvent::New,
        PlaybookEvent::Merge,
        PlaybookEvent::Selected,
        PlaybookEvent::NotSelected,
        PlaybookEvent::Resolved,
        PlaybookEvent::Falsified,
        PlaybookEvent::Uncertain,
    ];
}

impl fmt::Display for PlaybookEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            PlaybookEvent::New => "E_new",
            PlaybookEvent::Merge => "E_merge",
            PlaybookEvent::Selected => "E_selected",
            PlaybookEvent::NotSelected => "not_selected",
            PlaybookEvent::Resolved => "E_resolved",
            PlaybookEvent::Falsified => "E_falsified",
            PlaybookEvent::Uncertain => "E_uncertain",
        };
        f.write_str(name)
    }
}

/// Usage and attribution counters `(u, un, s, f)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct MetaInfo {
    pub usage_count: u32,
    pub unusage_count: u32,
    pub success_attribution: u32,
    pub failure_attribution: u32,
}

/// Posterior mean `(s+1)/(s+f+2)` under a uniform Beta prior.
pub fn reliability(meta: &MetaInfo) -> f64 {
    let s = meta.success_attribution as f64;
    let f = meta.failure_attribution as f64;
    (s + 1.0) / (s + f + 2.0)
}

/// Lifecycle transition. `state` is `None` for a strategy that does not
/// exist yet.
pub fn apply_event(
    state: Option<StrategyState>,
    meta: MetaInfo,
    event: PlaybookEvent,
) -> Result<(StrategyState, MetaInfo), PlaybookError> {
    use PlaybookEvent as E;
    use StrategyState as S;
    let mut m = meta;
    let next = match (state, event) {
        (None, E::New) => return Ok((S::Open, MetaInfo::default())),
        (Some(_), E::Merge) => S::Open,
        (Some(S::Open | S::Queued), E::Selected) => {
            m.usage_count += 1;
            S::InProgress
        }
        (Some(S::Open | S::Queued), E::NotSelected) => {
            m.unusage_count += 1;
            S::Queued
        }
        (Some(S::InProgress), E::Resolved) => {
            m.success_attribution += 1;
            S::Resolved
        }
        (Some(S::InProgress), E::Falsified) => {
            m.failure_attribution += 1;
            S::Open
        }
        (Some(S::InProgress), E::Uncertain) => S::Open,
        _ => return Err(PlaybookError::IllegalTransition { state, event }),
    };
    Ok((next, m))
}

/// Tokens consumed by a text: one per four characters, rounded up.
pub fn token_count(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeRef {
    pub symbol: String,
    pub lines: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub metrics: String,
    #[serde(default)]
    pub error_logs: Option<String>,
    #[serde(default)]
    pub user_feedback: Option<String>,
}

/// Diagnosed issue: what went wrong, why, and how to fix it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reflection {
    pub issue_type: String,
    pub severity: Severity,
    #[serde(default)]
    pub from_user_feedback: bool,
    #[serde(default)]
    pub blueprint_refs: Vec<String>,
    #[serde(default)]
    pub code_refs: Vec<CodeRef>,
    #[serde(default)]
    pub evidence: Evidence,
    pub error_identification: String,
    pub root_cause_analysis: String,
    pub correct_approach: String,
    #[serde(default)]
    pub key_insight: Option<String>,
    pub metric_links: BTreeSet<String>,
}

impl Reflection {
    /// Minimal reflection with the required texts filled in.
    pub fn new(
        severity: Severity,
        error_identification: impl Into<String>,
        root_cause_analysis: impl Into<String>,
        correct_approach: impl Into<String>,
        metric_links: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        Reflection {
            issue_type: "MODEL_STRUCTURE".into(),
            severity,
            from_user_feedback: false,
            blueprint_refs: Vec::new(),
            code_refs: Vec::new(),
            evidence: Evidence::default(),
            error_identification: error_identification.into(),
            root_cause_analysis: root_cause_analysis.into(),
            correct_approach: correct_approach.into(),
            key_insight: None,
            metric_links: metric_links.into_iter().map(Into::into).collect(),
        }
    }

    pub fn to_value(&self) -> Value {
        // derived Serialize on plain data cannot fail
        serde_json::to_value(self).expect("reflection serializes")
    }

    /// Text compared when deciding whether two reflections are the same issue.
    pub fn merge_text(&self) -> String {
        format!(
            "{}\n{}\n{}",
            self.error_identification, self.root_cause_analysis, self.correct_approach
        )
    }

    pub fn token_count(&self) -> usize {
        token_count(&to_canonical_compact(&self.to_value()))
    }

    fn check(&self) -> Result<(), String> {
        for (name, text) in [
            ("error_identification", &self.error_identification),
            ("root_cause_analysis", &self.root_cause_analysis),
            ("correct_approach", &self.correct_approach),
        ] {
            if text.trim().is_empty() {
                return Err(format!("{name} is empty"));
            }
        }
        if self.metric_links.is_empty() {
            return Err("metric_links is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Strategy {
    pub id: String,
    pub reflection: Reflection,
    pub meta: MetaInfo,
    pub state: StrategyState,
}

impl Strategy {
    pub fn reliability(&self) -> f64 {
        reliability(&self.meta)
    }

    pub fn valuation(&self) -> f64 {
        valuation(self, BACKLOG_LAMBDA, BACKLOG_CAP)
    }

    pub fn token_count(&self) -> usize {
        self.reflection.token_count()
    }
}

/// Selection value `w_sev · (1 + λ·min(un, K_q)) · reliability`.
pub fn valuation(strategy: &Strategy, lambda: f64, cap: u32) -> f64 {
    let backlog = strategy.meta.unusage_count.min(cap) as f64;
    strategy.reflection.severity.weight() * (1.0 + lambda * backlog) * strategy.reliability()
}

/// Metadata fields that are not derived from the strategies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlaybookMetadata {
    pub version: String,
    pub project_name: String,
    pub last_updated_time: Option<String>,
    pub last_updated_iteration: Option<u32>,
    pub finalized_at: Option<String>,
}

impl Default for PlaybookMetadata {
    fn default() -> Self {
        PlaybookMetadata {
            version: "v0.1".into(),
            project_name: String::new(),
            last_updated_time: None,
            last_updated_iteration: None,
            finalized_at: None,
        }
    }
}

/// Counts derived from the strategy set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlaybookTotals {
    pub total_token_count: usize,
    pub total_insights: usize,
    pub solved_count: usize,
    pub unsolved_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Playbook {
    pub metadata: PlaybookMetadata,
    strategies: BTreeMap<String, Strategy>,
}

impl Playbook {
    pub fn new(project_name: impl Into<String>) -> Self {
        Playbook {
            metadata: PlaybookMetadata {
                project_name: project_name.into(),
                ..Default::default()
            },
            strategies: BTreeMap::new(),
        }
    }

    pub fn strategies(&self) -> impl Iterator<Item = &Strategy> {
        self.strategies.values()
    }

    pub fn get(&self, id: &str) -> Option<&Strategy> {
        self.strategies.get(id)
    }

    pub fn len(&self) -> usize {
        self.strategies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strategies.is_empty()
    }

    pub fn states(&self) -> BTreeMap<String, StrategyState> {
        self.strategies
            .iter()
            .map(|(id, s)| (id.clone(), s.state))
            .collect()
    }

    pub fn totals(&self) -> PlaybookTotals {
        let total_insights = self.strategies.len();
        let solved_count = self
            .strategies
            .values()
            .filter(|s| s.state == StrategyState::Resolved)
            .count();
        PlaybookTotals {
            total_token_count: self.strategies.values().map(Strategy::token_count).sum(),
            total_insights,
            solved_count,
            unsolved_count: total_insights - solved_count,
        }
    }

    /// Fires `event` on an existing strategy.
    pub fn apply(&mut self, id: &str, event: PlaybookEvent) -> Result<&Strategy, PlaybookError> {
        let strategy = self
            .strategies
            .get_mut(id)
            .ok_or_else(|| PlaybookError::UnknownStrategy(id.to_string()))?;
        let (state, meta) = apply_event(Some(strategy.state), strategy.meta, event)?;
        strategy.state = state;
        strategy.meta = meta;
        Ok(strategy)
    }

    /// Inserts a new OPEN strategy under a fresh slug derived from the
    /// reflection; returns the id.
    pub fn insert(&mut self, reflection: Reflection) -> String {
        let id = self.fresh_id(&reflection.error_identification);
        let (state, meta) = apply_event(None, MetaInfo::default(), PlaybookEvent::New)
            .expect("E_new is legal for absent strategies");
        self.strategies.insert(
            id.clone(),
            Strategy {
                id: id.clone(),
                reflection,
                meta,
                state,
            },
        );
        id
    }

    /// Merges `incoming` into the most similar existing strategy when the
    /// similarity reaches `threshold`, otherwise inserts it. Returns the id
    /// and whether a merge happened.
    pub fn merge_or_insert(&mut self, incoming: Reflection, threshold: f64) -> (String, bool) {
        let probe = fingerprint(&incoming.merge_text());
        let mut best: Option<(f64, &str)> = None;
        // ids iterate ascending, so strict > keeps the smallest id on ties
        for (id, s) in &self.strategies {
            let sim = similarity(&probe, &fingerprint(&s.reflection.merge_text()));
            if sim >= threshold && best.is_none_or(|(b, _)| sim > b) {
                best = Some((sim, id));
            }
        }
        match best.map(|(_, id)| id.to_string()) {
            Some(id) => {
                let s = self.strategies.get_mut(&id).expect("id from map");
                let (state, meta) =
                    apply_event(Some(s.state), s.meta, PlaybookEvent::Merge).expect("E_merge is legal from any state");
                s.state = state;
                s.meta = meta;
                s.reflection = incoming;
                (id, true)
            }
            None => (self.insert(incoming), false),
        }
    }

    fn fresh_id(&self, text: &str) -> String {
        let base = slugify(text);
        if !self.strategies.contains_key(&base) {
            return base;
        }
        (2..)
            .map(|n| {
                let suffix = format!("-{n}");
                let mut stem = base.clone();
                while stem.len() + suffix.len() > MAX_SLUG_LEN {
                    stem.pop();
                }
                format!("{}{suffix}", stem.trim_end_matches('-'))
            })
            .find(|id| !self.strategies.contains_key(id))
            .expect("unbounded suffix search")
    }

    pub fn to_value(&self) -> Value {
        let totals = self.totals();
        let mut strategies = Map::new();
        for (id, s) in &self.strategies {
            let status = if s.state == StrategyState::Resolved {
                "resolved"
            } else {
                "unresolved"
            };
            strategies.insert(
                id.clone(),
                json!({
                    "meta_info": {
                        "token_count": s.token_count(),
                        "state": s.state.as_str(),
                        "status": status,
                        "usage_count": s.meta.usage_count,
                        "unusage_count": s.meta.unusage_count,
                        "success_attribution": s.meta.success_attribution,
                        "failure_attribution": s.meta.failure_attribution,
                    },
                    "reflection": s.reflection.to_value(),
                }),
            );
        }
        let m = &self.metadata;
        json!({
            "playbook_metadata": {
                "version": m.version,
                "project_name": m.project_name,
                "last_updated_time": m.last_updated_time,
                "last_updated_iteration": m.last_updated_iteration,
                "total_token_count": totals.total_token_count,
                "total_insights": totals.total_insights,
                "solved_count": totals.solved_count,
                "unsolved_count": totals.unsolved_count,
                "deleted_count": 0,
                "finalized_at": m.finalized_at,
            },
            "strategies": strategies,
        })
    }

    /// Canonical JSON document (sorted keys, two-space indent).
    pub fn save(&self) -> String {
        to_canonical_pretty(&self.to_value())
    }

    pub fn load(text: &str) -> Result<Self, PlaybookError> {
        let doc: Value = serde_json::from_str(text).map_err(|e| PlaybookError::MalformedDocument(e.to_string()))?;
        let root = doc
            .as_object()
            .ok_or_else(|| PlaybookError::MalformedDocument("top level is not an object".into()))?;
        let meta = field(root, "playbook_metadata", "")?
            .as_object()
            .ok_or_else(|| schema("playbook_metadata is not an object"))?;
        let metadata = PlaybookMetadata {
            version: opt_string(meta, "version")?.unwrap_or_else(|| "v0.1".into()),
            project_name: opt_string(meta, "project_name")?.unwrap_or_default(),
            last_updated_time: opt_string(meta, "last_updated_time")?,
            last_updated_iteration: match meta.get("last_updated_iteration") {
                None | Some(Value::Null) => None,
                Some(Value::Number(n)) => Some(
                    n.as_u64()
                        .and_then(|v| u32::try_from(v).ok())
                        .ok_or_else(|| schema("last_updated_iteration is not a non-negative integer"))?,
                ),
                // older documents store the iteration as a string
                Some(Value::String(s)) => Some(
                    s.trim()
                        .parse()
                        .map_err(|_| schema("last_updated_iteration is not a non-negative integer"))?,
                ),
                Some(_) => return Err(schema("last_updated_iteration has the wrong type")),
            },
            finalized_at: opt_string(meta, "finalized_at")?,
        };

        let entries = field(root, "strategies", "")?
            .as_object()
            .ok_or_else(|| schema("strategies is not an object"))?;
        let mut strategies = BTreeMap::new();
        for (id, entry) in entries {
            let path = format!("strategies.{id}");
            let entry = entry
                .as_object()
                .ok_or_else(|| schema(&format!("{path} is not an object")))?;
            let mi = field(entry, "meta_info", &path)?
                .as_object()
                .ok_or_else(|| schema(&format!("{path}.meta_info is not an object")))?;
            let counter = |name: &str| -> Result<u32, PlaybookError> {
                match mi.get(name) {
                    None => Ok(0),
                    Some(v) => v
                        .as_u64()
                        .and_then(|n| u32::try_from(n).ok())
                        .ok_or_else(|| schema(&format!("{path}.meta_info.{name} is not a non-negative integer"))),
                }
            };
            let meta = MetaInfo {
                usage_count: counter("usage_count")?,
                unusage_count: counter("unusage_count")?,
                success_attribution: counter("success_attribution")?,
                failure_attribution: counter("failure_attribution")?,
            };
            let state = match (mi.get("state"), mi.get("status")) {
                (Some(Value::String(s)), _) => s.parse::<StrategyState>().map_err(|e| schema(&format!("{path}: {e}")))?,
                (Some(_), _) => return Err(schema(&format!("{path}.meta_info.state is not a string"))),
                // documents without an explicit lifecycle state
                (None, Some(Value::String(s))) if s == "resolved" => StrategyState::Resolved,
                (None, Some(Value::String(_))) => StrategyState::Open,
                (None, _) => return Err(schema(&format!("{path}.meta_info has neither state nor status"))),
            };
            let reflection: Reflection = serde_json::from_value(field(entry, "reflection", &path)?.clone())
                .map_err(|e| schema(&format!("{path}.reflection: {e}")))?;
            reflection
                .check()
                .map_err(|e| schema(&format!("{path}.reflection: {e}")))?;
            strategies.insert(
                id.clone(),
                Strategy {
                    id: id.clone(),
                    reflection,
                    meta,
                    state,
                },
            );
        }
        Ok(Playbook { metadata, strategies })
    }
}

fn schema(msg: &str) -> PlaybookError {
    PlaybookError::SchemaViolation(msg.to_string())
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str, path: &str) -> Result<&'a Value, PlaybookError> {
    obj.get(name).ok_or_else(|| {
        if path.is_empty() {
            schema(&format!("missing field {name}"))
        } else {
            schema(&format!("missing field {path}.{name}"))
        }
    })
}

fn opt_string(obj: &Map<String, Value>, name: &str) -> Result<Option<String>, PlaybookError> {
    match obj.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(schema(&format!("{name} is not a string"))),
    }
}

/// Human-readable id: lowercase alphanumerics joined by single hyphens, at
/// most 64 characters.
pub fn slugify(text: &str) -> String {
    let mut slug = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_ascii_alphanumeric() {
            slug.push(c);
        } else if !slug.is_empty() && !slug.ends_with('-') {
            slug.push('-');
        }
    }
    slug.truncate(MAX_SLUG_LEN);
    let slug = slug.trim_end_matches('-').to_string();
    if slug.is_empty() {
        "strategy".into()
    } else {
        slug
    }
}
