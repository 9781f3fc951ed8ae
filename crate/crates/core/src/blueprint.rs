//! The static task anchor.
//!
//! A [`Blueprint`] is parsed from a JSON document, validated strictly (any
//! violation rejects the whole document) and never mutated afterwards.
//! Human review produces a *new* value with a bumped version through
//! [`review_blueprint`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Optimization direction of a metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    LowerBetter,
    HigherBetter,
}

impl Direction {
    /// +1 for lower-is-better, -1 for higher-is-better.
    pub fn sign(self) -> f64 {
        match self {
            Direction::LowerBetter => 1.0,
            Direction::HigherBetter => -1.0,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "lower_better" => Some(Direction::LowerBetter),
            "higher_better" => Some(Direction::HigherBetter),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDef {
    pub key: String,
    pub direction: Direction,
    pub weight: f64,
    pub definition: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Real,
    Integer,
    RealMap,
}

impl ParamKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "real" => Some(ParamKind::Real),
            "integer" => Some(ParamKind::Integer),
            "real_map" => Some(ParamKind::RealMap),
            _ => None,
        }
    }
}

/// Box constraint for one calibratable parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBound {
    pub name: String,
    pub kind: ParamKind,
    pub low: f64,
    pub high: f64,
    /// Keys of a `real_map` parameter; each key is drawn independently.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub map_keys: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Holdout {
    pub train_fraction: f64,
    pub rule: String,
}

impl Default for Holdout {
    fn default() -> Self {
        Holdout {
            train_fraction: 0.8,
            rule: "temporal holdout: first 80% of time steps for calibration, the rest for evaluation"
                .to_string(),
        }
    }
}

/// Immutable task specification.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Blueprint {
    project_name: String,
    version: String,
    metrics: Vec<MetricDef>,
    #[serde(rename = "calibratable_parameters")]
    parameters: Vec<ParamBound>,
    holdout: Holdout,
    schema_sections: IndexMap<String, String>,
}

/// One failed validation check, addressed by a JSON-path-like location.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BlueprintError {
    #[error("malformed blueprint document: {0}")]
    MalformedDocument(String),
    #[error("blueprint schema violation: {}", join_violations(.0))]
    SchemaViolation(Vec<Violation>),
    #[error("unknown edit target: {0}")]
    UnknownTarget(String),
    #[error("cannot parse edit command `{0}`")]
    BadEdit(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

fn violation(path: impl Into<String>, message: impl Into<String>) -> Violation {
    Violation {
        path: path.into(),
        message: message.into(),
    }
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

impl Blueprint {
    /// Builds and validates a blueprint from its parts.
    pub fn new(
        project_name: impl Into<String>,
        version: impl Into<String>,
        metrics: Vec<MetricDef>,
        parameters: Vec<ParamBound>,
        holdout: Holdout,
        mut schema_sections: IndexMap<String, String>,
    ) -> Result<Self, BlueprintError> {
        // parsed documents come back key-sorted; match that here
        schema_sections.sort_keys();
        let b = Blueprint {
            project_name: project_name.into(),
            version: version.into(),
            metrics,
            parameters,
            holdout,
            schema_sections,
        };
        let violations = b.violations();
        if violations.is_empty() {
            Ok(b)
        } else {
            Err(BlueprintError::SchemaViolation(violations))
        }
    }

    pub fn project_name(&self) -> &str {
        &self.project_name
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn metrics(&self) -> &[MetricDef] {
        &self.metrics
    }

    pub fn parameters(&self) -> &[ParamBound] {
        &self.parameters
    }

    pub fn holdout(&self) -> &Holdout {
        &self.holdout
    }

    pub fn schema_sections(&self) -> &IndexMap<String, String> {
        &self.schema_sections
    }

    pub fn metric(&self, key: &str) -> Option<&MetricDef> {
        self.metrics.iter().find(|m| m.key == key)
    }

    /// Direction of every declared metric, keyed by metric key.
    pub fn directions(&self) -> BTreeMap<String, Direction> {
        self.metrics
            .iter()
            .map(|m| (m.key.clone(), m.direction))
            .collect()
    }

    /// Objective weight of every declared metric, keyed by metric key.
    pub fn weights(&self) -> BTreeMap<String, f64> {
        self.metrics
            .iter()
            .map(|m| (m.key.clone(), m.weight))
            .collect()
    }

    /// Pretty JSON text in the same layout [`parse_blueprint`] reads.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("blueprint serializes")
    }

    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.metrics.is_empty() {
            out.push(violation("metrics", "at least one metric is required"));
        }
        if self.parameters.is_empty() {
            out.push(violation(
                "calibratable_parameters",
                "at least one parameter is required",
            ));
        }
        let mut seen = BTreeSet::new();
        for (i, m) in self.metrics.iter().enumerate() {
            let path = format!("metrics[{i}]");
            if !is_identifier(&m.key) {
                out.push(violation(format!("{path}.key"), "must be a non-empty identifier"));
            } else if !seen.insert(m.key.as_str()) {
                out.push(violation(
                    format!("{path}.key"),
                    format!("duplicate metric key `{}`", m.key),
                ));
            }
            if !(m.weight.is_finite() && m.weight >= 0.0) {
                out.push(violation(
                    format!("{path}.weight"),
                    "must be a finite non-negative number",
                ));
            }
        }
        let mut seen = BTreeSet::new();
        for (i, p) in self.parameters.iter().enumerate() {
            let path = format!("calibratable_parameters[{i}]");
            if !is_identifier(&p.name) {
                out.push(violation(format!("{path}.name"), "must be a non-empty identifier"));
            } else if !seen.insert(p.name.as_str()) {
                out.push(violation(
                    format!("{path}.name"),
                    format!("duplicate parameter name `{}`", p.name),
                ));
            }
            out.extend(bound_violations(p, &path));
        }
        let tf = self.holdout.train_fraction;
        if !(tf > 0.0 && tf < 1.0) {
            out.push(violation("holdout.train_fraction", "must lie in (0, 1)"));
        }
        out
    }
}

fn bound_violations(p: &ParamBound, path: &str) -> Vec<Violation> {
    let mut out = Vec::new();
    let label = if p.name.is_empty() { path } else { p.name.as_str() };
    if !(p.low.is_finite() && p.high.is_finite()) {
        out.push(violation(
            format!("{path}"),
            format!("parameter `{label}` has non-finite bounds"),
        ));
    } else if p.low >= p.high {
        out.push(violation(
            format!("{path}"),
            format!(
                "parameter `{label}` requires low < high, got [{}, {}]",
                p.low, p.high
            ),
        ));
    }
    match p.kind {
        ParamKind::Integer => {
            if p.low.fract() != 0.0 || p.high.fract() != 0.0 {
                out.push(violation(
                    format!("{path}"),
                    format!("integer parameter `{label}` needs integral bounds"),
                ));
            }
        }
        ParamKind::RealMap => {
            if p.map_keys.is_empty() {
                out.push(violation(
                    format!("{path}.map_keys"),
                    format!("real_map parameter `{label}` needs at least one key"),
                ));
            }
            let mut seen = BTreeSet::new();
            for (j, k) in p.map_keys.iter().enumerate() {
                if !is_identifier(k) {
                    out.push(violation(
                        format!("{path}.map_keys[{j}]"),
                        "must be a non-empty identifier",
                    ));
                } else if !seen.insert(k.as_str()) {
                    out.push(violation(
                        format!("{path}.map_keys[{j}]"),
                        format!("duplicate map key `{k}`"),
                    ));
                }
            }
        }
        ParamKind::Real => {}
    }
    if p.kind != ParamKind::RealMap && !p.map_keys.is_empty() {
        out.push(violation(
            format!("{path}.map_keys"),
            format!("only real_map parameters take map_keys (`{label}`)"),
        ));
    }
    out
}

/// Field accessors that record a violation instead of failing fast.
struct Reader<'a> {
    violations: &'a mut Vec<Violation>,
}

impl Reader<'_> {
    fn string(&mut self, obj: &serde_json::Map<String, Value>, key: &str, path: &str) -> String {
        match obj.get(key) {
            Some(Value::String(s)) => s.clone(),
            Some(_) => {
                self.violations
                    .push(violation(format!("{path}.{key}"), "must be a string"));
                String::new()
            }
            None => {
                self.violations
                    .push(violation(format!("{path}.{key}"), "is required"));
                String::new()
            }
        }
    }

    fn number(&mut self, obj: &serde_json::Map<String, Value>, key: &str, path: &str) -> f64 {
        match obj.get(key) {
            Some(Value::Number(n)) => n.as_f64().unwrap_or(f64::NAN),
            Some(_) => {
                self.violations
                    .push(violation(format!("{path}.{key}"), "must be a number"));
                f64::NAN
            }
            None => {
                self.violations
                    .push(violation(format!("{path}.{key}"), "is required"));
                f64::NAN
            }
        }
    }
}

fn opaque_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parses and validates a blueprint document.
///
/// Every violation found is reported, each tagged with the offending path.
pub fn parse_blueprint(text: &str) -> Result<Blueprint, BlueprintError> {
    let doc: Value =
        serde_json::from_str(text).map_err(|e| BlueprintError::MalformedDocument(e.to_string()))?;
    let Value::Object(root) = doc else {
        return Err(BlueprintError::SchemaViolation(vec![violation(
            "$",
            "top level must be an object",
        )]));
    };
    let mut violations = Vec::new();
    let mut r = Reader {
        violations: &mut violations,
    };

    let project_name = r.string(&root, "project_name", "$");
    let version = match root.get("version") {
        None => "1.0".to_string(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => {
            r.violations.push(violation("$.version", "must be a string"));
            String::new()
        }
    };

    let mut metrics = Vec::new();
    match root.get("metrics") {
        Some(Value::Array(items)) => {
            for (i, item) in items.iter().enumerate() {
                let path = format!("metrics[{i}]");
                let Value::Object(obj) = item else {
                    r.violations.push(violation(path, "must be an object"));
                    continue;
                };
                let key = r.string(obj, "key", &path);
                let dir_text = r.string(obj, "direction", &path);
                let direction = Direction::parse(&dir_text).unwrap_or_else(|| {
                    if obj.contains_key("direction") {
                        r.violations.push(violation(
                            format!("{path}.direction"),
                            format!("expected lower_better or higher_better, got `{dir_text}`"),
                        ));
                    }
                    Direction::LowerBetter
                });
                let weight = match obj.get("weight") {
                    None => 1.0,
                    Some(_) => r.number(obj, "weight", &path),
                };
                let definition = match obj.get("definition") {
                    None => String::new(),
                    Some(_) => r.string(obj, "definition", &path),
                };
                metrics.push(MetricDef {
                    key,
                    direction,
                    weight,
                    definition,
                });
            }
        }
        Some(_) => r.violations.push(violation("metrics", "must be an array")),
        None => r.violations.push(violation("metrics", "is required")),
    }

    let mut parameters = Vec::new();
    match root.get("calibratable_parameters") {
        Some(Value::Array(items)) => {
            for (i, item) in items.iter().enumerate() {
                let path = format!("calibratable_parameters[{i}]");
                let Value::Object(obj) = item else {
                    r.violations.push(violation(path, "must be an object"));
                    continue;
                };
                let name = r.string(obj, "name", &path);
                let kind_text = match obj.get("kind") {
                    None => "real".to_string(),
                    Some(_) => r.string(obj, "kind", &path),
                };
                let kind = ParamKind::parse(&kind_text).unwrap_or_else(|| {
                    r.violations.push(violation(
                        format!("{path}.kind"),
                        format!("expected real, integer or real_map, got `{kind_text}`"),
                    ));
                    ParamKind::Real
                });
                let low = r.number(obj, "low", &path);
                let high = r.number(obj, "high", &path);
                let map_keys = match obj.get("map_keys") {
                    None => Vec::new(),
                    Some(Value::Array(keys)) => keys
                        .iter()
                        .enumerate()
                        .filter_map(|(j, k)| match k {
                            Value::String(s) => Some(s.clone()),
                            _ => {
                                r.violations.push(violation(
                                    format!("{path}.map_keys[{j}]"),
                                    "must be a string",
                                ));
                                None
                            }
                        })
                        .collect(),
                    Some(_) => {
                        r.violations
                            .push(violation(format!("{path}.map_keys"), "must be an array"));
                        Vec::new()
                    }
                };
                parameters.push(ParamBound {
                    name,
                    kind,
                    low,
                    high,
                    map_keys,
                });
            }
        }
        Some(_) => r
            .violations
            .push(violation("calibratable_parameters", "must be an array")),
        None => r
            .violations
            .push(violation("calibratable_parameters", "is required")),
    }

    let holdout = match root.get("holdout") {
        None => Holdout::default(),
        Some(Value::Object(obj)) => {
            let train_fraction = match obj.get("train_fraction") {
                None => Holdout::default().train_fraction,
                Some(_) => r.number(obj, "train_fraction", "holdout"),
            };
            let rule = match obj.get("rule") {
                None => Holdout::default().rule,
                Some(_) => r.string(obj, "rule", "holdout"),
            };
            Holdout {
                train_fraction,
                rule,
            }
        }
        Some(_) => {
            r.violations.push(violation("holdout", "must be an object"));
            Holdout::default()
        }
    };

    let schema_sections = match root.get("schema_sections") {
        None => IndexMap::new(),
        Some(Value::Object(obj)) => obj
            .iter()
            .map(|(k, v)| (k.clone(), opaque_text(v)))
            .collect(),
        Some(_) => {
            r.violations
                .push(violation("schema_sections", "must be an object"));
            IndexMap::new()
        }
    };

    let b = Blueprint {
        project_name,
        version,
        metrics,
        parameters,
        holdout,
        schema_sections,
    };
    violations.extend(b.violations());
    if violations.is_empty() {
        Ok(b)
    } else {
        Err(BlueprintError::SchemaViolation(violations))
    }
}

/// The authoritative set of metric keys.
pub fn metric_whitelist(b: &Blueprint) -> BTreeSet<String> {
    b.metrics.iter().map(|m| m.key.clone()).collect()
}

/// Increments the trailing number of a version string (`v0.1` -> `v0.2`,
/// `3` -> `4`); appends `.1` when there is none.
pub fn bump_version(version: &str) -> String {
    let digits = version
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .count();
    if digits == 0 {
        return format!("{version}.1");
    }
    let (head, tail) = version.split_at(version.len() - digits);
    match tail.parse::<u64>() {
        Ok(n) => format!("{head}{}", n + 1),
        Err(_) => format!("{version}.1"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricField {
    Key,
    Direction,
    Weight,
    Definition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamField {
    Kind,
    Low,
    High,
    MapKeys,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HoldoutField {
    TrainFraction,
    Rule,
}

/// A single review edit.
#[derive(Debug, Clone, PartialEq)]
pub enum BlueprintEdit {
    Section {
        name: String,
        text: String,
    },
    Metric {
        key: String,
        field: MetricField,
        value: String,
    },
    Parameter {
        name: String,
        field: ParamField,
        value: String,
    },
    Holdout {
        field: HoldoutField,
        value: String,
    },
}

impl BlueprintEdit {
    /// Parses one edit command.
    ///
    /// ```text
    /// section <name> = <text>
    /// metric <key>.<key|direction|weight|definition> = <value>
    /// param <name>.<kind|low|high|map_keys> = <value>
    /// holdout.<train_fraction|rule> = <value>
    /// ```
    pub fn parse(line: &str) -> Result<Self, BlueprintError> {
        let bad = || BlueprintError::BadEdit(line.to_string());
        let (lhs, value) = line.split_once('=').ok_or_else(bad)?;
        let lhs = lhs.trim();
        let value = value.trim().to_string();
        if let Some(field) = lhs.strip_prefix("holdout.") {
            let field = match field.trim() {
                "train_fraction" => HoldoutField::TrainFraction,
                "rule" => HoldoutField::Rule,
                _ => return Err(bad()),
            };
            return Ok(BlueprintEdit::Holdout { field, value });
        }
        let (verb, target) = lhs.split_once(char::is_whitespace).ok_or_else(bad)?;
        let target = target.trim();
        match verb {
            "section" if !target.is_empty() => Ok(BlueprintEdit::Section {
                name: target.to_string(),
                text: value,
            }),
            "metric" => {
                let (key, field) = target.rsplit_once('.').ok_or_else(bad)?;
                let field = match field {
                    "key" => MetricField::Key,
                    "direction" => MetricField::Direction,
                    "weight" => MetricField::Weight,
                    "definition" => MetricField::Definition,
                    _ => return Err(bad()),
                };
                Ok(BlueprintEdit::Metric {
                    key: key.to_string(),
                    field,
                    value,
                })
            }
            "param" => {
                let (name, field) = target.rsplit_once('.').ok_or_else(bad)?;
                let field = match field {
                    "kind" => ParamField::Kind,
                    "low" => ParamField::Low,
                    "high" => ParamField::High,
                    "map_keys" => ParamField::MapKeys,
                    _ => return Err(bad()),
                };
                Ok(BlueprintEdit::Parameter {
                    name: name.to_string(),
                    field,
                    value,
                })
            }
            _ => Err(bad()),
        }
    }
}

fn parse_number(value: &str, path: String) -> Result<f64, BlueprintError> {
    value
        .parse::<f64>()
        .map_err(|_| BlueprintError::SchemaViolation(vec![violation(path, "expected a number")]))
}

/// Applies review edits, returning a new validated blueprint with a bumped
/// version. The input is left untouched.
pub fn review_blueprint(b: &Blueprint, edits: &[BlueprintEdit]) -> Result<Blueprint, BlueprintError> {
    let mut next = b.clone();
    for edit in edits {
        match edit {
            BlueprintEdit::Section { name, text } => {
                let slot = next
                    .schema_sections
                    .get_mut(name)
                    .ok_or_else(|| BlueprintError::UnknownTarget(format!("section `{name}`")))?;
                *slot = text.clone();
            }
            BlueprintEdit::Metric { key, field, value } => {
                let idx = next
                    .metrics
                    .iter()
                    .position(|m| &m.key == key)
                    .ok_or_else(|| BlueprintError::UnknownTarget(format!("metric `{key}`")))?;
                let path = format!("metrics[{idx}]");
                let m = &mut next.metrics[idx];
                match field {
                    MetricField::Key => m.key = value.clone(),
                    MetricField::Definition => m.definition = value.clone(),
                    MetricField::Weight => m.weight = parse_number(value, format!("{path}.weight"))?,
                    MetricField::Direction => {
                        m.direction = Direction::parse(value).ok_or_else(|| {
                            BlueprintError::SchemaViolation(vec![violation(
                                format!("{path}.direction"),
                                format!("expected lower_better or higher_better, got `{value}`"),
                            )])
                        })?
                    }
                }
            }
            BlueprintEdit::Parameter { name, field, value } => {
                let idx = next
                    .parameters
                    .iter()
                    .position(|p| &p.name == name)
                    .ok_or_else(|| BlueprintError::UnknownTarget(format!("parameter `{name}`")))?;
                let path = format!("calibratable_parameters[{idx}]");
                let p = &mut next.parameters[idx];
                match field {
                    ParamField::Low => p.low = parse_number(value, format!("{path}.low"))?,
                    ParamField::High => p.high = parse_number(value, format!("{path}.high"))?,
                    ParamField::Kind => {
                        p.kind = ParamKind::parse(value).ok_or_else(|| {
                            BlueprintError::SchemaViolation(vec![violation(
                                format!("{path}.kind"),
                                format!("expected real, integer or real_map, got `{value}`"),
                            )])
                        })?
                    }
                    ParamField::MapKeys => {
                        p.map_keys = value
                            .split(',')
                            .map(|s| s.trim().to_string())
                            .filter(|s| !s.is_empty())
                            .collect()
                    }
                }
            }
            BlueprintEdit::Holdout { field, value } => match field {
                HoldoutField::Rule => next.holdout.rule = value.clone(),
                HoldoutField::TrainFraction => {
                    next.holdout.train_fraction =
                        parse_number(value, "holdout.train_fraction".to_string())?
                }
            },
        }
    }
    next.version = bump_version(&b.version);
    let violations = next.violations();
    if violations.is_empty() {
        Ok(next)
    } else {
        Err(BlueprintError::SchemaViolation(violations))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "project_name": "toy",
        "version": "1.0",
        "metrics": [{"key": "rmse", "direction": "lower_better", "weight": 1}],
        "calibratable_parameters": [{"name": "beta", "kind": "real", "low": 0, "high": 1}]
    }"#;

    #[test]
    fn minimal_document() {
        let b = parse_blueprint(MINIMAL).unwrap();
        assert_eq!(b.metrics().len(), 1);
        assert_eq!(b.parameters().len(), 1);
        assert_eq!(b.holdout().train_fraction, 0.8);
        assert_eq!(metric_whitelist(&b), BTreeSet::from(["rmse".to_string()]));
    }

    #[test]
    fn inverted_bounds_name_the_parameter() {
        let text = MINIMAL.replace(r#""low": 0, "high": 1"#, r#""low": 4, "high": 0.25"#);
        match parse_blueprint(&text) {
            Err(BlueprintError::SchemaViolation(v)) => {
                assert_eq!(v.len(), 1);
                assert!(v[0].message.contains("beta"), "{v:?}");
                assert_eq!(v[0].path, "calibratable_parameters[0]");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn map_valued_parameter() {
        let text = r#"{
            "project_name": "mobility",
            "metrics": [
                {"key": "stop_count_mae", "direction": "lower_better", "weight": 1},
                {"key": "category_mix_jsd", "direction": "lower_better", "weight": 1},
                {"key": "time_of_day_emd", "direction": "lower_better", "weight": 1},
                {"key": "poi_topk_recall", "direction": "higher_better", "weight": 1}
            ],
            "calibratable_parameters": [
                {"name": "theta_cat_weight_multiplier_by_supercategory", "kind": "real_map",
                 "low": 0.25, "high": 4.0, "map_keys": ["food", "shopping", "transport"]}
            ]
        }"#;
        let b = parse_blueprint(text).unwrap();
        let p = &b.parameters()[0];
        assert_eq!(p.kind, ParamKind::RealMap);
        assert_eq!((p.low, p.high), (0.25, 4.0));
        assert_eq!(p.map_keys.len(), 3);
        let wl = metric_whitelist(&b);
        for k in ["stop_count_mae", "category_mix_jsd", "time_of_day_emd", "poi_topk_recall"] {
            assert!(wl.contains(k));
        }
    }

    #[test]
    fn malformed_and_missing() {
        assert!(matches!(
            parse_blueprint("{not json"),
            Err(BlueprintError::MalformedDocument(_))
        ));
        match parse_blueprint(r#"{"project_name": "x"}"#) {
            Err(BlueprintError::SchemaViolation(v)) => {
                let paths: Vec<_> = v.iter().map(|x| x.path.as_str()).collect();
                assert!(paths.contains(&"metrics"));
                assert!(paths.contains(&"calibratable_parameters"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_keys_rejected() {
        let text = MINIMAL.replace(
            r#"[{"key": "rmse", "direction": "lower_better", "weight": 1}]"#,
            r#"[{"key": "rmse", "direction": "lower_better"}, {"key": "rmse", "direction": "higher_better"}]"#,
        );
        let err = parse_blueprint(&text).unwrap_err();
        assert!(err.to_string().contains("duplicate metric key"));
    }

    #[test]
    fn integer_bounds_must_be_integral() {
        let text = MINIMAL.replace(r#""kind": "real", "low": 0, "high": 1"#, r#""kind": "integer", "low": 0.5, "high": 3"#);
        assert!(parse_blueprint(&text).is_err());
    }

    #[test]
    fn schema_sections_are_opaque() {
        let text = MINIMAL.replace(
            r#""project_name": "toy","#,
            r#""project_name": "toy", "schema_sections": {"roles": "residents", "topology": {"layers": 3}},"#,
        );
        let b = parse_blueprint(&text).unwrap();
        assert_eq!(b.schema_sections()["roles"], "residents");
        assert_eq!(b.schema_sections()["topology"], r#"{"layers":3}"#);
        let keys: Vec<_> = b.schema_sections().keys().collect();
        assert_eq!(keys, ["roles", "topology"]);
    }

    #[test]
    fn round_trip_through_json() {
        let b = parse_blueprint(MINIMAL).unwrap();
        assert_eq!(parse_blueprint(&b.to_json()).unwrap(), b);
    }

    #[test]
    fn review_empty_bumps_version() {
        let b = parse_blueprint(MINIMAL).unwrap();
        let r = review_blueprint(&b, &[]).unwrap();
        assert_eq!(r.version(), "1.1");
        assert_eq!(r.metrics(), b.metrics());
        assert_eq!(b.version(), "1.0");
    }

    #[test]
    fn review_widens_bound() {
        let b = parse_blueprint(MINIMAL).unwrap();
        let edit = BlueprintEdit::parse("param beta.high = 2").unwrap();
        let r = review_blueprint(&b, &[edit]).unwrap();
        assert_eq!(r.parameters()[0].high, 2.0);
        assert_eq!(b.parameters()[0].high, 1.0);
    }

    #[test]
    fn review_rename_collision() {
        let text = MINIMAL.replace(
            r#"[{"key": "rmse", "direction": "lower_better", "weight": 1}]"#,
            r#"[{"key": "rmse", "direction": "lower_better"}, {"key": "mae", "direction": "lower_better"}]"#,
        );
        let b = parse_blueprint(&text).unwrap();
        let edit = BlueprintEdit::parse("metric mae.key = rmse").unwrap();
        assert!(matches!(
            review_blueprint(&b, &[edit]),
            Err(BlueprintError::SchemaViolation(_))
        ));
    }

    #[test]
    fn review_unknown_target() {
        let b = parse_blueprint(MINIMAL).unwrap();
        for cmd in ["param gamma.low = 0", "metric nope.weight = 1", "section roles = x"] {
            let edit = BlueprintEdit::parse(cmd).unwrap();
            assert!(matches!(
                review_blueprint(&b, &[edit]),
                Err(BlueprintError::UnknownTarget(_))
            ));
        }
        assert!(BlueprintEdit::parse("frobnicate").is_err());
    }

    #[test]
    fn version_bumping() {
        assert_eq!(bump_version("v0.1"), "v0.2");
        assert_eq!(bump_version("9"), "10");
        assert_eq!(bump_version("draft"), "draft.1");
    }
}
