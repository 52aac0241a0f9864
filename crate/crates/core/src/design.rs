//! Design traces: loading, validation, serialization, and import from
//! observed traces.
//!
//! Design file layout:
//!
//! ```json
//! {"designTraces":[{"id":"required-flow","spans":[{"spanId":"A",
//!   "name":"aspnet_core.request","parentSpanId":null,
//!   "match":{"service.name":"gateway"},
//!   "design":{"description":"Client request","maxDuration":"500ms",
//!             "allowNonImmediateParent":false,"isDisallowed":false}}]}]}
//! ```
//!
//! `maxDuration` takes integer microseconds or a string with a `us`, `ms`
//! or `s` suffix. Absent `design` keys take their defaults.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{AttrValue, DesignSpan, DesignTrace, ObservedTrace, SpanId, SERVICE_NAME_KEY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ValidationErrorKind {
    UnknownParent,
    ParentCycle,
    MixedDisallowedFlags,
    DuplicateSpanId,
    MissingServiceName,
    BadDuration,
    EmptyTrace,
    DuplicateTraceId,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ValidationError {
    pub design_trace_id: String,
    pub design_span_id: Option<String>,
    pub kind: ValidationErrorKind,
    pub detail: String,
}

impl ValidationError {
    fn trace(trace: &str, kind: ValidationErrorKind, detail: impl Into<String>) -> Self {
        Self {
            design_trace_id: trace.to_owned(),
            design_span_id: None,
            kind,
            detail: detail.into(),
        }
    }

    fn span(trace: &str, span: &str, kind: ValidationErrorKind, detail: impl Into<String>) -> Self {
        Self {
            design_trace_id: trace.to_owned(),
            design_span_id: Some(span.to_owned()),
            kind,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} in design trace {:?}", self.kind, self.design_trace_id)?;
        if let Some(span) = &self.design_span_id {
            write!(f, ", span {span:?}")?;
        }
        write!(f, ": {}", self.detail)
    }
}

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("malformed design document: {0}")]
    MalformedDocument(String),
    #[error("invalid design set:\n{}", format_errors(.0))]
    Invalid(Vec<ValidationError>),
}

fn format_errors(errors: &[ValidationError]) -> String {
    errors.iter().map(|e| format!("  - {e}")).collect::<Vec<_>>().join("\n")
}

/// Checks a design trace against every structural rule. Returns all
/// problems found; an empty list means the trace is valid.
pub fn validate_design_trace(trace: &DesignTrace) -> Vec<ValidationError> {
    use ValidationErrorKind::*;
    let id = trace.id.as_str();
    let mut errors = Vec::new();

    if trace.spans.is_empty() {
        errors.push(ValidationError::trace(id, EmptyTrace, "design trace has no spans"));
        return errors;
    }

    let mut by_id: HashMap<&str, &DesignSpan> = HashMap::new();
    for span in &trace.spans {
        if by_id.insert(&span.design_span_id, span).is_some() {
            errors.push(ValidationError::span(id, &span.design_span_id, DuplicateSpanId, "span id used more than once"));
        }
    }

    for span in &trace.spans {
        let sid = span.design_span_id.as_str();
        if !span.match_attributes.contains_key(SERVICE_NAME_KEY) {
            errors.push(ValidationError::span(id, sid, MissingServiceName, "match attributes lack service.name"));
        }
        if span.max_duration_micros == Some(0) {
            errors.push(ValidationError::span(id, sid, BadDuration, "maxDuration must be positive"));
        }
        if let Some(parent) = &span.parent_design_span_id {
            if !by_id.contains_key(parent.as_str()) {
                errors.push(ValidationError::span(id, sid, UnknownParent, format!("parent {parent:?} not defined")));
            }
        }
    }

    // Each cycle is reported once, against its smallest span id.
    let mut reported: BTreeSet<&str> = BTreeSet::new();
    let mut settled: BTreeSet<&str> = BTreeSet::new();
    for span in &trace.spans {
        let mut path: Vec<&str> = Vec::new();
        let mut cursor = Some(span.design_span_id.as_str());
        while let Some(current) = cursor {
            if settled.contains(current) {
                break;
            }
            if let Some(pos) = path.iter().position(|p| *p == current) {
                let cycle = &path[pos..];
                let smallest = *cycle.iter().min().expect("cycle is non-empty");
                if reported.insert(smallest) {
                    errors.push(ValidationError::span(
                        id,
                        smallest,
                        ParentCycle,
                        format!("parent chain loops through {}", cycle.join(" -> ")),
                    ));
                }
                break;
            }
            path.push(current);
            cursor = by_id
                .get(current)
                .and_then(|s| s.parent_design_span_id.as_deref())
                .filter(|p| by_id.contains_key(p));
        }
        settled.extend(path);
    }

    let disallowed = trace.spans.iter().filter(|s| s.is_disallowed).count();
    if disallowed != 0 && disallowed != trace.spans.len() {
        errors.push(ValidationError::trace(
            id,
            MixedDisallowedFlags,
            "isDisallowed must be the same on every span of a design trace",
        ));
    }

    errors.sort();
    errors
}

/// A validated collection of design traces.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DesignTraceSet {
    traces: Vec<DesignTrace>,
}

impl DesignTraceSet {
    pub fn new(traces: Vec<DesignTrace>) -> Result<Self, Vec<ValidationError>> {
        let mut errors = Vec::new();
        let mut seen = BTreeSet::new();
        for trace in &traces {
            if !seen.insert(trace.id.as_str()) {
                errors.push(ValidationError::trace(
                    &trace.id,
                    ValidationErrorKind::DuplicateTraceId,
                    "design trace id used more than once",
                ));
            }
            errors.extend(validate_design_trace(trace));
        }
        if errors.is_empty() {
            Ok(Self { traces })
        } else {
            Err(errors)
        }
    }

    pub fn traces(&self) -> &[DesignTrace] {
        &self.traces
    }

    pub fn required_traces(&self) -> impl Iterator<Item = &DesignTrace> {
        self.traces.iter().filter(|t| !t.is_disallowed())
    }

    pub fn disallowed_traces(&self) -> impl Iterator<Item = &DesignTrace> {
        self.traces.iter().filter(|t| t.is_disallowed())
    }

    pub fn get(&self, id: &str) -> Option<&DesignTrace> {
        self.traces.iter().find(|t| t.id == id)
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct DesignFile {
    design_traces: Vec<DesignTraceDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DesignTraceDoc {
    id: String,
    spans: Vec<DesignSpanDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct DesignSpanDoc {
    span_id: String,
    name: String,
    #[serde(default)]
    parent_span_id: Option<String>,
    #[serde(rename = "match", default)]
    match_attributes: BTreeMap<String, Value>,
    #[serde(default)]
    design: DesignProps,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct DesignProps {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    #[serde(default)]
    max_duration: Option<Value>,
    #[serde(default)]
    allow_non_immediate_parent: Option<bool>,
    #[serde(default)]
    is_disallowed: Option<bool>,
}

/// Parses a duration given as integer microseconds or as a string with a
/// `us`, `ms` or `s` suffix.
pub fn parse_duration_micros(value: &Value) -> Result<u64, String> {
    match value {
        Value::Number(n) => n
            .as_u64()
            .ok_or_else(|| format!("{n} is not a non-negative integer microsecond count")),
        Value::String(s) => {
            let s = s.trim();
            let (digits, scale) = if let Some(d) = s.strip_suffix("us").or_else(|| s.strip_suffix("µs")) {
                (d, 1)
            } else if let Some(d) = s.strip_suffix("ms") {
                (d, 1_000)
            } else if let Some(d) = s.strip_suffix('s') {
                (d, 1_000_000)
            } else {
                (s, 1)
            };
            let n: u64 = digits
                .trim()
                .parse()
                .map_err(|_| format!("cannot parse duration {s:?}"))?;
            n.checked_mul(scale).ok_or_else(|| format!("duration {s:?} overflows"))
        }
        other => Err(format!("duration must be a number or string, got {other}")),
    }
}

fn json_to_attr(value: &Value) -> Result<AttrValue, String> {
    match value {
        Value::String(s) => Ok(AttrValue::Str(s.clone())),
        Value::Bool(b) => Ok(AttrValue::Bool(*b)),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                Ok(AttrValue::Int(i))
            } else if n.is_u64() {
                Err(format!("integer {n} exceeds the signed 64-bit range"))
            } else {
                Ok(AttrValue::Float(n.as_f64().expect("finite JSON number")))
            }
        }
        other => Err(format!("unsupported match value {other}")),
    }
}

fn attr_to_json(value: &AttrValue) -> Value {
    match value {
        AttrValue::Str(s) => Value::String(s.clone()),
        AttrValue::Int(i) => Value::from(*i),
        AttrValue::Float(f) => Value::from(*f),
        AttrValue::Bool(b) => Value::Bool(*b),
    }
}

/// Loads and validates a design file, reporting every problem found.
pub fn load_design_set(document: &[u8]) -> Result<DesignTraceSet, DesignError> {
    let file: DesignFile =
        serde_json::from_slice(document).map_err(|e| DesignError::MalformedDocument(e.to_string()))?;

    let mut errors = Vec::new();
    let mut traces = Vec::with_capacity(file.design_traces.len());
    for doc in file.design_traces {
        let mut spans = Vec::with_capacity(doc.spans.len());
        for s in doc.spans {
            let mut match_attributes = BTreeMap::new();
            for (k, v) in &s.match_attributes {
                let v = json_to_attr(v).map_err(|e| DesignError::MalformedDocument(format!("span {:?}: {e}", s.span_id)))?;
                match_attributes.insert(k.clone(), v);
            }
            let max_duration_micros = match s.design.max_duration.as_ref().filter(|v| !v.is_null()) {
                None => None,
                Some(v) => match parse_duration_micros(v) {
                    Ok(micros) => Some(micros),
                    Err(detail) => {
                        errors.push(ValidationError::span(&doc.id, &s.span_id, ValidationErrorKind::BadDuration, detail));
                        None
                    }
                },
            };
            spans.push(DesignSpan {
                design_span_id: s.span_id,
                name: s.name,
                match_attributes,
                parent_design_span_id: s.parent_span_id,
                description: s.design.description,
                max_duration_micros,
                allow_non_immediate_parent: s.design.allow_non_immediate_parent.unwrap_or(false),
                is_disallowed: s.design.is_disallowed.unwrap_or(false),
            });
        }
        traces.push(DesignTrace::new(doc.id, spans));
    }

    match DesignTraceSet::new(traces) {
        Ok(set) if errors.is_empty() => Ok(set),
        Ok(_) => Err(DesignError::Invalid(errors)),
        Err(more) => {
            errors.extend(more);
            errors.sort();
            Err(DesignError::Invalid(errors))
        }
    }
}

/// Serializes design traces to the design file layout. Durations are
/// written as integer microseconds.
pub fn to_design_json<'a>(traces: impl IntoIterator<Item = &'a DesignTrace>) -> Vec<u8> {
    let file = DesignFile {
        design_traces: traces
            .into_iter()
            .map(|t| DesignTraceDoc {
                id: t.id.clone(),
                spans: t
                    .spans
                    .iter()
                    .map(|s| DesignSpanDoc {
                        span_id: s.design_span_id.clone(),
                        name: s.name.clone(),
                        parent_span_id: s.parent_design_span_id.clone(),
                        match_attributes: s.match_attributes.iter().map(|(k, v)| (k.clone(), attr_to_json(v))).collect(),
                        design: DesignProps {
                            description: s.description.clone(),
                            max_duration: s.max_duration_micros.map(Value::from),
                            allow_non_immediate_parent: Some(s.allow_non_immediate_parent),
                            is_disallowed: Some(s.is_disallowed),
                        },
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_vec_pretty(&file).expect("in-memory serialization cannot fail")
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImportError {
    #[error("span {0} is not part of trace {1}")]
    UnknownSpanId(SpanId, String),
}

/// Derives a design trace from an observed trace, keeping only `keep`.
///
/// Each kept span becomes a design span named after its span id, matching
/// on name and service. Its design parent is the nearest kept ancestor;
/// when any ancestor was skipped the span accepts non-immediate parents.
pub fn import_design_from_observed(trace: &ObservedTrace, keep: &BTreeSet<SpanId>) -> Result<DesignTrace, ImportError> {
    if let Some(missing) = keep.iter().find(|id| trace.span(id).is_none()) {
        return Err(ImportError::UnknownSpanId(missing.clone(), trace.trace_id().to_string()));
    }
    let spans = keep
        .iter()
        .map(|id| {
            let observed = trace.span(id).expect("checked above");
            let mut skipped = false;
            let mut parent = None;
            for ancestor in trace.ancestors(observed) {
                if keep.contains(ancestor.span_id()) {
                    parent = Some(ancestor.span_id().to_string());
                    break;
                }
                skipped = true;
            }
            let mut span = DesignSpan::new(id.to_string(), observed.name(), observed.service_name())
                .non_immediate_parent(skipped);
            span.parent_design_span_id = parent;
            span
        })
        .collect();
    Ok(DesignTrace::new(format!("imported-{}", trace.trace_id()), spans))
}
