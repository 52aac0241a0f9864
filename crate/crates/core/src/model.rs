//! Shared domain types for observed and design traces.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Attribute key under which an observed span exposes its service name.
pub const SERVICE_NAME_KEY: &str = "service.name";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid {kind} {value:?}: {reason}")]
    InvalidId {
        kind: &'static str,
        value: String,
        reason: &'static str,
    },
    #[error("span {span_id} ends before it starts ({end} < {start})")]
    NegativeDuration { span_id: String, start: u64, end: u64 },
    #[error("span {span_id} has an empty service name")]
    EmptyServiceName { span_id: String },
}

/// A typed attribute value.
///
/// Equality is type-strict: `Int(500)` never equals `Str("500")`. Doubles
/// compare by their total order, so every value (NaN included) equals itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Str(String),
    Int(i64),
    Float(f64),
    Bool(bool),
}

impl PartialEq for AttrValue {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (AttrValue::Str(a), AttrValue::Str(b)) => a == b,
            (AttrValue::Int(a), AttrValue::Int(b)) => a == b,
            (AttrValue::Float(a), AttrValue::Float(b)) => a.total_cmp(b) == Ordering::Equal,
            (AttrValue::Bool(a), AttrValue::Bool(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for AttrValue {}

impl Hash for AttrValue {
    fn hash<H: Hasher>(&self, state: &mut H) {
        std::mem::discriminant(self).hash(state);
        match self {
            AttrValue::Str(s) => s.hash(state),
            AttrValue::Int(i) => i.hash(state),
            AttrValue::Float(f) => f.to_bits().hash(state),
            AttrValue::Bool(b) => b.hash(state),
        }
    }
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Str(s) => write!(f, "{s:?}"),
            AttrValue::Int(i) => write!(f, "{i}"),
            AttrValue::Float(x) => write!(f, "{x}"),
            AttrValue::Bool(b) => write!(f, "{b}"),
        }
    }
}

impl From<&str> for AttrValue {
    fn from(s: &str) -> Self {
        AttrValue::Str(s.to_owned())
    }
}

impl From<String> for AttrValue {
    fn from(s: String) -> Self {
        AttrValue::Str(s)
    }
}

impl From<i64> for AttrValue {
    fn from(i: i64) -> Self {
        AttrValue::Int(i)
    }
}

impl From<f64> for AttrValue {
    fn from(x: f64) -> Self {
        AttrValue::Float(x)
    }
}

impl From<bool> for AttrValue {
    fn from(b: bool) -> Self {
        AttrValue::Bool(b)
    }
}

fn validate_hex(kind: &'static str, value: &str, len: usize) -> Result<(), ModelError> {
    let err = |reason| ModelError::InvalidId {
        kind,
        value: value.to_owned(),
        reason,
    };
    if value.len() != len {
        return Err(err(if len == 16 {
            "expected 16 hex characters"
        } else {
            "expected 32 hex characters"
        }));
    }
    if !value.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
        return Err(err("only lowercase hex digits are allowed"));
    }
    if value.bytes().all(|b| b == b'0') {
        return Err(err("all-zero ids are invalid"));
    }
    Ok(())
}

macro_rules! hex_id {
    ($name:ident, $len:expr, $kind:expr) => {
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub const HEX_LEN: usize = $len;

            pub fn new(value: impl Into<String>) -> Result<Self, ModelError> {
                let value = value.into();
                validate_hex($kind, &value, $len)?;
                Ok(Self(value))
            }

            pub fn from_u64s(words: &[u64]) -> Result<Self, ModelError> {
                let hex: String = words.iter().map(|w| format!("{w:016x}")).collect();
                Self::new(hex)
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl FromStr for $name {
            type Err = ModelError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::new(s)
            }
        }

        impl TryFrom<String> for $name {
            type Error = ModelError;

            fn try_from(s: String) -> Result<Self, Self::Error> {
                Self::new(s)
            }
        }

        impl From<$name> for String {
            fn from(id: $name) -> String {
                id.0
            }
        }
    };
}

hex_id!(SpanId, 16, "span id");
hex_id!(TraceId, 32, "trace id");

/// A single recorded operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservedSpan {
    trace_id: TraceId,
    span_id: SpanId,
    parent_span_id: Option<SpanId>,
    name: String,
    service_name: String,
    start_time_nanos: u64,
    end_time_nanos: u64,
    attributes: BTreeMap<String, AttrValue>,
    links: Vec<(TraceId, SpanId)>,
}

#[allow(clippy::too_many_arguments)]
impl ObservedSpan {
    pub fn new(
        trace_id: TraceId,
        span_id: SpanId,
        parent_span_id: Option<SpanId>,
        name: impl Into<String>,
        service_name: impl Into<String>,
        start_time_nanos: u64,
        end_time_nanos: u64,
    ) -> Result<Self, ModelError> {
        let service_name = service_name.into();
        if service_name.is_empty() {
            return Err(ModelError::EmptyServiceName {
                span_id: span_id.to_string(),
            });
        }
        if end_time_nanos < start_time_nanos {
            return Err(ModelError::NegativeDuration {
                span_id: span_id.to_string(),
                start: start_time_nanos,
                end: end_time_nanos,
            });
        }
        Ok(Self {
            trace_id,
            span_id,
            parent_span_id,
            name: name.into(),
            service_name,
            start_time_nanos,
            end_time_nanos,
            attributes: BTreeMap::new(),
            links: Vec::new(),
        })
    }

    pub fn with_attributes(mut self, attributes: BTreeMap<String, AttrValue>) -> Self {
        self.attributes = attributes;
        self
    }

    pub fn with_attribute(mut self, key: impl Into<String>, value: impl Into<AttrValue>) -> Self {
        self.attributes.insert(key.into(), value.into());
        self
    }

    pub fn with_links(mut self, links: Vec<(TraceId, SpanId)>) -> Self {
        self.links = links;
        self
    }

    pub fn trace_id(&self) -> &TraceId {
        &self.trace_id
    }

    pub fn span_id(&self) -> &SpanId {
        &self.span_id
    }

    pub fn parent_span_id(&self) -> Option<&SpanId> {
        self.parent_span_id.as_ref()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn service_name(&self) -> &str {
        &self.service_name
    }

    pub fn start_time_nanos(&self) -> u64 {
        self.start_time_nanos
    }

    pub fn end_time_nanos(&self) -> u64 {
        self.end_time_nanos
    }

    pub fn attributes(&self) -> &BTreeMap<String, AttrValue> {
        &self.attributes
    }

    pub fn links(&self) -> &[(TraceId, SpanId)] {
        &self.links
    }

    /// Looks up `key` in the span's attribute view: its own attributes plus
    /// the service name under `service.name`.
    pub fn attribute(&self, key: &str) -> Option<AttrValue> {
        if key == SERVICE_NAME_KEY {
            return Some(AttrValue::Str(self.service_name.clone()));
        }
        self.attributes.get(key).cloned()
    }

    /// Returns true when the attribute view holds `key` with exactly `value`.
    pub fn attribute_equals(&self, key: &str, value: &AttrValue) -> bool {
        if key == SERVICE_NAME_KEY {
            return matches!(value, AttrValue::Str(s) if *s == self.service_name);
        }
        self.attributes.get(key) == Some(value)
    }

    pub fn duration_micros(&self) -> u64 {
        duration_micros(self)
    }
}

/// Span duration in whole microseconds, truncating.
pub fn duration_micros(span: &ObservedSpan) -> u64 {
    (span.end_time_nanos - span.start_time_nanos) / 1000
}

/// The spans sharing one trace id, assembled into a parent DAG.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservedTrace {
    trace_id: TraceId,
    spans: BTreeMap<SpanId, ObservedSpan>,
    dangling_parents: BTreeSet<SpanId>,
}

impl ObservedTrace {
    /// Builds a trace from spans already known to be unique and acyclic.
    /// Use [`crate::ingest::assemble_traces`] for untrusted input.
    pub(crate) fn from_parts(
        trace_id: TraceId,
        spans: BTreeMap<SpanId, ObservedSpan>,
        dangling_parents: BTreeSet<SpanId>,
    ) -> Self {
        Self {
            trace_id,
            spans,
            dangling_parents,
        }
    }

    pub fn trace_id(&self) -> &TraceId {
        &self.trace_id
    }

    pub fn spans(&self) -> &BTreeMap<SpanId, ObservedSpan> {
        &self.spans
    }

    pub fn span(&self, id: &SpanId) -> Option<&ObservedSpan> {
        self.spans.get(id)
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Spans whose parent id names no span in this trace.
    pub fn dangling_parents(&self) -> &BTreeSet<SpanId> {
        &self.dangling_parents
    }

    /// Parent span, if the parent id resolves within the trace.
    pub fn parent_of(&self, span: &ObservedSpan) -> Option<&ObservedSpan> {
        span.parent_span_id().and_then(|p| self.spans.get(p))
    }

    /// Ancestors of `span`, nearest first, stopping at a root or a dangling
    /// parent.
    pub fn ancestors<'a>(&'a self, span: &'a ObservedSpan) -> impl Iterator<Item = &'a ObservedSpan> + 'a {
        let mut current = self.parent_of(span);
        let mut remaining = self.spans.len();
        std::iter::from_fn(move || {
            let next = current?;
            if remaining == 0 {
                return None;
            }
            remaining -= 1;
            current = self.parent_of(next);
            Some(next)
        })
    }

    pub fn roots(&self) -> impl Iterator<Item = &ObservedSpan> {
        self.spans.values().filter(|s| s.parent_span_id().is_none())
    }

    pub fn children_of<'a>(&'a self, id: &'a SpanId) -> impl Iterator<Item = &'a ObservedSpan> + 'a {
        self.spans
            .values()
            .filter(move |s| s.parent_span_id() == Some(id))
    }
}

/// A designer-authored span pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DesignSpan {
    pub design_span_id: String,
    pub name: String,
    pub match_attributes: BTreeMap<String, AttrValue>,
    pub parent_design_span_id: Option<String>,
    pub description: Option<String>,
    pub max_duration_micros: Option<u64>,
    pub allow_non_immediate_parent: bool,
    pub is_disallowed: bool,
}

impl DesignSpan {
    pub fn new(design_span_id: impl Into<String>, name: impl Into<String>, service_name: impl Into<String>) -> Self {
        let mut match_attributes = BTreeMap::new();
        match_attributes.insert(SERVICE_NAME_KEY.to_owned(), AttrValue::Str(service_name.into()));
        Self {
            design_span_id: design_span_id.into(),
            name: name.into(),
            match_attributes,
            parent_design_span_id: None,
            description: None,
            max_duration_micros: None,
            allow_non_immediate_parent: false,
            is_disallowed: false,
        }
    }

    pub fn parent(mut self, parent: impl Into<String>) -> Self {
        self.parent_design_span_id = Some(parent.into());
        self
    }

    pub fn description(mut self, description: impl Into<String>) -> Self {
        self.description = Some(description.into());
        self
    }

    pub fn max_duration_micros(mut self, micros: u64) -> Self {
        self.max_duration_micros = Some(micros);
        self
    }

    pub fn non_immediate_parent(mut self, allow: bool) -> Self {
        self.allow_non_immediate_parent = allow;
        self
    }

    pub fn disallowed(mut self, disallowed: bool) -> Self {
        self.is_disallowed = disallowed;
        self
    }

    pub fn match_attribute(mut self, key: impl Into<String>, value: impl Into<AttrValue>) -> Self {
        self.match_attributes.insert(key.into(), value.into());
        self
    }
}

/// A tree (or forest) of design spans.
///
/// Spans are kept in the order they were authored; validation lives in
/// [`crate::design::validate_design_trace`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DesignTrace {
    pub id: String,
    pub spans: Vec<DesignSpan>,
}

impl DesignTrace {
    pub fn new(id: impl Into<String>, spans: Vec<DesignSpan>) -> Self {
        Self {
            id: id.into(),
            spans,
        }
    }

    pub fn span(&self, design_span_id: &str) -> Option<&DesignSpan> {
        self.spans.iter().find(|s| s.design_span_id == design_span_id)
    }

    /// Shared `isDisallowed` flag. Only meaningful for validated traces.
    pub fn is_disallowed(&self) -> bool {
        self.spans.first().is_some_and(|s| s.is_disallowed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ViolationKind {
    MissingRequired,
    DurationExceeded,
    DisallowedPresent,
}

impl ViolationKind {
    pub const ALL: [ViolationKind; 3] = [
        ViolationKind::MissingRequired,
        ViolationKind::DurationExceeded,
        ViolationKind::DisallowedPresent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::MissingRequired => "missingRequired",
            ViolationKind::DurationExceeded => "durationExceeded",
            ViolationKind::DisallowedPresent => "disallowedPresent",
        }
    }
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One rule breach. Constructors enforce that only `MissingRequired`
/// lacks an observed witness.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Violation {
    design_trace_id: String,
    design_span_id: String,
    kind: ViolationKind,
    observed_span_id: Option<SpanId>,
}

impl Violation {
    pub fn missing_required(design_trace_id: impl Into<String>, design_span_id: impl Into<String>) -> Self {
        Self {
            kind: ViolationKind::MissingRequired,
            design_trace_id: design_trace_id.into(),
            design_span_id: design_span_id.into(),
            observed_span_id: None,
        }
    }

    pub fn duration_exceeded(
        design_trace_id: impl Into<String>,
        design_span_id: impl Into<String>,
        observed: SpanId,
    ) -> Self {
        Self {
            kind: ViolationKind::DurationExceeded,
            design_trace_id: design_trace_id.into(),
            design_span_id: design_span_id.into(),
            observed_span_id: Some(observed),
        }
    }

    pub fn disallowed_present(
        design_trace_id: impl Into<String>,
        design_span_id: impl Into<String>,
        observed: SpanId,
    ) -> Self {
        Self {
            kind: ViolationKind::DisallowedPresent,
            design_trace_id: design_trace_id.into(),
            design_span_id: design_span_id.into(),
            observed_span_id: Some(observed),
        }
    }

    pub fn kind(&self) -> ViolationKind {
        self.kind
    }

    pub fn design_trace_id(&self) -> &str {
        &self.design_trace_id
    }

    pub fn design_span_id(&self) -> &str {
        &self.design_span_id
    }

    pub fn observed_span_id(&self) -> Option<&SpanId> {
        self.observed_span_id.as_ref()
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}/{})", self.kind, self.design_trace_id, self.design_span_id)?;
        if let Some(id) = &self.observed_span_id {
            write!(f, " at {id}")?;
        }
        Ok(())
    }
}

/// Per-trace conformance outcome; conformant exactly when no violations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceVerdict {
    trace_id: TraceId,
    violations: Vec<Violation>,
}

impl TraceVerdict {
    pub fn new(trace_id: TraceId, violations: Vec<Violation>) -> Self {
        Self { trace_id, violations }
    }

    pub fn trace_id(&self) -> &TraceId {
        &self.trace_id
    }

    pub fn conformant(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tid() -> TraceId {
        TraceId::new("0000000000000000000000000000abcd").unwrap()
    }

    fn sid(n: u64) -> SpanId {
        SpanId::from_u64s(&[n]).unwrap()
    }

    fn span(start: u64, end: u64) -> ObservedSpan {
        ObservedSpan::new(tid(), sid(1), None, "op", "svc", start, end).unwrap()
    }

    #[test]
    fn duration_examples() {
        assert_eq!(duration_micros(&span(0, 0)), 0);
        assert_eq!(duration_micros(&span(0, 500_000_000)), 500_000);
        assert_eq!(duration_micros(&span(0, 1_999)), 1);
    }

    #[test]
    fn ids_reject_bad_input() {
        assert!(SpanId::new("00000000000000a1").is_ok());
        assert!(SpanId::new("0000000000000000").is_err());
        assert!(SpanId::new("00000000000000A1").is_err());
        assert!(SpanId::new("00000000000000a").is_err());
        assert!(SpanId::new("00000000000000g1").is_err());
        assert!(TraceId::new("00000000000000a1").is_err());
        assert!(TraceId::new("000000000000000000000000000000a1").is_ok());
    }

    #[test]
    fn span_invariants_checked_at_construction() {
        assert!(matches!(
            ObservedSpan::new(tid(), sid(1), None, "op", "svc", 10, 9),
            Err(ModelError::NegativeDuration { .. })
        ));
        assert!(matches!(
            ObservedSpan::new(tid(), sid(1), None, "op", "", 0, 9),
            Err(ModelError::EmptyServiceName { .. })
        ));
    }

    #[test]
    fn attr_equality_is_type_strict() {
        assert_ne!(AttrValue::Int(500), AttrValue::Str("500".into()));
        assert_ne!(AttrValue::Int(1), AttrValue::Float(1.0));
        assert_ne!(AttrValue::Bool(true), AttrValue::Str("true".into()));
        assert_eq!(AttrValue::Float(f64::NAN), AttrValue::Float(f64::NAN));
    }

    #[test]
    fn service_name_is_part_of_the_attribute_view() {
        let s = span(0, 1).with_attribute("http.method", "GET");
        assert!(s.attribute_equals(SERVICE_NAME_KEY, &"svc".into()));
        assert!(s.attribute_equals("http.method", &"GET".into()));
        assert!(!s.attribute_equals("http.method", &"POST".into()));
        assert_eq!(s.attribute("missing"), None);
    }

    fn attr_value() -> impl Strategy<Value = AttrValue> {
        prop_oneof![
            "[a-c0-9]{0,3}".prop_map(AttrValue::Str),
            (-3i64..3).prop_map(AttrValue::Int),
            prop_oneof![Just(0.0), Just(-0.0), Just(1.0), Just(f64::NAN), any::<f64>()].prop_map(AttrValue::Float),
            any::<bool>().prop_map(AttrValue::Bool),
        ]
    }

    proptest! {
        #[test]
        fn attr_equality_is_an_equivalence(a in attr_value(), b in attr_value()) {
            prop_assert_eq!(&a, &a.clone());
            prop_assert_eq!(a == b, b == a);
            if std::mem::discriminant(&a) != std::mem::discriminant(&b) {
                prop_assert_ne!(&a, &b);
            }
        }

        #[test]
        fn duration_is_monotone_in_end(start in 0u64..1 << 40, d1 in 0u64..1 << 30, d2 in 0u64..1 << 30) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(duration_micros(&span(start, start + lo)) <= duration_micros(&span(start, start + hi)));
        }
    }
}
