//! Ingestion of exported trace files.
//!
//! Two layouts are understood: Zipkin v2 JSON (a top-level array of spans)
//! and the resource-grouped OpenTelemetry JSON layout (a top-level object
//! with `resourceSpans`). The latter is also the canonical storage format
//! written by [`to_otel_json`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AttrValue, ModelError, ObservedSpan, ObservedTrace, SpanId, TraceId, SERVICE_NAME_KEY};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("span is missing required field `{0}`")]
    MissingField(&'static str),
    #[error("resource has no service.name attribute")]
    MissingServiceName,
    #[error(transparent)]
    InvalidSpan(#[from] ModelError),
    #[error("duplicate span id {span_id} in trace {trace_id}")]
    DuplicateSpanId { trace_id: TraceId, span_id: SpanId },
    #[error("cyclic parent chain through span {span_id} in trace {trace_id}")]
    CyclicParentChain { trace_id: TraceId, span_id: SpanId },
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: Box<IngestError>,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IngestWarningKind {
    DanglingParent,
    /// Reserved for reporting; duplicates are raised as
    /// [`IngestError::DuplicateSpanId`].
    DuplicateSpanId,
    ClampedTimestamp,
}

/// A non-fatal ingestion finding.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IngestWarning {
    pub trace_id: TraceId,
    pub span_id: SpanId,
    pub kind: IngestWarningKind,
    pub detail: String,
}

impl fmt::Display for IngestWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} trace={} span={}: {}", self.kind, self.trace_id, self.span_id, self.detail)
    }
}

/// Top-level layout of an export, detected from its first JSON token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DocumentFormat {
    ZipkinV2,
    OtelJson,
}

pub fn detect_format(document: &[u8]) -> Result<DocumentFormat, IngestError> {
    match document.iter().find(|b| !b.is_ascii_whitespace()) {
        Some(b'[') => Ok(DocumentFormat::ZipkinV2),
        Some(b'{') => Ok(DocumentFormat::OtelJson),
        Some(_) => Err(IngestError::MalformedDocument(
            "expected a JSON array (Zipkin v2) or object (OpenTelemetry)".into(),
        )),
        None => Err(IngestError::MalformedDocument("empty document".into())),
    }
}

/// Parses either supported layout.
pub fn parse_document(document: &[u8], warnings: &mut Vec<IngestWarning>) -> Result<Vec<ObservedSpan>, IngestError> {
    match detect_format(document)? {
        DocumentFormat::ZipkinV2 => parse_zipkin_v2_with_warnings(document, warnings),
        DocumentFormat::OtelJson => parse_otel_json_with_warnings(document, warnings),
    }
}

/// Lowercases and left-pads a hex id to `width` characters.
fn normalize_hex(raw: &str, width: usize) -> String {
    let lower = raw.trim().to_ascii_lowercase();
    if lower.len() >= width {
        lower
    } else {
        format!("{lower:0>width$}")
    }
}

/// Empty or all-zero parent ids mean "no parent".
fn normalize_parent(raw: Option<&str>) -> Result<Option<SpanId>, ModelError> {
    match raw.map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) if s.bytes().all(|b| b == b'0') => Ok(None),
        Some(s) => SpanId::new(normalize_hex(s, SpanId::HEX_LEN)).map(Some),
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct ZipkinSpan {
    trace_id: Option<String>,
    id: Option<String>,
    parent_id: Option<String>,
    #[serde(default)]
    name: Option<String>,
    timestamp: Option<u64>,
    duration: Option<u64>,
    local_endpoint: Option<ZipkinEndpoint>,
    #[serde(default)]
    tags: BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct ZipkinEndpoint {
    service_name: Option<String>,
}

pub fn parse_zipkin_v2(document: &[u8]) -> Result<Vec<ObservedSpan>, IngestError> {
    parse_zipkin_v2_with_warnings(document, &mut Vec::new())
}

pub fn parse_zipkin_v2_with_warnings(
    document: &[u8],
    warnings: &mut Vec<IngestWarning>,
) -> Result<Vec<ObservedSpan>, IngestError> {
    let raw: Vec<ZipkinSpan> =
        serde_json::from_slice(document).map_err(|e| IngestError::MalformedDocument(e.to_string()))?;
    raw.into_iter().map(|z| zipkin_span(z, warnings)).collect()
}

fn zipkin_span(z: ZipkinSpan, warnings: &mut Vec<IngestWarning>) -> Result<ObservedSpan, IngestError> {
    let trace_id = TraceId::new(normalize_hex(
        z.trace_id.as_deref().ok_or(IngestError::MissingField("traceId"))?,
        TraceId::HEX_LEN,
    ))?;
    let span_id = SpanId::new(normalize_hex(
        z.id.as_deref().ok_or(IngestError::MissingField("id"))?,
        SpanId::HEX_LEN,
    ))?;
    let parent = normalize_parent(z.parent_id.as_deref())?;
    let service = z
        .local_endpoint
        .and_then(|e| e.service_name)
        .ok_or(IngestError::MissingField("localEndpoint.serviceName"))?;

    let ts = z.timestamp.unwrap_or(0);
    let end_us = ts.checked_add(z.duration.unwrap_or(0));
    let start = ts.checked_mul(1000);
    let end = end_us.and_then(|e| e.checked_mul(1000));
    if start.is_none() || end.is_none() {
        warnings.push(IngestWarning {
            trace_id: trace_id.clone(),
            span_id: span_id.clone(),
            kind: IngestWarningKind::ClampedTimestamp,
            detail: "timestamp overflows nanosecond range".into(),
        });
    }

    let (start, end) = (start.unwrap_or(u64::MAX), end.unwrap_or(u64::MAX));
    let attributes = z.tags.into_iter().map(|(k, v)| (k, AttrValue::Str(v))).collect();
    Ok(ObservedSpan::new(trace_id, span_id, parent, z.name.unwrap_or_default(), service, start, end)?
        .with_attributes(attributes))
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct OtelDocument {
    resource_spans: Vec<ResourceSpans>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct ResourceSpans {
    #[serde(default)]
    resource: Option<Resource>,
    #[serde(default)]
    scope_spans: Vec<ScopeSpans>,
}

#[derive(Serialize, Deserialize)]
struct Resource {
    #[serde(default)]
    attributes: Vec<KeyValue>,
}

#[derive(Serialize, Deserialize)]
struct ScopeSpans {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scope: Option<Scope>,
    #[serde(default)]
    spans: Vec<OtelSpan>,
}

#[derive(Serialize, Deserialize)]
struct Scope {
    #[serde(default)]
    name: String,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct OtelSpan {
    trace_id: Option<String>,
    span_id: Option<String>,
    #[serde(default)]
    parent_span_id: Option<String>,
    #[serde(default)]
    name: String,
    #[serde(default)]
    start_time_unix_nano: Option<U64Repr>,
    #[serde(default)]
    end_time_unix_nano: Option<U64Repr>,
    #[serde(default)]
    attributes: Vec<KeyValue>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    links: Vec<OtelLink>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct OtelLink {
    trace_id: String,
    span_id: String,
}

#[derive(Serialize, Deserialize)]
struct KeyValue {
    key: String,
    value: AnyValue,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct AnyValue {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    string_value: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    int_value: Option<I64Repr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    double_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bool_value: Option<bool>,
}

// OTLP JSON encodes 64-bit integers as strings; plain numbers are accepted too.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum U64Repr {
    Num(u64),
    Str(String),
}

impl U64Repr {
    fn value(&self) -> Result<u64, IngestError> {
        match self {
            U64Repr::Num(n) => Ok(*n),
            U64Repr::Str(s) => s
                .parse()
                .map_err(|_| IngestError::MalformedDocument(format!("bad timestamp {s:?}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum I64Repr {
    Num(i64),
    Str(String),
}

impl I64Repr {
    fn value(&self) -> Result<i64, IngestError> {
        match self {
            I64Repr::Num(n) => Ok(*n),
            I64Repr::Str(s) => s
                .parse()
                .map_err(|_| IngestError::MalformedDocument(format!("bad intValue {s:?}"))),
        }
    }
}

impl AnyValue {
    fn to_attr(&self) -> Result<AttrValue, IngestError> {
        if let Some(s) = &self.string_value {
            Ok(AttrValue::Str(s.clone()))
        } else if let Some(i) = &self.int_value {
            Ok(AttrValue::Int(i.value()?))
        } else if let Some(d) = self.double_value {
            Ok(AttrValue::Float(d))
        } else if let Some(b) = self.bool_value {
            Ok(AttrValue::Bool(b))
        } else {
            Err(IngestError::MalformedDocument("unsupported attribute value".into()))
        }
    }

    fn from_attr(value: &AttrValue) -> Self {
        match value {
            AttrValue::Str(s) => AnyValue {
                string_value: Some(s.clone()),
                ..Default::default()
            },
            AttrValue::Int(i) => AnyValue {
                int_value: Some(I64Repr::Str(i.to_string())),
                ..Default::default()
            },
            AttrValue::Float(d) => AnyValue {
                double_value: Some(*d),
                ..Default::default()
            },
            AttrValue::Bool(b) => AnyValue {
                bool_value: Some(*b),
                ..Default::default()
            },
        }
    }
}

pub fn parse_otel_json(document: &[u8]) -> Result<Vec<ObservedSpan>, IngestError> {
    parse_otel_json_with_warnings(document, &mut Vec::new())
}

pub fn parse_otel_json_with_warnings(
    document: &[u8],
    warnings: &mut Vec<IngestWarning>,
) -> Result<Vec<ObservedSpan>, IngestError> {
    let doc: OtelDocument =
        serde_json::from_slice(document).map_err(|e| IngestError::MalformedDocument(e.to_string()))?;
    let mut spans = Vec::new();
    for rs in doc.resource_spans {
        let service = rs
            .resource
            .as_ref()
            .and_then(|r| r.attributes.iter().find(|kv| kv.key == SERVICE_NAME_KEY))
            .and_then(|kv| kv.value.string_value.clone())
            .filter(|s| !s.is_empty())
            .ok_or(IngestError::MissingServiceName)?;
        for span in rs.scope_spans.into_iter().flat_map(|ss| ss.spans) {
            spans.push(otel_span(span, &service, warnings)?);
        }
    }
    Ok(spans)
}

fn otel_span(span: OtelSpan, service: &str, warnings: &mut Vec<IngestWarning>) -> Result<ObservedSpan, IngestError> {
    let trace_id = TraceId::new(normalize_hex(
        span.trace_id.as_deref().ok_or(IngestError::MissingField("traceId"))?,
        TraceId::HEX_LEN,
    ))?;
    let span_id = SpanId::new(normalize_hex(
        span.span_id.as_deref().ok_or(IngestError::MissingField("spanId"))?,
        SpanId::HEX_LEN,
    ))?;
    let parent = normalize_parent(span.parent_span_id.as_deref())?;
    let start = span.start_time_unix_nano.as_ref().map(U64Repr::value).transpose()?.unwrap_or(0);
    let mut end = span.end_time_unix_nano.as_ref().map(U64Repr::value).transpose()?.unwrap_or(start);
    if end < start {
        warnings.push(IngestWarning {
            trace_id: trace_id.clone(),
            span_id: span_id.clone(),
            kind: IngestWarningKind::ClampedTimestamp,
            detail: format!("end {end} precedes start {start}; clamped to start"),
        });
        end = start;
    }
    let attributes = span
        .attributes
        .iter()
        .map(|kv| Ok((kv.key.clone(), kv.value.to_attr()?)))
        .collect::<Result<BTreeMap<_, _>, IngestError>>()?;
    let links = span
        .links
        .iter()
        .map(|l| {
            Ok((
                TraceId::new(normalize_hex(&l.trace_id, TraceId::HEX_LEN))?,
                SpanId::new(normalize_hex(&l.span_id, SpanId::HEX_LEN))?,
            ))
        })
        .collect::<Result<Vec<_>, IngestError>>()?;
    Ok(ObservedSpan::new(trace_id, span_id, parent, span.name, service, start, end)?
        .with_attributes(attributes)
        .with_links(links))
}

/// Serializes traces to the canonical OpenTelemetry-style layout.
///
/// Spans are grouped into one `resourceSpans` entry per service name and
/// ordered by (trace id, span id), so equal inputs give identical bytes.
pub fn to_otel_json<'a>(traces: impl IntoIterator<Item = &'a ObservedTrace>) -> Vec<u8> {
    let mut by_service: BTreeMap<&str, Vec<&ObservedSpan>> = BTreeMap::new();
    for trace in traces {
        for span in trace.spans().values() {
            by_service.entry(span.service_name()).or_default().push(span);
        }
    }
    let resource_spans = by_service
        .into_iter()
        .map(|(service, mut spans)| {
            spans.sort_by(|a, b| (a.trace_id(), a.span_id()).cmp(&(b.trace_id(), b.span_id())));
            ResourceSpans {
                resource: Some(Resource {
                    attributes: vec![KeyValue {
                        key: SERVICE_NAME_KEY.into(),
                        value: AnyValue::from_attr(&AttrValue::Str(service.into())),
                    }],
                }),
                scope_spans: vec![ScopeSpans {
                    scope: Some(Scope {
                        name: "confcheck".into(),
                    }),
                    spans: spans.into_iter().map(otel_span_out).collect(),
                }],
            }
        })
        .collect();
    serde_json::to_vec(&OtelDocument { resource_spans }).expect("in-memory serialization cannot fail")
}

fn otel_span_out(span: &ObservedSpan) -> OtelSpan {
    OtelSpan {
        trace_id: Some(span.trace_id().to_string()),
        span_id: Some(span.span_id().to_string()),
        parent_span_id: Some(span.parent_span_id().map(ToString::to_string).unwrap_or_default()),
        name: span.name().to_owned(),
        start_time_unix_nano: Some(U64Repr::Str(span.start_time_nanos().to_string())),
        end_time_unix_nano: Some(U64Repr::Str(span.end_time_nanos().to_string())),
        attributes: span
            .attributes()
            .iter()
            .map(|(k, v)| KeyValue {
                key: k.clone(),
                value: AnyValue::from_attr(v),
            })
            .collect(),
        links: span
            .links()
            .iter()
            .map(|(t, s)| OtelLink {
                trace_id: t.to_string(),
                span_id: s.to_string(),
            })
            .collect(),
    }
}

/// Groups spans by trace id into DAGs.
///
/// Output traces are sorted by trace id; warnings are sorted so the result
/// does not depend on input order.
pub fn assemble_traces(
    spans: impl IntoIterator<Item = ObservedSpan>,
) -> Result<(Vec<ObservedTrace>, Vec<IngestWarning>), IngestError> {
    let mut groups: BTreeMap<TraceId, BTreeMap<SpanId, ObservedSpan>> = BTreeMap::new();
    for span in spans {
        let group = groups.entry(span.trace_id().clone()).or_default();
        if group.contains_key(span.span_id()) {
            return Err(IngestError::DuplicateSpanId {
                trace_id: span.trace_id().clone(),
                span_id: span.span_id().clone(),
            });
        }
        group.insert(span.span_id().clone(), span);
    }

    let mut traces = Vec::with_capacity(groups.len());
    let mut warnings = Vec::new();
    for (trace_id, spans) in groups {
        check_acyclic(&trace_id, &spans)?;
        let mut dangling = BTreeSet::new();
        for span in spans.values() {
            if let Some(parent) = span.parent_span_id() {
                if !spans.contains_key(parent) {
                    dangling.insert(span.span_id().clone());
                    warnings.push(IngestWarning {
                        trace_id: trace_id.clone(),
                        span_id: span.span_id().clone(),
                        kind: IngestWarningKind::DanglingParent,
                        detail: format!("parent {parent} not present in trace"),
                    });
                }
            }
        }
        traces.push(ObservedTrace::from_parts(trace_id, spans, dangling));
    }
    warnings.sort();
    Ok((traces, warnings))
}

fn check_acyclic(trace_id: &TraceId, spans: &BTreeMap<SpanId, ObservedSpan>) -> Result<(), IngestError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Active,
        Done,
    }
    let mut marks: HashMap<&SpanId, Mark> = HashMap::with_capacity(spans.len());
    for start in spans.keys() {
        let mut path = Vec::new();
        let mut cursor = Some(start);
        while let Some(id) = cursor {
            match marks.get(id) {
                Some(Mark::Done) => break,
                Some(Mark::Active) => {
                    return Err(IngestError::CyclicParentChain {
                        trace_id: trace_id.clone(),
                        span_id: id.clone(),
                    })
                }
                None => {}
            }
            marks.insert(id, Mark::Active);
            path.push(id);
            cursor = spans
                .get(id)
                .and_then(|s| s.parent_span_id())
                .filter(|p| spans.contains_key(*p));
        }
        for id in path {
            marks.insert(id, Mark::Done);
        }
    }
    Ok(())
}

/// An assembled corpus plus the warnings raised while loading it.
#[derive(Debug, Default)]
pub struct Corpus {
    pub traces: Vec<ObservedTrace>,
    pub warnings: Vec<IngestWarning>,
    pub files: usize,
}

/// Lists `.json` files directly inside `dir`, sorted by name.
pub fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let io_err = |source| IngestError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every `.json` file in `dir` (either format) and assembles traces.
/// Files are parsed concurrently; traces may span several files.
pub fn load_corpus_dir(dir: &Path) -> Result<Corpus, IngestError> {
    let files = corpus_files(dir)?;
    let parsed = files
        .par_iter()
        .map(|path| {
            let bytes = fs::read(path).map_err(|source| IngestError::Io {
                path: path.clone(),
                source,
            })?;
            let mut warnings = Vec::new();
            let spans = parse_document(&bytes, &mut warnings).map_err(|e| IngestError::File {
                path: path.clone(),
                source: Box::new(e),
            })?;
            Ok((spans, warnings))
        })
        .collect::<Result<Vec<_>, IngestError>>()?;

    let mut all_spans = Vec::new();
    let mut warnings = Vec::new();
    for (spans, w) in parsed {
        all_spans.extend(spans);
        warnings.extend(w);
    }
    let (traces, assembly_warnings) = assemble_traces(all_spans)?;
    warnings.extend(assembly_warnings);
    warnings.sort();
    Ok(Corpus {
        traces,
        warnings,
        files: files.len(),
    })
}
