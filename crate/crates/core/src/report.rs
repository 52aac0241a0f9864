//! Report rendering: JSON and plain-text summaries of a
//! [`ConformanceReport`], and Graphviz DOT span graphs for single traces.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checker::{explain_trace, ConformanceReport, SpanOutcome};
use crate::design::DesignTraceSet;
use crate::model::{ObservedTrace, SpanId, ViolationKind, SERVICE_NAME_KEY};

pub const DEFAULT_MAX_IDS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct KindCounts {
    pub missing_required: u64,
    pub duration_exceeded: u64,
    pub disallowed_present: u64,
}

impl KindCounts {
    fn from_map(map: &BTreeMap<ViolationKind, u64>) -> Self {
        let get = |k| map.get(&k).copied().unwrap_or(0);
        Self {
            missing_required: get(ViolationKind::MissingRequired),
            duration_exceeded: get(ViolationKind::DurationExceeded),
            disallowed_present: get(ViolationKind::DisallowedPresent),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DesignSpanCount {
    pub design_trace_id: String,
    pub design_span_id: String,
    pub count: u64,
}

/// Serialized form of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReportDocument {
    pub total_traces: u64,
    pub conformant_traces: u64,
    pub non_conformant_traces: u64,
    pub conformance_percentage: f64,
    pub violations_by_kind: KindCounts,
    pub traces_by_kind: KindCounts,
    pub violations_by_design_span: Vec<DesignSpanCount>,
    pub non_conformant_trace_ids: Vec<String>,
}

impl ReportDocument {
    /// `max_ids` caps the listed non-conformant trace ids (lowest first).
    pub fn new(report: &ConformanceReport, max_ids: usize) -> Self {
        Self {
            total_traces: report.total_traces,
            conformant_traces: report.conformant_traces,
            non_conformant_traces: report.non_conformant_traces,
            conformance_percentage: report.conformance_percentage(),
            violations_by_kind: KindCounts::from_map(&report.violations_by_kind),
            traces_by_kind: KindCounts::from_map(&report.traces_by_kind),
            violations_by_design_span: report
                .violations_by_design_span
                .iter()
                .map(|((t, s), count)| DesignSpanCount {
                    design_trace_id: t.clone(),
                    design_span_id: s.clone(),
                    count: *count,
                })
                .collect(),
            non_conformant_trace_ids: report
                .non_conformant_trace_ids
                .iter()
                .take(max_ids)
                .map(ToString::to_string)
                .collect(),
        }
    }
}

pub fn render_json(report: &ConformanceReport, max_ids: usize) -> String {
    serde_json::to_string_pretty(&ReportDocument::new(report, max_ids)).expect("in-memory serialization cannot fail")
}

pub fn render_text(report: &ConformanceReport, design: &DesignTraceSet) -> String {
    let mut out = String::new();
    let pct = report.conformance_percentage() * 100.0;
    let _ = writeln!(out, "Conformance percentage: {pct:.2}%");
    let _ = writeln!(out, "Total traces:           {}", report.total_traces);
    let _ = writeln!(out, "Conformant traces:      {}", report.conformant_traces);
    let _ = writeln!(out, "Non-conformant traces:  {}", report.non_conformant_traces);
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<20} {:>12} {:>12}", "Violation kind", "Violations", "Traces");
    for kind in ViolationKind::ALL {
        let _ = writeln!(
            out,
            "{:<20} {:>12} {:>12}",
            kind.as_str(),
            report.violations_by_kind.get(&kind).copied().unwrap_or(0),
            report.traces_by_kind.get(&kind).copied().unwrap_or(0)
        );
    }
    if !report.violations_by_design_span.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<16} {:<8} {:<24} {:>12}", "Design trace", "Span", "Description", "Violations");
        for ((trace, span), count) in &report.violations_by_design_span {
            let description = design
                .get(trace)
                .and_then(|t| t.span(span))
                .and_then(|s| s.description.as_deref())
                .unwrap_or("");
            let _ = writeln!(out, "{trace:<16} {span:<8} {description:<24} {count:>12}");
        }
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn format_micros(micros: u64) -> String {
    format!("{}.{:03} ms", micros / 1000, micros % 1000)
}

#[derive(Default)]
struct NodeStyle {
    filled_red: bool,
    outline_red: bool,
    outline_green: bool,
}

/// Renders one observed trace as a DOT digraph annotated with its
/// conformance outcome. Nodes and edges are ordered by span id.
pub fn render_dot(trace: &ObservedTrace, design: &DesignTraceSet) -> String {
    let outcomes = explain_trace(design, trace);
    let mut styles: BTreeMap<&SpanId, NodeStyle> = BTreeMap::new();
    let mut ghosts = Vec::new();

    for outcome in &outcomes {
        let fired = outcome.disallowed && outcome.spans.iter().all(|(_, o)| matches!(o, SpanOutcome::Matched(_)));
        let witness_of: BTreeMap<&str, &SpanId> = outcome
            .spans
            .iter()
            .filter_map(|(d, o)| match o {
                SpanOutcome::Matched(w) | SpanOutcome::DurationExceeded(w) => Some((d.as_str(), w)),
                SpanOutcome::Missing => None,
            })
            .collect();
        for (design_span_id, o) in &outcome.spans {
            match o {
                SpanOutcome::Matched(w) if outcome.disallowed => {
                    if fired {
                        styles.entry(w).or_default().filled_red = true;
                    }
                }
                SpanOutcome::Matched(w) => styles.entry(w).or_default().outline_green = true,
                SpanOutcome::DurationExceeded(w) => styles.entry(w).or_default().outline_red = true,
                SpanOutcome::Missing if !outcome.disallowed => {
                    let span = design
                        .get(&outcome.design_trace_id)
                        .and_then(|t| t.span(design_span_id))
                        .expect("outcome refers to a design span");
                    let parent = span
                        .parent_design_span_id
                        .as_deref()
                        .and_then(|p| witness_of.get(p).copied());
                    ghosts.push((outcome.design_trace_id.clone(), span.clone(), parent.cloned()));
                }
                SpanOutcome::Missing => {}
            }
        }
    }

    let mut out = String::new();
    let _ = writeln!(out, "digraph \"trace {}\" {{", trace.trace_id());
    let _ = writeln!(out, "  rankdir=TB;");
    let _ = writeln!(out, "  node [shape=box, fontname=\"Helvetica\"];");

    for span in trace.spans().values() {
        let label = format!(
            "{}\\n{}\\n{}",
            escape(span.name()),
            escape(span.service_name()),
            format_micros(span.duration_micros())
        );
        let mut attrs = vec![format!("label=\"{label}\"")];
        if let Some(style) = styles.get(span.span_id()) {
            if style.filled_red {
                attrs.push("style=filled".into());
                attrs.push("fillcolor=red".into());
            }
            if style.outline_red {
                attrs.push("color=red".into());
                attrs.push("penwidth=2".into());
            } else if style.outline_green {
                attrs.push("color=green".into());
                attrs.push("penwidth=2".into());
            }
        }
        let _ = writeln!(out, "  \"{}\" [{}];", span.span_id(), attrs.join(", "));
    }

    for (trace_id, span, _) in &ghosts {
        let service = span
            .match_attributes
            .get(SERVICE_NAME_KEY)
            .map(|v| match v {
                crate::model::AttrValue::Str(s) => s.clone(),
                other => other.to_string(),
            })
            .unwrap_or_default();
        let label = format!(
            "{}\\n{}\\nmissing: {}",
            escape(&span.name),
            escape(&service),
            escape(span.description.as_deref().unwrap_or(&span.design_span_id))
        );
        let _ = writeln!(
            out,
            "  \"missing:{}:{}\" [label=\"{label}\", style=dashed, color=red];",
            escape(trace_id),
            escape(&span.design_span_id)
        );
    }

    for span in trace.spans().values() {
        if let Some(parent) = trace.parent_of(span) {
            let _ = writeln!(out, "  \"{}\" -> \"{}\";", parent.span_id(), span.span_id());
        }
    }
    let mut seen = BTreeSet::new();
    for (trace_id, span, parent) in &ghosts {
        if let Some(parent) = parent {
            if seen.insert((parent.clone(), span.design_span_id.clone())) {
                let _ = writeln!(
                    out,
                    "  \"{parent}\" -> \"missing:{}:{}\" [style=dashed];",
                    escape(trace_id),
                    escape(&span.design_span_id)
                );
            }
        }
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TraceId, TraceVerdict, Violation};

    #[test]
    fn json_keys_and_cap() {
        let mut report = ConformanceReport::default();
        for n in 1..=5u64 {
            let id = TraceId::from_u64s(&[0, n]).unwrap();
            let violations = if n % 2 == 0 { vec![Violation::missing_required("t", "C")] } else { vec![] };
            report.add(&TraceVerdict::new(id, violations));
        }
        let json: serde_json::Value = serde_json::from_str(&render_json(&report, 1)).unwrap();
        let keys: BTreeSet<_> = json.as_object().unwrap().keys().cloned().collect();
        let expected: BTreeSet<String> = [
            "totalTraces",
            "conformantTraces",
            "nonConformantTraces",
            "conformancePercentage",
            "violationsByKind",
            "tracesByKind",
            "violationsByDesignSpan",
            "nonConformantTraceIds",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        assert_eq!(keys, expected);
        assert_eq!(json["conformancePercentage"], 0.6);
        assert_eq!(json["violationsByKind"]["missingRequired"], 2);
        assert_eq!(json["tracesByKind"]["disallowedPresent"], 0);
        assert_eq!(json["violationsByDesignSpan"][0]["designSpanId"], "C");
        assert_eq!(json["nonConformantTraceIds"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn text_has_two_decimal_percentage() {
        let mut report = ConformanceReport::default();
        report.add(&TraceVerdict::new(TraceId::from_u64s(&[0, 1]).unwrap(), vec![]));
        let text = render_text(&report, &DesignTraceSet::default());
        assert!(text.contains("Conformance percentage: 100.00%"), "{text}");
    }

    #[test]
    fn micros_formatting() {
        assert_eq!(format_micros(600_000), "600.000 ms");
        assert_eq!(format_micros(1_234), "1.234 ms");
    }
}
