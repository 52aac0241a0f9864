//! Conformance checking of distributed traces against design traces.
//!
//! Observed traces are ingested from exported Zipkin v2 or OpenTelemetry
//! JSON files ([`ingest`]), design traces are loaded from a JSON design file
//! ([`design`]), and [`checker`] decides per-trace conformance and aggregates
//! a corpus report. [`sim`] generates reproducible corpora for the bundled
//! gateway/microservice design set, and [`report`] renders results.

pub mod checker;
pub mod design;
pub mod ingest;
pub mod model;
pub mod report;
pub mod sim;

pub use checker::{check_corpus, check_trace, ConformanceReport};
pub use design::{load_design_set, DesignTraceSet};
pub use ingest::{assemble_traces, load_corpus_dir, parse_otel_json, parse_zipkin_v2};
pub use model::{
    AttrValue, DesignSpan, DesignTrace, ObservedSpan, ObservedTrace, SpanId, TraceId, TraceVerdict, Violation,
    ViolationKind,
};
