//! The conformance check: matches observed traces against a design set and
//! records violations.
//!
//! A design span is witnessed by an observed span when names and match
//! attributes agree, the observed duration is within the span's budget, and
//! the parent constraint holds: the observed parent (or, with
//! `allowNonImmediateParent`, any observed ancestor) structurally witnesses
//! the design parent. Durations are enforced on the witnessed span only, so
//! an over-budget parent is reported once, against its own design span,
//! rather than cascading into every descendant.
//!
//! Required design traces are checked span by span. A disallowed design
//! trace fires only when every one of its spans is witnessed.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;

use crate::design::DesignTraceSet;
use crate::model::{DesignSpan, DesignTrace, ObservedSpan, ObservedTrace, TraceId, TraceVerdict, Violation, ViolationKind, SpanId};

/// True when `observed` carries the design span's name and every one of its
/// match attributes. Extra observed attributes are ignored.
pub fn attrs_match(design: &DesignSpan, observed: &ObservedSpan) -> bool {
    observed.name() == design.name
        && design
            .match_attributes
            .iter()
            .all(|(k, v)| observed.attribute_equals(k, v))
}

/// Inclusive upper bound on duration; no bound means always ok.
pub fn duration_ok(design: &DesignSpan, observed: &ObservedSpan) -> bool {
    design
        .max_duration_micros
        .is_none_or(|max| observed.duration_micros() <= max)
}

/// Per-(design trace, observed trace) matching state with a memo of
/// structural match results.
pub struct MatchContext<'a> {
    design: &'a DesignTrace,
    design_index: HashMap<&'a str, usize>,
    design_parent: Vec<Option<usize>>,
    spans: Vec<&'a ObservedSpan>,
    span_index: HashMap<&'a SpanId, usize>,
    parent: Vec<Option<usize>>,
    memo: Vec<Option<bool>>,
}

impl<'a> MatchContext<'a> {
    pub fn new(design: &'a DesignTrace, observed: &'a ObservedTrace) -> Self {
        let design_index: HashMap<&str, usize> = design
            .spans
            .iter()
            .enumerate()
            .map(|(i, s)| (s.design_span_id.as_str(), i))
            .collect();
        let design_parent = design
            .spans
            .iter()
            .map(|s| s.parent_design_span_id.as_deref().and_then(|p| design_index.get(p).copied()))
            .collect();
        let spans: Vec<&ObservedSpan> = observed.spans().values().collect();
        let span_index: HashMap<&SpanId, usize> = spans.iter().enumerate().map(|(i, s)| (s.span_id(), i)).collect();
        let parent = spans
            .iter()
            .map(|s| s.parent_span_id().and_then(|p| span_index.get(p).copied()))
            .collect();
        let memo = vec![None; design.spans.len() * spans.len()];
        Self {
            design,
            design_index,
            design_parent,
            spans,
            span_index,
            parent,
            memo,
        }
    }

    /// Observed spans in ascending span-id order.
    pub fn observed_spans(&self) -> &[&'a ObservedSpan] {
        &self.spans
    }

    /// Full match: structure plus the design span's own duration budget.
    pub fn chain_matches(&mut self, design_span_id: &str, observed: &SpanId) -> bool {
        match (self.design_index.get(design_span_id), self.span_index.get(observed)) {
            (Some(&d), Some(&o)) => self.chain_matches_idx(d, o),
            _ => false,
        }
    }

    /// Match with the duration budget waived.
    pub fn structural_matches(&mut self, design_span_id: &str, observed: &SpanId) -> bool {
        match (self.design_index.get(design_span_id), self.span_index.get(observed)) {
            (Some(&d), Some(&o)) => self.structural(d, o),
            _ => false,
        }
    }

    fn chain_matches_idx(&mut self, d: usize, o: usize) -> bool {
        self.structural(d, o) && duration_ok(&self.design.spans[d], self.spans[o])
    }

    fn structural(&mut self, d: usize, o: usize) -> bool {
        let key = d * self.spans.len() + o;
        if let Some(hit) = self.memo[key] {
            return hit;
        }
        let design = &self.design.spans[d];
        let result = attrs_match(design, self.spans[o])
            && match self.design_parent[d] {
                None => true,
                Some(dp) if !design.allow_non_immediate_parent => {
                    self.parent[o].is_some_and(|p| self.structural(dp, p))
                }
                Some(dp) => {
                    let mut cursor = self.parent[o];
                    let mut steps = 0;
                    let mut found = false;
                    while let Some(a) = cursor {
                        if steps > self.spans.len() {
                            break;
                        }
                        if self.structural(dp, a) {
                            found = true;
                            break;
                        }
                        cursor = self.parent[a];
                        steps += 1;
                    }
                    found
                }
            };
        self.memo[key] = Some(result);
        result
    }

    fn first_witness(&mut self, d: usize) -> Option<usize> {
        (0..self.spans.len()).find(|&o| self.chain_matches_idx(d, o))
    }
}

/// Convenience wrapper over [`MatchContext::chain_matches`].
pub fn chain_matches(design: &DesignSpan, observed: &ObservedSpan, ctx: &mut MatchContext<'_>) -> bool {
    ctx.chain_matches(&design.design_span_id, observed.span_id())
}

/// How a single design span fared against an observed trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpanOutcome {
    /// Witnessed by this observed span (first by span id).
    Matched(SpanId),
    /// Only witnessed with duration budgets waived; the fastest candidate.
    DurationExceeded(SpanId),
    Missing,
}

/// Outcome of every span of one design trace, in ascending design span id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DesignTraceOutcome {
    pub design_trace_id: String,
    pub disallowed: bool,
    pub spans: Vec<(String, SpanOutcome)>,
}

fn sorted_design_indices(design: &DesignTrace) -> Vec<usize> {
    let mut order: Vec<usize> = (0..design.spans.len()).collect();
    order.sort_by(|&a, &b| design.spans[a].design_span_id.cmp(&design.spans[b].design_span_id));
    order
}

/// Evaluates each design span independently against the observed trace.
pub fn evaluate_design_trace(design: &DesignTrace, trace: &ObservedTrace) -> DesignTraceOutcome {
    let mut ctx = MatchContext::new(design, trace);
    let disallowed = design.is_disallowed();
    let spans = sorted_design_indices(design)
        .into_iter()
        .map(|d| {
            let outcome = if let Some(o) = ctx.first_witness(d) {
                SpanOutcome::Matched(ctx.spans[o].span_id().clone())
            } else if disallowed {
                SpanOutcome::Missing
            } else {
                let candidates: Vec<usize> = (0..ctx.spans.len()).filter(|&o| ctx.structural(d, o)).collect();
                candidates
                    .into_iter()
                    .map(|o| ctx.spans[o])
                    .min_by(|a, b| {
                        (a.duration_micros(), a.span_id()).cmp(&(b.duration_micros(), b.span_id()))
                    })
                    .map_or(SpanOutcome::Missing, |s| SpanOutcome::DurationExceeded(s.span_id().clone()))
            };
            (design.spans[d].design_span_id.clone(), outcome)
        })
        .collect();
    DesignTraceOutcome {
        design_trace_id: design.id.clone(),
        disallowed,
        spans,
    }
}

impl DesignTraceOutcome {
    pub fn violations(&self) -> Vec<Violation> {
        let id = &self.design_trace_id;
        if self.disallowed {
            if self.spans.iter().all(|(_, o)| matches!(o, SpanOutcome::Matched(_))) {
                self.spans
                    .iter()
                    .filter_map(|(span, o)| match o {
                        SpanOutcome::Matched(w) => Some(Violation::disallowed_present(id, span, w.clone())),
                        _ => None,
                    })
                    .collect()
            } else {
                Vec::new()
            }
        } else {
            self.spans
                .iter()
                .filter_map(|(span, o)| match o {
                    SpanOutcome::Matched(_) => None,
                    SpanOutcome::DurationExceeded(w) => Some(Violation::duration_exceeded(id, span, w.clone())),
                    SpanOutcome::Missing => Some(Violation::missing_required(id, span)),
                })
                .collect()
        }
    }
}

/// Violations of a required design trace against one observed trace.
pub fn check_required(design: &DesignTrace, trace: &ObservedTrace) -> Vec<Violation> {
    debug_assert!(!design.is_disallowed());
    evaluate_design_trace(design, trace).violations()
}

/// Violations of a disallowed design trace, which fires as a whole.
pub fn check_disallowed(design: &DesignTrace, trace: &ObservedTrace) -> Vec<Violation> {
    debug_assert!(design.is_disallowed());
    evaluate_design_trace(design, trace).violations()
}

/// Checks one observed trace against the full design set. Violations are
/// ordered by (design trace id, design span id).
pub fn check_trace(set: &DesignTraceSet, trace: &ObservedTrace) -> TraceVerdict {
    let mut violations: Vec<Violation> = set
        .traces()
        .iter()
        .flat_map(|design| evaluate_design_trace(design, trace).violations())
        .collect();
    violations.sort_by(|a, b| {
        (a.design_trace_id(), a.design_span_id()).cmp(&(b.design_trace_id(), b.design_span_id()))
    });
    TraceVerdict::new(trace.trace_id().clone(), violations)
}

/// Every design trace's outcome for one observed trace, for rendering.
pub fn explain_trace(set: &DesignTraceSet, trace: &ObservedTrace) -> Vec<DesignTraceOutcome> {
    let mut outcomes: Vec<_> = set.traces().iter().map(|d| evaluate_design_trace(d, trace)).collect();
    outcomes.sort_by(|a, b| a.design_trace_id.cmp(&b.design_trace_id));
    outcomes
}

/// Corpus-level aggregate of trace verdicts.
///
/// Reports form a commutative monoid under [`ConformanceReport::merge`], so
/// partial reports from any partition of the corpus combine to the same
/// result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConformanceReport {
    pub total_traces: u64,
    pub conformant_traces: u64,
    pub non_conformant_traces: u64,
    pub violations_by_kind: BTreeMap<ViolationKind, u64>,
    pub traces_by_kind: BTreeMap<ViolationKind, u64>,
    pub violations_by_design_span: BTreeMap<(String, String), u64>,
    pub non_conformant_trace_ids: BTreeSet<TraceId>,
}

impl Default for ConformanceReport {
    fn default() -> Self {
        let zeroes: BTreeMap<_, _> = ViolationKind::ALL.iter().map(|k| (*k, 0)).collect();
        Self {
            total_traces: 0,
            conformant_traces: 0,
            non_conformant_traces: 0,
            violations_by_kind: zeroes.clone(),
            traces_by_kind: zeroes,
            violations_by_design_span: BTreeMap::new(),
            non_conformant_trace_ids: BTreeSet::new(),
        }
    }
}

impl ConformanceReport {
    /// Conformant over total; 0 for an empty corpus.
    pub fn conformance_percentage(&self) -> f64 {
        if self.total_traces == 0 {
            0.0
        } else {
            self.conformant_traces as f64 / self.total_traces as f64
        }
    }

    pub fn add(&mut self, verdict: &TraceVerdict) {
        self.total_traces += 1;
        if verdict.conformant() {
            self.conformant_traces += 1;
            return;
        }
        self.non_conformant_traces += 1;
        self.non_conformant_trace_ids.insert(verdict.trace_id().clone());
        let mut kinds = BTreeSet::new();
        for v in verdict.violations() {
            *self.violations_by_kind.entry(v.kind()).or_default() += 1;
            *self
                .violations_by_design_span
                .entry((v.design_trace_id().to_owned(), v.design_span_id().to_owned()))
                .or_default() += 1;
            kinds.insert(v.kind());
        }
        for k in kinds {
            *self.traces_by_kind.entry(k).or_default() += 1;
        }
    }

    pub fn merge(mut self, other: ConformanceReport) -> ConformanceReport {
        self.total_traces += other.total_traces;
        self.conformant_traces += other.conformant_traces;
        self.non_conformant_traces += other.non_conformant_traces;
        for (k, n) in other.violations_by_kind {
            *self.violations_by_kind.entry(k).or_default() += n;
        }
        for (k, n) in other.traces_by_kind {
            *self.traces_by_kind.entry(k).or_default() += n;
        }
        for (k, n) in other.violations_by_design_span {
            *self.violations_by_design_span.entry(k).or_default() += n;
        }
        self.non_conformant_trace_ids.extend(other.non_conformant_trace_ids);
        self
    }

    pub fn from_verdicts<'a>(verdicts: impl IntoIterator<Item = &'a TraceVerdict>) -> Self {
        let mut report = Self::default();
        for v in verdicts {
            report.add(v);
        }
        report
    }
}

/// Checks a corpus on `workers` threads. Verdicts come back ordered by trace
/// id; the report does not depend on the worker count.
pub fn check_corpus(
    set: &DesignTraceSet,
    traces: &[ObservedTrace],
    workers: usize,
) -> (ConformanceReport, Vec<TraceVerdict>) {
    let run = || {
        let mut verdicts: Vec<TraceVerdict> = traces.par_iter().map(|t| check_trace(set, t)).collect();
        verdicts.par_sort_by(|a, b| a.trace_id().cmp(b.trace_id()));
        let report = verdicts
            .par_iter()
            .fold(ConformanceReport::default, |mut acc, v| {
                acc.add(v);
                acc
            })
            .reduce(ConformanceReport::default, ConformanceReport::merge);
        (report, verdicts)
    };
    match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    }
}
