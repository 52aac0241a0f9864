//! Shared test support: random instance generators and a brute-force
//! conformance oracle that shares no code with the checker.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use confcheck::design::DesignTraceSet;
use confcheck::model::{
    AttrValue, DesignSpan, DesignTrace, ObservedSpan, ObservedTrace, SpanId, TraceId, TraceVerdict, Violation,
    SERVICE_NAME_KEY,
};
use confcheck::assemble_traces;
use rand::seq::SliceRandom;
use rand::Rng;

pub const NAMES: [&str; 3] = ["a", "b", "c"];
pub const SERVICES: [&str; 2] = ["x", "y"];

pub fn load_fixture(name: &str) -> ObservedTrace {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/").to_owned() + name;
    let bytes = std::fs::read(path).unwrap();
    let spans = confcheck::parse_otel_json(&bytes).unwrap();
    let (mut traces, warnings) = assemble_traces(spans).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(traces.len(), 1);
    traces.remove(0)
}

/// Random observed trace with up to `max_spans` spans. Span ids are drawn
/// at random so id order differs from tree order; some parents dangle.
pub fn random_trace<R: Rng>(rng: &mut R, trace_no: u64, max_spans: usize) -> ObservedTrace {
    let tid = TraceId::from_u64s(&[0, trace_no + 1]).unwrap();
    let n = rng.gen_range(1..=max_spans);
    let mut ids: Vec<u64> = (1..=64).collect();
    ids.shuffle(rng);
    let ids: Vec<SpanId> = ids[..n].iter().map(|i| SpanId::from_u64s(&[*i]).unwrap()).collect();
    let spans: Vec<ObservedSpan> = (0..n)
        .map(|i| {
            let parent = match rng.gen_range(0..10) {
                0..=1 => None,
                2 => Some(SpanId::from_u64s(&[1000 + i as u64]).unwrap()),
                _ if i > 0 => Some(ids[rng.gen_range(0..i)].clone()),
                _ => None,
            };
            let start = rng.gen_range(0..1_000_000u64);
            let dur = rng.gen_range(0..1_000u64) * 1000 + rng.gen_range(0..1000);
            let mut span = ObservedSpan::new(
                tid.clone(),
                ids[i].clone(),
                parent,
                *NAMES.choose(rng).unwrap(),
                *SERVICES.choose(rng).unwrap(),
                start,
                start + dur,
            )
            .unwrap();
            if rng.gen_bool(0.3) {
                span = span.with_attribute("k", rng.gen_range(0..2i64));
            }
            span
        })
        .collect();
    assemble_traces(spans).unwrap().0.remove(0)
}

/// Random design trace (forest) with up to `max_spans` spans.
pub fn random_design_trace<R: Rng>(rng: &mut R, id: &str, max_spans: usize) -> DesignTrace {
    let n = rng.gen_range(1..=max_spans);
    let disallowed = rng.gen_bool(0.4);
    let spans = (0..n)
        .map(|i| {
            let mut s = DesignSpan::new(
                format!("S{}", (b'A' + i as u8) as char),
                *NAMES.choose(rng).unwrap(),
                *SERVICES.choose(rng).unwrap(),
            )
            .non_immediate_parent(rng.gen_bool(0.5))
            .disallowed(disallowed);
            if i > 0 && rng.gen_bool(0.75) {
                s = s.parent(format!("S{}", (b'A' + rng.gen_range(0..i) as u8) as char));
            }
            if rng.gen_bool(0.3) {
                s = s.max_duration_micros(rng.gen_range(1..1_000));
            }
            if rng.gen_bool(0.15) {
                s = s.match_attribute("k", rng.gen_range(0..2i64));
            }
            s
        })
        .collect();
    let mut trace = DesignTrace::new(id, spans);
    // Authoring order should not matter.
    trace.spans.shuffle(rng);
    trace
}

pub fn random_design_set<R: Rng>(rng: &mut R, max_spans: usize) -> DesignTraceSet {
    let count = rng.gen_range(1..=2);
    let traces = (0..count)
        .map(|i| random_design_trace(rng, &format!("dt{i}"), max_spans))
        .collect();
    DesignTraceSet::new(traces).unwrap()
}

// ---------------------------------------------------------------------
// Brute-force oracle
// ---------------------------------------------------------------------

fn oracle_attrs(design: &DesignSpan, span: &ObservedSpan) -> bool {
    if span.name() != design.name {
        return false;
    }
    design.match_attributes.iter().all(|(k, v)| {
        if k == SERVICE_NAME_KEY {
            *v == AttrValue::Str(span.service_name().to_owned())
        } else {
            span.attributes().get(k) == Some(v)
        }
    })
}

fn oracle_duration_ok(design: &DesignSpan, span: &ObservedSpan) -> bool {
    match design.max_duration_micros {
        None => true,
        Some(max) => (span.end_time_nanos() - span.start_time_nanos()) / 1000 <= max,
    }
}

/// Proper ancestors of every span, via fixed-point closure of the parent
/// relation.
fn ancestor_sets(trace: &ObservedTrace) -> BTreeMap<SpanId, BTreeSet<SpanId>> {
    let mut anc: BTreeMap<SpanId, BTreeSet<SpanId>> = trace
        .spans()
        .values()
        .map(|s| {
            let set = s
                .parent_span_id()
                .filter(|p| trace.spans().contains_key(*p))
                .into_iter()
                .cloned()
                .collect();
            (s.span_id().clone(), set)
        })
        .collect();
    loop {
        let mut changed = false;
        let snapshot = anc.clone();
        for set in anc.values_mut() {
            let extra: Vec<SpanId> = set.iter().flat_map(|a| snapshot[a].iter().cloned()).collect();
            for e in extra {
                changed |= set.insert(e);
            }
        }
        if !changed {
            return anc;
        }
    }
}

/// Observed spans that witness design span `target`, found by enumerating
/// every assignment of its design ancestor chain to observed spans.
fn oracle_witnesses(design: &DesignTrace, trace: &ObservedTrace, target: &str, waive: bool) -> Vec<SpanId> {
    let mut chain: Vec<&DesignSpan> = Vec::new();
    let mut cursor = design.span(target);
    while let Some(d) = cursor {
        chain.push(d);
        cursor = d.parent_design_span_id.as_deref().and_then(|p| design.span(p));
    }
    let spans: Vec<&ObservedSpan> = trace.spans().values().collect();
    let ancestors = ancestor_sets(trace);
    let n = spans.len();
    let k = chain.len();
    let mut witnesses = BTreeSet::new();
    let total = n.pow(k as u32);
    for code in 0..total {
        let mut c = code;
        let assignment: Vec<&ObservedSpan> = (0..k)
            .map(|_| {
                let s = spans[c % n];
                c /= n;
                s
            })
            .collect();
        let ok = (0..k).all(|i| {
            let (d, o) = (chain[i], assignment[i]);
            if !oracle_attrs(d, o) {
                return false;
            }
            if i == 0 && !waive && !oracle_duration_ok(d, o) {
                return false;
            }
            if i + 1 < k {
                let up = assignment[i + 1].span_id();
                if d.allow_non_immediate_parent {
                    ancestors[o.span_id()].contains(up)
                } else {
                    o.parent_span_id() == Some(up)
                }
            } else {
                true
            }
        });
        if ok {
            witnesses.insert(assignment[0].span_id().clone());
        }
    }
    witnesses.into_iter().collect()
}

/// Reference verdict computed by exhaustive enumeration.
pub fn oracle_verdict(set: &DesignTraceSet, trace: &ObservedTrace) -> TraceVerdict {
    let mut violations = Vec::new();
    for design in set.traces() {
        let mut ids: Vec<&str> = design.spans.iter().map(|s| s.design_span_id.as_str()).collect();
        ids.sort();
        let disallowed = design.spans.iter().any(|s| s.is_disallowed);
        if disallowed {
            let witnesses: Vec<Vec<SpanId>> = ids.iter().map(|d| oracle_witnesses(design, trace, d, false)).collect();
            if witnesses.iter().all(|w| !w.is_empty()) {
                for (d, w) in ids.iter().zip(witnesses) {
                    violations.push(Violation::disallowed_present(&design.id, *d, w[0].clone()));
                }
            }
        } else {
            for d in ids {
                if !oracle_witnesses(design, trace, d, false).is_empty() {
                    continue;
                }
                let relaxed = oracle_witnesses(design, trace, d, true);
                let fastest = relaxed.iter().min_by_key(|id| {
                    let s = &trace.spans()[*id];
                    ((s.end_time_nanos() - s.start_time_nanos()) / 1000, (*id).clone())
                });
                violations.push(match fastest {
                    Some(w) => Violation::duration_exceeded(&design.id, d, w.clone()),
                    None => Violation::missing_required(&design.id, d),
                });
            }
        }
    }
    violations.sort_by(|a, b| {
        (a.design_trace_id(), a.design_span_id()).cmp(&(b.design_trace_id(), b.design_span_id()))
    });
    TraceVerdict::new(trace.trace_id().clone(), violations)
}
