//! Seeded generator for the gateway/microservice/database workload.
//!
//! Every healthy trace has the shape
//!
//! ```text
//! gateway      aspnet_core.request
//! └─ gateway       http.client.request
//!    └─ microservice  aspnet_core.request
//!       └─ microservice  sql_server.query
//! ```
//!
//! plus a few noise spans. Three deviations are injected independently per
//! trace: dropping the microservice query (`p_omit`), stretching the root
//! beyond its 500 ms budget (`p_slow`), and a gateway-side
//! `sql_server.query` under the root (`p_direct`).
//!
//! Randomness: each (seed, trace index, purpose tag) triple is hashed with
//! the SplitMix64 finalizer into a seed for a ChaCha8 stream. Deviation
//! draws use their own stream, so changing one probability never moves the
//! others. Ids are hashed the same way from the span ordinal.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::design::{load_design_set, DesignTraceSet};
use crate::ingest::to_otel_json;
use crate::model::{AttrValue, ObservedSpan, ObservedTrace, SpanId, TraceId};

/// The gateway/microservice design set: one required trace (A, B, C) and
/// one disallowed trace (D, E).
pub const TABLE2_DESIGN_JSON: &str = include_str!("../fixtures/table2.design.json");

pub fn table2_design_set() -> DesignTraceSet {
    load_design_set(TABLE2_DESIGN_JSON.as_bytes()).expect("bundled design set is valid")
}

/// Latency budget of the root request in the bundled design set.
pub const ROOT_BUDGET_MICROS: u64 = 500_000;

pub const NOISE_SPAN_NAMES: [&str; 3] = ["connection.open", "serialization", "dns.lookup"];

const EPOCH_NANOS: u64 = 1_700_000_000_000_000_000;
const TRACE_SPACING_NANOS: u64 = 1_000_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("{name} must be within [0, 1], got {value}")]
    ProbabilityOutOfRange { name: &'static str, value: f64 },
    #[error("trace count must be positive")]
    ZeroTraceCount,
    #[error("{name} range is inverted ({min} > {max})")]
    InvertedRange { name: &'static str, min: u64, max: u64 },
    #[error("slow latency range must lie above the {budget} us budget, got min {min}")]
    SlowRangeWithinBudget { min: u64, budget: u64 },
    #[error("healthy latency range must stay within the {budget} us budget, got max {max}")]
    BaseRangeOverBudget { max: u64, budget: u64 },
    #[error("healthy latency must be at least 100 us to fit nested spans, got {min}")]
    BaseRangeTooShort { min: u64 },
    #[error("traces per file must be positive")]
    ZeroTracesPerFile,
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub trace_count: usize,
    pub p_omit: f64,
    pub p_slow: f64,
    pub p_direct: f64,
    pub base_latency_micros: (u64, u64),
    pub slow_latency_micros: (u64, u64),
    pub noise_spans_per_trace: (u64, u64),
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trace_count: 1000,
            p_omit: 0.0,
            p_slow: 0.0,
            p_direct: 0.0,
            base_latency_micros: (50_000, 400_000),
            slow_latency_micros: (500_001, 900_000),
            noise_spans_per_trace: (2, 5),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.trace_count == 0 {
            return Err(SimError::ZeroTraceCount);
        }
        for (name, value) in [("p-omit", self.p_omit), ("p-slow", self.p_slow), ("p-direct", self.p_direct)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(SimError::ProbabilityOutOfRange { name, value });
            }
        }
        for (name, (min, max)) in [
            ("base latency", self.base_latency_micros),
            ("slow latency", self.slow_latency_micros),
            ("noise spans", self.noise_spans_per_trace),
        ] {
            if min > max {
                return Err(SimError::InvertedRange { name, min, max });
            }
        }
        if self.slow_latency_micros.0 <= ROOT_BUDGET_MICROS {
            return Err(SimError::SlowRangeWithinBudget {
                min: self.slow_latency_micros.0,
                budget: ROOT_BUDGET_MICROS,
            });
        }
        if self.base_latency_micros.1 > ROOT_BUDGET_MICROS {
            return Err(SimError::BaseRangeOverBudget {
                max: self.base_latency_micros.1,
                budget: ROOT_BUDGET_MICROS,
            });
        }
        if self.base_latency_micros.0 < 100 {
            return Err(SimError::BaseRangeTooShort {
                min: self.base_latency_micros.0,
            });
        }
        Ok(())
    }

    /// Probability that a generated trace has no injected deviation.
    pub fn expected_conformance(&self) -> f64 {
        (1.0 - self.p_omit) * (1.0 - self.p_slow) * (1.0 - self.p_direct)
    }
}

/// Purpose tags separating the per-trace random streams.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Stream {
    Shape = 1,
    Omit = 2,
    Slow = 3,
    Direct = 4,
    TraceIdHi = 5,
    TraceIdLo = 6,
    SpanId = 0x100,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive(seed: u64, index: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ index) ^ tag)
}

fn stream(seed: u64, index: u64, tag: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, index, tag as u64))
}

fn nonzero(x: u64) -> u64 {
    if x == 0 {
        1
    } else {
        x
    }
}

fn trace_id(seed: u64, index: u64) -> TraceId {
    let hi = derive(seed, index, Stream::TraceIdHi as u64);
    let lo = nonzero(derive(seed, index, Stream::TraceIdLo as u64));
    TraceId::from_u64s(&[hi, lo]).expect("non-zero hex id")
}

fn span_id(seed: u64, index: u64, ordinal: u64) -> SpanId {
    SpanId::from_u64s(&[nonzero(derive(seed, index, Stream::SpanId as u64 + ordinal))]).expect("non-zero hex id")
}

/// Deviations drawn for one trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Deviations {
    pub omit: bool,
    pub slow: bool,
    pub direct: bool,
}

impl Deviations {
    pub fn any(&self) -> bool {
        self.omit || self.slow || self.direct
    }
}

/// Which deviations trace `index` receives under `config`.
pub fn deviations_for(config: &SimConfig, index: u64) -> Deviations {
    Deviations {
        omit: stream(config.seed, index, Stream::Omit).gen_bool(config.p_omit),
        slow: stream(config.seed, index, Stream::Slow).gen_bool(config.p_slow),
        direct: stream(config.seed, index, Stream::Direct).gen_bool(config.p_direct),
    }
}

struct Builder {
    trace_id: TraceId,
    seed: u64,
    index: u64,
    spans: BTreeMap<SpanId, ObservedSpan>,
    // (id, service, start, end) of every span, in creation order.
    placed: Vec<(SpanId, &'static str, u64, u64)>,
}

impl Builder {
    #[allow(clippy::too_many_arguments)]
    fn add(
        &mut self,
        ordinal: u64,
        parent: Option<usize>,
        name: &str,
        service: &'static str,
        start: u64,
        end: u64,
        attributes: &[(&str, AttrValue)],
    ) -> usize {
        let id = span_id(self.seed, self.index, ordinal);
        let parent_id = parent.map(|p| self.placed[p].0.clone());
        let span = ObservedSpan::new(self.trace_id.clone(), id.clone(), parent_id, name, service, start, end)
            .expect("generated spans are well-formed")
            .with_attributes(attributes.iter().map(|(k, v)| ((*k).to_owned(), v.clone())).collect());
        let previous = self.spans.insert(id.clone(), span);
        assert!(previous.is_none(), "span id collision in generated trace");
        self.placed.push((id, service, start, end));
        self.placed.len() - 1
    }
}

/// Generates trace number `index` of the corpus described by `config`.
pub fn generate_trace(config: &SimConfig, index: u64) -> ObservedTrace {
    let deviations = deviations_for(config, index);
    let mut shape = stream(config.seed, index, Stream::Shape);
    let mut slow = stream(config.seed, index, Stream::Slow);
    // Burn the Bernoulli draw so the slow latency uses the next value.
    let _: bool = slow.gen_bool(config.p_slow);

    let healthy_micros = shape.gen_range(config.base_latency_micros.0..=config.base_latency_micros.1);
    let root_micros = if deviations.slow {
        slow.gen_range(config.slow_latency_micros.0..=config.slow_latency_micros.1)
    } else {
        healthy_micros
    };

    let root_nanos = root_micros * 1000;
    let t0 = EPOCH_NANOS + index * TRACE_SPACING_NANOS;
    let at = |permille: u64| t0 + root_nanos / 1000 * permille;

    let mut b = Builder {
        trace_id: trace_id(config.seed, index),
        seed: config.seed,
        index,
        spans: BTreeMap::new(),
        placed: Vec::new(),
    };

    let get = AttrValue::from("GET");
    let root = b.add(
        0,
        None,
        "aspnet_core.request",
        "gateway",
        t0,
        t0 + root_nanos,
        &[
            ("http.method", get.clone()),
            ("http.route", "/api/items".into()),
            ("http.status_code", AttrValue::Int(200)),
        ],
    );
    let client = b.add(
        1,
        Some(root),
        "http.client.request",
        "gateway",
        at(50),
        at(950),
        &[("http.method", get.clone()), ("http.url", "http://microservice/items".into())],
    );
    let service = b.add(
        2,
        Some(client),
        "aspnet_core.request",
        "microservice",
        at(100),
        at(900),
        &[
            ("http.method", get),
            ("http.route", "/items".into()),
            ("http.status_code", AttrValue::Int(200)),
        ],
    );
    if !deviations.omit {
        b.add(
            3,
            Some(service),
            "sql_server.query",
            "microservice",
            at(300),
            at(700),
            &[("db.system", "mssql".into()), ("db.name", "Items".into())],
        );
    }
    if deviations.direct {
        b.add(
            4,
            Some(root),
            "sql_server.query",
            "gateway",
            at(20),
            at(45),
            &[("db.system", "mssql".into()), ("db.name", "Items".into())],
        );
    }

    let noise = shape.gen_range(config.noise_spans_per_trace.0..=config.noise_spans_per_trace.1);
    for k in 0..noise {
        let parent = shape.gen_range(0..b.placed.len());
        let name = NOISE_SPAN_NAMES[shape.gen_range(0..NOISE_SPAN_NAMES.len())];
        let (_, service, pstart, pend) = b.placed[parent].clone();
        let width = pend - pstart;
        let start = pstart + width / 1000 * shape.gen_range(0..=500);
        let end = start + width / 1000 * shape.gen_range(0..=400);
        b.add(5 + k, Some(parent), name, service, start, end, &[]);
    }

    ObservedTrace::from_parts(b.trace_id, b.spans, BTreeSet::new())
}

/// Generates the whole corpus in trace-index order. Output depends only on
/// `config`, never on thread scheduling.
pub fn generate_corpus(config: &SimConfig) -> Result<Vec<ObservedTrace>, SimError> {
    config.validate()?;
    Ok((0..config.trace_count as u64)
        .into_par_iter()
        .map(|i| generate_trace(config, i))
        .collect())
}

/// Writes traces as `corpus-NNNNNN.json` files in the canonical layout,
/// `traces_per_file` per file. Returns the number of files written.
pub fn write_corpus(traces: &[ObservedTrace], directory: &Path, traces_per_file: usize) -> Result<usize, SimError> {
    if traces_per_file == 0 {
        return Err(SimError::ZeroTracesPerFile);
    }
    let io = |path: &Path, e: std::io::Error| SimError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    fs::create_dir_all(directory).map_err(|e| io(directory, e))?;
    let mut files = 0;
    for (n, chunk) in traces.chunks(traces_per_file).enumerate() {
        let path = directory.join(format!("corpus-{n:06}.json"));
        fs::write(&path, to_otel_json(chunk)).map_err(|e| io(&path, e))?;
        files += 1;
    }
    Ok(files)
}
