use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use confcheck::design::{import_design_from_observed, to_design_json, DesignTraceSet};
use confcheck::ingest::{load_corpus_dir, Corpus};
use confcheck::report::{render_dot, render_json, render_text, DEFAULT_MAX_IDS};
use confcheck::sim::{generate_corpus, write_corpus, SimConfig};
use confcheck::{check_corpus, load_design_set, ObservedTrace, SpanId, TraceId};

/// Checks observed distributed traces against design traces.
#[derive(Parser)]
#[command(name = "confcheck", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Check a trace corpus and write a conformance report.
    Check {
        #[arg(long)]
        design: PathBuf,
        /// Directory of OTel or Zipkin JSON files.
        #[arg(long)]
        traces: PathBuf,
        /// Report destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to the CPU count.
        #[arg(long, env = "CONFCHECK_WORKERS", value_parser = clap::value_parser!(u64).range(1..))]
        workers: Option<u64>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Cap on listed non-conformant trace ids in JSON output.
        #[arg(long, default_value_t = DEFAULT_MAX_IDS)]
        max_ids: usize,
    },
    /// Generate a synthetic corpus for the bundled reference design.
    Simulate {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        p_omit: f64,
        #[arg(long, default_value_t = 0.0)]
        p_slow: f64,
        #[arg(long, default_value_t = 0.0)]
        p_direct: f64,
        #[arg(long, default_value_t = 1000)]
        traces_per_file: usize,
        /// Healthy root latency range in microseconds, as MIN,MAX.
        #[arg(long, value_parser = parse_range)]
        base_latency: Option<(u64, u64)>,
        /// Injected slow root latency range in microseconds, as MIN,MAX.
        #[arg(long, value_parser = parse_range)]
        slow_latency: Option<(u64, u64)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one observed trace as a DOT span graph.
    Graph {
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        trace_id: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a design file derived from an observed trace.
    ImportDesign {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        trace_id: String,
        /// Comma-separated span ids to keep; all spans when omitted.
        #[arg(long, value_delimiter = ',')]
        keep: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a design file and list its traces.
    ValidateDesign { path: PathBuf },
}

fn parse_range(s: &str) -> Result<(u64, u64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected MIN,MAX")?;
    let parse = |v: &str| v.trim().parse::<u64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(lo)?, parse(hi)?))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_design(path: &Path) -> Result<DesignTraceSet> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    load_design_set(&bytes).with_context(|| format!("loading {}", path.display()))
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    let corpus = load_corpus_dir(dir).with_context(|| format!("loading traces from {}", dir.display()))?;
    if corpus.files == 0 {
        bail!("no .json files in {}", dir.display());
    }
    for warning in &corpus.warnings {
        eprintln!("warning: {warning}");
    }
    Ok(corpus)
}

fn find_trace(corpus: Corpus, id: &str) -> Result<ObservedTrace> {
    let wanted = TraceId::new(id.to_ascii_lowercase()).with_context(|| format!("trace id {id:?}"))?;
    corpus
        .traces
        .into_iter()
        .find(|t| *t.trace_id() == wanted)
        .with_context(|| format!("trace {wanted} not found"))
}

fn emit(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, content).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(content.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Check { design, traces, out, workers, format, max_ids } => {
            let set = load_design(&design)?;
            let corpus = load_corpus(&traces)?;
            let workers = match workers {
                Some(n) => n as usize,
                None => std::thread::available_parallelism().map_or(1, |n| n.get()),
            };
            let (report, _) = check_corpus(&set, &corpus.traces, workers);
            let rendered = match format {
                Format::Json => render_json(&report, max_ids) + "\n",
                Format::Text => render_text(&report, &set),
            };
            emit(out.as_deref(), &rendered)?;
            Ok(if report.non_conformant_traces == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Simulate {
            count,
            seed,
            p_omit,
            p_slow,
            p_direct,
            traces_per_file,
            base_latency,
            slow_latency,
            out,
        } => {
            let defaults = SimConfig::default();
            let config = SimConfig {
                seed,
                trace_count: count,
                p_omit,
                p_slow,
                p_direct,
                base_latency_micros: base_latency.unwrap_or(defaults.base_latency_micros),
                slow_latency_micros: slow_latency.unwrap_or(defaults.slow_latency_micros),
                ..defaults
            };
            if traces_per_file == 0 {
                bail!("--traces-per-file must be positive");
            }
            let corpus = generate_corpus(&config)?;
            let files = write_corpus(&corpus, &out, traces_per_file)?;
            println!("wrote {} traces in {files} files to {}", corpus.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Graph { design, traces, trace_id, out } => {
            let set = load_design(&design)?;
            let trace = find_trace(load_corpus(&traces)?, &trace_id)?;
            emit(out.as_deref(), &render_dot(&trace, &set))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::ImportDesign { traces, trace_id, keep, out } => {
            let trace = find_trace(load_corpus(&traces)?, &trace_id)?;
            let keep: BTreeSet<SpanId> = if keep.is_empty() {
                trace.spans().keys().cloned().collect()
            } else {
                keep.iter()
                    .map(|s| SpanId::new(s.trim().to_ascii_lowercase()).with_context(|| format!("span id {s:?}")))
                    .collect::<Result<_>>()?
            };
            let design = import_design_from_observed(&trace, &keep)?;
            let bytes = to_design_json([&design]);
            // Never write a file that would not load back.
            load_design_set(&bytes).context("imported design failed validation")?;
            fs::write(&out, bytes).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote design {} with {} spans to {}", design.id, design.spans.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::ValidateDesign { path } => {
            let set = load_design(&path)?;
            for trace in set.traces() {
                let kind = if trace.is_disallowed() { "disallowed" } else { "required" };
                println!("{}: {kind}, {} spans", trace.id, trace.spans.len());
            }
            println!("ok: {} design traces", set.len());
            Ok(ExitCode::SUCCESS)
        }
    }
}
