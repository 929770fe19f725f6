use std::fs;
use std::io::{self, BufReader, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::Path;

use evgraph_core::analysis::{self, AnalysisError};
use evgraph_core::patterns::{self, PatternError, PatternTemplate};
use evgraph_core::pipeline::StageError;
use evgraph_core::render::{self, RenderOptions};
use evgraph_core::report::{self, ReportError};
use evgraph_core::synth::{self, Fault, InvalidSpec, Scenario, SyntheticSpec};
use evgraph_core::trace::{self, TraceError};
use evgraph_core::wire::WireError;
use evgraph_core::GraphError;
use evgraph_sentinel::Sentinel;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    File { path: String, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Spec(#[from] InvalidSpec),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        2
    }

    pub fn file(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
        move |source| CliError::File {
            path: path.display().to_string(),
            source,
        }
    }
}

/// The built-in templates plus any from `dir`.
pub fn load_templates(dir: Option<&Path>) -> Result<Vec<PatternTemplate>, CliError> {
    let database = match dir {
        Some(d) => patterns::load_pattern_database(d)?,
        None => Vec::new(),
    };
    Ok(analysis::template_set(database))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text).map_err(CliError::file(p)),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(out.flush()?)
        }
    }
}

pub fn generate(
    scenario: Scenario,
    processes: u32,
    iterations: u64,
    faults: Vec<Fault>,
    seed: u64,
    out: Option<&Path>,
) -> Result<u8, CliError> {
    let spec = SyntheticSpec {
        scenario,
        process_count: processes,
        iterations,
        faults,
    };
    let text = synth::generate_synthetic(&spec, seed)?;
    write_output(out, &text)?;
    Ok(0)
}

fn read_trace_file(path: &Path) -> Result<(trace::TraceHeader, Vec<evgraph_core::Event>), CliError> {
    let file = fs::File::open(path).map_err(CliError::file(path))?;
    Ok(trace::read_trace(BufReader::new(file))?)
}

pub fn analyze(trace: &Path, report: Option<&Path>, templates: Option<&Path>) -> Result<u8, CliError> {
    let templates = load_templates(templates)?;
    let (header, events) = read_trace_file(trace)?;
    let result = analysis::analyze_events(header.process_count, events, &templates)?;
    write_output(report, &report::serialize_report(&result))?;
    Ok(if result.anomalies.is_empty() { 0 } else { 1 })
}

pub fn render(
    trace: &Path,
    report: Option<&Path>,
    svg: Option<&Path>,
    templates: Option<&Path>,
    collapse: bool,
) -> Result<u8, CliError> {
    let (header, events) = read_trace_file(trace)?;
    let graph = analysis::build_graph(header.process_count, events)?;
    let analysis = match report {
        Some(path) => {
            let r = report::parse_report(&fs::read_to_string(path).map_err(CliError::file(path))?)?;
            if r.trace != report::AnalysisReport::new(&graph, Vec::new(), Vec::new()).trace {
                return Err(CliError::Usage(format!(
                    "report {} does not describe trace {}",
                    path.display(),
                    trace.display()
                )));
            }
            r
        }
        None => analysis::analyze_graph(&graph, &load_templates(templates)?)?,
    };
    let text = render::emit_svg(
        &graph,
        &render::layout(&graph),
        &analysis.anomalies,
        &analysis.runs,
        RenderOptions { collapse },
    );
    write_output(svg, &text)?;
    Ok(0)
}

pub fn serve(host: &str, control_port: u16, http_port: u16) -> Result<u8, CliError> {
    let ip: IpAddr = host
        .parse()
        .map_err(|_| CliError::Usage(format!("bad host address `{host}`")))?;
    let sentinel = Sentinel::bind(SocketAddr::new(ip, control_port), SocketAddr::new(ip, http_port))
        .map_err(|e| CliError::Usage(format!("cannot bind sentinel ports: {e}")))?;
    eprintln!(
        "sentinel: control on {}, http on http://{}",
        sentinel.control_addr()?,
        sentinel.http_addr()?
    );
    sentinel.run_until_interrupted()?;
    Ok(0)
}
