use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use evgraph_core::pipeline;
use serde::Deserialize;

use crate::commands::CliError;
use crate::stage::{self, Input, StageArgs};

/// A statically wired pipeline.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Directory of pattern templates shared by all analyze stages.
    pub templates: Option<PathBuf>,
    #[serde(rename = "module")]
    pub modules: Vec<ModuleConfig>,
    #[serde(rename = "edge", default)]
    pub edges: Vec<EdgeConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleConfig {
    pub name: String,
    pub role: String,
    /// Trace file read by a generate module.
    pub input: Option<PathBuf>,
    /// Output file written by a sink module.
    pub output: Option<PathBuf>,
    /// Listen address of a stream-fed module; defaults to an ephemeral loopback port.
    pub listen: Option<String>,
    #[serde(default)]
    pub collapse: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeConfig {
    pub producer: String,
    pub consumer: String,
}

fn invalid(message: String) -> CliError {
    CliError::Usage(message)
}

pub fn parse(text: &str) -> Result<PipelineConfig, CliError> {
    let config: PipelineConfig = toml::from_str(text).map_err(|e| invalid(format!("pipeline config: {e}")))?;
    let mut names = BTreeMap::new();
    for (n, m) in config.modules.iter().enumerate() {
        if names.insert(m.name.as_str(), n).is_some() {
            return Err(invalid(format!("duplicate module `{}`", m.name)));
        }
        if !pipeline::StageRegistry::default().roles().any(|r| r == m.role) {
            return Err(invalid(format!("module `{}`: unknown role `{}`", m.name, m.role)));
        }
        let reads = pipeline::reads_trace_file(&m.role);
        if reads != m.input.is_some() {
            return Err(invalid(format!(
                "module `{}`: `input` is {} for role `{}`",
                m.name,
                if reads { "required" } else { "not allowed" },
                m.role
            )));
        }
        let writes = pipeline::writes_file(&m.role);
        if writes != m.output.is_some() {
            return Err(invalid(format!(
                "module `{}`: `output` is {} for role `{}`",
                m.name,
                if writes { "required" } else { "not allowed" },
                m.role
            )));
        }
    }
    let mut incoming = vec![0; config.modules.len()];
    let mut outgoing = vec![0; config.modules.len()];
    for e in &config.edges {
        let p = *names
            .get(e.producer.as_str())
            .ok_or_else(|| invalid(format!("edge names unknown module `{}`", e.producer)))?;
        let c = *names
            .get(e.consumer.as_str())
            .ok_or_else(|| invalid(format!("edge names unknown module `{}`", e.consumer)))?;
        outgoing[p] += 1;
        incoming[c] += 1;
    }
    for (n, m) in config.modules.iter().enumerate() {
        let want_in = usize::from(!pipeline::reads_trace_file(&m.role));
        let want_out = usize::from(!pipeline::writes_file(&m.role));
        if incoming[n] != want_in || outgoing[n] != want_out {
            return Err(invalid(format!(
                "module `{}` needs {want_in} incoming and {want_out} outgoing edges, has {} and {}",
                m.name, incoming[n], outgoing[n]
            )));
        }
    }
    Ok(config)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Runs every module in its own thread over loopback TCP. Relative paths are
/// resolved against the config file's directory.
pub fn run_file(path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(CliError::file(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    run(&parse(&text)?, base)
}

pub fn run(config: &PipelineConfig, base: &Path) -> Result<(), CliError> {
    let mut inputs = Vec::new();
    for m in &config.modules {
        let spec = match &m.input {
            Some(file) => resolve(base, file).display().to_string(),
            None => format!("tcp://{}", m.listen.as_deref().unwrap_or("127.0.0.1:0")),
        };
        inputs.push(Input::open(&spec)?);
    }
    let address: BTreeMap<&str, String> = config
        .modules
        .iter()
        .zip(&inputs)
        .filter_map(|(m, i)| i.address().map(|a| (m.name.as_str(), a)))
        .collect();
    let downstream: BTreeMap<&str, &str> = config
        .edges
        .iter()
        .map(|e| (e.producer.as_str(), e.consumer.as_str()))
        .collect();

    let mut handles = Vec::new();
    for (m, input) in config.modules.iter().zip(inputs) {
        let output = match &m.output {
            Some(file) => resolve(base, file).display().to_string(),
            None => address[downstream[m.name.as_str()]].clone(),
        };
        let args = StageArgs {
            role: m.role.clone(),
            input: String::new(),
            output: Some(output),
            sentinel: None,
            name: Some(m.name.clone()),
            templates: config.templates.as_ref().map(|t| resolve(base, t)),
            collapse: m.collapse,
            retries: 50,
        };
        let name = m.name.clone();
        handles.push((name, thread::spawn(move || stage::run_with(&args, input))));
    }
    let mut first_error = None;
    for (name, h) in handles {
        let result = h
            .join()
            .unwrap_or_else(|_| Err(invalid(format!("module `{name}` panicked"))));
        if let Err(e) = result {
            log::error!("module `{name}`: {e}");
            first_error.get_or_insert(invalid(format!("module `{name}`: {e}")));
        }
    }
    first_error.map_or(Ok(()), Err)
}
