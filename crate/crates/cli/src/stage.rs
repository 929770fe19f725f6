use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use clap::Args;
use evgraph_core::module::{Direction, Feature, ModuleDescriptor, ModuleState};
use evgraph_core::pipeline::{
    self, ItemSink, SinkOpener, StageConfig, StageError, StageOutcome, StageOutput, StageRegistry, TraceSource,
};
use evgraph_core::render::RenderOptions;
use evgraph_core::wire::{self, DataSender, WireError};
use evgraph_sentinel::ControlClient;

use crate::commands::{load_templates, CliError};

#[derive(Args, Debug, Clone)]
pub struct StageArgs {
    /// generate, analyze, analyze-failures, analyze-patterns, sink-json or sink-svg.
    #[arg(long)]
    pub role: String,
    /// A trace file, or tcp://HOST:PORT to listen on for an upstream stage.
    #[arg(long = "in")]
    pub input: String,
    /// tcp://HOST:PORT of the downstream stage, or the output file of a sink.
    /// With --sentinel, a streaming stage may omit it and wait to be wired.
    #[arg(long = "out")]
    pub output: Option<String>,
    /// Control address of a sentinel to register with.
    #[arg(long)]
    pub sentinel: Option<String>,
    /// Module name shown by the sentinel; defaults to the role.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub collapse: bool,
    /// Connection attempts, 100 ms apart.
    #[arg(long, default_value_t = 50)]
    pub retries: u32,
}

pub enum Input {
    File(PathBuf),
    Listen(TcpListener),
}

impl Input {
    pub fn open(spec: &str) -> Result<Input, CliError> {
        match spec.strip_prefix("tcp://") {
            Some(addr) => Ok(Input::Listen(TcpListener::bind(addr).map_err(|e| {
                CliError::Usage(format!("cannot listen on {addr}: {e}"))
            })?)),
            None => Ok(Input::File(PathBuf::from(spec))),
        }
    }

    pub fn address(&self) -> Option<String> {
        match self {
            Input::Listen(l) => l.local_addr().ok().map(|a| format!("tcp://{a}")),
            Input::File(_) => None,
        }
    }

    fn run(self, stage: &mut dyn pipeline::Stage, output: StageOutput) -> Result<StageOutcome, StageError> {
        match self {
            Input::File(path) => stage.run(&mut TraceSource::open(&path)?, output),
            Input::Listen(listener) => stage.run(&mut wire::accept_data_stream(&listener)?, output),
        }
    }
}

/// Connects to a fixed downstream address.
struct TcpOpener {
    address: String,
    retries: u32,
}

impl SinkOpener for TcpOpener {
    fn open(self: Box<Self>, process_count: u32) -> Result<Box<dyn ItemSink>, StageError> {
        let sender: DataSender<TcpStream> = wire::open_data_stream(&self.address, process_count, self.retries)?;
        Ok(Box::new(sender))
    }
}

/// Waits for the sentinel to name the downstream address, then connects.
struct DirectiveOpener {
    control: Arc<Mutex<ControlClient>>,
    retries: u32,
}

impl SinkOpener for DirectiveOpener {
    fn open(self: Box<Self>, process_count: u32) -> Result<Box<dyn ItemSink>, StageError> {
        let address = self
            .control
            .lock()
            .map_err(|_| WireError::ProtocolViolation("control client poisoned".into()))?
            .wait_directive(None)?;
        log::info!("wired to {address}");
        Box::new(TcpOpener {
            address,
            retries: self.retries,
        })
        .open(process_count)
    }
}

fn features(role: &str) -> Vec<Feature> {
    let mut f = Vec::new();
    if !pipeline::writes_file(role) {
        f.push(Feature::Send);
    }
    if !pipeline::reads_trace_file(role) {
        f.push(Feature::Receive);
    }
    f
}

pub fn run(args: &StageArgs) -> Result<(), CliError> {
    let input = Input::open(&args.input)?;
    run_with(args, input)
}

/// Runs a stage whose input is already open, so callers can bind listeners
/// before any producer starts.
pub fn run_with(args: &StageArgs, input: Input) -> Result<(), CliError> {
    let config = StageConfig {
        templates: load_templates(args.templates.as_deref())?,
        render: RenderOptions {
            collapse: args.collapse,
        },
    };
    let mut stage = StageRegistry::default().create(&args.role, &config)?;
    let sink_role = pipeline::writes_file(&args.role);
    if sink_role && args.output.is_none() {
        return Err(CliError::Usage(format!("role `{}` needs --out FILE", args.role)));
    }
    if !sink_role && args.output.is_none() && args.sentinel.is_none() {
        return Err(CliError::Usage(format!(
            "role `{}` needs --out tcp://HOST:PORT or --sentinel",
            args.role
        )));
    }
    let control = match &args.sentinel {
        Some(address) => {
            let mut d = ModuleDescriptor::unregistered(args.name.as_deref().unwrap_or(&args.role), &features(&args.role));
            if let Some(a) = input.address() {
                d = d.with_interface("in", Direction::In, wire::strip_scheme(&a));
            }
            d = d.with_interface("out", Direction::Out, args.output.as_deref().unwrap_or(""));
            let client = ControlClient::register(address, d, args.retries)?;
            log::info!("registered as module {}", client.id());
            Some(Arc::new(Mutex::new(client)))
        }
        None => None,
    };
    let set_status = |state| {
        if let Some(c) = &control {
            if let Err(e) = c.lock().map_err(|_| ()).and_then(|mut c| c.set_status(state).map_err(|_| ())) {
                log::warn!("cannot report status {state}: {e:?}");
            }
        }
    };

    let output = match (&args.output, &control) {
        (Some(out), _) if sink_role => StageOutput::File(PathBuf::from(out)),
        (Some(out), _) => StageOutput::Stream(Box::new(TcpOpener {
            address: out.clone(),
            retries: args.retries,
        })),
        (None, Some(c)) => StageOutput::Stream(Box::new(DirectiveOpener {
            control: c.clone(),
            retries: args.retries,
        })),
        (None, None) => unreachable!("checked above"),
    };

    set_status(ModuleState::Running);
    match input.run(stage.as_mut(), output) {
        Ok(outcome) => {
            log::info!("{} finished after {} items", args.role, outcome.items);
            if let (Some(view), Some(c)) = (outcome.view, &control) {
                if let Ok(mut c) = c.lock() {
                    c.send_view(view)?;
                }
            }
            set_status(ModuleState::Finished);
            Ok(())
        }
        Err(e) => {
            set_status(ModuleState::Failed);
            Err(e.into())
        }
    }
}
