//! Pipeline stages. A stage reads data items from a source and writes them
//! to a sink or an output file; stage roles are looked up by name.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::{self, BufRead};
use std::path::PathBuf;
use std::sync::mpsc;

use thiserror::Error;

use crate::analysis::{self, AnalysisError, Analyzer, AnalyzerRegistry, Findings};
use crate::model::{EventGraph, GraphBuilder, GraphError};
use crate::patterns::PatternTemplate;
use crate::render::{self, RenderOptions};
use crate::report;
use crate::trace::{Matcher, PendingReport, TraceError, TraceReader};
use crate::wire::{DataItem, DataReceiver, DataSender, Message, WireError};

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("unknown stage role `{0}`")]
    UnknownRole(String),
    #[error("{0}")]
    Config(String),
}

pub trait ItemSource {
    fn process_count(&self) -> u32;

    /// Next item, or `None` at the end of the stream.
    fn next_item(&mut self) -> Result<Option<DataItem>, StageError>;
}

pub trait ItemSink {
    fn send(&mut self, item: DataItem) -> Result<(), StageError>;

    /// Ends the stream.
    fn finish(&mut self) -> Result<(), StageError>;
}

/// Opens a sink once the stream's process count is known.
pub trait SinkOpener: Send {
    fn open(self: Box<Self>, process_count: u32) -> Result<Box<dyn ItemSink>, StageError>;
}

impl<R: io::Read> ItemSource for DataReceiver<R> {
    fn process_count(&self) -> u32 {
        DataReceiver::process_count(self)
    }

    fn next_item(&mut self) -> Result<Option<DataItem>, StageError> {
        Ok(self.recv()?)
    }
}

impl<W: io::Write> ItemSink for DataSender<W> {
    fn send(&mut self, item: DataItem) -> Result<(), StageError> {
        Ok(DataSender::send(self, item)?)
    }

    fn finish(&mut self) -> Result<(), StageError> {
        Ok(DataSender::finish(self)?)
    }
}

/// Events from a trace file, each relation following the event that
/// completes it.
pub struct TraceSource<R: BufRead> {
    reader: TraceReader<R>,
    matcher: Matcher,
    queued: VecDeque<DataItem>,
}

impl<R: BufRead> TraceSource<R> {
    pub fn new(source: R) -> Result<Self, StageError> {
        Ok(TraceSource {
            reader: TraceReader::new(source)?,
            matcher: Matcher::new(),
            queued: VecDeque::new(),
        })
    }
}

impl TraceSource<io::BufReader<fs::File>> {
    pub fn open(path: &std::path::Path) -> Result<Self, StageError> {
        TraceSource::new(io::BufReader::new(fs::File::open(path)?))
    }
}

impl<R: BufRead> ItemSource for TraceSource<R> {
    fn process_count(&self) -> u32 {
        self.reader.header().process_count
    }

    fn next_item(&mut self) -> Result<Option<DataItem>, StageError> {
        if let Some(item) = self.queued.pop_front() {
            return Ok(Some(item));
        }
        match self.reader.next() {
            None => Ok(None),
            Some(Err(e)) => Err(e.into()),
            Some(Ok(event)) => {
                if let Some(r) = self.matcher.push(&event) {
                    self.queued.push_back(DataItem::Relation(r));
                }
                Ok(Some(DataItem::Event(event)))
            }
        }
    }
}

/// In-process sink half of a stream; see [`channel`].
pub struct ChannelOpener {
    tx: mpsc::Sender<Message>,
}

/// In-process source half of a stream; see [`channel`].
pub struct ChannelSource {
    rx: mpsc::Receiver<Message>,
    process_count: u32,
    done: bool,
}

struct ChannelSink {
    tx: mpsc::Sender<Message>,
}

/// An in-process stream with the same message discipline as a TCP one.
pub fn channel() -> (ChannelOpener, mpsc::Receiver<Message>) {
    let (tx, rx) = mpsc::channel();
    (ChannelOpener { tx }, rx)
}

impl ChannelSource {
    /// Blocks until the producer has opened the stream.
    pub fn accept(rx: mpsc::Receiver<Message>) -> Result<Self, StageError> {
        match rx.recv() {
            Ok(Message::Hello { process_count }) => Ok(ChannelSource {
                rx,
                process_count,
                done: false,
            }),
            _ => Err(WireError::ProtocolViolation("expected Hello".into()).into()),
        }
    }
}

impl SinkOpener for ChannelOpener {
    fn open(self: Box<Self>, process_count: u32) -> Result<Box<dyn ItemSink>, StageError> {
        let sink = ChannelSink { tx: self.tx };
        sink.put(Message::Hello { process_count })?;
        Ok(Box::new(sink))
    }
}

impl ChannelSink {
    fn put(&self, m: Message) -> Result<(), StageError> {
        self.tx
            .send(m)
            .map_err(|_| WireError::ProtocolViolation("consumer went away".into()).into())
    }
}

impl ItemSink for ChannelSink {
    fn send(&mut self, item: DataItem) -> Result<(), StageError> {
        self.put(item.into())
    }

    fn finish(&mut self) -> Result<(), StageError> {
        self.put(Message::EndOfStream)
    }
}

impl ItemSource for ChannelSource {
    fn process_count(&self) -> u32 {
        self.process_count
    }

    fn next_item(&mut self) -> Result<Option<DataItem>, StageError> {
        if self.done {
            return Ok(None);
        }
        match self.rx.recv() {
            Ok(Message::Event(e)) => Ok(Some(DataItem::Event(e))),
            Ok(Message::Relation(r)) => Ok(Some(DataItem::Relation(r))),
            Ok(Message::Findings(f)) => Ok(Some(DataItem::Findings(f))),
            Ok(Message::EndOfStream) => {
                self.done = true;
                Ok(None)
            }
            Ok(_) => Err(WireError::ProtocolViolation("unexpected message on a data stream".into()).into()),
            Err(_) => Err(WireError::ProtocolViolation("stream closed before EndOfStream".into()).into()),
        }
    }
}

pub enum StageOutput {
    Stream(Box<dyn SinkOpener>),
    File(PathBuf),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageOutcome {
    pub items: u64,
    /// View document produced by sink roles.
    pub view: Option<String>,
}

pub trait Stage: Send {
    fn role(&self) -> &'static str;

    fn run(&mut self, input: &mut dyn ItemSource, output: StageOutput) -> Result<StageOutcome, StageError>;
}

/// Rebuilds the graph from a stream and gathers upstream findings.
struct Collector {
    builder: GraphBuilder,
    findings: Findings,
    items: u64,
}

impl Collector {
    fn new(process_count: u32) -> Result<Self, StageError> {
        Ok(Collector {
            builder: GraphBuilder::new(process_count)?,
            findings: Findings::default(),
            items: 0,
        })
    }

    fn accept(&mut self, item: &DataItem) -> Result<(), StageError> {
        self.items += 1;
        match item {
            DataItem::Event(e) => self.builder.add_event(e.clone())?,
            DataItem::Relation(r) => self.builder.add_relation(*r)?,
            DataItem::Findings(text) => self.findings.merge(Findings::from_json(text)?),
        }
        Ok(())
    }

    fn finish(self) -> Result<(EventGraph, Findings, u64), StageError> {
        Ok((self.builder.build()?, self.findings, self.items))
    }
}

fn stream_output(output: StageOutput, role: &str, process_count: u32) -> Result<Box<dyn ItemSink>, StageError> {
    match output {
        StageOutput::Stream(opener) => opener.open(process_count),
        StageOutput::File(path) => Err(StageError::Config(format!(
            "role `{role}` writes a stream, not the file {}",
            path.display()
        ))),
    }
}

fn file_output(output: StageOutput, role: &str) -> Result<PathBuf, StageError> {
    match output {
        StageOutput::File(path) => Ok(path),
        StageOutput::Stream(_) => Err(StageError::Config(format!("role `{role}` writes a file, not a stream"))),
    }
}

/// Passes a trace on unchanged.
pub struct ForwardStage;

impl Stage for ForwardStage {
    fn role(&self) -> &'static str {
        "generate"
    }

    fn run(&mut self, input: &mut dyn ItemSource, output: StageOutput) -> Result<StageOutcome, StageError> {
        let mut sink = stream_output(output, self.role(), input.process_count())?;
        let mut items = 0;
        while let Some(item) = input.next_item()? {
            sink.send(item)?;
            items += 1;
        }
        sink.finish()?;
        Ok(StageOutcome { items, view: None })
    }
}

/// Forwards the stream as it arrives and appends one Findings item with the
/// results of its analyzers.
pub struct AnalyzeStage {
    role: &'static str,
    analyzers: Vec<Box<dyn Analyzer>>,
}

impl Stage for AnalyzeStage {
    fn role(&self) -> &'static str {
        self.role
    }

    fn run(&mut self, input: &mut dyn ItemSource, output: StageOutput) -> Result<StageOutcome, StageError> {
        let mut sink = stream_output(output, self.role, input.process_count())?;
        let mut collector = Collector::new(input.process_count())?;
        while let Some(item) = input.next_item()? {
            collector.accept(&item)?;
            sink.send(item)?;
        }
        let (graph, mut findings, items) = collector.finish()?;
        let (sends, receives) = graph.unmatched();
        let pending = PendingReport { sends, receives };
        analysis::run_analyzers(&self.analyzers, &graph, &pending, &mut findings)?;
        sink.send(DataItem::Findings(findings.to_json()))?;
        sink.finish()?;
        Ok(StageOutcome { items, view: None })
    }
}

/// Writes the analysis report assembled from the stream.
pub struct ReportSink;

impl Stage for ReportSink {
    fn role(&self) -> &'static str {
        "sink-json"
    }

    fn run(&mut self, input: &mut dyn ItemSource, output: StageOutput) -> Result<StageOutcome, StageError> {
        let path = file_output(output, self.role())?;
        let mut collector = Collector::new(input.process_count())?;
        while let Some(item) = input.next_item()? {
            collector.accept(&item)?;
        }
        let (graph, findings, items) = collector.finish()?;
        let report = findings.into_report(&graph);
        fs::write(&path, report::serialize_report(&report))?;
        Ok(StageOutcome {
            items,
            view: Some(render::emit_json(&graph, &report.anomalies, &report.runs)),
        })
    }
}

/// Writes the space-time diagram of the stream.
pub struct SvgSink {
    pub options: RenderOptions,
}

impl Stage for SvgSink {
    fn role(&self) -> &'static str {
        "sink-svg"
    }

    fn run(&mut self, input: &mut dyn ItemSource, output: StageOutput) -> Result<StageOutcome, StageError> {
        let path = file_output(output, self.role())?;
        let mut collector = Collector::new(input.process_count())?;
        while let Some(item) = input.next_item()? {
            collector.accept(&item)?;
        }
        let (graph, findings, items) = collector.finish()?;
        let anomalies = findings.anomalies.unwrap_or_default();
        let runs = findings.runs.unwrap_or_default();
        let svg = render::emit_svg(&graph, &render::layout(&graph), &anomalies, &runs, self.options);
        fs::write(&path, svg)?;
        Ok(StageOutcome {
            items,
            view: Some(render::emit_json(&graph, &anomalies, &runs)),
        })
    }
}

#[derive(Debug, Clone)]
pub struct StageConfig {
    pub templates: Vec<PatternTemplate>,
    pub render: RenderOptions,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            templates: analysis::template_set(Vec::new()),
            render: RenderOptions::default(),
        }
    }
}

type StageFactory = Box<dyn Fn(&StageConfig) -> Result<Box<dyn Stage>, StageError> + Send + Sync>;

pub struct StageRegistry {
    factories: BTreeMap<&'static str, StageFactory>,
}

fn analyze_factory(role: &'static str, names: &'static [&'static str]) -> StageFactory {
    Box::new(move |config: &StageConfig| {
        let registry = AnalyzerRegistry::default();
        let analyzers = names
            .iter()
            .map(|n| registry.create(n, &config.templates))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Box::new(AnalyzeStage { role, analyzers }) as Box<dyn Stage>)
    })
}

impl StageRegistry {
    pub fn empty() -> Self {
        StageRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, role: &'static str, factory: StageFactory) {
        self.factories.insert(role, factory);
    }

    pub fn roles(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn create(&self, role: &str, config: &StageConfig) -> Result<Box<dyn Stage>, StageError> {
        let factory = self
            .factories
            .get(role)
            .ok_or_else(|| StageError::UnknownRole(role.to_owned()))?;
        factory(config)
    }
}

impl Default for StageRegistry {
    fn default() -> Self {
        let mut r = StageRegistry::empty();
        r.register("generate", Box::new(|_| Ok(Box::new(ForwardStage))));
        r.register("analyze", analyze_factory("analyze", &analysis::FULL_ANALYSIS));
        r.register("analyze-failures", analyze_factory("analyze-failures", &["failures"]));
        r.register("analyze-patterns", analyze_factory("analyze-patterns", &["patterns"]));
        r.register("sink-json", Box::new(|_| Ok(Box::new(ReportSink))));
        r.register(
            "sink-svg",
            Box::new(|c| Ok(Box::new(SvgSink { options: c.render }))),
        );
        r
    }
}

/// Roles that take a trace file as input.
pub fn reads_trace_file(role: &str) -> bool {
    role == "generate"
}

/// Roles whose output is a file rather than a stream.
pub fn writes_file(role: &str) -> bool {
    role.starts_with("sink-")
}
