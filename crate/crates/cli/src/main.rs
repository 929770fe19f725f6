use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evgraph_core::synth::{Fault, Scenario};

mod commands;
mod config;
mod stage;


/// Trace analysis for message-passing programs: generate and analyze traces,
/// draw space-time diagrams, and run the analysis as a networked pipeline.
#[derive(Parser)]
#[command(name = "evgraph", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic trace.
    Generate {
        #[arg(long)]
        scenario: Scenario,
        #[arg(long)]
        processes: u32,
        #[arg(long)]
        iterations: u64,
        /// KIND@ITERATION[:TARGET] with KIND one of length-mismatch, wrong-dest, drop.
        #[arg(long = "fault")]
        faults: Vec<Fault>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analyze a trace. Exits 0 when clean, 1 when anomalies were found.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        /// Report file; standard output when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Directory of pattern template files.
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Draw a trace as an SVG space-time diagram.
    Render {
        #[arg(long)]
        trace: PathBuf,
        /// Analysis report to highlight; the trace is analyzed when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Replace repeated pattern iterations with one block per run.
        #[arg(long)]
        collapse: bool,
    },
    /// Run the sentinel until interrupted.
    Serve {
        #[arg(long, default_value_t = 7400)]
        control_port: u16,
        #[arg(long, default_value_t = 7480)]
        http_port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Run one pipeline stage.
    Stage(stage::StageArgs),
    /// Run a whole pipeline described by a config file.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate {
            scenario,
            processes,
            iterations,
            faults,
            seed,
            out,
        } => commands::generate(scenario, processes, iterations, faults, seed, out.as_deref()),
        Command::Analyze {
            trace,
            report,
            templates,
        } => commands::analyze(&trace, report.as_deref(), templates.as_deref()),
        Command::Render {
            trace,
            report,
            svg,
            templates,
            collapse,
        } => commands::render(&trace, report.as_deref(), svg.as_deref(), templates.as_deref(), collapse),
        Command::Serve {
            control_port,
            http_port,
            host,
        } => commands::serve(&host, control_port, http_port),
        Command::Stage(args) => stage::run(&args).map(|()| 0),
        Command::Pipeline { config } => config::run_file(&config).map(|()| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("evgraph: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
