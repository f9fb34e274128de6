use std::path::{Path, PathBuf};
use std::process::ExitCode;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use clap::{Parser, Subcommand};
use gateway_harness::control::{self, ControlError, ControlServer, EnvelopeSummary, ProviderSummary};
use gateway_harness::{init_logging, load_config, run_scenario, Pipeline, ScenarioError};
use serde_json::json;

const EXIT_CONFIG: u8 = 1;
const EXIT_UNREACHABLE: u8 = 2;
const EXIT_PRODUCE: u8 = 3;

#[derive(Parser)]
#[command(name = "gateway", version, about = "IoT gateway pipeline daemon and control client")]
struct Cli {
    /// Control socket of the daemon [env: GATEWAY_SOCKET]
    #[arg(long, global = true)]
    socket: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start the daemon for a pipeline config and block until interrupted.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Ask the daemon to produce data into a store; prints the request id.
    Trigger {
        #[arg(long = "produce", value_name = "STORE")]
        store: String,
        /// File handed to the chosen provider as its input.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Print the newest envelopes of a store.
    Tail {
        #[arg(long)]
        store: String,
        #[arg(long, default_value_t = 10)]
        n: usize,
    },
    /// Print provider states.
    Status,
    /// Run a built-in end-to-end scenario against self-hosted mocks.
    Scenario {
        id: String,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging();
    let socket = cli.socket.unwrap_or_else(control::default_socket_path);
    match cli.command {
        Command::Run { config } => run(config, socket),
        Command::Trigger { store, input } => trigger(&socket, &store, input),
        Command::Tail { store, n } => tail(&socket, &store, n),
        Command::Status => status(&socket),
        Command::Scenario { id, json } => scenario(&id, json),
    }
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("gateway: {msg}");
    ExitCode::from(code)
}

fn control_failure(e: ControlError, remote_code: u8) -> ExitCode {
    match e {
        ControlError::Unreachable { .. } => fail(EXIT_UNREACHABLE, e),
        ControlError::Remote { .. } => fail(remote_code, e),
        ControlError::Protocol(_) => fail(EXIT_UNREACHABLE, e),
    }
}

fn run(config: PathBuf, socket: PathBuf) -> ExitCode {
    let pipeline = match load_config(&config).map_err(|e| e.to_string()).and_then(|cfg| {
        Pipeline::build(cfg).map_err(|e| e.to_string())
    }) {
        Ok(p) => p,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if let Err(e) = pipeline.start() {
        return fail(EXIT_CONFIG, e);
    }
    let (shutdown_tx, shutdown_rx) = crossbeam_channel::bounded(1);
    let server = match ControlServer::bind(&socket, pipeline.engine.clone(), shutdown_tx.clone()) {
        Ok(s) => s,
        Err(e) => {
            pipeline.stop(false);
            return fail(EXIT_CONFIG, format!("control socket {}: {e}", socket.display()));
        }
    };
    if let Err(e) = ctrlc::set_handler(move || {
        let _ = shutdown_tx.try_send(());
    }) {
        tracing::warn!(error = %e, "no signal handler; stop with `shutdown` over the socket");
    }
    println!("gateway running; control socket {}", server.path().display());
    let _ = shutdown_rx.recv();
    tracing::info!("shutting down");
    drop(server);
    pipeline.stop(true);
    ExitCode::SUCCESS
}

fn trigger(socket: &Path, store: &str, input: Option<PathBuf>) -> ExitCode {
    let mut args = json!({ "store": store });
    if let Some(path) = input {
        match std::fs::read(&path) {
            Ok(bytes) => args["input_b64"] = json!(BASE64.encode(bytes)),
            Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", path.display())),
        }
    }
    match control::request(socket, "produce", args) {
        Ok(reply) => {
            println!("{}", reply["request_id"]);
            ExitCode::SUCCESS
        }
        Err(e) => control_failure(e, EXIT_PRODUCE),
    }
}

fn tail(socket: &Path, store: &str, n: usize) -> ExitCode {
    match control::request(socket, "tail", json!({ "store": store, "n": n })) {
        Ok(reply) => {
            let lines: Vec<EnvelopeSummary> =
                serde_json::from_value(reply["envelopes"].clone()).unwrap_or_default();
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => control_failure(e, EXIT_CONFIG),
    }
}

fn status(socket: &Path) -> ExitCode {
    match control::request(socket, "status", json!({})) {
        Ok(reply) => {
            let providers: Vec<ProviderSummary> =
                serde_json::from_value(reply["providers"].clone()).unwrap_or_default();
            for p in providers {
                let error = p.last_error.map(|e| format!("\t{e}")).unwrap_or_default();
                println!("{}\t{}\t-> {}\tpending {}{error}", p.key, p.state, p.output_store, p.pending);
            }
            ExitCode::SUCCESS
        }
        Err(e) => control_failure(e, EXIT_CONFIG),
    }
}

fn scenario(id: &str, as_json: bool) -> ExitCode {
    let report = match run_scenario(id) {
        Ok(r) => r,
        Err(e @ ScenarioError::UnknownScenario(_)) => return fail(EXIT_CONFIG, e),
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if as_json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.render());
    }
    match report.into_result() {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => fail(EXIT_CONFIG, e),
    }
}
