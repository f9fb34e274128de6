use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gateway_core::backends::{FileStoreConfig, Transform};
use gateway_harness::init_logging;
use gateway_harness::mock::{
    AnekaMaster, BlobServer, EdgeLensMaster, EdgeLensWorker, FogBusMaster, MockError, MockFiles,
    MockServer, WorkerBehavior,
};

#[derive(Parser)]
#[command(name = "mock", version, about = "Mock FogBus, EdgeLens and Aneka backends")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the selected mocks until interrupted. Port 0 picks a free port.
    Serve(ServeArgs),
}

#[derive(clap::Args)]
struct ServeArgs {
    #[arg(long, value_name = "PORT")]
    fogbus: Option<u16>,
    #[arg(long, value_name = "PORT")]
    edgelens_master: Option<u16>,
    #[arg(long, value_name = "PORT")]
    edgelens_worker: Option<u16>,
    #[arg(long, value_name = "PORT")]
    aneka: Option<u16>,
    #[arg(long, value_name = "PORT")]
    blob: Option<u16>,
    #[arg(long, default_value = "hypopnea-count")]
    fogbus_transform: Transform,
    #[arg(long, default_value = "complement")]
    worker_transform: Transform,
    /// Worker URL the EdgeLens master hands out; defaults to the local worker.
    #[arg(long)]
    worker_url: Option<String>,
    /// Result polls answered 404 before the worker returns a result.
    #[arg(long, default_value_t = 0)]
    worker_pending_polls: u32,
    /// Directory the Aneka master reads inputs from when no blob store runs.
    #[arg(long)]
    aneka_files: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    init_logging();
    let Command::Serve(args) = cli.command;
    match serve(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mock: {e}");
            ExitCode::from(1)
        }
    }
}

trait Running {
    fn describe(&self) -> String;
}

impl<H> Running for MockServer<H> {
    fn describe(&self) -> String {
        format!("{} on {}", self.name(), self.url())
    }
}

fn serve(args: ServeArgs) -> Result<(), String> {
    let e = |err: MockError| err.to_string();
    let mut running: Vec<Box<dyn Running>> = Vec::new();

    if let Some(port) = args.fogbus {
        running.push(Box::new(
            MockServer::start("fogbus", port, FogBusMaster::new(args.fogbus_transform)).map_err(e)?,
        ));
    }
    let mut worker_url = args.worker_url.clone();
    if let Some(port) = args.edgelens_worker {
        let worker = EdgeLensWorker::new(args.worker_transform).with_behavior(WorkerBehavior {
            pending_polls: args.worker_pending_polls,
            ..Default::default()
        });
        let server = MockServer::start("edgelens-worker", port, worker).map_err(e)?;
        worker_url.get_or_insert_with(|| server.url());
        running.push(Box::new(server));
    }
    if let Some(port) = args.edgelens_master {
        running.push(Box::new(
            MockServer::start("edgelens-master", port, EdgeLensMaster::new(worker_url)).map_err(e)?,
        ));
    }
    let mut blob_data = None;
    if let Some(port) = args.blob {
        let server = MockServer::start("blob", port, BlobServer::default()).map_err(e)?;
        blob_data = Some(server.handler().data().clone());
        running.push(Box::new(server));
    }
    if let Some(port) = args.aneka {
        let files = match (blob_data, &args.aneka_files) {
            (Some(data), _) => MockFiles::Blobs(data),
            (None, Some(dir)) => MockFiles::Store(FileStoreConfig::local(dir).open(std::time::Duration::from_secs(5))),
            (None, None) => return Err("--aneka needs --blob or --aneka-files".into()),
        };
        running.push(Box::new(MockServer::start("aneka", port, AnekaMaster::new(files)).map_err(e)?));
    }
    if running.is_empty() {
        return Err("nothing to serve; pass at least one port flag".into());
    }

    for r in &running {
        println!("{}", r.describe());
    }
    let (tx, rx) = crossbeam_channel::bounded(1);
    ctrlc::set_handler(move || {
        let _ = tx.try_send(());
    })
    .map_err(|err| err.to_string())?;
    let _ = rx.recv();
    Ok(())
}
