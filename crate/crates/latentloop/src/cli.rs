//! Command line: `train`, `compare` and `serve`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad arguments or missing
//! inputs (nothing is written in that case).

use std::ffi::OsString;
use std::fs;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use latentloop_core::guidance::TargetLayout;
use latentloop_core::snapshot::LatentSnapshot;
use latentloop_core::trainer::{drive, EditSource, EpochRecord, Mode, Observer, ScriptedSource, Session, SkipAll};

use crate::actor::SystemClock;
use crate::checkpoint::save_checkpoint;
use crate::compare::compare;
use crate::logfile::{read_log, LogWriter};
use crate::runspec::RunSpec;
use crate::server::ServerConfig;

#[derive(Parser, Debug)]
#[command(name = "latentloop", version, about = "Human-guided latent-space training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one baseline or scripted experiment.
    Train(TrainArgs),
    /// Compare two experiment logs epoch by epoch.
    Compare(CompareArgs),
    /// Serve interactive sessions over HTTP and WebSocket.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// blobs-hard, rings, csv:PATH or idx:PATH[,LABELS]
    #[arg(long, default_value = "blobs-hard")]
    pub dataset: String,
    /// mlp or conv1d
    #[arg(long, default_value = "mlp")]
    pub model: String,
    #[arg(long, default_value_t = 45)]
    pub epochs: u32,
    #[arg(long, default_value_t = 25)]
    pub pretrain: u32,
    /// STRATEGY@EPOCHS, e.g. compact:0.6+sep:1.5@25,30,35,40; omit for a baseline run
    #[arg(long)]
    pub interventions: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long)]
    pub snapshot_size: Option<usize>,
    /// Output directory (config.json, log.jsonl, checkpoint.bin, snapshots/)
    #[arg(long, default_value = "latentloop-out")]
    pub out: PathBuf,
}

impl TrainArgs {
    pub fn spec(&self) -> RunSpec {
        RunSpec {
            dataset: self.dataset.clone(),
            model: self.model.clone(),
            epochs: self.epochs,
            pretrain: self.pretrain,
            interventions: self.interventions.clone(),
            alpha: self.alpha,
            lambda: self.lambda,
            seed: self.seed,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            snapshot_size: self.snapshot_size,
        }
    }
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Log of the run under test
    pub log_a: PathBuf,
    /// Log of the reference run
    pub log_b: PathBuf,
    /// Accuracy threshold for epochs-to-threshold (default: final accuracy of B)
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Write the comparison as JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write per-epoch accuracies as CSV for plotting
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// JSON server config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for session logs and checkpoints (overrides the config file)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Serve(a) => cmd_serve(&a),
    }
}

struct FileObserver {
    log: LogWriter,
    snapshots: PathBuf,
    error: Option<String>,
    commits: u64,
}

impl FileObserver {
    fn note(&mut self, r: Result<(), String>) {
        if let (Err(e), None) = (r, &self.error) {
            self.error = Some(e);
        }
    }
}

impl Observer for FileObserver {
    fn on_epoch(&mut self, record: &EpochRecord) {
        let r = self.log.record(record).map_err(|e| e.to_string());
        self.note(r);
        eprintln!(
            "epoch {:>3}  l_ce {:.4}  l_human {:.4}  l_global {:.4}  val_acc {:.4}",
            record.epoch, record.l_ce, record.l_human, record.l_global, record.val_acc
        );
    }

    fn on_pause(&mut self, snapshot: &LatentSnapshot) {
        let path = self.snapshots.join(format!("epoch_{:03}.json", snapshot.epoch));
        let r = serde_json::to_vec(snapshot)
            .map_err(|e| e.to_string())
            .and_then(|b| fs::write(&path, b).map_err(|e| format!("{}: {e}", path.display())));
        self.note(r);
    }

    fn on_commit(&mut self, layout: &TargetLayout) {
        self.commits += 1;
        eprintln!("committed layout {} ({})", layout.layout_id, layout.source);
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> io::Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value).map_err(io::Error::from)?)
}

pub fn cmd_train(args: &TrainArgs) -> i32 {
    let (config, dataset) = match args.spec().headless() {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let out = &args.out;
    let prepared = fs::create_dir_all(out.join("snapshots"))
        .and_then(|_| write_json(&out.join("config.json"), &config))
        .and_then(|_| LogWriter::create(&out.join("log.jsonl"), &config).map_err(io::Error::other));
    let log = match prepared {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: cannot write to {}: {e}", out.display());
            return 1;
        }
    };
    let mut source: Box<dyn EditSource> = match &config.mode {
        Mode::Scripted { strategy } => Box::new(ScriptedSource(strategy.clone())),
        _ => Box::new(SkipAll),
    };
    let mut session = match Session::new(config, dataset, Box::new(SystemClock::new())) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let mut observer = FileObserver { log, snapshots: out.join("snapshots"), error: None, commits: 0 };
    let result = drive(&mut session, source.as_mut(), &mut observer);
    if let Some(summary) = &session.log().summary {
        if let Err(e) = observer.log.summary(summary) {
            observer.error.get_or_insert(e.to_string());
        }
    }
    if let Err(e) =
        save_checkpoint(&out.join("checkpoint.bin"), session.backbone(), session.projector(), session.optimizer())
    {
        observer.error.get_or_insert(e.to_string());
    }
    if let Err(e) = result {
        eprintln!("training failed: {}", session.failure().unwrap_or_else(|| e.to_string()));
        return 1;
    }
    if let Some(e) = observer.error {
        eprintln!("error: {e}");
        return 1;
    }
    let s = session.log().summary.clone().expect("finished sessions have a summary");
    println!(
        "finished {} epochs: final val_acc {:.4} (best {:.4} at epoch {}), {} layouts committed, output in {}",
        s.epochs_completed,
        s.final_val_acc,
        s.best_val_acc,
        s.best_epoch,
        observer.commits,
        out.display()
    );
    0
}

pub fn cmd_compare(args: &CompareArgs) -> i32 {
    let load = |p: &Path| read_log(p).map_err(|e| format!("{}: {e}", p.display()));
    let (a, b) = match (load(&args.log_a), load(&args.log_b)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let c = match compare(&a, &b, args.threshold) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    println!("{c}");
    if let Some(path) = &args.out {
        if let Err(e) = write_json(path, &c) {
            eprintln!("error: {}: {e}", path.display());
            return 1;
        }
    }
    if let Some(path) = &args.csv {
        let mut text = String::from("epoch,acc_a,acc_b,delta\n");
        for d in &c.epochs {
            text.push_str(&format!("{},{},{},{}\n", d.epoch, d.acc_a, d.acc_b, d.delta));
        }
        if let Err(e) = fs::write(path, text) {
            eprintln!("error: {}: {e}", path.display());
            return 1;
        }
    }
    0
}

pub fn cmd_serve(args: &ServeArgs) -> i32 {
    let mut config = match &args.config {
        Some(path) => match fs::read(path)
            .map_err(|e| e.to_string())
            .and_then(|b| serde_json::from_slice::<ServerConfig>(&b).map_err(|e| e.to_string()))
        {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                return 2;
            }
        },
        None => ServerConfig::default(),
    };
    if args.out.is_some() {
        config.out_dir = args.out.clone();
    }
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let bind = args.bind;
    let result = runtime.block_on(async move {
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        let listener = tokio::net::TcpListener::bind(bind).await?;
        eprintln!("listening on {}", listener.local_addr()?);
        crate::server::serve_on(listener, crate::server::AppState::new(config), shutdown).await
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {bind}: {e}");
            1
        }
    }
}
