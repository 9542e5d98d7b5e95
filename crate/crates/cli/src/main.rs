//! `meshwa`: deploy a manifest, invoke exports, benchmark, inspect.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 trap, 3 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use meshwa_core::bench::{
    emit_report, run_inproc, run_process_baseline, BaselineConfig, MeshVariant, Topology, WorkerCommand,
    WorkloadSpec,
};
use meshwa_core::runtime::{LoadError, NativeCatalog, Runtime, RuntimeConfig};
use meshwa_core::xcall::{CallError, NativeCall, CALL_CSV_HEADER};
use meshwa_core::{parse_manifest, validate_manifest, verify_provenance, Manifest};

const EXIT_VALIDATION: u8 = 1;
const EXIT_TRAP: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "meshwa", version, about = "Single-address-space service runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load every service in a manifest and invoke one export once.
    Run(RunArgs),
    /// Benchmark a synthetic service graph in-process and, optionally,
    /// as one process per service behind sidecar forwarders.
    Bench(BenchArgs),
    /// Load a manifest and print the runtime state as JSON.
    Inspect {
        manifest: PathBuf,
    },
    #[command(hide = true)]
    Worker {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    manifest: PathBuf,
    #[arg(long)]
    service: String,
    #[arg(long)]
    export: String,
    /// Comma-separated integer arguments.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    args: Vec<i64>,
    /// Write the call records of the run as CSV.
    #[arg(long)]
    calls: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MeshArg {
    None,
    Intercept,
    Elided,
}

#[derive(Args)]
struct BenchArgs {
    manifest: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..), conflicts_with = "fanout")]
    chain: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    fanout: Option<u64>,
    /// Payload size in bytes.
    #[arg(long, default_value_t = 64)]
    payload: usize,
    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
    iters: u64,
    /// Warmup iterations; defaults to a tenth of --iters, at most 1000.
    #[arg(long)]
    warmup: Option<u64>,
    /// Busy-work per hop in nanoseconds.
    #[arg(long, default_value_t = 0)]
    spin: u64,
    /// Mesh policy on every in-process edge.
    #[arg(long, value_enum, default_value_t = MeshArg::None)]
    mesh: MeshArg,
    /// Also run the process-per-service baseline.
    #[arg(long)]
    baseline: bool,
    /// Run the baseline without sidecar forwarders.
    #[arg(long, requires = "baseline")]
    no_sidecar: bool,
    #[arg(long, default_value = "meshwa-bench.csv")]
    out: PathBuf,
}

/// Native services this binary can bind to `native` manifest entries.
fn builtin_natives() -> NativeCatalog {
    fn echo(cx: &mut NativeCall<'_>) -> Result<Option<i64>, CallError> {
        let bytes = cx.payload_bytes()?;
        cx.write_payload(0, &bytes)?;
        Ok(Some(cx.args().first().copied().unwrap_or(bytes.len() as i64)))
    }
    fn tap(cx: &mut NativeCall<'_>) -> Result<Option<i64>, CallError> {
        Ok(Some(cx.payload_bytes()?.len() as i64))
    }
    NativeCatalog::new()
        .with("echo", &["echo", "main"], echo)
        .with("tap", &[meshwa_core::mesh::PROXY_EXPORT], tap)
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

fn load_manifest(path: &Path) -> Result<Manifest, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::new(EXIT_IO, format!("cannot read {}: {e}", path.display())))?;
    parse_manifest(&text).map_err(|e| Failure::new(EXIT_VALIDATION, format!("{}: {e}", path.display())))
}

fn check_manifest(m: &Manifest) -> Result<(), Failure> {
    let violations = validate_manifest(m);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Failure::new(EXIT_VALIDATION, list.join("\n")));
    }
    for s in &m.services {
        if !verify_provenance(s, &m.allowlist) {
            return Err(Failure::new(
                EXIT_VALIDATION,
                format!("service {:?}: toolchain {:?} is not on the allowlist", s.name, s.toolchain),
            ));
        }
    }
    Ok(())
}

fn deploy(path: &Path) -> Result<Runtime, Failure> {
    let manifest = load_manifest(path)?;
    check_manifest(&manifest)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Runtime::deploy(&manifest, base, &builtin_natives(), RuntimeConfig::default()).map_err(|e| {
        let code = match e {
            LoadError::Io { .. } => EXIT_IO,
            _ => EXIT_VALIDATION,
        };
        Failure::new(code, e.to_string())
    })
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let rt = deploy(&a.manifest)?;
    rt.set_recording(a.calls.is_some());
    let result = rt.invoke_export(&a.service, &a.export, &a.args);
    if let Some(path) = &a.calls {
        let mut csv = format!("{CALL_CSV_HEADER}\n");
        for r in rt.take_call_records() {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        std::fs::write(path, csv)
            .map_err(|e| Failure::new(EXIT_IO, format!("cannot write {}: {e}", path.display())))?;
    }
    match result {
        Ok(Some(v)) => {
            println!("{v}");
            Ok(())
        }
        Ok(None) => Ok(()),
        Err(CallError::CalleeTrapped(k)) => Err(Failure::new(
            EXIT_TRAP,
            format!("{}.{} trapped: {}", a.service, a.export, k.name()),
        )),
        Err(e) => Err(Failure::new(EXIT_VALIDATION, e.to_string())),
    }
}

fn cmd_bench(a: BenchArgs) -> Result<(), Failure> {
    let manifest = load_manifest(&a.manifest)?;
    check_manifest(&manifest)?;
    let topology = match (a.chain, a.fanout) {
        (_, Some(w)) => Topology::FanOut { width: w as usize },
        (Some(n), None) => Topology::Chain { length: n as usize },
        (None, None) => Topology::Chain { length: 4 },
    };
    let mut spec = WorkloadSpec::new(topology, a.payload, a.iters);
    if let Some(w) = a.warmup {
        spec.warmup_iterations = w;
    }
    spec.compute_spin_ns = a.spin;
    let mesh = match a.mesh {
        MeshArg::None => MeshVariant::None,
        MeshArg::Intercept => MeshVariant::Intercept,
        MeshArg::Elided => MeshVariant::Elided { after: 1 },
    };
    let bench_err = |e: meshwa_core::bench::BenchError| {
        let code = match e {
            meshwa_core::bench::BenchError::Io(_) => EXIT_IO,
            _ => EXIT_VALIDATION,
        };
        Failure::new(code, e.to_string())
    };
    let mut reports = vec![run_inproc(&spec, mesh).map_err(bench_err)?];
    if a.baseline {
        let exe = std::env::current_exe()
            .map_err(|e| Failure::new(EXIT_IO, format!("cannot locate own executable: {e}")))?;
        let cfg = BaselineConfig {
            sidecar: !a.no_sidecar,
            worker: WorkerCommand::with_prefix(exe, &["worker"]),
            fault: None,
        };
        reports.push(run_process_baseline(&spec, &cfg).map_err(bench_err)?);
    }
    emit_report(&reports, &a.out).map_err(bench_err)
}

fn cmd_inspect(manifest: &Path) -> Result<(), Failure> {
    let rt = deploy(manifest)?;
    let text = serde_json::to_string_pretty(&rt.inspect()).expect("JSON values serialize");
    println!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Inspect { manifest } => cmd_inspect(&manifest),
        Command::Worker { args } => {
            return ExitCode::from(meshwa_core::bench::worker::worker_main(args) as u8);
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("meshwa: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
