use std::io::{self, BufReader, BufWriter};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use super::worker::{read_frame, write_frame, KIND_REQUEST, KIND_STATS};
use super::{BenchError, BenchReport, PayloadGen, WorkloadSpec};

/// How to start a worker process: `program prefix... <role> <flags>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkerCommand {
    pub program: PathBuf,
    pub prefix: Vec<String>,
}

impl WorkerCommand {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        WorkerCommand {
            program: program.into(),
            prefix: Vec::new(),
        }
    }

    pub fn with_prefix(program: impl Into<PathBuf>, prefix: &[&str]) -> Self {
        WorkerCommand {
            program: program.into(),
            prefix: prefix.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Finds `meshwa-worker` beside the running executable or one
    /// directory up.
    pub fn locate() -> Option<Self> {
        let exe = std::env::current_exe().ok()?;
        let dir = exe.parent()?;
        [dir.join("meshwa-worker"), dir.parent()?.join("meshwa-worker")]
            .into_iter()
            .find(|p| p.is_file())
            .map(WorkerCommand::new)
    }
}

/// Kills one child after a number of measured iterations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FaultInjection {
    /// Index into the spawn order: services in hop order, then sidecars.
    pub child: usize,
    pub after_iterations: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BaselineConfig {
    pub sidecar: bool,
    pub worker: WorkerCommand,
    pub fault: Option<FaultInjection>,
}

impl BaselineConfig {
    pub fn config_name(&self) -> &'static str {
        if self.sidecar {
            "process+sidecar"
        } else {
            "process"
        }
    }
}

/// Spawned children; killed, reaped and cleaned up on drop.
struct Children {
    list: Vec<(String, Child)>,
    dir: PathBuf,
}

impl Drop for Children {
    fn drop(&mut self) {
        for (_, c) in &mut self.list {
            let _ = c.kill();
        }
        for (_, c) in &mut self.list {
            let _ = c.wait();
        }
        let _ = std::fs::remove_dir_all(&self.dir);
    }
}

impl Children {
    fn spawn(&mut self, id: String, worker: &WorkerCommand, args: &[String]) -> Result<(), BenchError> {
        let child = Command::new(&worker.program)
            .args(&worker.prefix)
            .args(args)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| BenchError::SpawnFailure {
                what: id.clone(),
                reason: e.to_string(),
            })?;
        self.list.push((id, child));
        Ok(())
    }

    /// Names the first child found dead, waiting briefly for the exit to
    /// become visible.
    fn crashed(&mut self, cause: io::Error) -> BenchError {
        let deadline = Instant::now() + Duration::from_secs(2);
        loop {
            for (id, c) in &mut self.list {
                if let Ok(Some(_)) = c.try_wait() {
                    return BenchError::ChildCrashed { child: id.clone() };
                }
            }
            if Instant::now() > deadline {
                return BenchError::SocketError(cause.to_string());
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    fn wait_ready(&mut self, sockets: &[PathBuf]) -> Result<(), BenchError> {
        let deadline = Instant::now() + Duration::from_secs(15);
        for path in sockets {
            loop {
                if path.exists() && UnixStream::connect(path).is_ok() {
                    break;
                }
                for (id, c) in &mut self.list {
                    if let Ok(Some(status)) = c.try_wait() {
                        return Err(BenchError::SpawnFailure {
                            what: id.clone(),
                            reason: format!("exited during startup with {status}"),
                        });
                    }
                }
                if Instant::now() > deadline {
                    return Err(BenchError::SpawnFailure {
                        what: path.display().to_string(),
                        reason: "socket never became ready".into(),
                    });
                }
                std::thread::sleep(Duration::from_millis(5));
            }
        }
        Ok(())
    }
}

fn scratch_dir() -> io::Result<PathBuf> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.subsec_nanos())
        .unwrap_or(0);
    let dir = std::env::temp_dir().join(format!(
        "meshwa-{}-{}-{nanos}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

struct Client {
    r: BufReader<UnixStream>,
    w: BufWriter<UnixStream>,
}

impl Client {
    fn connect(path: &Path) -> io::Result<Self> {
        let s = UnixStream::connect(path)?;
        Ok(Client {
            r: BufReader::new(s.try_clone()?),
            w: BufWriter::new(s),
        })
    }

    fn round_trip(&mut self, kind: u8, body: &[u8], buf: &mut Vec<u8>) -> io::Result<()> {
        write_frame(&mut self.w, kind, body)?;
        read_frame(&mut self.r, buf)?;
        Ok(())
    }

    /// (served requests, spin nanoseconds) so far.
    fn stats(&mut self) -> io::Result<(u64, u64)> {
        let mut buf = Vec::new();
        self.round_trip(KIND_STATS, &[], &mut buf)?;
        if buf.len() != 17 {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "short stats frame"));
        }
        let served = u64::from_le_bytes(buf[1..9].try_into().expect("8 bytes"));
        let spun = u64::from_le_bytes(buf[9..17].try_into().expect("8 bytes"));
        Ok((served, spun))
    }
}

/// Runs the workload with one OS process per hop, plus one forwarding
/// sidecar per hop when configured. Requests travel over Unix sockets.
pub fn run_process_baseline(spec: &WorkloadSpec, cfg: &BaselineConfig) -> Result<BenchReport, BenchError> {
    spec.validate()?;
    let hops = spec.topology.hops();
    let mut kids = Children {
        list: Vec::new(),
        dir: scratch_dir()?,
    };
    let dir = kids.dir.clone();
    let svc_sock = |name: &str| kids_path(&dir, name, "svc");
    let entry_sock = |name: &str| {
        if cfg.sidecar {
            kids_path(&dir, name, "sidecar")
        } else {
            svc_sock(name)
        }
    };
    let mut sockets = Vec::new();
    let mut spawns = Vec::new();
    for h in &hops {
        let mut args = vec!["service".to_string(), "--listen".into(), path_arg(&svc_sock(&h.name))];
        for n in &h.next {
            args.push("--next".into());
            args.push(path_arg(&entry_sock(n)));
        }
        args.push("--spin".into());
        args.push(spec.compute_spin_ns.to_string());
        spawns.push((format!("service:{}", h.name), args));
        sockets.push(svc_sock(&h.name));
    }
    if cfg.sidecar {
        for h in &hops {
            let args = vec![
                "sidecar".to_string(),
                "--listen".into(),
                path_arg(&entry_sock(&h.name)),
                "--upstream".into(),
                path_arg(&svc_sock(&h.name)),
            ];
            spawns.push((format!("sidecar:{}", h.name), args));
            sockets.push(entry_sock(&h.name));
        }
    }
    let entry = entry_sock(&hops[0].name);
    for (id, args) in spawns {
        kids.spawn(id, &cfg.worker, &args)?;
    }
    kids.wait_ready(&sockets)?;

    let mut client = Client::connect(&entry).map_err(|e| BenchError::SocketError(e.to_string()))?;
    let mut probes = Vec::new();
    for h in &hops {
        probes.push(Client::connect(&svc_sock(&h.name)).map_err(|e| BenchError::SocketError(e.to_string()))?);
    }
    let mut gen = PayloadGen::new(spec.seed, spec.payload_bytes);
    let mut buf = Vec::new();
    let mut latencies = Vec::with_capacity(spec.iterations as usize);

    for i in 0..spec.warmup_iterations {
        let p = gen.next_payload();
        if let Err(e) = client.round_trip(KIND_REQUEST, &p, &mut buf) {
            return Err(kids.crashed(e));
        }
        if buf[1..] != p[..] {
            return Err(BenchError::ResponseMismatch(i));
        }
    }
    let mut before = Vec::new();
    for p in &mut probes {
        match p.stats() {
            Ok(s) => before.push(s),
            Err(e) => return Err(kids.crashed(e)),
        }
    }
    let start = Instant::now();
    for i in 0..spec.iterations {
        if let Some(f) = &cfg.fault {
            if f.after_iterations == i {
                if let Some((_, c)) = kids.list.get_mut(f.child) {
                    let _ = c.kill();
                    let _ = c.wait();
                }
            }
        }
        let p = gen.next_payload();
        let t0 = Instant::now();
        if let Err(e) = client.round_trip(KIND_REQUEST, &p, &mut buf) {
            return Err(kids.crashed(e));
        }
        latencies.push(t0.elapsed().as_nanos() as u64);
        if buf[1..] != p[..] {
            return Err(BenchError::ResponseMismatch(spec.warmup_iterations + i));
        }
    }
    let total = start.elapsed().as_nanos() as u64;
    let mut hop_requests = Vec::new();
    let mut spun = 0;
    for ((h, p), (served0, spun0)) in hops.iter().zip(&mut probes).zip(before) {
        match p.stats() {
            Ok((served, s)) => {
                hop_requests.push((h.name.clone(), served - served0));
                spun += s - spun0;
            }
            Err(e) => return Err(kids.crashed(e)),
        }
    }
    let mut report = BenchReport::build(cfg.config_name(), spec, latencies, total, spun, hop_requests)?;
    report.processes = kids.list.len() as u32;
    Ok(report)
}

fn kids_path(dir: &Path, name: &str, role: &str) -> PathBuf {
    dir.join(format!("{name}.{role}.sock"))
}

fn path_arg(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}
