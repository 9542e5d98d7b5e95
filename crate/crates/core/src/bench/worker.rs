//! Child processes of the process-per-service baseline.
//!
//! Frames on every socket are a little-endian `u32` length followed by that
//! many bytes; the first byte of a frame is its kind.
//!
//! ```text
//! service --listen PATH [--next PATH]... [--spin NS]
//! sidecar --listen PATH --upstream PATH
//! ```

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use super::spin;

pub const KIND_REQUEST: u8 = 0;
pub const KIND_STATS: u8 = 1;
pub const KIND_QUIT: u8 = 2;

/// Refuses frames larger than this.
pub const MAX_FRAME: u32 = 64 << 20;

pub fn write_frame(w: &mut impl Write, kind: u8, body: &[u8]) -> io::Result<()> {
    let len = u32::try_from(body.len() + 1).map_err(|_| io::Error::from(io::ErrorKind::InvalidInput))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&[kind])?;
    w.write_all(body)?;
    w.flush()
}

/// Reads one frame into `buf` (kind byte included) and returns its kind.
pub fn read_frame(r: &mut impl Read, buf: &mut Vec<u8>) -> io::Result<u8> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len);
    if len == 0 || len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("bad frame length {len}")));
    }
    buf.resize(len as usize, 0);
    r.read_exact(buf)?;
    Ok(buf[0])
}

struct Conn {
    r: BufReader<UnixStream>,
    w: BufWriter<UnixStream>,
}

impl Conn {
    fn new(s: UnixStream) -> io::Result<Self> {
        Ok(Conn {
            r: BufReader::new(s.try_clone()?),
            w: BufWriter::new(s),
        })
    }

    fn connect(path: &PathBuf) -> io::Result<Self> {
        Self::new(UnixStream::connect(path)?)
    }
}

struct ServiceState {
    next: Vec<PathBuf>,
    spin_ns: u64,
    served: AtomicU64,
    spun_ns: AtomicU64,
}

fn serve_service(state: Arc<ServiceState>, stream: UnixStream) -> io::Result<()> {
    let mut down = Conn::new(stream)?;
    let mut up: Vec<Conn> = Vec::new();
    let mut buf = Vec::new();
    let mut reply = Vec::new();
    loop {
        let kind = match read_frame(&mut down.r, &mut buf) {
            Ok(k) => k,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        match kind {
            KIND_REQUEST => {
                state.served.fetch_add(1, Ordering::Relaxed);
                state.spun_ns.fetch_add(spin(state.spin_ns), Ordering::Relaxed);
                if state.next.is_empty() {
                    write_frame(&mut down.w, KIND_REQUEST, &buf[1..])?;
                    continue;
                }
                if up.is_empty() {
                    for p in &state.next {
                        up.push(Conn::connect(p)?);
                    }
                }
                for c in &mut up {
                    write_frame(&mut c.w, KIND_REQUEST, &buf[1..])?;
                    read_frame(&mut c.r, &mut reply)?;
                }
                write_frame(&mut down.w, KIND_REQUEST, &reply[1..])?;
            }
            KIND_STATS => {
                let mut body = Vec::with_capacity(16);
                body.extend_from_slice(&state.served.load(Ordering::Relaxed).to_le_bytes());
                body.extend_from_slice(&state.spun_ns.load(Ordering::Relaxed).to_le_bytes());
                write_frame(&mut down.w, KIND_STATS, &body)?;
            }
            KIND_QUIT => {
                write_frame(&mut down.w, KIND_QUIT, &[])?;
                std::process::exit(0);
            }
            other => {
                return Err(io::Error::new(io::ErrorKind::InvalidData, format!("unknown frame kind {other}")));
            }
        }
    }
}

/// Copies whole frames between one downstream connection and its own
/// upstream connection.
fn serve_sidecar(upstream: PathBuf, stream: UnixStream) -> io::Result<()> {
    let mut down = Conn::new(stream)?;
    let mut up = Conn::connect(&upstream)?;
    let mut buf = Vec::new();
    loop {
        match read_frame(&mut down.r, &mut buf) {
            Ok(_) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        }
        forward(&mut up.w, &buf)?;
        read_frame(&mut up.r, &mut buf)?;
        forward(&mut down.w, &buf)?;
    }
}

fn forward(w: &mut impl Write, frame: &[u8]) -> io::Result<()> {
    w.write_all(&(frame.len() as u32).to_le_bytes())?;
    w.write_all(frame)?;
    w.flush()
}

/// Exits when the spawning process goes away.
fn watch_parent() {
    let parent = std::os::unix::process::parent_id();
    std::thread::spawn(move || loop {
        std::thread::sleep(Duration::from_millis(200));
        if std::os::unix::process::parent_id() != parent {
            std::process::exit(0);
        }
    });
}

fn usage(msg: &str) -> i32 {
    eprintln!("worker: {msg}");
    eprintln!("usage: service --listen PATH [--next PATH]... [--spin NS] | sidecar --listen PATH --upstream PATH");
    1
}

/// Entry point for a worker process; returns the exit code.
pub fn worker_main<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let mut args = args.into_iter();
    let Some(role) = args.next() else {
        return usage("missing role");
    };
    let mut listen = None;
    let mut next = Vec::new();
    let mut upstream = None;
    let mut spin_ns = 0u64;
    while let Some(flag) = args.next() {
        let Some(value) = args.next() else {
            return usage(&format!("{flag} needs a value"));
        };
        match flag.as_str() {
            "--listen" => listen = Some(PathBuf::from(value)),
            "--next" => next.push(PathBuf::from(value)),
            "--upstream" => upstream = Some(PathBuf::from(value)),
            "--spin" => match value.parse() {
                Ok(v) => spin_ns = v,
                Err(_) => return usage("--spin takes nanoseconds"),
            },
            _ => return usage(&format!("unknown flag {flag}")),
        }
    }
    let Some(listen) = listen else {
        return usage("--listen is required");
    };
    let listener = match UnixListener::bind(&listen) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("worker: bind {}: {e}", listen.display());
            return 3;
        }
    };
    watch_parent();
    match role.as_str() {
        "service" => {
            let state = Arc::new(ServiceState {
                next,
                spin_ns,
                served: AtomicU64::new(0),
                spun_ns: AtomicU64::new(0),
            });
            for s in listener.incoming().flatten() {
                let st = state.clone();
                std::thread::spawn(move || serve_service(st, s));
            }
        }
        "sidecar" => {
            let Some(upstream) = upstream else {
                return usage("sidecar needs --upstream");
            };
            for s in listener.incoming().flatten() {
                let up = upstream.clone();
                std::thread::spawn(move || serve_sidecar(up, s));
            }
        }
        other => return usage(&format!("unknown role {other}")),
    }
    0
}
