//! Plumbing shared by the `uail` binary and its tests: run directories with
//! manifests, exit codes, and the WebSocket transport for teleop sessions.

use std::io::ErrorKind;
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, TryRecvError};
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tungstenite::{Message as WsMessage, WebSocket};
use uail_core::config::sha256_hex;
use uail_core::teleop::{decode, encode, Link, Message};
use uail_core::{Error, Result};

pub const MANIFEST_FORMAT: &str = "uail-run";
pub const MANIFEST_VERSION: u32 = 1;

pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const EXPERT: i32 = 3;
    pub const DIVERGENCE: i32 = 4;
    pub const DEGENERATE_ROC: i32 = 5;
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) => exit::CONFIG,
        Error::ExpertLost(_) | Error::Paused(_) | Error::Protocol(_) => exit::EXPERT,
        Error::TrainingDiverged { .. } => exit::DIVERGENCE,
        Error::UndefinedRoc(_) => exit::DEGENERATE_ROC,
        _ => exit::OTHER,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Inventory of one run directory. Holds nothing time-dependent, so a
/// repeated run produces the same manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub config_digest: String,
    pub args: serde_json::Value,
    pub seeds: Vec<u64>,
    pub files: Vec<FileEntry>,
}

pub struct RunDir {
    pub path: PathBuf,
    manifest: Manifest,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

impl RunDir {
    /// Creates `<out>/<digest prefix>-<unix millis>`, or exactly `fixed`.
    pub fn create(out: &Path, fixed: Option<&Path>, digest: &str, command: &str, args: serde_json::Value) -> Result<Self> {
        let path = match fixed {
            Some(p) => p.to_path_buf(),
            None => {
                let ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
                let base = out.join(format!("{}-{ms}", &digest[..12.min(digest.len())]));
                let mut p = base.clone();
                let mut i = 1;
                while p.exists() {
                    p = PathBuf::from(format!("{}-{i}", base.display()));
                    i += 1;
                }
                p
            }
        };
        std::fs::create_dir_all(&path).map_err(|e| io_err(&path, e))?;
        Ok(Self {
            path,
            manifest: Manifest {
                format: MANIFEST_FORMAT.into(),
                version: MANIFEST_VERSION,
                command: command.into(),
                config_digest: digest.into(),
                args,
                seeds: Vec::new(),
                files: Vec::new(),
            },
        })
    }

    pub fn add_seeds(&mut self, seeds: &[u64]) {
        self.manifest.seeds.extend_from_slice(seeds);
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path.join(name);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        std::fs::write(&p, bytes).map_err(|e| io_err(&p, e))?;
        self.manifest.files.retain(|f| f.path != name);
        self.manifest.files.push(FileEntry { path: name.into(), bytes: bytes.len() as u64, sha256: sha256_hex(bytes) });
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidInput(e.to_string()))?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    pub fn finish(mut self) -> Result<(PathBuf, Manifest)> {
        self.manifest.files.sort_by(|a, b| a.path.cmp(&b.path));
        let mut s = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::InvalidInput(e.to_string()))?;
        s.push('\n');
        let p = self.path.join("manifest.json");
        std::fs::write(&p, s).map_err(|e| io_err(&p, e))?;
        Ok((self.path, self.manifest))
    }
}

/// Pumps teleop messages between a WebSocket and an in-process [`Link`].
/// The returned link's receiver closes when the peer goes away; dropping
/// its sender closes the socket.
pub fn bridge(mut ws: WebSocket<TcpStream>) -> Result<(Link, JoinHandle<()>)> {
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(5)))?;
    let (out_tx, out_rx) = mpsc::channel::<Message>();
    let (in_tx, in_rx) = mpsc::channel::<Message>();
    let h = std::thread::spawn(move || {
        let mut closing: Option<std::time::Instant> = None;
        loop {
            if closing.is_some_and(|t| t.elapsed() > Duration::from_secs(2)) {
                return;
            }
            if closing.is_none() {
                loop {
                    match out_rx.try_recv() {
                        Ok(m) => {
                            let text = match encode(&m) {
                                Ok(t) => t,
                                Err(_) => continue,
                            };
                            if ws.send(WsMessage::text(text)).is_err() {
                                return;
                            }
                        }
                        Err(TryRecvError::Empty) => break,
                        Err(TryRecvError::Disconnected) => {
                            closing = Some(std::time::Instant::now());
                            let _ = ws.close(None);
                            break;
                        }
                    }
                }
            }
            match ws.read() {
                Ok(WsMessage::Text(t)) => match decode::<Message>(t.as_str()) {
                    Ok(m) => {
                        let _ = in_tx.send(m);
                    }
                    Err(e) => eprintln!("dropping malformed frame: {e}"),
                },
                Ok(WsMessage::Close(_)) => {
                    let _ = ws.flush();
                }
                Ok(_) => {}
                Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    let _ = ws.flush();
                }
                Err(_) => return,
            }
        }
    });
    Ok((Link { tx: out_tx, rx: in_rx }, h))
}

/// Accepts one WebSocket connection on `listener`.
pub fn accept(listener: &std::net::TcpListener) -> Result<WebSocket<TcpStream>> {
    let (stream, _) = listener.accept()?;
    stream.set_nodelay(true)?;
    tungstenite::accept(stream).map_err(|e| Error::Protocol(e.to_string()))
}

/// Opens a WebSocket client connection to `addr` (host:port).
pub fn connect(addr: &str) -> Result<WebSocket<TcpStream>> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let (ws, _) = tungstenite::client(format!("ws://{addr}/"), stream).map_err(|e| Error::Protocol(e.to_string()))?;
    Ok(ws)
}
