//! Teleoperation wire protocol, session transcripts and the server side of
//! a remote-expert collection session.
//!
//! Every message travels as one length-delimited text frame:
//!
//! ```text
//! <byte length of json>:<json>\n
//! ```
//!
//! The JSON object carries a `type` tag (`hello`, `config`, `frame_update`,
//! `control_input`, `pause`, `resume`, `end`). A session opens with the
//! client's `hello` listing the protocol versions it speaks; the server
//! answers with its own `hello` naming the chosen version, then `config`.
//! The client streams `control_input` messages addressed to the tick it
//! expects next, and the server sends one `frame_update` per committed
//! frame with strictly increasing `tick`.

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::collect::{Agent, CollectJob, Collector};
use crate::dataset::{ControlMode, Dataset, EndReason, EtaSchedule, Strategy, Threshold};
use crate::error::{Error, Result};
use crate::expert::{ControlMailbox, RemoteExpert};
use crate::policy::{Action, Command};
use crate::sim::{InfractionKind, Pose, TrackDef};

pub const PROTOCOL_VERSION: u32 = 1;
pub const TRANSCRIPT_FORMAT: &str = "uail-teleop-transcript";
pub const TRANSCRIPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Client,
    Server,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub role: Role,
    /// Versions the sender speaks; the server's reply lists exactly one.
    pub versions: Vec<u32>,
    pub session: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub session: String,
    pub version: u32,
    pub strategy: Strategy,
    pub budget: usize,
    /// Nominal sim rate; 0 means as fast as inputs allow.
    pub tick_hz: f64,
    pub hold_budget: u32,
    pub eta: EtaSchedule,
    /// Geometry of every track the session may use, keyed by `id`.
    pub tracks: Vec<TrackDef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameUpdate {
    /// Session-wide frame counter.
    pub tick: u64,
    pub traj: u64,
    pub traj_tick: u64,
    pub track: String,
    pub pose: Pose,
    pub speed: f64,
    pub command: Command,
    pub combined_u: Option<f64>,
    pub window_sum: Option<f64>,
    pub eta: Threshold,
    pub control_mode: ControlMode,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub manual_override: bool,
    pub infractions: Vec<InfractionKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlInput {
    /// Session tick this input is meant for.
    pub client_tick: u64,
    pub steer: f64,
    pub throttle: f64,
    /// Manual emergency takeover.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub takeover: bool,
}

impl ControlInput {
    pub fn validate(&self) -> Result<Action> {
        let ok = (-1.0..=1.0).contains(&self.steer) && (0.0..=1.0).contains(&self.throttle);
        if !ok {
            return Err(Error::Protocol(format!(
                "control input out of bounds: steer {} throttle {}",
                self.steer, self.throttle
            )));
        }
        Ok(Action::new(self.steer, self.throttle))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello(Hello),
    Config(SessionConfig),
    FrameUpdate(FrameUpdate),
    ControlInput(ControlInput),
    Pause { reason: String },
    Resume {},
    End { reason: String },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello(_) => "hello",
            Message::Config(_) => "config",
            Message::FrameUpdate(_) => "frame_update",
            Message::ControlInput(_) => "control_input",
            Message::Pause { .. } => "pause",
            Message::Resume {} => "resume",
            Message::End { .. } => "end",
        }
    }
}

/// Encodes one frame: decimal byte length, `:`, the JSON body, newline.
pub fn encode<T: Serialize>(msg: &T) -> Result<String> {
    let body = serde_json::to_string(msg).map_err(|e| Error::Protocol(e.to_string()))?;
    Ok(format!("{}:{}\n", body.len(), body))
}

/// Decodes exactly one frame.
pub fn decode<T: for<'de> Deserialize<'de>>(frame: &str) -> Result<T> {
    let mut r = frame.as_bytes();
    let body = read_frame(&mut r)?.ok_or_else(|| Error::Protocol("empty frame".into()))?;
    if !r.is_empty() {
        return Err(Error::Protocol("trailing bytes after frame".into()));
    }
    serde_json::from_str(&body).map_err(|e| Error::Protocol(e.to_string()))
}

/// Reads the next frame body; `None` at a clean end of input.
pub fn read_frame<R: BufRead>(r: &mut R) -> Result<Option<String>> {
    let mut len = Vec::new();
    let n = r.read_until(b':', &mut len)?;
    if n == 0 {
        return Ok(None);
    }
    if len.pop() != Some(b':') {
        return Err(Error::Protocol("truncated length prefix".into()));
    }
    let len: usize = std::str::from_utf8(&len)
        .ok()
        .filter(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Protocol("bad length prefix".into()))?;
    let mut body = vec![0u8; len + 1];
    r.read_exact(&mut body).map_err(|_| Error::Protocol("truncated frame".into()))?;
    if body.pop() != Some(b'\n') {
        return Err(Error::Protocol("frame not newline-terminated".into()));
    }
    String::from_utf8(body).map(Some).map_err(|_| Error::Protocol("frame is not utf-8".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "s2c")]
    ServerToClient,
    #[serde(rename = "c2s")]
    ClientToServer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptHeader {
    pub format: String,
    pub version: u32,
    pub session: String,
    pub protocol_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptEntry {
    pub seq: u64,
    /// Milliseconds since the session started.
    pub at_ms: u64,
    pub dir: Direction,
    /// Set on client messages the server refused.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub rejected: bool,
    pub msg: Message,
}

/// A session log: a header frame followed by one frame per message, in the
/// same framing as the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub header: TranscriptHeader,
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn new(session: &str) -> Self {
        Self {
            header: TranscriptHeader {
                format: TRANSCRIPT_FORMAT.into(),
                version: TRANSCRIPT_VERSION,
                session: session.into(),
                protocol_version: PROTOCOL_VERSION,
            },
            entries: Vec::new(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(encode(&self.header)?.as_bytes())?;
        for e in &self.entries {
            w.write_all(encode(e)?.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        fn parse<T: for<'de> Deserialize<'de>>(s: String) -> Result<T> {
            serde_json::from_str(&s).map_err(|e| Error::Protocol(e.to_string()))
        }
        let header: TranscriptHeader = parse(read_frame(r)?.ok_or_else(|| Error::Protocol("empty transcript".into()))?)?;
        if header.format != TRANSCRIPT_FORMAT || header.version != TRANSCRIPT_VERSION {
            return Err(Error::Protocol(format!("unsupported transcript {} v{}", header.format, header.version)));
        }
        let mut entries = Vec::new();
        while let Some(s) = read_frame(r)? {
            entries.push(parse(s)?);
        }
        Ok(Self { header, entries })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn frame_updates(&self) -> impl Iterator<Item = &FrameUpdate> {
        self.entries.iter().filter_map(|e| match &e.msg {
            Message::FrameUpdate(f) if e.dir == Direction::ServerToClient => Some(f),
            _ => None,
        })
    }
}

/// Inclusive per-trajectory tick range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub traj: u64,
    pub first: u64,
    pub last: u64,
}

fn intervals(flags: impl Iterator<Item = (u64, u64, bool)>) -> Vec<Interval> {
    let mut out: Vec<Interval> = Vec::new();
    let mut open = false;
    for (traj, tick, on) in flags {
        match out.last_mut() {
            Some(iv) if on && open && iv.traj == traj && iv.last + 1 == tick => iv.last = tick,
            _ if on => out.push(Interval { traj, first: tick, last: tick }),
            _ => {}
        }
        open = on;
    }
    out
}

/// Runs of frames during which a viewer shows the takeover banner.
pub fn banner_intervals(t: &Transcript) -> Vec<Interval> {
    intervals(t.frame_updates().map(|f| (f.traj, f.traj_tick, f.control_mode == ControlMode::Expert)))
}

/// Runs of frames where the switch rule handed control to the expert.
pub fn switched_intervals(ds: &Dataset) -> Vec<Interval> {
    intervals(
        ds.trajectories
            .iter()
            .flat_map(|t| t.frames.iter().map(move |f| (t.id, f.tick, f.uncertainty.is_some_and(|r| r.switched)))),
    )
}

/// One end of a bidirectional message channel.
#[derive(Debug)]
pub struct Link {
    pub tx: Sender<Message>,
    pub rx: Receiver<Message>,
}

/// Two connected in-memory link ends.
pub fn link_pair() -> (Link, Link) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (Link { tx: a_tx, rx: a_rx }, Link { tx: b_tx, rx: b_rx })
}

#[derive(Debug, Clone)]
pub struct SessionParams {
    pub session: String,
    pub token: Option<String>,
    pub tick_hz: f64,
    /// Consecutive ticks an input may be held before the sim pauses.
    pub hold_budget: u32,
    /// How long each tick waits for a fresh input.
    pub tick_timeout: Duration,
    pub handshake_timeout: Duration,
    /// A pause longer than this ends the session.
    pub max_pause: Duration,
}

impl Default for SessionParams {
    fn default() -> Self {
        Self {
            session: "session".into(),
            token: None,
            tick_hz: 0.0,
            hold_budget: 5,
            tick_timeout: Duration::from_millis(500),
            handshake_timeout: Duration::from_secs(30),
            max_pause: Duration::from_secs(120),
        }
    }
}

#[derive(Debug)]
pub struct SessionOutcome {
    pub dataset: Dataset,
    pub transcript: Transcript,
    pub end_reason: String,
}

struct Log {
    start: Instant,
    transcript: Mutex<Transcript>,
}

impl Log {
    fn push(&self, dir: Direction, msg: &Message, rejected: bool) {
        let mut t = self.transcript.lock().unwrap();
        let seq = t.entries.len() as u64;
        let at_ms = self.start.elapsed().as_millis() as u64;
        t.entries.push(TranscriptEntry { seq, at_ms, dir, rejected, msg: msg.clone() });
    }
}

fn send(tx: &Sender<Message>, log: &Log, msg: Message) {
    log.push(Direction::ServerToClient, &msg, false);
    // a vanished client shows up on the receiving side
    let _ = tx.send(msg);
}

/// Serves one remote-expert session over `link`: handshake, then collect
/// `job` to its budget with the client as the expert.
pub fn run_session(
    job: CollectJob<'_>,
    agent: Option<&dyn Agent>,
    link: Link,
    params: &SessionParams,
) -> Result<SessionOutcome> {
    let log = Log { start: Instant::now(), transcript: Mutex::new(Transcript::new(&params.session)) };
    let Link { tx, rx } = link;

    let hello = match rx.recv_timeout(params.handshake_timeout) {
        Ok(Message::Hello(h)) => {
            log.push(Direction::ClientToServer, &Message::Hello(h.clone()), false);
            h
        }
        Ok(other) => {
            log.push(Direction::ClientToServer, &other, true);
            send(&tx, &log, Message::End { reason: format!("expected hello, got {}", other.kind()) });
            return Err(Error::Protocol(format!("expected hello, got {}", other.kind())));
        }
        Err(_) => return Err(Error::Protocol("no hello from client".into())),
    };
    if params.token.is_some() && hello.token != params.token {
        send(&tx, &log, Message::End { reason: "bad session token".into() });
        return Err(Error::Protocol("bad session token".into()));
    }
    if !hello.versions.contains(&PROTOCOL_VERSION) {
        let reason = format!("no common protocol version (server speaks {PROTOCOL_VERSION})");
        send(&tx, &log, Message::End { reason: reason.clone() });
        return Err(Error::Protocol(reason));
    }
    send(
        &tx,
        &log,
        Message::Hello(Hello {
            role: Role::Server,
            versions: vec![PROTOCOL_VERSION],
            session: params.session.clone(),
            token: None,
        }),
    );
    send(
        &tx,
        &log,
        Message::Config(SessionConfig {
            session: params.session.clone(),
            version: PROTOCOL_VERSION,
            strategy: job.strategy,
            budget: job.budget,
            tick_hz: params.tick_hz,
            hold_budget: params.hold_budget,
            eta: job.params.eta.clone(),
            tracks: job.worlds.iter().map(|w| w.track().def().clone()).collect(),
        }),
    );

    let mailbox = ControlMailbox::new();
    let takeover = AtomicBool::new(false);
    let stop = AtomicBool::new(false);
    let mut expert = RemoteExpert::new(params.session.clone(), Arc::clone(&mailbox), params.hold_budget, params.tick_timeout);
    let eta = job.params.eta.clone();

    std::thread::scope(|scope| {
        let (log_r, mailbox_r, takeover_r, stop_r) = (&log, &mailbox, &takeover, &stop);
        scope.spawn(move || {
            let (log, mailbox, takeover, stop) = (log_r, mailbox_r, takeover_r, stop_r);
            loop {
                match rx.recv_timeout(Duration::from_millis(20)) {
                    Ok(Message::ControlInput(c)) => match c.validate() {
                        Ok(a) => {
                            log.push(Direction::ClientToServer, &Message::ControlInput(c), false);
                            takeover.store(c.takeover, Ordering::SeqCst);
                            mailbox.post_for(c.client_tick, a);
                        }
                        Err(_) => log.push(Direction::ClientToServer, &Message::ControlInput(c), true),
                    },
                    Ok(m @ Message::End { .. }) => {
                        log.push(Direction::ClientToServer, &m, false);
                        break;
                    }
                    Ok(m) => log.push(Direction::ClientToServer, &m, true),
                    Err(RecvTimeoutError::Timeout) if !stop.load(Ordering::SeqCst) => {}
                    Err(_) => break,
                }
            }
            mailbox.close();
        });

        let result = serve_ticks(job, agent, &mut expert, &tx, &log, &eta, &takeover, params);
        let reason = match &result {
            Ok((_, r)) => r.clone(),
            Err(e) => e.to_string(),
        };
        send(&tx, &log, Message::End { reason: reason.clone() });
        // give the client a moment to say goodbye, then stop listening
        let deadline = Instant::now() + Duration::from_secs(2);
        while !mailbox.is_closed() && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(5));
        }
        stop.store(true, Ordering::SeqCst);
        let transcript = || log.transcript.lock().unwrap().clone();
        result.map(|(dataset, end_reason)| SessionOutcome { dataset, transcript: transcript(), end_reason })
    })
}

#[allow(clippy::too_many_arguments)]
fn serve_ticks(
    job: CollectJob<'_>,
    agent: Option<&dyn Agent>,
    expert: &mut RemoteExpert,
    tx: &Sender<Message>,
    log: &Log,
    eta: &EtaSchedule,
    takeover: &AtomicBool,
    params: &SessionParams,
) -> Result<(Dataset, String)> {
    let mut c = Collector::new(job, agent)?;
    let period = (params.tick_hz > 0.0).then(|| Duration::from_secs_f64(1.0 / params.tick_hz));
    let mut tick = 0u64;
    let mut paused: Option<Instant> = None;
    let mut lost_streak = 0;
    let mut next_due = Instant::now();
    while !c.is_done() {
        expert.expect_tick(tick);
        c.set_manual_override(takeover.load(Ordering::SeqCst));
        let traj = c.current_traj();
        match c.tick(expert) {
            Ok(out) => {
                lost_streak = 0;
                if paused.take().is_some() {
                    expert.resume();
                    send(tx, log, Message::Resume {});
                }
                let f = &out.frame;
                send(
                    tx,
                    log,
                    Message::FrameUpdate(FrameUpdate {
                        tick,
                        traj: out.traj,
                        traj_tick: f.tick,
                        track: c.job().worlds[out.world].track().id().to_string(),
                        pose: f.pose,
                        speed: f.speed,
                        command: f.obs.command,
                        combined_u: f.uncertainty.map(|r| r.combined),
                        window_sum: f.uncertainty.map(|r| r.window_sum),
                        eta: Threshold(eta.for_command(f.obs.command)),
                        control_mode: f.control_mode,
                        manual_override: f.manual_override,
                        infractions: f.infraction.into_iter().collect(),
                    }),
                );
                tick += 1;
                if let Some(p) = period {
                    next_due += p;
                    if let Some(d) = next_due.checked_duration_since(Instant::now()) {
                        std::thread::sleep(d);
                    }
                }
            }
            Err(Error::Paused(reason)) => {
                if !expert.is_live() {
                    return Ok((c.finish_with(EndReason::Disconnected), format!("client disconnected during trajectory {traj}")));
                }
                match paused {
                    None => {
                        paused = Some(Instant::now());
                        send(tx, log, Message::Pause { reason });
                    }
                    Some(since) if since.elapsed() > params.max_pause => {
                        return Ok((c.finish_with(EndReason::Disconnected), "pause exceeded limit".into()));
                    }
                    Some(_) => {}
                }
                next_due = Instant::now();
            }
            Err(Error::ExpertLost(_)) if lost_streak < 100 => lost_streak += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((c.finish(), "budget reached".into()))
}

/// Lockstep scripted client: sends one input per expected tick, each
/// computed from the latest frame update. Returns every message received.
pub fn run_scripted_client(
    link: Link,
    session: &str,
    token: Option<String>,
    mut input: impl FnMut(u64, Option<&FrameUpdate>) -> ControlInput,
) -> Result<Vec<Message>> {
    let Link { tx, rx } = link;
    let lost = |_| Error::Protocol("server went away".into());
    tx.send(Message::Hello(Hello {
        role: Role::Client,
        versions: vec![PROTOCOL_VERSION],
        session: session.into(),
        token,
    }))
    .map_err(lost)?;
    let mut got = Vec::new();
    let mut started = false;
    while let Ok(m) = rx.recv() {
        match &m {
            Message::Config(_) if !started => {
                started = true;
                tx.send(Message::ControlInput(input(0, None))).map_err(lost)?;
            }
            Message::FrameUpdate(f) => {
                tx.send(Message::ControlInput(input(f.tick + 1, Some(f)))).map_err(lost)?;
            }
            Message::End { .. } => {
                got.push(m);
                let _ = tx.send(Message::End { reason: "client done".into() });
                return Ok(got);
            }
            _ => {}
        }
        got.push(m);
    }
    Err(Error::Protocol("server closed without end".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collect::{CollectParams, ScriptedAgent};
    use crate::sim::{SimParams, Track, World};

    fn oval() -> Vec<World> {
        vec![World::new(Arc::new(Track::oval("oval", 60.0, Default::default()).unwrap()), SimParams::default())]
    }

    fn job<'a>(worlds: &'a [World], strategy: Strategy, budget: usize, eta: f64) -> CollectJob<'a> {
        CollectJob {
            strategy,
            worlds,
            budget,
            seed: 3,
            params: CollectParams { eta: EtaSchedule::constant(eta), max_episode_ticks: 40, ..CollectParams::default() },
            perturbation: None,
            config_digest: "test".into(),
            uncertainty: None,
            alpha: 0.6,
            window: 3,
        }
    }

    fn params() -> SessionParams {
        SessionParams { tick_timeout: Duration::from_secs(5), ..SessionParams::default() }
    }

    fn steady(tick: u64, _: Option<&FrameUpdate>) -> ControlInput {
        ControlInput { client_tick: tick, steer: ((tick % 7) as f64 - 3.0) / 10.0, throttle: 0.4, takeover: false }
    }

    fn scripted() -> ScriptedAgent {
        let scores = (0..40).map(|t| if (10..14).contains(&t) || (25..27).contains(&t) { 1.0 } else { 0.0 }).collect();
        ScriptedAgent { scores, action: Action::new(0.0, 0.3) }
    }

    fn serve(worlds: &[World], agent: &ScriptedAgent, budget: usize) -> (SessionOutcome, Vec<Message>) {
        let (server, client) = link_pair();
        let h = std::thread::spawn(move || run_scripted_client(client, "t", None, steady).unwrap());
        let out = run_session(job(worlds, Strategy::Uail, budget, 1.5), Some(agent), server, &params()).unwrap();
        (out, h.join().unwrap())
    }

    fn all_messages() -> Vec<Message> {
        vec![
            Message::Hello(Hello { role: Role::Client, versions: vec![1, 2], session: "s".into(), token: Some("k".into()) }),
            Message::Config(SessionConfig {
                session: "s".into(),
                version: 1,
                strategy: Strategy::Uail,
                budget: 10,
                tick_hz: 20.0,
                hold_budget: 3,
                eta: EtaSchedule { global: Threshold::INF, per_command: [(Command::Left, Threshold(0.5))].into() },
                tracks: vec![oval()[0].track().def().clone()],
            }),
            Message::FrameUpdate(FrameUpdate {
                tick: 4,
                traj: 1,
                traj_tick: 2,
                track: "oval".into(),
                pose: Pose { x: 1.5, y: -0.25, heading: 0.1 },
                speed: 3.0,
                command: Command::Right,
                combined_u: Some(0.123456789),
                window_sum: None,
                eta: Threshold::INF,
                control_mode: ControlMode::Expert,
                manual_override: true,
                infractions: vec![InfractionKind::Collision],
            }),
            Message::ControlInput(ControlInput { client_tick: 5, steer: -1.0, throttle: 1.0, takeover: true }),
            Message::Pause { reason: "no input".into() },
            Message::Resume {},
            Message::End { reason: "done".into() },
        ]
    }

    #[test]
    fn every_message_round_trips() {
        for m in all_messages() {
            let wire = encode(&m).unwrap();
            let back: Message = decode(&wire).unwrap();
            assert_eq!(back, m, "{wire}");
            assert_eq!(encode(&back).unwrap(), wire);
        }
    }

    #[test]
    fn framing_rejects_damage() {
        let wire = encode(&Message::Resume {}).unwrap();
        assert!(decode::<Message>(&wire[..wire.len() - 1]).is_err());
        assert!(decode::<Message>(&format!("{wire}x")).is_err());
        assert!(decode::<Message>(&wire.replacen(':', "x:", 1)).is_err());
        assert!(decode::<Message>("17:{\"type\":\"bogus\"}\n").is_err());
        let mut two = format!("{wire}{wire}");
        two.push_str("");
        let mut r = two.as_bytes();
        assert!(read_frame(&mut r).unwrap().is_some());
        assert!(read_frame(&mut r).unwrap().is_some());
        assert!(read_frame(&mut r).unwrap().is_none());
    }

    #[test]
    fn input_bounds_are_checked() {
        let c = |s, t| ControlInput { client_tick: 0, steer: s, throttle: t, takeover: false };
        assert!(c(1.0, 0.0).validate().is_ok());
        assert!(c(1.01, 0.5).validate().is_err());
        assert!(c(0.0, -0.1).validate().is_err());
        assert!(c(f64::NAN, 0.5).validate().is_err());
    }

    #[test]
    fn transcript_round_trips() {
        let mut t = Transcript::new("s");
        for (i, m) in all_messages().into_iter().enumerate() {
            let dir = if i % 2 == 0 { Direction::ClientToServer } else { Direction::ServerToClient };
            t.entries.push(TranscriptEntry { seq: i as u64, at_ms: 7 * i as u64, dir, rejected: i == 3, msg: m });
        }
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(Transcript::read_from(&mut buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn session_banner_matches_switches() {
        let worlds = oval();
        let agent = scripted();
        let (out, received) = serve(&worlds, &agent, 60);
        assert_eq!(out.dataset.n_frames(), 60);
        assert_eq!(out.end_reason, "budget reached");
        let switched = switched_intervals(&out.dataset);
        assert!(!switched.is_empty());
        assert_eq!(banner_intervals(&out.transcript), switched);

        let ticks: Vec<u64> = out.transcript.frame_updates().map(|f| f.tick).collect();
        assert!(ticks.windows(2).all(|w| w[1] > w[0]));
        let seen_by_client = received.iter().filter(|m| matches!(m, Message::FrameUpdate(_))).count();
        assert_eq!(seen_by_client, 60);

        // expert frames executed exactly the input addressed to their session tick
        for (f, u) in out.dataset.frames().zip(out.transcript.frame_updates()) {
            if f.control_mode == ControlMode::Expert {
                let want = steady(u.tick, None);
                assert_eq!(f.action, Action::new(want.steer, want.throttle));
                assert_eq!(f.label_source, crate::dataset::LabelSource::HumanInControl);
            } else {
                assert_eq!(f.label, None);
            }
        }
    }

    #[test]
    fn identical_inputs_give_identical_datasets() {
        let worlds = oval();
        let agent = scripted();
        let a = serve(&worlds, &agent, 50).0.dataset.to_bytes();
        let b = serve(&worlds, &agent, 50).0.dataset.to_bytes();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_bounds_input_is_rejected_and_held() {
        let worlds = oval();
        let (server, client) = link_pair();
        let h = std::thread::spawn(move || {
            run_scripted_client(client, "t", None, |tick, _| ControlInput {
                client_tick: tick,
                steer: if tick == 3 { 2.0 } else { 0.1 },
                throttle: 0.5,
                takeover: false,
            })
        });
        let p = SessionParams { tick_timeout: Duration::from_millis(200), ..SessionParams::default() };
        let out = run_session(job(&worlds, Strategy::Bc, 8, 1.0), None, server, &p).unwrap();
        h.join().unwrap().unwrap();
        let rejected: Vec<_> = out.transcript.entries.iter().filter(|e| e.rejected).collect();
        assert_eq!(rejected.len(), 1);
        assert!(out.dataset.frames().all(|f| f.action == Action::new(0.1, 0.5)));
    }

    #[test]
    fn disconnect_pauses_and_closes_the_episode() {
        let worlds = oval();
        let (server, client) = link_pair();
        let h = std::thread::spawn(move || {
            let Link { tx, rx } = client;
            tx.send(Message::Hello(Hello { role: Role::Client, versions: vec![1], session: "t".into(), token: None })).unwrap();
            let mut n = 0;
            while let Ok(m) = rx.recv() {
                match m {
                    Message::Config(_) => tx.send(Message::ControlInput(steady(0, None))).unwrap(),
                    Message::Hello(_) => {}
                    Message::FrameUpdate(f) if f.tick < 5 => {
                        tx.send(Message::ControlInput(steady(f.tick + 1, None))).unwrap();
                        n += 1;
                    }
                    _ => break,
                }
            }
            n
        });
        let p = SessionParams { tick_timeout: Duration::from_millis(20), hold_budget: 2, ..SessionParams::default() };
        let out = run_session(job(&worlds, Strategy::Bc, 100, 1.0), None, server, &p).unwrap();
        assert_eq!(h.join().unwrap(), 5);
        let ds = &out.dataset;
        assert!(ds.n_frames() < 100);
        assert_eq!(ds.trajectories.last().unwrap().end, EndReason::Disconnected);
        // six inputs, then at most the hold budget of repeats
        assert!((6..=8).contains(&ds.n_frames()), "{}", ds.n_frames());
    }

    #[test]
    fn version_mismatch_ends_the_session() {
        let worlds = oval();
        let (server, client) = link_pair();
        client
            .tx
            .send(Message::Hello(Hello { role: Role::Client, versions: vec![99], session: "t".into(), token: None }))
            .unwrap();
        let r = run_session(job(&worlds, Strategy::Bc, 5, 1.0), None, server, &params());
        assert!(matches!(r, Err(Error::Protocol(_))));
        assert!(matches!(client.rx.recv().unwrap(), Message::End { .. }));
    }

    #[test]
    fn manual_takeover_is_flagged_and_excluded_from_training() {
        let worlds = oval();
        let agent = ScriptedAgent { scores: vec![0.0; 40], action: Action::new(0.0, 0.3) };
        let (server, client) = link_pair();
        let h = std::thread::spawn(move || {
            run_scripted_client(client, "t", None, |tick, _| ControlInput {
                client_tick: tick,
                steer: 0.0,
                throttle: 0.5,
                takeover: tick >= 5,
            })
        });
        // takeover applies from the first tick after it arrives
        let p = SessionParams { tick_hz: 200.0, ..params() };
        let out = run_session(job(&worlds, Strategy::Uail, 30, 1e9), Some(&agent), server, &p).unwrap();
        h.join().unwrap().unwrap();
        let flagged = out.dataset.frames().filter(|f| f.manual_override).count();
        assert!(flagged >= 10, "{flagged}");
        assert!(out.dataset.frames().filter(|f| f.manual_override).all(|f| f.control_mode == ControlMode::Expert));
        assert!(switched_intervals(&out.dataset).is_empty());
        assert!(out.dataset.training_examples().is_empty());
    }
}
