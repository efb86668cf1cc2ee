//! Line-oriented control link between a DU (the simulated cell) and a RIC
//! (the agent), so both can run as separate processes.
//!
//! Every message is a single JSON object terminated by `\n`. The field layout
//! is documented in `docs/e2link-protocol.md`. Decoding ignores unknown
//! fields; data messages (`KPM_REPORT`, `POLICY`) must carry strictly
//! increasing step indices in each direction.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{StepOutcome, UeStepStats};
use crate::trainer::{Controller, Environment};
use crate::types::{
    compute_reward, FrameConfig, QosTarget, RewardBreakdown, SleepAction, SliceAllocation, StateObservation,
};

pub const PROTOCOL_VERSION: u32 = 1;

/// Longest accepted line. Anything longer is treated as a malformed peer.
pub const MAX_LINE_BYTES: usize = 16 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireFrame {
    pub mu: u8,
    pub prb_total: u32,
    pub frames_per_step: u32,
}

impl From<&FrameConfig> for WireFrame {
    fn from(f: &FrameConfig) -> Self {
        WireFrame {
            mu: f.mu(),
            prb_total: f.prb_total(),
            frames_per_step: f.frames_per_step(),
        }
    }
}

impl WireFrame {
    pub fn to_frame(self) -> Result<FrameConfig> {
        FrameConfig::new(self.mu, self.prb_total, self.frames_per_step)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireSlice {
    pub slice_id: u32,
    pub q_target_mbps: f64,
    pub d_target_ms: f64,
}

impl From<&QosTarget> for WireSlice {
    fn from(t: &QosTarget) -> Self {
        WireSlice {
            slice_id: t.slice_id,
            q_target_mbps: t.q_target_mbps,
            d_target_ms: t.d_target_ms,
        }
    }
}

impl WireSlice {
    pub fn to_target(self) -> Result<QosTarget> {
        QosTarget::new(self.slice_id, self.q_target_mbps, self.d_target_ms)
    }
}

/// Where the action the DU executed came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySource {
    /// The POLICY answering this step's report.
    Fresh,
    /// The previous policy, reused because the answer was late or the link dropped.
    Repeated,
    /// Always-on fallback (no policy yet, or the grace period ran out).
    Fallback,
}

/// What the DU did during the step that led to a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Applied {
    pub action: SleepAction,
    pub allocation: SliceAllocation,
    pub sleep_ratio: f64,
    pub source: PolicySource,
    #[serde(default)]
    pub ues: Vec<UeStepStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Message {
    #[serde(rename = "HELLO")]
    Hello {
        step: u64,
        version: u32,
        frame: WireFrame,
        slices: Vec<WireSlice>,
    },
    #[serde(rename = "ACK")]
    Ack {
        step: u64,
        accepted: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
    #[serde(rename = "KPM_REPORT")]
    KpmReport {
        step: u64,
        observation: StateObservation,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        applied: Option<Applied>,
    },
    #[serde(rename = "POLICY")]
    Policy {
        step: u64,
        action: SleepAction,
        allocation: SliceAllocation,
    },
    #[serde(rename = "BYE")]
    Bye {
        step: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
}

impl Message {
    pub fn hello(frame: &FrameConfig, slices: &[QosTarget]) -> Self {
        Message::Hello {
            step: 0,
            version: PROTOCOL_VERSION,
            frame: frame.into(),
            slices: slices.iter().map(WireSlice::from).collect(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "HELLO",
            Message::Ack { .. } => "ACK",
            Message::KpmReport { .. } => "KPM_REPORT",
            Message::Policy { .. } => "POLICY",
            Message::Bye { .. } => "BYE",
        }
    }

    pub fn step(&self) -> u64 {
        match self {
            Message::Hello { step, .. }
            | Message::Ack { step, .. }
            | Message::KpmReport { step, .. }
            | Message::Policy { step, .. }
            | Message::Bye { step, .. } => *step,
        }
    }

    /// KPM_REPORT and POLICY are subject to step ordering.
    pub fn is_data(&self) -> bool {
        matches!(self, Message::KpmReport { .. } | Message::Policy { .. })
    }

    fn all_finite(&self) -> bool {
        let fin = |x: &f64| x.is_finite();
        match self {
            Message::Hello { slices, .. } => slices.iter().all(|s| s.q_target_mbps.is_finite() && s.d_target_ms.is_finite()),
            Message::KpmReport { observation, applied, .. } => {
                observation
                    .ues
                    .iter()
                    .all(|u| u.features.iter().all(fin) && u.throughput_mbps.is_finite() && u.delay_ms.is_finite())
                    && applied.as_ref().is_none_or(|a| {
                        a.sleep_ratio.is_finite()
                            && a.allocation.fractions().iter().all(fin)
                            && a.ues.iter().all(|u| u.throughput_mbps.is_finite() && u.delay_ms.is_finite())
                    })
            }
            Message::Policy { allocation, .. } => allocation.fractions().iter().all(fin),
            Message::Ack { .. } | Message::Bye { .. } => true,
        }
    }
}

/// One newline-terminated line.
pub fn encode_message(m: &Message) -> Result<String> {
    if !m.all_finite() {
        return Err(Error::argument(format!("{} carries a non-finite number", m.kind())));
    }
    let mut line = serde_json::to_string(m).map_err(|e| Error::argument(format!("encoding {}: {e}", m.kind())))?;
    line.push('\n');
    Ok(line)
}

/// Decode one line (a trailing `\n` or `\r\n` is accepted).
pub fn decode_message(bytes: &[u8]) -> Result<Message> {
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    let body = body.strip_suffix(b"\r").unwrap_or(body);
    if let Some(pos) = body.iter().position(|b| *b == b'\n') {
        return Err(Error::Decode {
            offset: pos,
            detail: "newline inside message".into(),
        });
    }
    let text = std::str::from_utf8(body).map_err(|e| Error::Decode {
        offset: e.valid_up_to(),
        detail: "invalid UTF-8".into(),
    })?;
    let msg: Message = serde_json::from_str(text).map_err(|e| Error::Decode {
        // Single-line input, so the 1-based column is the byte position.
        offset: e.column().saturating_sub(1).min(body.len()),
        detail: e.to_string(),
    })?;
    match &msg {
        Message::Policy { allocation, .. } => allocation.validate().map_err(|e| Error::protocol(format!("POLICY: {e}")))?,
        Message::KpmReport { applied: Some(a), .. } => {
            a.allocation.validate().map_err(|e| Error::protocol(format!("KPM_REPORT: {e}")))?
        }
        _ => {}
    }
    Ok(msg)
}

/// Splits a byte stream into lines, keeping partial input across read
/// timeouts.
#[derive(Debug)]
pub struct LineReader<R> {
    inner: R,
    buf: Vec<u8>,
    eof: bool,
}

impl<R: Read> LineReader<R> {
    pub fn new(inner: R) -> Self {
        LineReader {
            inner,
            buf: Vec::new(),
            eof: false,
        }
    }

    /// Next line including its `\n`; `None` at end of stream. Read timeouts
    /// surface as `WouldBlock`/`TimedOut` and leave buffered bytes in place.
    pub fn next_line(&mut self) -> io::Result<Option<Vec<u8>>> {
        let mut scanned = 0;
        loop {
            if let Some(pos) = self.buf[scanned..].iter().position(|b| *b == b'\n') {
                return Ok(Some(self.buf.drain(..=scanned + pos).collect()));
            }
            scanned = self.buf.len();
            if self.eof {
                return Ok(if self.buf.is_empty() { None } else { Some(std::mem::take(&mut self.buf)) });
            }
            if self.buf.len() > MAX_LINE_BYTES {
                return Err(io::Error::new(ErrorKind::InvalidData, "line exceeds maximum length"));
            }
            let mut chunk = [0u8; 8192];
            match self.inner.read(&mut chunk) {
                Ok(0) => self.eof = true,
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
    }
}

pub fn is_timeout(e: &Error) -> bool {
    matches!(e, Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

impl Direction {
    fn marker(self) -> &'static str {
        match self {
            Direction::Sent => "> ",
            Direction::Received => "< ",
        }
    }
}

/// Appends every frame crossing a link to a file, prefixed by `> ` (sent) or
/// `< ` (received).
#[derive(Debug)]
pub struct Recorder {
    out: BufWriter<File>,
}

impl Recorder {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Recorder {
            out: BufWriter::new(File::create(path)?),
        })
    }

    fn record(&mut self, dir: Direction, line: &[u8]) -> Result<()> {
        self.out.write_all(dir.marker().as_bytes())?;
        self.out.write_all(line)?;
        if !line.ends_with(b"\n") {
            self.out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        Ok(self.out.flush()?)
    }
}

/// Parse a file written by [`Recorder`].
pub fn read_recording(path: &Path) -> Result<Vec<(Direction, Message)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (dir, body) = if let Some(b) = line.strip_prefix("> ") {
            (Direction::Sent, b)
        } else if let Some(b) = line.strip_prefix("< ") {
            (Direction::Received, b)
        } else {
            return Err(Error::protocol(format!("{}:{}: missing direction marker", path.display(), n + 1)));
        };
        let msg = decode_message(body.as_bytes())
            .map_err(|e| Error::protocol(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push((dir, msg));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default)]
struct StepOrder {
    last: Option<u64>,
}

impl StepOrder {
    fn advance(&mut self, m: &Message, dir: &str) -> Result<()> {
        if !m.is_data() {
            return Ok(());
        }
        let step = m.step();
        if let Some(last) = self.last {
            if step <= last {
                return Err(Error::protocol(format!(
                    "{dir} {} step {step} does not follow step {last}",
                    m.kind()
                )));
            }
        }
        self.last = Some(step);
        Ok(())
    }
}

/// One end of a connection: framed, ordered, optionally recorded.
#[derive(Debug)]
pub struct Link<R, W> {
    reader: LineReader<R>,
    writer: W,
    recorder: Option<Recorder>,
    sent: StepOrder,
    received: StepOrder,
}

impl<R: Read, W: Write> Link<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Link {
            reader: LineReader::new(reader),
            writer,
            recorder: None,
            sent: StepOrder::default(),
            received: StepOrder::default(),
        }
    }

    pub fn with_recorder(mut self, recorder: Option<Recorder>) -> Self {
        self.recorder = recorder;
        self
    }

    pub fn send(&mut self, m: &Message) -> Result<()> {
        self.sent.advance(m, "outgoing")?;
        let line = encode_message(m)?;
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        if let Some(r) = &mut self.recorder {
            r.record(Direction::Sent, line.as_bytes())?;
        }
        Ok(())
    }

    /// `Ok(None)` when the peer closed the stream.
    pub fn recv(&mut self) -> Result<Option<Message>> {
        let Some(line) = self.reader.next_line()? else {
            return Ok(None);
        };
        if let Some(r) = &mut self.recorder {
            r.record(Direction::Received, &line)?;
        }
        let m = decode_message(&line)?;
        self.received.advance(&m, "incoming")?;
        Ok(Some(m))
    }

    pub fn flush_recording(&mut self) -> Result<()> {
        match &mut self.recorder {
            Some(r) => r.flush(),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DuConfig {
    /// Decision steps to run before sending BYE.
    pub steps: u64,
    /// How long to wait for each POLICY (and for the handshake ACK).
    pub policy_timeout: Duration,
    /// Steps to keep repeating the last policy after the RIC disappears.
    pub grace_steps: u64,
    pub record: Option<PathBuf>,
}

impl Default for DuConfig {
    fn default() -> Self {
        DuConfig {
            steps: 1000,
            policy_timeout: Duration::from_secs(30),
            grace_steps: 10,
            record: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DuSummary {
    pub steps: u64,
    pub fresh: u64,
    pub repeated: u64,
    pub fallback: u64,
    pub ended_by_peer: bool,
    pub connection_lost: bool,
}

enum Wait {
    Policy(SleepAction, SliceAllocation),
    Late,
    Lost,
    Bye,
}

fn wait_policy<R: Read, W: Write>(link: &mut Link<R, W>, t: u64, frame: &FrameConfig, slices: usize) -> Result<Wait> {
    loop {
        match link.recv() {
            Ok(Some(Message::Policy { step, action, allocation })) => {
                if step < t {
                    continue; // answer to a report we already moved past
                }
                if step > t {
                    return Err(Error::protocol(format!("POLICY for step {step} while waiting for {t}")));
                }
                action.validate(frame).map_err(|e| Error::protocol(format!("POLICY {t}: {e}")))?;
                if allocation.len() != slices {
                    return Err(Error::protocol(format!(
                        "POLICY {t} allocates {} slices, cell has {slices}",
                        allocation.len()
                    )));
                }
                return Ok(Wait::Policy(action, allocation));
            }
            Ok(Some(Message::Bye { .. })) => return Ok(Wait::Bye),
            Ok(Some(other)) => {
                return Err(Error::protocol(format!("unexpected {} while waiting for POLICY {t}", other.kind())))
            }
            Ok(None) => return Ok(Wait::Lost),
            Err(e) if is_timeout(&e) => return Ok(Wait::Late),
            Err(Error::Io(_)) => return Ok(Wait::Lost),
            Err(e) => return Err(e),
        }
    }
}

/// DU side over an established link: handshake, then the lock-step loop.
/// `on_step` sees every executed step.
pub fn run_du<E, R, W, F>(env: &mut E, link: &mut Link<R, W>, cfg: &DuConfig, mut on_step: F) -> Result<DuSummary>
where
    E: Environment + ?Sized,
    R: Read,
    W: Write,
    F: FnMut(u64, &StepOutcome, PolicySource) -> Result<()>,
{
    let frame = env.frame();
    let slices = env.slices();
    link.send(&Message::hello(&frame, &slices))?;
    match link.recv() {
        Ok(Some(Message::Ack { accepted: true, .. })) => {}
        Ok(Some(Message::Ack { reason, .. })) => {
            return Err(Error::protocol(format!(
                "RIC refused the handshake: {}",
                reason.unwrap_or_else(|| "no reason given".into())
            )))
        }
        Ok(Some(other)) => return Err(Error::protocol(format!("expected ACK, got {}", other.kind()))),
        Ok(None) => return Err(Error::protocol("RIC closed the connection during the handshake")),
        Err(e) if is_timeout(&e) => return Err(Error::protocol("no ACK before the policy timeout")),
        Err(e) => return Err(e),
    }

    let always_on = (SleepAction::always_on(&frame), SliceAllocation::uniform(slices.len()));
    let mut summary = DuSummary::default();
    let mut last: Option<(SleepAction, SliceAllocation)> = None;
    let mut applied: Option<Applied> = None;
    let mut lost_at: Option<u64> = None;
    let mut obs = env.observe()?;
    for t in 0..cfg.steps {
        let wait = if lost_at.is_some() {
            Wait::Lost
        } else {
            let report = Message::KpmReport {
                step: t,
                observation: obs.clone(),
                applied: applied.take(),
            };
            match link.send(&report) {
                Ok(()) => wait_policy(link, t, &frame, slices.len())?,
                Err(Error::Io(_)) => Wait::Lost,
                Err(e) => return Err(e),
            }
        };
        let source = match wait {
            Wait::Policy(a, al) => {
                last = Some((a, al));
                PolicySource::Fresh
            }
            Wait::Bye => {
                summary.ended_by_peer = true;
                link.flush_recording()?;
                return Ok(summary);
            }
            Wait::Late => PolicySource::Repeated,
            Wait::Lost => {
                let since = *lost_at.get_or_insert(t);
                summary.connection_lost = true;
                if t - since < cfg.grace_steps {
                    PolicySource::Repeated
                } else {
                    PolicySource::Fallback
                }
            }
        };
        let (source, (act, alloc)) = match (source, &last) {
            (PolicySource::Fallback, _) | (_, None) => (PolicySource::Fallback, always_on.clone()),
            (s, Some(p)) => (s, p.clone()),
        };
        match source {
            PolicySource::Fresh => summary.fresh += 1,
            PolicySource::Repeated => summary.repeated += 1,
            PolicySource::Fallback => summary.fallback += 1,
        }
        let outcome = env.step(&act, &alloc)?;
        summary.steps += 1;
        on_step(t, &outcome, source)?;
        applied = Some(Applied {
            action: act,
            allocation: alloc,
            sleep_ratio: outcome.sleep_ratio,
            source,
            ues: outcome.ues.clone(),
        });
        obs = outcome.observation;
    }
    if lost_at.is_none() {
        // Final report so the RIC sees the outcome of its last policy.
        let last_report = Message::KpmReport {
            step: cfg.steps,
            observation: obs,
            applied,
        };
        if link.send(&last_report).is_ok() {
            let _ = link.send(&Message::Bye {
                step: cfg.steps,
                reason: Some("step budget reached".into()),
            });
        }
    }
    link.flush_recording()?;
    Ok(summary)
}

/// Accept one RIC on `listener` and serve it.
pub fn serve_du<E, F>(env: &mut E, listener: &TcpListener, cfg: &DuConfig, on_step: F) -> Result<DuSummary>
where
    E: Environment + ?Sized,
    F: FnMut(u64, &StepOutcome, PolicySource) -> Result<()>,
{
    let (stream, _) = listener.accept()?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(cfg.policy_timeout))?;
    let recorder = cfg.record.as_deref().map(Recorder::create).transpose()?;
    let mut link = Link::new(stream.try_clone()?, stream).with_recorder(recorder);
    run_du(env, &mut link, cfg, on_step)
}

/// The RIC's view of a remote cell, usable anywhere an [`Environment`] is.
#[derive(Debug)]
pub struct RemoteEnv<R, W> {
    link: Link<R, W>,
    frame: FrameConfig,
    slices: Vec<QosTarget>,
    current: Option<StateObservation>,
    step: u64,
    closed: bool,
}

impl RemoteEnv<TcpStream, TcpStream> {
    pub fn connect<A: ToSocketAddrs>(
        addr: A,
        expect: Option<(&FrameConfig, &[QosTarget])>,
        record: Option<&Path>,
    ) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let recorder = record.map(Recorder::create).transpose()?;
        RemoteEnv::handshake(Link::new(stream.try_clone()?, stream).with_recorder(recorder), expect)
    }
}

impl<R: Read, W: Write> RemoteEnv<R, W> {
    /// Wait for HELLO and accept or refuse it. A refusal is sent to the DU
    /// before the error is returned.
    pub fn handshake(mut link: Link<R, W>, expect: Option<(&FrameConfig, &[QosTarget])>) -> Result<Self> {
        let (version, frame, slices) = match link.recv()? {
            Some(Message::Hello {
                version, frame, slices, ..
            }) => (version, frame, slices),
            Some(other) => return Err(Error::protocol(format!("expected HELLO, got {}", other.kind()))),
            None => return Err(Error::protocol("DU closed the connection before HELLO")),
        };
        let mut refuse = |reason: String| -> Error {
            let _ = link.send(&Message::Ack {
                step: 0,
                accepted: false,
                reason: Some(reason.clone()),
            });
            let _ = link.flush_recording();
            Error::protocol(format!("handshake refused: {reason}"))
        };
        if version != PROTOCOL_VERSION {
            return Err(refuse(format!("DU speaks version {version}, RIC speaks {PROTOCOL_VERSION}")));
        }
        let parsed = frame
            .to_frame()
            .and_then(|f| slices.iter().map(|s| s.to_target()).collect::<Result<Vec<_>>>().map(|s| (f, s)));
        let (frame, slices) = match parsed {
            Ok(v) => v,
            Err(e) => return Err(refuse(format!("invalid HELLO: {e}"))),
        };
        if let Some((f, s)) = expect {
            if *f != frame || s != slices.as_slice() {
                return Err(refuse("cell configuration does not match the agent".into()));
            }
        }
        link.send(&Message::Ack {
            step: 0,
            accepted: true,
            reason: None,
        })?;
        Ok(RemoteEnv {
            link,
            frame,
            slices,
            current: None,
            step: 0,
            closed: false,
        })
    }

    /// True once the DU said BYE or disconnected.
    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Send BYE unless the DU already ended the session.
    pub fn close(&mut self) -> Result<()> {
        if !self.closed {
            self.closed = true;
            self.link.send(&Message::Bye {
                step: self.step,
                reason: None,
            })?;
        }
        self.link.flush_recording()
    }

    fn next_report(&mut self) -> Result<(u64, StateObservation, Option<Applied>)> {
        if self.closed {
            return Err(Error::protocol("session already closed"));
        }
        match self.link.recv() {
            Ok(Some(Message::KpmReport {
                step,
                observation,
                applied,
            })) => Ok((step, observation, applied)),
            Ok(Some(Message::Bye { step, reason })) => {
                self.closed = true;
                self.link.flush_recording()?;
                Err(Error::protocol(format!(
                    "DU ended the session at step {step}{}",
                    reason.map(|r| format!(": {r}")).unwrap_or_default()
                )))
            }
            Ok(Some(other)) => Err(Error::protocol(format!("unexpected {} from DU", other.kind()))),
            Ok(None) => {
                self.closed = true;
                Err(Error::protocol("DU disconnected"))
            }
            Err(e) => Err(e),
        }
    }
}

impl<R: Read, W: Write> Environment for RemoteEnv<R, W> {
    fn frame(&self) -> FrameConfig {
        self.frame
    }

    fn slices(&self) -> Vec<QosTarget> {
        self.slices.clone()
    }

    fn observe(&mut self) -> Result<StateObservation> {
        if self.current.is_none() {
            let (step, obs, _) = self.next_report()?;
            self.step = step;
            self.current = Some(obs);
        }
        Ok(self.current.clone().unwrap_or_default())
    }

    fn step(&mut self, act: &SleepAction, alloc: &SliceAllocation) -> Result<StepOutcome> {
        if self.current.is_none() {
            self.observe()?;
        }
        self.link.send(&Message::Policy {
            step: self.step,
            action: *act,
            allocation: alloc.clone(),
        })?;
        let (step, observation, applied) = self.next_report()?;
        let applied = applied.ok_or_else(|| Error::protocol(format!("KPM_REPORT {step} lacks the applied step")))?;
        self.step = step;
        self.current = Some(observation.clone());
        Ok(StepOutcome {
            observation,
            ues: applied.ues,
            sleep_ratio: applied.sleep_ratio,
            action: applied.action,
            allocation: applied.allocation,
        })
    }
}

/// Drive a remote cell with `controller` until the DU ends the session.
/// Returns the number of policies sent.
pub fn run_ric<C, R, W>(controller: &mut C, env: &mut RemoteEnv<R, W>) -> Result<u64>
where
    C: Controller + ?Sized,
    R: Read,
    W: Write,
{
    let mut sent = 0;
    loop {
        let obs = match env.observe() {
            Ok(o) => o,
            Err(_) if env.is_closed() => break,
            Err(e) => return Err(e),
        };
        let (act, alloc) = controller.decide(&obs)?;
        match env.step(&act, &alloc) {
            Ok(_) => sent += 1,
            Err(_) if env.is_closed() => break,
            Err(e) => return Err(e),
        }
    }
    Ok(sent)
}

/// One recorded transition re-scored against a controller.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayRow {
    pub step: u64,
    pub recorded: SleepAction,
    pub recorded_allocation: SliceAllocation,
    pub proposed: SleepAction,
    pub proposed_allocation: SliceAllocation,
    /// Reward of the recorded transition.
    pub reward: RewardBreakdown,
}

/// Feed every recorded KPM_REPORT to `controller` and pair its proposal with
/// what the DU actually executed and the reward that followed.
pub fn replay<C: Controller + ?Sized>(
    controller: &mut C,
    recording: &[(Direction, Message)],
    lambda_q: f64,
    lambda_d: f64,
) -> Result<Vec<ReplayRow>> {
    let (frame, slices) = recording
        .iter()
        .find_map(|(_, m)| match m {
            Message::Hello { frame, slices, .. } => Some((*frame, slices.clone())),
            _ => None,
        })
        .ok_or_else(|| Error::protocol("recording has no HELLO"))?;
    let frame = frame.to_frame()?;
    let slices = slices.iter().map(|s| s.to_target()).collect::<Result<Vec<_>>>()?;
    let reports: Vec<(u64, &StateObservation, Option<&Applied>)> = recording
        .iter()
        .filter_map(|(_, m)| match m {
            Message::KpmReport {
                step,
                observation,
                applied,
            } => Some((*step, observation, applied.as_ref())),
            _ => None,
        })
        .collect();
    let mut rows = Vec::new();
    for pair in reports.windows(2) {
        let (step, obs, _) = pair[0];
        let (_, next, Some(applied)) = pair[1] else {
            return Err(Error::protocol(format!("report after step {step} lacks the applied step")));
        };
        let (proposed, proposed_allocation) = controller.decide(obs)?;
        let reward = compute_reward(next, &applied.action, &slices, lambda_q, lambda_d, &frame)?;
        rows.push(ReplayRow {
            step,
            recorded: applied.action,
            recorded_allocation: applied.allocation.clone(),
            proposed,
            proposed_allocation,
            reward,
        });
    }
    Ok(rows)
}
