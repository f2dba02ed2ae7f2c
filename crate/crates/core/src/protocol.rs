//! One-shot wire protocol between agents and the fusion center.
//!
//! # Wire format
//!
//! Every message is little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "DKP1"
//!      4     2  version (u16, currently 1)
//!      6     4  agent_id (u32)
//!     10     4  T (u32)
//!     14     4  d_j (u32)
//!     18     1  kernel tag (0 = linear, 1 = RBF)
//!     19     8  sigma (f64, 0 for linear)
//!     27  8·d_j eigenvalues (f64, descending)
//!      …  8·T·d_j eigenvectors (f64, column-major)
//! ```
//!
//! Over a socket each message is preceded by its byte length as a `u64`
//! (little-endian). Agents connect, send one frame and close.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;

use crate::agent::{AgentMessage, AgentState};
use crate::fusion::{fuse, FusionResult};
use crate::kernels::KernelSpec;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DKP1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 27;
pub const FRAME_PREFIX_LEN: usize = 8;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

const TAG_LINEAR: u8 = 0;
const TAG_RBF: u8 = 1;

fn to_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::input(format!("{what} = {value} does not fit in 32 bits")))
}

/// Serializes `msg` into the wire layout.
pub fn encode(msg: &AgentMessage, spec: &KernelSpec) -> Result<Vec<u8>> {
    let t = msg.samples();
    let d = msg.rank();
    if msg.eigenvectors.ncols() != d {
        return Err(Error::input(format!("agent {}: {} eigenvalues but {} eigenvectors", msg.agent_id, d, msg.eigenvectors.ncols())));
    }
    let t32 = to_u32(t, "T")?;
    let d32 = to_u32(d, "d_j")?;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * d * (t + 1));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&msg.agent_id.to_le_bytes());
    out.extend_from_slice(&t32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    let (tag, sigma) = match *spec {
        KernelSpec::Linear => (TAG_LINEAR, 0.0f64),
        KernelSpec::Rbf { sigma } => (TAG_RBF, sigma),
    };
    out.push(tag);
    out.extend_from_slice(&sigma.to_le_bytes());
    for v in &msg.eigenvalues {
        out.extend_from_slice(&v.to_le_bytes());
    }
    // nalgebra storage is column-major already
    for v in msg.eigenvectors.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut buf = [0u8; N];
        buf.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        buf
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

/// Parses one wire message.
pub fn decode(bytes: &[u8]) -> Result<(AgentMessage, KernelSpec)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Length { expected: HEADER_LEN, actual: bytes.len() });
    }
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take();
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:02x?}")));
    }
    let version = u16::from_le_bytes(cur.take());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let agent_id = cur.u32();
    let t = cur.u32() as usize;
    let d = cur.u32() as usize;
    let tag = cur.take::<1>()[0];
    let sigma = cur.f64();
    let spec = match tag {
        TAG_LINEAR if sigma == 0.0 => KernelSpec::Linear,
        TAG_LINEAR => return Err(Error::Format(format!("linear kernel with non-zero sigma {sigma}"))),
        TAG_RBF => KernelSpec::rbf(sigma).map_err(|_| Error::Format(format!("invalid RBF sigma {sigma}")))?,
        other => return Err(Error::Format(format!("unknown kernel tag {other}"))),
    };
    if t == 0 || d == 0 || d > t {
        return Err(Error::Format(format!("invalid dimensions T = {t}, d_j = {d}")));
    }
    let expected = d
        .checked_mul(t + 1)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format(format!("dimensions T = {t}, d_j = {d} overflow")))?;
    if bytes.len() != expected {
        return Err(Error::Length { expected, actual: bytes.len() });
    }
    let eigenvalues: Vec<f64> = (0..d).map(|_| cur.f64()).collect();
    let vectors: Vec<f64> = (0..t * d).map(|_| cur.f64()).collect();
    if eigenvalues.iter().chain(&vectors).any(|v| v.is_nan()) {
        return Err(Error::Data(format!("agent {agent_id}: NaN in payload")));
    }
    let eigenvectors = DMatrix::from_vec(t, d, vectors);
    Ok((AgentMessage { agent_id, eigenvalues, eigenvectors }, spec))
}

/// Writes one length-prefixed frame.
pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// Reads one length-prefixed frame, refusing anything above `max_len`.
pub fn read_frame<R: Read>(r: &mut R, max_len: usize) -> Result<Vec<u8>> {
    let mut prefix = [0u8; FRAME_PREFIX_LEN];
    r.read_exact(&mut prefix)?;
    let len = u64::from_le_bytes(prefix);
    if len > max_len as u64 {
        return Err(Error::Format(format!("frame of {len} bytes exceeds limit {max_len}")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Connects to the center and sends one frame.
pub fn send_message<A: ToSocketAddrs>(addr: A, payload: &[u8], timeout: Duration) -> Result<()> {
    let addr = addr.to_socket_addrs()?.next().ok_or_else(|| Error::Config("address resolved to nothing".into()))?;
    let mut stream = TcpStream::connect_timeout(&addr, timeout)?;
    stream.set_write_timeout(Some(timeout))?;
    write_frame(&mut stream, payload)?;
    stream.shutdown(std::net::Shutdown::Write)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    InProcess,
    /// Loopback or LAN TCP; the center binds this address.
    Socket(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Upstream,
    Downstream,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    /// Time since the run started.
    pub elapsed: Duration,
    pub direction: Direction,
    pub agent_id: u32,
    pub bytes: usize,
}

/// Protocol events of one run, plus the raw bytes that crossed the wire.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub frames: Vec<Vec<u8>>,
}

impl Trace {
    pub fn upstream_count(&self) -> usize {
        self.events.iter().filter(|e| e.direction == Direction::Upstream).count()
    }

    pub fn downstream_count(&self) -> usize {
        self.events.iter().filter(|e| e.direction == Direction::Downstream).count()
    }

    /// One line per event: `seconds<TAB>direction<TAB>agent_id<TAB>bytes`.
    pub fn log_lines(&self) -> Vec<String> {
        self.events
            .iter()
            .map(|e| {
                let dir = match e.direction {
                    Direction::Upstream => "up",
                    Direction::Downstream => "down",
                };
                format!("{:.6}\t{dir}\t{}\t{}", e.elapsed.as_secs_f64(), e.agent_id, e.bytes)
            })
            .collect()
    }
}

/// Communication and arithmetic accounting for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    /// `(agent_id, d_j · (T + 1))`, ascending agent id.
    pub per_agent_scalars: Vec<(u32, usize)>,
    pub total_scalars: usize,
    /// Headers plus payload, excluding socket framing.
    pub total_bytes: usize,
    pub header_bytes: usize,
    /// Local Gram construction and dense eigendecomposition, summed over agents.
    pub local_flops: f64,
    /// Reconstruction, combination and the global eigendecomposition.
    pub fusion_flops: f64,
}

impl CostReport {
    /// `features[j]` is `M_j` for the agent at the same position in `ranks`.
    pub fn from_ranks(ranks: &[(u32, usize)], features: &[usize], samples: usize) -> CostReport {
        let mut per_agent: Vec<(u32, usize)> = ranks.iter().map(|&(id, d)| (id, d * (samples + 1))).collect();
        per_agent.sort_unstable();
        let total_scalars = per_agent.iter().map(|&(_, s)| s).sum();
        let header_bytes = HEADER_LEN * ranks.len();
        let t = samples as f64;
        let local_flops = features.iter().map(|&m| m as f64 * t * t + t * t * t).sum();
        let fusion_flops = ranks.iter().map(|&(_, d)| d as f64 * t * t).sum::<f64>() + t * t * t;
        CostReport { per_agent_scalars: per_agent, total_scalars, total_bytes: header_bytes + 8 * total_scalars, header_bytes, local_flops, fusion_flops }
    }
}

/// Asymptotic communication / computation of the three approaches for an
/// even split of `M` features over `J` agents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexityRow {
    pub communication: f64,
    pub computation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexityTable {
    /// Sample-partitioned linear PCA.
    pub sample_distributed_pca: ComplexityRow,
    /// The one-shot kernel method implemented here.
    pub one_shot_kpca: ComplexityRow,
    /// Centralized kernel PCA after shipping raw features.
    pub central_kpca: ComplexityRow,
}

pub fn complexity_table(features: usize, samples: usize, agents: usize, rank: usize) -> ComplexityTable {
    let (m, t, j, d) = (features as f64, samples as f64, agents as f64, rank as f64);
    ComplexityTable {
        sample_distributed_pca: ComplexityRow { communication: d * m, computation: m.max(t / j + d * j) * m * m },
        one_shot_kpca: ComplexityRow { communication: d * t, computation: t.max(m / j + d * j) * t * t },
        central_kpca: ComplexityRow { communication: t * m / j, computation: t * t * t },
    }
}

/// Agent-side facts that never cross the wire; kept for error analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalDiagnostics {
    pub agent_id: u32,
    pub leading_eigenvalue: f64,
    pub first_discarded: f64,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub result: FusionResult,
    pub cost: CostReport,
    pub trace: Trace,
    /// Ascending agent id.
    pub local: Vec<LocalDiagnostics>,
}

fn solve_and_encode(agent: &AgentState, spec: &KernelSpec) -> Result<(Vec<u8>, LocalDiagnostics)> {
    let sol = agent.solve()?;
    let diag = LocalDiagnostics { agent_id: agent.agent_id(), leading_eigenvalue: sol.leading_eigenvalue, first_discarded: sol.first_discarded };
    Ok((encode(&sol.message, spec)?, diag))
}

fn check_agents(agents: &[AgentState]) -> Result<(usize, KernelSpec)> {
    let first = agents.first().ok_or_else(|| Error::input("no agents"))?;
    let t = first.block.samples();
    for a in agents {
        if a.block.samples() != t {
            return Err(Error::input(format!("agent {} has T = {} but agent {} has T = {t}", a.agent_id(), a.block.samples(), first.agent_id())));
        }
        if a.spec != first.spec {
            return Err(Error::input(format!("agent {} uses a different kernel", a.agent_id())));
        }
    }
    let mut ids: Vec<u32> = agents.iter().map(|a| a.agent_id()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Protocol(format!("duplicate agent id {}", w[0])));
    }
    Ok((t, first.spec))
}

/// Runs the whole one-shot protocol: every agent solves locally and sends a
/// single message; the center fuses once all have arrived.
pub fn run_one_shot(agents: &[AgentState], transport: &Transport, rank: usize) -> Result<RunOutcome> {
    run_one_shot_with_timeout(agents, transport, rank, DEFAULT_TIMEOUT)
}

pub fn run_one_shot_with_timeout(agents: &[AgentState], transport: &Transport, rank: usize, timeout: Duration) -> Result<RunOutcome> {
    let (t, spec) = check_agents(agents)?;
    if rank == 0 || rank > t {
        return Err(Error::input(format!("global rank {rank} outside 1..={t}")));
    }
    let start = Instant::now();
    let (frames, mut local) = match transport {
        Transport::InProcess => {
            let mut frames = Vec::with_capacity(agents.len());
            let mut local = Vec::with_capacity(agents.len());
            for a in agents {
                let (bytes, diag) = solve_and_encode(a, &spec)?;
                frames.push((a.agent_id(), bytes, start.elapsed()));
                local.push(diag);
            }
            (frames, local)
        }
        Transport::Socket(addr) => collect_over_sockets(agents, &spec, addr, timeout, start)?,
    };
    local.sort_by_key(|d| d.agent_id);

    let mut trace = Trace::default();
    let mut messages = Vec::with_capacity(frames.len());
    for (id, bytes, at) in frames {
        let (msg, got_spec) = decode(&bytes)?;
        if msg.agent_id != id {
            return Err(Error::Protocol(format!("connection for agent {id} carried a message from agent {}", msg.agent_id)));
        }
        if got_spec != spec {
            return Err(Error::Protocol(format!("agent {id} sent kernel {got_spec:?}, expected {spec:?}")));
        }
        trace.events.push(TraceEvent { elapsed: at, direction: Direction::Upstream, agent_id: id, bytes: bytes.len() });
        trace.frames.push(bytes);
        messages.push(msg);
    }

    let result = fuse(&messages, &spec, rank)?;
    let mut features: Vec<(u32, usize)> = agents.iter().map(|a| (a.agent_id(), a.block.features())).collect();
    features.sort_unstable();
    let cost = CostReport::from_ranks(&result.meta.agent_ranks, &features.iter().map(|&(_, m)| m).collect::<Vec<_>>(), t);
    Ok(RunOutcome { result, cost, trace, local })
}

/// Center side of the socket transport. Accepts one frame per expected
/// agent, handling connections concurrently, and returns the raw frames in
/// arrival order.
pub struct FusionListener {
    listener: TcpListener,
}

impl FusionListener {
    pub fn bind<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(FusionListener { listener })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Waits for one message from each of `expected` agent ids.
    pub fn collect(&self, expected: &[u32], timeout: Duration, start: Instant) -> Result<Vec<(u32, Vec<u8>, Duration)>> {
        let deadline = Instant::now() + timeout;
        let max_len = usize::MAX >> 1;
        let (tx, rx) = mpsc::channel::<Result<Vec<u8>>>();
        let mut received: Vec<(u32, Vec<u8>, Duration)> = Vec::with_capacity(expected.len());
        let mut pending = 0usize;

        while received.len() < expected.len() {
            let now = Instant::now();
            if now >= deadline {
                let missing: Vec<String> = expected.iter().filter(|id| !received.iter().any(|r| r.0 == **id)).map(|id| id.to_string()).collect();
                return Err(Error::Run(format!("timed out waiting for agent(s) {}", missing.join(", "))));
            }
            match self.listener.accept() {
                Ok((stream, _)) => {
                    pending += 1;
                    let tx = tx.clone();
                    let remaining = deadline - now;
                    thread::spawn(move || {
                        let res = (|| {
                            stream.set_nonblocking(false)?;
                            stream.set_read_timeout(Some(remaining))?;
                            let mut stream = stream;
                            read_frame(&mut stream, max_len)
                        })();
                        let _ = tx.send(res);
                    });
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {}
                Err(e) => return Err(e.into()),
            }
            while let Ok(res) = rx.try_recv() {
                pending -= 1;
                let bytes = res?;
                if bytes.len() < 10 {
                    return Err(Error::Length { expected: HEADER_LEN, actual: bytes.len() });
                }
                let id = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
                if !expected.contains(&id) {
                    return Err(Error::Protocol(format!("message from unexpected agent {id}")));
                }
                if received.iter().any(|r| r.0 == id) {
                    return Err(Error::Protocol(format!("duplicate message from agent {id}")));
                }
                received.push((id, bytes, start.elapsed()));
            }
            if received.len() < expected.len() {
                thread::sleep(Duration::from_millis(if pending > 0 { 1 } else { 2 }));
            }
        }
        Ok(received)
    }
}

type Frames = Vec<(u32, Vec<u8>, Duration)>;

fn collect_over_sockets(agents: &[AgentState], spec: &KernelSpec, addr: &str, timeout: Duration, start: Instant) -> Result<(Frames, Vec<LocalDiagnostics>)> {
    let listener = FusionListener::bind(addr)?;
    let bound = listener.local_addr()?;
    let expected: Vec<u32> = agents.iter().map(|a| a.agent_id()).collect();

    thread::scope(|scope| {
        let senders: Vec<_> = agents
            .iter()
            .map(|a| {
                scope.spawn(move || -> Result<LocalDiagnostics> {
                    let (bytes, diag) = solve_and_encode(a, spec)?;
                    send_message(bound, &bytes, timeout)?;
                    Ok(diag)
                })
            })
            .collect();
        let collected = listener.collect(&expected, timeout, start);
        let mut local = Vec::with_capacity(agents.len());
        for (agent, handle) in agents.iter().zip(senders) {
            match handle.join() {
                Ok(Ok(diag)) => local.push(diag),
                Ok(Err(e)) => return Err(Error::Run(format!("agent {} failed: {e}", agent.agent_id()))),
                Err(_) => return Err(Error::Run(format!("agent {} panicked", agent.agent_id()))),
            }
        }
        Ok((collected?, local))
    })
}
