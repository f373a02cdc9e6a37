//! Delivery of flow summaries to the ingest service.
//!
//! Delivery is at-least-once: failed sends are retried with capped
//! exponential backoff, and after the last retry the summary goes to a
//! local spill file that is replayed, in order, before anything newer is
//! sent. The store's upsert makes duplicates harmless.

use std::fs::{File, OpenOptions};
use std::future::Future;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader as AsyncBufReader};
use tokio::net::TcpStream;
use tokio::sync::Mutex;

use super::{FlowSummary, SummaryMessage};
use crate::store::TimeSeriesStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestAck {
    pub records_written: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SinkError {
    /// Transient; worth retrying.
    #[error("ingest unreachable: {0}")]
    Unreachable(String),
    /// The service refused the summary; retrying will not help.
    #[error("summary rejected: {0}")]
    Rejected(String),
}

#[derive(Debug, thiserror::Error)]
pub enum EmitError {
    #[error("ingest unreachable after {attempts} attempts; {spilled} summaries spilled")]
    IngestUnreachable { attempts: u32, spilled: usize },
    #[error(transparent)]
    Rejected(SinkError),
    #[error("spill queue: {0}")]
    Spill(#[from] std::io::Error),
}

/// Where summaries go. Implementations must be idempotent per (camera, second).
pub trait IngestSink: Send + Sync {
    fn send(&self, summary: &FlowSummary) -> impl Future<Output = Result<IngestAck, SinkError>> + Send;
}

/// In-process sink writing straight into a store.
#[derive(Clone)]
pub struct LocalSink(pub Arc<TimeSeriesStore>);

impl IngestSink for LocalSink {
    async fn send(&self, summary: &FlowSummary) -> Result<IngestAck, SinkError> {
        self.0
            .ingest(summary)
            .map(|n| IngestAck { records_written: n })
            .map_err(|e| SinkError::Rejected(e.to_string()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TcpReply {
    Ack(IngestAck),
    Error { error: String },
}

/// Newline-delimited JSON over one persistent TCP connection: each request
/// line is a [`SummaryMessage`], each reply line a [`TcpReply`].
pub struct TcpSink {
    addr: String,
    camera_names: Arc<Vec<String>>,
    conn: Mutex<Option<(AsyncBufReader<tokio::net::tcp::OwnedReadHalf>, tokio::net::tcp::OwnedWriteHalf)>>,
}

impl TcpSink {
    pub fn new(addr: impl Into<String>, camera_names: Arc<Vec<String>>) -> Self {
        Self { addr: addr.into(), camera_names, conn: Mutex::new(None) }
    }
}

impl IngestSink for TcpSink {
    async fn send(&self, summary: &FlowSummary) -> Result<IngestAck, SinkError> {
        let name = self
            .camera_names
            .get(summary.camera_id.index())
            .ok_or_else(|| SinkError::Rejected(format!("no name for {}", summary.camera_id)))?;
        let mut line = serde_json::to_vec(&SummaryMessage::from_summary(summary, name))
            .map_err(|e| SinkError::Rejected(e.to_string()))?;
        line.push(b'\n');

        let mut guard = self.conn.lock().await;
        if guard.is_none() {
            let stream = TcpStream::connect(&self.addr)
                .await
                .map_err(|e| SinkError::Unreachable(e.to_string()))?;
            let (r, w) = stream.into_split();
            *guard = Some((AsyncBufReader::new(r), w));
        }
        let (reader, writer) = guard.as_mut().expect("connected above");
        let io = async {
            writer.write_all(&line).await?;
            let mut reply = String::new();
            if reader.read_line(&mut reply).await? == 0 {
                return Err(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "connection closed"));
            }
            Ok(reply)
        };
        let reply = match io.await {
            Ok(r) => r,
            Err(e) => {
                *guard = None;
                return Err(SinkError::Unreachable(e.to_string()));
            }
        };
        match serde_json::from_str::<TcpReply>(&reply) {
            Ok(TcpReply::Ack(a)) => Ok(a),
            Ok(TcpReply::Error { error }) => Err(SinkError::Rejected(error)),
            Err(e) => {
                *guard = None;
                Err(SinkError::Unreachable(format!("bad reply: {e}")))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 5, base_delay: Duration::from_millis(50), max_delay: Duration::from_secs(2) }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.min(16)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Append-only JSON-lines file of summaries awaiting delivery.
#[derive(Debug)]
pub struct SpillQueue {
    path: PathBuf,
    len: usize,
}

impl SpillQueue {
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let len = match File::open(&path) {
            Ok(f) => BufReader::new(f).lines().filter(|l| l.as_ref().map_or(true, |l| !l.is_empty())).count(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e),
        };
        Ok(Self { path, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, s: &FlowSummary) -> std::io::Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let mut line = serde_json::to_vec(s)?;
        line.push(b'\n');
        f.write_all(&line)?;
        f.flush()?;
        self.len += 1;
        Ok(())
    }

    pub fn peek_all(&self) -> std::io::Result<Vec<FlowSummary>> {
        let f = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let mut out = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            if !line.is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }

    /// Rewrites the file keeping only `rest`.
    fn replace(&mut self, rest: &[FlowSummary]) -> std::io::Result<()> {
        let tmp = self.path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            for s in rest {
                let mut line = serde_json::to_vec(s)?;
                line.push(b'\n');
                f.write_all(&line)?;
            }
            f.sync_all()?;
        }
        std::fs::rename(&tmp, &self.path)?;
        self.len = rest.len();
        Ok(())
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct EmitStats {
    pub sent: u64,
    pub retries: u64,
    pub spilled: u64,
    pub replayed: u64,
}

pub struct Emitter<S> {
    sink: S,
    policy: RetryPolicy,
    spill: SpillQueue,
    stats: EmitStats,
}

impl<S: IngestSink> Emitter<S> {
    pub fn new(sink: S, policy: RetryPolicy, spill: SpillQueue) -> Self {
        Self { sink, policy, spill, stats: EmitStats::default() }
    }

    pub fn stats(&self) -> EmitStats {
        self.stats
    }

    pub fn spilled(&self) -> usize {
        self.spill.len()
    }

    pub fn sink(&self) -> &S {
        &self.sink
    }

    async fn send_with_retry(&mut self, s: &FlowSummary) -> Result<IngestAck, (u32, SinkError)> {
        let mut attempt = 0;
        loop {
            match self.sink.send(s).await {
                Ok(ack) => return Ok(ack),
                Err(e @ SinkError::Rejected(_)) => return Err((attempt + 1, e)),
                Err(e) => {
                    if attempt >= self.policy.max_retries {
                        return Err((attempt + 1, e));
                    }
                    tokio::time::sleep(self.policy.delay(attempt)).await;
                    attempt += 1;
                    self.stats.retries += 1;
                }
            }
        }
    }

    /// Sends spilled summaries in order; stops at the first failure.
    pub async fn replay_spill(&mut self) -> Result<usize, EmitError> {
        if self.spill.is_empty() {
            return Ok(0);
        }
        let pending = self.spill.peek_all()?;
        let mut delivered = 0;
        for s in &pending {
            match self.sink.send(s).await {
                Ok(_) => delivered += 1,
                Err(SinkError::Rejected(e)) => {
                    tracing::warn!(camera = %s.camera_id, start = s.window_start_s, "dropping rejected spilled summary: {e}");
                    delivered += 1;
                }
                Err(SinkError::Unreachable(_)) => break,
            }
        }
        self.spill.replace(&pending[delivered..])?;
        self.stats.replayed += delivered as u64;
        Ok(delivered)
    }

    /// Delivers `s`, preserving window order behind anything already spilled.
    pub async fn emit(&mut self, s: &FlowSummary) -> Result<IngestAck, EmitError> {
        self.replay_spill().await?;
        if !self.spill.is_empty() {
            self.spill.push(s)?;
            self.stats.spilled += 1;
            return Err(EmitError::IngestUnreachable { attempts: 1, spilled: self.spill.len() });
        }
        match self.send_with_retry(s).await {
            Ok(ack) => {
                self.stats.sent += 1;
                Ok(ack)
            }
            Err((_, e @ SinkError::Rejected(_))) => Err(EmitError::Rejected(e)),
            Err((attempts, SinkError::Unreachable(_))) => {
                self.spill.push(s)?;
                self.stats.spilled += 1;
                Err(EmitError::IngestUnreachable { attempts, spilled: self.spill.len() })
            }
        }
    }
}
