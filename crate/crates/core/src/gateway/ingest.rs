//! Ingest endpoint for remote edge workers: newline-delimited JSON over TCP,
//! one [`SummaryMessage`] per line, one [`TcpReply`] line back.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;

use crate::model::CameraId;
use crate::store::TimeSeriesStore;
use crate::worker::emit::{IngestAck, TcpReply};
use crate::worker::SummaryMessage;

/// Resolves a message against camera names and writes it to the store.
pub fn ingest_message(
    store: &TimeSeriesStore,
    cameras: &HashMap<String, CameraId>,
    msg: SummaryMessage,
) -> Result<IngestAck, String> {
    let cam = *cameras.get(&msg.camera_id).ok_or_else(|| format!("unknown camera {}", msg.camera_id))?;
    store
        .ingest(&msg.into_summary(cam))
        .map(|n| IngestAck { records_written: n })
        .map_err(|e| e.to_string())
}

async fn handle(conn: TcpStream, store: Arc<TimeSeriesStore>, cameras: Arc<HashMap<String, CameraId>>) -> std::io::Result<()> {
    let (r, mut w) = conn.into_split();
    let mut lines = BufReader::new(r).lines();
    while let Some(line) = lines.next_line().await? {
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<SummaryMessage>(&line) {
            Ok(msg) => {
                let store = store.clone();
                let cameras = cameras.clone();
                // ingest may fsync; keep it off the reactor
                match tokio::task::spawn_blocking(move || ingest_message(&store, &cameras, msg)).await {
                    Ok(Ok(ack)) => TcpReply::Ack(ack),
                    Ok(Err(error)) => TcpReply::Error { error },
                    Err(e) => TcpReply::Error { error: e.to_string() },
                }
            }
            Err(e) => TcpReply::Error { error: format!("bad message: {e}") },
        };
        let mut out = serde_json::to_vec(&reply).expect("reply serializes");
        out.push(b'\n');
        w.write_all(&out).await?;
    }
    Ok(())
}

/// Accepts connections until `shutdown` flips to true.
pub async fn serve_ingest(
    listener: TcpListener,
    store: Arc<TimeSeriesStore>,
    cameras: HashMap<String, CameraId>,
    mut shutdown: watch::Receiver<bool>,
) -> std::io::Result<()> {
    let cameras = Arc::new(cameras);
    loop {
        tokio::select! {
            _ = shutdown.changed() => return Ok(()),
            accepted = listener.accept() => {
                let (conn, peer): (TcpStream, SocketAddr) = accepted?;
                let (store, cameras) = (store.clone(), cameras.clone());
                tokio::spawn(async move {
                    if let Err(e) = handle(conn, store, cameras).await {
                        tracing::debug!(%peer, "ingest connection closed: {e}");
                    }
                });
            }
        }
    }
}
