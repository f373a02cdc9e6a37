//! Event wire format between the emulator and an edge worker.
//!
//! Binary framing: a little-endian `u32` payload length followed by a 38-byte
//! payload `{stream_id: u32, ts_ms: u64, tracking_id: u64, class_idx: u16,
//! x: f32, y: f32, w: f32, h: f32}`, all little-endian. The debug encoding is
//! one JSON object per line with the same fields.

use std::io::{self, BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::model::{BBox, DetectionEvent, StreamId, VehicleClass};

pub const EVENT_PAYLOAD_LEN: usize = 38;

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("frame length {0} does not match the event payload length")]
    BadLength(u32),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn encode_event(e: &DetectionEvent, out: &mut Vec<u8>) {
    out.extend_from_slice(&(EVENT_PAYLOAD_LEN as u32).to_le_bytes());
    out.extend_from_slice(&e.stream_id.0.to_le_bytes());
    out.extend_from_slice(&e.ts_ms.to_le_bytes());
    out.extend_from_slice(&e.tracking_id.to_le_bytes());
    out.extend_from_slice(&e.class.0.to_le_bytes());
    for v in [e.bbox.x, e.bbox.y, e.bbox.w, e.bbox.h] {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn decode_payload(p: &[u8; EVENT_PAYLOAD_LEN]) -> DetectionEvent {
    let u32_at = |i: usize| u32::from_le_bytes(p[i..i + 4].try_into().unwrap());
    let u64_at = |i: usize| u64::from_le_bytes(p[i..i + 8].try_into().unwrap());
    let f32_at = |i: usize| f32::from_le_bytes(p[i..i + 4].try_into().unwrap());
    DetectionEvent {
        stream_id: StreamId(u32_at(0)),
        ts_ms: u64_at(4),
        tracking_id: u64_at(12),
        class: VehicleClass(u16::from_le_bytes([p[20], p[21]])),
        bbox: BBox { x: f32_at(22), y: f32_at(26), w: f32_at(30), h: f32_at(34) },
    }
}

/// Reads one framed event; `Ok(None)` on a clean end of stream.
pub fn read_event<R: Read>(r: &mut R) -> Result<Option<DetectionEvent>, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len);
    if len as usize != EVENT_PAYLOAD_LEN {
        return Err(WireError::BadLength(len));
    }
    let mut payload = [0u8; EVENT_PAYLOAD_LEN];
    r.read_exact(&mut payload)?;
    Ok(Some(decode_payload(&payload)))
}

pub fn decode_all(mut bytes: &[u8]) -> Result<Vec<DetectionEvent>, WireError> {
    let mut out = Vec::with_capacity(bytes.len() / (EVENT_PAYLOAD_LEN + 4));
    while let Some(e) = read_event(&mut bytes)? {
        out.push(e);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct JsonEvent {
    stream_id: u32,
    ts_ms: u64,
    tracking_id: u64,
    class_idx: u16,
    bbox: [f32; 4],
}

pub fn write_ndjson<W: Write>(w: &mut W, e: &DetectionEvent) -> Result<(), WireError> {
    let j = JsonEvent {
        stream_id: e.stream_id.0,
        ts_ms: e.ts_ms,
        tracking_id: e.tracking_id,
        class_idx: e.class.0,
        bbox: [e.bbox.x, e.bbox.y, e.bbox.w, e.bbox.h],
    };
    serde_json::to_writer(&mut *w, &j)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_ndjson<R: BufRead>(r: R) -> Result<Vec<DetectionEvent>, WireError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let j: JsonEvent = serde_json::from_str(&line)?;
        out.push(DetectionEvent {
            stream_id: StreamId(j.stream_id),
            ts_ms: j.ts_ms,
            tracking_id: j.tracking_id,
            class: VehicleClass(j.class_idx),
            bbox: BBox { x: j.bbox[0], y: j.bbox[1], w: j.bbox[2], h: j.bbox[3] },
        });
    }
    Ok(out)
}
