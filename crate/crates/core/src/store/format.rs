//! On-disk encodings. All integers little-endian.
//!
//! Log record (fixed width `12 + 4C` bytes):
//! `ts_s: u64 | counts: [u32; C] | crc32: u32` where the CRC-32 (IEEE) covers
//! the preceding `8 + 4C` bytes.
//!
//! Block file: a 32-byte header
//! `magic: [u8; 8] = "CFBLK001" | version: u16 = 1 | n_classes: u16 |
//! n_rows: u32 | min_ts: u64 | max_ts: u64`, then `n_rows` rows of
//! `ts_s: u64 | counts: [u32; C]` strictly ascending in `ts_s`, then a
//! `crc32: u32` over all row bytes.

use std::collections::BTreeMap;

pub const BLOCK_MAGIC: &[u8; 8] = b"CFBLK001";
pub const BLOCK_VERSION: u16 = 1;
pub const BLOCK_HEADER_LEN: usize = 32;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FormatError {
    #[error("bad block magic")]
    Magic,
    #[error("unsupported block version {0}")]
    Version(u16),
    #[error("block has {got} classes, store has {expected}")]
    Classes { got: u16, expected: usize },
    #[error("block truncated")]
    Truncated,
    #[error("block checksum mismatch")]
    Checksum,
    #[error("block rows not strictly ascending")]
    Order,
}

pub fn log_record_len(n_classes: usize) -> usize {
    12 + 4 * n_classes
}

pub fn encode_log_record(ts_s: u64, counts: &[u32], out: &mut Vec<u8>) {
    let start = out.len();
    out.extend_from_slice(&ts_s.to_le_bytes());
    for c in counts {
        out.extend_from_slice(&c.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

/// Decodes complete, checksummed records. Returns them with the byte length
/// of the valid prefix; anything after it is a torn or corrupt tail.
pub fn decode_log(bytes: &[u8], n_classes: usize) -> (Vec<(u64, Vec<u32>)>, usize) {
    let len = log_record_len(n_classes);
    let mut out = Vec::with_capacity(bytes.len() / len);
    let mut valid = 0;
    for rec in bytes.chunks_exact(len) {
        let body = &rec[..len - 4];
        let crc = u32::from_le_bytes(rec[len - 4..].try_into().unwrap());
        if crc32fast::hash(body) != crc {
            break;
        }
        let ts = u64::from_le_bytes(body[..8].try_into().unwrap());
        let counts = body[8..].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((ts, counts));
        valid += len;
    }
    (out, valid)
}

pub fn encode_block(rows: &BTreeMap<u64, Vec<u32>>, n_classes: usize) -> Vec<u8> {
    let row_len = 8 + 4 * n_classes;
    let mut out = Vec::with_capacity(BLOCK_HEADER_LEN + rows.len() * row_len + 4);
    out.extend_from_slice(BLOCK_MAGIC);
    out.extend_from_slice(&BLOCK_VERSION.to_le_bytes());
    out.extend_from_slice(&(n_classes as u16).to_le_bytes());
    out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    let min = rows.keys().next().copied().unwrap_or(0);
    let max = rows.keys().next_back().copied().unwrap_or(0);
    out.extend_from_slice(&min.to_le_bytes());
    out.extend_from_slice(&max.to_le_bytes());
    for (ts, counts) in rows {
        out.extend_from_slice(&ts.to_le_bytes());
        for c in counts {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[BLOCK_HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_block(bytes: &[u8], n_classes: usize) -> Result<BTreeMap<u64, Vec<u32>>, FormatError> {
    if bytes.len() < BLOCK_HEADER_LEN + 4 {
        return Err(FormatError::Truncated);
    }
    if &bytes[..8] != BLOCK_MAGIC {
        return Err(FormatError::Magic);
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != BLOCK_VERSION {
        return Err(FormatError::Version(version));
    }
    let classes = u16::from_le_bytes([bytes[10], bytes[11]]);
    if classes as usize != n_classes {
        return Err(FormatError::Classes { got: classes, expected: n_classes });
    }
    let n_rows = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let row_len = 8 + 4 * n_classes;
    let body_end = BLOCK_HEADER_LEN + n_rows * row_len;
    if bytes.len() != body_end + 4 {
        return Err(FormatError::Truncated);
    }
    let crc = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    if crc32fast::hash(&bytes[BLOCK_HEADER_LEN..body_end]) != crc {
        return Err(FormatError::Checksum);
    }
    let mut rows = BTreeMap::new();
    let mut prev: Option<u64> = None;
    for row in bytes[BLOCK_HEADER_LEN..body_end].chunks_exact(row_len) {
        let ts = u64::from_le_bytes(row[..8].try_into().unwrap());
        if prev.is_some_and(|p| p >= ts) {
            return Err(FormatError::Order);
        }
        prev = Some(ts);
        let counts = row[8..].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        rows.insert(ts, counts);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn block_and_log_roundtrip(rows in proptest::collection::btree_map(any::<u64>(), proptest::collection::vec(any::<u32>(), 3), 0..50)) {
            let bytes = encode_block(&rows, 3);
            prop_assert_eq!(bytes.len(), 32 + rows.len() * 20 + 4);
            prop_assert_eq!(decode_block(&bytes, 3).unwrap(), rows.clone());

            let mut log = Vec::new();
            for (ts, c) in &rows {
                encode_log_record(*ts, c, &mut log);
            }
            let (decoded, valid) = decode_log(&log, 3);
            prop_assert_eq!(valid, log.len());
            prop_assert_eq!(decoded, rows.into_iter().collect::<Vec<_>>());
        }
    }

    #[test]
    fn block_header_layout() {
        let mut rows = BTreeMap::new();
        rows.insert(5u64, vec![1u32, 2]);
        rows.insert(9u64, vec![3u32, 4]);
        let b = encode_block(&rows, 2);
        assert_eq!(&b[..8], b"CFBLK001");
        assert_eq!(&b[8..10], &[1, 0]);
        assert_eq!(&b[10..12], &[2, 0]);
        assert_eq!(&b[12..16], &[2, 0, 0, 0]);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 5);
        assert_eq!(u64::from_le_bytes(b[24..32].try_into().unwrap()), 9);
        assert_eq!(u64::from_le_bytes(b[32..40].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(b[40..44].try_into().unwrap()), 1);
    }

    #[test]
    fn torn_log_tail_is_ignored() {
        let mut log = Vec::new();
        encode_log_record(1, &[1, 2], &mut log);
        encode_log_record(2, &[3, 4], &mut log);
        let full = log.len();
        log.truncate(full - 3);
        let (recs, valid) = decode_log(&log, 2);
        assert_eq!(recs, vec![(1, vec![1, 2])]);
        assert_eq!(valid, 20);
    }

    #[test]
    fn corrupt_block_detected() {
        let mut rows = BTreeMap::new();
        rows.insert(1u64, vec![7u32]);
        let mut b = encode_block(&rows, 1);
        b[36] ^= 1;
        assert_eq!(decode_block(&b, 1), Err(FormatError::Checksum));
        assert_eq!(decode_block(&b[..10], 1), Err(FormatError::Truncated));
        assert_eq!(decode_block(&encode_block(&rows, 1), 2), Err(FormatError::Classes { got: 1, expected: 2 }));
    }
}
