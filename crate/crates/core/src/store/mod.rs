//! Cloud-side time-series store for per-second flow records.
//!
//! One partition per camera. Each partition has an append log of checksummed
//! fixed-width records and a compacted, sorted block file; an in-memory tail
//! keeps the most recent horizon so that recent-window queries never read
//! disk. At most one record exists per (camera, second) and later upserts
//! replace earlier ones. Writes reach the log before the ingest call returns.

mod format;
pub mod nowcast;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub use format::{
    decode_block, decode_log, encode_block, encode_log_record, log_record_len, FormatError, BLOCK_HEADER_LEN,
    BLOCK_MAGIC, BLOCK_VERSION,
};
pub use nowcast::{NowcastFrame, NowcastHub, NowcastSubscription, SubscriberOverflow};

use crate::model::{CameraId, FlowRecord, StreamId};
use crate::worker::FlowSummary;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown camera {0}")]
    UnknownCamera(CameraId),
    #[error("malformed summary: {0}")]
    MalformedSummary(String),
    #[error("query range [{from}, {to}) is empty")]
    EmptyRange { from: u64, to: u64 },
    #[error("store layout mismatch: {0}")]
    Layout(String),
    #[error("corrupt block for camera {camera}: {source}")]
    Block {
        camera: CameraId,
        #[source]
        source: FormatError,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Durability {
    /// Written to the OS before ack; survives a process kill.
    Flush,
    /// fsync before ack; survives power loss.
    Fsync,
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub n_cameras: usize,
    pub n_classes: usize,
    pub tail_horizon_s: u64,
    /// Log records per partition that trigger compaction into the block file.
    pub compact_after: usize,
    pub durability: Durability,
    /// Records older than `latest - max_age_s` are purged at compaction.
    pub max_age_s: Option<u64>,
    pub nowcast_buffer: usize,
}

impl StoreConfig {
    pub fn new(n_cameras: usize, n_classes: usize) -> Self {
        Self {
            n_cameras,
            n_classes,
            tail_horizon_s: 1800,
            compact_after: 4096,
            durability: Durability::Flush,
            max_age_s: None,
            nowcast_buffer: 4096,
        }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Manifest {
    version: u32,
    n_cameras: usize,
    n_classes: usize,
}

struct Partition {
    camera: CameraId,
    log: File,
    log_path: PathBuf,
    block_path: PathBuf,
    log_records: usize,
    /// Records with `ts_s >= tail_floor`.
    tail: BTreeMap<u64, Vec<u32>>,
    tail_floor: u64,
    latest: Option<u64>,
    has_cold: bool,
}

/// `[camera][second][class]` counts plus a mask of seconds with no record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowMatrix {
    pub cameras: Vec<CameraId>,
    pub from_s: u64,
    pub to_s: u64,
    pub counts: Vec<Vec<Vec<u32>>>,
    pub missing: Vec<Vec<bool>>,
}

impl FlowMatrix {
    pub fn seconds(&self) -> usize {
        (self.to_s - self.from_s) as usize
    }

    /// Per-camera per-second totals across classes.
    pub fn totals(&self) -> Vec<Vec<u64>> {
        self.counts
            .iter()
            .map(|cam| cam.iter().map(|c| c.iter().map(|&v| v as u64).sum()).collect())
            .collect()
    }
}

pub struct TimeSeriesStore {
    dir: PathBuf,
    cfg: StoreConfig,
    partitions: Vec<Mutex<Partition>>,
    disk_reads: AtomicU64,
    records: AtomicU64,
    nowcast: NowcastHub,
}

fn read_file(path: &Path) -> std::io::Result<Option<Vec<u8>>> {
    match fs::read(path) {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

impl TimeSeriesStore {
    /// Opens or creates a store in `dir`, replaying logs of an existing one.
    pub fn open(dir: impl AsRef<Path>, cfg: StoreConfig) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let manifest = Manifest { version: 1, n_cameras: cfg.n_cameras, n_classes: cfg.n_classes };
        let manifest_path = dir.join("MANIFEST.json");
        match read_file(&manifest_path)? {
            Some(bytes) => {
                let found: Manifest = serde_json::from_slice(&bytes)
                    .map_err(|e| StoreError::Layout(format!("manifest: {e}")))?;
                if found != manifest {
                    return Err(StoreError::Layout(format!("{found:?} != {manifest:?}")));
                }
            }
            None => fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest).expect("manifest"))?,
        }

        let mut partitions = Vec::with_capacity(cfg.n_cameras);
        let mut total = 0u64;
        for cam in 0..cfg.n_cameras {
            let p = Self::open_partition(&dir, &cfg, StreamId(cam as u32))?;
            total += p.1;
            partitions.push(Mutex::new(p.0));
        }
        Ok(Self {
            nowcast: NowcastHub::new(cfg.nowcast_buffer),
            dir,
            cfg,
            partitions,
            disk_reads: AtomicU64::new(0),
            records: AtomicU64::new(total),
        })
    }

    fn open_partition(dir: &Path, cfg: &StoreConfig, cam: CameraId) -> Result<(Partition, u64), StoreError> {
        let log_path = dir.join(format!("cam-{:05}.log", cam.0));
        let block_path = dir.join(format!("cam-{:05}.blk", cam.0));
        let mut all = match read_file(&block_path)? {
            Some(b) => decode_block(&b, cfg.n_classes).map_err(|source| StoreError::Block { camera: cam, source })?,
            None => BTreeMap::new(),
        };
        let mut log_records = 0;
        if let Some(bytes) = read_file(&log_path)? {
            let (recs, valid) = decode_log(&bytes, cfg.n_classes);
            if valid < bytes.len() {
                tracing::warn!(camera = %cam, dropped = bytes.len() - valid, "truncating torn log tail");
                let f = OpenOptions::new().write(true).open(&log_path)?;
                f.set_len(valid as u64)?;
            }
            log_records = recs.len();
            all.extend(recs);
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        let latest = all.keys().next_back().copied();
        let tail_floor = latest.map_or(0, |l| l.saturating_sub(cfg.tail_horizon_s));
        let n = all.len() as u64;
        let tail = all.split_off(&tail_floor);
        let p = Partition {
            camera: cam,
            log,
            log_path,
            block_path,
            log_records,
            tail,
            tail_floor,
            latest,
            has_cold: !all.is_empty(),
        };
        Ok((p, n))
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn nowcast(&self) -> &NowcastHub {
        &self.nowcast
    }

    pub fn record_count(&self) -> u64 {
        self.records.load(Ordering::Relaxed)
    }

    /// Number of queries that had to read partition files.
    pub fn disk_reads(&self) -> u64 {
        self.disk_reads.load(Ordering::Relaxed)
    }

    fn partition(&self, cam: CameraId) -> Result<&Mutex<Partition>, StoreError> {
        self.partitions.get(cam.index()).ok_or(StoreError::UnknownCamera(cam))
    }

    /// Everything persisted for one partition, block merged with log.
    fn read_disk(&self, p: &Partition) -> Result<BTreeMap<u64, Vec<u32>>, StoreError> {
        self.disk_reads.fetch_add(1, Ordering::Relaxed);
        let cam = p.camera;
        let mut all = match read_file(&p.block_path)? {
            Some(b) => decode_block(&b, self.cfg.n_classes).map_err(|source| StoreError::Block { camera: cam, source })?,
            None => BTreeMap::new(),
        };
        let mut bytes = Vec::new();
        let mut f = File::open(&p.log_path)?;
        f.seek(SeekFrom::Start(0))?;
        f.read_to_end(&mut bytes)?;
        all.extend(decode_log(&bytes, self.cfg.n_classes).0);
        Ok(all)
    }

    /// Upserts every row of `summary`. Returns the number of rows acknowledged.
    pub fn ingest(&self, summary: &FlowSummary) -> Result<usize, StoreError> {
        if !summary.is_well_formed(self.cfg.n_classes) {
            return Err(StoreError::MalformedSummary(format!(
                "camera {} window {}+{}: {} rows",
                summary.camera_id,
                summary.window_start_s,
                summary.window_len_s,
                summary.rows.len()
            )));
        }
        let mut p = self.partition(summary.camera_id)?.lock();
        let mut buf = Vec::new();
        let mut changed: Vec<&FlowRecord> = Vec::new();
        let mut cold: Option<BTreeMap<u64, Vec<u32>>> = None;
        let mut new_records = 0u64;
        for r in &summary.rows {
            let existing = if r.ts_s >= p.tail_floor {
                p.tail.get(&r.ts_s).cloned()
            } else {
                if cold.is_none() {
                    cold = Some(self.read_disk(&p)?);
                }
                cold.as_ref().and_then(|c| c.get(&r.ts_s).cloned())
            };
            if existing.as_deref() == Some(&r.counts[..]) {
                continue;
            }
            if existing.is_none() {
                new_records += 1;
            }
            encode_log_record(r.ts_s, &r.counts, &mut buf);
            changed.push(r);
        }
        if !buf.is_empty() {
            p.log.write_all(&buf)?;
            p.log.flush()?;
            if self.cfg.durability == Durability::Fsync {
                p.log.sync_data()?;
            }
            p.log_records += changed.len();
            for r in &changed {
                if r.ts_s >= p.tail_floor {
                    p.tail.insert(r.ts_s, r.counts.clone());
                } else {
                    p.has_cold = true;
                }
                p.latest = Some(p.latest.map_or(r.ts_s, |l| l.max(r.ts_s)));
            }
            self.records.fetch_add(new_records, Ordering::Relaxed);
            self.evict_tail(&mut p);
            if p.log_records >= self.cfg.compact_after {
                self.compact_partition(&mut p)?;
            }
        }
        drop(p);
        if !changed.is_empty() {
            self.nowcast.publish(summary.camera_id, changed.iter().map(|r| (r.ts_s, r.counts.clone())));
        }
        Ok(summary.rows.len())
    }

    fn evict_tail(&self, p: &mut Partition) {
        let Some(latest) = p.latest else { return };
        let floor = latest.saturating_sub(self.cfg.tail_horizon_s);
        if floor > p.tail_floor {
            let keep = p.tail.split_off(&floor);
            if !p.tail.is_empty() {
                p.has_cold = true;
            }
            p.tail = keep;
            p.tail_floor = floor;
        }
    }

    fn compact_partition(&self, p: &mut Partition) -> Result<(), StoreError> {
        let mut all = self.read_disk(p)?;
        if let (Some(max_age), Some(latest)) = (self.cfg.max_age_s, p.latest) {
            let cutoff = latest.saturating_sub(max_age);
            let before = all.len();
            all = all.split_off(&cutoff);
            self.records.fetch_sub((before - all.len()) as u64, Ordering::Relaxed);
            if p.tail_floor < cutoff {
                p.tail = p.tail.split_off(&cutoff);
            }
        }
        let tmp = p.block_path.with_extension("blk.tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&encode_block(&all, self.cfg.n_classes))?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &p.block_path)?;
        p.log.set_len(0)?;
        p.log.sync_all()?;
        p.log_records = 0;
        p.has_cold = all.range(..p.tail_floor).next().is_some();
        Ok(())
    }

    /// Compacts every partition now.
    pub fn compact(&self) -> Result<(), StoreError> {
        for m in &self.partitions {
            let mut p = m.lock();
            self.compact_partition(&mut p)?;
        }
        Ok(())
    }

    /// Counts for `cameras` over `[from_s, to_s)`, zero-filled where missing.
    pub fn query(&self, cameras: &[CameraId], from_s: u64, to_s: u64) -> Result<FlowMatrix, StoreError> {
        if from_s >= to_s {
            return Err(StoreError::EmptyRange { from: from_s, to: to_s });
        }
        let secs = (to_s - from_s) as usize;
        let c = self.cfg.n_classes;
        let mut counts = Vec::with_capacity(cameras.len());
        let mut missing = Vec::with_capacity(cameras.len());
        for &cam in cameras {
            let p = self.partition(cam)?.lock();
            let mut rows = vec![vec![0u32; c]; secs];
            let mut mask = vec![true; secs];
            let mut fill = |ts: u64, v: &Vec<u32>| {
                let i = (ts - from_s) as usize;
                rows[i].clone_from(v);
                mask[i] = false;
            };
            if from_s < p.tail_floor && p.has_cold {
                let all = self.read_disk(&p)?;
                for (ts, v) in all.range(from_s..to_s.min(p.tail_floor)) {
                    fill(*ts, v);
                }
            }
            let lo = from_s.max(p.tail_floor);
            if lo < to_s {
                for (ts, v) in p.tail.range(lo..to_s) {
                    fill(*ts, v);
                }
            }
            counts.push(rows);
            missing.push(mask);
        }
        Ok(FlowMatrix { cameras: cameras.to_vec(), from_s, to_s, counts, missing })
    }

    /// Latest second with a record on any camera.
    pub fn latest_ts(&self) -> Option<u64> {
        self.partitions.iter().filter_map(|p| p.lock().latest).max()
    }

    pub fn subscribe_nowcast(&self, cameras: &[CameraId]) -> NowcastSubscription {
        self.nowcast.subscribe(cameras)
    }

    /// Byte contents of every partition file, for equality checks.
    pub fn snapshot_files(&self) -> Result<BTreeMap<String, Vec<u8>>, StoreError> {
        let mut out = BTreeMap::new();
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            if entry.file_type()?.is_file() {
                out.insert(entry.file_name().to_string_lossy().into_owned(), fs::read(entry.path())?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use proptest::prelude::*;

    use super::*;
    use crate::model::StreamId;

    fn summary(cam: u32, start: u64, len: u32, f: impl Fn(u64) -> Vec<u32>) -> FlowSummary {
        FlowSummary {
            camera_id: StreamId(cam),
            window_start_s: start,
            window_len_s: len,
            rows: (0..len as u64)
                .map(|i| FlowRecord { ts_s: start + i, camera_id: StreamId(cam), counts: f(start + i) })
                .collect(),
        }
    }

    fn cfg() -> StoreConfig {
        StoreConfig { compact_after: 40, tail_horizon_s: 60, ..StoreConfig::new(3, 2) }
    }

    #[test]
    fn ingest_acks_rows_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let store = TimeSeriesStore::open(dir.path(), cfg()).unwrap();
        let s = summary(0, 0, 15, |t| vec![t as u32, 1]);
        assert_eq!(store.ingest(&s).unwrap(), 15);
        let before = store.snapshot_files().unwrap();
        assert_eq!(store.ingest(&s).unwrap(), 15);
        assert_eq!(store.snapshot_files().unwrap(), before);
        assert_eq!(store.record_count(), 15);
    }

    #[test]
    fn rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let store = TimeSeriesStore::open(dir.path(), cfg()).unwrap();
        let mut s = summary(0, 0, 15, |_| vec![0, 0]);
        s.rows.pop();
        assert!(matches!(store.ingest(&s), Err(StoreError::MalformedSummary(_))));
        let s = summary(7, 0, 5, |_| vec![0, 0]);
        assert!(matches!(store.ingest(&s), Err(StoreError::UnknownCamera(StreamId(7)))));
        assert!(matches!(store.query(&[StreamId(0)], 5, 5), Err(StoreError::EmptyRange { .. })));
        assert!(matches!(store.query(&[StreamId(9)], 0, 5), Err(StoreError::UnknownCamera(_))));
    }

    #[test]
    fn query_zero_fills_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        let store = TimeSeriesStore::open(dir.path(), cfg()).unwrap();
        store.ingest(&summary(1, 10, 5, |t| vec![1, t as u32])).unwrap();
        let m = store.query(&[StreamId(1), StreamId(2)], 8, 16).unwrap();
        assert_eq!(m.counts[0][0], vec![0, 0]);
        assert!(m.missing[0][0] && m.missing[0][1]);
        assert_eq!(m.counts[0][2], vec![1, 10]);
        assert!(!m.missing[0][2]);
        assert!(m.missing[0][7]);
        assert!(m.missing[1].iter().all(|&x| x));
    }

    #[test]
    fn tail_queries_avoid_disk_and_cold_queries_read_it() {
        let dir = tempfile::tempdir().unwrap();
        let store = TimeSeriesStore::open(dir.path(), cfg()).unwrap();
        for w in 0..20 {
            store.ingest(&summary(0, w * 15, 15, |t| vec![t as u32, 0])).unwrap();
        }
        // latest = 299, horizon 60 → tail covers [239, 300)
        let reads = store.disk_reads();
        let m = store.query(&[StreamId(0)], 250, 300).unwrap();
        assert_eq!(store.disk_reads(), reads);
        assert_eq!(m.counts[0][0], vec![250, 0]);
        let m = store.query(&[StreamId(0)], 0, 300).unwrap();
        assert!(store.disk_reads() > reads);
        assert!(m.missing[0].iter().all(|x| !x));
        assert!(m.counts[0].iter().enumerate().all(|(i, c)| c[0] == i as u32));
    }

    #[test]
    fn restart_recovers_acked_records() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = TimeSeriesStore::open(dir.path(), cfg()).unwrap();
            for w in 0..7 {
                store.ingest(&summary(2, w * 5, 5, |t| vec![1, t as u32])).unwrap();
            }
            // dropped without compaction or any shutdown hook
        }
        // torn partial write after the last ack
        let log = dir.path().join("cam-00002.log");
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(&[1, 2, 3]).unwrap();
        drop(f);

        let store = TimeSeriesStore::open(dir.path(), cfg()).unwrap();
        assert_eq!(store.record_count(), 35);
        let m = store.query(&[StreamId(2)], 0, 35).unwrap();
        assert!(m.missing[0].iter().all(|x| !x));
        assert_eq!(m.counts[0][34], vec![1, 34]);
    }

    #[test]
    fn max_age_purge() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg();
        c.max_age_s = Some(100);
        let store = TimeSeriesStore::open(dir.path(), c).unwrap();
        for w in 0..20 {
            store.ingest(&summary(0, w * 15, 15, |_| vec![1, 1])).unwrap();
        }
        store.compact().unwrap();
        let m = store.query(&[StreamId(0)], 0, 300).unwrap();
        assert!(m.missing[0][..199].iter().all(|x| *x));
        assert!(m.missing[0][199..].iter().all(|x| !x));
        assert_eq!(store.record_count(), 101);
    }

    #[test]
    fn layout_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        TimeSeriesStore::open(dir.path(), cfg()).unwrap();
        let other = StoreConfig::new(3, 5);
        assert!(matches!(TimeSeriesStore::open(dir.path(), other), Err(StoreError::Layout(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        // Random upserts, queried against a plain map oracle, before and
        // after a restart.
        #[test]
        fn query_matches_oracle(
            ops in proptest::collection::vec((0u32..3, 0u64..40, 0u32..4), 1..60),
            q in (0u64..200, 1u64..200),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let store = TimeSeriesStore::open(dir.path(), cfg()).unwrap();
            let mut oracle: HashMap<(u32, u64), Vec<u32>> = HashMap::new();
            for (cam, window, v) in &ops {
                let s = summary(*cam, window * 5, 5, |t| vec![*v, t as u32]);
                store.ingest(&s).unwrap();
                for r in &s.rows {
                    oracle.insert((*cam, r.ts_s), r.counts.clone());
                }
            }
            let check = |store: &TimeSeriesStore| -> Result<(), TestCaseError> {
                let (from, to) = (q.0, q.0 + q.1);
                let cams = [StreamId(0), StreamId(1), StreamId(2)];
                let m = store.query(&cams, from, to).unwrap();
                for (ci, cam) in cams.iter().enumerate() {
                    for t in from..to {
                        let i = (t - from) as usize;
                        match oracle.get(&(cam.0, t)) {
                            Some(v) => {
                                prop_assert_eq!(&m.counts[ci][i], v);
                                prop_assert!(!m.missing[ci][i]);
                            }
                            None => {
                                prop_assert_eq!(&m.counts[ci][i], &vec![0, 0]);
                                prop_assert!(m.missing[ci][i]);
                            }
                        }
                    }
                }
                prop_assert_eq!(store.record_count(), oracle.len() as u64);
                Ok(())
            };
            check(&store)?;
            drop(store);
            check(&TimeSeriesStore::open(dir.path(), cfg()).unwrap())?;
        }
    }
}
