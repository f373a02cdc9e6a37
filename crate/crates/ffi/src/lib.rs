//! C ABI over the placement scheduler, mass-conserving flow allocation,
//! congestion discretization and FedAvg.
//!
//! Every function returns a [`CfStatus`]. On failure a message describing
//! the error is kept per thread and can be read with
//! [`cf_last_error_message`]. Handles are opaque and must be released with
//! their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cityfabric::fl::{fedavg, ClientUpdate, ModelWeights};
use cityfabric::graph::{allocate_edge_flows, coarsen, discretize, AllocationConfig, CoarseGraph, RoadGraph, RoadGraphSpec, Thresholds};
use cityfabric::model::StreamId;
use cityfabric::scheduler::{default_fleet, metrics, DeviceProfile, Fleet, Placement, PlacementPolicy, SchedulerError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ParseError = 3,
    CapacityExhausted = 4,
    UnknownStream = 5,
    AlreadyPlaced = 6,
    BufferTooSmall = 7,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfPolicy {
    BestFit = 0,
    WorstFit = 1,
}

impl From<CfPolicy> for PlacementPolicy {
    fn from(p: CfPolicy) -> Self {
        match p {
            CfPolicy::BestFit => PlacementPolicy::BestFit,
            CfPolicy::WorstFit => PlacementPolicy::WorstFit,
        }
    }
}

/// Fleet-level figures for the current placement.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CfMetrics {
    pub active_capacity_tops: f64,
    pub utilization_pct: f64,
    pub total_power_w: f64,
    pub cumulative_fps: u64,
    pub active_devices: u32,
    pub max_device_utilization_pct: f64,
}

/// A device fleet and the streams placed on it.
pub struct CfScheduler {
    fleet: Fleet,
    placement: Placement,
}

/// A coarsened road graph.
pub struct CfGraph {
    coarse: CoarseGraph,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: CfStatus, msg: impl Into<String>) -> CfStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> CfStatus) -> CfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(CfStatus::Panic, "internal panic"))
}

fn scheduler_status(e: &SchedulerError) -> CfStatus {
    match e {
        SchedulerError::CapacityExhausted { .. } => CfStatus::CapacityExhausted,
        SchedulerError::UnknownStream(_) => CfStatus::UnknownStream,
        SchedulerError::AlreadyPlaced(_) => CfStatus::AlreadyPlaced,
        _ => CfStatus::InvalidArgument,
    }
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, CfStatus> {
    if s.is_null() {
        return Err(fail(CfStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(s).to_str().map_err(|_| fail(CfStatus::InvalidArgument, "string is not UTF-8"))
}

/// Message of the last failed call on this thread, or null if it succeeded.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---------------------------------------------------------------- scheduler

fn new_scheduler(fleet: Fleet, out: *mut *mut CfScheduler) -> CfStatus {
    let placement = Placement::new(&fleet);
    // SAFETY: checked non-null by callers
    unsafe { *out = Box::into_raw(Box::new(CfScheduler { fleet, placement })) };
    CfStatus::Ok
}

/// Scheduler over the default testbed of five 200-FPS and four 400-FPS devices.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_scheduler_new_default(out: *mut *mut CfScheduler) -> CfStatus {
    guard(|| {
        if out.is_null() {
            return fail(CfStatus::NullPointer, "out is null");
        }
        new_scheduler(default_fleet(), out)
    })
}

/// Scheduler over a JSON array of devices, each
/// `{"id", "model", "fps_capacity", "tops", "power_idle_w", "power_per_fps_w"}`.
///
/// # Safety
/// `devices_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_scheduler_new(devices_json: *const c_char, out: *mut *mut CfScheduler) -> CfStatus {
    guard(|| {
        if out.is_null() {
            return fail(CfStatus::NullPointer, "out is null");
        }
        let text = match read_str(devices_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let devices: Vec<DeviceProfile> = match serde_json::from_str(text) {
            Ok(d) => d,
            Err(e) => return fail(CfStatus::ParseError, e.to_string()),
        };
        match Fleet::new(devices) {
            Ok(fleet) => new_scheduler(fleet, out),
            Err(e) => fail(CfStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `h` must be null or a handle from `cf_scheduler_new*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cf_scheduler_free(h: *mut CfScheduler) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Number of devices; devices are indexed `0..n` in id order.
///
/// # Safety
/// `h` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_scheduler_device_count(h: *const CfScheduler, out: *mut usize) -> CfStatus {
    guard(|| {
        let (Some(s), false) = (h.as_ref(), out.is_null()) else {
            return fail(CfStatus::NullPointer, "null argument");
        };
        *out = s.fleet.len();
        CfStatus::Ok
    })
}

/// Copies the id of device `index` into `buf` as a NUL-terminated string.
/// `BufferTooSmall` leaves `buf` untouched.
///
/// # Safety
/// `h` must be a live handle and `buf` valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cf_scheduler_device_id(h: *const CfScheduler, index: u32, buf: *mut c_char, len: usize) -> CfStatus {
    guard(|| {
        let (Some(s), false) = (h.as_ref(), buf.is_null()) else {
            return fail(CfStatus::NullPointer, "null argument");
        };
        let Some(dev) = s.fleet.devices().get(index as usize) else {
            return fail(CfStatus::InvalidArgument, format!("no device {index}"));
        };
        let bytes = dev.device_id.as_bytes();
        if bytes.len() + 1 > len {
            return fail(CfStatus::BufferTooSmall, format!("need {} bytes", bytes.len() + 1));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
        *buf.add(bytes.len()) = 0;
        CfStatus::Ok
    })
}

/// Places `stream` with `fps` under `policy`; writes the chosen device index.
///
/// # Safety
/// `h` must be a live handle; `device_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn cf_scheduler_assign(
    h: *mut CfScheduler,
    stream: u32,
    fps: u32,
    policy: CfPolicy,
    device_out: *mut u32,
) -> CfStatus {
    guard(|| {
        let Some(s) = h.as_mut() else {
            return fail(CfStatus::NullPointer, "null handle");
        };
        if fps == 0 {
            return fail(CfStatus::InvalidArgument, "fps must be positive");
        }
        match s.placement.assign(&s.fleet, StreamId(stream), fps, policy.into()) {
            Ok(d) => {
                if !device_out.is_null() {
                    *device_out = d.0;
                }
                CfStatus::Ok
            }
            Err(e) => fail(scheduler_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cf_scheduler_remove(h: *mut CfScheduler, stream: u32) -> CfStatus {
    guard(|| {
        let Some(s) = h.as_mut() else {
            return fail(CfStatus::NullPointer, "null handle");
        };
        match s.placement.remove(StreamId(stream)) {
            Ok(_) => CfStatus::Ok,
            Err(e) => fail(scheduler_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `h` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_scheduler_metrics(h: *const CfScheduler, out: *mut CfMetrics) -> CfStatus {
    guard(|| {
        let (Some(s), false) = (h.as_ref(), out.is_null()) else {
            return fail(CfStatus::NullPointer, "null argument");
        };
        let m = metrics(&s.placement, &s.fleet);
        *out = CfMetrics {
            active_capacity_tops: m.active_capacity_tops,
            utilization_pct: m.utilization_pct,
            total_power_w: m.total_power_w,
            cumulative_fps: m.cumulative_fps,
            active_devices: m.active_devices as u32,
            max_device_utilization_pct: m.max_device_utilization_pct,
        };
        CfStatus::Ok
    })
}

// ---------------------------------------------------------------- graph

/// Coarsens a road graph given as `{"vertices": [{"id", "camera"}], "edges": [[a, b]]}`.
///
/// # Safety
/// `road_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_graph_from_json(road_json: *const c_char, out: *mut *mut CfGraph) -> CfStatus {
    guard(|| {
        if out.is_null() {
            return fail(CfStatus::NullPointer, "out is null");
        }
        let text = match read_str(road_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let spec: RoadGraphSpec = match serde_json::from_str(text) {
            Ok(s) => s,
            Err(e) => return fail(CfStatus::ParseError, e.to_string()),
        };
        match RoadGraph::from_spec(&spec).and_then(|g| coarsen(&g)) {
            Ok(coarse) => {
                *out = Box::into_raw(Box::new(CfGraph { coarse }));
                CfStatus::Ok
            }
            Err(e) => fail(CfStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `g` must be null or a handle from `cf_graph_from_json` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cf_graph_free(g: *mut CfGraph) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Coarse vertex and super-edge counts.
///
/// # Safety
/// `g` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_graph_size(g: *const CfGraph, vertices: *mut usize, edges: *mut usize) -> CfStatus {
    guard(|| {
        let (Some(g), false, false) = (g.as_ref(), vertices.is_null(), edges.is_null()) else {
            return fail(CfStatus::NullPointer, "null argument");
        };
        *vertices = g.coarse.len();
        *edges = g.coarse.edges().len();
        CfStatus::Ok
    })
}

/// Splits per-vertex counts over super-edges. `counts` has one entry per
/// coarse vertex, `flows_out` one per super-edge; counts at vertices without
/// super-edges go to `residue_out`.
///
/// # Safety
/// `g` must be a live handle and the arrays valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn cf_graph_allocate(
    g: *const CfGraph,
    counts: *const f64,
    n_counts: usize,
    flows_out: *mut f64,
    n_flows: usize,
    residue_out: *mut f64,
) -> CfStatus {
    guard(|| {
        let (Some(g), false, false, false) = (g.as_ref(), counts.is_null(), flows_out.is_null(), residue_out.is_null()) else {
            return fail(CfStatus::NullPointer, "null argument");
        };
        if n_flows != g.coarse.edges().len() {
            return fail(CfStatus::InvalidArgument, format!("expected {} flows, got {n_flows}", g.coarse.edges().len()));
        }
        let counts = std::slice::from_raw_parts(counts, n_counts);
        match allocate_edge_flows(counts, &g.coarse, AllocationConfig::default()) {
            Ok(a) => {
                std::slice::from_raw_parts_mut(flows_out, n_flows).copy_from_slice(&a.flows);
                *residue_out = a.residue;
                CfStatus::Ok
            }
            Err(e) => fail(CfStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Congestion state of a flow: 0 free flow, 1 moderate, 2 heavy.
///
/// # Safety
/// `state_out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_discretize(flow: f64, t1: f64, t2: f64, state_out: *mut u8) -> CfStatus {
    guard(|| {
        if state_out.is_null() {
            return fail(CfStatus::NullPointer, "state_out is null");
        }
        let th = match Thresholds::new(t1, t2) {
            Ok(t) => t,
            Err(e) => return fail(CfStatus::InvalidArgument, e.to_string()),
        };
        *state_out = discretize(flow, th).code();
        CfStatus::Ok
    })
}

// ---------------------------------------------------------------- federated averaging

/// Sample-weighted average of `k` weight vectors of length `dim`, stored
/// row-major in `weights`. Clients with zero samples carry no weight.
///
/// # Safety
/// `weights` must hold `k * dim` values, `n_samples` `k` values and `out` `dim` values.
#[no_mangle]
pub unsafe extern "C" fn cf_fedavg(weights: *const f64, n_samples: *const u64, k: usize, dim: usize, out: *mut f64) -> CfStatus {
    guard(|| {
        if weights.is_null() || n_samples.is_null() || out.is_null() {
            return fail(CfStatus::NullPointer, "null argument");
        }
        if k == 0 || dim == 0 {
            return fail(CfStatus::InvalidArgument, "k and dim must be positive");
        }
        let Some(total) = k.checked_mul(dim) else {
            return fail(CfStatus::InvalidArgument, "k * dim overflows");
        };
        let w = std::slice::from_raw_parts(weights, total);
        let n = std::slice::from_raw_parts(n_samples, k);
        let updates: Vec<ClientUpdate> = (0..k)
            .map(|i| ClientUpdate {
                client_id: i.to_string(),
                weights: ModelWeights(w[i * dim..(i + 1) * dim].to_vec()),
                n_samples: n[i],
            })
            .collect();
        match fedavg(&updates) {
            Ok(avg) => {
                std::slice::from_raw_parts_mut(out, dim).copy_from_slice(&avg.0);
                CfStatus::Ok
            }
            Err(e) => fail(CfStatus::InvalidArgument, e.to_string()),
        }
    })
}
