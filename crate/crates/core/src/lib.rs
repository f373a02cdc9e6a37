//! Edge-to-cloud traffic analytics for camera fleets: stream emulation,
//! accelerator placement, windowed flow aggregation, time-series storage,
//! graph-based congestion forecasting and federated fine-tuning.

pub mod emulator;
pub mod fl;
pub mod gateway;
pub mod forecast;
pub mod graph;
pub mod model;
pub mod rng;
pub mod scenario;
pub mod scheduler;
pub mod store;
pub mod worker;
