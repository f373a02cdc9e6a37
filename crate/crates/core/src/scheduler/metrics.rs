use serde::{Deserialize, Serialize};

use super::{Fleet, Placement};

/// Fleet-level load and power figures for one placement snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SchedulerMetrics {
    /// Sum of TOPS over active devices.
    pub active_capacity_tops: f64,
    /// Load relative to the FPS capacity of active devices, in percent.
    pub utilization_pct: f64,
    pub total_power_w: f64,
    pub cumulative_fps: u64,
    pub active_devices: usize,
    /// Highest used/capacity ratio of any single device, in percent.
    pub max_device_utilization_pct: f64,
}

pub fn metrics(p: &Placement, fleet: &Fleet) -> SchedulerMetrics {
    let mut m = SchedulerMetrics::default();
    let mut active_cap = 0u64;
    for d in p.active_devices() {
        let dev = fleet.device(d);
        let used = p.used_fps(d);
        m.active_capacity_tops += dev.tops;
        m.total_power_w += dev.power_idle_w + dev.power_per_fps_w * used as f64;
        m.cumulative_fps += used as u64;
        m.active_devices += 1;
        active_cap += dev.fps_capacity as u64;
        let u = 100.0 * used as f64 / dev.fps_capacity as f64;
        m.max_device_utilization_pct = m.max_device_utilization_pct.max(u);
    }
    if active_cap > 0 {
        m.utilization_pct = 100.0 * m.cumulative_fps as f64 / active_cap as f64;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StreamId;
    use crate::scheduler::{default_fleet, DeviceProfile, PlacementPolicy};

    #[test]
    fn empty_placement_is_zero() {
        let f = default_fleet();
        assert_eq!(metrics(&Placement::new(&f), &f), SchedulerMetrics::default());
    }

    #[test]
    fn single_device_arithmetic() {
        let f = Fleet::new(vec![DeviceProfile {
            device_id: "A".into(),
            model_name: "m".into(),
            fps_capacity: 200,
            tops: 50.0,
            power_idle_w: 20.0,
            power_per_fps_w: 0.1,
        }])
        .unwrap();
        let mut p = Placement::new(&f);
        p.assign(&f, StreamId(0), 100, PlacementPolicy::BestFit).unwrap();
        let m = metrics(&p, &f);
        assert_eq!(m.active_capacity_tops, 50.0);
        assert_eq!(m.utilization_pct, 50.0);
        assert!((m.total_power_w - 30.0).abs() < 1e-12);
        assert_eq!(m.cumulative_fps, 100);
    }

    #[test]
    fn calibrated_power_at_32_streams() {
        let f = default_fleet();
        let power = |policy| {
            let mut p = Placement::new(&f);
            for s in 0..32 {
                p.assign(&f, StreamId(s), 25, policy).unwrap();
            }
            metrics(&p, &f).total_power_w
        };
        let best = power(PlacementPolicy::BestFit);
        let worst = power(PlacementPolicy::WorstFit);
        assert!((best - 249.6).abs() < 1e-9, "{best}");
        assert!((worst - 231.6).abs() < 1e-9, "{worst}");
    }
}
