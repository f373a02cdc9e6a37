use serde::{Deserialize, Serialize};

use super::GraphError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CongestionState {
    FreeFlow,
    Moderate,
    Heavy,
}

impl CongestionState {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::FreeFlow => "free_flow",
            Self::Moderate => "moderate",
            Self::Heavy => "heavy",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub t1: f64,
    pub t2: f64,
}

impl Thresholds {
    pub fn new(t1: f64, t2: f64) -> Result<Self, GraphError> {
        let t = Self { t1, t2 };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.t1 > 0.0 && self.t1 < self.t2 && self.t2.is_finite() {
            Ok(())
        } else {
            Err(GraphError::Thresholds { t1: self.t1, t2: self.t2 })
        }
    }
}

/// Boundary values map upward: `t1` is Moderate, `t2` is Heavy.
pub fn discretize(flow: f64, th: Thresholds) -> CongestionState {
    if flow >= th.t2 {
        CongestionState::Heavy
    } else if flow >= th.t1 {
        CongestionState::Moderate
    } else {
        CongestionState::FreeFlow
    }
}

fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// 33rd and 66th percentiles (nearest rank) of historical edge flows,
/// nudged apart when the data is too flat to separate them.
pub fn calibrate_thresholds(flows: &[f64]) -> Result<Thresholds, GraphError> {
    let mut sorted: Vec<f64> = flows.iter().copied().filter(|f| f.is_finite() && *f >= 0.0).collect();
    if sorted.is_empty() {
        return Err(GraphError::Thresholds { t1: 0.0, t2: 0.0 });
    }
    sorted.sort_by(f64::total_cmp);
    let mut t1 = nearest_rank(&sorted, 33.0);
    let mut t2 = nearest_rank(&sorted, 66.0);
    if t1 <= 0.0 {
        t1 = f64::MIN_POSITIVE.max(t2 / 2.0).max(1e-6);
    }
    if t2 <= t1 {
        t2 = t1 * 2.0;
    }
    Thresholds::new(t1, t2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let th = Thresholds::new(30.0, 80.0).unwrap();
        assert_eq!(discretize(0.0, th), CongestionState::FreeFlow);
        assert_eq!(discretize(29.999, th), CongestionState::FreeFlow);
        assert_eq!(discretize(30.0, th), CongestionState::Moderate);
        assert_eq!(discretize(80.0, th), CongestionState::Heavy);
        assert_eq!(discretize(200.0, th), CongestionState::Heavy);
    }

    #[test]
    fn invalid_thresholds() {
        assert!(Thresholds::new(0.0, 1.0).is_err());
        assert!(Thresholds::new(5.0, 5.0).is_err());
        assert!(Thresholds::new(6.0, 5.0).is_err());
    }

    #[test]
    fn percentile_calibration() {
        let flows: Vec<f64> = (1..=100).map(f64::from).collect();
        let th = calibrate_thresholds(&flows).unwrap();
        assert_eq!((th.t1, th.t2), (33.0, 66.0));
        let flat = calibrate_thresholds(&[0.0; 10]).unwrap();
        assert!(flat.validate().is_ok());
    }

    proptest! {
        #[test]
        fn monotone(a in 0.0f64..500.0, b in 0.0f64..500.0, t1 in 0.1f64..100.0, gap in 0.1f64..100.0) {
            let th = Thresholds::new(t1, t1 + gap).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(discretize(lo, th) <= discretize(hi, th));
        }
    }
}
