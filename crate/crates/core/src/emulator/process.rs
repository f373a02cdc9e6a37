use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng;

/// Piecewise-constant override of the base rate starting at `start_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSegment {
    pub start_s: f64,
    pub rate_per_min: f64,
}

/// Multiplicative sinusoid `1 + amplitude * sin(2π (t - phase_s) / period_s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diurnal {
    pub amplitude: f64,
    pub period_s: f64,
    #[serde(default)]
    pub phase_s: f64,
}

/// Slowly varying random multiplier: a per-minute AR(1) on the log rate with
/// stationary standard deviation `sigma` and correlation time `corr_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Modulation {
    pub sigma: f64,
    pub corr_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dwell {
    /// Every vehicle stays in view for exactly this many frames.
    Fixed { frames: u32 },
    /// `1 + Geometric` with the given mean (>= 1).
    Geometric { mean_frames: f64 },
}

impl Dwell {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match *self {
            Dwell::Fixed { frames } => frames.max(1),
            Dwell::Geometric { mean_frames } => {
                if mean_frames <= 1.0 {
                    return 1;
                }
                let p = 1.0 / mean_frames;
                let u: f64 = rng.gen::<f64>();
                // Inverse CDF of the number of failures before the first success.
                let extra = ((1.0 - u).ln() / (1.0 - p).ln()).floor();
                1 + extra.min(1e6) as u32
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Dwell::Fixed { frames } => frames.max(1) as f64,
            Dwell::Geometric { mean_frames } => mean_frames.max(1.0),
        }
    }
}

/// Arrival process of one camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficProcess {
    pub base_rate_per_min: f64,
    #[serde(default)]
    pub segments: Vec<RateSegment>,
    #[serde(default)]
    pub diurnal: Option<Diurnal>,
    #[serde(default)]
    pub modulation: Option<Modulation>,
    pub class_mix: Vec<f64>,
    pub dwell: Dwell,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProcessError {
    #[error("class_mix sums to {0}, expected 1")]
    ClassMixSum(f64),
    #[error("class_mix has {got} entries, expected {expected}")]
    ClassMixLen { got: usize, expected: usize },
    #[error("negative or non-finite rate")]
    NegativeRate,
    #[error("diurnal amplitude must be in [0, 1] and period positive")]
    Diurnal,
    #[error("dwell must be at least one frame")]
    Dwell,
}

impl TrafficProcess {
    pub fn constant(rate_per_min: f64, class_mix: Vec<f64>, dwell: Dwell) -> Self {
        Self {
            base_rate_per_min: rate_per_min,
            segments: Vec::new(),
            diurnal: None,
            modulation: None,
            class_mix,
            dwell,
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<(), ProcessError> {
        if self.class_mix.len() != n_classes {
            return Err(ProcessError::ClassMixLen {
                got: self.class_mix.len(),
                expected: n_classes,
            });
        }
        let sum: f64 = self.class_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.class_mix.iter().any(|p| *p < 0.0) {
            return Err(ProcessError::ClassMixSum(sum));
        }
        let rates = std::iter::once(self.base_rate_per_min)
            .chain(self.segments.iter().map(|s| s.rate_per_min));
        for r in rates {
            if !(r.is_finite() && r >= 0.0) {
                return Err(ProcessError::NegativeRate);
            }
        }
        if let Some(d) = &self.diurnal {
            if !(0.0..=1.0).contains(&d.amplitude) || d.period_s <= 0.0 {
                return Err(ProcessError::Diurnal);
            }
        }
        match self.dwell {
            Dwell::Fixed { frames } if frames == 0 => Err(ProcessError::Dwell),
            Dwell::Geometric { mean_frames } if mean_frames < 1.0 => Err(ProcessError::Dwell),
            _ => Ok(()),
        }
    }

    /// Scales every rate by `factor` and shifts the sinusoid phase.
    pub fn scaled(&self, factor: f64, phase_shift_s: f64) -> Self {
        let mut p = self.clone();
        p.base_rate_per_min *= factor;
        for s in &mut p.segments {
            s.rate_per_min *= factor;
        }
        if let Some(d) = &mut p.diurnal {
            d.phase_s += phase_shift_s;
        }
        p
    }

    fn piecewise_per_min(&self, t: f64) -> f64 {
        self.segments
            .iter()
            .filter(|s| s.start_s <= t)
            .max_by(|a, b| a.start_s.total_cmp(&b.start_s))
            .map_or(self.base_rate_per_min, |s| s.rate_per_min)
    }

    fn diurnal_factor(&self, t: f64) -> f64 {
        match &self.diurnal {
            Some(d) => {
                let phase = std::f64::consts::TAU * (t - d.phase_s) / d.period_s;
                (1.0 + d.amplitude * phase.sin()).max(0.0)
            }
            None => 1.0,
        }
    }

    /// Deterministic part of λ(t), vehicles per second.
    pub fn deterministic_rate(&self, t: f64) -> f64 {
        self.piecewise_per_min(t) / 60.0 * self.diurnal_factor(t)
    }

    /// Upper bound of the deterministic rate over all t, vehicles per second.
    pub fn deterministic_bound(&self) -> f64 {
        let peak = self
            .segments
            .iter()
            .map(|s| s.rate_per_min)
            .fold(self.base_rate_per_min, f64::max);
        let amp = self.diurnal.as_ref().map_or(0.0, |d| d.amplitude);
        peak / 60.0 * (1.0 + amp)
    }

    pub fn is_silent(&self) -> bool {
        self.deterministic_bound() <= 0.0
    }

    /// Realizes the random modulation as one factor per started minute of the
    /// run. Factors have mean one.
    pub fn modulation_path(&self, seed: u64, duration_s: f64) -> Vec<f64> {
        let minutes = (duration_s / 60.0).ceil().max(1.0) as usize;
        let Some(m) = &self.modulation else {
            return vec![1.0; minutes];
        };
        let mut rng = rng::rng_for(seed, rng::label_salt("modulation"));
        let rho = (-60.0 / m.corr_s.max(1e-9)).exp();
        let innov = (1.0 - rho * rho).sqrt() * m.sigma;
        let mut state: f64 = m.sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        let mut out = Vec::with_capacity(minutes);
        for _ in 0..minutes {
            out.push((state - 0.5 * m.sigma * m.sigma).exp());
            let eps: f64 = StandardNormal.sample(&mut rng);
            state = rho * state + innov * eps;
        }
        out
    }

    /// Draws a class index from `class_mix`.
    pub fn sample_class<R: Rng + ?Sized>(&self, rng: &mut R) -> u16 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in self.class_mix.iter().enumerate() {
            acc += p;
            if u < acc {
                return i as u16;
            }
        }
        // Rounding residue lands on the last class with non-zero mass.
        self.class_mix.iter().rposition(|p| *p > 0.0).unwrap_or(0) as u16
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn mix() -> Vec<f64> {
        crate::model::DEFAULT_CLASS_MIX.to_vec()
    }

    #[test]
    fn piecewise_and_diurnal_rate() {
        let mut p = TrafficProcess::constant(60.0, mix(), Dwell::Fixed { frames: 3 });
        p.segments.push(RateSegment { start_s: 100.0, rate_per_min: 120.0 });
        assert_eq!(p.deterministic_rate(50.0), 1.0);
        assert_eq!(p.deterministic_rate(100.0), 2.0);
        p.diurnal = Some(Diurnal { amplitude: 0.5, period_s: 400.0, phase_s: 0.0 });
        assert!((p.deterministic_rate(100.0) - 3.0).abs() < 1e-12);
        assert!((p.deterministic_bound() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        let p = TrafficProcess::constant(1.0, vec![0.5, 0.4], Dwell::Fixed { frames: 1 });
        assert!(matches!(p.validate(2), Err(ProcessError::ClassMixSum(_))));
        let p = TrafficProcess::constant(-1.0, vec![0.5, 0.5], Dwell::Fixed { frames: 1 });
        assert_eq!(p.validate(2), Err(ProcessError::NegativeRate));
        let p = TrafficProcess::constant(1.0, vec![1.0], Dwell::Fixed { frames: 1 });
        assert!(matches!(p.validate(2), Err(ProcessError::ClassMixLen { .. })));
    }

    #[test]
    fn geometric_dwell_mean() {
        let d = Dwell::Geometric { mean_frames: 12.0 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mean = (0..n).map(|_| d.sample(&mut rng) as f64).sum::<f64>() / n as f64;
        assert!((mean - 12.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn modulation_has_unit_mean() {
        let mut p = TrafficProcess::constant(1.0, mix(), Dwell::Fixed { frames: 1 });
        p.modulation = Some(Modulation { sigma: 0.2, corr_s: 600.0 });
        let path = p.modulation_path(9, 60.0 * 20_000.0);
        let mean = path.iter().sum::<f64>() / path.len() as f64;
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
        assert_eq!(path, p.modulation_path(9, 60.0 * 20_000.0));
    }
}
