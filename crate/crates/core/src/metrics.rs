//! Call-quality metrics: E-model MOS estimation, heuristic categories and the
//! windowed `g` metric that every call state carries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Basic signal-to-noise ratio term of the simplified E-model (R0 − Is + A).
pub const R_BASE: f64 = 93.2;
/// Packet-loss robustness factor `Bpl`, in percent.
pub const LOSS_ROBUSTNESS_PCT: f64 = 4.3;
/// Equipment impairment `Ie` of the default codec.
pub const EQUIPMENT_IMPAIRMENT: f64 = 0.0;

pub const MOS_MIN: f64 = 1.0;
pub const MOS_MAX: f64 = 4.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("delay must be a finite value >= 0 ms, got {0}")]
    InvalidDelay(f64),
    #[error("loss must be a fraction in [0, 1], got {0}")]
    InvalidLoss(f64),
    #[error("mos must lie in [1.0, 4.5], got {0}")]
    InvalidMos(f64),
    #[error("constraint threshold `{0}` must be strictly positive")]
    NonPositiveThreshold(&'static str),
}

fn check_inputs(delay_ms: f64, loss: f64) -> Result<(), MetricsError> {
    if !delay_ms.is_finite() || delay_ms < 0.0 {
        return Err(MetricsError::InvalidDelay(delay_ms));
    }
    if !(0.0..=1.0).contains(&loss) {
        return Err(MetricsError::InvalidLoss(loss));
    }
    Ok(())
}

/// Delay impairment `Id` for a one-way delay in milliseconds.
pub fn delay_impairment(delay_ms: f64) -> f64 {
    let mut id = 0.024 * delay_ms;
    if delay_ms > 177.3 {
        id += 0.11 * (delay_ms - 177.3);
    }
    id
}

/// Effective equipment impairment `Ie_eff` for a loss fraction.
pub fn loss_impairment(loss: f64) -> f64 {
    let ppl = loss * 100.0;
    EQUIPMENT_IMPAIRMENT
        + (95.0 - EQUIPMENT_IMPAIRMENT) * ppl / (ppl + LOSS_ROBUSTNESS_PCT)
}

/// Transmission rating factor R.
pub fn r_factor(delay_ms: f64, loss: f64) -> Result<f64, MetricsError> {
    check_inputs(delay_ms, loss)?;
    Ok(R_BASE - delay_impairment(delay_ms) - loss_impairment(loss))
}

/// Maps an R factor onto the MOS scale.
///
/// The cubic dips slightly below 1 for R in (0, ~6.5); the result is clamped
/// so MOS stays in [1.0, 4.5] and is non-decreasing in R.
pub fn mos_from_r(r: f64) -> f64 {
    if r <= 0.0 {
        return MOS_MIN;
    }
    if r >= 100.0 {
        return MOS_MAX;
    }
    let mos = 1.0 + 0.035 * r + 7.0e-6 * r * (r - 60.0) * (100.0 - r);
    mos.clamp(MOS_MIN, MOS_MAX)
}

/// Estimates MOS from one-way delay (ms) and loss fraction.
pub fn estimate_mos(delay_ms: f64, loss: f64) -> Result<f64, MetricsError> {
    r_factor(delay_ms, loss).map(mos_from_r)
}

/// One measurement triple attached to a call state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicSample {
    pub delay_ms: f64,
    pub loss: f64,
    pub mos: f64,
}

impl HeuristicSample {
    /// Builds a sample whose MOS is derived from delay and loss.
    pub fn from_measurement(delay_ms: f64, loss: f64) -> Result<Self, MetricsError> {
        let mos = estimate_mos(delay_ms, loss)?;
        Ok(Self { delay_ms, loss, mos })
    }

    /// Builds a sample with an externally supplied MOS value.
    pub fn with_mos(delay_ms: f64, loss: f64, mos: f64) -> Result<Self, MetricsError> {
        check_inputs(delay_ms, loss)?;
        if !(MOS_MIN..=MOS_MAX).contains(&mos) {
            return Err(MetricsError::InvalidMos(mos));
        }
        Ok(Self { delay_ms, loss, mos })
    }
}

/// Heuristic category. Declaration order is worst-to-best so that the derived
/// `Ord` gives `Excellent > Good > Average > Poor`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QualityCategory {
    Poor,
    Average,
    Good,
    Excellent,
}

impl QualityCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            QualityCategory::Poor => "Poor",
            QualityCategory::Average => "Average",
            QualityCategory::Good => "Good",
            QualityCategory::Excellent => "Excellent",
        }
    }
}

impl std::fmt::Display for QualityCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn delay_category(delay_ms: f64) -> QualityCategory {
    if delay_ms <= 100.0 {
        QualityCategory::Excellent
    } else if delay_ms <= 150.0 {
        QualityCategory::Good
    } else if delay_ms <= 180.0 {
        QualityCategory::Average
    } else {
        QualityCategory::Poor
    }
}

pub fn loss_category(loss: f64) -> QualityCategory {
    if loss <= 0.01 {
        QualityCategory::Excellent
    } else if loss <= 0.02 {
        QualityCategory::Good
    } else if loss <= 0.05 {
        QualityCategory::Average
    } else {
        QualityCategory::Poor
    }
}

pub fn mos_category(mos: f64) -> QualityCategory {
    if mos >= 4.0 {
        QualityCategory::Excellent
    } else if mos >= 3.5 {
        QualityCategory::Good
    } else if mos >= 2.0 {
        QualityCategory::Average
    } else {
        QualityCategory::Poor
    }
}

/// Overall category: the worst of the delay, loss and MOS bands.
pub fn classify(sample: &HeuristicSample) -> QualityCategory {
    delay_category(sample.delay_ms)
        .min(loss_category(sample.loss))
        .min(mos_category(sample.mos))
}

/// Running average of per-interval delay and loss (the `g` metric).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub window_s: f64,
    pub avg_delay_ms: f64,
    pub avg_loss: f64,
    pub samples: u64,
}

impl WindowStats {
    pub fn new(window_s: f64) -> Self {
        Self {
            window_s,
            avg_delay_ms: 0.0,
            avg_loss: 0.0,
            samples: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.samples == 0
    }

    /// The current averages as a sample (MOS derived from them).
    pub fn sample(&self) -> Option<HeuristicSample> {
        if self.samples == 0 {
            return None;
        }
        HeuristicSample::from_measurement(self.avg_delay_ms, self.avg_loss).ok()
    }
}

/// Absorbs one interval measurement into the running means.
pub fn update_window(stats: WindowStats, interval_delay_ms: f64, interval_loss: f64) -> WindowStats {
    let n = stats.samples + 1;
    let nf = n as f64;
    WindowStats {
        window_s: stats.window_s,
        avg_delay_ms: stats.avg_delay_ms + (interval_delay_ms - stats.avg_delay_ms) / nf,
        avg_loss: stats.avg_loss + (interval_loss - stats.avg_loss) / nf,
        samples: n,
    }
}

/// Local QoS thresholds of a call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    pub delay_max_ms: f64,
    pub loss_max: f64,
    pub mos_min: f64,
}

impl Default for Constraints {
    fn default() -> Self {
        Self {
            delay_max_ms: 180.0,
            loss_max: 0.05,
            mos_min: 2.0,
        }
    }
}

impl Constraints {
    pub fn new(delay_max_ms: f64, loss_max: f64, mos_min: f64) -> Result<Self, MetricsError> {
        let c = Self {
            delay_max_ms,
            loss_max,
            mos_min,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.delay_max_ms > 0.0) {
            return Err(MetricsError::NonPositiveThreshold("delay_max_ms"));
        }
        if !(self.loss_max > 0.0) {
            return Err(MetricsError::NonPositiveThreshold("loss_max"));
        }
        if !(self.mos_min > 0.0) {
            return Err(MetricsError::NonPositiveThreshold("mos_min"));
        }
        Ok(())
    }

    pub fn delay_ok(&self, delay_ms: f64) -> bool {
        delay_ms <= self.delay_max_ms
    }

    pub fn loss_ok(&self, loss: f64) -> bool {
        loss <= self.loss_max
    }

    pub fn satisfied_by(&self, sample: &HeuristicSample) -> bool {
        self.delay_ok(sample.delay_ms) && self.loss_ok(sample.loss) && sample.mos >= self.mos_min
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mos_at_zero_impairment() {
        // 1 + 0.035*93.2 + 7e-6*93.2*33.2*6.8
        let expected = 1.0 + 3.262 + 7.0e-6 * 93.2 * 33.2 * 6.8;
        let mos = estimate_mos(0.0, 0.0).unwrap();
        assert_abs_diff_eq!(r_factor(0.0, 0.0).unwrap(), 93.2, epsilon = 1e-12);
        assert_abs_diff_eq!(mos, expected, epsilon = 1e-9);
        assert_abs_diff_eq!(mos, 4.41, epsilon = 0.01);
    }

    #[test]
    fn mos_boundaries_are_exact() {
        assert_eq!(mos_from_r(0.0), 1.0);
        assert_eq!(mos_from_r(100.0), 4.5);
        assert_eq!(mos_from_r(-5.0), 1.0);
        assert_eq!(mos_from_r(120.0), 4.5);
    }

    #[test]
    fn mos_where_delay_drives_r_to_zero() {
        // 93.2 = 0.024 d + 0.11 (d - 177.3)  =>  d = (93.2 + 0.11*177.3) / 0.134
        let d = (93.2 + 0.11 * 177.3) / 0.134;
        assert_abs_diff_eq!(r_factor(d, 0.0).unwrap(), 0.0, epsilon = 1e-9);
        assert_eq!(estimate_mos(d, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn mos_rejects_bad_inputs() {
        assert_eq!(estimate_mos(-1.0, 0.0), Err(MetricsError::InvalidDelay(-1.0)));
        assert_eq!(estimate_mos(10.0, 1.5), Err(MetricsError::InvalidLoss(1.5)));
        assert!(estimate_mos(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn mos_is_monotone_on_grid() {
        for di in 0..=20 {
            for li in 0..=20 {
                let d = di as f64 * 20.0;
                let l = li as f64 * 0.01;
                let m = estimate_mos(d, l).unwrap();
                assert!((MOS_MIN..=MOS_MAX).contains(&m));
                if di < 20 {
                    assert!(estimate_mos(d + 20.0, l).unwrap() <= m);
                }
                if li < 20 {
                    assert!(estimate_mos(d, l + 0.01).unwrap() <= m);
                }
            }
        }
    }

    #[test]
    fn classify_examples() {
        let s = HeuristicSample::with_mos(90.0, 0.005, 4.2).unwrap();
        assert_eq!(classify(&s), QualityCategory::Excellent);
        let s = HeuristicSample::with_mos(160.0, 0.03, 2.5).unwrap();
        assert_eq!(classify(&s), QualityCategory::Average);
        let s = HeuristicSample::with_mos(90.0, 0.03, 4.2).unwrap();
        assert_eq!(classify(&s), QualityCategory::Average);
    }

    #[test]
    fn band_ties_resolve_to_better_category() {
        assert_eq!(delay_category(100.0), QualityCategory::Excellent);
        assert_eq!(delay_category(150.0), QualityCategory::Good);
        assert_eq!(delay_category(180.0), QualityCategory::Average);
        assert_eq!(loss_category(0.01), QualityCategory::Excellent);
        assert_eq!(loss_category(0.05), QualityCategory::Average);
        assert_eq!(mos_category(4.0), QualityCategory::Excellent);
        assert_eq!(mos_category(3.5), QualityCategory::Good);
        assert_eq!(mos_category(2.0), QualityCategory::Average);
        assert_eq!(mos_category(1.99), QualityCategory::Poor);
    }

    #[test]
    fn category_order() {
        use QualityCategory::*;
        assert!(Excellent > Good && Good > Average && Average > Poor);
    }

    #[test]
    fn window_examples() {
        let w = update_window(WindowStats::new(5.0), 100.0, 0.0);
        assert_eq!((w.avg_delay_ms, w.avg_loss, w.samples), (100.0, 0.0, 1));
        let w = update_window(w, 200.0, 0.10);
        assert_abs_diff_eq!(w.avg_delay_ms, 150.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.avg_loss, 0.05, epsilon = 1e-12);
        let mut w = WindowStats::new(5.0);
        for _ in 0..1000 {
            w = update_window(w, 50.0, 0.02);
        }
        assert_eq!(w.avg_delay_ms, 50.0);
        assert_eq!(w.avg_loss, 0.02);
        assert_eq!(w.samples, 1000);
    }

    #[test]
    fn constraint_defaults() {
        let c = Constraints::default();
        assert_eq!((c.delay_max_ms, c.loss_max, c.mos_min), (180.0, 0.05, 2.0));
        assert!(Constraints::new(0.0, 0.05, 2.0).is_err());
        assert!(Constraints::new(180.0, -0.1, 2.0).is_err());
    }

    #[test]
    fn table6_reference_points() {
        // 160 ms / 2 % reported around MOS 3.3 (Average band).
        let s = HeuristicSample::from_measurement(160.0, 0.02).unwrap();
        assert!((s.mos - 3.3).abs() <= 0.5, "mos {}", s.mos);
        assert_eq!(classify(&s), QualityCategory::Average);
        let s = HeuristicSample::from_measurement(6.0, 0.0).unwrap();
        assert_abs_diff_eq!(s.mos, 4.4, epsilon = 0.05);
    }
}
