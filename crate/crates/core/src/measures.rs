//! Spatio-temporal correlation measures between two identifiers.
//!
//! * co-traveling likelihood: the share of jointly observed intervals in
//!   which the two were in a common cell, with location uncertainty
//!   carried through as independent probabilities;
//! * temporal coverage: `Σ ln(Δt_days + 1)` over consecutive co-occurrences;
//! * spatial coverage: `ln(min(Σ Δs_km, γ·perimeter) + 1)`, where the convex
//!   hull perimeter of the co-occurrence locations is over-estimated (by at
//!   most √2) by the perimeter of their axis-aligned bounding box.
//!
//! All of it folds into a [`PairAccumulator`] of fixed size, updated once per
//! interval in chronological order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::DeviceCombine;
use crate::stgrid::{cell_center, GridConfig, LocalXY, SpatialCell};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum MeasureError {
    #[error("bounding box is empty")]
    EmptyBox,
    #[error("volumes share no cell with positive weight")]
    NoOverlap,
}

/// `(e^5 - 1) / 40`: a pair that jointly traverses the box perimeter this
/// many times saturates the spatial term of the combined score.
pub fn default_gamma() -> f64 {
    (5f64.exp() - 1.0) / 40.0
}

/// Tuning for correlation and score combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasureConfig {
    pub gamma: f64,
    pub tcov_scale: f64,
    pub scov_scale: f64,
    pub cooccur_threshold: f64,
    pub device_weight: f64,
    pub device_combine: DeviceCombine,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        MeasureConfig {
            gamma: default_gamma(),
            tcov_scale: 10.0,
            scov_scale: 5.0,
            cooccur_threshold: 0.5,
            device_weight: 0.2,
            device_combine: DeviceCombine::Max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for BoundingBox {
    fn default() -> Self {
        Self::EMPTY
    }
}

impl BoundingBox {
    pub const EMPTY: BoundingBox =
        BoundingBox { x_min: f64::INFINITY, x_max: f64::NEG_INFINITY, y_min: f64::INFINITY, y_max: f64::NEG_INFINITY };

    pub fn is_empty(&self) -> bool {
        self.x_min > self.x_max
    }

    pub fn extend(&mut self, p: LocalXY) {
        self.x_min = self.x_min.min(p.x);
        self.x_max = self.x_max.max(p.x);
        self.y_min = self.y_min.min(p.y);
        self.y_max = self.y_max.max(p.y);
    }

    pub fn contains(&self, p: LocalXY) -> bool {
        !self.is_empty() && p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn of_points<'a>(pts: impl IntoIterator<Item = &'a LocalXY>) -> Self {
        let mut b = Self::EMPTY;
        pts.into_iter().for_each(|p| b.extend(*p));
        b
    }
}

/// Perimeter of the box in kilometers (coordinates are meters).
pub fn bbox_perimeter(b: &BoundingBox) -> Result<f64, MeasureError> {
    if b.is_empty() {
        return Err(MeasureError::EmptyBox);
    }
    Ok((2.0 * (b.x_max - b.x_min) + 2.0 * (b.y_max - b.y_min)) / 1000.0)
}

/// Probability of being observed at least once: `1 - Π(1 - w)`.
pub fn p_observed(v: &[(SpatialCell, f64)]) -> f64 {
    1.0 - v.iter().map(|(_, w)| 1.0 - w).product::<f64>()
}

/// Walks the cells common to two cell-ordered weight lists.
fn for_shared(va: &[(SpatialCell, f64)], vb: &[(SpatialCell, f64)], mut f: impl FnMut(SpatialCell, f64, f64)) {
    let (mut i, mut j) = (0, 0);
    while i < va.len() && j < vb.len() {
        match va[i].0.cmp(&vb[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                f(va[i].0, va[i].1, vb[j].1);
                i += 1;
                j += 1;
            }
        }
    }
}

/// Probability that both sources were seen in at least one common cell
/// during the interval. Inputs must be sorted by cell.
pub fn p_cooccur(va: &[(SpatialCell, f64)], vb: &[(SpatialCell, f64)]) -> f64 {
    let mut miss = 1.0;
    for_shared(va, vb, |_, a, b| miss *= 1.0 - a * b);
    1.0 - miss
}

pub fn p_both_observed(va: &[(SpatialCell, f64)], vb: &[(SpatialCell, f64)]) -> f64 {
    p_observed(va) * p_observed(vb)
}

/// Co-occurrence locations are rounded to this many meters, so that
/// centroids equal up to rounding error are exactly equal.
pub const LOCATION_QUANTUM_M: f64 = 1e-3;

fn quantize(v: f64) -> f64 {
    (v / LOCATION_QUANTUM_M).round() * LOCATION_QUANTUM_M
}

/// Product-weighted mean of the shared cells' centres, rounded to
/// [`LOCATION_QUANTUM_M`].
pub fn cooccurrence_centroid(va: &[(SpatialCell, f64)], vb: &[(SpatialCell, f64)], cfg: &GridConfig) -> Result<LocalXY, MeasureError> {
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for_shared(va, vb, |c, a, b| {
        let w = a * b;
        let p = cell_center(c, cfg);
        sw += w;
        sx += w * p.x;
        sy += w * p.y;
    });
    if sw > 0.0 {
        Ok(LocalXY { x: quantize(sx / sw), y: quantize(sy / sw) })
    } else {
        Err(MeasureError::NoOverlap)
    }
}

/// Whether an interval's conditional co-location likelihood clears the threshold.
pub fn is_cooccurrence(p_ab: f64, p_both: f64, threshold: f64) -> bool {
    p_both > 0.0 && p_ab / p_both > threshold
}

/// `Σ ln((tᵢ - tᵢ₋₁) + 1)` with times in days.
pub fn temporal_coverage(times_days: &[f64]) -> f64 {
    // fold from +0.0: an empty float `sum` is -0.0
    times_days.windows(2).map(|w| (w[1] - w[0]).ln_1p()).fold(0.0, |a, x| a + x)
}

/// Spatial coverage of a location sequence (meters), using the bounding-box
/// perimeter for the hull.
pub fn spatial_coverage_of(locations: &[LocalXY], gamma: f64) -> f64 {
    if locations.len() < 2 {
        return 0.0;
    }
    let dist_km = locations.windows(2).map(|w| w[0].distance(&w[1]) / 1000.0).fold(0.0, |a, x| a + x);
    let perim = bbox_perimeter(&BoundingBox::of_points(locations)).unwrap_or(0.0);
    dist_km.min(gamma * perim).ln_1p()
}

/// Geometric mean of the three measures after scaling the coverages into `[0, 1]`.
pub fn combined_score(ctl: f64, tcov: f64, scov: f64, cfg: &MeasureConfig) -> f64 {
    let t = (tcov / cfg.tcov_scale).min(1.0);
    let s = (scov / cfg.scov_scale).min(1.0);
    let p = ctl * t * s;
    if p > 0.0 {
        p.cbrt()
    } else {
        0.0
    }
}

pub fn overall_score(st_score: f64, device_match: Option<f64>, cfg: &MeasureConfig) -> f64 {
    match device_match {
        Some(d) => (1.0 - cfg.device_weight) * st_score + cfg.device_weight * d,
        None => st_score,
    }
}

/// Fixed-size streaming state of one candidate pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairAccumulator {
    pub last_cooccur_interval: Option<i64>,
    pub last_cooccur_loc: Option<LocalXY>,
    /// Σ P(AB_t)
    pub ctl_num: f64,
    /// Σ P(A_t, B_t)
    pub ctl_den: f64,
    /// Σ ln(Δt_days + 1)
    pub tcov_sum: f64,
    /// Σ Δs in kilometers
    pub scov_dist_sum: f64,
    pub bbox: BoundingBox,
    pub cooccur_count: u32,
}

impl PairAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accrue(&mut self, p_ab: f64, p_both: f64) {
        debug_assert!(p_ab <= p_both + 1e-9, "P(AB) {p_ab} exceeds P(A,B) {p_both}");
        self.ctl_num += p_ab;
        self.ctl_den += p_both;
    }

    /// Records a co-occurrence. Intervals must arrive in increasing order.
    pub fn record_cooccurrence(&mut self, interval: i64, loc: LocalXY, interval_s: f64) {
        if let (Some(t0), Some(p0)) = (self.last_cooccur_interval, self.last_cooccur_loc) {
            debug_assert!(interval > t0);
            let dt_days = (interval - t0) as f64 * interval_s / SECONDS_PER_DAY;
            self.tcov_sum += dt_days.ln_1p();
            self.scov_dist_sum += p0.distance(&loc) / 1000.0;
        }
        self.bbox.extend(loc);
        self.cooccur_count += 1;
        self.last_cooccur_interval = Some(interval);
        self.last_cooccur_loc = Some(loc);
    }

    pub fn ctl(&self) -> f64 {
        if self.ctl_den > 0.0 {
            assert!(self.ctl_num <= self.ctl_den + 1e-9, "ctl numerator exceeds denominator");
            (self.ctl_num / self.ctl_den).min(1.0)
        } else {
            0.0
        }
    }

    pub fn temporal_coverage(&self) -> f64 {
        self.tcov_sum
    }

    pub fn spatial_coverage(&self, gamma: f64) -> f64 {
        if self.cooccur_count <= 1 {
            return 0.0;
        }
        let perim = bbox_perimeter(&self.bbox).unwrap_or(0.0);
        self.scov_dist_sum.min(gamma * perim).ln_1p()
    }

    /// Scores without device evidence.
    pub fn scores(&self, cfg: &MeasureConfig) -> MeasureScores {
        let (ctl, tcov, scov) = (self.ctl(), self.temporal_coverage(), self.spatial_coverage(cfg.gamma));
        let combined = combined_score(ctl, tcov, scov, cfg);
        MeasureScores { ctl, tcov, scov, combined, device_match: None, overall: combined }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureScores {
    pub ctl: f64,
    pub tcov: f64,
    pub scov: f64,
    pub combined: f64,
    pub device_match: Option<f64>,
    pub overall: f64,
}

impl MeasureScores {
    pub fn with_device(mut self, device_match: Option<f64>, cfg: &MeasureConfig) -> Self {
        self.device_match = device_match;
        self.overall = overall_score(self.combined, device_match, cfg);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(ix: i64) -> SpatialCell {
        SpatialCell { level: 17, ix, iy: 0 }
    }

    const EPS: f64 = 1e-12;

    #[test]
    fn p_cooccur_examples() {
        assert!((p_cooccur(&[(c(0), 1.0)], &[(c(0), 1.0)]) - 1.0).abs() < EPS);
        assert_eq!(p_cooccur(&[(c(0), 1.0)], &[(c(1), 1.0)]), 0.0);
        assert!((p_cooccur(&[(c(0), 0.5)], &[(c(0), 0.5)]) - 0.25).abs() < EPS);
    }

    #[test]
    fn p_both_observed_examples() {
        assert_eq!(p_both_observed(&[(c(0), 1.0)], &[]), 0.0);
        assert_eq!(p_both_observed(&[(c(0), 1.0)], &[(c(5), 1.0)]), 1.0);
        assert!((p_both_observed(&[(c(0), 0.5)], &[(c(3), 0.5)]) - 0.25).abs() < EPS);
    }

    #[test]
    fn ctl_examples() {
        let mut acc = PairAccumulator::new();
        acc.accrue(1.0, 1.0);
        assert_eq!(acc.ctl(), 1.0);

        let mut acc = PairAccumulator::new();
        for _ in 0..4 {
            let (a, b) = ([(c(0), 1.0)], [(c(1), 1.0)]);
            acc.accrue(p_cooccur(&a, &b), p_both_observed(&a, &b));
        }
        assert_eq!(acc.ctl(), 0.0);

        let mut acc = PairAccumulator::new();
        let (a, b) = ([(c(0), 0.5)], [(c(0), 0.5)]);
        acc.accrue(p_cooccur(&a, &b), p_both_observed(&a, &b));
        assert!((acc.ctl_num - 0.25).abs() < EPS && (acc.ctl_den - 0.25).abs() < EPS);
        assert!((acc.ctl() - 1.0).abs() < EPS);

        assert_eq!(PairAccumulator::new().ctl(), 0.0);
    }

    #[test]
    fn temporal_coverage_examples() {
        assert_eq!(temporal_coverage(&[3.0]), 0.0);
        assert!((temporal_coverage(&[0.0, 1.0]) - 2f64.ln()).abs() < EPS);
        assert!((temporal_coverage(&[0.0, 1.0, 3.0]) - 1.791_759_469_228_055).abs() < 1e-12);
    }

    #[test]
    fn bbox_perimeter_examples() {
        assert_eq!(bbox_perimeter(&BoundingBox::EMPTY), Err(MeasureError::EmptyBox));
        let pt = [LocalXY::new(10.0, 10.0)];
        assert_eq!(bbox_perimeter(&BoundingBox::of_points(&pt)).unwrap(), 0.0);
        let seg = [LocalXY::new(0.0, 0.0), LocalXY::new(3000.0, 4000.0)];
        let p_hat = bbox_perimeter(&BoundingBox::of_points(&seg)).unwrap();
        assert!((p_hat - 14.0).abs() < EPS);
        assert!(p_hat / 10.0 <= 2f64.sqrt());
        let sq = [LocalXY::new(0.0, 0.0), LocalXY::new(1000.0, 0.0), LocalXY::new(0.0, 1000.0), LocalXY::new(1000.0, 1000.0)];
        assert!((bbox_perimeter(&BoundingBox::of_points(&sq)).unwrap() - 4.0).abs() < EPS);
    }

    #[test]
    fn spatial_coverage_examples() {
        let g = default_gamma();
        assert!((g - 3.685_328_95).abs() < 1e-6);

        let mut acc = PairAccumulator::new();
        acc.record_cooccurrence(0, LocalXY::new(0.0, 0.0), 1200.0);
        assert_eq!(acc.spatial_coverage(g), 0.0);
        acc.record_cooccurrence(5, LocalXY::new(1000.0, 0.0), 1200.0);
        assert!((acc.spatial_coverage(g) - 2f64.ln()).abs() < 1e-12);

        let mut acc = PairAccumulator::new();
        for i in 0..=100 {
            let x = if i % 2 == 0 { 0.0 } else { 100.0 };
            acc.record_cooccurrence(i, LocalXY::new(x, 0.0), 1200.0);
        }
        assert!((acc.scov_dist_sum - 10.0).abs() < 1e-9);
        let expect = (g * 0.2).ln_1p();
        assert!((acc.spatial_coverage(g) - expect).abs() < 1e-12);
        assert!((acc.spatial_coverage(g) - 1.7371f64.ln()).abs() < 1e-4);
    }

    #[test]
    fn centroid_examples() {
        let cfg = GridConfig { level: 17, ..GridConfig::default() };
        let only = [(c(0), 1.0)];
        assert_eq!(cooccurrence_centroid(&only, &only, &cfg).unwrap(), cell_center(c(0), &cfg));
        assert_eq!(cooccurrence_centroid(&only, &[(c(1), 1.0)], &cfg), Err(MeasureError::NoOverlap));

        // cells two apart; product weights 0.25 and 0.0625
        let a = [(c(0), 0.5), (c(2), 0.25)];
        let b = [(c(0), 0.5), (c(2), 0.25)];
        let p = cooccurrence_centroid(&a, &b, &cfg).unwrap();
        let (c0, c2) = (cell_center(c(0), &cfg), cell_center(c(2), &cfg));
        let expect = c0.x + 0.0625 * (c2.x - c0.x) / 0.3125;
        assert!((p.x - expect).abs() < 1e-9);
        assert!((0.0625 * 4.0f64 / 0.3125 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn combined_and_overall_examples() {
        let m = MeasureConfig::default();
        assert_eq!(combined_score(1.0, 10.0, 5.0, &m), 1.0);
        assert_eq!(combined_score(0.0, 7.0, 2.0, &m), 0.0);
        assert!((combined_score(0.8, 5.0, 5.0, &m) - 0.4f64.cbrt()).abs() < 1e-12);
        assert!((0.4f64.cbrt() - 0.7368).abs() < 1e-4);

        assert_eq!(overall_score(1.0, Some(1.0), &m), 1.0);
        assert!((overall_score(0.5, Some(1.0), &m) - 0.6).abs() < 1e-12);
        assert_eq!(overall_score(0.37, None, &m), 0.37);
    }

    #[test]
    fn accumulator_tracks_cooccurrence_deltas() {
        let mut acc = PairAccumulator::new();
        acc.record_cooccurrence(0, LocalXY::new(0.0, 0.0), 1200.0);
        assert_eq!((acc.tcov_sum, acc.scov_dist_sum, acc.cooccur_count), (0.0, 0.0, 1));
        acc.record_cooccurrence(72, LocalXY::new(1000.0, 0.0), 1200.0);
        assert!((acc.tcov_sum - 2f64.ln()).abs() < 1e-12);
        assert!((acc.scov_dist_sum - 1.0).abs() < 1e-12);
        assert!(!acc.bbox.is_empty());
    }
}
