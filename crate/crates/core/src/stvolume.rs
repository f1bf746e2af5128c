//! Weighted spatio-temporal volumes.
//!
//! An event's observed location is a bivariate Gaussian whose 3σ contour is
//! the reported uncertainty ellipse. Its volume assigns each grid cell the
//! Gaussian mass falling inside that cell (truncated to the ellipse and
//! renormalized), in the event's own time interval, plus a discounted copy
//! in the two neighbouring intervals. Volumes of independent observations
//! combine by `1 - Π(1 - wᵢ)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::device::{DeviceIdentity, Protocol};
use crate::stgrid::{self, GeoPoint, GridConfig, GridError, LocalXY, STCell, SpatialCell};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyEllipse {
    pub semi_major_m: f64,
    pub semi_minor_m: f64,
    /// Counter-clockwise from the east axis, in `[0, 180)`.
    pub orientation_deg: f64,
}

impl UncertaintyEllipse {
    pub fn new(semi_major_m: f64, semi_minor_m: f64, orientation_deg: f64) -> Result<Self, String> {
        let e = UncertaintyEllipse { semi_major_m, semi_minor_m, orientation_deg };
        e.check()?;
        Ok(e)
    }

    pub fn circle(radius_m: f64) -> Self {
        UncertaintyEllipse { semi_major_m: radius_m, semi_minor_m: radius_m, orientation_deg: 0.0 }
    }

    pub fn check(&self) -> Result<(), String> {
        let ok = self.semi_minor_m > 0.0
            && self.semi_major_m >= self.semi_minor_m
            && self.semi_major_m.is_finite()
            && (0.0..180.0).contains(&self.orientation_deg);
        if ok {
            Ok(())
        } else {
            Err(format!(
                "invalid ellipse: semi axes ({}, {}), orientation {}",
                self.semi_major_m, self.semi_minor_m, self.orientation_deg
            ))
        }
    }

    /// Covariance `(var_x, var_y, cov_xy)` with the ellipse as the 3σ contour.
    pub fn covariance(&self) -> (f64, f64, f64) {
        let (s1, s2) = (self.semi_major_m / 3.0, self.semi_minor_m / 3.0);
        let (sin, cos) = self.orientation_deg.to_radians().sin_cos();
        let (v1, v2) = (s1 * s1, s2 * s2);
        (v1 * cos * cos + v2 * sin * sin, v1 * sin * sin + v2 * cos * cos, (v1 - v2) * sin * cos)
    }
}

/// One observation of one identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub id: String,
    pub protocol: Protocol,
    /// Unix seconds.
    pub t: f64,
    pub center: GeoPoint,
    pub ellipse: UncertaintyEllipse,
    pub device: Option<DeviceIdentity>,
}

impl Event {
    pub fn check(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if !self.t.is_finite() {
            return Err("non-finite timestamp".into());
        }
        GeoPoint::new(self.center.lat, self.center.lon).map_err(|e| e.to_string())?;
        self.ellipse.check()?;
        if let Some(d) = &self.device {
            if d.protocol != Some(self.protocol) {
                return Err("device protocol differs from event protocol".into());
            }
            d.check()?;
        }
        Ok(())
    }
}

/// Parameters of the event-to-volume mapping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeOptions {
    /// Weight multiplier for the intervals just before and after the event's own.
    pub spill_discount: f64,
    /// Weights below this are dropped.
    pub min_weight: f64,
}

impl Default for VolumeOptions {
    fn default() -> Self {
        VolumeOptions { spill_discount: 0.5, min_weight: 1e-4 }
    }
}

/// Map from S-T cell to a weight in `(0, 1]`, iterated in cell order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightedCellSet {
    entries: BTreeMap<STCell, f64>,
}

impl WeightedCellSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, c: &STCell) -> f64 {
        self.entries.get(c).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&STCell, &f64)> {
        self.entries.iter()
    }

    /// Combines `w` into cell `c` with the independence rule. Non-positive
    /// weights are ignored.
    pub fn add(&mut self, c: STCell, w: f64) {
        if !(w > 0.0) {
            return;
        }
        let w = w.min(1.0);
        let e = self.entries.entry(c).or_insert(0.0);
        *e = 1.0 - (1.0 - *e) * (1.0 - w);
    }

    pub fn union_with(&mut self, other: &WeightedCellSet) {
        for (c, w) in &other.entries {
            self.add(*c, *w);
        }
    }

    /// Spatial weights in interval `t`, in cell order.
    pub fn interval(&self, t: i64) -> impl Iterator<Item = (SpatialCell, f64)> + '_ {
        let lo = STCell { temporal: t, spatial: SpatialCell { level: 0, ix: i64::MIN, iy: i64::MIN } };
        let hi = STCell { temporal: t, spatial: SpatialCell { level: u8::MAX, ix: i64::MAX, iy: i64::MAX } };
        self.entries.range(lo..=hi).map(|(c, w)| (c.spatial, *w))
    }

    /// Distinct interval indices present, ascending.
    pub fn intervals(&self) -> Vec<i64> {
        let mut out: Vec<i64> = self.entries.keys().map(|c| c.temporal).collect();
        out.dedup();
        out
    }

    pub fn total_weight(&self) -> f64 {
        self.entries.values().sum()
    }
}

impl FromIterator<(STCell, f64)> for WeightedCellSet {
    fn from_iter<I: IntoIterator<Item = (STCell, f64)>>(iter: I) -> Self {
        let mut s = WeightedCellSet::new();
        for (c, w) in iter {
            s.add(c, w);
        }
        s
    }
}

/// Time-ordered events of a single identifier.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub id: String,
    pub events: Vec<Event>,
}

impl Trajectory {
    pub fn new(mut events: Vec<Event>) -> Result<Self, String> {
        let id = events.first().map(|e| e.id.clone()).ok_or("empty trajectory")?;
        if let Some(e) = events.iter().find(|e| e.id != id) {
            return Err(format!("event for {:?} in trajectory of {:?}", e.id, id));
        }
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(Trajectory { id, events })
    }
}

// widest Gauss-Legendre panel, in radians of the θ parametrization
const MAX_PANEL_RAD: f64 = 0.2;
// three-point Gauss-Legendre on [-1, 1]
const GL_NODES: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
const GL_WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Gaussian mass of the ellipse-truncated distribution in each cell it
/// touches, unnormalized.
///
/// For each x the mass over a row is exact, since y given x is normal and
/// the 3σ ellipse cuts a symmetric interval around the conditional mean.
/// The outer integral runs over θ with x = cx + 3σx·sin θ, which removes the
/// square-root behaviour at the ellipse's x-extremes, using composite
/// Gauss-Legendre between the points where the integrand is not smooth.
pub(crate) fn cell_masses(center: LocalXY, e: &UncertaintyEllipse, side: f64, level: u8, max_step: f64) -> Vec<(SpatialCell, f64)> {
    let (vxx, vyy, vxy) = e.covariance();
    let (sx, sy) = (vxx.sqrt(), vyy.sqrt());
    let slope = vxy / vxx;
    let cond_sd = (vyy - vxy * vxy / vxx).max(1e-18).sqrt();
    let (x_lo, x_hi) = (center.x - 3.0 * sx, center.x + 3.0 * sx);
    let norm = 3.0 / (2.0 * std::f64::consts::PI).sqrt();

    let ix0 = (x_lo / side).floor() as i64;
    let ix1 = (x_hi / side).floor() as i64;
    let iy0 = ((center.y - 3.0 * sy) / side).floor() as i64 - 1;
    let iy1 = ((center.y + 3.0 * sy) / side).floor() as i64 + 1;
    let rows = (iy1 - iy0 + 1) as usize;
    let mut grid = vec![0.0; (ix1 - ix0 + 1) as usize * rows];
    let theta_of = |x: f64| ((x - center.x) / (3.0 * sx)).clamp(-1.0, 1.0).asin();
    // The ellipse's upper and lower edges are cy + R·sin(θ ± φ); where they
    // cross a row line the integrand has a kink, so panels split there.
    let (ea, eb) = (3.0 * slope * sx, 3.0 * cond_sd);
    let r = ea.hypot(eb);
    let phi = eb.atan2(ea);
    let mut breaks = Vec::new();
    for ix in ix0..=ix1 {
        let a = theta_of((ix as f64 * side).max(x_lo));
        let b = theta_of(((ix + 1) as f64 * side).min(x_hi));
        if b <= a {
            continue;
        }
        breaks.clear();
        breaks.extend([a, b]);
        for iy in iy0..=iy1 {
            let d = (iy as f64 * side - center.y) / r;
            if d.abs() >= 1.0 {
                continue;
            }
            let psi = d.asin();
            for base in [psi, std::f64::consts::PI - psi] {
                for shift in [-phi, phi] {
                    for k in [-1.0, 0.0, 1.0] {
                        let t = base + shift + k * std::f64::consts::TAU;
                        if t > a && t < b {
                            breaks.push(t);
                        }
                    }
                }
            }
        }
        breaks.sort_by(f64::total_cmp);
        let col = &mut grid[(ix - ix0) as usize * rows..][..rows];
        for w in breaks.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b - a < 1e-12 {
                continue;
            }
            let panels = ((b - a) / max_step).ceil().max(1.0);
            let h = (b - a) / panels;
            for p in 0..panels as usize {
                let mid = a + h * (p as f64 + 0.5);
                for (node, wq) in GL_NODES.iter().zip(GL_WEIGHTS) {
                    let (sin, cos) = (mid + 0.5 * h * node).sin_cos();
                    let u = 3.0 * sin;
                    // density in u times dx/dθ / σx
                    let fx = norm * (-0.5 * u * u).exp() * cos * 0.5 * h * wq;
                    let mu = center.y + slope * sx * u;
                    let half = cond_sd * 3.0 * cos;
                    let (ylo, yhi) = (mu - half, mu + half);
                    let r0 = (ylo / side).floor() as i64;
                    let r1 = (yhi / side).floor() as i64;
                    let mut cdf_lo = normal_cdf(-3.0 * cos);
                    for iy in r0..=r1 {
                        let y1 = ((iy + 1) as f64 * side).min(yhi);
                        let cdf_hi = normal_cdf((y1 - mu) / cond_sd);
                        col[(iy - iy0) as usize] += (cdf_hi - cdf_lo) * fx;
                        cdf_lo = cdf_hi;
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    for (i, m) in grid.into_iter().enumerate() {
        if m > 0.0 {
            let (ix, iy) = (ix0 + (i / rows) as i64, iy0 + (i % rows) as i64);
            out.push((SpatialCell { level, ix, iy }, m));
        }
    }
    out
}

fn normalize(weights: &mut [(SpatialCell, f64)]) {
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    if total > 0.0 {
        weights.iter_mut().for_each(|(_, w)| *w /= total);
    }
}

/// Spatial weights of an observation centred at `center`, summing to 1,
/// with weights under `min_weight` removed.
pub fn spatial_weights(center: LocalXY, e: &UncertaintyEllipse, cfg: &GridConfig, min_weight: f64) -> Vec<(SpatialCell, f64)> {
    let mut w = cell_masses(center, e, cfg.side(), cfg.level, MAX_PANEL_RAD);
    normalize(&mut w);
    if w.iter().any(|(_, x)| *x < min_weight) {
        w.retain(|(_, x)| *x >= min_weight);
        normalize(&mut w);
    }
    w
}

/// Spatial weights per interval index.
pub type Contributions = Vec<(i64, Vec<(SpatialCell, f64)>)>;

/// The (up to three) intervals an event contributes to, each with its spatial weights.
pub fn event_contributions(e: &Event, cfg: &GridConfig, opts: &VolumeOptions) -> Result<Contributions, GridError> {
    let xy = stgrid::project(e.center, cfg)?;
    let own = stgrid::interval_of(e.t, cfg).index;
    let w = spatial_weights(xy, &e.ellipse, cfg, opts.min_weight);
    let mut out = Vec::with_capacity(3);
    if opts.spill_discount > 0.0 {
        let spilled: Vec<_> = w
            .iter()
            .map(|(c, x)| (*c, x * opts.spill_discount))
            .filter(|(_, x)| *x >= opts.min_weight)
            .collect();
        if !spilled.is_empty() {
            out.push((own - 1, spilled.clone()));
            out.push((own, w));
            out.push((own + 1, spilled));
            return Ok(out);
        }
    }
    out.push((own, w));
    Ok(out)
}

pub fn event_to_volume(e: &Event, cfg: &GridConfig, opts: &VolumeOptions) -> Result<WeightedCellSet, GridError> {
    let mut v = WeightedCellSet::new();
    for (t, cells) in event_contributions(e, cfg, opts)? {
        for (s, w) in cells {
            v.add(STCell { temporal: t, spatial: s }, w);
        }
    }
    Ok(v)
}

/// Combines volumes cell by cell with `1 - Π(1 - Vᵢ[c])`.
pub fn union<'a>(volumes: impl IntoIterator<Item = &'a WeightedCellSet>) -> WeightedCellSet {
    let mut out = WeightedCellSet::new();
    for v in volumes {
        out.union_with(v);
    }
    out
}

pub fn trajectory_volume(tr: &Trajectory, cfg: &GridConfig, opts: &VolumeOptions) -> Result<WeightedCellSet, GridError> {
    let mut out = WeightedCellSet::new();
    for e in &tr.events {
        out.union_with(&event_to_volume(e, cfg, opts)?);
    }
    Ok(out)
}
