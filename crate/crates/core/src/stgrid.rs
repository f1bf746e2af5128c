//! Discretization of space and time into spatio-temporal cells.
//!
//! Coordinates are projected onto a local equirectangular tangent plane
//! centred on a configured origin, then bucketed into an axis-aligned
//! quadtree of square cells. Level `L` cells have side
//! `base_cell_side_m / 2^L`; the defaults put levels 15, 16 and 17 at
//! 280 m, 140 m and 70 m. Time is cut into fixed-length half-open intervals
//! starting at `epoch`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius used by the tangent-plane projection, in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Side length at level 0 such that level 15 is 280 m.
pub const DEFAULT_BASE_CELL_SIDE_M: f64 = 280.0 * 32_768.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("point ({lat}, {lon}) lies outside the configured workspace")]
    OutOfWorkspace { lat: f64, lon: f64 },
    #[error("invalid coordinate ({lat}, {lon})")]
    InvalidPoint { lat: f64, lon: f64 },
    #[error("invalid grid configuration: {0}")]
    InvalidConfig(String),
}

/// A WGS84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GridError> {
        if lat.is_nan() || lon.is_nan() || !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(GridError::InvalidPoint { lat, lon });
        }
        Ok(GeoPoint { lat, lon })
    }

    /// Haversine distance in meters.
    pub fn great_circle_m(&self, other: &GeoPoint) -> f64 {
        let (p1, p2) = (self.lat.to_radians(), other.lat.to_radians());
        let dp = p2 - p1;
        let dl = (other.lon - self.lon).to_radians();
        let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_M * a.sqrt().asin()
    }
}

/// Planar position in meters east (`x`) and north (`y`) of the grid origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalXY {
    pub x: f64,
    pub y: f64,
}

impl LocalXY {
    pub const fn new(x: f64, y: f64) -> Self {
        LocalXY { x, y }
    }

    pub fn distance(&self, other: &LocalXY) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub origin: GeoPoint,
    pub level: u8,
    pub base_cell_side_m: f64,
    pub interval_s: f64,
    /// Unix seconds at which interval 0 starts.
    pub epoch: f64,
    /// Maximum latitude (and cos-scaled longitude) offset from the origin, in degrees.
    pub workspace_deg: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            origin: GeoPoint { lat: 36.17, lon: -115.14 },
            level: 16,
            base_cell_side_m: DEFAULT_BASE_CELL_SIDE_M,
            interval_s: 1200.0,
            epoch: 1_704_067_200.0,
            workspace_deg: 1.0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.base_cell_side_m > 0.0) || !self.side().is_finite() || !(self.side() > 0.0) {
            return Err(GridError::InvalidConfig("cell side must be positive".into()));
        }
        if !(self.interval_s > 0.0) || !self.interval_s.is_finite() {
            return Err(GridError::InvalidConfig("interval_s must be positive".into()));
        }
        if !self.epoch.is_finite() {
            return Err(GridError::InvalidConfig("epoch must be finite".into()));
        }
        if !(self.workspace_deg > 0.0) {
            return Err(GridError::InvalidConfig("workspace_deg must be positive".into()));
        }
        GeoPoint::new(self.origin.lat, self.origin.lon)?;
        Ok(())
    }

    /// Cell side length in meters at the configured level.
    pub fn side(&self) -> f64 {
        self.side_at(self.level)
    }

    pub fn side_at(&self, level: u8) -> f64 {
        self.base_cell_side_m / 2f64.powi(level as i32)
    }

    pub fn with_level(&self, level: u8) -> GridConfig {
        GridConfig { level, ..self.clone() }
    }

    pub fn with_interval(&self, interval_s: f64) -> GridConfig {
        GridConfig { interval_s, ..self.clone() }
    }

    fn meters_per_degree() -> f64 {
        EARTH_RADIUS_M * std::f64::consts::PI / 180.0
    }
}

/// Projects a geographic point onto the local tangent plane.
pub fn project(p: GeoPoint, cfg: &GridConfig) -> Result<LocalXY, GridError> {
    let GeoPoint { lat, lon } = GeoPoint::new(p.lat, p.lon)?;
    let o = cfg.origin;
    let coslat = o.lat.to_radians().cos();
    let dlat = lat - o.lat;
    let dlon = lon - o.lon;
    if dlat.abs() > cfg.workspace_deg || (dlon * coslat).abs() > cfg.workspace_deg {
        return Err(GridError::OutOfWorkspace { lat, lon });
    }
    let k = GridConfig::meters_per_degree();
    Ok(LocalXY { x: dlon * coslat * k, y: dlat * k })
}

/// Inverse of [`project`].
pub fn unproject(p: LocalXY, cfg: &GridConfig) -> GeoPoint {
    let o = cfg.origin;
    let k = GridConfig::meters_per_degree();
    let coslat = o.lat.to_radians().cos();
    GeoPoint { lat: o.lat + p.y / k, lon: o.lon + p.x / (k * coslat) }
}

/// A square cell of the quadtree grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpatialCell {
    pub level: u8,
    pub ix: i64,
    pub iy: i64,
}

impl SpatialCell {
    /// The enclosing cell one level up.
    pub fn parent(&self) -> SpatialCell {
        SpatialCell { level: self.level.saturating_sub(1), ix: self.ix.div_euclid(2), iy: self.iy.div_euclid(2) }
    }

    pub fn children(&self) -> [SpatialCell; 4] {
        let l = self.level + 1;
        let (x, y) = (self.ix * 2, self.iy * 2);
        [
            SpatialCell { level: l, ix: x, iy: y },
            SpatialCell { level: l, ix: x + 1, iy: y },
            SpatialCell { level: l, ix: x, iy: y + 1 },
            SpatialCell { level: l, ix: x + 1, iy: y + 1 },
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeInterval {
    pub index: i64,
    pub start: f64,
    pub duration: f64,
}

/// A (spatial cell, time interval) unit. Ordered by interval, then cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct STCell {
    pub temporal: i64,
    pub spatial: SpatialCell,
}

pub fn cell_of(p: LocalXY, cfg: &GridConfig) -> SpatialCell {
    cell_at_level(p, cfg, cfg.level)
}

pub fn cell_at_level(p: LocalXY, cfg: &GridConfig, level: u8) -> SpatialCell {
    let side = cfg.side_at(level);
    SpatialCell { level, ix: (p.x / side).floor() as i64, iy: (p.y / side).floor() as i64 }
}

pub fn interval_of(t: f64, cfg: &GridConfig) -> TimeInterval {
    let index = ((t - cfg.epoch) / cfg.interval_s).floor() as i64;
    interval_at(index, cfg)
}

pub fn interval_at(index: i64, cfg: &GridConfig) -> TimeInterval {
    TimeInterval { index, start: cfg.epoch + index as f64 * cfg.interval_s, duration: cfg.interval_s }
}

pub fn cell_center(c: SpatialCell, cfg: &GridConfig) -> LocalXY {
    let side = cfg.side_at(c.level);
    LocalXY { x: (c.ix as f64 + 0.5) * side, y: (c.iy as f64 + 0.5) * side }
}
