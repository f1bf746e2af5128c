//! Correlating GSM and WiFi identifiers that travel together.
//!
//! Sightings of device identifiers are mapped to probabilistic
//! space-time volumes on a quadtree grid. Identifier pairs whose volumes
//! overlap are scored on their co-location rate and its spread over time
//! and space, optionally blended with a device-model match score.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod device;
pub mod engine;
pub mod evaluate;
pub mod io;
pub mod measures;
pub mod simulator;
pub mod stgrid;
pub mod stvolume;

pub use device::{DeviceIdentity, LookupTables, Protocol};
pub use engine::{Engine, EngineConfig, EngineError, PairKey, RankedResult, Settings};
pub use measures::{MeasureConfig, MeasureScores, PairAccumulator};
pub use stgrid::{GeoPoint, GridConfig, LocalXY, STCell, SpatialCell};
pub use stvolume::{Event, UncertaintyEllipse, VolumeOptions, WeightedCellSet};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/grid.md")]
    pub mod grid {}
    #[doc = include_str!("../../../book/src/volumes.md")]
    pub mod volumes {}
    #[doc = include_str!("../../../book/src/measures.md")]
    pub mod measures {}
    #[doc = include_str!("../../../book/src/devices.md")]
    pub mod devices {}
    #[doc = include_str!("../../../book/src/engine.md")]
    pub mod engine {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    pub mod simulator {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
    #[doc = include_str!("../../../README.md")]
    pub mod readme {}
}
