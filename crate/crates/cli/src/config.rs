//! The TOML pipeline configuration.

use std::path::{Path, PathBuf};

use cotravel::engine::{EngineConfig, Settings};
use cotravel::simulator::SimConfig;
use cotravel::stgrid::{GeoPoint, GridConfig, DEFAULT_BASE_CELL_SIDE_M};
use cotravel::{MeasureConfig, VolumeOptions};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub level: u8,
    pub base_cell_side_m: f64,
    pub interval_s: f64,
    pub epoch_unix_s: f64,
    pub workspace_deg: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = GridConfig::default();
        GridSection {
            origin_lat: g.origin.lat,
            origin_lon: g.origin.lon,
            level: g.level,
            base_cell_side_m: DEFAULT_BASE_CELL_SIDE_M,
            interval_s: g.interval_s,
            epoch_unix_s: g.epoch,
            workspace_deg: g.workspace_deg,
        }
    }
}

impl GridSection {
    pub fn to_grid(&self) -> GridConfig {
        GridConfig {
            origin: GeoPoint { lat: self.origin_lat, lon: self.origin_lon },
            level: self.level,
            base_cell_side_m: self.base_cell_side_m,
            interval_s: self.interval_s,
            epoch: self.epoch_unix_s,
            workspace_deg: self.workspace_deg,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputSection {
    /// Rejected events tolerated before giving up.
    pub error_budget: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub events: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tables: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub grid: GridSection,
    pub volume: VolumeOptions,
    pub measures: MeasureConfig,
    pub engine: EngineConfig,
    pub input: InputSection,
    pub simulator: SimConfig,
    pub paths: Paths,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn settings(&self) -> Settings {
        Settings { grid: self.grid.to_grid(), volume: self.volume, measures: self.measures, engine: self.engine }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.grid.to_grid().validate().map_err(|e| e.to_string())?;
        let v = &self.volume;
        if !(0.0..=1.0).contains(&v.spill_discount) || !(0.0..1.0).contains(&v.min_weight) {
            return Err("volume.spill_discount must lie in [0, 1] and volume.min_weight in [0, 1)".into());
        }
        let m = &self.measures;
        if !(m.gamma > 0.0 && m.tcov_scale > 0.0 && m.scov_scale > 0.0) {
            return Err("measures.gamma and the coverage scales must be positive".into());
        }
        if !(0.0..=1.0).contains(&m.cooccur_threshold) || !(0.0..=1.0).contains(&m.device_weight) {
            return Err("measures.cooccur_threshold and measures.device_weight must lie in [0, 1]".into());
        }
        if self.engine.lateness_intervals < 0 || self.engine.shards == 0 || self.engine.occupancy_cap < 2 {
            return Err("engine.lateness_intervals ≥ 0, engine.shards ≥ 1 and engine.occupancy_cap ≥ 2 required".into());
        }
        self.simulator.validate().map_err(|e| format!("simulator: {e}"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}
