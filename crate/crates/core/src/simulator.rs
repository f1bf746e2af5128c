//! Synthetic labeled datasets.
//!
//! A square workspace is tiled into macro zones, each classed residential or
//! arterial. Residents commute between a home and a work location and
//! sometimes visit occasional locations; visitors hop between random points.
//! Each person carries one handset emitting GSM and WiFi events with
//! bounded-Pareto inter-event times, Gaussian location noise and
//! zone-dependent coverage gaps.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::device::{DeviceIdentity, LookupTables, ModelDistribution, ModelKey, Protocol};
use crate::io::write_event;
use crate::measures::SECONDS_PER_DAY;
use crate::stgrid::{unproject, GeoPoint, GridConfig, LocalXY};
use crate::stvolume::{Event, UncertaintyEllipse};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneWeights {
    pub residential: f64,
    pub arterial: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalParams {
    pub mean_gap_s: f64,
    /// Ratio `H / L` of the inter-event time support.
    pub pareto_spread: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub major_mean_m: f64,
    pub major_sd_m: f64,
    pub minor_mean_m: f64,
    pub minor_sd_m: f64,
    pub shift_sd_m: f64,
    /// Probability that a zone of each class has coverage.
    pub coverage_residential: f64,
    pub coverage_arterial: f64,
}

impl SignalParams {
    pub fn gsm() -> Self {
        SignalParams {
            mean_gap_s: 3600.0,
            pareto_spread: 10.0,
            alpha_min: 1.1,
            alpha_max: 2.5,
            major_mean_m: 100.0,
            major_sd_m: 25.0,
            minor_mean_m: 50.0,
            minor_sd_m: 10.0,
            shift_sd_m: 10.0,
            coverage_residential: 0.95,
            coverage_arterial: 0.98,
        }
    }

    pub fn wifi() -> Self {
        SignalParams {
            mean_gap_s: 2700.0,
            major_mean_m: 125.0,
            major_sd_m: 30.0,
            minor_mean_m: 75.0,
            minor_sd_m: 15.0,
            coverage_residential: 0.98,
            coverage_arterial: 0.95,
            ..Self::gsm()
        }
    }

    fn validate(&self, name: &str) -> Result<(), String> {
        let ok = self.mean_gap_s > 0.0
            && self.pareto_spread > 1.0
            && self.alpha_min > 0.0
            && self.alpha_min <= self.alpha_max
            && self.major_mean_m > 0.0
            && self.minor_mean_m > 0.0
            && self.major_sd_m >= 0.0
            && self.minor_sd_m >= 0.0
            && self.shift_sd_m >= 0.0
            && (0.0..=1.0).contains(&self.coverage_residential)
            && (0.0..=1.0).contains(&self.coverage_arterial);
        if ok {
            Ok(())
        } else {
            Err(format!("invalid {name} signal parameters"))
        }
    }
}

impl Default for SignalParams {
    fn default() -> Self {
        Self::gsm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatalogConfig {
    pub manufacturers: usize,
    pub models_per_manufacturer: usize,
    pub zipf_exponent: f64,
    pub ouis_per_manufacturer: usize,
    /// Fraction of models with at least one tabled signature.
    pub signature_fraction: f64,
    /// Chance that a model also exhibits a sibling model's signature.
    pub shared_signature_prob: f64,
    /// Probability that a MAC-space neighbour has the same model.
    pub mac_same_model: f64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        CatalogConfig {
            manufacturers: 8,
            models_per_manufacturer: 5,
            zipf_exponent: 1.0,
            ouis_per_manufacturer: 2,
            signature_fraction: 0.8,
            shared_signature_prob: 0.3,
            mac_same_model: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Total handsets, residents and visitors together.
    pub n_devices: usize,
    pub visitor_fraction: f64,
    pub days: u32,
    pub seed: u64,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub epoch_unix_s: f64,
    pub workspace_km: f64,
    pub zone_side_m: f64,
    pub residential_fraction: f64,
    pub home_weights: ZoneWeights,
    pub work_weights: ZoneWeights,
    pub occasional_weights: ZoneWeights,
    pub max_occasional: usize,
    pub evening_visit_prob: f64,
    pub weekend_trip_prob: f64,
    pub speed_min_mps: f64,
    pub speed_max_mps: f64,
    pub wps_rate: f64,
    pub catalog: CatalogConfig,
    pub gsm: SignalParams,
    pub wifi: SignalParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_devices: 1000,
            visitor_fraction: 0.1,
            days: 7,
            seed: 1,
            origin_lat: 36.17,
            origin_lon: -115.14,
            epoch_unix_s: 1_704_067_200.0,
            workspace_km: 10.0,
            zone_side_m: 500.0,
            residential_fraction: 0.7,
            home_weights: ZoneWeights { residential: 0.9, arterial: 0.1 },
            work_weights: ZoneWeights { residential: 0.3, arterial: 0.7 },
            occasional_weights: ZoneWeights { residential: 0.4, arterial: 0.6 },
            max_occasional: 3,
            evening_visit_prob: 0.3,
            weekend_trip_prob: 0.8,
            speed_min_mps: 8.0,
            speed_max_mps: 15.0,
            wps_rate: 0.3,
            catalog: CatalogConfig::default(),
            gsm: SignalParams::gsm(),
            wifi: SignalParams::wifi(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let weights_ok = |w: &ZoneWeights| w.residential >= 0.0 && w.arterial >= 0.0 && w.residential + w.arterial > 0.0;
        if self.n_devices == 0 || self.days == 0 {
            return Err("n_devices and days must be positive".into());
        }
        if !unit(self.visitor_fraction) || !unit(self.residential_fraction) || !unit(self.wps_rate) {
            return Err("fractions must lie in [0, 1]".into());
        }
        if !unit(self.evening_visit_prob) || !unit(self.weekend_trip_prob) {
            return Err("trip probabilities must lie in [0, 1]".into());
        }
        if !(self.workspace_km > 0.0 && self.zone_side_m > 0.0 && self.zone_side_m <= self.workspace_km * 1000.0) {
            return Err("workspace must hold at least one zone".into());
        }
        if !(self.speed_min_mps > 0.0 && self.speed_min_mps <= self.speed_max_mps) {
            return Err("invalid speed range".into());
        }
        if ![self.home_weights, self.work_weights, self.occasional_weights].iter().all(weights_ok) {
            return Err("zone weights must be non-negative with a positive sum".into());
        }
        let c = &self.catalog;
        if c.manufacturers == 0 || c.models_per_manufacturer == 0 || c.ouis_per_manufacturer == 0 {
            return Err("catalog counts must be positive".into());
        }
        if c.manufacturers > 256 || c.ouis_per_manufacturer > 256 {
            return Err("catalog supports at most 256 manufacturers and OUIs each".into());
        }
        if !unit(c.signature_fraction) || !unit(c.shared_signature_prob) || !unit(c.mac_same_model) {
            return Err("catalog probabilities must lie in [0, 1]".into());
        }
        GeoPoint::new(self.origin_lat, self.origin_lon).map_err(|e| e.to_string())?;
        self.gsm.validate("gsm")?;
        self.wifi.validate("wifi")
    }

    pub fn n_visitors(&self) -> usize {
        ((self.n_devices as f64 * self.visitor_fraction).round() as usize).min(self.n_devices)
    }

    pub fn horizon_s(&self) -> f64 {
        self.days as f64 * SECONDS_PER_DAY
    }

    pub fn grid(&self) -> GridConfig {
        GridConfig { origin: GeoPoint { lat: self.origin_lat, lon: self.origin_lon }, epoch: self.epoch_unix_s, ..GridConfig::default() }
    }

    fn signal(&self, p: Protocol) -> &SignalParams {
        match p {
            Protocol::Gsm => &self.gsm,
            Protocol::Wifi => &self.wifi,
        }
    }
}

const STREAM_ZONES: u64 = 1;
const STREAM_CATALOG: u64 = 2;
const STREAM_PERSON: u64 = 3;
const STREAM_DEVICE: u64 = 4;
const STREAM_EVENTS: u64 = 5;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, kind: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ kind.rotate_left(56)) ^ index))
}

/// Uniform in `[0, 1)` from a hash, for per-zone coin flips.
fn hash_unit(seed: u64, a: u64, b: u64, c: u64) -> f64 {
    (mix(mix(mix(seed) ^ a) ^ b.rotate_left(21) ^ c.rotate_left(42)) >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZoneClass {
    Residential,
    Arterial,
}

/// The macro-zone tiling of the workspace.
#[derive(Debug, Clone)]
pub struct ZoneMap {
    seed: u64,
    side: f64,
    n: i64,
    half: f64,
    classes: Vec<ZoneClass>,
    residential: Vec<usize>,
    arterial: Vec<usize>,
    cov: [[f64; 2]; 2],
}

impl ZoneMap {
    pub fn new(cfg: &SimConfig) -> Self {
        let n = ((cfg.workspace_km * 1000.0 / cfg.zone_side_m).floor() as i64).max(1);
        let side = cfg.zone_side_m;
        let mut rng = stream(cfg.seed, STREAM_ZONES, 0);
        let classes: Vec<_> = (0..n * n)
            .map(|_| if rng.random::<f64>() < cfg.residential_fraction { ZoneClass::Residential } else { ZoneClass::Arterial })
            .collect();
        let pick = |c| classes.iter().enumerate().filter(|(_, k)| **k == c).map(|(i, _)| i).collect::<Vec<_>>();
        let (residential, arterial) = (pick(ZoneClass::Residential), pick(ZoneClass::Arterial));
        let cov = [
            [cfg.gsm.coverage_residential, cfg.gsm.coverage_arterial],
            [cfg.wifi.coverage_residential, cfg.wifi.coverage_arterial],
        ];
        ZoneMap { seed: cfg.seed, side, n, half: n as f64 * side / 2.0, classes, residential, arterial, cov }
    }

    pub fn zone_count(&self) -> usize {
        self.classes.len()
    }

    pub fn zone_of(&self, p: LocalXY) -> usize {
        let ix = (((p.x + self.half) / self.side).floor() as i64).clamp(0, self.n - 1);
        let iy = (((p.y + self.half) / self.side).floor() as i64).clamp(0, self.n - 1);
        (iy * self.n + ix) as usize
    }

    pub fn class(&self, zone: usize) -> ZoneClass {
        self.classes[zone]
    }

    /// Whether `protocol` is observable anywhere in `zone`.
    pub fn covered(&self, zone: usize, protocol: Protocol) -> bool {
        let (pi, ci) = (protocol as usize, self.classes[zone] as usize);
        let p = self.cov[pi][ci];
        p >= 1.0 || hash_unit(self.seed, zone as u64, pi as u64 + 11, 7) < p
    }

    fn uniform_in(&self, zone: usize, rng: &mut impl Rng) -> LocalXY {
        let (ix, iy) = ((zone as i64 % self.n) as f64, (zone as i64 / self.n) as f64);
        LocalXY::new(
            (ix + rng.random::<f64>()) * self.side - self.half,
            (iy + rng.random::<f64>()) * self.side - self.half,
        )
    }

    /// A point in a zone drawn by class weight, then uniformly.
    pub fn sample(&self, w: &ZoneWeights, rng: &mut impl Rng) -> LocalXY {
        let (r, a) = (&self.residential, &self.arterial);
        let pool = match (r.is_empty(), a.is_empty()) {
            (true, _) => a,
            (_, true) => r,
            _ if rng.random::<f64>() * (w.residential + w.arterial) < w.residential => r,
            _ => a,
        };
        let zone = pool[rng.random_range(0..pool.len())];
        self.uniform_in(zone, rng)
    }

    pub fn sample_uniform(&self, rng: &mut impl Rng) -> LocalXY {
        let zone = rng.random_range(0..self.classes.len());
        self.uniform_in(zone, rng)
    }
}

/// One leg of a schedule. Times are seconds since the simulation start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Trip {
    pub depart_s: f64,
    pub origin: LocalXY,
    pub destination: LocalXY,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Person {
    pub person_id: usize,
    pub visitor: bool,
    pub home: LocalXY,
    pub work: Option<LocalXY>,
    pub occasional: Vec<LocalXY>,
    pub speed_mps: f64,
    /// Trips of each day, in departure order.
    pub schedule: Vec<Vec<Trip>>,
}

/// Builds a day's trips so each departs after the previous arrival.
struct Planner {
    at: LocalXY,
    free_at: f64,
    speed: f64,
    trips: Vec<Trip>,
}

impl Planner {
    fn go(&mut self, depart: f64, to: LocalXY, dwell_s: f64) {
        let depart = depart.max(self.free_at + 60.0);
        self.trips.push(Trip { depart_s: depart, origin: self.at, destination: to });
        self.free_at = depart + self.at.distance(&to) / self.speed + dwell_s;
        self.at = to;
    }
}

fn is_weekend(cfg: &SimConfig, day: u32) -> bool {
    let days_since_1970 = (cfg.epoch_unix_s / SECONDS_PER_DAY).floor() as i64 + day as i64;
    // 1970-01-01 was a Thursday; 0 = Monday
    (days_since_1970 + 3).rem_euclid(7) >= 5
}

fn jitter(rng: &mut impl Rng, sd_s: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (z * sd_s).clamp(-3.0 * sd_s, 3.0 * sd_s)
}

fn make_person(cfg: &SimConfig, zones: &ZoneMap, id: usize, visitor: bool) -> Person {
    let mut rng = stream(cfg.seed, STREAM_PERSON, id as u64);
    let speed = rng.random_range(cfg.speed_min_mps..=cfg.speed_max_mps);
    let hour = 3600.0;
    if visitor {
        let home = zones.sample_uniform(&mut rng);
        let mut schedule = Vec::with_capacity(cfg.days as usize);
        for d in 0..cfg.days {
            let day0 = d as f64 * SECONDS_PER_DAY;
            let mut pl = Planner { at: home, free_at: day0, speed, trips: Vec::new() };
            let mut t = day0 + 9.0 * hour + jitter(&mut rng, 0.5 * hour);
            for _ in 0..rng.random_range(2..=4) {
                let dwell = rng.random_range(1.0..3.0) * hour;
                pl.go(t, zones.sample_uniform(&mut rng), dwell);
                t = pl.free_at;
            }
            pl.go(t, home, 0.0);
            schedule.push(pl.trips);
        }
        return Person { person_id: id, visitor, home, work: None, occasional: Vec::new(), speed_mps: speed, schedule };
    }

    let home = zones.sample(&cfg.home_weights, &mut rng);
    let mut work = zones.sample(&cfg.work_weights, &mut rng);
    while work == home {
        work = zones.sample(&cfg.work_weights, &mut rng);
    }
    let n_occ = if cfg.max_occasional == 0 { 0 } else { rng.random_range(1..=cfg.max_occasional) };
    let occasional: Vec<_> = (0..n_occ).map(|_| zones.sample(&cfg.occasional_weights, &mut rng)).collect();
    let pick_occ = |rng: &mut ChaCha8Rng| occasional.get(rng.random_range(0..occasional.len().max(1))).copied();
    let mut schedule = Vec::with_capacity(cfg.days as usize);
    for d in 0..cfg.days {
        let day0 = d as f64 * SECONDS_PER_DAY;
        let mut pl = Planner { at: home, free_at: day0, speed, trips: Vec::new() };
        if is_weekend(cfg, d) {
            if rng.random::<f64>() < cfg.weekend_trip_prob {
                if let Some(o) = pick_occ(&mut rng) {
                    let dwell = rng.random_range(1.0..3.0) * hour;
                    pl.go(day0 + rng.random_range(10.0..14.0) * hour, o, dwell);
                    pl.go(pl.free_at, home, 0.0);
                }
            }
        } else {
            let leave = day0 + 7.5 * hour + jitter(&mut rng, 0.5 * hour);
            pl.go(leave, work, 0.0);
            let back = day0 + 17.0 * hour + jitter(&mut rng, 0.5 * hour);
            let visit = rng.random::<f64>() < cfg.evening_visit_prob;
            match pick_occ(&mut rng).filter(|_| visit) {
                Some(o) => {
                    let dwell = rng.random_range(1.0..2.0) * hour;
                    pl.go(back, o, dwell);
                    pl.go(pl.free_at, home, 0.0);
                }
                None => pl.go(back, home, 0.0),
            }
        }
        schedule.push(pl.trips);
    }
    Person { person_id: id, visitor, home, work: Some(work), occasional, speed_mps: speed, schedule }
}

/// Residents first, then `round(n_devices · visitor_fraction)` visitors.
pub fn generate_population(cfg: &SimConfig, zones: &ZoneMap) -> Vec<Person> {
    let n_res = cfg.n_devices - cfg.n_visitors();
    (0..cfg.n_devices).into_par_iter().map(|i| make_person(cfg, zones, i, i >= n_res)).collect()
}

/// Piecewise-linear ground-truth path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// `(seconds since start, position)`, non-decreasing in time.
    points: Vec<(f64, LocalXY)>,
}

impl Trace {
    pub fn position(&self, t: f64) -> LocalXY {
        let i = self.points.partition_point(|(pt, _)| *pt <= t);
        if i == 0 {
            return self.points[0].1;
        }
        if i == self.points.len() {
            return self.points[i - 1].1;
        }
        let ((t0, p0), (t1, p1)) = (self.points[i - 1], self.points[i]);
        if t1 <= t0 {
            return p1;
        }
        let f = (t - t0) / (t1 - t0);
        LocalXY::new(p0.x + f * (p1.x - p0.x), p0.y + f * (p1.y - p0.y))
    }
}

/// Straight constant-speed legs; stationary between them.
pub fn generate_trace(p: &Person) -> Trace {
    let mut points = vec![(0.0, p.home)];
    for trip in p.schedule.iter().flatten() {
        let arrive = trip.depart_s + trip.origin.distance(&trip.destination) / p.speed_mps;
        points.push((trip.depart_s, trip.origin));
        points.push((arrive, trip.destination));
    }
    Trace { points }
}

/// Sampling statistics behind the synthetic lookup tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub model_shares: BTreeMap<ModelKey, f64>,
    pub model_tacs: BTreeMap<ModelKey, Vec<String>>,
    pub manufacturer_ouis: BTreeMap<String, Vec<String>>,
    pub model_signatures: BTreeMap<ModelKey, Vec<String>>,
    pub wps_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    #[serde(flatten)]
    pub tables: LookupTables,
    pub sampling: Sampling,
}

const MANUFACTURER_NAMES: [&str; 8] = ["Aster", "Brio", "Corvid", "Dalen", "Eon", "Fenix", "Gala", "Helio"];

fn zipf(n: usize, s: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-s)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

pub fn build_catalog(cfg: &SimConfig) -> Catalog {
    let c = &cfg.catalog;
    let mut rng = stream(cfg.seed, STREAM_CATALOG, 0);
    let mfr_share = zipf(c.manufacturers, c.zipf_exponent);
    let model_share = zipf(c.models_per_manufacturer, c.zipf_exponent);
    let mut tables = LookupTables { version: LookupTables::VERSION, ..Default::default() };
    let mut s = Sampling {
        model_shares: BTreeMap::new(),
        model_tacs: BTreeMap::new(),
        manufacturer_ouis: BTreeMap::new(),
        model_signatures: BTreeMap::new(),
        wps_rate: cfg.wps_rate,
    };
    let mut next_sig = 0;
    for m in 0..c.manufacturers {
        let name = MANUFACTURER_NAMES.get(m).map_or_else(|| format!("Mfr{m}"), |n| n.to_string());
        let ouis: Vec<String> = (0..c.ouis_per_manufacturer).map(|j| format!("02:{m:02X}:{j:02X}")).collect();
        for o in &ouis {
            tables.oui.insert(o.clone(), name.clone());
        }
        s.manufacturer_ouis.insert(name.clone(), ouis);
        let models: Vec<ModelKey> =
            (0..c.models_per_manufacturer).map(|j| ModelKey::new(&name, format!("{}{}", &name[..1], 100 + 10 * j))).collect();
        for (j, key) in models.iter().enumerate() {
            let tac = format!("35{:03}{:03}", m, j);
            tables.tac.insert(tac.clone(), key.clone());
            s.model_tacs.insert(key.clone(), vec![tac]);
            s.model_shares.insert(key.clone(), mfr_share[m] * model_share[j]);
            let sigs = if rng.random::<f64>() < c.signature_fraction {
                (0..rng.random_range(1..=2))
                    .map(|_| {
                        next_sig += 1;
                        format!("sig{next_sig:04}")
                    })
                    .collect()
            } else {
                Vec::new()
            };
            s.model_signatures.insert(key.clone(), sigs);
        }
        // some models also exhibit a sibling's signature
        for j in 0..models.len() {
            if models.len() > 1 && rng.random::<f64>() < c.shared_signature_prob {
                let k = (j + rng.random_range(1..models.len())) % models.len();
                if let Some(sig) = s.model_signatures[&models[k]].first().cloned() {
                    let own = s.model_signatures.get_mut(&models[j]).expect("model registered");
                    if !own.is_empty() && !own.contains(&sig) {
                        own.push(sig);
                    }
                }
            }
        }
        for key in &models {
            let others: Vec<_> = models.iter().filter(|k| *k != key).collect();
            let same = if others.is_empty() { 1.0 } else { c.mac_same_model };
            let mut w = vec![(key.clone(), same)];
            w.extend(others.iter().map(|k| ((*k).clone(), (1.0 - same) / others.len() as f64)));
            if let Some(d) = ModelDistribution::from_weights(w) {
                tables.mac_neighbors.insert(key.clone(), d);
            }
        }
    }
    // signature -> share-weighted distribution over the models exhibiting it
    let mut by_sig: BTreeMap<String, Vec<(ModelKey, f64)>> = BTreeMap::new();
    for (key, sigs) in &s.model_signatures {
        for sig in sigs {
            by_sig.entry(sig.clone()).or_default().push((key.clone(), s.model_shares[key]));
        }
    }
    for (sig, w) in by_sig {
        if let Some(d) = ModelDistribution::from_weights(w) {
            tables.signatures.insert(sig, d);
        }
    }
    Catalog { tables, sampling: s }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceProfile {
    pub device_id: String,
    pub gsm_id: String,
    pub wifi_id: String,
    pub manufacturer: String,
    pub model: String,
    pub tac: String,
    pub oui: String,
    pub wps_observed: bool,
    pub mac_proxy_model: ModelKey,
    pub signature: String,
}

impl DeviceProfile {
    pub fn gsm_identity(&self) -> DeviceIdentity {
        DeviceIdentity::gsm(&self.tac)
    }

    pub fn wifi_identity(&self) -> DeviceIdentity {
        let mut d = DeviceIdentity::wifi(&self.oui);
        if self.wps_observed {
            d.wps_manufacturer = Some(self.manufacturer.clone());
            d.wps_model = Some(self.model.clone());
        }
        d.signature = Some(self.signature.clone());
        d.mac_proxy_model = Some(self.mac_proxy_model.clone());
        d
    }
}

fn pick_weighted<'a, T>(items: impl IntoIterator<Item = (&'a T, f64)>, rng: &mut impl Rng) -> &'a T
where
    T: 'a,
{
    let items: Vec<_> = items.into_iter().collect();
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut u = rng.random::<f64>() * total;
    for (x, w) in &items {
        if u < *w {
            return x;
        }
        u -= w;
    }
    items.last().expect("non-empty choice").0
}

/// Model, WPS visibility, MAC-neighbour proxy and signature for one handset.
pub fn assign_device(index: usize, catalog: &Catalog, rng: &mut impl Rng) -> DeviceProfile {
    let s = &catalog.sampling;
    let key = pick_weighted(s.model_shares.iter().map(|(k, w)| (k, *w)), rng).clone();
    let wps_observed = rng.random::<f64>() < s.wps_rate;
    let mac_proxy_model = match catalog.tables.mac_neighbors.get(&key) {
        Some(d) => pick_weighted(d.entries.iter().map(|(k, w)| (k, *w)), rng).clone(),
        None => key.clone(),
    };
    let sigs = &s.model_signatures[&key];
    let signature =
        if sigs.is_empty() { format!("uniq{index:07}") } else { sigs[rng.random_range(0..sigs.len())].clone() };
    let tacs = &s.model_tacs[&key];
    let tac = tacs[rng.random_range(0..tacs.len())].clone();
    let ouis = &s.manufacturer_ouis[&key.manufacturer];
    let oui = ouis[rng.random_range(0..ouis.len())].clone();
    let i = index as u32;
    DeviceProfile {
        device_id: format!("dev{index:06}"),
        gsm_id: format!("{tac}{:07}", index % 10_000_000),
        wifi_id: format!("{oui}:{:02X}:{:02X}:{:02X}", (i >> 16) & 0xFF, (i >> 8) & 0xFF, i & 0xFF),
        manufacturer: key.manufacturer.clone(),
        model: key.model.clone(),
        tac,
        oui,
        wps_observed,
        mac_proxy_model,
        signature,
    }
}

/// Quantile of the bounded Pareto distribution on `[l, h]`; `u = 0` gives `l`.
///
/// Algebraically equal to `(−(u·hᵅ − u·lᵅ − hᵅ)/(hᵅ·lᵅ))^(−1/α)`, rearranged
/// to avoid overflow for wide supports.
pub fn bounded_pareto_quantile(l: f64, h: f64, alpha: f64, u: f64) -> f64 {
    let x = l * (1.0 - u * (1.0 - (l / h).powf(alpha))).powf(-1.0 / alpha);
    x.clamp(l, h)
}

pub fn bounded_pareto_sample(l: f64, h: f64, alpha: f64, rng: &mut impl Rng) -> f64 {
    bounded_pareto_quantile(l, h, alpha, rng.random::<f64>())
}

pub fn bounded_pareto_mean(l: f64, h: f64, alpha: f64) -> f64 {
    if (alpha - 1.0).abs() < 1e-12 {
        return h * l / (h - l) * (h / l).ln();
    }
    let norm = l.powf(alpha) / (1.0 - (l / h).powf(alpha));
    norm * alpha / (alpha - 1.0) * (l.powf(1.0 - alpha) - h.powf(1.0 - alpha))
}

/// Support `[l, spread·l]` whose mean is `mean` for shape `alpha`.
pub fn bounded_pareto_support(mean: f64, spread: f64, alpha: f64) -> (f64, f64) {
    let l = mean / bounded_pareto_mean(1.0, spread, alpha);
    (l, l * spread)
}

fn sample_positive(rng: &mut impl Rng, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return mean;
    }
    let n = Normal::new(mean, sd).expect("finite parameters");
    loop {
        let x = n.sample(rng);
        if x > 0.0 {
            return x;
        }
    }
}

fn sample_ellipse(p: &SignalParams, rng: &mut impl Rng) -> UncertaintyEllipse {
    loop {
        let major = sample_positive(rng, p.major_mean_m, p.major_sd_m);
        let minor = sample_positive(rng, p.minor_mean_m, p.minor_sd_m);
        if minor <= major {
            let orient = rng.random_range(0.0..180.0);
            return UncertaintyEllipse { semi_major_m: major, semi_minor_m: minor, orientation_deg: orient };
        }
    }
}

/// A point drawn from the ellipse's own Gaussian (the ellipse is its 3σ contour).
fn ellipse_offset(e: &UncertaintyEllipse, rng: &mut impl Rng) -> LocalXY {
    let (z1, z2): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
    let (s1, s2) = (e.semi_major_m / 3.0, e.semi_minor_m / 3.0);
    let (sin, cos) = e.orientation_deg.to_radians().sin_cos();
    LocalXY::new(z1 * s1 * cos - z2 * s2 * sin, z1 * s1 * sin + z2 * s2 * cos)
}

/// Events of one handset over the horizon, both protocols, in time order per protocol.
pub fn generate_device_events(
    cfg: &SimConfig,
    zones: &ZoneMap,
    grid: &GridConfig,
    profile: &DeviceProfile,
    trace: &Trace,
    rng: &mut impl Rng,
) -> Vec<Event> {
    let mut out = Vec::new();
    let horizon = cfg.horizon_s();
    for protocol in [Protocol::Gsm, Protocol::Wifi] {
        let p = cfg.signal(protocol);
        let (id, identity) = match protocol {
            Protocol::Gsm => (&profile.gsm_id, profile.gsm_identity()),
            Protocol::Wifi => (&profile.wifi_id, profile.wifi_identity()),
        };
        let alpha = rng.random_range(p.alpha_min..=p.alpha_max);
        let (l, h) = bounded_pareto_support(p.mean_gap_s, p.pareto_spread, alpha);
        // start in equilibrium: a length-biased gap, entered at a uniform point
        let first = loop {
            let x = bounded_pareto_sample(l, h, alpha, rng);
            if rng.random::<f64>() * h < x {
                break x;
            }
        };
        let mut t = rng.random::<f64>() * first;
        while t < horizon {
            let truth = trace.position(t);
            let ellipse = sample_ellipse(p, rng);
            let (dx, dy): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            let shifted = LocalXY::new(truth.x + dx * p.shift_sd_m, truth.y + dy * p.shift_sd_m);
            let off = ellipse_offset(&ellipse, rng);
            if zones.covered(zones.zone_of(truth), protocol) {
                out.push(Event {
                    id: id.clone(),
                    protocol,
                    t: cfg.epoch_unix_s + t,
                    center: unproject(LocalXY::new(shifted.x + off.x, shifted.y + off.y), grid),
                    ellipse,
                    device: Some(identity.clone()),
                });
            }
            t += bounded_pareto_sample(l, h, alpha, rng);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub device_id: String,
    pub gsm_id: String,
    pub wifi_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub devices: Vec<TruthEntry>,
}

impl GroundTruth {
    pub fn load(path: &Path) -> io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    /// GSM id -> WiFi id.
    pub fn partners(&self) -> BTreeMap<&str, &str> {
        self.devices.iter().map(|d| (d.gsm_id.as_str(), d.wifi_id.as_str())).collect()
    }

    /// Whether `a` and `b`, in either order, belong to the same device.
    pub fn is_match(&self, a: &str, b: &str) -> bool {
        self.devices.iter().any(|d| (d.gsm_id == a && d.wifi_id == b) || (d.gsm_id == b && d.wifi_id == a))
    }
}

pub struct SimOutput {
    /// Sorted by `(t, id)`.
    pub events: Vec<Event>,
    pub truth: GroundTruth,
    pub catalog: Catalog,
    pub profiles: Vec<DeviceProfile>,
}

pub fn simulate(cfg: &SimConfig) -> Result<SimOutput, String> {
    cfg.validate()?;
    let zones = ZoneMap::new(cfg);
    let grid = cfg.grid();
    let catalog = build_catalog(cfg);
    let people = generate_population(cfg, &zones);
    let per_device: Vec<(DeviceProfile, Vec<Event>)> = people
        .par_iter()
        .map(|p| {
            let mut rng = stream(cfg.seed, STREAM_DEVICE, p.person_id as u64);
            let profile = assign_device(p.person_id, &catalog, &mut rng);
            let trace = generate_trace(p);
            let mut rng = stream(cfg.seed, STREAM_EVENTS, p.person_id as u64);
            let events = generate_device_events(cfg, &zones, &grid, &profile, &trace, &mut rng);
            (profile, events)
        })
        .collect();
    let truth = GroundTruth {
        devices: per_device
            .iter()
            .map(|(p, _)| TruthEntry { device_id: p.device_id.clone(), gsm_id: p.gsm_id.clone(), wifi_id: p.wifi_id.clone() })
            .collect(),
    };
    let mut profiles = Vec::with_capacity(per_device.len());
    let mut events = Vec::new();
    for (p, ev) in per_device {
        profiles.push(p);
        events.extend(ev);
    }
    events.par_sort_by(|a, b| a.t.total_cmp(&b.t).then_with(|| a.id.cmp(&b.id)));
    Ok(SimOutput { events, truth, catalog, profiles })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()
}

impl SimOutput {
    /// Writes `events.jsonl`, `truth.json`, `tables.json` and `simconfig.json`.
    pub fn write_to(&self, dir: &Path, cfg: &SimConfig) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("events.jsonl"))?);
        for e in &self.events {
            write_event(&mut w, e)?;
        }
        w.flush()?;
        write_json(&dir.join("truth.json"), &self.truth)?;
        write_json(&dir.join("tables.json"), &self.catalog)?;
        write_json(&dir.join("simconfig.json"), cfg)
    }
}
