//! Device metadata leaked by GSM and WiFi frames.
//!
//! A GSM identifier's TAC names the exact manufacturer and model. A WiFi
//! identifier's OUI names the manufacturer, and WPS fields, when observed,
//! name both. Two identifiers whose resolved manufacturers (or WPS-vs-TAC
//! models) conflict cannot belong to the same handset and are pruned.
//! Identifiers that survive get a soft match score from two inference
//! techniques: management-frame signatures and MAC-address neighbourhoods.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "GSM")]
    Gsm,
    #[serde(rename = "WIFI")]
    Wifi,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Gsm => "GSM",
            Protocol::Wifi => "WIFI",
        })
    }
}

/// A `(manufacturer, model)` pair. Serialized as `"Manufacturer|Model"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModelKey {
    pub manufacturer: String,
    pub model: String,
}

impl ModelKey {
    pub fn new(manufacturer: impl Into<String>, model: impl Into<String>) -> Self {
        ModelKey { manufacturer: manufacturer.into(), model: model.into() }
    }
}

impl fmt::Display for ModelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}", self.manufacturer, self.model)
    }
}

impl std::str::FromStr for ModelKey {
    type Err = TableError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('|') {
            Some((m, d)) if !m.is_empty() && !d.is_empty() => Ok(ModelKey::new(m, d)),
            _ => Err(TableError::BadModelKey(s.to_string())),
        }
    }
}

impl Serialize for ModelKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error)]
pub enum TableError {
    #[error("malformed model key {0:?}, expected \"Manufacturer|Model\"")]
    BadModelKey(String),
    #[error("distribution for {0:?} does not sum to 1 (sum = {1})")]
    NotNormalized(String, f64),
    #[error("negative probability in distribution for {0:?}")]
    Negative(String),
    #[error("unsupported tables version {0}")]
    Version(u32),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Probability distribution over `(manufacturer, model)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelDistribution {
    pub entries: BTreeMap<ModelKey, f64>,
}

impl ModelDistribution {
    pub fn point(key: ModelKey) -> Self {
        ModelDistribution { entries: BTreeMap::from([(key, 1.0)]) }
    }

    /// Builds a distribution from non-negative weights, normalizing them.
    /// Returns `None` when every weight is zero.
    pub fn from_weights(weights: impl IntoIterator<Item = (ModelKey, f64)>) -> Option<Self> {
        let mut entries = BTreeMap::new();
        for (k, w) in weights {
            if w > 0.0 {
                *entries.entry(k).or_insert(0.0) += w;
            }
        }
        let total: f64 = entries.values().sum();
        if total <= 0.0 {
            return None;
        }
        entries.values_mut().for_each(|w| *w /= total);
        Some(ModelDistribution { entries })
    }

    pub fn prob(&self, key: &ModelKey) -> f64 {
        self.entries.get(key).copied().unwrap_or(0.0)
    }

    /// Probability that independent draws from `self` and `other` agree.
    pub fn agreement(&self, other: &ModelDistribution) -> f64 {
        let (small, large) = if self.entries.len() <= other.entries.len() { (self, other) } else { (other, self) };
        small.entries.iter().map(|(k, p)| p * large.prob(k)).sum()
    }

    fn validate(&self, name: &str) -> Result<(), TableError> {
        if self.entries.values().any(|p| *p < 0.0 || p.is_nan()) {
            return Err(TableError::Negative(name.to_string()));
        }
        let sum: f64 = self.entries.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(TableError::NotNormalized(name.to_string(), sum));
        }
        Ok(())
    }
}

/// Metadata observed for one identifier.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceIdentity {
    #[serde(skip)]
    pub protocol: Option<Protocol>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tac: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oui: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wps_manufacturer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wps_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mac_proxy_model: Option<ModelKey>,
}

impl DeviceIdentity {
    pub fn gsm(tac: impl Into<String>) -> Self {
        DeviceIdentity { protocol: Some(Protocol::Gsm), tac: Some(tac.into()), ..Default::default() }
    }

    pub fn wifi(oui: impl Into<String>) -> Self {
        DeviceIdentity { protocol: Some(Protocol::Wifi), oui: Some(oui.into()), ..Default::default() }
    }

    /// Checks the per-protocol field rules. `protocol` must be set.
    pub fn check(&self) -> Result<(), String> {
        match self.protocol {
            Some(Protocol::Gsm) => {
                if self.oui.is_some() || self.signature.is_some() || self.wps_manufacturer.is_some()
                    || self.wps_model.is_some() || self.mac_proxy_model.is_some()
                {
                    return Err("GSM identity carries WiFi-only fields".into());
                }
                if let Some(tac) = &self.tac {
                    if tac.len() != 8 || !tac.bytes().all(|b| b.is_ascii_digit()) {
                        return Err(format!("TAC {tac:?} is not 8 digits"));
                    }
                }
            }
            Some(Protocol::Wifi) => {
                if self.tac.is_some() {
                    return Err("WiFi identity carries a TAC".into());
                }
            }
            None => return Err("identity has no protocol".into()),
        }
        Ok(())
    }

    /// Fills absent fields from `other`, keeping what is already known.
    pub fn merge_missing(&mut self, other: &DeviceIdentity) {
        fn fill<T: Clone>(a: &mut Option<T>, b: &Option<T>) {
            if a.is_none() {
                a.clone_from(b);
            }
        }
        fill(&mut self.tac, &other.tac);
        fill(&mut self.oui, &other.oui);
        fill(&mut self.wps_manufacturer, &other.wps_manufacturer);
        fill(&mut self.wps_model, &other.wps_model);
        fill(&mut self.signature, &other.signature);
        fill(&mut self.mac_proxy_model, &other.mac_proxy_model);
    }
}

/// How the two inference-technique probabilities are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceCombine {
    #[default]
    Max,
    Mean,
}

/// Lookup tables mapping leaked identifiers to device models.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LookupTables {
    #[serde(default = "LookupTables::current_version")]
    pub version: u32,
    /// TAC -> (manufacturer, model).
    #[serde(default)]
    pub tac: BTreeMap<String, ModelKey>,
    /// OUI -> manufacturer.
    #[serde(default)]
    pub oui: BTreeMap<String, String>,
    /// Signature -> models that have exhibited it.
    #[serde(default)]
    pub signatures: BTreeMap<String, ModelDistribution>,
    /// True model -> distribution of the nearest MAC-space neighbour's model.
    #[serde(default)]
    pub mac_neighbors: BTreeMap<ModelKey, ModelDistribution>,
}

const KNOWN_TABLE_KEYS: &[&str] = &["version", "tac", "oui", "signatures", "mac_neighbors", "sampling"];

impl LookupTables {
    pub const VERSION: u32 = 1;

    fn current_version() -> u32 {
        Self::VERSION
    }

    /// Parses `tables.json`. Unknown top-level keys are tolerated and
    /// returned so callers can report them.
    pub fn from_json(text: &str) -> Result<(Self, Vec<String>), TableError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let mut unknown = Vec::new();
        let mut known = serde_json::Map::new();
        if let serde_json::Value::Object(map) = value {
            for (k, v) in map {
                if KNOWN_TABLE_KEYS.contains(&k.as_str()) {
                    if k != "sampling" {
                        known.insert(k, v);
                    }
                } else {
                    unknown.push(k);
                }
            }
        }
        let tables: LookupTables = serde_json::from_value(serde_json::Value::Object(known))?;
        if tables.version != Self::VERSION {
            return Err(TableError::Version(tables.version));
        }
        tables.validate()?;
        Ok((tables, unknown))
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<String>), TableError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), TableError> {
        for (sig, d) in &self.signatures {
            d.validate(sig)?;
        }
        for (m, d) in &self.mac_neighbors {
            d.validate(&m.to_string())?;
        }
        Ok(())
    }

    pub fn manufacturers(&self) -> BTreeSet<&str> {
        self.tac.values().map(|m| m.manufacturer.as_str()).chain(self.oui.values().map(String::as_str)).collect()
    }

    /// Posterior over the true model given an observed nearest-neighbour
    /// model, using a uniform prior over the tabled models.
    pub fn mac_posterior(&self, neighbor: &ModelKey) -> Option<ModelDistribution> {
        ModelDistribution::from_weights(self.mac_neighbors.iter().map(|(truth, d)| (truth.clone(), d.prob(neighbor))))
    }
}

/// Why a pair was judged compatible or not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PruneReason {
    ManufacturerMismatch,
    WpsModelMismatch,
    NoConflict,
}

impl fmt::Display for PruneReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneReason::ManufacturerMismatch => "manufacturer_mismatch",
            PruneReason::WpsModelMismatch => "wps_model_mismatch",
            PruneReason::NoConflict => "",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Compatible,
    Incompatible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchDecision {
    pub verdict: Verdict,
    pub reason: PruneReason,
    pub score: Option<f64>,
}

impl MatchDecision {
    fn incompatible(reason: PruneReason) -> Self {
        MatchDecision { verdict: Verdict::Incompatible, reason, score: None }
    }
}

/// Manufacturer named by the identity's leaked fields, if any table knows it.
/// WPS fields take precedence over the OUI.
pub fn resolve_manufacturer(d: &DeviceIdentity, tables: &LookupTables) -> Option<String> {
    match d.protocol {
        Some(Protocol::Gsm) => d.tac.as_ref().and_then(|t| tables.tac.get(t)).map(|m| m.manufacturer.clone()),
        Some(Protocol::Wifi) => d
            .wps_manufacturer
            .clone()
            .or_else(|| d.oui.as_ref().and_then(|o| tables.oui.get(o)).cloned()),
        None => None,
    }
}

/// Exact model known from the frame contents: the TAC for GSM, both WPS
/// fields for WiFi.
fn explicit_model(d: &DeviceIdentity, tables: &LookupTables) -> Option<ModelKey> {
    match d.protocol {
        Some(Protocol::Gsm) => d.tac.as_ref().and_then(|t| tables.tac.get(t)).cloned(),
        Some(Protocol::Wifi) => match (&d.wps_manufacturer, &d.wps_model) {
            (Some(m), Some(x)) => Some(ModelKey::new(m.clone(), x.clone())),
            _ => None,
        },
        None => None,
    }
}

pub fn check_compatibility(a: &DeviceIdentity, b: &DeviceIdentity, tables: &LookupTables) -> MatchDecision {
    if let (Some(ma), Some(mb)) = (resolve_manufacturer(a, tables), resolve_manufacturer(b, tables)) {
        if ma != mb {
            return MatchDecision::incompatible(PruneReason::ManufacturerMismatch);
        }
    }
    if wps_model_conflict(a, b, tables) || wps_model_conflict(b, a, tables) {
        return MatchDecision::incompatible(PruneReason::WpsModelMismatch);
    }
    MatchDecision { verdict: Verdict::Compatible, reason: PruneReason::NoConflict, score: None }
}

/// `wifi` has a WPS model field and `other` has a known model that differs.
fn wps_model_conflict(wifi: &DeviceIdentity, other: &DeviceIdentity, tables: &LookupTables) -> bool {
    if wifi.protocol != Some(Protocol::Wifi) {
        return false;
    }
    let Some(wps_model) = &wifi.wps_model else { return false };
    let other_model = match other.protocol {
        Some(Protocol::Gsm) => explicit_model(other, tables).map(|m| m.model),
        Some(Protocol::Wifi) => other.wps_model.clone(),
        None => None,
    };
    matches!(other_model, Some(m) if &m != wps_model)
}

/// Distributions over the true model of `d` from the two inference
/// techniques, in order (signature, MAC neighbourhood). A known exact model
/// is a point mass for both.
fn inferred(d: &DeviceIdentity, tables: &LookupTables) -> [Option<ModelDistribution>; 2] {
    if d.protocol == Some(Protocol::Gsm) {
        let m = explicit_model(d, tables).map(ModelDistribution::point);
        return [m.clone(), m];
    }
    let sig = d.signature.as_ref().and_then(|s| tables.signatures.get(s)).cloned();
    let mac = d.mac_proxy_model.as_ref().and_then(|n| tables.mac_posterior(n));
    [sig, mac]
}

/// Soft evidence in [0, 1] that two compatible identifiers share a handset.
pub fn device_match_score(a: &DeviceIdentity, b: &DeviceIdentity, tables: &LookupTables, combine: DeviceCombine) -> f64 {
    let (ea, eb) = (explicit_model(a, tables), explicit_model(b, tables));
    let wps_side = |d: &DeviceIdentity| d.protocol == Some(Protocol::Wifi) && d.wps_model.is_some();
    if (wps_side(a) || wps_side(b)) && ea.is_some() && ea == eb {
        return 1.0;
    }
    let [sa, ma] = inferred(a, tables);
    let [sb, mb] = inferred(b, tables);
    let agree = |x: &Option<ModelDistribution>, y: &Option<ModelDistribution>| match (x, y) {
        (Some(x), Some(y)) => x.agreement(y),
        _ => 0.0,
    };
    let (p_sig, p_mac) = (agree(&sa, &sb), agree(&ma, &mb));
    let s = match combine {
        DeviceCombine::Max => p_sig.max(p_mac),
        DeviceCombine::Mean => 0.5 * (p_sig + p_mac),
    };
    s.clamp(0.0, 1.0)
}
