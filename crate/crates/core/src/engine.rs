//! Streaming correlation of identifier pairs.
//!
//! Events are mapped to weighted cells as they arrive and buffered per time
//! interval. When an interval closes, identifiers sharing a cell become
//! candidate pairs (unless their device metadata conflicts), and every live
//! pair observed together in that interval folds the interval into its
//! [`PairAccumulator`]. Rankings can be taken once all intervals are closed.
//!
//! Pairs are partitioned over shards by a hash of their key; each shard owns
//! its accumulators outright, so shard count has no effect on results.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{self, DeviceIdentity, LookupTables, Protocol, PruneReason, Verdict};
use crate::measures::{self, MeasureConfig, MeasureScores, PairAccumulator};
use crate::stgrid::{self, GridConfig, GridError, SpatialCell};
use crate::stvolume::{self, Event, VolumeOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("event for {id} in interval {interval} arrived after interval {newest_flushed} was closed")]
    LateEvent { id: String, interval: i64, newest_flushed: i64 },
    #[error("malformed event: {0}")]
    MalformedEvent(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("cannot close interval {got}; next unclosed interval is {expected}")]
    OutOfOrderFlush { expected: i64, got: i64 },
    #[error("unknown id {0}")]
    UnknownId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// How many intervals an event may trail the newest one seen.
    pub lateness_intervals: i64,
    /// Cells holding more identifiers than this are skipped for candidate discovery.
    pub occupancy_cap: usize,
    pub cross_protocol_only: bool,
    pub shards: usize,
    pub prune: bool,
    pub device_score: bool,
    /// Use spill-discounted weights in the co-occurrence threshold test.
    pub cooccur_use_spill: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            lateness_intervals: 2,
            occupancy_cap: 1024,
            cross_protocol_only: true,
            shards: 1,
            prune: true,
            device_score: true,
            cooccur_use_spill: true,
        }
    }
}

/// Everything the engine needs besides the lookup tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub grid: GridConfig,
    pub volume: VolumeOptions,
    pub measures: MeasureConfig,
    pub engine: EngineConfig,
}

/// An unordered identifier pair, stored with `id_a < id_b`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairKey {
    pub id_a: String,
    pub id_b: String,
    pub cross_protocol: bool,
}

impl PairKey {
    pub fn new(a: &str, b: &str, cross_protocol: bool) -> Self {
        let (id_a, id_b) = if a <= b { (a, b) } else { (b, a) };
        PairKey { id_a: id_a.to_string(), id_b: id_b.to_string(), cross_protocol }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.id_a == id || self.id_b == id
    }

    pub fn partner(&self, id: &str) -> Option<&str> {
        if self.id_a == id {
            Some(&self.id_b)
        } else if self.id_b == id {
            Some(&self.id_a)
        } else {
            None
        }
    }
}

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.id_a, self.id_b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedResult {
    pub rank: usize,
    pub pair: PairKey,
    pub scores: MeasureScores,
    pub cooccur_count: u32,
}

/// State of one pair, for inspection.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum PairState {
    Active { accumulator: PairAccumulator, scores: MeasureScores },
    Pruned { reason: PruneReason },
    NotCandidate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EngineStats {
    pub events: u64,
    pub events_before_epoch: u64,
    pub ids: usize,
    pub intervals_closed: u64,
    pub candidates: usize,
    pub pruned: usize,
    pub capped_cells: u64,
    /// Accumulator storage, `candidates × size_of::<PairAccumulator>()`.
    pub accumulator_bytes: usize,
}

type Ix = u32;

struct IdInfo {
    name: String,
    protocol: Protocol,
    device: Option<DeviceIdentity>,
    /// `(interval, P(observed))` for every closed interval in which the id was seen.
    observed: Vec<(i64, f64)>,
}

/// Cells an id reached in one open interval. Few events land in one
/// interval, so plain vectors beat maps here.
#[derive(Default)]
struct Slot {
    all: Vec<(SpatialCell, f64)>,
    direct: Vec<(SpatialCell, f64)>,
}

fn add_weight(m: &mut Vec<(SpatialCell, f64)>, c: SpatialCell, w: f64) {
    match m.iter_mut().find(|(k, _)| *k == c) {
        Some((_, e)) => *e = 1.0 - (1.0 - *e) * (1.0 - w.min(1.0)),
        None => m.push((c, w.min(1.0))),
    }
}

fn sorted(mut v: Vec<(SpatialCell, f64)>) -> Vec<(SpatialCell, f64)> {
    v.sort_unstable_by_key(|x| x.0);
    v
}

struct Flushed {
    ix: Ix,
    cells: Vec<(SpatialCell, f64)>,
    p_obs: f64,
    /// Weights used for the co-occurrence test and centroid.
    test_cells: Option<Vec<(SpatialCell, f64)>>,
}

impl Flushed {
    fn test(&self) -> &[(SpatialCell, f64)] {
        self.test_cells.as_deref().unwrap_or(&self.cells)
    }
}

#[derive(Default)]
struct Shard {
    keys: Vec<(Ix, Ix)>,
    accs: Vec<PairAccumulator>,
    slot_of: FxHashMap<(Ix, Ix), u32>,
    /// Canonical first member -> (second member, accumulator slot) of live pairs.
    adjacency: FxHashMap<Ix, Vec<(Ix, u32)>>,
    pruned: FxHashMap<(Ix, Ix), PruneReason>,
}

/// The ids observed in one closing interval.
struct Observed {
    slots: Vec<Flushed>,
    /// Position in `slots` by id, `u32::MAX` when unobserved.
    pos: Vec<u32>,
}

impl Observed {
    fn get(&self, ix: Ix) -> Option<&Flushed> {
        self.slots.get(*self.pos.get(ix as usize)? as usize)
    }
}

struct IntervalCtx<'a> {
    t: i64,
    seen: &'a Observed,
    ids: &'a [IdInfo],
    tables: Option<&'a LookupTables>,
    settings: &'a Settings,
}

impl Shard {
    fn admit(&mut self, key: (Ix, Ix), ctx: &IntervalCtx) {
        let (a, b) = (&ctx.ids[key.0 as usize], &ctx.ids[key.1 as usize]);
        if ctx.settings.engine.prune {
            if let (Some(tables), Some(da), Some(db)) = (ctx.tables, &a.device, &b.device) {
                let d = device::check_compatibility(da, db, tables);
                if d.verdict == Verdict::Incompatible {
                    self.pruned.insert(key, d.reason);
                    return;
                }
            }
        }
        let mut acc = PairAccumulator::new();
        // intervals before candidacy: jointly observed, never co-located
        let (mut i, mut j) = (0, 0);
        while i < a.observed.len() && j < b.observed.len() {
            let (ta, pa) = a.observed[i];
            let (tb, pb) = b.observed[j];
            match ta.cmp(&tb) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc.accrue(0.0, pa * pb);
                    i += 1;
                    j += 1;
                }
            }
        }
        let slot = self.accs.len() as u32;
        self.keys.push(key);
        self.accs.push(acc);
        self.slot_of.insert(key, slot);
        self.adjacency.entry(key.0).or_default().push((key.1, slot));
    }

    fn contains(&self, key: &(Ix, Ix)) -> bool {
        self.slot_of.contains_key(key) || self.pruned.contains_key(key)
    }

    fn get(&self, key: &(Ix, Ix)) -> Option<&PairAccumulator> {
        self.slot_of.get(key).map(|&i| &self.accs[i as usize])
    }

    fn close(&mut self, new_pairs: &[(Ix, Ix)], ctx: &IntervalCtx) {
        for key in new_pairs {
            self.admit(*key, ctx);
        }
        let grid = &ctx.settings.grid;
        let threshold = ctx.settings.measures.cooccur_threshold;
        for sa in &ctx.seen.slots {
            let Some(partners) = self.adjacency.get(&sa.ix) else { continue };
            for &(b, slot) in partners {
                let Some(sb) = ctx.seen.get(b) else { continue };
                let acc = &mut self.accs[slot as usize];
                let p_ab = measures::p_cooccur(&sa.cells, &sb.cells);
                let p_both = sa.p_obs * sb.p_obs;
                acc.accrue(p_ab, p_both);
                let (ta, tb) = (sa.test(), sb.test());
                let (t_ab, t_both) = if sa.test_cells.is_some() {
                    (measures::p_cooccur(ta, tb), measures::p_observed(ta) * measures::p_observed(tb))
                } else {
                    (p_ab, p_both)
                };
                if measures::is_cooccurrence(t_ab, t_both, threshold) {
                    let loc = measures::cooccurrence_centroid(ta, tb, grid).expect("co-occurrence implies overlap");
                    acc.record_cooccurrence(ctx.t, loc, grid.interval_s);
                }
            }
        }
    }
}

fn shard_of(key: (Ix, Ix), n: usize) -> usize {
    // splitmix64 finalizer
    let mut z = ((key.0 as u64) << 32 | key.1 as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z % n as u64) as usize
}

pub struct Engine {
    settings: Settings,
    tables: Option<Arc<LookupTables>>,
    ids: Vec<IdInfo>,
    index: FxHashMap<String, Ix>,
    buffers: BTreeMap<i64, FxHashMap<Ix, Slot>>,
    next_flush: i64,
    watermark: Option<i64>,
    shards: Vec<Shard>,
    stats: EngineStats,
}

impl Engine {
    pub fn new(settings: Settings, tables: Option<Arc<LookupTables>>) -> Self {
        let n = settings.engine.shards.max(1);
        Engine {
            settings,
            tables,
            ids: Vec::new(),
            index: FxHashMap::default(),
            buffers: BTreeMap::new(),
            next_flush: 0,
            watermark: None,
            shards: (0..n).map(|_| Shard::default()).collect(),
            stats: EngineStats::default(),
        }
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    fn reach(&self) -> i64 {
        if self.settings.volume.spill_discount > 0.0 {
            1
        } else {
            0
        }
    }

    fn newest_flushed(&self) -> i64 {
        self.next_flush - 1
    }

    pub fn ingest_event(&mut self, e: Event) -> Result<(), EngineError> {
        e.check().map_err(EngineError::MalformedEvent)?;
        let contributions = stvolume::event_contributions(&e, &self.settings.grid, &self.settings.volume)?;
        self.apply(&e, contributions)
    }

    /// Ingests events in order, computing their volumes in parallel.
    /// Returns the index and error of every rejected event.
    pub fn ingest_batch(&mut self, events: &[Event]) -> Vec<(usize, EngineError)> {
        let (grid, vol) = (&self.settings.grid, &self.settings.volume);
        let prepared: Vec<_> = events
            .par_iter()
            .map(|e| {
                e.check().map_err(EngineError::MalformedEvent)?;
                Ok(stvolume::event_contributions(e, grid, vol)?)
            })
            .collect();
        let mut errors = Vec::new();
        for (i, (e, c)) in events.iter().zip(prepared).enumerate() {
            if let Err(err) = c.and_then(|c| self.apply(e, c)) {
                errors.push((i, err));
            }
        }
        errors
    }

    fn apply(&mut self, e: &Event, contributions: Vec<(i64, Vec<(SpatialCell, f64)>)>) -> Result<(), EngineError> {
        let own = stgrid::interval_of(e.t, &self.settings.grid).index;
        let reach = self.reach();
        if own + reach < 0 {
            self.stats.events_before_epoch += 1;
            return Ok(());
        }
        let earliest = (own - reach).max(0);
        let lagging = self.watermark.is_some_and(|w| own < w - self.settings.engine.lateness_intervals);
        if earliest <= self.newest_flushed() || lagging {
            return Err(EngineError::LateEvent { id: e.id.clone(), interval: own, newest_flushed: self.newest_flushed() });
        }
        let ix = self.register(e)?;
        let keep_direct = !self.settings.engine.cooccur_use_spill;
        for (t, cells) in contributions {
            if t < 0 {
                continue;
            }
            let slot = self.buffers.entry(t).or_default().entry(ix).or_default();
            for &(c, w) in &cells {
                add_weight(&mut slot.all, c, w);
                if keep_direct && t == own {
                    add_weight(&mut slot.direct, c, w);
                }
            }
        }
        self.stats.events += 1;
        let w = self.watermark.map_or(own, |w| w.max(own));
        self.watermark = Some(w);
        self.flush_through(w - self.settings.engine.lateness_intervals - reach - 1)
    }

    fn register(&mut self, e: &Event) -> Result<Ix, EngineError> {
        let ix = match self.index.get(&e.id) {
            Some(&ix) => {
                if self.ids[ix as usize].protocol != e.protocol {
                    return Err(EngineError::MalformedEvent(format!("id {} seen with two protocols", e.id)));
                }
                ix
            }
            None => {
                let ix = self.ids.len() as Ix;
                self.ids.push(IdInfo { name: e.id.clone(), protocol: e.protocol, device: None, observed: Vec::new() });
                self.index.insert(e.id.clone(), ix);
                ix
            }
        };
        if let Some(d) = &e.device {
            let info = &mut self.ids[ix as usize];
            match &mut info.device {
                Some(known) => known.merge_missing(d),
                None => info.device = Some(d.clone()),
            }
        }
        Ok(ix)
    }

    fn flush_through(&mut self, limit: i64) -> Result<(), EngineError> {
        while self.next_flush <= limit {
            match self.buffers.keys().next().copied() {
                Some(k) if k <= limit => {
                    self.next_flush = self.next_flush.max(k);
                    self.close_interval(self.next_flush)?;
                }
                _ => self.next_flush = limit + 1,
            }
        }
        Ok(())
    }

    /// Closes every open interval.
    pub fn finish(&mut self) -> Result<(), EngineError> {
        if let Some(&last) = self.buffers.keys().next_back() {
            self.flush_through(last)?;
        }
        Ok(())
    }

    /// Closes interval `t`, which must be the next unclosed one.
    pub fn close_interval(&mut self, t: i64) -> Result<(), EngineError> {
        if t != self.next_flush {
            return Err(EngineError::OutOfOrderFlush { expected: self.next_flush, got: t });
        }
        let buffer = self.buffers.remove(&t).unwrap_or_default();
        self.next_flush = t + 1;
        self.stats.intervals_closed += 1;
        if buffer.is_empty() {
            return Ok(());
        }
        let keep_direct = !self.settings.engine.cooccur_use_spill;
        let mut slots: Vec<Flushed> = buffer
            .into_iter()
            .map(|(ix, s)| {
                let cells = sorted(s.all);
                let p_obs = measures::p_observed(&cells);
                let test_cells = keep_direct.then(|| sorted(s.direct));
                Flushed { ix, cells, p_obs, test_cells }
            })
            .collect();
        slots.sort_unstable_by_key(|f| f.ix);
        let mut pos = vec![u32::MAX; self.ids.len()];
        for (i, f) in slots.iter().enumerate() {
            pos[f.ix as usize] = i as u32;
        }
        let seen = Observed { slots, pos };

        let new_pairs = self.discover(&seen);
        let n = self.shards.len();
        let mut per_shard: Vec<Vec<(Ix, Ix)>> = vec![Vec::new(); n];
        for key in new_pairs {
            per_shard[shard_of(key, n)].push(key);
        }
        let ctx = IntervalCtx { t, seen: &seen, ids: &self.ids, tables: self.tables.as_deref(), settings: &self.settings };
        if n == 1 {
            self.shards[0].close(&per_shard[0], &ctx);
        } else {
            self.shards.par_iter_mut().zip(per_shard.par_iter()).for_each(|(s, np)| s.close(np, &ctx));
        }
        for f in &seen.slots {
            self.ids[f.ix as usize].observed.push((t, f.p_obs));
        }
        Ok(())
    }

    /// Pairs sharing a cell in this interval that are neither live nor pruned.
    fn discover(&mut self, seen: &Observed) -> BTreeSet<(Ix, Ix)> {
        let mut by_cell: Vec<(SpatialCell, Ix)> =
            seen.slots.iter().flat_map(|f| f.cells.iter().map(|(c, _)| (*c, f.ix))).collect();
        by_cell.sort_unstable();
        let n = self.shards.len();
        let cap = self.settings.engine.occupancy_cap;
        let cross_only = self.settings.engine.cross_protocol_only;
        let mut capped = 0;
        let mut found = BTreeSet::new();
        for group in by_cell.chunk_by(|x, y| x.0 == y.0) {
            let members: Vec<Ix> = group.iter().map(|x| x.1).collect();
            if members.len() > cap {
                capped += 1;
                continue;
            }
            for (i, &a) in members.iter().enumerate() {
                for &b in &members[i + 1..] {
                    let (ia, ib) = (&self.ids[a as usize], &self.ids[b as usize]);
                    if cross_only && ia.protocol == ib.protocol {
                        continue;
                    }
                    let key = if ia.name <= ib.name { (a, b) } else { (b, a) };
                    let shard = &self.shards[shard_of(key, n)];
                    if !shard.contains(&key) {
                        found.insert(key);
                    }
                }
            }
        }
        if capped > 0 {
            log::warn!("{capped} cell(s) over the occupancy cap of {cap} skipped for candidate discovery");
            self.stats.capped_cells += capped;
        }
        found
    }

    fn pair_key(&self, key: (Ix, Ix)) -> PairKey {
        let (a, b) = (&self.ids[key.0 as usize], &self.ids[key.1 as usize]);
        PairKey { id_a: a.name.clone(), id_b: b.name.clone(), cross_protocol: a.protocol != b.protocol }
    }

    fn device_match(&self, key: (Ix, Ix)) -> Option<f64> {
        if !self.settings.engine.device_score {
            return None;
        }
        let tables = self.tables.as_deref()?;
        let da = self.ids[key.0 as usize].device.as_ref()?;
        let db = self.ids[key.1 as usize].device.as_ref()?;
        Some(device::device_match_score(da, db, tables, self.settings.measures.device_combine))
    }

    fn score(&self, key: (Ix, Ix), acc: &PairAccumulator) -> MeasureScores {
        let m = &self.settings.measures;
        acc.scores(m).with_device(self.device_match(key), m)
    }

    fn ranked(&self, filter: Option<Ix>, limit: usize) -> Vec<RankedResult> {
        let mut out: Vec<RankedResult> = self
            .shards
            .par_iter()
            .flat_map_iter(|s| {
                s.keys
                    .iter()
                    .zip(&s.accs)
                    .filter(move |(k, _)| filter.is_none_or(|f| k.0 == f || k.1 == f))
                    .map(|(k, acc)| RankedResult {
                        rank: 0,
                        pair: self.pair_key(*k),
                        scores: self.score(*k, acc),
                        cooccur_count: acc.cooccur_count,
                    })
            })
            .collect();
        out.par_sort_unstable_by(|x, y| y.scores.overall.total_cmp(&x.scores.overall).then_with(|| x.pair.cmp(&y.pair)));
        out.truncate(limit);
        for (i, r) in out.iter_mut().enumerate() {
            r.rank = i + 1;
        }
        out
    }

    /// All live pairs, best first.
    pub fn rank_general(&self, limit: usize) -> Vec<RankedResult> {
        self.ranked(None, limit)
    }

    /// Live pairs involving `target`, best first.
    pub fn rank_specific(&self, target: &str, limit: usize) -> Result<Vec<RankedResult>, EngineError> {
        let ix = *self.index.get(target).ok_or_else(|| EngineError::UnknownId(target.to_string()))?;
        Ok(self.ranked(Some(ix), limit))
    }

    pub fn inspect(&self, a: &str, b: &str) -> Result<PairState, EngineError> {
        let ia = *self.index.get(a).ok_or_else(|| EngineError::UnknownId(a.to_string()))?;
        let ib = *self.index.get(b).ok_or_else(|| EngineError::UnknownId(b.to_string()))?;
        let key = if a <= b { (ia, ib) } else { (ib, ia) };
        let shard = &self.shards[shard_of(key, self.shards.len())];
        if let Some(acc) = shard.get(&key) {
            return Ok(PairState::Active { accumulator: acc.clone(), scores: self.score(key, acc) });
        }
        if let Some(r) = shard.pruned.get(&key) {
            return Ok(PairState::Pruned { reason: *r });
        }
        Ok(PairState::NotCandidate)
    }

    /// Pruned pairs with their reasons, sorted by key.
    pub fn pruned_pairs(&self) -> Vec<(PairKey, PruneReason)> {
        let mut v: Vec<_> =
            self.shards.iter().flat_map(|s| s.pruned.iter().map(|(k, r)| (self.pair_key(*k), *r))).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn ids(&self) -> impl Iterator<Item = (&str, Protocol)> {
        self.ids.iter().map(|i| (i.name.as_str(), i.protocol))
    }

    pub fn knows(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn stats(&self) -> EngineStats {
        let candidates: usize = self.shards.iter().map(|s| s.accs.len()).sum();
        EngineStats {
            ids: self.ids.len(),
            candidates,
            pruned: self.shards.iter().map(|s| s.pruned.len()).sum(),
            accumulator_bytes: candidates * std::mem::size_of::<PairAccumulator>(),
            ..self.stats.clone()
        }
    }
}
