//! Scoring runs against ground truth.
//!
//! Every method is judged on the same universe of pairs: the candidates the
//! engine finds without pruning, i.e. cross-protocol pairs whose volumes
//! share at least one S-T cell. Methods that prune simply leave some of
//! those pairs unscored, and an unscored pair is never predicted positive.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::device::LookupTables;
use crate::engine::{Engine, EngineError, PairKey, Settings};
use crate::simulator::GroundTruth;
use crate::stgrid::STCell;
use crate::stvolume::{self, Event, WeightedCellSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pearson,
    Cosine,
    Jaccard,
    StNoPrune,
    StPrune,
    StPruneDevice,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Pearson, Method::Cosine, Method::Jaccard, Method::StNoPrune, Method::StPrune, Method::StPruneDevice];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pearson => "pearson",
            Method::Cosine => "cosine",
            Method::Jaccard => "jaccard",
            Method::StNoPrune => "st_no_prune",
            Method::StPrune => "st_prune",
            Method::StPruneDevice => "st_prune_device",
        }
    }
}

/// A volume as a cell-sorted vector, for merge joins.
pub type SparseVolume = Vec<(STCell, f64)>;

pub fn sparse(v: &WeightedCellSet) -> SparseVolume {
    v.iter().map(|(c, w)| (*c, *w)).collect()
}

struct Moments {
    dot: f64,
    shared: usize,
}

fn joint(a: &[(STCell, f64)], b: &[(STCell, f64)]) -> Moments {
    let (mut i, mut j) = (0, 0);
    let mut m = Moments { dot: 0.0, shared: 0 };
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                m.dot += a[i].1 * b[j].1;
                m.shared += 1;
                i += 1;
                j += 1;
            }
        }
    }
    m
}

/// Per-volume sums reused across pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeStats {
    pub sum: f64,
    pub sum_sq: f64,
    pub support: usize,
}

impl VolumeStats {
    pub fn of(v: &[(STCell, f64)]) -> Self {
        VolumeStats { sum: v.iter().map(|x| x.1).sum(), sum_sq: v.iter().map(|x| x.1 * x.1).sum(), support: v.len() }
    }
}

/// Pearson correlation over `n_cells` dimensions, absent cells counting as 0.
/// `None` when either vector has zero variance.
pub fn pearson(a: &[(STCell, f64)], b: &[(STCell, f64)], n_cells: usize) -> Option<f64> {
    pearson_with(a, b, &VolumeStats::of(a), &VolumeStats::of(b), n_cells)
}

fn pearson_with(a: &[(STCell, f64)], b: &[(STCell, f64)], sa: &VolumeStats, sb: &VolumeStats, n: usize) -> Option<f64> {
    let n = n as f64;
    let cov = joint(a, b).dot - sa.sum * sb.sum / n;
    let va = sa.sum_sq - sa.sum * sa.sum / n;
    let vb = sb.sum_sq - sb.sum * sb.sum / n;
    if va <= 1e-15 * sa.sum_sq.max(1e-300) || vb <= 1e-15 * sb.sum_sq.max(1e-300) {
        return None;
    }
    Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

pub fn cosine(a: &[(STCell, f64)], b: &[(STCell, f64)]) -> f64 {
    cosine_with(a, b, &VolumeStats::of(a), &VolumeStats::of(b))
}

fn cosine_with(a: &[(STCell, f64)], b: &[(STCell, f64)], sa: &VolumeStats, sb: &VolumeStats) -> f64 {
    let norm = (sa.sum_sq * sb.sum_sq).sqrt();
    if norm == 0.0 {
        return 0.0;
    }
    (joint(a, b).dot / norm).clamp(0.0, 1.0)
}

/// Jaccard similarity of the supports.
pub fn jaccard(a: &[(STCell, f64)], b: &[(STCell, f64)]) -> f64 {
    let shared = joint(a, b).shared;
    let union = a.len() + b.len() - shared;
    if union == 0 {
        0.0
    } else {
        shared as f64 / union as f64
    }
}

/// Baseline score of a pair; an undefined Pearson correlation scores 0.
pub fn baseline_score(method: Method, a: &[(STCell, f64)], b: &[(STCell, f64)], n_cells: usize) -> f64 {
    match method {
        Method::Pearson => pearson(a, b, n_cells).unwrap_or(0.0),
        Method::Cosine => cosine(a, b),
        Method::Jaccard => jaccard(a, b),
        _ => panic!("{} is not a baseline", method.name()),
    }
}

/// Top-1 misses over `targets`: a target misses when its best-scoring
/// partner (ties to the lexicographically smallest partner) is not its true
/// partner, or when it has no scored partner.
pub fn specific_top1<'a>(
    scored: impl IntoIterator<Item = (&'a PairKey, f64)>,
    targets: &BTreeMap<&str, &str>,
) -> (usize, f64) {
    let mut best: HashMap<&str, (f64, &str)> = HashMap::new();
    for (key, score) in scored {
        for (me, other) in [(key.id_a.as_str(), key.id_b.as_str()), (key.id_b.as_str(), key.id_a.as_str())] {
            if !targets.contains_key(me) {
                continue;
            }
            let e = best.entry(me).or_insert((score, other));
            if score > e.0 || (score == e.0 && other < e.1) {
                *e = (score, other);
            }
        }
    }
    let misses = targets.iter().filter(|(t, truth)| best.get(*t).is_none_or(|b| b.1 != **truth)).count();
    let rate = if targets.is_empty() { 0.0 } else { misses as f64 / targets.len() as f64 };
    (misses, rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision/recall at every distinct score, predicting `score ≥ threshold`,
/// sorted by ascending threshold. `positives` is the number of true pairs in
/// the universe, scored or not.
pub fn pr_curve(scored: &[(f64, bool)], positives: usize) -> (Vec<PrPoint>, f64) {
    let mut s: Vec<(f64, bool)> = scored.to_vec();
    s.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < s.len() {
        let thr = s[i].0;
        while i < s.len() && s[i].0 == thr {
            if s[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = if positives == 0 { 0.0 } else { tp as f64 / positives as f64 };
        let f1 = if tp == 0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        points.push(PrPoint { threshold: thr, precision, recall, f1 });
    }
    let max_f1 = points.iter().map(|p| p.f1).fold(0.0, f64::max);
    points.reverse();
    (points, max_f1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodReport {
    pub method: Method,
    pub scored_pairs: usize,
    pub specific_top1_misses: usize,
    pub specific_top1_miss_rate: f64,
    pub max_f1: f64,
    pub pr_points: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruningImpact {
    pub candidates_unpruned: usize,
    pub candidates_pruned: usize,
    pub pruned_pairs: usize,
    /// Best of `repeats` end-to-end runs.
    pub wall_s_unpruned: f64,
    pub wall_s_pruned: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub level: u8,
    pub interval_s: f64,
    pub events: usize,
    pub devices: usize,
    pub distinct_st_cells: usize,
    pub universe_pairs: usize,
    pub positives_in_universe: usize,
    pub methods: Vec<MethodReport>,
    pub pruning: PruningImpact,
}

impl EvalReport {
    pub fn method(&self, m: Method) -> &MethodReport {
        self.methods.iter().find(|r| r.method == m).expect("every method is reported")
    }

    pub fn dir_name(&self) -> String {
        format!("L{}_T{}", self.level, self.interval_s)
    }
}

/// Runs the engine over `events` and returns it with the elapsed seconds.
pub fn run_engine(
    events: &[Event],
    settings: &Settings,
    tables: Option<Arc<LookupTables>>,
) -> Result<(Engine, f64), EngineError> {
    let start = Instant::now();
    let mut engine = Engine::new(settings.clone(), tables);
    for chunk in events.chunks(8192) {
        if let Some((_, e)) = engine.ingest_batch(chunk).into_iter().next() {
            return Err(e);
        }
    }
    engine.finish()?;
    Ok((engine, start.elapsed().as_secs_f64()))
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub timing_repeats: usize,
    pub keep_pr_points: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { timing_repeats: 3, keep_pr_points: true }
    }
}

/// Evaluates every method on one grid setting.
pub fn evaluate(
    events: &[Event],
    truth: &GroundTruth,
    tables: Option<Arc<LookupTables>>,
    settings: &Settings,
    opts: EvalOptions,
) -> Result<EvalReport, EngineError> {
    let mut unpruned_cfg = settings.clone();
    unpruned_cfg.engine.prune = false;
    let mut pruned_cfg = settings.clone();
    pruned_cfg.engine.prune = true;

    let repeats = opts.timing_repeats.max(1);
    let (mut t_un, mut t_pr) = (f64::INFINITY, f64::INFINITY);
    let mut runs = None;
    for _ in 0..repeats {
        let (un, a) = run_engine(events, &unpruned_cfg, tables.clone())?;
        let (pr, b) = run_engine(events, &pruned_cfg, tables.clone())?;
        t_un = t_un.min(a);
        t_pr = t_pr.min(b);
        runs = Some((un, pr));
    }
    let (unpruned, pruned) = runs.expect("at least one run");

    let universe: Vec<PairKey> = unpruned.rank_general(usize::MAX).into_iter().map(|r| r.pair).collect();
    let true_pairs: HashSet<(&str, &str)> = truth
        .devices
        .iter()
        .flat_map(|d| [(d.gsm_id.as_str(), d.wifi_id.as_str()), (d.wifi_id.as_str(), d.gsm_id.as_str())])
        .collect();
    let label: Vec<bool> = universe.iter().map(|k| true_pairs.contains(&(k.id_a.as_str(), k.id_b.as_str()))).collect();
    let positives = label.iter().filter(|l| **l).count();
    let targets = truth.partners();
    let index: HashMap<&PairKey, usize> = universe.iter().enumerate().map(|(i, k)| (k, i)).collect();

    let mut scores: BTreeMap<Method, Vec<Option<f64>>> = BTreeMap::new();
    let mut st_no = vec![None; universe.len()];
    for r in unpruned.rank_general(usize::MAX) {
        st_no[index[&r.pair]] = Some(r.scores.combined);
    }
    scores.insert(Method::StNoPrune, st_no);
    let (mut st, mut st_dev) = (vec![None; universe.len()], vec![None; universe.len()]);
    for r in pruned.rank_general(usize::MAX) {
        let i = index[&r.pair];
        st[i] = Some(r.scores.combined);
        st_dev[i] = Some(r.scores.overall);
    }
    scores.insert(Method::StPrune, st);
    scores.insert(Method::StPruneDevice, st_dev);

    let (volumes, n_cells) = id_volumes(events, settings)?;
    let empty: SparseVolume = Vec::new();
    let stats: HashMap<&str, VolumeStats> = volumes.iter().map(|(id, v)| (id.as_str(), VolumeStats::of(v))).collect();
    let empty_stats = VolumeStats::of(&empty);
    let base: Vec<[f64; 3]> = universe
        .par_iter()
        .map(|k| {
            let a = volumes.get(&k.id_a).unwrap_or(&empty);
            let b = volumes.get(&k.id_b).unwrap_or(&empty);
            let sa = stats.get(k.id_a.as_str()).unwrap_or(&empty_stats);
            let sb = stats.get(k.id_b.as_str()).unwrap_or(&empty_stats);
            [pearson_with(a, b, sa, sb, n_cells).unwrap_or(0.0), cosine_with(a, b, sa, sb), jaccard(a, b)]
        })
        .collect();
    for (j, m) in [Method::Pearson, Method::Cosine, Method::Jaccard].into_iter().enumerate() {
        scores.insert(m, base.iter().map(|s| Some(s[j])).collect());
    }

    let methods = Method::ALL
        .iter()
        .map(|m| {
            let s = &scores[m];
            let scored: Vec<(f64, bool)> = s.iter().zip(&label).filter_map(|(s, l)| s.map(|s| (s, *l))).collect();
            let (misses, rate) =
                specific_top1(universe.iter().zip(s).filter_map(|(k, s)| s.map(|s| (k, s))), &targets);
            let (mut pr_points, max_f1) = pr_curve(&scored, positives);
            if !opts.keep_pr_points {
                pr_points.clear();
            }
            MethodReport {
                method: *m,
                scored_pairs: scored.len(),
                specific_top1_misses: misses,
                specific_top1_miss_rate: rate,
                max_f1,
                pr_points,
            }
        })
        .collect();

    Ok(EvalReport {
        level: settings.grid.level,
        interval_s: settings.grid.interval_s,
        events: events.len(),
        devices: truth.devices.len(),
        distinct_st_cells: n_cells,
        universe_pairs: universe.len(),
        positives_in_universe: positives,
        methods,
        pruning: PruningImpact {
            candidates_unpruned: unpruned.stats().candidates,
            candidates_pruned: pruned.stats().candidates,
            pruned_pairs: pruned.stats().pruned,
            wall_s_unpruned: t_un,
            wall_s_pruned: t_pr,
            repeats,
        },
    })
}

/// Whole-dataset volume of every id, and the number of distinct S-T cells
/// across all of them. Contributions before the epoch are dropped, as in
/// the engine.
pub fn id_volumes(events: &[Event], settings: &Settings) -> Result<(HashMap<String, SparseVolume>, usize), EngineError> {
    let mut by_id: BTreeMap<&str, Vec<&Event>> = BTreeMap::new();
    for e in events {
        by_id.entry(&e.id).or_default().push(e);
    }
    let volumes: Vec<(String, SparseVolume)> = by_id
        .into_par_iter()
        .map(|(id, evs)| {
            let mut v = WeightedCellSet::new();
            for e in evs {
                for (t, cells) in stvolume::event_contributions(e, &settings.grid, &settings.volume)? {
                    if t < 0 {
                        continue;
                    }
                    for (s, w) in cells {
                        v.add(STCell { temporal: t, spatial: s }, w);
                    }
                }
            }
            Ok((id.to_string(), sparse(&v)))
        })
        .collect::<Result<_, EngineError>>()?;
    let distinct: HashSet<STCell> = volumes.iter().flat_map(|(_, v)| v.iter().map(|x| x.0)).collect();
    Ok((volumes.into_iter().collect(), distinct.len()))
}

/// One report per `(level, interval)` combination.
pub fn sweep(
    events: &[Event],
    truth: &GroundTruth,
    tables: Option<Arc<LookupTables>>,
    base: &Settings,
    levels: &[u8],
    intervals: &[f64],
    opts: EvalOptions,
) -> Result<Vec<EvalReport>, EngineError> {
    let mut out = Vec::new();
    for &level in levels {
        for &interval in intervals {
            let mut s = base.clone();
            s.grid = s.grid.with_level(level).with_interval(interval);
            log::info!("evaluating level {level}, interval {interval} s");
            out.push(evaluate(events, truth, tables.clone(), &s, opts)?);
        }
    }
    Ok(out)
}

pub const REPORT_CSV_HEADER: &str =
    "level,interval_s,method,scored_pairs,specific_top1_misses,specific_top1_miss_rate,max_f1,universe_pairs,positives";

/// Writes `report.json`, `report.csv` and one `pr_<method>.csv` per method into `dir`.
pub fn write_report(dir: &Path, r: &EvalReport) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join("report.json"))?);
    serde_json::to_writer_pretty(&mut w, r)?;
    w.write_all(b"\n")?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join("report.csv"))?);
    writeln!(w, "{REPORT_CSV_HEADER}")?;
    for m in &r.methods {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.level,
            r.interval_s,
            m.method.name(),
            m.scored_pairs,
            m.specific_top1_misses,
            m.specific_top1_miss_rate,
            m.max_f1,
            r.universe_pairs,
            r.positives_in_universe
        )?;
    }
    w.flush()?;
    for m in &r.methods {
        let mut w = BufWriter::new(File::create(dir.join(format!("pr_{}.csv", m.method.name())))?);
        writeln!(w, "threshold,precision,recall,f1")?;
        for p in &m.pr_points {
            writeln!(w, "{},{},{},{}", p.threshold, p.precision, p.recall, p.f1)?;
        }
        w.flush()?;
    }
    Ok(())
}
