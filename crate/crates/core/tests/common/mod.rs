//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use cotravel::measures::{self, BoundingBox};
use cotravel::stgrid::{cell_center, unproject, LocalXY, STCell};
use cotravel::stvolume::{event_to_volume, WeightedCellSet};
use cotravel::{Engine, Event, MeasureConfig, PairKey, Protocol, Settings, UncertaintyEllipse};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain; collinear points are dropped.
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a.partial_cmp(b).unwrap());
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &q in &p {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], q) <= 0.0 {
            lower.pop();
        }
        lower.push(q);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &q in p.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], q) <= 0.0 {
            upper.pop();
        }
        upper.push(q);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Closed perimeter of the hull; a segment counts twice.
pub fn hull_perimeter(points: &[(f64, f64)]) -> f64 {
    let h = convex_hull(points);
    match h.len() {
        0 | 1 => 0.0,
        n => (0..n).map(|i| {
            let (a, b) = (h[i], h[(i + 1) % n]);
            (a.0 - b.0).hypot(a.1 - b.1)
        })
        .sum(),
    }
}

/// Random point sets with the degenerate shapes mixed in.
pub fn random_point_set(rng: &mut impl Rng) -> Vec<(f64, f64)> {
    let n = rng.random_range(2..=64);
    let scale = 10f64.powf(rng.random_range(0.0..4.0));
    match rng.random_range(0..4) {
        // collinear along a random direction
        0 => {
            let (dx, dy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            (0..n).map(|_| {
                let s: f64 = rng.random_range(-scale..scale);
                (s * dx, s * dy)
            })
            .collect()
        }
        // many duplicates
        1 => {
            let base: Vec<(f64, f64)> =
                (0..rng.random_range(1..=3)).map(|_| (rng.random_range(-scale..scale), rng.random_range(-scale..scale))).collect();
            (0..n).map(|_| base[rng.random_range(0..base.len())]).collect()
        }
        // integer lattice, which produces collinear runs on the hull
        2 => (0..n).map(|_| (rng.random_range(-5..=5) as f64, rng.random_range(-5..=5) as f64)).collect(),
        _ => (0..n).map(|_| (rng.random_range(-scale..scale), rng.random_range(-scale..scale))).collect(),
    }
}

/// Checks `p <= p̂ <= √2·p` where `p̂` is the bounding-box perimeter.
pub fn check_hull_bound(points: &[(f64, f64)]) -> Result<(), String> {
    let p = hull_perimeter(points);
    let bbox = BoundingBox::of_points(points.iter().map(|&(x, y)| LocalXY::new(x, y)).collect::<Vec<_>>().iter());
    let p_hat = measures::bbox_perimeter(&bbox).map_err(|e| e.to_string())? * 1000.0;
    let tol = 1e-9 * p.max(1.0);
    if p > p_hat + tol || p_hat > std::f64::consts::SQRT_2 * p + tol {
        return Err(format!("hull {p} vs box {p_hat} for {points:?}"));
    }
    Ok(())
}

/// A small random workload: a handful of cells, a handful of intervals.
pub fn small_instance(seed: u64, settings: &Settings) -> Vec<Event> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = settings.grid.side();
    let n_ids = rng.random_range(2..=50);
    let n_intervals = rng.random_range(1..=20);
    // a 5 × 2 block of cells, with centres kept far enough from its edge
    let (x0, y0) = (10.0 * side, 10.0 * side);
    let margin = 15.0;
    let mut events = Vec::new();
    for i in 0..n_ids {
        let protocol = if i % 2 == 0 { Protocol::Gsm } else { Protocol::Wifi };
        let id = format!("{}{i:02}", if protocol == Protocol::Gsm { "g" } else { "w" });
        for _ in 0..rng.random_range(1..=8) {
            let t = rng.random_range(0..n_intervals) as f64 * settings.grid.interval_s + rng.random_range(0.0..settings.grid.interval_s);
            let x = x0 + rng.random_range(margin..5.0 * side - margin);
            let y = y0 + rng.random_range(margin..2.0 * side - margin);
            let major = rng.random_range(2.0..margin);
            let ellipse = UncertaintyEllipse::new(major, major * rng.random_range(0.3..1.0), rng.random_range(0.0..180.0)).unwrap();
            events.push(Event {
                id: id.clone(),
                protocol,
                t: settings.grid.epoch + t,
                center: unproject(LocalXY::new(x, y), &settings.grid),
                ellipse,
                device: None,
            });
        }
    }
    events.sort_by(|a, b| a.t.total_cmp(&b.t).then_with(|| a.id.cmp(&b.id)));
    events
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleScore {
    pub pair: PairKey,
    pub ctl: f64,
    pub tcov: f64,
    pub scov: f64,
    pub combined: f64,
}

/// Materializes every trajectory volume and evaluates the three measures
/// directly over the whole dataset.
pub fn batch_scores(events: &[Event], settings: &Settings) -> Vec<OracleScore> {
    let mut volumes: BTreeMap<&str, (Protocol, WeightedCellSet)> = BTreeMap::new();
    for e in events {
        let v = event_to_volume(e, &settings.grid, &settings.volume).unwrap();
        let entry = volumes.entry(&e.id).or_insert((e.protocol, WeightedCellSet::new()));
        for (c, w) in v.iter() {
            if c.temporal >= 0 {
                entry.1.add(*c, *w);
            }
        }
    }
    let m: &MeasureConfig = &settings.measures;
    let ids: Vec<&str> = volumes.keys().copied().collect();
    let mut out = Vec::new();
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            let (pa, va) = &volumes[a];
            let (pb, vb) = &volumes[b];
            if settings.engine.cross_protocol_only && pa == pb {
                continue;
            }
            let cells_a: BTreeSet<STCell> = va.iter().map(|(c, _)| *c).collect();
            if !vb.iter().any(|(c, _)| cells_a.contains(c)) {
                continue;
            }
            let (mut num, mut den) = (0.0, 0.0);
            let mut times = Vec::new();
            let mut locs = Vec::new();
            let ta: BTreeSet<i64> = va.intervals().into_iter().collect();
            for t in vb.intervals().into_iter().filter(|t| ta.contains(t)) {
                let sa: Vec<_> = va.interval(t).collect();
                let sb: Vec<_> = vb.interval(t).collect();
                let p_a = 1.0 - sa.iter().map(|(_, w)| 1.0 - w).product::<f64>();
                let p_b = 1.0 - sb.iter().map(|(_, w)| 1.0 - w).product::<f64>();
                let mut miss = 1.0;
                let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
                for (c, wa) in &sa {
                    if let Some((_, wb)) = sb.iter().find(|(d, _)| d == c) {
                        miss *= 1.0 - wa * wb;
                        let p = cell_center(*c, &settings.grid);
                        sw += wa * wb;
                        sx += wa * wb * p.x;
                        sy += wa * wb * p.y;
                    }
                }
                let p_ab = 1.0 - miss;
                num += p_ab;
                den += p_a * p_b;
                if p_a * p_b > 0.0 && p_ab / (p_a * p_b) > m.cooccur_threshold {
                    times.push(t as f64 * settings.grid.interval_s / 86_400.0);
                    let mm = |v: f64| (v * 1000.0).round() / 1000.0;
                    locs.push(LocalXY::new(mm(sx / sw), mm(sy / sw)));
                }
            }
            let ctl = if den > 0.0 { num / den } else { 0.0 };
            let tcov = times.windows(2).map(|w| (w[1] - w[0] + 1.0).ln()).fold(0.0, |a, x| a + x);
            let scov = if locs.len() < 2 {
                0.0
            } else {
                let dist: f64 = locs.windows(2).map(|w| w[0].distance(&w[1])).sum::<f64>() / 1000.0;
                let pts: Vec<(f64, f64)> = locs.iter().map(|p| (p.x, p.y)).collect();
                let (xs, ys): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
                let span = |v: &[f64]| v.iter().copied().fold(f64::MIN, f64::max) - v.iter().copied().fold(f64::MAX, f64::min);
                let perim = 2.0 * (span(&xs) + span(&ys)) / 1000.0;
                (dist.min(m.gamma * perim) + 1.0).ln()
            };
            let combined = (ctl * (tcov / m.tcov_scale).min(1.0) * (scov / m.scov_scale).min(1.0)).cbrt() + 0.0;
            out.push(OracleScore { pair: PairKey::new(a, b, pa != pb), ctl, tcov, scov, combined });
        }
    }
    out.sort_by(|x, y| y.combined.total_cmp(&x.combined).then_with(|| x.pair.cmp(&y.pair)));
    out
}

/// Streams `events` through the engine and compares with [`batch_scores`].
pub fn check_batch_equivalence(events: &[Event], settings: &Settings) -> Result<(), String> {
    let mut engine = Engine::new(settings.clone(), None);
    for e in events {
        engine.ingest_event(e.clone()).map_err(|e| e.to_string())?;
    }
    engine.finish().map_err(|e| e.to_string())?;
    let streamed = engine.rank_general(usize::MAX);
    let oracle = batch_scores(events, settings);
    if streamed.len() != oracle.len() {
        return Err(format!("{} streamed pairs vs {} in the oracle", streamed.len(), oracle.len()));
    }
    for (s, o) in streamed.iter().zip(&oracle) {
        if s.pair != o.pair {
            return Err(format!("ranking differs: {} vs {}", s.pair, o.pair));
        }
        let pairs = [(s.scores.ctl, o.ctl), (s.scores.tcov, o.tcov), (s.scores.scov, o.scov), (s.scores.combined, o.combined)];
        if pairs.iter().any(|(x, y)| (x - y).abs() > 1e-9) {
            return Err(format!("scores differ for {}: {:?} vs {o:?}", s.pair, s.scores));
        }
    }
    Ok(())
}

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

const STEP_DAYS: f64 = 1.0 / 72.0;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() })
}

fn times_from(gaps: &[u32]) -> Vec<f64> {
    let mut t = 0u32;
    let mut out = vec![0.0];
    for g in gaps {
        t += g;
        out.push(t as f64 * STEP_DAYS);
    }
    out
}

/// Append, insert, dilate and bound properties of temporal coverage.
pub fn temporal_axioms(cases: u32) -> Result<(), String> {
    let strat = (prop::collection::vec(1u32..500, 0..40), 1u32..500, 0usize..40, 1.01f64..10.0);
    runner(cases)
        .run(&strat, |(gaps, extra, at, c)| {
            let times = times_from(&gaps);
            let base = measures::temporal_coverage(&times);

            let mut appended = times.clone();
            appended.push(times[times.len() - 1] + extra as f64 * STEP_DAYS);
            prop_assert!(measures::temporal_coverage(&appended) > base, "append");

            if times.len() >= 2 {
                let i = at % (times.len() - 1);
                let mut inserted = times.clone();
                inserted.insert(i + 1, (times[i] + times[i + 1]) / 2.0);
                prop_assert!(measures::temporal_coverage(&inserted) > base, "insert");

                let scaled: Vec<f64> = times.iter().map(|t| t * c).collect();
                prop_assert!(measures::temporal_coverage(&scaled) > base, "dilate");
            }

            let span = times[times.len() - 1] - times[0];
            prop_assert!(base <= times.len() as f64 * (span + 1.0).ln() + 1e-12, "bound");
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Region side in meters for the spatial properties.
const REGION_M: f64 = 10_000.0;

fn point() -> impl Strategy<Value = LocalXY> {
    (0.0..REGION_M, 0.0..REGION_M).prop_map(|(x, y)| LocalXY::new(x, y))
}

fn outside(b: &BoundingBox, p: LocalXY) -> bool {
    !b.contains(p)
}

/// Monotonicity, dilation and bound properties of spatial coverage.
pub fn spatial_axioms(cases: u32) -> Result<(), String> {
    let gamma = measures::default_gamma();
    let strat = (prop::collection::vec(point(), 1..40), point(), 0usize..40, 1.01f64..10.0);
    let cap = (gamma * 4.0 * REGION_M / 1000.0 + 1.0).ln();
    runner(cases)
        .run(&strat, |(locs, extra, at, c)| {
            let base = measures::spatial_coverage_of(&locs, gamma);
            let bbox = BoundingBox::of_points(&locs);

            let mut appended = locs.clone();
            appended.push(extra);
            let a = measures::spatial_coverage_of(&appended, gamma);
            prop_assert!(a >= base - 1e-12, "append decreased");
            if outside(&bbox, extra) {
                prop_assert!(a > base, "append outside the box did not increase");
            }

            let i = at % locs.len();
            let mut inserted = locs.clone();
            inserted.insert(i, extra);
            let b = measures::spatial_coverage_of(&inserted, gamma);
            prop_assert!(b >= base - 1e-12, "insert decreased");
            if outside(&bbox, extra) {
                prop_assert!(b > base, "insert outside the box did not increase");
            }

            if locs.windows(2).any(|w| w[0] != w[1]) {
                // dilate about the region corner
                let scaled: Vec<LocalXY> = locs.iter().map(|p| LocalXY::new(p.x * c, p.y * c)).collect();
                prop_assert!(measures::spatial_coverage_of(&scaled, gamma) > base, "dilate");
            }

            prop_assert!(base <= cap + 1e-12, "bound");
            Ok(())
        })
        .map_err(|e: proptest::test_runner::TestError<_>| e.to_string())
}

