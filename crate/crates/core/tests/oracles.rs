mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use cotravel::simulator::{bounded_pareto_mean, bounded_pareto_sample, bounded_pareto_support};
use cotravel::stgrid::{cell_of, unproject, GridConfig, LocalXY, SpatialCell};
use cotravel::stvolume::spatial_weights;
use cotravel::{DeviceIdentity, Engine, Event, LookupTables, Protocol, Settings, UncertaintyEllipse};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Monte Carlo cell masses of the ellipse-truncated Gaussian.
fn monte_carlo(center: LocalXY, e: &UncertaintyEllipse, cfg: &GridConfig, n: usize, seed: u64) -> BTreeMap<SpatialCell, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s1, s2) = (e.semi_major_m / 3.0, e.semi_minor_m / 3.0);
    let (sin, cos) = e.orientation_deg.to_radians().sin_cos();
    let mut counts = BTreeMap::new();
    let mut kept = 0usize;
    while kept < n {
        let u: f64 = StandardNormal.sample(&mut rng);
        let v: f64 = StandardNormal.sample(&mut rng);
        if u * u + v * v > 9.0 {
            continue;
        }
        let p = LocalXY::new(center.x + s1 * u * cos - s2 * v * sin, center.y + s1 * u * sin + s2 * v * cos);
        *counts.entry(cell_of(p, cfg)).or_insert(0.0) += 1.0;
        kept += 1;
    }
    counts.values_mut().for_each(|c| *c /= n as f64);
    counts
}

#[test]
fn cell_weights_match_monte_carlo() {
    let cfg = GridConfig { level: 17, ..GridConfig::default() };
    assert!((cfg.side() - 70.0).abs() < 1e-9);
    let center = LocalXY::new(35.0 + 70.0 * 20.0, 35.0 + 70.0 * 20.0);
    for (i, orientation) in [0.0, 30.0, 90.0, 135.0].into_iter().enumerate() {
        let e = UncertaintyEllipse::new(100.0, 50.0, orientation).unwrap();
        let exact: BTreeMap<SpatialCell, f64> = spatial_weights(center, &e, &cfg, 0.0).into_iter().collect();
        let mc = monte_carlo(center, &e, &cfg, 1_000_000, i as u64);
        for c in exact.keys().chain(mc.keys()) {
            let (a, b) = (exact.get(c).copied().unwrap_or(0.0), mc.get(c).copied().unwrap_or(0.0));
            assert!((a - b).abs() < 0.01, "orientation {orientation}, cell {c:?}: {a} vs {b}");
        }
    }
}

#[test]
fn streaming_matches_batch_on_small_instances() {
    let mut s = Settings::default();
    s.grid.level = 17;
    for seed in 1000..1050 {
        let events = common::small_instance(seed, &s);
        common::check_batch_equivalence(&events, &s).unwrap_or_else(|e| panic!("instance {seed}: {e}"));
    }
}

#[test]
fn streaming_matches_batch_without_spill() {
    let mut s = Settings::default();
    s.grid.level = 17;
    s.volume.spill_discount = 0.0;
    for seed in 2000..2030 {
        let events = common::small_instance(seed, &s);
        common::check_batch_equivalence(&events, &s).unwrap_or_else(|e| panic!("instance {seed}: {e}"));
    }
}

#[test]
fn hull_perimeter_oracle_sanity() {
    assert!((common::hull_perimeter(&[(0.0, 0.0), (3.0, 0.0), (0.0, 4.0)]) - 12.0).abs() < 1e-12);
    assert!((common::hull_perimeter(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)]) - 4.0 * 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(common::hull_perimeter(&[(5.0, 5.0); 4]), 0.0);
    let square: Vec<(f64, f64)> = (0..=4).flat_map(|i| (0..=4).map(move |j| (i as f64, j as f64))).collect();
    assert!((common::hull_perimeter(&square) - 16.0).abs() < 1e-12);
}

#[test]
fn bounding_box_perimeter_is_within_sqrt2_of_hull() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        common::check_hull_bound(&common::random_point_set(&mut rng)).unwrap();
    }
}

#[test]
fn bounded_pareto_mean_matches_analytic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for alpha in [1.2, 2.0] {
        let (l, h) = bounded_pareto_support(1800.0, 10.0, alpha);
        assert!((h / l - 10.0).abs() < 1e-9);
        assert!((bounded_pareto_mean(l, h, alpha) - 1800.0).abs() < 1e-6);
        let n = 200_000;
        let mean = (0..n).map(|_| bounded_pareto_sample(l, h, alpha, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean / 1800.0 - 1.0).abs() < 0.01, "alpha {alpha}: {mean}");
    }
}

/// With `k` equally likely manufacturers and no model evidence, a random
/// cross-protocol pair survives pruning with probability `1/k`.
#[test]
fn pruning_keeps_about_one_in_k() {
    let k = 4;
    let mut tables = LookupTables::default();
    for m in 0..k {
        tables.tac.insert(format!("3500000{m}"), format!("M{m}|X").parse().unwrap());
        tables.oui.insert(format!("02:00:0{m}"), format!("M{m}"));
    }
    let s = Settings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut engine = Engine::new(s.clone(), Some(Arc::new(tables)));
    let at = unproject(LocalXY::new(35.0, 35.0), &s.grid);
    let n = 120;
    for i in 0..2 * n {
        let (protocol, device) = if i % 2 == 0 {
            (Protocol::Gsm, DeviceIdentity::gsm(format!("3500000{}", rng.random_range(0..k))))
        } else {
            (Protocol::Wifi, DeviceIdentity::wifi(format!("02:00:0{}", rng.random_range(0..k))))
        };
        let e = Event { id: format!("d{i:03}"), protocol, t: s.grid.epoch + 10.0, center: at, ellipse: UncertaintyEllipse::circle(1.0), device: Some(device) };
        engine.ingest_event(e).unwrap();
    }
    engine.finish().unwrap();
    let st = engine.stats();
    assert_eq!(st.candidates + st.pruned, n * n);
    let kept = st.candidates as f64 / (n * n) as f64;
    assert!((kept - 1.0 / k as f64).abs() < 0.03, "kept {kept}");
}
