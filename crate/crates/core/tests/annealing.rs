mod support;

use rankcut::annealer::{accept, grow, propose, shrink, AnnealSchedule};
use rankcut::explorer::RankAssignment;
use std::collections::BTreeMap;
use support::rng;

#[test]
fn acceptance_frequency_matches_metropolis_probability() {
    let n = 100_000usize;
    let mut r = rng(42);
    for &t in &[0.01f64, 0.05, 0.1, 0.5, 1.0] {
        for &de in &[-0.5f64, 0.0, 0.005, 0.05, 0.1, 0.5, 1.0] {
            let p: f64 = if de <= 0.0 { 1.0 } else { (-de / t).exp() };
            let hits = (0..n).filter(|_| accept(de, t, &mut r)).count() as f64;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (hits - n as f64 * p).abs() <= 3.0 * sigma + 1e-9,
                "dE={de} T={t}: {hits} vs {}",
                n as f64 * p
            );
        }
    }
}

#[test]
fn half_energy_at_half_temperature_accepts_e_inverse() {
    let mut r = rng(1);
    let n = 100_000;
    let freq = (0..n).filter(|_| accept(0.5, 0.5, &mut r)).count() as f64 / n as f64;
    assert!((freq - (-1.0f64).exp()).abs() < 0.01, "{freq}");
}

#[test]
fn proposals_change_one_layer_within_bounds() {
    let sched = AnnealSchedule::default();
    let ranks: RankAssignment = [(0, 9), (3, 1), (7, 40)].into_iter().collect();
    let caps: BTreeMap<usize, usize> = [(0, 10), (3, 4), (7, 40)].into_iter().collect();
    let mut r = rng(7);
    for _ in 0..2000 {
        let (next, p) = propose(&ranks, &caps, &sched, &mut r).unwrap();
        let changed: Vec<usize> = ranks.keys().filter(|k| ranks[k] != next[k]).copied().collect();
        assert!(changed.is_empty() || changed == vec![p.layer]);
        assert_eq!(next[&p.layer], p.to);
        assert!(p.to >= 1 && p.to <= caps[&p.layer]);
    }
    assert_eq!(shrink(1, 0.6), 1);
    assert_eq!(shrink(10, 0.6), 6);
    assert_eq!(grow(8, 1.25, 100), 10);
    assert_eq!(grow(40, 1.25, 40), 40);
}
