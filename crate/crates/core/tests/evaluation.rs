use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uail_core::evaluation::{label_with_buffer, per_command_roc, roc, run_benchmark, trace_roc, BenchmarkParams, BenchmarkSuite, TraceFrame};
use uail_core::expert::Oracle;
use uail_core::policy::Command;
use uail_core::sim::{generate_track, Designation, SimParams, TrackSpec, World};
use uail_core::Error;

fn frame(traj: u64, tick: u64, infraction: bool, score: f64) -> TraceFrame {
    TraceFrame { traj, tick, command: Command::Follow, infraction, score }
}

/// Probability that a random positive outscores a random negative, ties
/// counted as half.
fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

#[test]
fn auc_matches_mann_whitney_with_ties() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = r.random_range(10..200);
        let labels: Vec<bool> = (0..n).map(|i| i % 7 == 0 || r.random::<f64>() < 0.3).collect();
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| ((r.random::<f64>() + if l { 0.3 } else { 0.0 }) * 10.0).round() / 10.0)
            .collect();
        let c = roc(&scores, &labels).unwrap();
        assert!((c.auc - mann_whitney(&scores, &labels)).abs() < 1e-12);
        assert_eq!(c.points.first().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
        assert_eq!(c.points.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
    }
}

#[test]
fn single_class_roc_is_undefined() {
    assert!(matches!(roc(&[0.1, 0.2], &[false, false]), Err(Error::UndefinedRoc(_))));
    let trace: Vec<_> = (0..50).map(|t| frame(0, t, false, t as f64)).collect();
    assert!(label_with_buffer(&trace, 5).unwrap().iter().all(|l| !l));
    assert!(matches!(trace_roc(&trace, 5), Err(Error::UndefinedRoc(_))));
}

#[test]
fn one_infraction_marks_its_buffer() {
    let trace: Vec<_> = (0..=100).map(|t| frame(0, t, t == 100, 0.0)).collect();
    let labels = label_with_buffer(&trace, 5).unwrap();
    let pos: Vec<u64> = trace.iter().zip(&labels).filter(|(_, &l)| l).map(|(f, _)| f.tick).collect();
    assert_eq!(pos, vec![95, 96, 97, 98, 99, 100]);
}

#[test]
fn commands_without_both_classes_are_omitted() {
    let mut trace: Vec<_> = (0..40).map(|t| frame(0, t, t == 30, t as f64)).collect();
    for f in trace.iter_mut().take(10) {
        f.command = Command::Left;
    }
    let per = per_command_roc(&trace, 5).unwrap();
    assert!(per.contains_key(&Command::Follow));
    assert!(!per.contains_key(&Command::Left));
}

fn brute_labels(trace: &[TraceFrame], k: u64) -> Vec<bool> {
    trace
        .iter()
        .map(|f| trace.iter().any(|g| g.traj == f.traj && g.infraction && g.tick >= f.tick && g.tick - f.tick <= k))
        .collect()
}

proptest! {
    #[test]
    fn buffer_labels_match_brute_force(
        lens in prop::collection::vec(1usize..40, 1..5),
        hits in prop::collection::vec(any::<bool>(), 200),
        k in 1u64..12,
    ) {
        let mut trace = Vec::new();
        let mut h = hits.iter().cycle();
        for (traj, &n) in lens.iter().enumerate() {
            for t in 0..n as u64 {
                let inf = *h.next().unwrap() && *h.next().unwrap() && *h.next().unwrap();
                trace.push(frame(traj as u64, t, inf, 0.0));
            }
        }
        let got = label_with_buffer(&trace, k).unwrap();
        prop_assert_eq!(&got, &brute_labels(&trace, k));
        let wider = label_with_buffer(&trace, k + 1).unwrap();
        prop_assert!(got.iter().zip(&wider).all(|(a, b)| !a || *b));
    }
}

#[test]
fn oracle_aces_the_benchmark() {
    let spec = TrackSpec::default();
    let worlds = (0..2)
        .map(|i| World::new(Arc::new(generate_track(&spec, 40 + i, &format!("b{i}"), Designation::Unseen).unwrap()), SimParams::default()))
        .collect();
    let suite = BenchmarkSuite { name: "bench".into(), worlds, perturbation: None };
    let rep = run_benchmark(&Oracle::default(), &suite, &[0, 1], &BenchmarkParams::default()).unwrap();
    assert_eq!(rep.success.mean, 1.0);
    assert_eq!(rep.infractions, 0);
    assert_eq!(rep.cases.len(), 2 * 2 * 12);
}
