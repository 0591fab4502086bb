mod common;

use agma::tape::Tape;
use agma::tensor::Tensor;
use agma::train::best_of_n_ade;
use agma::traj::{
    ade, classify_branch, generate_synthetic, generate_synthetic_labeled, min_of_n, parse_ethucy, write_ethucy,
    IngestOptions, Point, PredictionSet, SynthConfig,
};
use common::scan_min_of_n;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn random_track(rng: &mut ChaCha8Rng, len: usize) -> Vec<Point> {
    (0..len).map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]).collect()
}

#[test]
fn min_of_n_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let gt = random_track(&mut rng, 12);
        let cands: Vec<Vec<Point>> = (0..20).map(|_| random_track(&mut rng, 12)).collect();
        let got = min_of_n(&PredictionSet::new(cands.clone()).unwrap(), &gt).unwrap();
        let (a, f) = scan_min_of_n(&cands, &gt);
        assert!((got.min_ade - a).abs() < 1e-12);
        assert!((got.min_fde - f).abs() < 1e-12);
        assert!((ade(&cands[got.argmin_ade], &gt).unwrap() - a).abs() < 1e-12);
    }
}

fn flatten(tracks: &[Vec<Point>]) -> Vec<f64> {
    tracks.iter().flatten().flatten().copied().collect()
}

#[test]
fn tape_best_of_n_matches_scan_per_agent() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (m, n, t) = (4, 7, 12);
    let gts: Vec<Vec<Point>> = (0..m).map(|_| random_track(&mut rng, t)).collect();
    let cands: Vec<Vec<Vec<Point>>> = (0..m).map(|_| (0..n).map(|_| random_track(&mut rng, t)).collect()).collect();
    let pred = Tensor::from_vec(m * n, 2 * t, cands.iter().flat_map(|c| flatten(c)).collect()).unwrap();
    let target = Tensor::from_vec(
        m * n,
        2 * t,
        gts.iter().flat_map(|g| flatten(&vec![g.clone(); n])).collect(),
    )
    .unwrap();
    let tape = Tape::new();
    let got = tape.item(best_of_n_ade(&tape, tape.constant(pred), &target, n, t));
    let want = (0..m).map(|i| scan_min_of_n(&cands[i], &gts[i]).0).sum::<f64>() / m as f64;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn single_sample_best_of_n_is_plain_ade_and_exact_hit_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gt = random_track(&mut rng, 12);
    let other = random_track(&mut rng, 12);
    let tape = Tape::new();
    let target = Tensor::row(&flatten(&[gt.clone()]));
    let one = best_of_n_ade(&tape, tape.constant(Tensor::row(&flatten(&[other.clone()]))), &target, 1, 12);
    assert!((tape.item(one) - ade(&other, &gt).unwrap()).abs() < 1e-12);
    let both = Tensor::from_vec(2, 24, flatten(&[other, gt.clone()])).unwrap();
    let target2 = Tensor::from_vec(2, 24, flatten(&[gt.clone(), gt])).unwrap();
    assert_eq!(tape.item(best_of_n_ade(&tape, tape.constant(both), &target2, 2, 12)), 0.0);
}

#[test]
fn uniform_branches_have_balanced_frequencies() {
    let cfg = SynthConfig {
        n_scenes: 1500,
        ..SynthConfig::default()
    };
    let (scenes, labels) = generate_synthetic_labeled(&cfg, 17).unwrap();
    let mut counts = [0usize; 3];
    for (scene, lab) in scenes.iter().zip(&labels) {
        for (agent, &l) in scene.agents.iter().zip(lab) {
            let c = classify_branch(&agent.observed, *agent.future.last().unwrap(), &cfg.branches);
            assert_eq!(c, l);
            counts[c] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    assert_eq!(total, 3000);
    for c in counts {
        let f = c as f64 / total as f64;
        assert!((0.30..=0.37).contains(&f), "{counts:?}");
    }
}

#[test]
fn every_branch_appears_among_a_thousand_agents() {
    for (k, branches) in [(2, vec![45.0, -45.0]), (3, vec![90.0, 0.0, -90.0]), (4, vec![120.0, 40.0, -40.0, -120.0])] {
        let cfg = SynthConfig {
            branch_probs: vec![1.0 / k as f64; k],
            branches: branches.clone(),
            n_scenes: 500,
            ..SynthConfig::default()
        };
        let scenes = generate_synthetic(&cfg, 5).unwrap();
        let modes: std::collections::BTreeSet<usize> = scenes
            .iter()
            .flat_map(|s| &s.agents)
            .map(|a| classify_branch(&a.observed, *a.future.last().unwrap(), &branches))
            .collect();
        assert_eq!(modes.len(), k);
    }
}

#[test]
fn reserialised_windows_keep_coordinates_exactly() {
    let cfg = SynthConfig {
        n_scenes: 40,
        ..SynthConfig::default()
    };
    let scenes = generate_synthetic(&cfg, 3).unwrap();
    let text = write_ethucy(&scenes, 10).unwrap();
    let opts = IngestOptions {
        frame_step: 10,
        ..IngestOptions::default()
    };
    let back = parse_ethucy(&text, Path::new("mem"), opts).unwrap();
    assert_eq!(back.len(), scenes.len());
    let key = |s: &[agma::traj::Scene]| {
        let mut v: Vec<(u64, Vec<u64>)> = s
            .iter()
            .flat_map(|sc| &sc.agents)
            .map(|a| {
                let bits = a.observed.iter().chain(&a.future).flatten().map(|x| x.to_bits()).collect();
                (a.agent_id, bits)
            })
            .collect();
        v.sort();
        v
    };
    assert_eq!(key(&back), key(&scenes));
    let again = write_ethucy(&back, 10).unwrap();
    assert_eq!(parse_ethucy(&again, Path::new("mem"), opts).unwrap(), back);
}
