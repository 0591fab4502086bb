mod common;

use agma::batch_prior::{GaussianComponent, MixturePrior};
use agma::ot::{distill_loss, distill_loss_var, sinkhorn, sinkhorn_relaxed, w2_cost, w2_cost_var, DEFAULT_EPSILON, DEFAULT_ITERS};
use agma::tape::Tape;
use agma::tensor::Tensor;
use common::ot_lp;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

fn random_mixture(rng: &mut ChaCha8Rng, k: usize, d: usize) -> MixturePrior {
    let w = simplex(rng, k);
    MixturePrior::new(
        w.into_iter()
            .map(|weight| GaussianComponent {
                weight,
                mean: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                var: (0..d).map(|_| rng.random_range(0.01..1.0)).collect(),
            })
            .collect(),
    )
    .unwrap()
}

fn one(mean: Vec<f64>, sd: Vec<f64>) -> MixturePrior {
    MixturePrior::new(vec![GaussianComponent {
        weight: 1.0,
        mean,
        var: sd.iter().map(|s| s * s).collect(),
    }])
    .unwrap()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

#[test]
fn w2_closed_forms() {
    let a = one(vec![0.5, -1.0], vec![1.0, 2.0]);
    assert_eq!(w2_cost(&a, &a).unwrap().item(), 0.0);
    let b = one(vec![3.5, 3.0], vec![1.0, 2.0]);
    assert_eq!(w2_cost(&a, &b).unwrap().item(), 25.0);
    let c = one(vec![0.0, 0.0], vec![1.0, 1.0]);
    let d = one(vec![0.0, 0.0], vec![2.0, 3.0]);
    assert_eq!(w2_cost(&c, &d).unwrap().item(), 5.0);
}

#[test]
fn w2_matches_recomputation_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let d = rng.random_range(1..8);
        let (g, b) = (random_mixture(&mut rng, 1, d), random_mixture(&mut rng, 1, d));
        let (x, y) = (&g.components()[0], &b.components()[0]);
        let mut want = 0.0;
        for i in 0..d {
            want += (x.mean[i] - y.mean[i]).powi(2);
            want += (x.var[i].sqrt() - y.var[i].sqrt()).powi(2);
        }
        let got = w2_cost(&g, &b).unwrap().item();
        assert!((got - want).abs() <= 4.0 * f64::EPSILON * want.max(f64::MIN_POSITIVE), "{got} vs {want}");
    }
}

#[test]
fn w2_dimension_mismatch_is_shape_error() {
    let r = w2_cost(&one(vec![0.0], vec![1.0]), &one(vec![0.0, 0.0], vec![1.0, 1.0]));
    assert!(matches!(r, Err(agma::Error::Shape(_))));
}

#[test]
fn tape_cost_matches_direct_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (g, b) = (random_mixture(&mut rng, 4, 3), random_mixture(&mut rng, 3, 3));
    let (gm, gv) = g.moments();
    let (bm, bv) = b.moments();
    let t = Tape::new();
    let c = w2_cost_var(&t, t.constant(gm), t.constant(gv), t.constant(bm), t.constant(bv));
    let direct = w2_cost(&g, &b).unwrap();
    for (x, y) in t.value(c).data().iter().zip(direct.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn zero_cost_gives_independent_coupling() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (simplex(&mut rng, 4), simplex(&mut rng, 3));
    let p = sinkhorn(&Tensor::zeros(4, 3), &a, &b, 0.1, 20).unwrap();
    for i in 0..4 {
        for j in 0..3 {
            assert!((p.plan.get(i, j) - a[i] * b[j]).abs() < 1e-15);
        }
    }
    let loss = distill_loss(&p, &Tensor::zeros(4, 3)).unwrap();
    let h: f64 = (0..4)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .map(|(i, j)| {
            let q = a[i] * b[j];
            q * (q.ln() - 1.0)
        })
        .sum();
    assert!((loss - 0.1 * h).abs() < 1e-14);
}

#[test]
fn one_by_one_plan_is_unit() {
    let p = sinkhorn(&Tensor::filled(1, 1, 3.7), &[1.0], &[1.0], 0.1, 20).unwrap();
    assert!((p.plan.item() - 1.0).abs() < 1e-15);
}

#[test]
fn two_by_two_cold_plan_matches_coupling_scan() {
    let cost = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    // uniform-marginal couplings are [[t, 1/2 - t], [1/2 - t, t]]
    let best_t = (0..=5000)
        .map(|i| i as f64 * 1e-4)
        .min_by(|x, y| (2.0 * (0.5 - x)).partial_cmp(&(2.0 * (0.5 - y))).unwrap())
        .unwrap();
    let p = sinkhorn(&cost, &[0.5, 0.5], &[0.5, 0.5], 0.01, 200).unwrap();
    let oracle = [[best_t, 0.5 - best_t], [0.5 - best_t, best_t]];
    for i in 0..2 {
        for j in 0..2 {
            assert!((p.plan.get(i, j) - oracle[i][j]).abs() <= 1e-3, "{:?}", p.plan);
        }
    }
}

#[test]
fn diagonal_plan_has_zero_transport_term() {
    let cost = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let p = sinkhorn(&cost, &[0.5, 0.5], &[0.5, 0.5], 1e-3, 200).unwrap();
    assert!(p.transport_cost(&cost) < 1e-12);
}

#[test]
fn zero_mass_row_carries_no_plan_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = Tensor::from_vec(3, 2, (0..6).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap();
    let p = sinkhorn(&c, &[0.6, 0.0, 0.4], &[0.5, 0.5], 0.1, 100).unwrap();
    assert_eq!(p.plan.row_slice(1), &[0.0, 0.0]);
    assert!(p.row_residual < 1e-9 && p.col_residual < 1e-9);
}

#[test]
fn invalid_marginals_and_epsilon_are_rejected() {
    let c = Tensor::zeros(2, 2);
    assert!(sinkhorn(&c, &[0.5, 0.6], &[0.5, 0.5], 0.1, 5).is_err());
    assert!(sinkhorn(&c, &[0.5, 0.5], &[0.5, 0.5], 0.0, 5).is_err());
    assert!(matches!(sinkhorn(&c, &[1.0], &[0.5, 0.5], 0.1, 5), Err(agma::Error::Shape(_))));
}

fn hundred_by_k(rng: &mut ChaCha8Rng) -> (Tensor, Vec<f64>, Vec<f64>) {
    let kb = rng.random_range(1..12);
    let c = Tensor::from_vec(100, kb, (0..100 * kb).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    (c, simplex(rng, 100), simplex(rng, kb))
}

#[test]
fn residuals_shrink_with_iterations_on_hundred_row_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..50 {
        let (c, a, b) = hundred_by_k(&mut rng);
        let short = sinkhorn(&c, &a, &b, DEFAULT_EPSILON, DEFAULT_ITERS).unwrap();
        assert!(short.row_residual + short.col_residual <= 1e-3, "{} {}", short.row_residual, short.col_residual);
        let long = sinkhorn(&c, &a, &b, DEFAULT_EPSILON, 200).unwrap();
        assert!(long.row_residual + long.col_residual <= 1e-6, "{} {}", long.row_residual, long.col_residual);
    }
}

#[test]
fn plan_is_nonnegative_with_small_residuals_on_lp_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let (m, n) = (rng.random_range(1..6), rng.random_range(1..6));
        let c = Tensor::from_vec(m, n, (0..m * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let (a, b) = (simplex(&mut rng, m), simplex(&mut rng, n));
        let p = sinkhorn(&c, &a, &b, 0.05, 500).unwrap();
        assert!(p.plan.data().iter().all(|&x| x >= 0.0));
        let lp = ot_lp(&rows(&c), &a, &b);
        assert!(p.transport_cost(&c) >= lp - 1e-9, "entropic plan beats the LP optimum");
    }
}

#[test]
fn cost_approaches_lp_optimum_from_above_as_epsilon_shrinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let (m, n) = (rng.random_range(2..5), rng.random_range(2..5));
        let c = Tensor::from_vec(m, n, (0..m * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let (a, b) = (simplex(&mut rng, m), simplex(&mut rng, n));
        let lp = ot_lp(&rows(&c), &a, &b);
        let costs: Vec<f64> = [1.0, 0.3, 0.1, 0.03, 0.01]
            .iter()
            .map(|&e| sinkhorn(&c, &a, &b, e, 5000).unwrap().transport_cost(&c))
            .collect();
        assert!(costs.iter().all(|&x| x >= lp - 1e-7), "{costs:?} vs {lp}");
        assert!(costs.windows(2).all(|w| w[1] <= w[0] + 1e-7), "{costs:?}");
        assert!(costs[4] - lp < 0.05, "{costs:?} vs {lp}");
    }
}

#[test]
fn large_epsilon_approaches_independent_coupling() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c = Tensor::from_vec(4, 5, (0..20).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let (a, b) = (simplex(&mut rng, 4), simplex(&mut rng, 5));
    let gap = |eps: f64| {
        let p = sinkhorn(&c, &a, &b, eps, 200).unwrap();
        (0..4)
            .flat_map(|i| (0..5).map(move |j| (i, j)))
            .map(|(i, j)| (p.plan.get(i, j) - a[i] * b[j]).abs())
            .fold(0.0, f64::max)
    };
    let gaps: Vec<f64> = [0.1, 1.0, 10.0, 100.0, 1e4].iter().map(|&e| gap(e)).collect();
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
    assert!(gaps[4] < 1e-5);
}

#[test]
fn plan_follows_row_and_column_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let (m, n) = (rng.random_range(1..7), rng.random_range(1..7));
        let c = Tensor::from_vec(m, n, (0..m * n).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap();
        let (a, b) = (simplex(&mut rng, m), simplex(&mut rng, n));
        let mut pr: Vec<usize> = (0..m).collect();
        let mut pc: Vec<usize> = (0..n).collect();
        pr.shuffle(&mut rng);
        pc.shuffle(&mut rng);
        let mut pcost = Tensor::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                pcost.set(i, j, c.get(pr[i], pc[j]));
            }
        }
        let pa: Vec<f64> = pr.iter().map(|&i| a[i]).collect();
        let pb: Vec<f64> = pc.iter().map(|&j| b[j]).collect();
        let p = sinkhorn(&c, &a, &b, 0.1, 50).unwrap();
        let q = sinkhorn(&pcost, &pa, &pb, 0.1, 50).unwrap();
        for i in 0..m {
            for j in 0..n {
                assert!((q.plan.get(i, j) - p.plan.get(pr[i], pc[j])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn moving_a_batch_mean_toward_its_partner_lowers_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut exercised = 0;
    for _ in 0..100 {
        let g = random_mixture(&mut rng, 5, 2);
        let b = random_mixture(&mut rng, 3, 2);
        let (a, beta) = (g.weights(), b.weights());
        let loss_of = |b: &MixturePrior| {
            let c = w2_cost(&g, b).unwrap();
            distill_loss(&sinkhorn(&c, &a, &beta, 0.1, 500).unwrap(), &c).unwrap()
        };
        let c = w2_cost(&g, &b).unwrap();
        let plan = sinkhorn(&c, &a, &beta, 0.1, 500).unwrap().plan;
        let k = rng.random_range(0..3);
        let partner = (0..5)
            .max_by(|&x, &y| plan.get(x, k).partial_cmp(&plan.get(y, k)).unwrap())
            .unwrap();
        let mut comps = b.components().to_vec();
        let target = g.components()[partner].mean.clone();
        for (m, t) in comps[k].mean.iter_mut().zip(&target) {
            *m += 0.05 * (t - *m);
        }
        let moved = MixturePrior::new(comps).unwrap();
        let (before, after) = (loss_of(&b), loss_of(&moved));
        // envelope theorem: first-order change is sum_g P_gk * d C_gk
        let pull: f64 = (0..5)
            .map(|gi| {
                let gm = &g.components()[gi].mean;
                let bm = &b.components()[k].mean;
                plan.get(gi, k) * (0..2).map(|i| (bm[i] - gm[i]) * (target[i] - bm[i])).sum::<f64>()
            })
            .sum();
        if pull < 0.0 {
            exercised += 1;
            assert!(after < before, "{after} >= {before}");
        }
    }
    assert!(exercised >= 80, "only {exercised} descent instances");
}

#[test]
fn tape_objective_equals_direct_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let (g, b) = (random_mixture(&mut rng, 6, 3), random_mixture(&mut rng, 4, 3));
        let c = w2_cost(&g, &b).unwrap();
        let (a, beta) = (g.weights(), b.weights());
        let direct = distill_loss(&sinkhorn(&c, &a, &beta, 0.1, 20).unwrap(), &c).unwrap();
        let t = Tape::new();
        let l = distill_loss_var(&t, t.constant(c.clone()), t.constant(Tensor::column(&a)), &beta, 0.1, 20);
        assert!((t.item(l) - direct).abs() < 1e-12);
    }
}

#[test]
fn plan_csv_has_parameter_header() {
    let p = sinkhorn(&Tensor::zeros(2, 3), &[0.5, 0.5], &[0.2, 0.3, 0.5], 0.1, 20).unwrap();
    let text = p.to_csv();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# epsilon=0.1,iters=20,row_residual="));
    assert_eq!(lines.count(), 2);
}

proptest! {
    #[test]
    fn column_marginals_are_exact_after_each_sweep(
        m in 1usize..6, n in 1usize..6, seed in 0u64..500, eps in 0.05f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Tensor::from_vec(m, n, (0..m * n).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap();
        let (a, b) = (simplex(&mut rng, m), simplex(&mut rng, n));
        let p = sinkhorn(&c, &a, &b, eps, 20).unwrap();
        prop_assert!(p.col_residual < 1e-12);
        prop_assert!(p.plan.data().iter().all(|&x| x >= 0.0 && x.is_finite()));
    }
}

#[test]
fn unit_relaxation_is_plain_sinkhorn() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let c = Tensor::from_vec(3, 4, (0..12).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap();
    let (a, b) = (simplex(&mut rng, 3), simplex(&mut rng, 4));
    let p = sinkhorn(&c, &a, &b, 0.1, 20).unwrap();
    let q = sinkhorn_relaxed(&c, &a, &b, 0.1, 20, 1.0).unwrap();
    assert_eq!(p.plan, q.plan);
}

#[test]
fn relaxed_solver_reaches_the_plain_fixed_point_sooner() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..40 {
        let (m, n) = (rng.random_range(1..6), rng.random_range(1..6));
        let c = Tensor::from_vec(m, n, (0..m * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let (a, b) = (simplex(&mut rng, m), simplex(&mut rng, n));
        let fast = sinkhorn_relaxed(&c, &a, &b, 0.01, 2000, 1.5).unwrap();
        let slow = sinkhorn(&c, &a, &b, 0.01, 100_000).unwrap();
        assert!(fast.row_residual.max(fast.col_residual) < 1e-6);
        for (x, y) in fast.plan.data().iter().zip(slow.plan.data()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }
}

#[test]
fn relaxation_outside_open_interval_is_rejected() {
    let c = Tensor::zeros(2, 2);
    for w in [0.0, 2.0, -1.0, f64::NAN] {
        assert!(sinkhorn_relaxed(&c, &[0.5, 0.5], &[0.5, 0.5], 0.1, 5, w).is_err());
    }
}
