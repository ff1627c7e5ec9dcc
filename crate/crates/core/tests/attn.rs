use agf_core::engine::{self, EngineConfig, ModelContract};
use agf_core::models::attn::*;
use agf_core::numerics::{Mat, Vector};
use approx::assert_relative_eq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn two_eigenvalues() -> AttnProblem {
    AttnProblem::diagonal(&[2.0, 1.0], 8, 4, 1e-3).unwrap()
}

fn random_heads(n: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); scale * z }).collect()
}

fn aligned_head(prob: &AttnProblem, k: usize, sign: f64) -> Vec<f64> {
    let s = 1.0 / 3f64.sqrt();
    let v = prob.eigvecs.column(k);
    std::iter::once(sign * s).chain(v.iter().map(|x| s * x)).chain(v.iter().map(|x| s * x)).collect()
}

#[test]
fn fourth_moment_examples() {
    let f = fourth_moment(&Mat::identity(3, 3), 1);
    assert!((f - Mat::identity(3, 3) * 5.0).norm() < 1e-14);
    let f = fourth_moment(&Mat::from_diagonal(&Vector::from_vec(vec![2.0, 1.0])), 8);
    assert!((f - Mat::from_diagonal(&Vector::from_vec(vec![336.0, 96.0]))).norm() < 1e-12);
}

#[test]
fn fourth_moment_matches_sampling() {
    let sigma = Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
    let exact = fourth_moment(&sigma, 3);
    let mc = monte_carlo_fourth_moment(&sigma, 3, 200_000, 5).unwrap();
    assert!((mc - &exact).norm() / exact.norm() < 0.02);
}

#[test]
fn closed_form_loss_matches_sampling() {
    let prob = AttnProblem::new(Mat::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.8]), 4, 2, 1e-3).unwrap();
    let th = random_heads(10, 0.3, 11);
    let exact = prob.active_loss(&[0, 1], &th);
    let mc = monte_carlo_loss(&prob, &th, 400_000, 3).unwrap();
    assert!((mc - exact).abs() / exact < 0.02, "{mc} vs {exact}");
    assert_relative_eq!(prob.active_loss(&[], &[]), prob.trace() / 2.0, max_relative = 1e-15);
}

#[test]
fn gradient_matches_finite_differences() {
    let prob = AttnProblem::new(Mat::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.8]), 4, 2, 1e-3).unwrap();
    for seed in 0..10 {
        let th = random_heads(10, 0.4, seed);
        let mut g = vec![0.0; 10];
        attn_population_grad(&prob, &th, &mut g);
        for i in 0..10 {
            let h = 1e-5;
            let mut p = th.clone();
            p[i] += h;
            let lp = prob.active_loss(&[0, 1], &p);
            p[i] -= 2.0 * h;
            let lm = prob.active_loss(&[0, 1], &p);
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1e-3), "seed {seed} i {i}: {fd} vs {}", g[i]);
        }
    }
    let mut g = vec![1.0; 10];
    attn_population_grad(&prob, &[0.0; 10], &mut g);
    assert!(g.iter().all(|v| *v == 0.0));
}

#[test]
fn eigen_aligned_gradient_stays_aligned() {
    let prob = AttnProblem::new(Mat::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.8]), 4, 1, 1e-3).unwrap();
    let th: Vec<f64> = aligned_head(&prob, 1, 1.0).iter().map(|x| 0.2 * x).collect();
    let mut g = vec![0.0; 5];
    attn_population_grad(&prob, &th, &mut g);
    let v = prob.eigvecs.column(1);
    let off = |x: &[f64]| {
        let x = Vector::from_column_slice(x);
        (&x - v * v.dot(&x)).norm()
    };
    assert!(off(&g[1..3]) < 1e-10 && off(&g[3..5]) < 1e-10);
}

#[test]
fn utility_examples() {
    let prob = two_eigenvalues();
    assert_eq!(attn_utility(&prob, &[0.0, 1.0, 2.0, 3.0, 4.0], &[]), 0.0);
    let top = aligned_head(&prob, 0, 1.0);
    assert_relative_eq!(attn_utility(&prob, &top, &[]), 32.0 / (3.0 * 3f64.sqrt()), max_relative = 1e-12);
    let a1 = optimal_magnitude(&prob, 1);
    let second = aligned_head(&prob, 1, 1.0);
    assert_relative_eq!(attn_utility(&prob, &second, &[(0, a1)]), 8.0 / (3.0 * 3f64.sqrt()), max_relative = 1e-12);
    assert!(attn_utility(&prob, &top, &[(0, a1)]).abs() < 1e-12);
}

#[test]
fn optimal_magnitudes_and_sequence() {
    let id = AttnProblem::diagonal(&[1.0 + 2e-6, 1.0 + 1e-6, 1.0], 10, 3, 1e-3).unwrap();
    assert_relative_eq!(optimal_magnitude(&id, 2), 1.0 / 14.0, max_relative = 1e-5);
    let prob = two_eigenvalues();
    assert_relative_eq!(optimal_magnitude(&prob, 1), 1.0 / 21.0, max_relative = 1e-15);
    assert_relative_eq!(optimal_magnitude(&prob, 2), 1.0 / 12.0, max_relative = 1e-15);
    let seq = attn_sequence(&prob);
    let l = seq.losses();
    assert_relative_eq!(l[0], 1.5, max_relative = 1e-15);
    assert_relative_eq!(l[1], 1.5 - 8.0 / 10.5, max_relative = 1e-14);
    assert_relative_eq!(l[2], 1.5 - 8.0 / 10.5 - 1.0 / 3.0, max_relative = 1e-14);
    for k in 1..=2 {
        let a = optimal_magnitude(&prob, k);
        let p = prob.learned_map(&(0..k).map(|i| (i, optimal_magnitude(&prob, i + 1))).collect::<Vec<_>>());
        assert_relative_eq!(prob.loss_of(&p), l[k], max_relative = 1e-12);
        assert_eq!(seq.steps[k].value, a);
    }
}

#[test]
fn optimal_magnitude_is_stationary() {
    let prob = two_eigenvalues();
    let a = optimal_magnitude(&prob, 2);
    let p = prob.learned_map(&[(0, optimal_magnitude(&prob, 1)), (1, a)]);
    assert!(prob.grad_of(&p).norm() < 1e-12);
}

#[test]
fn loss_decouples_over_eigen_aligned_heads() {
    let prob = AttnProblem::new(Mat::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.8]), 4, 2, 1e-3).unwrap();
    let base = prob.loss_of(&Mat::zeros(2, 2));
    let (a0, a1) = (0.07, -0.03);
    let joint = prob.loss_of(&prob.learned_map(&[(0, a0), (1, a1)]));
    let parts = prob.loss_of(&prob.learned_map(&[(0, a0)])) + prob.loss_of(&prob.learned_map(&[(1, a1)])) - base;
    assert!((joint - parts).abs() < 1e-10);
}

#[test]
fn utility_is_cubic() {
    let prob = two_eigenvalues();
    let th = random_heads(5, 1.0, 4);
    let r = -prob.grad_of(&prob.learned_map(&[(0, 0.01)]));
    let scaled: Vec<f64> = th.iter().map(|x| 1.7 * x).collect();
    assert_relative_eq!(prob.utility(0, &scaled, &r), 1.7f64.powi(3) * prob.utility(0, &th, &r), max_relative = 1e-12);
}

#[test]
fn sphere_ascent_finds_eigen_heads() {
    let prob = two_eigenvalues();
    for (learned, k) in [(vec![], 0usize), (vec![(0usize, optimal_magnitude(&prob, 1))], 1)] {
        let r = -prob.grad_of(&prob.learned_map(&learned));
        let target = 8.0 * prob.lambda[k].powi(2) / (3.0 * 3f64.sqrt());
        for seed in 0..20 {
            let mut th = random_heads(5, 1.0, 100 + seed);
            let mut g = vec![0.0; 5];
            for _ in 0..20000 {
                let n: f64 = th.iter().map(|x| x * x).sum::<f64>().sqrt();
                th.iter_mut().for_each(|x| *x /= n);
                prob.utility_grad(0, &th, &r, &mut g);
                let along: f64 = g.iter().zip(&th).map(|(a, b)| a * b).sum();
                th.iter_mut().zip(&g).for_each(|(x, gi)| *x += 0.02 * (gi - along * *x));
            }
            let n: f64 = th.iter().map(|x| x * x).sum::<f64>().sqrt();
            th.iter_mut().for_each(|x| *x /= n);
            assert!((prob.utility(0, &th, &r) - target).abs() < 1e-8, "seed {seed}");
            let expect = aligned_head(&prob, k, th[0].signum());
            let dist = th.iter().zip(&expect).map(|(a, b)| (a.abs() - b.abs()).powi(2)).sum::<f64>().sqrt();
            assert!(dist < 1e-4);
        }
    }
}

#[test]
fn engine_run_matches_sequence_and_bounds() {
    let prob = two_eigenvalues();
    let seq = attn_sequence(&prob);
    for &alpha in &[1e-2, 1e-3] {
        let prob = AttnProblem { alpha, ..prob.clone() };
        let trace = engine::run(&prob, &EngineConfig::new(alpha, 0)).unwrap();
        let levels = trace.plateaus();
        assert_eq!(levels.len(), 3, "{levels:?}");
        for (a, b) in levels.iter().zip(seq.losses()) {
            assert!((a - b).abs() < 1e-6 * b.max(1.0), "{levels:?}");
        }
        let acts: Vec<_> = trace.activations().collect();
        let mut tau_l = 0.0;
        let mut mu_l = trace.init_max_norm;
        for (k, ev) in acts.iter().enumerate() {
            let bound = attn_jump_lower_bound(&prob, tau_l, mu_l, trace.eta, k + 1);
            assert!(ev.tau >= bound, "alpha {alpha} k {k}: {} < {bound}", ev.tau);
            tau_l = ev.tau;
            mu_l = ev.max_dormant_norm;
        }
    }
}
