use agf_core::models::modadd::*;
use agf_core::rng::{gaussian, neuron_rng};
use approx::assert_relative_eq;

fn random_params(p: usize, h: usize, std: f64, seed: u64) -> Vec<f64> {
    (0..h).flat_map(|i| gaussian(&mut neuron_rng(seed, i as u64 as usize), 3 * p, std)).collect()
}

fn small_problem() -> ModAddProblem {
    ModAddProblem::from_spectrum(7, &[(1, 3.0, 0.4), (2, 1.5, -1.1), (3, 0.7, 2.0)], 3, 1e-3).unwrap()
}

#[test]
fn factored_loss_matches_grid_sum() {
    let prob = small_problem();
    let th = random_params(7, 3, 0.5, 11);
    assert_relative_eq!(prob.loss(&th), prob.loss_direct(&th), max_relative = 1e-12);
    let mut g = vec![0.0; th.len()];
    let l = prob.loss_grad(&th, &mut g);
    assert_relative_eq!(l, prob.loss_direct(&th), max_relative = 1e-12);
    assert_relative_eq!(prob.loss_pairwise(&th), prob.loss_direct(&th), max_relative = 1e-12);
}

#[test]
fn batched_and_pairwise_gradients_agree() {
    let prob = ModAddProblem::three_cosine(5, 1e-3);
    let th = random_params(20, 5, 0.4, 3);
    let mut g1 = vec![0.0; th.len()];
    let mut g2 = vec![0.0; th.len()];
    let l1 = prob.loss_grad(&th, &mut g1);
    let l2 = prob.loss_grad_pairwise(&th, &mut g2);
    assert_relative_eq!(l1, l2, max_relative = 1e-12);
    for (a, b) in g1.iter().zip(&g2) {
        assert_relative_eq!(a, b, epsilon = 1e-11, max_relative = 1e-10);
    }
}

#[test]
fn factored_gradient_matches_grid_gradient_and_finite_differences() {
    let prob = small_problem();
    let th = random_params(7, 3, 0.5, 5);
    let mut g = vec![0.0; th.len()];
    prob.loss_grad(&th, &mut g);
    let mut gd = vec![0.0; th.len()];
    prob.grad_direct(&th, &mut gd);
    for (a, b) in g.iter().zip(&gd) {
        assert_relative_eq!(a, b, epsilon = 1e-11, max_relative = 1e-9);
    }
    let h = 1e-6;
    for k in 0..th.len() {
        let mut tp = th.clone();
        tp[k] += h;
        let mut tm = th.clone();
        tm[k] -= h;
        let fd = (prob.loss_direct(&tp) - prob.loss_direct(&tm)) / (2.0 * h);
        assert_relative_eq!(g[k], fd, epsilon = 1e-7, max_relative = 1e-6);
    }
}

#[test]
fn residual_utility_matches_spatial_and_frequency_forms() {
    let prob = small_problem();
    let p = prob.p;
    let theta = random_params(p, 1, 0.3, 1);
    // Empty active set: the residual is the target itself.
    let u0 = prob.residual_utility(&theta, &[], None);
    let us = utility_spatial(&prob, &theta, |a, b, c| prob.target(a, b, c));
    let uf = utility_frequency(&prob, &theta, &[]).unwrap();
    assert_relative_eq!(u0, us, max_relative = 1e-11);
    assert_relative_eq!(u0, uf, max_relative = 1e-10);

    // Nonempty active set: residual = target − network.
    let act = random_params(p, 2, 0.4, 9);
    let feats: Vec<Feat> = act.chunks(3 * p).map(|t| prob.feat(t)).collect();
    let net = network_function(&prob, &act);
    let u1 = prob.residual_utility(&theta, &feats, None);
    let us1 = utility_spatial(&prob, &theta, |a, b, c| prob.target(a, b, c) - net.at(a, b, c));
    assert_relative_eq!(u1, us1, max_relative = 1e-10);

    let mut g = vec![0.0; 3 * p];
    let u2 = prob.residual_utility(&theta, &feats, Some(&mut g));
    assert_relative_eq!(u1, u2, max_relative = 1e-14);
    let h = 1e-6;
    for k in 0..3 * p {
        let mut tp = theta.clone();
        tp[k] += h;
        let mut tm = theta.clone();
        tm[k] -= h;
        let fd = (prob.residual_utility(&tp, &feats, None) - prob.residual_utility(&tm, &feats, None)) / (2.0 * h);
        assert_relative_eq!(g[k], fd, epsilon = 1e-8, max_relative = 1e-6);
    }
}

#[test]
fn maximizer_reaches_closed_form_utility() {
    let prob = ModAddProblem::three_cosine(1, 1e-3);
    for &xi in &[1usize, 3, 5] {
        let th = maximizer(&prob, xi, 0.3, -0.7).unwrap();
        let n: f64 = th.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_relative_eq!(n, 1.0, max_relative = 1e-12);
        let u = prob.residual_utility(&th, &[], None);
        assert_relative_eq!(u, prob.max_utility_at(xi), max_relative = 1e-10);
    }
}

#[test]
fn construction_attains_loss_bound() {
    let prob = ModAddProblem::three_cosine(6, 1e-3);
    for n in [6usize, 8, 10] {
        let ths = cost_min_construction(&prob, 1, n).unwrap();
        let flat: Vec<f64> = ths.concat();
        println!("n={n} loss={} bound={}", prob.loss(&flat), prob.loss_bound(1));
        assert_relative_eq!(prob.loss(&flat), prob.loss_bound(1), max_relative = 1e-9);
    }
}
