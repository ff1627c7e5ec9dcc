//! Fully connected two-layer linear network (κ = 2): f(x) = AWx with neurons
//! θᵢ = (aᵢ, wᵢ), trained on the population loss ℒ(β) = ½tr((β − B)Σxx(β − B)ᵀ)
//! for β = AW and target map B = ΣyxΣxx⁻¹.
//!
//! Utility maximization is a Rayleigh quotient on −∇ℒ = Σyx − βΣxx and cost
//! minimization is reduced-rank regression. [`FclnProblem`] is the network itself;
//! [`FclnBasis`] is the engine formulation with mutually orthogonal dormant pairs.

use serde::{Deserialize, Serialize};

use crate::engine::{l2, ModelContract};
use crate::error::{AgfError, Result};
use crate::gf::Observe;
use crate::numerics::ode::{drive, Flow, StepControl};
use crate::numerics::{projector, spd_inverse, svd, sym_eig, Mat, Vector};
use crate::rng::{gaussian, neuron_rng};
use crate::sequence::{PredictedSequence, PredictedStep};

/// Smallest accepted gap between singular values (and eigenvalues).
pub const SPECTRAL_GAP_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FclnProblem {
    /// d×d input covariance.
    pub sigma_xx: Mat,
    /// c×d input-output cross-covariance.
    pub sigma_yx: Mat,
    pub h: usize,
    pub alpha: f64,
}

impl FclnProblem {
    pub fn new(sigma_xx: Mat, sigma_yx: Mat, h: usize, alpha: f64) -> Result<Self> {
        let d = sigma_xx.nrows();
        if sigma_xx.ncols() != d || sigma_yx.ncols() != d || sigma_yx.nrows() == 0 || d == 0 || h == 0 {
            return Err(AgfError::Invalid(format!(
                "Sigma_xx is {:?}, Sigma_yx is {:?}, H = {h}",
                sigma_xx.shape(),
                sigma_yx.shape()
            )));
        }
        let (ev, _) = sym_eig(&sigma_xx)?;
        if !(ev[d - 1] > 0.0) {
            return Err(AgfError::SingularSigma);
        }
        let (_, s, _) = svd(&sigma_yx)?;
        let gap = min_gap(s.as_slice());
        if gap < SPECTRAL_GAP_FLOOR {
            return Err(AgfError::DegenerateSpectrum(gap));
        }
        Ok(Self { sigma_xx, sigma_yx, h, alpha })
    }

    /// Σxx = I and Σyx = diag(s).
    pub fn diagonal(s: &[f64], h: usize, alpha: f64) -> Result<Self> {
        let n = s.len();
        Self::new(Mat::identity(n, n), Mat::from_diagonal(&Vector::from_column_slice(s)), h, alpha)
    }

    /// Random rotation of a power-law input spectrum λₖ = k^(−exponent), with a
    /// Gaussian target map B so that Σyx = BΣxx.
    pub fn power_law(c: usize, d: usize, h: usize, exponent: f64, seed: u64, alpha: f64) -> Result<Self> {
        let mut rng = neuron_rng(seed, 0);
        let g = Mat::from_vec(d, d, gaussian(&mut rng, d * d, 1.0));
        let q = g.qr().q();
        let lam = Vector::from_iterator(d, (1..=d).map(|k| (k as f64).powf(-exponent)));
        let sxx = &q * Mat::from_diagonal(&lam) * q.transpose();
        let sxx = (&sxx + sxx.transpose()) * 0.5;
        let b = Mat::from_vec(c, d, gaussian(&mut rng, c * d, 1.0));
        let syx = b * &sxx;
        Self::new(sxx, syx, h, alpha)
    }

    pub fn c(&self) -> usize {
        self.sigma_yx.nrows()
    }

    pub fn d(&self) -> usize {
        self.sigma_xx.nrows()
    }

    /// Number of learnable ranks, min(c, H, d).
    pub fn max_rank(&self) -> usize {
        self.c().min(self.d()).min(self.h)
    }

    /// B = ΣyxΣxx⁻¹.
    pub fn target(&self) -> Result<Mat> {
        Ok(&self.sigma_yx * spd_inverse(&self.sigma_xx)?)
    }

    /// ΣyxΣxx⁻¹Σyxᵀ, whose eigenvalues μᵢ set the loss levels.
    pub fn ols_gram(&self) -> Result<Mat> {
        let m = &self.sigma_yx * spd_inverse(&self.sigma_xx)? * self.sigma_yx.transpose();
        Ok((&m + m.transpose()) * 0.5)
    }

    pub fn loss(&self, beta: &Mat) -> f64 {
        let b = self.target().expect("Sigma_xx checked SPD");
        let e = beta - b;
        0.5 * (&e * &self.sigma_xx * e.transpose()).trace()
    }

    /// −∇ℒ(β) = Σyx − βΣxx.
    pub fn neg_grad(&self, beta: &Mat) -> Mat {
        &self.sigma_yx - beta * &self.sigma_xx
    }

    /// β = Σᵢ aᵢwᵢᵀ for concatenated (aᵢ, wᵢ) blocks.
    pub fn beta_of(&self, params: &[f64]) -> Mat {
        let (c, d) = (self.c(), self.d());
        let mut beta = Mat::zeros(c, d);
        for th in params.chunks(c + d) {
            let a = Vector::from_column_slice(&th[..c]);
            let w = Vector::from_column_slice(&th[c..]);
            beta += a * w.transpose();
        }
        beta
    }

    fn pair_grad(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let (c, d) = (self.c(), self.d());
        let beta = self.beta_of(params);
        let r = self.neg_grad(&beta);
        for (th, g) in params.chunks(c + d).zip(grad.chunks_mut(c + d)) {
            let a = Vector::from_column_slice(&th[..c]);
            let w = Vector::from_column_slice(&th[c..]);
            let ga = -(&r * w);
            let gw = -(r.transpose() * a);
            g[..c].copy_from_slice(ga.as_slice());
            g[c..].copy_from_slice(gw.as_slice());
        }
        self.loss(&beta)
    }

    /// Engine formulation with min(c, H, d) orthogonal basis pairs.
    pub fn basis(&self) -> FclnBasis {
        FclnBasis { prob: self.clone() }
    }
}

fn min_gap(s: &[f64]) -> f64 {
    let mut gap = s.last().copied().unwrap_or(0.0);
    for w in s.windows(2) {
        gap = gap.min(w[0] - w[1]);
    }
    gap
}

/// One singular mode of −∇ℒ with its utility σ/2.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularMode {
    pub u: Vector,
    pub v: Vector,
    pub sigma: f64,
    pub utility: f64,
}

/// Top-m singular modes of `residual_grad` = −∇ℒ; mode i maximizes uᵀ(−∇ℒ)v
/// on the Stiefel manifold with value σᵢ/2 at unit-norm (u, v)/√2.
pub fn stiefel_utility_max(residual_grad: &Mat, m: usize) -> Result<Vec<SingularMode>> {
    let (u, s, v) = svd(residual_grad)?;
    Ok((0..m.min(s.len()))
        .map(|i| SingularMode {
            u: u.column(i).into_owned(),
            v: v.column(i).into_owned(),
            sigma: s[i],
            utility: s[i] / 2.0,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedRank {
    pub beta: Mat,
    /// −∇ℒ(β) = P⊥Σyx.
    pub neg_grad: Mat,
    /// Top-k eigenvectors of ΣyxΣxx⁻¹Σyxᵀ.
    pub basis: Mat,
    pub loss: f64,
}

/// Best rank-k map: the OLS solution projected onto the top-k eigenvectors of
/// ΣyxΣxx⁻¹Σyxᵀ.
pub fn reduced_rank_solution(prob: &FclnProblem, k: usize) -> Result<ReducedRank> {
    let c = prob.c();
    if k > c.min(prob.d()) {
        return Err(AgfError::Invalid(format!("rank {k} exceeds min(c, d) = {}", c.min(prob.d()))));
    }
    let ols = prob.target()?;
    let (_, vecs) = sym_eig(&prob.ols_gram()?)?;
    let uk = vecs.columns(0, k).into_owned();
    let proj = projector(&uk);
    let beta = &proj * ols;
    let neg_grad = (Mat::identity(c, c) - proj) * &prob.sigma_yx;
    let loss = prob.loss(&beta);
    Ok(ReducedRank { beta, neg_grad, basis: uk, loss })
}

/// One rank at a time: ℓ^(k) = ½Σ_{i>k}μᵢ, and jump times from
/// Δτ^(i) = (1 − Σ_{j=0}^{i−2} σ^(j)_{i−j}Δτ^(j+1)) / σ^(i−1)_1,
/// where σ^(k) are the singular values of P⊥_{U_k}Σyx.
pub fn conjecture_sequence(prob: &FclnProblem) -> Result<PredictedSequence> {
    let m = prob.max_rank();
    let (mu, _) = sym_eig(&prob.ols_gram()?)?;
    let top = mu[0].max(f64::MIN_POSITIVE);
    let positive: Vec<f64> = mu.iter().copied().filter(|&v| v > 1e-12 * top).collect();
    let gap = min_gap(&positive);
    if gap < SPECTRAL_GAP_FLOOR {
        return Err(AgfError::DegenerateSpectrum(gap));
    }
    let mut sig: Vec<Vec<f64>> = Vec::with_capacity(m);
    for k in 0..m {
        let rr = reduced_rank_solution(prob, k)?;
        let (_, s, _) = svd(&rr.neg_grad)?;
        sig.push(s.iter().copied().collect());
    }
    let level = |k: usize| 0.5 * mu.iter().skip(k).map(|v| v.max(0.0)).sum::<f64>();
    let mut steps =
        vec![PredictedStep { k: 0, loss: level(0), tau: Some(0.0), tau_lower_bound: None, feature: "rank=0".into(), value: 0.0 }];
    let mut dtau = vec![0.0; m + 1];
    let mut tau = 0.0;
    for i in 1..=m {
        let mut num = 1.0;
        for j in 0..i.saturating_sub(1) {
            num -= sig[j].get(i - j - 1).copied().unwrap_or(0.0) * dtau[j + 1];
        }
        let den = sig[i - 1][0];
        if den <= 1e-12 * sig[0][0] {
            break;
        }
        dtau[i] = num / den;
        tau += dtau[i];
        steps.push(PredictedStep {
            k: i,
            loss: level(i),
            tau: Some(tau),
            tau_lower_bound: None,
            feature: format!("rank={i}"),
            value: sig[i - 1][0],
        });
    }
    Ok(PredictedSequence { model: "fcln".into(), steps, flags: vec![] })
}

/// Greedy low-rank learning on asymmetric β: add √eps·(u₁, v₁) from the top
/// singular mode of −∇ℒ, then run gradient flow over all added pairs to
/// convergence. Returns β after 0, 1, …, min(c, H, d) rounds.
pub fn greedy_rank1(prob: &FclnProblem, eps: f64) -> Result<Vec<Mat>> {
    let (c, d) = (prob.c(), prob.d());
    let dim = c + d;
    let mut params: Vec<f64> = vec![];
    let mut out = vec![Mat::zeros(c, d)];
    let l0 = prob.loss(&Mat::zeros(c, d));
    let tol = 1e-9 * l0.max(f64::MIN_POSITIVE);
    let ctrl = StepControl::adaptive(1e-12, 1e-10);
    for _ in 0..prob.max_rank() {
        let r = prob.neg_grad(&out[out.len() - 1]);
        let modes = stiefel_utility_max(&r, 1)?;
        if modes.is_empty() || modes[0].sigma <= tol {
            break;
        }
        let s = eps.sqrt();
        params.extend(modes[0].u.iter().map(|x| s * x));
        params.extend(modes[0].v.iter().map(|x| s * x));
        let mut field = |y: &[f64], dy: &mut [f64]| {
            prob.pair_grad(y, dy);
            dy.iter_mut().for_each(|v| *v = -*v);
        };
        let mut g = vec![0.0; params.len()];
        let mut gn = f64::INFINITY;
        let mut done = false;
        let (t_end, y, _) = drive(&mut field, &params, 0.0, 1e6, &ctrl, |_, y| {
            prob.pair_grad(y, &mut g);
            gn = l2(&g);
            if gn < tol {
                done = true;
                return Flow::Stop;
            }
            Flow::Continue
        })?;
        if !done {
            return Err(AgfError::NoConverge { t: t_end, grad_norm: gn });
        }
        params = y;
        debug_assert_eq!(params.len() % dim, 0);
        out.push(prob.beta_of(&params));
    }
    Ok(out)
}

fn init_pairs(prob: &FclnProblem, n: usize, alpha: f64, seed: u64) -> Vec<Vec<f64>> {
    let (c, d) = (prob.c(), prob.d());
    let (sa, sw) = (alpha / (2.0 * c as f64).sqrt(), alpha / (2.0 * d as f64).sqrt());
    (0..n)
        .map(|i| {
            let mut rng = neuron_rng(seed, i);
            let mut th = gaussian(&mut rng, c, sa);
            th.extend(gaussian(&mut rng, d, sw));
            th
        })
        .collect()
}

fn utility_and_grad(prob: &FclnProblem, theta: &[f64], r: &Mat, grad: Option<&mut [f64]>) -> f64 {
    let c = prob.c();
    let a = Vector::from_column_slice(&theta[..c]);
    let w = Vector::from_column_slice(&theta[c..]);
    let rw = r * &w;
    if let Some(g) = grad {
        let ra = r.transpose() * &a;
        g[..c].copy_from_slice(rw.as_slice());
        g[c..].copy_from_slice(ra.as_slice());
    }
    a.dot(&rw)
}

fn max_utility_of(r: &Mat) -> Option<f64> {
    svd(r).ok().map(|(_, s, _)| s.get(0).copied().unwrap_or(0.0) / 2.0)
}

impl ModelContract for FclnProblem {
    /// −∇ℒ = Σyx − βΣxx at the active β.
    type Residual = Mat;

    fn kappa(&self) -> u32 {
        2
    }
    fn num_neurons(&self) -> usize {
        self.h
    }
    fn param_dim(&self) -> usize {
        self.c() + self.d()
    }
    fn init_norm_scale(&self) -> f64 {
        1.0
    }
    /// aᵢ ~ N(0, α²/(2c)), wᵢ ~ N(0, α²/(2d)) entrywise.
    fn init_params(&self, alpha: f64, seed: u64) -> Vec<Vec<f64>> {
        init_pairs(self, self.h, alpha, seed)
    }
    fn imbalance(&self, theta: &[f64]) -> f64 {
        let c = self.c();
        l2(&theta[..c]).powi(2) - l2(&theta[c..]).powi(2)
    }
    fn residual(&self, _active: &[usize], params: &[f64]) -> Mat {
        self.neg_grad(&self.beta_of(params))
    }
    fn utility(&self, _i: usize, theta: &[f64], r: &Mat) -> f64 {
        utility_and_grad(self, theta, r, None)
    }
    fn utility_grad(&self, _i: usize, theta: &[f64], r: &Mat, grad: &mut [f64]) -> f64 {
        utility_and_grad(self, theta, r, Some(grad))
    }
    fn max_utility(&self, r: &Mat) -> Option<f64> {
        max_utility_of(r)
    }
    fn active_loss(&self, _active: &[usize], params: &[f64]) -> f64 {
        self.loss(&self.beta_of(params))
    }
    fn active_grad(&self, _active: &[usize], params: &[f64], grad: &mut [f64]) -> f64 {
        self.pair_grad(params, grad)
    }
}

impl Observe for FclnProblem {
    /// `sv_k`: singular values of β = AW, descending.
    fn observable_names(&self) -> Vec<String> {
        (0..self.c().min(self.d())).map(|k| format!("sv_{k}")).collect()
    }
    fn observables(&self, params: &[f64]) -> Vec<f64> {
        svd(&self.beta_of(params)).map(|(_, s, _)| s.iter().copied().collect()).unwrap_or_default()
    }
}

/// Engine view of [`FclnProblem`]: min(c, H, d) pairs whose dormant output
/// blocks, and separately input blocks, are kept mutually orthogonal.
#[derive(Debug, Clone, PartialEq)]
pub struct FclnBasis {
    pub prob: FclnProblem,
}

/// Gram–Schmidt of the given blocks in order, each keeping its own norm.
fn orthogonalize_blocks(dirs: &mut [&mut [f64]], range: std::ops::Range<usize>) {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dirs.len());
    for dir in dirs.iter_mut() {
        let blk = &mut dir[range.clone()];
        let n0 = l2(blk);
        for q in &basis {
            let p: f64 = blk.iter().zip(q).map(|(a, b)| a * b).sum();
            blk.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
        }
        let n = l2(blk);
        if n > 1e-300 {
            basis.push(blk.iter().map(|v| v / n).collect());
            blk.iter_mut().for_each(|v| *v *= n0 / n);
        }
    }
}

impl ModelContract for FclnBasis {
    type Residual = Mat;

    fn kappa(&self) -> u32 {
        2
    }
    fn num_neurons(&self) -> usize {
        self.prob.max_rank()
    }
    fn param_dim(&self) -> usize {
        self.prob.param_dim()
    }
    fn init_norm_scale(&self) -> f64 {
        1.0
    }
    fn init_params(&self, alpha: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut th = init_pairs(&self.prob, self.num_neurons(), alpha, seed);
        let c = self.prob.c();
        let mut refs: Vec<&mut [f64]> = th.iter_mut().map(|v| v.as_mut_slice()).collect();
        orthogonalize_blocks(&mut refs, 0..c);
        orthogonalize_blocks(&mut refs, c..c + self.prob.d());
        th
    }
    fn imbalance(&self, theta: &[f64]) -> f64 {
        self.prob.imbalance(theta)
    }
    fn residual(&self, active: &[usize], params: &[f64]) -> Mat {
        self.prob.residual(active, params)
    }
    fn utility(&self, i: usize, theta: &[f64], r: &Mat) -> f64 {
        self.prob.utility(i, theta, r)
    }
    fn utility_grad(&self, i: usize, theta: &[f64], r: &Mat, grad: &mut [f64]) -> f64 {
        self.prob.utility_grad(i, theta, r, grad)
    }
    fn max_utility(&self, r: &Mat) -> Option<f64> {
        max_utility_of(r)
    }
    fn active_loss(&self, active: &[usize], params: &[f64]) -> f64 {
        self.prob.active_loss(active, params)
    }
    fn active_grad(&self, active: &[usize], params: &[f64], grad: &mut [f64]) -> f64 {
        self.prob.active_grad(active, params, grad)
    }
    fn project_dormant(&self, dirs: &mut [&mut [f64]]) {
        let c = self.prob.c();
        orthogonalize_blocks(dirs, 0..c);
        orthogonalize_blocks(dirs, c..c + self.prob.d());
    }
}

impl Observe for FclnBasis {
    fn observable_names(&self) -> Vec<String> {
        self.prob.observable_names()
    }
    fn observables(&self, params: &[f64]) -> Vec<f64> {
        self.prob.observables(params)
    }
}
