//! Attention-only linear transformer (κ = 3) on in-context linear regression,
//! restricted to the slice of parameters that can move from zero: head h is
//! θ_h = (V_h, Q_h, K_h) ∈ ℝ^(2d+1) and the network predicts ŷ = x_qᵀPŜβ with
//! P = Σ_h V_hQ_hK_hᵀ and Ŝ = Σₙ xₙxₙᵀ over N context points.
//!
//! For x ~ N(0, Σ) and β ~ N(0, I) the population loss is
//! ℒ(P) = ½[trΣ − 2N·tr(ΣPΣ) + tr(ΣPFPᵀ)] with F = E[Ŝ²], so
//! ∇_Pℒ = G = −NΣ² + ΣPF.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{l2, ModelContract};
use crate::error::{AgfError, Result};
use crate::gf::Observe;
use crate::numerics::{svd, sym_eig, Mat, Vector};
use crate::rng::{gaussian, neuron_rng};
use crate::sequence::{PredictedSequence, PredictedStep};

/// Smallest accepted gap between eigenvalues of Σxx.
pub const EIGEN_GAP_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnProblem {
    pub sigma_xx: Mat,
    /// Context length N.
    pub n_ctx: usize,
    pub h: usize,
    pub alpha: f64,
    /// Eigenvalues of Σxx, descending.
    pub lambda: Vector,
    /// Matching unit eigenvectors as columns.
    pub eigvecs: Mat,
}

impl AttnProblem {
    pub fn new(sigma_xx: Mat, n_ctx: usize, h: usize, alpha: f64) -> Result<Self> {
        let d = sigma_xx.nrows();
        if d == 0 || sigma_xx.ncols() != d || n_ctx == 0 || h == 0 {
            return Err(AgfError::Invalid(format!("Sigma_xx is {:?}, N = {n_ctx}, H = {h}", sigma_xx.shape())));
        }
        let (lambda, eigvecs) = sym_eig(&sigma_xx)?;
        if !(lambda[d - 1] > 0.0) {
            return Err(AgfError::SingularSigma);
        }
        let gap = lambda.as_slice().windows(2).map(|w| w[0] - w[1]).fold(f64::INFINITY, f64::min);
        if gap < EIGEN_GAP_FLOOR {
            return Err(AgfError::DegenerateSpectrum(gap));
        }
        Ok(Self { sigma_xx, n_ctx, h, alpha, lambda, eigvecs })
    }

    /// Σxx = diag(eigenvalues).
    pub fn diagonal(eigenvalues: &[f64], n_ctx: usize, h: usize, alpha: f64) -> Result<Self> {
        Self::new(Mat::from_diagonal(&Vector::from_column_slice(eigenvalues)), n_ctx, h, alpha)
    }

    /// Σxx = diag(k^(−exponent)) for k = 1..d.
    pub fn power_law(d: usize, exponent: f64, n_ctx: usize, h: usize, alpha: f64) -> Result<Self> {
        let ev: Vec<f64> = (1..=d).map(|k| (k as f64).powf(-exponent)).collect();
        Self::diagonal(&ev, n_ctx, h, alpha)
    }

    pub fn d(&self) -> usize {
        self.sigma_xx.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.sigma_xx.trace()
    }

    /// P = Σ_h V_hQ_hK_hᵀ for concatenated head blocks.
    pub fn combined(&self, params: &[f64]) -> Mat {
        let d = self.d();
        let mut p = Mat::zeros(d, d);
        for th in params.chunks(2 * d + 1) {
            let q = Vector::from_column_slice(&th[1..=d]);
            let k = Vector::from_column_slice(&th[d + 1..]);
            p += q * k.transpose() * th[0];
        }
        p
    }

    pub fn loss_of(&self, p: &Mat) -> f64 {
        let s = &self.sigma_xx;
        let f = fourth_moment(s, self.n_ctx);
        let n = self.n_ctx as f64;
        0.5 * (self.trace() - 2.0 * n * (s * p * s).trace() + (s * p * f * p.transpose()).trace())
    }

    /// G = ∇_Pℒ = −NΣ² + ΣPF.
    pub fn grad_of(&self, p: &Mat) -> Mat {
        let s = &self.sigma_xx;
        let f = fourth_moment(s, self.n_ctx);
        s * p * f - s * s * self.n_ctx as f64
    }

    /// P for eigendirections k (0-based) learned with magnitudes A.
    pub fn learned_map(&self, learned: &[(usize, f64)]) -> Mat {
        let d = self.d();
        let mut p = Mat::zeros(d, d);
        for &(k, a) in learned {
            let v = self.eigvecs.column(k);
            p += v * v.transpose() * a;
        }
        p
    }
}

/// E[(Σₙxₙxₙᵀ)²] = NΣ·trΣ + N(N+1)Σ² for N i.i.d. x ~ N(0, Σ).
pub fn fourth_moment(sigma: &Mat, n_ctx: usize) -> Mat {
    let n = n_ctx as f64;
    sigma * (n * sigma.trace()) + sigma * sigma * (n * (n + 1.0))
}

/// Cholesky factor used to draw x ~ N(0, Σ).
fn sampler(sigma: &Mat) -> Result<Mat> {
    sigma.clone().cholesky().map(|c| c.l()).ok_or(AgfError::SingularSigma)
}

fn draw(l: &Mat, rng: &mut ChaCha8Rng) -> Vector {
    let d = l.nrows();
    l * Vector::from_vec(gaussian(rng, d, 1.0))
}

/// Sample mean of Ŝ² over `samples` draws of N context points.
pub fn monte_carlo_fourth_moment(sigma: &Mat, n_ctx: usize, samples: usize, seed: u64) -> Result<Mat> {
    let l = sampler(sigma)?;
    let d = sigma.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Mat::zeros(d, d);
    let mut shat = Mat::zeros(d, d);
    for _ in 0..samples {
        shat.fill(0.0);
        for _ in 0..n_ctx {
            let x = draw(&l, &mut rng);
            shat += &x * x.transpose();
        }
        acc += &shat * &shat;
    }
    Ok(acc / samples as f64)
}

/// Sampled ½(y_q − ŷ)² averaged over `samples` fresh prompts.
pub fn monte_carlo_loss(prob: &AttnProblem, params: &[f64], samples: usize, seed: u64) -> Result<f64> {
    let l = sampler(&prob.sigma_xx)?;
    let p = prob.combined(params);
    let d = prob.d();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..samples {
        let beta = Vector::from_vec(gaussian(&mut rng, d, 1.0));
        let mut sy = Vector::zeros(d);
        for _ in 0..prob.n_ctx {
            let x = draw(&l, &mut rng);
            sy += &x * x.dot(&beta);
        }
        let xq = draw(&l, &mut rng);
        let e = xq.dot(&beta) - xq.dot(&(&p * sy));
        acc += 0.5 * e * e;
    }
    Ok(acc / samples as f64)
}

/// 𝒰 = V·Qᵀ(−G)K for one head against the residual of the learned components,
/// i.e. N·V·Qᵀ(Σ² − Σ_learned λₖ²vₖvₖᵀ)K at the optimal magnitudes.
pub fn attn_utility(prob: &AttnProblem, theta: &[f64], learned: &[(usize, f64)]) -> f64 {
    let r = -prob.grad_of(&prob.learned_map(learned));
    head_utility(prob.d(), theta, &r, None)
}

fn head_utility(d: usize, theta: &[f64], r: &Mat, grad: Option<&mut [f64]>) -> f64 {
    let q = Vector::from_column_slice(&theta[1..=d]);
    let k = Vector::from_column_slice(&theta[d + 1..]);
    let rk = r * &k;
    let qr = r.transpose() * &q;
    let form = q.dot(&rk);
    if let Some(g) = grad {
        g[0] = form;
        for i in 0..d {
            g[1 + i] = theta[0] * rk[i];
            g[d + 1 + i] = theta[0] * qr[i];
        }
    }
    theta[0] * form
}

/// Aₖ = 1/(trΣ + (N+1)λₖ) for 1-based k.
pub fn optimal_magnitude(prob: &AttnProblem, k: usize) -> f64 {
    1.0 / (prob.trace() + (prob.n_ctx as f64 + 1.0) * prob.lambda[k - 1])
}

/// τ^(k) ≥ τ^(l) + √3/(η·μ^(l)·Nλₖ²), with μ^(l) the largest dormant norm at τ^(l).
pub fn attn_jump_lower_bound(prob: &AttnProblem, tau_l: f64, mu_l: f64, eta: f64, k: usize) -> f64 {
    let lam = prob.lambda[k - 1];
    tau_l + 3f64.sqrt() / (eta * mu_l * prob.n_ctx as f64 * lam * lam)
}

/// One eigendirection per head in order of decreasing λ: ℓ^(k) = trΣ/2 −
/// Σ_{i≤k}(Nλᵢ/2)/(trΣ/λᵢ + N + 1). Bounds are taken from τ = 0 with μ the
/// expected initial head norm α√(2d+1).
pub fn attn_sequence(prob: &AttnProblem) -> PredictedSequence {
    let n = prob.n_ctx as f64;
    let tr = prob.trace();
    let eta = 1.0 / prob.alpha;
    let mu0 = prob.alpha * ((2 * prob.d() + 1) as f64).sqrt();
    let mut loss = tr / 2.0;
    let mut steps =
        vec![PredictedStep { k: 0, loss, tau: Some(0.0), tau_lower_bound: None, feature: "none".into(), value: 0.0 }];
    for k in 1..=prob.d().min(prob.h) {
        let lam = prob.lambda[k - 1];
        loss -= (n * lam / 2.0) / (tr / lam + n + 1.0);
        steps.push(PredictedStep {
            k,
            loss,
            tau: None,
            tau_lower_bound: Some(attn_jump_lower_bound(prob, 0.0, mu0, eta, k)),
            feature: format!("eig={}", k - 1),
            value: optimal_magnitude(prob, k),
        });
    }
    PredictedSequence { model: "attn".into(), steps, flags: vec![] }
}

/// Population loss of the listed heads; writes per-head (∂V, ∂Q, ∂K) =
/// (QᵀGK, V·GK, V·GᵀQ) into `grad`.
pub fn attn_population_grad(prob: &AttnProblem, params: &[f64], grad: &mut [f64]) -> f64 {
    let d = prob.d();
    let p = prob.combined(params);
    let g = prob.grad_of(&p);
    for (th, out) in params.chunks(2 * d + 1).zip(grad.chunks_mut(2 * d + 1)) {
        head_utility(d, th, &g, Some(out));
    }
    prob.loss_of(&p)
}

impl ModelContract for AttnProblem {
    /// −G = −∇_Pℒ at the active heads.
    type Residual = Mat;

    fn kappa(&self) -> u32 {
        3
    }
    fn num_neurons(&self) -> usize {
        self.h
    }
    fn param_dim(&self) -> usize {
        2 * self.d() + 1
    }
    fn init_norm_scale(&self) -> f64 {
        (self.param_dim() as f64).sqrt()
    }
    /// Every entry N(0, α²).
    fn init_params(&self, alpha: f64, seed: u64) -> Vec<Vec<f64>> {
        (0..self.h).map(|i| gaussian(&mut neuron_rng(seed, i), self.param_dim(), alpha)).collect()
    }
    /// 2V² − ‖Q‖² − ‖K‖².
    fn imbalance(&self, theta: &[f64]) -> f64 {
        2.0 * theta[0] * theta[0] - l2(&theta[1..]).powi(2)
    }
    fn residual(&self, _active: &[usize], params: &[f64]) -> Mat {
        -self.grad_of(&self.combined(params))
    }
    fn utility(&self, _i: usize, theta: &[f64], r: &Mat) -> f64 {
        head_utility(self.d(), theta, r, None)
    }
    fn utility_grad(&self, _i: usize, theta: &[f64], r: &Mat, grad: &mut [f64]) -> f64 {
        head_utility(self.d(), theta, r, Some(grad))
    }
    /// σ_max(−G)/(3√3), attained at V = ‖Q‖ = ‖K‖ = 1/√3.
    fn max_utility(&self, r: &Mat) -> Option<f64> {
        svd(r).ok().map(|(_, s, _)| s[0] / (3.0 * 3f64.sqrt()))
    }
    fn active_loss(&self, _active: &[usize], params: &[f64]) -> f64 {
        self.loss_of(&self.combined(params))
    }
    fn active_grad(&self, _active: &[usize], params: &[f64], grad: &mut [f64]) -> f64 {
        attn_population_grad(self, params, grad)
    }
}

impl Observe for AttnProblem {
    /// `sv_k`: singular values of P; `head_norm_h`: ‖θ_h‖; `comp_k`: vₖᵀPvₖ
    /// for the k-th eigenvector of Σxx.
    fn observable_names(&self) -> Vec<String> {
        (0..self.d())
            .map(|k| format!("sv_{k}"))
            .chain((0..self.h).map(|h| format!("head_norm_{h}")))
            .chain((0..self.d()).map(|k| format!("comp_{k}")))
            .collect()
    }
    fn observables(&self, params: &[f64]) -> Vec<f64> {
        let p = self.combined(params);
        let mut out: Vec<f64> = svd(&p).map(|(_, s, _)| s.iter().copied().collect()).unwrap_or_default();
        out.extend(params.chunks(self.param_dim()).map(l2));
        out.extend(self.eigvecs.column_iter().map(|v| v.dot(&(&p * v))));
        out
    }
}
