//! Diagonal linear network (κ = 2): β = u ∘ v with one neuron θᵢ = (uᵢ, vᵢ) per
//! coordinate, trained on ℒ(β) = (1/2n)‖y − Xᵀβ‖².
//!
//! Besides the engine contract this module runs AGF in closed form: a dormant
//! coordinate's accumulated utility and sign follow explicit formulas between
//! saddles, and the cost phase reduces to a sign-constrained least-squares problem.

use serde::{Deserialize, Serialize};

use crate::engine::{AgfEvent, AgfTrace, EngineConfig, EventKind, ModelContract, NeuronState, Snapshot};
use crate::error::{AgfError, Result};
use crate::gf::Observe;
use crate::numerics::{svd, Mat, Vector};
use crate::sequence::{PredictedSequence, PredictedStep};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlnProblem {
    /// d×n inputs, one sample per column.
    pub x: Mat,
    pub y: Vector,
    pub alpha: f64,
}

/// Largest subset size exhaustively checked for general position.
const GENERAL_POSITION_MAX_D: usize = 8;

impl DlnProblem {
    pub fn new(x: Mat, y: Vector, alpha: f64) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 || x.ncols() != y.len() {
            return Err(AgfError::Invalid(format!("X is {}x{} but y has length {}", x.nrows(), x.ncols(), y.len())));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(AgfError::NonFinite { t: f64::NAN });
        }
        let prob = Self { x, y, alpha };
        if prob.d() <= GENERAL_POSITION_MAX_D {
            prob.check_general_position()?;
        }
        Ok(prob)
    }

    /// X = I₂, y = (2, 1).
    pub fn two_coordinate(alpha: f64) -> Self {
        Self::new(Mat::identity(2, 2), Vector::from_vec(vec![2.0, 1.0]), alpha).expect("valid problem")
    }

    pub fn d(&self) -> usize {
        self.x.nrows()
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    /// Every set of at most min(d, n) coordinates must have linearly independent rows.
    pub fn check_general_position(&self) -> Result<()> {
        let (d, n) = (self.d(), self.n());
        let kmax = d.min(n);
        let scale = self.x.amax().max(f64::MIN_POSITIVE);
        for mask in 1u32..(1u32 << d) {
            let rows: Vec<usize> = (0..d).filter(|i| mask & (1 << i) != 0).collect();
            if rows.len() > kmax {
                continue;
            }
            let sub = Mat::from_fn(rows.len(), n, |r, c| self.x[(rows[r], c)]);
            let (_, s, _) = svd(&sub)?;
            if s[s.len() - 1] <= 1e-10 * scale {
                return Err(AgfError::Singular(rows));
            }
        }
        Ok(())
    }

    /// η = −log(√2 α).
    pub fn eta(&self) -> f64 {
        -(2f64.sqrt() * self.alpha).ln()
    }

    pub fn loss(&self, beta: &[f64]) -> f64 {
        let r = &self.y - self.x.transpose() * Vector::from_column_slice(beta);
        r.norm_squared() / (2.0 * self.n() as f64)
    }

    /// ∇ℒ(β) = −(1/n) X (y − Xᵀβ).
    pub fn grad(&self, beta: &[f64]) -> Vec<f64> {
        let r = &self.y - self.x.transpose() * Vector::from_column_slice(beta);
        (&self.x * r * (-1.0 / self.n() as f64)).iter().copied().collect()
    }

    fn gram(&self) -> Mat {
        &self.x * self.x.transpose() / self.n() as f64
    }

    fn xy(&self) -> Vector {
        &self.x * &self.y / self.n() as f64
    }
}

/// acosh(eᵞ) = y + log(1 + √(1 − e^{−2y})) for y ≥ 0, stable for large y.
pub fn acosh_exp(y: f64) -> f64 {
    y + (1.0 + (-(-2.0 * y).exp_m1()).max(0.0).sqrt()).ln()
}

/// log cosh x = |x| + log(1 + e^{−2|x|}) − log 2.
pub fn logcosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// 𝒰 = −uv·∂ℒ/∂βᵢ for θ = (u, v).
pub fn dln_utility(theta: &[f64], grad_i: f64) -> f64 {
    -theta[0] * theta[1] * grad_i
}

/// Accumulated utility a time t after a saddle:
/// (1/2η)·log cosh(2η·2𝒰*t + ζ·acosh exp(2η𝒮_prev)).
pub fn closed_form_s(s_prev: f64, ustar: f64, zeta: f64, eta: f64, t: f64) -> f64 {
    logcosh(2.0 * eta * 2.0 * ustar * t + zeta * acosh_exp(2.0 * eta * s_prev)) / (2.0 * eta)
}

/// ρ a time t after a saddle: sign((ρ_prev/2η)·acosh exp(2η𝒮_prev) − g·t).
pub fn sign_update(rho_prev: f64, s_prev: f64, grad: f64, eta: f64, t: f64) -> f64 {
    let q = rho_prev / (2.0 * eta) * acosh_exp(2.0 * eta * s_prev) - grad * t;
    if q > 0.0 {
        1.0
    } else if q < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// ζ = sgn(−g)·ρ, the branch of the closed form.
pub fn zeta(rho: f64, grad: f64) -> f64 {
    -grad.signum() * rho
}

/// Time until a dormant coordinate with accumulated utility `s` reaches 𝒮 = 1:
/// (acosh exp(2η) − ζ·acosh exp(2η𝒮)) / (2η|g|). `None` when g = 0.
pub fn activation_delay(s: f64, rho: f64, grad: f64, eta: f64) -> Option<f64> {
    if grad == 0.0 {
        return None;
    }
    let z = zeta(rho, grad);
    Some(((acosh_exp(2.0 * eta) - z * acosh_exp(2.0 * eta * s)) / (2.0 * eta * grad.abs())).max(0.0))
}

/// Dormant-coordinate state for the closed-form path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DlnCoord {
    pub s: f64,
    pub rho: f64,
    pub active: bool,
}

/// Next dormant coordinate to activate and the delay until it does (lowest index on ties).
pub fn next_activation(coords: &[DlnCoord], grad: &[f64], eta: f64) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in coords.iter().enumerate() {
        if c.active {
            continue;
        }
        if let Some(dt) = activation_delay(c.s, c.rho, grad[i], eta) {
            if best.map_or(true, |(_, b)| dt < b) {
                best = Some((i, dt));
            }
        }
    }
    best.ok_or(AgfError::AllZeroGrad)
}

/// Normalized utility along the dormant flow, 𝒰* tanh(4η𝒰*t + atanh(𝒰₀/𝒰*)).
pub fn riccati_utility(u0: f64, ustar: f64, eta: f64, t: f64) -> f64 {
    ustar * (4.0 * eta * ustar * t + (u0 / ustar).atanh()).tanh()
}

/// Minimizer of the sign-constrained restricted problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedSolution {
    pub beta: Vec<f64>,
    /// Members of the active set that ended at zero.
    pub zeroed: Vec<usize>,
    /// Whether the clamping pass failed its optimality check and the
    /// non-negative least-squares solver was used instead.
    pub used_nnls: bool,
}

fn restricted_ols(gram: &Mat, xy: &Vector, set: &[usize]) -> Result<Vec<f64>> {
    let k = set.len();
    let a = Mat::from_fn(k, k, |r, c| gram[(set[r], set[c])]);
    let b = Vector::from_fn(k, |r, _| xy[set[r]]);
    let chol = a.cholesky().ok_or_else(|| AgfError::Singular(set.to_vec()))?;
    Ok(chol.solve(&b).iter().copied().collect())
}

/// min ℒ(β) subject to βᵢ = 0 off `active` and signᵢ·βᵢ ≥ 0 on it.
///
/// Solves the unrestricted problem on the active set and repeatedly clamps the
/// most violated coordinate to zero. The result is checked against the
/// optimality conditions and recomputed by Lawson-Hanson if the check fails.
pub fn constrained_cost_min(prob: &DlnProblem, active: &[usize], signs: &[f64]) -> Result<ConstrainedSolution> {
    let d = prob.d();
    let gram = prob.gram();
    let xy = prob.xy();
    let mut set: Vec<(usize, f64)> = active.iter().copied().zip(signs.iter().copied()).collect();
    let mut beta = vec![0.0; d];
    loop {
        beta.iter_mut().for_each(|b| *b = 0.0);
        if set.is_empty() {
            break;
        }
        let idx: Vec<usize> = set.iter().map(|s| s.0).collect();
        let sol = restricted_ols(&gram, &xy, &idx)?;
        let mut worst: Option<(usize, f64)> = None;
        for (k, (&(_, sg), &b)) in set.iter().zip(&sol).enumerate() {
            let v = sg * b;
            if v < 0.0 && worst.map_or(true, |(_, w)| v < w) {
                worst = Some((k, v));
            }
        }
        match worst {
            Some((k, _)) => {
                set.remove(k);
            }
            None => {
                for (&(i, _), &b) in set.iter().zip(&sol) {
                    beta[i] = b;
                }
                break;
            }
        }
    }
    let scale = xy.amax().max(f64::MIN_POSITIVE);
    if kkt_residual(prob, active, signs, &beta) <= 1e-9 * scale {
        let zeroed = active.iter().copied().filter(|&i| beta[i] == 0.0).collect();
        return Ok(ConstrainedSolution { beta, zeroed, used_nnls: false });
    }
    let beta = signed_nnls(&gram, &xy, active, signs, d)?;
    let zeroed = active.iter().copied().filter(|&i| beta[i] == 0.0).collect();
    Ok(ConstrainedSolution { beta, zeroed, used_nnls: true })
}

/// Largest violation of the optimality conditions of the constrained problem:
/// on active coordinates either sign·β > 0 with ∇ℒ = 0, or β = 0 with sign·∇ℒ ≥ 0;
/// off the active set β = 0.
pub fn kkt_residual(prob: &DlnProblem, active: &[usize], signs: &[f64], beta: &[f64]) -> f64 {
    let g = prob.grad(beta);
    let mut worst = 0.0f64;
    for (i, b) in beta.iter().enumerate() {
        match active.iter().position(|&a| a == i) {
            None => worst = worst.max(b.abs()),
            Some(k) => {
                let sg = signs[k];
                worst = worst.max((-sg * b).max(0.0));
                if sg * b > 0.0 {
                    worst = worst.max(g[i].abs());
                } else {
                    worst = worst.max((-sg * g[i]).max(0.0));
                }
            }
        }
    }
    worst
}

/// Lawson-Hanson on z = sign∘β ≥ 0 for the quadratic ½zᵀQz − bᵀz.
fn signed_nnls(gram: &Mat, xy: &Vector, active: &[usize], signs: &[f64], d: usize) -> Result<Vec<f64>> {
    let k = active.len();
    let q = Mat::from_fn(k, k, |r, c| signs[r] * signs[c] * gram[(active[r], active[c])]);
    let b = Vector::from_fn(k, |r, _| signs[r] * xy[active[r]]);
    let tol = 1e-12 * b.amax().max(f64::MIN_POSITIVE);
    let mut z = Vector::zeros(k);
    let mut passive = vec![false; k];
    for _ in 0..(10 * k + 10) {
        let w = &b - &q * &z;
        let pick = (0..k).filter(|&j| !passive[j] && w[j] > tol).max_by(|&a, &c| w[a].total_cmp(&w[c]));
        let Some(j) = pick else {
            break;
        };
        passive[j] = true;
        loop {
            let set: Vec<usize> = (0..k).filter(|&i| passive[i]).collect();
            let s_set = restricted_ols(&q, &b, &set)?;
            let mut s = Vector::zeros(k);
            for (&i, &v) in set.iter().zip(&s_set) {
                s[i] = v;
            }
            if set.iter().all(|&i| s[i] > 0.0) {
                z = s;
                break;
            }
            let mut step = 1.0f64;
            for &i in &set {
                if s[i] <= 0.0 {
                    step = step.min(z[i] / (z[i] - s[i]));
                }
            }
            z += (s - &z) * step;
            for &i in &set {
                if z[i] <= tol {
                    z[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
    }
    let mut beta = vec![0.0; d];
    for (r, &i) in active.iter().enumerate() {
        beta[i] = signs[r] * z[r];
    }
    Ok(beta)
}

/// Saddle sequence: jump times and the β reached after each jump (`betas[0] = 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleSequence {
    pub times: Vec<f64>,
    pub betas: Vec<Vec<f64>>,
}

impl SaddleSequence {
    /// (index, sign) of the nonzero coordinates of each saddle.
    pub fn supports(&self, tol: f64) -> Vec<Vec<(usize, i8)>> {
        self.betas
            .iter()
            .map(|b| {
                b.iter()
                    .enumerate()
                    .filter(|(_, v)| v.abs() > tol)
                    .map(|(i, v)| (i, if *v > 0.0 { 1 } else { -1 }))
                    .collect()
            })
            .collect()
    }

    /// β at each saddle from the snapshots of a DLN trace (β = uv).
    pub fn from_trace(trace: &AgfTrace, d: usize) -> Self {
        let mut betas = vec![vec![0.0; d]];
        for snap in &trace.snapshots {
            let mut b = vec![0.0; d];
            for (&i, th) in snap.active.iter().zip(&snap.params) {
                b[i] = th[0] * th[1];
            }
            betas.push(b);
        }
        Self { times: trace.snapshots.iter().map(|s| s.tau).collect(), betas }
    }
}

/// The α → 0 limit: 𝒮 moves linearly with slope −∇ℒ, the first zero coordinate to
/// reach |𝒮| = 1 joins, and β solves the problem constrained to sign(𝒮) on
/// {|𝒮| = 1} and zero elsewhere.
pub fn pesme_algorithm(prob: &DlnProblem) -> Result<SaddleSequence> {
    let d = prob.d();
    let mut s = vec![0.0; d];
    let mut beta = vec![0.0; d];
    let mut t = 0.0;
    let mut seq = SaddleSequence { times: vec![], betas: vec![beta.clone()] };
    let gscale = prob.xy().amax().max(f64::MIN_POSITIVE);
    for _ in 0..(20 * d + 20) {
        let g = prob.grad(&beta);
        let mut best: Option<(usize, f64)> = None;
        for i in 0..d {
            if beta[i] != 0.0 || g[i].abs() <= 1e-12 * gscale {
                continue;
            }
            let dt = ((1.0 + g[i].signum() * s[i]) / g[i].abs()).max(0.0);
            if best.map_or(true, |(_, b)| dt < b) {
                best = Some((i, dt));
            }
        }
        let Some((win, dt)) = best else {
            break;
        };
        t += dt;
        for i in 0..d {
            s[i] -= dt * g[i];
            if (s[i].abs() - 1.0).abs() <= 1e-9 {
                s[i] = s[i].signum();
            }
        }
        s[win] = -g[win].signum();
        let (set, signs): (Vec<usize>, Vec<f64>) = (0..d).filter(|&i| s[i].abs() == 1.0).map(|i| (i, s[i])).unzip();
        beta = constrained_cost_min(prob, &set, &signs)?.beta;
        seq.times.push(t);
        seq.betas.push(beta.clone());
    }
    Ok(seq)
}

/// (u, v) with u² − v² = 2α² and uv = β.
pub fn uv_from_beta(beta: f64, alpha: f64) -> [f64; 2] {
    let a2 = alpha * alpha;
    let u = (a2 + (a2 * a2 + beta * beta).sqrt()).sqrt();
    [u, beta / u]
}

/// AGF in closed form: no ODE integration. Snapshots hold (u, v) of the active
/// coordinates after each cost phase.
pub fn agf_dln_sequence(prob: &DlnProblem) -> Result<AgfTrace> {
    if !(prob.alpha > 0.0 && prob.alpha <= 0.1) {
        return Err(AgfError::Invalid(format!("alpha must lie in (0, 0.1], got {}", prob.alpha)));
    }
    let d = prob.d();
    let eta = prob.eta();
    let mut coords = vec![DlnCoord { s: 0.0, rho: 0.0, active: false }; d];
    let mut beta = vec![0.0; d];
    let loss0 = prob.loss(&beta);
    let theta0 = 2f64.sqrt() * prob.alpha;
    let mut trace = AgfTrace {
        events: vec![],
        snapshots: vec![],
        config: EngineConfig::new(prob.alpha, 0),
        eta,
        loss0,
        init_max_norm: theta0,
    };
    let dormant_max = |coords: &[DlnCoord]| {
        coords.iter().filter(|c| !c.active).map(|c| theta0 * (eta * c.s).exp()).fold(0.0, f64::max)
    };
    let mut tau = 0.0;
    let gscale = prob.xy().amax().max(f64::MIN_POSITIVE);
    while trace.events.len() < trace.config.max_events {
        let mut g = prob.grad(&beta);
        g.iter_mut().for_each(|v| {
            if v.abs() <= 1e-12 * gscale {
                *v = 0.0
            }
        });
        let (win, dt) = match next_activation(&coords, &g, eta) {
            Ok(x) => x,
            Err(AgfError::AllZeroGrad) => break,
            Err(e) => return Err(e),
        };
        tau += dt;
        for (i, c) in coords.iter_mut().enumerate() {
            if c.active || g[i] == 0.0 {
                continue;
            }
            let rho = sign_update(c.rho, c.s, g[i], eta, dt);
            c.s = closed_form_s(c.s, g[i].abs() / 2.0, zeta(c.rho, g[i]), eta, dt);
            c.rho = rho;
        }
        coords[win].s = 1.0;
        coords[win].rho = -g[win].signum();
        coords[win].active = true;
        let (active, signs): (Vec<usize>, Vec<f64>) =
            coords.iter().enumerate().filter(|(_, c)| c.active).map(|(i, c)| (i, c.rho)).unzip();
        let sol = constrained_cost_min(prob, &active, &signs)?;
        beta = sol.beta;
        let loss = prob.loss(&beta);
        for &z in &sol.zeroed {
            coords[z].active = false;
        }
        let mu = dormant_max(&coords);
        trace.events.push(AgfEvent {
            kind: EventKind::Activation,
            neuron: win,
            tau,
            loss_after: loss,
            group: vec![win],
            max_dormant_norm: mu,
        });
        for &z in &sol.zeroed {
            trace.events.push(AgfEvent {
                kind: EventKind::Collapse,
                neuron: z,
                tau,
                loss_after: loss,
                group: vec![],
                max_dormant_norm: mu,
            });
        }
        let act: Vec<usize> = (0..d).filter(|&i| coords[i].active).collect();
        let params = act.iter().map(|&i| uv_from_beta(beta[i], prob.alpha).to_vec()).collect();
        trace.snapshots.push(Snapshot { tau, active: act, params });
    }
    trace.events.push(AgfEvent {
        kind: EventKind::Termination,
        neuron: usize::MAX,
        tau,
        loss_after: prob.loss(&beta),
        group: vec![],
        max_dormant_norm: dormant_max(&coords),
    });
    Ok(trace)
}

fn support_label(beta: &[f64]) -> String {
    let parts: Vec<String> = beta
        .iter()
        .enumerate()
        .filter(|(_, b)| b.abs() > 1e-12)
        .map(|(i, b)| format!("{}{i}", if *b > 0.0 { '+' } else { '-' }))
        .collect();
    format!("support={}", parts.join(","))
}

/// Limiting sequence as predicted steps: loss after each jump and its time.
pub fn dln_sequence(prob: &DlnProblem) -> Result<PredictedSequence> {
    let seq = pesme_algorithm(prob)?;
    let steps = seq
        .betas
        .iter()
        .enumerate()
        .map(|(k, b)| PredictedStep {
            k,
            loss: prob.loss(b),
            tau: if k == 0 { None } else { Some(seq.times[k - 1]) },
            tau_lower_bound: None,
            feature: support_label(b),
            value: b.iter().map(|v| v.abs()).sum(),
        })
        .collect();
    Ok(PredictedSequence { model: "dln".into(), steps, flags: vec![] })
}

fn betas_of(active: &[usize], params: &[f64], d: usize) -> Vec<f64> {
    let mut beta = vec![0.0; d];
    for (k, &i) in active.iter().enumerate() {
        beta[i] = params[2 * k] * params[2 * k + 1];
    }
    beta
}

impl ModelContract for DlnProblem {
    /// ∇ℒ at the active β.
    type Residual = Vec<f64>;

    fn kappa(&self) -> u32 {
        2
    }
    fn num_neurons(&self) -> usize {
        self.d()
    }
    fn param_dim(&self) -> usize {
        2
    }
    fn init_norm_scale(&self) -> f64 {
        2f64.sqrt()
    }
    /// Deterministic (√2α, 0) for every coordinate.
    fn init_params(&self, alpha: f64, _seed: u64) -> Vec<Vec<f64>> {
        vec![vec![2f64.sqrt() * alpha, 0.0]; self.d()]
    }
    fn imbalance(&self, theta: &[f64]) -> f64 {
        theta[0] * theta[0] - theta[1] * theta[1]
    }
    fn residual(&self, active: &[usize], params: &[f64]) -> Vec<f64> {
        self.grad(&betas_of(active, params, self.d()))
    }
    fn utility(&self, i: usize, theta: &[f64], r: &Vec<f64>) -> f64 {
        dln_utility(theta, r[i])
    }
    fn utility_grad(&self, i: usize, theta: &[f64], r: &Vec<f64>, grad: &mut [f64]) -> f64 {
        grad[0] = -theta[1] * r[i];
        grad[1] = -theta[0] * r[i];
        dln_utility(theta, r[i])
    }
    fn max_utility(&self, r: &Vec<f64>) -> Option<f64> {
        Some(r.iter().fold(0.0f64, |m, g| m.max(g.abs())) / 2.0)
    }
    fn active_loss(&self, active: &[usize], params: &[f64]) -> f64 {
        self.loss(&betas_of(active, params, self.d()))
    }
    fn active_grad(&self, active: &[usize], params: &[f64], grad: &mut [f64]) -> f64 {
        let beta = betas_of(active, params, self.d());
        let g = self.grad(&beta);
        for (k, &i) in active.iter().enumerate() {
            grad[2 * k] = params[2 * k + 1] * g[i];
            grad[2 * k + 1] = params[2 * k] * g[i];
        }
        self.loss(&beta)
    }
    /// A collapsed coordinate keeps its sign and re-enters at the threshold, on
    /// the unit-norm point of the conserved hyperbola u² − v² = 2α².
    fn on_collapse(&self, st: &mut NeuronState, eta: f64) {
        let rho = if st.dir[0] * st.dir[1] >= 0.0 { 1.0 } else { -1.0 };
        let a2 = st.theta0_norm * st.theta0_norm / 2.0;
        let u = ((1.0 + 2.0 * a2) / 2.0).sqrt();
        let v = rho * ((1.0 - 2.0 * a2) / 2.0).sqrt();
        let n = (u * u + v * v).sqrt();
        st.dir = vec![u / n, v / n];
        st.s_acc = st.c_thresh / eta;
        st.norm = 1.0;
        st.theta = st.dir.clone();
    }
}

impl Observe for DlnProblem {
    /// `beta_i` = uᵢvᵢ per coordinate.
    fn observable_names(&self) -> Vec<String> {
        (0..self.d()).map(|i| format!("beta_{i}")).collect()
    }
    fn observables(&self, params: &[f64]) -> Vec<f64> {
        params.chunks(2).map(|t| t[0] * t[1]).collect()
    }
}
