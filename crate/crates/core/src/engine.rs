//! The generic AGF loop: utility maximization over dormant neurons until one
//! crosses its activation threshold, then loss minimization over the active set.
//!
//! Time inside a utility phase is accelerated time τ. Each dormant neuron carries
//! a unit direction θ̄ and an accumulated utility 𝒮 with dθ̄/dτ = η‖θ‖^(κ−2)P⊥∇𝒰(θ̄)
//! and d𝒮/dτ = κ𝒰(θ̄); its norm is recovered from η𝒮 and it activates when
//! 𝒮 reaches c/η, i.e. when the reconstructed norm reaches 1.

use serde::{Deserialize, Serialize};

use crate::error::{AgfError, Result};
use crate::numerics::ode::{drive, integrate_until_events, Crossing, Flow, StepControl, System};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Dormant,
    Active,
}

/// One neuron's full state as tracked by the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronState {
    pub index: usize,
    pub theta: Vec<f64>,
    pub norm: f64,
    pub dir: Vec<f64>,
    pub s_acc: f64,
    pub c_thresh: f64,
    pub status: Status,
    pub theta0_norm: f64,
    pub imbalance: f64,
}

impl NeuronState {
    /// Builds a dormant neuron from its initial parameters.
    pub fn from_init(index: usize, theta: Vec<f64>, kappa: u32, imbalance: f64) -> Result<Self> {
        let norm = l2(&theta);
        let c_thresh = threshold_constant(norm, kappa)?;
        let dir = theta.iter().map(|v| v / norm).collect();
        Ok(Self {
            index,
            theta,
            norm,
            dir,
            s_acc: 0.0,
            c_thresh,
            status: Status::Dormant,
            theta0_norm: norm,
            imbalance,
        })
    }

    fn set_theta(&mut self, theta: &[f64]) {
        self.theta.copy_from_slice(theta);
        self.norm = l2(theta);
        if self.norm > 0.0 {
            for (d, t) in self.dir.iter_mut().zip(theta) {
                *d = t / self.norm;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub dormant: Vec<usize>,
    pub active: Vec<usize>,
}

impl Partition {
    pub fn of(states: &[NeuronState]) -> Self {
        let mut p = Self { dormant: vec![], active: vec![] };
        for s in states {
            match s.status {
                Status::Dormant => p.dormant.push(s.index),
                Status::Active => p.active.push(s.index),
            }
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Activation,
    Collapse,
    Termination,
}

/// A saddle event. Collapses are stamped with the τ of the activation whose
/// cost phase produced them; `group` lists every neuron activated together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgfEvent {
    pub kind: EventKind,
    pub neuron: usize,
    pub tau: f64,
    pub loss_after: f64,
    #[serde(default)]
    pub group: Vec<usize>,
    /// Largest norm among neurons still dormant right after the event.
    #[serde(default)]
    pub max_dormant_norm: f64,
}

/// Active parameters right after an event's cost phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub tau: f64,
    pub active: Vec<usize>,
    pub params: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub alpha: f64,
    pub seed: u64,
    /// Integrator for the utility phase (accelerated time).
    pub utility_ctrl: StepControl,
    /// Integrator for the cost phase (unit-rate time).
    pub cost_ctrl: StepControl,
    /// Longest utility phase before declaring a stall.
    pub t_max: f64,
    /// Longest cost phase before declaring non-convergence.
    pub cost_t_max: f64,
    /// Cost phase stops once ‖∇ℒ‖ < grad_tol_rel · ℒ(0).
    pub grad_tol_rel: f64,
    /// Collapse threshold as a multiple of α·init_norm_scale.
    pub collapse_factor: f64,
    /// Overrides the model's batch window (fraction of the winner's τ).
    pub batch_window: Option<f64>,
    /// A phase whose best achievable utility is below this fraction of the
    /// first phase's is treated as terminal.
    pub utility_floor_rel: f64,
    pub max_events: usize,
}

impl EngineConfig {
    pub fn new(alpha: f64, seed: u64) -> Self {
        Self {
            alpha,
            seed,
            utility_ctrl: StepControl::adaptive(1e-10, 1e-8),
            cost_ctrl: StepControl::adaptive(1e-12, 1e-10),
            t_max: 1e3,
            cost_t_max: 1e6,
            grad_tol_rel: 1e-9,
            collapse_factor: 10.0,
            batch_window: None,
            utility_floor_rel: 1e-8,
            max_events: 1000,
        }
    }
}

/// Ordered saddle events of one AGF run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgfTrace {
    pub events: Vec<AgfEvent>,
    pub snapshots: Vec<Snapshot>,
    pub config: EngineConfig,
    pub eta: f64,
    pub loss0: f64,
    /// Largest initial neuron norm.
    #[serde(default)]
    pub init_max_norm: f64,
}

impl AgfTrace {
    pub fn activations(&self) -> impl Iterator<Item = &AgfEvent> {
        self.events.iter().filter(|e| e.kind == EventKind::Activation)
    }

    /// Loss levels: ℓ(0) followed by the loss after each activation.
    pub fn plateaus(&self) -> Vec<f64> {
        std::iter::once(self.loss0).chain(self.activations().map(|e| e.loss_after)).collect()
    }

    pub fn jump_times(&self) -> Vec<f64> {
        self.activations().map(|e| e.tau).collect()
    }
}

/// What a model must provide for the engine to run AGF on it.
pub trait ModelContract {
    /// Opaque handle to the residual induced by the active neurons.
    type Residual;

    fn kappa(&self) -> u32;
    fn num_neurons(&self) -> usize;
    /// Length of one neuron's parameter vector.
    fn param_dim(&self) -> usize;
    /// Expected ‖θᵢ(0)‖ / α.
    fn init_norm_scale(&self) -> f64;
    /// Initial parameters for every neuron.
    fn init_params(&self, alpha: f64, seed: u64) -> Vec<Vec<f64>>;
    /// (κ−1)‖a‖² − ‖w‖² for this model's split of θ into output/input parts.
    fn imbalance(&self, theta: &[f64]) -> f64;

    fn residual(&self, active: &[usize], params: &[f64]) -> Self::Residual;
    fn utility(&self, i: usize, theta: &[f64], r: &Self::Residual) -> f64;
    /// Writes ∇θ𝒰 into `grad` and returns 𝒰.
    fn utility_grad(&self, i: usize, theta: &[f64], r: &Self::Residual, grad: &mut [f64]) -> f64;
    /// Upper bound on the normalized utility over the unit sphere, when known.
    fn max_utility(&self, _r: &Self::Residual) -> Option<f64> {
        None
    }

    /// Loss of the network made of the listed neurons with concatenated parameters.
    fn active_loss(&self, active: &[usize], params: &[f64]) -> f64;
    /// Writes ∇ℒ into `grad` and returns ℒ.
    fn active_grad(&self, active: &[usize], params: &[f64], grad: &mut [f64]) -> f64;

    fn batch_activation_window(&self) -> Option<f64> {
        None
    }
    /// Extra constraint maintenance on the dormant directions (index order).
    fn project_dormant(&self, _dirs: &mut [&mut [f64]]) {}
    /// Model-specific reset of a neuron that just collapsed.
    fn on_collapse(&self, _state: &mut NeuronState, _eta: f64) {}

    /// Dormant states from [`ModelContract::init_params`].
    fn init_sampler(&self, alpha: f64, seed: u64) -> Result<Vec<NeuronState>> {
        self.init_params(alpha, seed)
            .into_iter()
            .enumerate()
            .map(|(i, th)| {
                let imb = self.imbalance(&th);
                NeuronState::from_init(i, th, self.kappa(), imb)
            })
            .collect()
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// cᵢ such that the neuron reaches unit norm when η𝒮ᵢ = cᵢ.
pub fn threshold_constant(theta0_norm: f64, kappa: u32) -> Result<f64> {
    if !(theta0_norm > 0.0 && theta0_norm < 1.0) || kappa < 2 {
        return Err(AgfError::BadNorm(theta0_norm));
    }
    if kappa == 2 {
        Ok(-theta0_norm.ln())
    } else {
        let e = 2.0 - kappa as f64;
        Ok(-(theta0_norm.powf(e) - 1.0) / e)
    }
}

/// η_α: −log(scale·α) for κ = 2, 1/α for κ > 2.
pub fn accelerated_rate(alpha: f64, kappa: u32, model_scale: f64) -> f64 {
    if kappa == 2 {
        -(model_scale * alpha).ln()
    } else {
        1.0 / alpha
    }
}

/// ‖θ‖ after the neuron has accumulated log-growth `s` (= η𝒮).
pub fn reconstruct_norm(theta0_norm: f64, s: f64, kappa: u32) -> Result<f64> {
    if kappa == 2 {
        return Ok(theta0_norm * s.exp());
    }
    let e = 2.0 - kappa as f64;
    let base = theta0_norm.powf(e) + e * s;
    if base <= 0.0 {
        return Err(AgfError::Blowup(base));
    }
    Ok(base.powf(1.0 / e))
}

fn norm_rate(theta0_norm: f64, s: f64, kappa: u32) -> f64 {
    // ‖θ‖^(κ−2) without the Blowup error; trial stages may overshoot slightly.
    if kappa == 2 {
        return 1.0;
    }
    let e = 2.0 - kappa as f64;
    let base = (theta0_norm.powf(e) + e * s).max(1e-300);
    base.powf((kappa as f64 - 2.0) / e)
}

/// Outcome of one utility phase.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityOutcome {
    pub winner: usize,
    pub tau: f64,
    /// Winner plus any neuron activating together with it, ascending.
    pub group: Vec<usize>,
}

struct DormantFlow<'a, M: ModelContract> {
    model: &'a M,
    r: &'a M::Residual,
    idx: &'a [usize],
    theta0: Vec<f64>,
    eta: f64,
    kappa: u32,
    dim: usize,
    grad: Vec<f64>,
}

impl<M: ModelContract> System for DormantFlow<'_, M> {
    fn eval(&mut self, y: &[f64], dy: &mut [f64]) {
        let b = self.dim + 1;
        for (k, &i) in self.idx.iter().enumerate() {
            let dir = &y[k * b..k * b + self.dim];
            let s = y[k * b + self.dim];
            let u = self.model.utility_grad(i, dir, self.r, &mut self.grad);
            let along: f64 = self.grad.iter().zip(dir).map(|(g, d)| g * d).sum();
            let rate = self.eta * norm_rate(self.theta0[k], self.eta * s, self.kappa);
            for j in 0..self.dim {
                dy[k * b + j] = rate * (self.grad[j] - along * dir[j]);
            }
            dy[k * b + self.dim] = self.kappa as f64 * u;
        }
    }

    fn project(&mut self, y: &mut [f64]) {
        let b = self.dim + 1;
        let normalize = |y: &mut [f64]| {
            for blk in y.chunks_mut(b) {
                let n = l2(&blk[..b - 1]);
                if n > 0.0 {
                    blk[..b - 1].iter_mut().for_each(|v| *v /= n);
                }
            }
        };
        normalize(y);
        let mut dirs: Vec<&mut [f64]> = y.chunks_mut(b).map(|c| &mut c[..b - 1]).collect();
        self.model.project_dormant(&mut dirs);
        normalize(y);
    }
}

/// Integrates every dormant neuron's direction and accumulated utility under a
/// frozen residual until the first reaches its threshold. Updates the dormant
/// states in place; `tau0` is the accelerated time at phase start.
pub fn utility_phase<M: ModelContract>(
    states: &mut [NeuronState],
    residual: &M::Residual,
    model: &M,
    eta: f64,
    tau0: f64,
    cfg: &EngineConfig,
) -> Result<UtilityOutcome> {
    let idx: Vec<usize> = states.iter().filter(|s| s.status == Status::Dormant).map(|s| s.index).collect();
    if idx.is_empty() {
        return Err(AgfError::Stalled { t: tau0 });
    }
    let dim = model.param_dim();
    let kappa = model.kappa();
    let b = dim + 1;
    let mut y0 = Vec::with_capacity(idx.len() * b);
    for &i in &idx {
        y0.extend_from_slice(&states[i].dir);
        y0.push(states[i].s_acc);
    }
    let thresholds: Vec<f64> = idx.iter().map(|&i| states[i].c_thresh / eta).collect();
    let mut flow = DormantFlow {
        model,
        r: residual,
        idx: &idx,
        theta0: idx.iter().map(|&i| states[i].theta0_norm).collect(),
        eta,
        kappa,
        dim,
        grad: vec![0.0; dim],
    };
    flow.project(&mut y0);

    // A neuron already at its threshold with positive utility activates at once.
    let mut ready = None;
    for (k, &i) in idx.iter().enumerate() {
        let s = y0[k * b + dim];
        if s >= thresholds[k] && model.utility(i, &y0[k * b..k * b + dim], residual) > 0.0 {
            ready = Some(k);
            break;
        }
    }
    let (t_hit, y_hit, k_win) = if let Some(k) = ready {
        (tau0, y0, k)
    } else {
        let traj = integrate_until_events(
            &mut flow,
            &y0,
            tau0,
            tau0 + cfg.t_max,
            idx.len(),
            |y, g| {
                for k in 0..g.len() {
                    g[k] = y[k * b + dim] - thresholds[k];
                }
            },
            Crossing::Rising,
            &cfg.utility_ctrl,
            false,
        )
        .map_err(|e| match e {
            AgfError::NoEvent { t_max } => AgfError::Stalled { t: t_max },
            other => other,
        })?;
        let ev = traj.event.expect("event present on success");
        (ev.t, ev.state, ev.event_id)
    };

    for (k, &i) in idx.iter().enumerate() {
        let st = &mut states[i];
        st.dir.copy_from_slice(&y_hit[k * b..k * b + dim]);
        st.s_acc = y_hit[k * b + dim];
        st.norm = reconstruct_norm(st.theta0_norm, eta * st.s_acc.min(thresholds[k]), kappa)?;
        for (t, d) in st.theta.iter_mut().zip(&st.dir) {
            *t = d * st.norm;
        }
    }
    let winner = idx[k_win];
    let mut group = vec![winner];
    let window = cfg.batch_window.or_else(|| model.batch_activation_window());
    if let Some(w) = window {
        let horizon = w * t_hit;
        for (k, &i) in idx.iter().enumerate() {
            if i == winner {
                continue;
            }
            let u = model.utility(i, &states[i].dir, residual);
            if u > 0.0 {
                let remaining = (thresholds[k] - states[i].s_acc) / (kappa as f64 * u);
                if remaining <= horizon {
                    group.push(i);
                }
            }
        }
        group.sort_unstable();
    }
    Ok(UtilityOutcome { winner, tau: t_hit, group })
}

/// Result of a cost phase.
#[derive(Debug, Clone, PartialEq)]
pub struct CostOutcome {
    pub collapsed: Vec<usize>,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Gradient flow of the loss over the active neurons until ‖∇ℒ‖ < `grad_tol`.
/// Neurons whose norm drops below `eps_collapse` are returned to the dormant set.
pub fn cost_phase<M: ModelContract>(
    states: &mut [NeuronState],
    model: &M,
    eta: f64,
    grad_tol: f64,
    eps_collapse: f64,
    cfg: &EngineConfig,
) -> Result<CostOutcome> {
    let dim = model.param_dim();
    let mut collapsed = Vec::new();
    let mut t_used = 0.0;
    loop {
        let active: Vec<usize> = states.iter().filter(|s| s.status == Status::Active).map(|s| s.index).collect();
        let mut y0 = Vec::with_capacity(active.len() * dim);
        for &i in &active {
            y0.extend_from_slice(&states[i].theta);
        }
        let mut g = vec![0.0; y0.len()];
        let loss0 = model.active_grad(&active, &y0, &mut g);
        let gn0 = l2(&g);
        if active.is_empty() || gn0 < grad_tol {
            return Ok(CostOutcome { collapsed, loss: loss0, grad_norm: gn0 });
        }
        let mut field = |y: &[f64], dy: &mut [f64]| {
            model.active_grad(&active, y, dy);
            dy.iter_mut().for_each(|v| *v = -*v);
        };
        let mut gbuf = vec![0.0; y0.len()];
        let mut fell: Option<usize> = None;
        let mut done = false;
        let mut last_gn = gn0;
        let (t_end, y, _) = drive(&mut field, &y0, t_used, cfg.cost_t_max, &cfg.cost_ctrl, |_, y| {
            for (k, chunk) in y.chunks(dim).enumerate() {
                if l2(chunk) < eps_collapse {
                    fell = Some(k);
                    return Flow::Stop;
                }
            }
            model.active_grad(&active, y, &mut gbuf);
            last_gn = l2(&gbuf);
            if last_gn < grad_tol {
                done = true;
                return Flow::Stop;
            }
            Flow::Continue
        })?;
        t_used = t_end;
        for (k, &i) in active.iter().enumerate() {
            states[i].set_theta(&y[k * dim..(k + 1) * dim]);
        }
        if let Some(k) = fell {
            let st = &mut states[active[k]];
            st.status = Status::Dormant;
            st.norm = st.theta0_norm;
            for (t, d) in st.theta.iter_mut().zip(&st.dir) {
                *t = d * st.theta0_norm;
            }
            st.s_acc = 0.0;
            model.on_collapse(st, eta);
            collapsed.push(st.index);
            continue;
        }
        if done {
            let loss = model.active_loss(&active, &y);
            return Ok(CostOutcome { collapsed, loss, grad_norm: last_gn });
        }
        return Err(AgfError::NoConverge { t: t_end, grad_norm: last_gn });
    }
}

fn active_params(states: &[NeuronState]) -> (Vec<usize>, Vec<f64>) {
    let mut idx = Vec::new();
    let mut params = Vec::new();
    for s in states.iter().filter(|s| s.status == Status::Active) {
        idx.push(s.index);
        params.extend_from_slice(&s.theta);
    }
    (idx, params)
}

/// Runs AGF from the all-dormant initialization until no dormant neuron can
/// reach its threshold.
pub fn run<M: ModelContract>(model: &M, cfg: &EngineConfig) -> Result<AgfTrace> {
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(AgfError::Invalid(format!("alpha must lie in (0, 1), got {}", cfg.alpha)));
    }
    let kappa = model.kappa();
    let eta = accelerated_rate(cfg.alpha, kappa, model.init_norm_scale());
    let mut states = model.init_sampler(cfg.alpha, cfg.seed)?;
    run_from(model, cfg, eta, &mut states)
}

/// Runs AGF from caller-supplied states with a given η.
pub fn run_from<M: ModelContract>(
    model: &M,
    cfg: &EngineConfig,
    eta: f64,
    states: &mut [NeuronState],
) -> Result<AgfTrace> {
    let loss0 = model.active_loss(&[], &[]);
    let grad_tol = cfg.grad_tol_rel * loss0.max(f64::MIN_POSITIVE);
    let eps_collapse = cfg.collapse_factor * cfg.alpha * model.init_norm_scale();
    let mut trace = AgfTrace {
        events: vec![],
        snapshots: vec![],
        config: cfg.clone(),
        eta,
        loss0,
        init_max_norm: max_dormant_norm(states),
    };
    let mut tau = 0.0;
    let mut loss = loss0;
    let mut first_bound: Option<f64> = None;
    while trace.events.len() < cfg.max_events {
        let (act, params) = active_params(states);
        let r = model.residual(&act, &params);
        if let Some(bound) = model.max_utility(&r) {
            let reference = *first_bound.get_or_insert(bound);
            if bound <= cfg.utility_floor_rel * reference.max(f64::MIN_POSITIVE) {
                break;
            }
        }
        let outcome = match utility_phase(states, &r, model, eta, tau, cfg) {
            Ok(o) => o,
            Err(AgfError::Stalled { .. }) => break,
            Err(e) => return Err(e),
        };
        tau = outcome.tau;
        for &i in &outcome.group {
            states[i].status = Status::Active;
        }
        let cost = cost_phase(states, model, eta, grad_tol, eps_collapse, cfg)?;
        loss = cost.loss;
        trace.events.push(AgfEvent {
            kind: EventKind::Activation,
            neuron: outcome.winner,
            tau,
            loss_after: loss,
            group: outcome.group.clone(),
            max_dormant_norm: max_dormant_norm(states),
        });
        for &c in &cost.collapsed {
            trace.events.push(AgfEvent {
                kind: EventKind::Collapse,
                neuron: c,
                tau,
                loss_after: loss,
                group: vec![],
                max_dormant_norm: max_dormant_norm(states),
            });
        }
        let (act, params) = active_params(states);
        let dim = model.param_dim();
        trace.snapshots.push(Snapshot {
            tau,
            active: act,
            params: params.chunks(dim.max(1)).map(<[f64]>::to_vec).collect(),
        });
    }
    trace.events.push(AgfEvent {
        kind: EventKind::Termination,
        neuron: usize::MAX,
        tau,
        loss_after: loss,
        group: vec![],
        max_dormant_norm: max_dormant_norm(states),
    });
    Ok(trace)
}

fn max_dormant_norm(states: &[NeuronState]) -> f64 {
    states.iter().filter(|s| s.status == Status::Dormant).map(|s| s.norm).fold(0.0, f64::max)
}
