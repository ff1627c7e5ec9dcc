//! Second-order Runge-Kutta-Chebyshev integration for stiff problems whose
//! Jacobian has a (nearly) real, non-positive spectrum, such as gradient flows.
//!
//! An s-stage step is stable for h·ρ ≤ ~0.65 s², so the step size is set by
//! accuracy rather than by the largest Hessian eigenvalue ρ. ρ is estimated by
//! a warm-started nonlinear power iteration on the field.

use crate::error::{AgfError, Result};

use super::ode::{DriveStats, Flow, StepControl, System};

const DAMPING: f64 = 2.0 / 13.0;
const MAX_STAGES: usize = 400;
const RHO_REFRESH: usize = 25;

/// Recurrence coefficients μ, ν, μ̃, γ̃ for stages 1..=s (index 0 unused).
struct Coeffs {
    mu: Vec<f64>,
    nu: Vec<f64>,
    mt: Vec<f64>,
    gt: Vec<f64>,
}

fn coeffs(s: usize) -> Coeffs {
    let w0 = 1.0 + DAMPING / (s * s) as f64;
    let mut t = vec![0.0; s + 1];
    let mut d1 = vec![0.0; s + 1];
    let mut d2 = vec![0.0; s + 1];
    t[0] = 1.0;
    t[1] = w0;
    d1[1] = 1.0;
    for j in 2..=s {
        t[j] = 2.0 * w0 * t[j - 1] - t[j - 2];
        d1[j] = 2.0 * t[j - 1] + 2.0 * w0 * d1[j - 1] - d1[j - 2];
        d2[j] = 4.0 * d1[j - 1] + 2.0 * w0 * d2[j - 1] - d2[j - 2];
    }
    let w1 = d1[s] / d2[s];
    let mut b = vec![0.0; s + 1];
    for j in 2..=s {
        b[j] = d2[j] / (d1[j] * d1[j]);
    }
    b[0] = b[2];
    b[1] = b[2];
    let a: Vec<f64> = (0..=s).map(|j| 1.0 - b[j] * t[j]).collect();
    let mut c = Coeffs { mu: vec![0.0; s + 1], nu: vec![0.0; s + 1], mt: vec![0.0; s + 1], gt: vec![0.0; s + 1] };
    c.mt[1] = b[1] * w1;
    for j in 2..=s {
        c.mu[j] = 2.0 * b[j] * w0 / b[j - 1];
        c.nu[j] = -b[j] / b[j - 2];
        c.mt[j] = 2.0 * b[j] * w1 / b[j - 1];
        c.gt[j] = -a[j - 1] * c.mt[j];
    }
    c
}

/// Fewest stages whose stability interval covers h·ρ.
pub fn stages_for(h: f64, rho: f64) -> usize {
    (1 + (1.0 + 1.54 * h * rho).sqrt() as usize).clamp(2, MAX_STAGES)
}

/// Largest h the maximum stage count can stabilize.
fn max_stable_step(rho: f64) -> f64 {
    ((MAX_STAGES * MAX_STAGES) as f64 - 1.0) / (1.54 * rho.max(f64::MIN_POSITIVE))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scratch state for RKC stepping.
pub(crate) struct Rkc {
    f0: Vec<f64>,
    fj: Vec<f64>,
    y1: Vec<f64>,
    y2: Vec<f64>,
    yj: Vec<f64>,
    /// Warm-start direction for the power iteration.
    dir: Vec<f64>,
    cache: Option<(usize, Coeffs)>,
    pub(crate) evals: usize,
}

impl Rkc {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            f0: vec![0.0; n],
            fj: vec![0.0; n],
            y1: vec![0.0; n],
            y2: vec![0.0; n],
            yj: vec![0.0; n],
            dir: vec![0.0; n],
            cache: None,
            evals: 0,
        }
    }

    fn eval<S: System>(&mut self, sys: &mut S, y: &[f64], out_f0: bool, t: f64) -> Result<()> {
        let dst = if out_f0 { &mut self.f0 } else { &mut self.fj };
        sys.eval(y, dst);
        self.evals += 1;
        if dst.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(AgfError::NonFinite { t })
        }
    }

    /// Estimates the spectral radius of the Jacobian at y, with f0 = f(y).
    pub(crate) fn spectral_radius<S: System>(&mut self, sys: &mut S, y: &[f64], t: f64) -> Result<f64> {
        let n = y.len();
        if n == 0 {
            return Ok(0.0);
        }
        let ynorm = norm(y);
        let delta = if ynorm > 0.0 { ynorm * 1e-7 } else { 1e-7 };
        if norm(&self.dir) == 0.0 {
            self.dir.copy_from_slice(&self.f0);
            if norm(&self.dir) == 0.0 {
                for (i, d) in self.dir.iter_mut().enumerate() {
                    *d = if i % 2 == 0 { 1.0 } else { -0.5 };
                }
            }
        }
        let mut rho = 0.0;
        for it in 0..30 {
            let dn = norm(&self.dir);
            for i in 0..n {
                self.yj[i] = y[i] + self.dir[i] * delta / dn;
            }
            let yv = std::mem::take(&mut self.yj);
            let r = self.eval(sys, &yv, false, t);
            self.yj = yv;
            r?;
            for i in 0..n {
                self.dir[i] = self.fj[i] - self.f0[i];
            }
            let est = norm(&self.dir) / delta;
            if est == 0.0 {
                self.dir.iter_mut().enumerate().for_each(|(i, d)| *d = ((i * 7 + 3) % 11) as f64 - 5.0);
                continue;
            }
            if it >= 2 && (est - rho).abs() <= 0.01 * est.max(rho) {
                rho = est;
                break;
            }
            rho = est;
        }
        Ok(1.2 * rho)
    }

    /// One s-stage step from (y, f0 = f(y)) into `out`.
    pub(crate) fn step<S: System>(&mut self, sys: &mut S, t: f64, y: &[f64], h: f64, s: usize, out: &mut [f64]) -> Result<()> {
        let n = y.len();
        if self.cache.as_ref().map(|c| c.0) != Some(s) {
            self.cache = Some((s, coeffs(s)));
        }
        let (_, c) = self.cache.take().expect("set above");
        self.y2.copy_from_slice(y);
        for i in 0..n {
            self.y1[i] = y[i] + c.mt[1] * h * self.f0[i];
        }
        for j in 2..=s {
            let y1 = std::mem::take(&mut self.y1);
            let r = self.eval(sys, &y1, false, t);
            self.y1 = y1;
            if let Err(e) = r {
                self.cache = Some((s, c));
                return Err(e);
            }
            let k = 1.0 - c.mu[j] - c.nu[j];
            for i in 0..n {
                self.yj[i] = k * y[i]
                    + c.mu[j] * self.y1[i]
                    + c.nu[j] * self.y2[i]
                    + c.mt[j] * h * self.fj[i]
                    + c.gt[j] * h * self.f0[i];
            }
            std::mem::swap(&mut self.y2, &mut self.y1);
            std::mem::swap(&mut self.y1, &mut self.yj);
        }
        out.copy_from_slice(&self.y1);
        self.cache = Some((s, c));
        Ok(())
    }

    /// Untimed single step with a fresh ρ estimate, for event refinement.
    pub(crate) fn single<S: System>(&mut self, sys: &mut S, t: f64, y: &[f64], h: f64, out: &mut [f64]) -> Result<()> {
        let mut cur = y.to_vec();
        self.eval(sys, &cur, true, t)?;
        let rho = self.spectral_radius(sys, &cur, t)?;
        // Split if h exceeds what the largest stage count can stabilize.
        let hmax = max_stable_step(rho);
        let mut rest = h;
        loop {
            let hs = rest.min(hmax);
            self.step(sys, t, &cur, hs, stages_for(hs, rho), out)?;
            rest -= hs;
            if rest <= 0.0 {
                break;
            }
            cur.copy_from_slice(out);
            self.eval(sys, &cur, true, t)?;
        }
        sys.project(out);
        Ok(())
    }
}

/// Adaptive RKC integration loop used by [`super::ode::drive`].
pub(crate) fn drive_rkc<S, O>(
    sys: &mut S,
    y: &mut Vec<f64>,
    t0: f64,
    t_end: f64,
    ctrl: &StepControl,
    h_init: f64,
    stats: &mut DriveStats,
    mut observer: O,
) -> Result<f64>
where
    S: System,
    O: FnMut(f64, &[f64]) -> Flow,
{
    let n = y.len();
    let span = t_end - t0;
    let mut r = Rkc::new(n);
    let y0 = y.clone();
    r.eval(sys, &y0, true, t0)?;
    let mut rho = r.spectral_radius(sys, y, t0)?;
    let mut since_rho = 0;
    let mut t = t0;
    let mut h = h_init.min(max_stable_step(rho));
    let mut ynew = vec![0.0; n];
    let mut fnew = vec![0.0; n];
    let mut moved = vec![0.0; n];
    while t < t_end {
        if stats.accepted + stats.rejected >= ctrl.max_steps {
            return Err(AgfError::StepBudget(ctrl.max_steps));
        }
        if since_rho >= RHO_REFRESH {
            rho = r.spectral_radius(sys, y, t)?;
            since_rho = 0;
        }
        h = h.min(max_stable_step(rho)).min(ctrl.dt_max);
        let last = t + h >= t_end;
        let hs = if last { t_end - t } else { h };
        let s = stages_for(hs, rho);
        r.step(sys, t, y, hs, s, &mut ynew)?;
        sys.eval(&ynew, &mut fnew);
        r.evals += 1;
        if !fnew.iter().all(|v| v.is_finite()) {
            return Err(AgfError::NonFinite { t: t + hs });
        }
        let mut acc = 0.0;
        for i in 0..n {
            let e = (12.0 * (y[i] - ynew[i]) + 6.0 * hs * (r.f0[i] + fnew[i])) / 15.0;
            let sc = ctrl.atol + ctrl.rtol * y[i].abs().max(ynew[i].abs());
            acc += (e / sc).powi(2);
        }
        let err = (acc / n.max(1) as f64).sqrt();
        let fac = if err == 0.0 { 10.0 } else { (0.8 * err.powf(-1.0 / 3.0)).clamp(0.1, 10.0) };
        if err <= 1.0 {
            t = if last { t_end } else { t + hs };
            std::mem::swap(y, &mut ynew);
            moved.copy_from_slice(y);
            sys.project(&mut moved);
            if moved != *y {
                y.copy_from_slice(&moved);
                let yv = y.clone();
                r.eval(sys, &yv, true, t)?;
            } else {
                r.f0.copy_from_slice(&fnew);
            }
            stats.accepted += 1;
            since_rho += 1;
            h = (hs * fac).min(ctrl.dt_max);
            if last {
                h = h.max(hs);
            }
            if observer(t, y) == Flow::Stop {
                break;
            }
        } else {
            stats.rejected += 1;
            h = hs * fac.min(1.0);
            if since_rho > 0 {
                rho = r.spectral_radius(sys, y, t)?;
                since_rho = 0;
            }
            if h < 1e-14 * span {
                return Err(AgfError::StepUnderflow { t, dt: h });
            }
        }
    }
    stats.evals += r.evals;
    Ok(t)
}
