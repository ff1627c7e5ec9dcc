//! Explicit Runge-Kutta integration (fixed-step RK4, adaptive Dormand-Prince 5(4),
//! adaptive Runge-Kutta-Chebyshev for stiff gradient flows) with an optional
//! post-step projection and bisection-refined event location.

use serde::{Deserialize, Serialize};

use crate::error::{AgfError, Result};

use super::rkc::{drive_rkc, Rkc};

/// Right-hand side of an autonomous ODE, optionally with a manifold projection
/// applied after every accepted step.
pub trait System {
    fn eval(&mut self, y: &[f64], dy: &mut [f64]);
    fn project(&mut self, _y: &mut [f64]) {}
}

impl<F: FnMut(&[f64], &mut [f64])> System for F {
    fn eval(&mut self, y: &[f64], dy: &mut [f64]) {
        self(y, dy)
    }
}

/// A field paired with a projection closure.
pub struct Projected<F, P> {
    pub field: F,
    pub projection: P,
}

impl<F: FnMut(&[f64], &mut [f64]), P: FnMut(&mut [f64])> System for Projected<F, P> {
    fn eval(&mut self, y: &[f64], dy: &mut [f64]) {
        (self.field)(y, dy)
    }
    fn project(&mut self, y: &mut [f64]) {
        (self.projection)(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rk4,
    Rk45,
    Rkc,
}

/// Step-size policy. `dt` is the fixed step for RK4 and the initial step for
/// the adaptive methods (0 selects one automatically).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepControl {
    pub method: Method,
    pub atol: f64,
    pub rtol: f64,
    pub dt: f64,
    /// Unbounded when infinite (serialized as null).
    #[serde(with = "unbounded")]
    pub dt_max: f64,
    pub max_steps: usize,
}

mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl Default for StepControl {
    fn default() -> Self {
        Self::adaptive(1e-10, 1e-8)
    }
}

impl StepControl {
    pub fn adaptive(atol: f64, rtol: f64) -> Self {
        Self { method: Method::Rk45, atol, rtol, dt: 0.0, dt_max: f64::INFINITY, max_steps: 50_000_000 }
    }

    /// Adaptive Runge-Kutta-Chebyshev, for fields with a real non-positive spectrum.
    pub fn stiff(atol: f64, rtol: f64) -> Self {
        Self { method: Method::Rkc, ..Self::adaptive(atol, rtol) }
    }

    pub fn fixed(dt: f64) -> Self {
        Self { method: Method::Rk4, atol: 0.0, rtol: 0.0, dt, dt_max: dt, max_steps: 50_000_000 }
    }

    pub fn with_dt_max(mut self, dt_max: f64) -> Self {
        self.dt_max = dt_max;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t: f64,
    pub state: Vec<f64>,
    pub event_id: usize,
}

/// Accepted samples of an integration, plus the located event if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub event: Option<EventRecord>,
}

impl Trajectory {
    pub fn last_state(&self) -> &[f64] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn last_time(&self) -> f64 {
        self.times.last().copied().unwrap_or(f64::NAN)
    }
}

/// Returned by an observer after each accepted step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DriveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evals: usize,
}

/// Which sign changes of the event function count as a crossing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Crossing {
    Rising,
    Falling,
    Any,
}

// Dormand-Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Scratch buffers for one state dimension.
struct Stepper {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    evals: usize,
}

impl Stepper {
    fn new(n: usize) -> Self {
        Self { k: std::array::from_fn(|_| vec![0.0; n]), tmp: vec![0.0; n], evals: 0 }
    }

    fn eval<S: System>(&mut self, sys: &mut S, slot: usize, t: f64) -> Result<()> {
        let (y, k) = (&self.tmp, &mut self.k[slot]);
        sys.eval(y, k);
        self.evals += 1;
        if k.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(AgfError::NonFinite { t })
        }
    }

    fn stage(&mut self, y: &[f64], h: f64, coeffs: &[(usize, f64)]) {
        for (i, out) in self.tmp.iter_mut().enumerate() {
            let mut acc = 0.0;
            for &(s, c) in coeffs {
                acc += c * self.k[s][i];
            }
            *out = y[i] + h * acc;
        }
    }

    /// Classical RK4 step; k[0] must hold f(y).
    fn rk4<S: System>(&mut self, sys: &mut S, t: f64, y: &[f64], h: f64, out: &mut [f64]) -> Result<()> {
        self.stage(y, h, &[(0, 0.5)]);
        self.eval(sys, 1, t)?;
        self.stage(y, h, &[(1, 0.5)]);
        self.eval(sys, 2, t)?;
        self.stage(y, h, &[(2, 1.0)]);
        self.eval(sys, 3, t)?;
        for i in 0..y.len() {
            out[i] = y[i] + h / 6.0 * (self.k[0][i] + 2.0 * self.k[1][i] + 2.0 * self.k[2][i] + self.k[3][i]);
        }
        Ok(())
    }

    /// Dormand-Prince step; k[0] must hold f(y). Leaves f(out) in k[6] and
    /// returns the scaled error norm.
    fn dopri<S: System>(
        &mut self,
        sys: &mut S,
        t: f64,
        y: &[f64],
        h: f64,
        out: &mut [f64],
        atol: f64,
        rtol: f64,
    ) -> Result<f64> {
        self.stage(y, h, &[(0, A21)]);
        self.eval(sys, 1, t)?;
        self.stage(y, h, &[(0, A31), (1, A32)]);
        self.eval(sys, 2, t)?;
        self.stage(y, h, &[(0, A41), (1, A42), (2, A43)]);
        self.eval(sys, 3, t)?;
        self.stage(y, h, &[(0, A51), (1, A52), (2, A53), (3, A54)]);
        self.eval(sys, 4, t)?;
        self.stage(y, h, &[(0, A61), (1, A62), (2, A63), (3, A64), (4, A65)]);
        self.eval(sys, 5, t)?;
        self.stage(y, h, &[(0, B1), (2, B3), (3, B4), (4, B5), (5, B6)]);
        out.copy_from_slice(&self.tmp);
        self.eval(sys, 6, t)?;
        let mut acc = 0.0;
        for i in 0..y.len() {
            let e = h
                * (E1 * self.k[0][i]
                    + E3 * self.k[2][i]
                    + E4 * self.k[3][i]
                    + E5 * self.k[4][i]
                    + E6 * self.k[5][i]
                    + E7 * self.k[6][i]);
            let sc = atol + rtol * y[i].abs().max(out[i].abs());
            acc += (e / sc).powi(2);
        }
        Ok((acc / y.len().max(1) as f64).sqrt())
    }

    /// One untimed step used during event refinement.
    fn single<S: System>(&mut self, sys: &mut S, method: Method, t: f64, y: &[f64], h: f64, out: &mut [f64]) -> Result<()> {
        self.tmp.copy_from_slice(y);
        self.eval(sys, 0, t)?;
        match method {
            Method::Rk4 => self.rk4(sys, t, y, h, out)?,
            Method::Rk45 => {
                self.dopri(sys, t, y, h, out, 1.0, 1.0)?;
            }
            Method::Rkc => {
                let mut r = Rkc::new(y.len());
                r.single(sys, t, y, h, out)?;
                self.evals += r.evals;
                return Ok(());
            }
        }
        sys.project(out);
        Ok(())
    }
}

fn initial_step<S: System>(sys: &mut S, y: &[f64], f0: &[f64], ctrl: &StepControl, span: f64) -> f64 {
    let sc = |i: usize| ctrl.atol + ctrl.rtol * y[i].abs();
    let n = y.len().max(1) as f64;
    let d0 = (y.iter().enumerate().map(|(i, v)| (v / sc(i)).powi(2)).sum::<f64>() / n).sqrt();
    let d1 = (f0.iter().enumerate().map(|(i, v)| (v / sc(i)).powi(2)).sum::<f64>() / n).sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let y1: Vec<f64> = y.iter().zip(f0).map(|(a, b)| a + h0 * b).collect();
    let mut f1 = vec![0.0; y.len()];
    sys.eval(&y1, &mut f1);
    let d2 = (f1
        .iter()
        .zip(f0)
        .enumerate()
        .map(|(i, (a, b))| ((a - b) / sc(i)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
        / h0;
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    (100.0 * h0).min(h1).min(span).min(ctrl.dt_max)
}

/// Integrates from `t0` towards `t_end`, calling `observer(t, y)` after every
/// accepted (and projected) step. Returns the final time and state.
pub fn drive<S, O>(
    sys: &mut S,
    y0: &[f64],
    t0: f64,
    t_end: f64,
    ctrl: &StepControl,
    mut observer: O,
) -> Result<(f64, Vec<f64>, DriveStats)>
where
    S: System,
    O: FnMut(f64, &[f64]) -> Flow,
{
    let n = y0.len();
    let span = t_end - t0;
    let mut y = y0.to_vec();
    sys.project(&mut y);
    let mut stats = DriveStats::default();
    if span <= 0.0 {
        return Ok((t0, y, stats));
    }
    let mut st = Stepper::new(n);
    let mut ynew = vec![0.0; n];
    let mut moved = vec![0.0; n];
    st.tmp.copy_from_slice(&y);
    st.eval(sys, 0, t0)?;
    let mut t = t0;
    let mut h = match ctrl.method {
        Method::Rk4 => ctrl.dt,
        _ if ctrl.dt > 0.0 => ctrl.dt.min(span),
        _ => {
            let f0 = st.k[0].clone();
            initial_step(sys, &y, &f0, ctrl, span)
        }
    };
    if ctrl.method == Method::Rkc && h > 0.0 {
        stats.evals = st.evals;
        let t = drive_rkc(sys, &mut y, t0, t_end, ctrl, h, &mut stats, observer)?;
        return Ok((t, y, stats));
    }
    if !(h > 0.0) {
        return Err(AgfError::Invalid(format!("non-positive step {h}")));
    }
    while t < t_end {
        if stats.accepted + stats.rejected >= ctrl.max_steps {
            return Err(AgfError::StepBudget(ctrl.max_steps));
        }
        let last = t + h >= t_end;
        let hs = if last { t_end - t } else { h };
        match ctrl.method {
            Method::Rk4 => {
                st.rk4(sys, t, &y, hs, &mut ynew)?;
                t = if last { t_end } else { t + hs };
                std::mem::swap(&mut y, &mut ynew);
                sys.project(&mut y);
                st.tmp.copy_from_slice(&y);
                st.eval(sys, 0, t)?;
                stats.accepted += 1;
            }
            Method::Rkc => unreachable!("handled by drive_rkc"),
            Method::Rk45 => {
                let err = st.dopri(sys, t, &y, hs, &mut ynew, ctrl.atol, ctrl.rtol)?;
                let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                if err <= 1.0 {
                    t = if last { t_end } else { t + hs };
                    std::mem::swap(&mut y, &mut ynew);
                    stats.accepted += 1;
                    // FSAL: k[6] holds f at the new point unless projection moved it.
                    moved.copy_from_slice(&y);
                    sys.project(&mut moved);
                    if moved != y {
                        y.copy_from_slice(&moved);
                        st.tmp.copy_from_slice(&y);
                        st.eval(sys, 0, t)?;
                    } else {
                        st.k.swap(0, 6);
                    }
                    h = (hs * fac).min(ctrl.dt_max);
                    if last {
                        h = h.max(hs);
                    }
                } else {
                    stats.rejected += 1;
                    h = hs * fac.min(1.0);
                    if h < 1e-14 * span {
                        return Err(AgfError::StepUnderflow { t, dt: h });
                    }
                    continue;
                }
            }
        }
        if observer(t, &y) == Flow::Stop {
            break;
        }
    }
    stats.evals = st.evals;
    Ok((t, y, stats))
}

/// Integrates over `[t0, t_end]` recording every accepted step.
pub fn integrate<S: System>(sys: &mut S, y0: &[f64], t0: f64, t_end: f64, ctrl: &StepControl) -> Result<Trajectory> {
    let mut y_init = y0.to_vec();
    sys.project(&mut y_init);
    let mut times = vec![t0];
    let mut states = vec![y_init];
    drive(sys, y0, t0, t_end, ctrl, |t, y| {
        times.push(t);
        states.push(y.to_vec());
        Flow::Continue
    })?;
    Ok(Trajectory { times, states, event: None })
}

fn crossed(dir: Crossing, before: f64, after: f64) -> bool {
    match dir {
        Crossing::Rising => before < 0.0 && after >= 0.0,
        Crossing::Falling => before > 0.0 && after <= 0.0,
        Crossing::Any => (before < 0.0 && after >= 0.0) || (before > 0.0 && after <= 0.0),
    }
}

fn eval_events<E: FnMut(&[f64], &mut [f64])>(events: &mut E, y: &[f64], buf: &mut [f64]) -> (f64, usize) {
    events(y, buf);
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, &g) in buf.iter().enumerate() {
        if g > best.0 {
            best = (g, i);
        }
    }
    best
}

/// Integrates until the largest of `n_events` event functions crosses zero in
/// direction `dir`. The crossing is refined by bisection over a re-taken single
/// step until `|g| < 1e-10` or the time bracket is below `1e-12`; the returned
/// `event_id` is the component attaining the maximum (lowest index on ties).
pub fn integrate_until_events<S, E>(
    sys: &mut S,
    y0: &[f64],
    t0: f64,
    t_max: f64,
    n_events: usize,
    mut events: E,
    dir: Crossing,
    ctrl: &StepControl,
    record: bool,
) -> Result<Trajectory>
where
    S: System,
    E: FnMut(&[f64], &mut [f64]),
{
    let mut buf = vec![0.0; n_events.max(1)];
    let mut y_init = y0.to_vec();
    sys.project(&mut y_init);
    let (mut g_prev, _) = eval_events(&mut events, &y_init, &mut buf);
    let mut prev = (t0, y_init.clone());
    let mut times = vec![t0];
    let mut states = vec![y_init];
    let mut hit: Option<(f64, Vec<f64>)> = None;
    drive(sys, y0, t0, t_max, ctrl, |t, y| {
        let (g, _) = eval_events(&mut events, y, &mut buf);
        if crossed(dir, g_prev, g) {
            hit = Some((t, y.to_vec()));
            return Flow::Stop;
        }
        g_prev = g;
        prev = (t, y.to_vec());
        if record {
            times.push(t);
            states.push(y.to_vec());
        }
        Flow::Continue
    })?;
    let Some((t_hi, y_hi)) = hit else {
        return Err(AgfError::NoEvent { t_max });
    };
    let (t_lo, y_lo) = prev;
    let h = t_hi - t_lo;
    let mut st = Stepper::new(y_lo.len());
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut best_t = t_hi;
    let mut best_y = y_hi;
    let mut out = vec![0.0; y_lo.len()];
    let (g_hi, _) = eval_events(&mut events, &best_y, &mut buf);
    if g_hi.abs() >= 1e-10 {
        for _ in 0..200 {
            if h * (hi - lo) < 1e-12 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            st.single(sys, ctrl.method, t_lo, &y_lo, mid * h, &mut out)?;
            let (g, _) = eval_events(&mut events, &out, &mut buf);
            if crossed(dir, g_prev, g) {
                hi = mid;
                best_t = t_lo + mid * h;
                best_y.copy_from_slice(&out);
                if g.abs() < 1e-10 {
                    break;
                }
            } else {
                lo = mid;
            }
        }
    }
    let (_, id) = eval_events(&mut events, &best_y, &mut buf);
    times.push(best_t);
    states.push(best_y.clone());
    Ok(Trajectory { times, states, event: Some(EventRecord { t: best_t, state: best_y, event_id: id }) })
}

/// Scalar-event convenience wrapper around [`integrate_until_events`].
pub fn integrate_until_event<S, E>(
    sys: &mut S,
    y0: &[f64],
    t0: f64,
    t_max: f64,
    mut event: E,
    ctrl: &StepControl,
) -> Result<Trajectory>
where
    S: System,
    E: FnMut(&[f64]) -> f64,
{
    integrate_until_events(sys, y0, t0, t_max, 1, |y, g| g[0] = event(y), Crossing::Any, ctrl, true)
}
