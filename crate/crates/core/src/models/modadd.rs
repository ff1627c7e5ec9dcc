//! Quadratic two-layer network on modular addition with cyclic encoding (κ = 3).
//!
//! Neuron i has θᵢ = (uᵢ, vᵢ, wᵢ) ∈ R^{3p} and output fᵢ(a, b) = (⟨uᵢ, a·x⟩ + ⟨vᵢ, b·x⟩)² wᵢ,
//! where (a·x)[j] = x[j − a]. The loss is (1/2p²) Σ_{a,b} ‖Σᵢ fᵢ(a, b) − (a+b)·x‖² over the
//! full p² grid, with x mean-centered.
//!
//! Writing Pᵢ[a] = ⟨uᵢ, a·x⟩, Qᵢ[b] = ⟨vᵢ, b·x⟩ and Rᵢ[s] = ⟨wᵢ, s·x⟩, every grid sum
//! factors into O(p) sums per neuron pair, which is what the trainer uses. The
//! direct p²-grid evaluations are kept as the reference.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::engine::{l2, ModelContract};
use crate::gf::Observe;
use crate::error::{AgfError, Result};
use crate::numerics::dft::{dft, CVec, C64};
use crate::numerics::Mat;
use crate::rng::{gaussian, neuron_rng};
use crate::sequence::{PredictedSequence, PredictedStep};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModAddProblem {
    pub p: usize,
    /// Centered template.
    pub x: Vec<f64>,
    pub h: usize,
    pub alpha: f64,
    /// Group activation window as a fraction of the winner's τ.
    pub batch_window: Option<f64>,
    #[serde(skip)]
    xhat: CVec,
    /// xc[a·p + j] = x[(j − a) mod p].
    #[serde(skip)]
    xc: Vec<f64>,
    /// The same shifts as a matrix, and its transpose.
    #[serde(skip)]
    xcm: Mat,
    #[serde(skip)]
    xct: Mat,
}

/// Per-neuron correlation features.
#[derive(Debug, Clone)]
pub struct Feat {
    pub pp: Vec<f64>,
    pub qq: Vec<f64>,
    pub rr: Vec<f64>,
    pub w: Vec<f64>,
    sp: f64,
    sp2: f64,
    sq: f64,
    sq2: f64,
    sr: f64,
}

#[derive(Default)]
struct PairSums {
    a11: f64,
    a21: f64,
    a12: f64,
    a22: f64,
    b11: f64,
    b21: f64,
    b12: f64,
    b22: f64,
}

fn pair_sums(fi: &Feat, fj: &Feat) -> PairSums {
    let mut s = PairSums::default();
    for (&pi, &pj) in fi.pp.iter().zip(&fj.pp) {
        let (pi2, pj2) = (pi * pi, pj * pj);
        s.a11 += pi * pj;
        s.a21 += pi2 * pj;
        s.a12 += pi * pj2;
        s.a22 += pi2 * pj2;
    }
    for (&qi, &qj) in fi.qq.iter().zip(&fj.qq) {
        let (qi2, qj2) = (qi * qi, qj * qj);
        s.b11 += qi * qj;
        s.b21 += qi2 * qj;
        s.b12 += qi * qj2;
        s.b22 += qi2 * qj2;
    }
    s
}

/// C_ij = Σ_{a,b} q_i(a,b) q_j(a,b) with q = (P[a] + Q[b])².
fn c_pair(fi: &Feat, fj: &Feat, s: &PairSums, p: f64) -> f64 {
    p * s.a22
        + 2.0 * s.a21 * fj.sq
        + fi.sp2 * fj.sq2
        + 2.0 * s.a12 * fi.sq
        + 4.0 * s.a11 * s.b11
        + 2.0 * fi.sp * s.b12
        + fi.sq2 * fj.sp2
        + 2.0 * fj.sp * s.b21
        + p * s.b22
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient accumulators in (P, Q, w) coordinates for one neuron.
struct Acc {
    gp: Vec<f64>,
    gq: Vec<f64>,
    gw: Vec<f64>,
}

impl Acc {
    fn new(p: usize) -> Self {
        Self { gp: vec![0.0; p], gq: vec![0.0; p], gw: vec![0.0; p] }
    }

    /// Adds `scale`·∂(G_ij C_ij)/∂θ_i with the convention used by both loss and utility.
    fn add_pair(&mut self, fi: &Feat, fj: &Feat, s: &PairSums, c_ij: f64, g_ij: f64, p: f64, scale: f64) {
        let cw = scale * c_ij;
        for (g, wj) in self.gw.iter_mut().zip(&fj.w) {
            *g += cw * wj;
        }
        let k = 2.0 * g_ij * scale;
        for a in 0..self.gp.len() {
            let (pi, pj) = (fi.pp[a], fj.pp[a]);
            self.gp[a] += k * (pi * (p * pj * pj + 2.0 * pj * fj.sq + fj.sq2) + pj * pj * fi.sq + 2.0 * pj * s.b11 + s.b12);
            let (qi, qj) = (fi.qq[a], fj.qq[a]);
            self.gq[a] += k * (qi * (p * qj * qj + 2.0 * qj * fj.sp + fj.sp2) + qj * qj * fi.sp + 2.0 * qj * s.a11 + s.a12);
        }
    }
}

impl ModAddProblem {
    pub fn new(p: usize, x: Vec<f64>, h: usize, alpha: f64) -> Result<Self> {
        if p < 2 || x.len() != p {
            return Err(AgfError::Invalid(format!("template length {} does not match p = {p}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(AgfError::NonFinite { t: f64::NAN });
        }
        let mean = x.iter().sum::<f64>() / p as f64;
        let x: Vec<f64> = x.iter().map(|v| v - mean).collect();
        let xhat = dft(&x);
        let mut xc = vec![0.0; p * p];
        for a in 0..p {
            for j in 0..p {
                xc[a * p + j] = x[(j + p - a) % p];
            }
        }
        let xcm = Mat::from_row_slice(p, p, &xc);
        let xct = xcm.transpose();
        Ok(Self { p, x, h, alpha, batch_window: Some(0.01), xhat, xc, xcm, xct })
    }

    /// Template `x[c] = Σ (2m/p) cos(2πkc/p + s)` from (k, |x̂[k]| = m, phase s) triples.
    pub fn from_spectrum(p: usize, comps: &[(usize, f64, f64)], h: usize, alpha: f64) -> Result<Self> {
        let mut x = vec![0.0; p];
        for &(k, m, s) in comps {
            if k == 0 || k >= p || 2 * k == p {
                return Err(AgfError::Invalid(format!("frequency {k} must lie in 1..p/2 (exclusive of Nyquist)")));
            }
            for (c, xc) in x.iter_mut().enumerate() {
                *xc += 2.0 * m / p as f64 * (2.0 * PI * (k * c) as f64 / p as f64 + s).cos();
            }
        }
        Self::new(p, x, h, alpha)
    }

    /// p = 20 template with |x̂| = 10, 5, 2.5 at frequencies 1, 3, 5 (zero phases).
    pub fn three_cosine(h: usize, alpha: f64) -> Self {
        Self::from_spectrum(20, &[(1, 10.0, 0.0), (3, 5.0, 0.0), (5, 2.5, 0.0)], h, alpha).expect("valid template")
    }

    /// Recomputes cached transforms after deserialization.
    pub fn rebuild(self) -> Result<Self> {
        let mut out = Self::new(self.p, self.x, self.h, self.alpha)?;
        out.batch_window = self.batch_window;
        Ok(out)
    }

    pub fn xhat(&self) -> &[C64] {
        &self.xhat
    }

    pub fn x_norm2(&self) -> f64 {
        dot(&self.x, &self.x)
    }

    /// Phase s_x of x̂[k].
    pub fn phase(&self, k: usize) -> f64 {
        self.xhat[k % self.p].arg()
    }

    /// out[a] = ⟨u, a·x⟩.
    pub fn correlate(&self, u: &[f64], out: &mut [f64]) {
        let p = self.p;
        for (a, o) in out.iter_mut().enumerate() {
            *o = dot(&self.xc[a * p..(a + 1) * p], u);
        }
    }

    /// out[j] = Σ_a g[a] x[j − a], the adjoint of [`Self::correlate`].
    fn correlate_adj(&self, g: &[f64], out: &mut [f64]) {
        let p = self.p;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (a, &ga) in g.iter().enumerate() {
            for (o, xv) in out.iter_mut().zip(&self.xc[a * p..(a + 1) * p]) {
                *o += ga * xv;
            }
        }
    }

    pub fn feat(&self, theta: &[f64]) -> Feat {
        let p = self.p;
        let (u, rest) = theta.split_at(p);
        let (v, w) = rest.split_at(p);
        let mut pp = vec![0.0; p];
        let mut qq = vec![0.0; p];
        let mut rr = vec![0.0; p];
        self.correlate(u, &mut pp);
        self.correlate(v, &mut qq);
        self.correlate(w, &mut rr);
        Feat {
            sp: pp.iter().sum(),
            sp2: dot(&pp, &pp),
            sq: qq.iter().sum(),
            sq2: dot(&qq, &qq),
            sr: rr.iter().sum(),
            pp,
            qq,
            rr,
            w: w.to_vec(),
        }
    }

    /// Σ_s T[s] R[s] for one neuron, and optionally its gradient in (P, Q, w) coordinates.
    fn target_term(&self, f: &Feat, acc: Option<(&mut Acc, f64)>) -> f64 {
        let p = self.p;
        let base = f.sp2 + f.sq2;
        let mut t = vec![0.0; p];
        for s in 0..p {
            let mut conv = 0.0;
            for a in 0..p {
                conv += f.pp[a] * f.qq[(s + p - a) % p];
            }
            t[s] = base + 2.0 * conv;
        }
        let tr = dot(&t, &f.rr);
        if let Some((acc, scale)) = acc {
            for c in 0..p {
                let mut hc = 0.0;
                for s in 0..p {
                    hc += t[s] * self.x[(c + p - s) % p];
                }
                acc.gw[c] += scale * hc;
            }
            for a in 0..p {
                let mut qr = 0.0;
                let mut pr = 0.0;
                for b in 0..p {
                    qr += f.qq[b] * f.rr[(a + b) % p];
                    pr += f.pp[b] * f.rr[(a + b) % p];
                }
                acc.gp[a] += scale * 2.0 * (f.pp[a] * f.sr + qr);
                acc.gq[a] += scale * 2.0 * (f.qq[a] * f.sr + pr);
            }
        }
        tr
    }

    fn write_grad(&self, acc: &Acc, out: &mut [f64]) {
        let p = self.p;
        let (gu, rest) = out.split_at_mut(p);
        let (gv, gw) = rest.split_at_mut(p);
        self.correlate_adj(&acc.gp, gu);
        self.correlate_adj(&acc.gq, gv);
        gw.copy_from_slice(&acc.gw);
    }

    /// Full-batch loss of neurons with concatenated parameters.
    pub fn loss(&self, params: &[f64]) -> f64 {
        self.batched(params, None)
    }

    /// Full-batch loss and gradient.
    pub fn loss_grad(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        self.batched(params, Some(grad))
    }

    /// The pairwise sums of [`Self::loss_grad_pairwise`] arranged as H×H Gram
    /// matrices, so the bulk of the work is dense matrix products.
    fn batched(&self, params: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let p = self.p;
        let d = 3 * p;
        let h = params.len() / d;
        let pf = p as f64;
        let inv = 1.0 / (pf * pf);
        let block = |o: usize| Mat::from_fn(h, p, |i, a| params[i * d + o + a]);
        let (u, v, w) = (block(0), block(p), block(2 * p));
        let pm = &u * &self.xct;
        let qm = &v * &self.xct;
        let rm = &w * &self.xct;
        let p2 = pm.component_mul(&pm);
        let q2 = qm.component_mul(&qm);
        let a11 = &pm * pm.transpose();
        let a21 = &p2 * pm.transpose();
        let a22 = &p2 * p2.transpose();
        let b11 = &qm * qm.transpose();
        let b21 = &q2 * qm.transpose();
        let b22 = &q2 * q2.transpose();
        let (sp, sp2, sq, sq2, sr) = (pm.column_sum(), p2.column_sum(), qm.column_sum(), q2.column_sum(), rm.column_sum());
        let g = &w * w.transpose();
        let c = Mat::from_fn(h, h, |i, j| {
            pf * a22[(i, j)]
                + 2.0 * a21[(i, j)] * sq[j]
                + sp2[i] * sq2[j]
                + 2.0 * a21[(j, i)] * sq[i]
                + 4.0 * a11[(i, j)] * b11[(i, j)]
                + 2.0 * sp[i] * b21[(j, i)]
                + sq2[i] * sp2[j]
                + 2.0 * sp[j] * b21[(i, j)]
                + pf * b22[(i, j)]
        });
        // Target terms T_i[s] = ‖P_i‖² + ‖Q_i‖² + 2(P_i ∗ Q_i)[s].
        // Rows copied twice over so cyclic indices need no modulo.
        let doubled = |m: &Mat, i: usize| -> Vec<f64> { (0..2 * p).map(|k| m[(i, k % p)]).collect() };
        let rows = |m: &Mat, i: usize| -> Vec<f64> { (0..p).map(|k| m[(i, k)]).collect() };
        let mut t = Mat::zeros(h, p);
        let mut pq_rows = Vec::with_capacity(h);
        for i in 0..h {
            let (pr, qd) = (rows(&pm, i), doubled(&qm, i));
            for s in 0..p {
                let mut conv = 0.0;
                for a in 0..p {
                    conv += pr[a] * qd[s + p - a];
                }
                t[(i, s)] = sp2[i] + sq2[i] + 2.0 * conv;
            }
            pq_rows.push((pr, rows(&qm, i), doubled(&rm, i)));
        }
        let pair = g.component_mul(&c).sum();
        let tr = t.component_mul(&rm).sum();
        let loss = (0.5 * pair - tr) * inv + 0.5 * self.x_norm2();
        let Some(out) = grad else {
            return loss;
        };
        let gw = (&c * &w - &t * &self.xcm) * inv;
        let gp2 = &g * &p2;
        let gq2 = &g * &q2;
        let g_sq = &g * Mat::from_diagonal(&sq);
        let g_sp = &g * Mat::from_diagonal(&sp);
        let g_sq2 = &g * &sq2;
        let g_sp2 = &g * &sp2;
        let gb11 = g.component_mul(&b11) * &pm;
        let ga11 = g.component_mul(&a11) * &qm;
        let gb12 = g.component_mul(&b21.transpose()).column_sum();
        let ga12 = g.component_mul(&a21.transpose()).column_sum();
        let gpm = &g_sq * &pm;
        let gqm = &g_sp * &qm;
        let mut gp = Mat::zeros(h, p);
        let mut gq = Mat::zeros(h, p);
        for i in 0..h {
            for a in 0..p {
                let (pi, qi) = (pm[(i, a)], qm[(i, a)]);
                let (prow, qrow, rd) = &pq_rows[i];
                let rs = &rd[a..a + p];
                let qr = dot(qrow, rs);
                let pr = dot(prow, rs);
                gp[(i, a)] = 2.0
                    * inv
                    * (pi * (pf * gp2[(i, a)] + 2.0 * gpm[(i, a)] + g_sq2[i])
                        + sq[i] * gp2[(i, a)]
                        + 2.0 * gb11[(i, a)]
                        + gb12[i]
                        - pi * sr[i]
                        - qr);
                gq[(i, a)] = 2.0
                    * inv
                    * (qi * (pf * gq2[(i, a)] + 2.0 * gqm[(i, a)] + g_sp2[i])
                        + sp[i] * gq2[(i, a)]
                        + 2.0 * ga11[(i, a)]
                        + ga12[i]
                        - qi * sr[i]
                        - pr);
            }
        }
        let gu = &gp * &self.xcm;
        let gv = &gq * &self.xcm;
        for i in 0..h {
            for a in 0..p {
                out[i * d + a] = gu[(i, a)];
                out[i * d + p + a] = gv[(i, a)];
                out[i * d + 2 * p + a] = gw[(i, a)];
            }
        }
        loss
    }

    /// Full-batch loss, one neuron pair at a time.
    pub fn loss_pairwise(&self, params: &[f64]) -> f64 {
        let feats: Vec<Feat> = params.chunks(3 * self.p).map(|t| self.feat(t)).collect();
        let pf = self.p as f64;
        let mut pair = 0.0;
        let mut tr = 0.0;
        for (i, fi) in feats.iter().enumerate() {
            tr += self.target_term(fi, None);
            for fj in &feats[i..] {
                let s = pair_sums(fi, fj);
                let w = if std::ptr::eq(fi, fj) { 1.0 } else { 2.0 };
                pair += w * dot(&fi.w, &fj.w) * c_pair(fi, fj, &s, pf);
            }
        }
        (0.5 * pair - tr) / (pf * pf) + 0.5 * self.x_norm2()
    }

    /// Full-batch loss and gradient, one neuron pair at a time.
    pub fn loss_grad_pairwise(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let d = 3 * self.p;
        let feats: Vec<Feat> = params.chunks(d).map(|t| self.feat(t)).collect();
        let pf = self.p as f64;
        let inv = 1.0 / (pf * pf);
        let mut pair = 0.0;
        let mut tr = 0.0;
        let mut acc = Acc::new(self.p);
        for (i, fi) in feats.iter().enumerate() {
            acc.gp.iter_mut().chain(acc.gq.iter_mut()).chain(acc.gw.iter_mut()).for_each(|v| *v = 0.0);
            tr += self.target_term(fi, Some((&mut acc, -inv)));
            for (j, fj) in feats.iter().enumerate() {
                let s = pair_sums(fi, fj);
                let g = dot(&fi.w, &fj.w);
                let c = c_pair(fi, fj, &s, pf);
                if j >= i {
                    pair += if i == j { g * c } else { 2.0 * g * c };
                }
                acc.add_pair(fi, fj, &s, c, g, pf, inv);
            }
            self.write_grad(&acc, &mut grad[i * d..(i + 1) * d]);
        }
        (0.5 * pair - tr) * inv + 0.5 * self.x_norm2()
    }

    /// Utility of neuron `theta` against the residual left by `active` features,
    /// with its gradient written into `grad` when given.
    pub fn residual_utility(&self, theta: &[f64], active: &[Feat], grad: Option<&mut [f64]>) -> f64 {
        let pf = self.p as f64;
        let inv = 1.0 / (pf * pf);
        let fi = self.feat(theta);
        match grad {
            None => {
                let mut u = self.target_term(&fi, None);
                for fj in active {
                    let s = pair_sums(&fi, fj);
                    u -= dot(&fi.w, &fj.w) * c_pair(&fi, fj, &s, pf);
                }
                u * inv
            }
            Some(out) => {
                let mut acc = Acc::new(self.p);
                let mut u = self.target_term(&fi, Some((&mut acc, inv)));
                for fj in active {
                    let s = pair_sums(&fi, fj);
                    let g = dot(&fi.w, &fj.w);
                    let c = c_pair(&fi, fj, &s, pf);
                    u -= g * c;
                    acc.add_pair(&fi, fj, &s, c, g, pf, -inv);
                }
                self.write_grad(&acc, out);
                u * inv
            }
        }
    }

    /// ((a+b)·x)[c].
    pub fn target(&self, a: usize, b: usize, c: usize) -> f64 {
        let p = self.p;
        self.x[(c + 2 * p - (a + b) % p) % p]
    }

    /// Direct p²-grid loss, O(H p³).
    pub fn loss_direct(&self, params: &[f64]) -> f64 {
        let f = network_function(self, params);
        let p = self.p;
        let mut acc = 0.0;
        for a in 0..p {
            for b in 0..p {
                for c in 0..p {
                    let e = f.at(a, b, c) - self.target(a, b, c);
                    acc += e * e;
                }
            }
        }
        acc / (2.0 * (p * p) as f64)
    }

    /// Direct p²-grid gradient, O(H p³).
    pub fn grad_direct(&self, params: &[f64], grad: &mut [f64]) {
        let p = self.p;
        let d = 3 * p;
        let f = network_function(self, params);
        let feats: Vec<Feat> = params.chunks(d).map(|t| self.feat(t)).collect();
        let inv = 1.0 / (p * p) as f64;
        for (i, fi) in feats.iter().enumerate() {
            let mut acc = Acc::new(p);
            for a in 0..p {
                for b in 0..p {
                    let z = fi.pp[a] + fi.qq[b];
                    let mut e_dot_w = 0.0;
                    for c in 0..p {
                        let e = f.at(a, b, c) - self.target(a, b, c);
                        e_dot_w += e * fi.w[c];
                        acc.gw[c] += inv * z * z * e;
                    }
                    acc.gp[a] += inv * 2.0 * z * e_dot_w;
                    acc.gq[b] += inv * 2.0 * z * e_dot_w;
                }
            }
            self.write_grad(&acc, &mut grad[i * d..(i + 1) * d]);
        }
    }

    /// |x̂[k]| for k = 0..p.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.xhat.iter().map(|c| c.norm()).collect()
    }

    /// ½‖x‖² − |x̂[ξ]|²/p, the smallest loss reachable with neurons at frequency ξ.
    pub fn loss_bound(&self, xi: usize) -> f64 {
        0.5 * self.x_norm2() - self.xhat[xi].norm_sqr() / self.p as f64
    }

    /// √(2/(27p³))·|x̂[ξ]|³.
    pub fn max_utility_at(&self, xi: usize) -> f64 {
        let p = self.p as f64;
        (2.0 / (27.0 * p * p * p)).sqrt() * self.xhat[xi].norm().powi(3)
    }
}

/// Σᵢ fᵢ(a, b) over the full grid, stored as data[(a·p + b)·p + c].
#[derive(Debug, Clone, PartialEq)]
pub struct NetFn {
    pub p: usize,
    pub data: Vec<f64>,
}

impl NetFn {
    pub fn at(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[(a * self.p + b) * self.p + c]
    }

    pub fn output(&self, a: usize, b: usize) -> &[f64] {
        let s = (a * self.p + b) * self.p;
        &self.data[s..s + self.p]
    }

    pub fn norm(&self) -> f64 {
        l2(&self.data)
    }

    pub fn sub(&self, other: &NetFn) -> NetFn {
        NetFn { p: self.p, data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect() }
    }

    pub fn add(&self, other: &NetFn) -> NetFn {
        NetFn { p: self.p, data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect() }
    }
}

/// Evaluates Σᵢ (⟨uᵢ, a·x⟩ + ⟨vᵢ, b·x⟩)² wᵢ at every (a, b).
pub fn network_function(prob: &ModAddProblem, params: &[f64]) -> NetFn {
    let p = prob.p;
    let mut data = vec![0.0; p * p * p];
    for th in params.chunks(3 * p) {
        let f = prob.feat(th);
        for a in 0..p {
            for b in 0..p {
                let z = f.pp[a] + f.qq[b];
                let q = z * z;
                let s = (a * p + b) * p;
                for (o, w) in data[s..s + p].iter_mut().zip(&f.w) {
                    *o += q * w;
                }
            }
        }
    }
    NetFn { p, data }
}

/// (2|x̂[ξ]|/p)·(a+b)·χ_ξ with χ_ξ[c] = cos(2πξc/p + s_x): the function a minimizing
/// group at frequency ξ implements.
pub fn frequency_function(prob: &ModAddProblem, xi: usize) -> NetFn {
    let p = prob.p;
    let amp = 2.0 * prob.xhat[xi].norm() / p as f64;
    let sx = prob.phase(xi);
    let mut data = vec![0.0; p * p * p];
    for a in 0..p {
        for b in 0..p {
            for c in 0..p {
                let m = (c + 2 * p - (a + b) % p) % p;
                data[(a * p + b) * p + c] = amp * (2.0 * PI * (xi * m) as f64 / p as f64 + sx).cos();
            }
        }
    }
    NetFn { p, data }
}

/// (1/p²) Σ_{a,b} ⟨f_θ(a, b), r(a, b)⟩ over the full grid.
pub fn utility_spatial<R: Fn(usize, usize, usize) -> f64>(prob: &ModAddProblem, theta: &[f64], residual: R) -> f64 {
    let p = prob.p;
    let f = network_function(prob, theta);
    let mut acc = 0.0;
    for a in 0..p {
        for b in 0..p {
            for c in 0..p {
                acc += f.at(a, b, c) * residual(a, b, c);
            }
        }
    }
    acc / (p * p) as f64
}

/// (2/p³) Σ_{k ∉ {0} ∪ removed} |x̂[k]|² û[k] v̂[k] conj(ŵ[k] x̂[k]).
pub fn utility_frequency(prob: &ModAddProblem, theta: &[f64], removed: &[usize]) -> Result<f64> {
    let p = prob.p;
    for &k in removed {
        if !removed.contains(&((p - k % p) % p)) {
            return Err(AgfError::NonSymmetricRemoval(k));
        }
    }
    let uh = dft(&theta[..p]);
    let vh = dft(&theta[p..2 * p]);
    let wh = dft(&theta[2 * p..3 * p]);
    let mut acc = C64::new(0.0, 0.0);
    for k in 1..p {
        if removed.contains(&k) {
            continue;
        }
        let xk = prob.xhat[k];
        acc += uh[k] * vh[k] * (wh[k] * xk).conj() * xk.norm_sqr();
    }
    let pf = p as f64;
    Ok(2.0 * acc.re / (pf * pf * pf))
}

/// Unit-norm utility maximizer at frequency ξ with phases (s_u, s_v) and
/// s_w = s_u + s_v − s_x.
pub fn maximizer(prob: &ModAddProblem, xi: usize, s_u: f64, s_v: f64) -> Result<Vec<f64>> {
    let p = prob.p;
    if xi == 0 || xi >= p || 2 * xi == p {
        return Err(AgfError::Invalid(format!("frequency {xi} outside 1..p/2")));
    }
    let mags = prob.magnitudes();
    let top = mags.iter().cloned().fold(0.0, f64::max);
    if mags[xi] <= 1e-12 * top.max(1.0) {
        return Err(AgfError::ZeroCoefficient(xi));
    }
    let s_w = s_u + s_v - prob.phase(xi);
    Ok(cosine_neuron(p, xi, (2.0 / (3.0 * p as f64)).sqrt(), [s_u, s_v, s_w]))
}

fn cosine_neuron(p: usize, xi: usize, amp: f64, phases: [f64; 3]) -> Vec<f64> {
    let mut th = vec![0.0; 3 * p];
    for (blk, s) in phases.iter().enumerate() {
        for a in 0..p {
            th[blk * p + a] = amp * (2.0 * PI * (xi * a) as f64 / p as f64 + s).cos();
        }
    }
    th
}

/// N neurons at frequency ξ whose joint loss attains [`ModAddProblem::loss_bound`]:
/// s_uⁱ + s_vⁱ = s_wⁱ + s_x = 2πi/N, s_uⁱ − s_vⁱ alternating between 0 and π, and
/// per-block amplitude (√(54p)/(N|x̂[ξ]|))^(1/3) relative to the unit maximizer.
pub fn cost_min_construction(prob: &ModAddProblem, xi: usize, n: usize) -> Result<Vec<Vec<f64>>> {
    if n < 6 {
        return Err(AgfError::LowerBoundUnattainable(n));
    }
    maximizer(prob, xi, 0.0, 0.0)?;
    let p = prob.p as f64;
    let mag = prob.xhat[xi].norm();
    let scale = ((54.0 * p).sqrt() / (n as f64 * mag)).cbrt();
    let amp = scale * (2.0 / (3.0 * p)).sqrt();
    let sx = prob.phase(xi);
    Ok((0..n)
        .map(|i| {
            let sum = 2.0 * PI * i as f64 / n as f64;
            let diff = if i % 2 == 0 { 0.0 } else { PI };
            let s_u = 0.5 * (sum + diff);
            let s_v = 0.5 * (sum - diff);
            cosine_neuron(prob.p, xi, amp, [s_u, s_v, sum - sx])
        })
        .collect())
}

/// Positive frequencies with energy, ordered by decreasing |x̂|.
pub fn frequency_order(prob: &ModAddProblem) -> (Vec<usize>, Vec<String>) {
    let p = prob.p;
    let mags = prob.magnitudes();
    let top = mags.iter().cloned().fold(0.0, f64::max);
    let mut ks: Vec<usize> = (1..=p / 2).filter(|&k| mags[k] > 1e-9 * top.max(1e-300)).collect();
    ks.sort_by(|&a, &b| mags[b].total_cmp(&mags[a]).then(a.cmp(&b)));
    let mut flags = Vec::new();
    for w in ks.windows(2) {
        if (mags[w[0]] - mags[w[1]]).abs() <= 1e-8 {
            flags.push(AgfError::TieBreak(w[0], w[1]).to_string());
        }
    }
    (ks, flags)
}

/// Lower bound on the next jump: τ^(l) + (1/(η μ^(l)))·√3 p^{3/2}/(√2 |x̂[ξ]|³).
pub fn jump_lower_bound(prob: &ModAddProblem, tau_l: f64, mu_l: f64, eta: f64, xi: usize) -> f64 {
    let p = prob.p as f64;
    tau_l + (1.0 / (eta * mu_l)) * 3f64.sqrt() * p.powf(1.5) / (2f64.sqrt() * prob.xhat[xi].norm().powi(3))
}

/// Frequencies learned in order of decreasing |x̂|, loss levels Σ_{i>k}|x̂[ξᵢ]|²/p,
/// and per-step jump lower bounds measured from τ = 0 with μ = α.
pub fn modadd_sequence(prob: &ModAddProblem) -> PredictedSequence {
    let p = prob.p;
    let (order, flags) = frequency_order(prob);
    let energy = |k: usize| {
        let e = prob.xhat[k].norm_sqr() / p as f64;
        if 2 * k == p {
            0.5 * e
        } else {
            e
        }
    };
    let eta = 1.0 / prob.alpha;
    let mut steps = Vec::new();
    let mut rest: f64 = order.iter().map(|&k| energy(k)).sum();
    steps.push(PredictedStep { k: 0, loss: rest, tau: None, tau_lower_bound: None, feature: "none".into(), value: 0.0 });
    for (i, &k) in order.iter().enumerate() {
        rest -= energy(k);
        steps.push(PredictedStep {
            k: i + 1,
            loss: rest.max(0.0),
            tau: None,
            tau_lower_bound: Some(jump_lower_bound(prob, 0.0, prob.alpha, eta, k)),
            feature: format!("xi={k}"),
            value: prob.xhat[k].norm(),
        });
    }
    PredictedSequence { model: "modadd".into(), steps, flags }
}

/// Per-neuron spectral summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronSpectrum {
    pub dominant: usize,
    /// Phase of ŵ at the dominant frequency.
    pub phase_w: f64,
    pub phase_u: f64,
    pub phase_v: f64,
    /// |ŵ[k]|² for k = 0..=p/2.
    pub power: Vec<f64>,
}

pub fn spectrum_probe(prob: &ModAddProblem, params: &[f64]) -> Vec<NeuronSpectrum> {
    let p = prob.p;
    params
        .chunks(3 * p)
        .map(|th| {
            let uh = dft(&th[..p]);
            let vh = dft(&th[p..2 * p]);
            let wh = dft(&th[2 * p..]);
            let power: Vec<f64> = (0..=p / 2).map(|k| wh[k].norm_sqr()).collect();
            let dominant = (1..=p / 2).max_by(|&a, &b| power[a].total_cmp(&power[b]).then(b.cmp(&a))).unwrap_or(0);
            NeuronSpectrum {
                dominant,
                phase_w: wh[dominant].arg(),
                phase_u: uh[dominant].arg(),
                phase_v: vh[dominant].arg(),
                power,
            }
        })
        .collect()
}

/// Mean output power spectrum (1/p²) Σ_{a,b} |DFT(f(a,b))[k]|² for k = 0..=p/2.
pub fn output_spectrum(prob: &ModAddProblem, params: &[f64]) -> Vec<f64> {
    let p = prob.p;
    let f = network_function(prob, params);
    let mut out = vec![0.0; p / 2 + 1];
    for a in 0..p {
        for b in 0..p {
            let fh = dft(f.output(a, b));
            for (k, o) in out.iter_mut().enumerate() {
                *o += fh[k].norm_sqr();
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= (p * p) as f64);
    out
}

/// Active-set features: the frozen residual seen by dormant neurons.
pub struct ModAddResidual {
    pub active: Vec<Feat>,
}

impl ModelContract for ModAddProblem {
    type Residual = ModAddResidual;

    fn kappa(&self) -> u32 {
        3
    }
    fn num_neurons(&self) -> usize {
        self.h
    }
    fn param_dim(&self) -> usize {
        3 * self.p
    }
    fn init_norm_scale(&self) -> f64 {
        1.0
    }
    /// Every entry N(0, α²/(3p)), so E‖θ‖² = α² and the blocks start balanced on average.
    fn init_params(&self, alpha: f64, seed: u64) -> Vec<Vec<f64>> {
        let std = alpha / (3.0 * self.p as f64).sqrt();
        (0..self.h).map(|i| gaussian(&mut neuron_rng(seed, i), 3 * self.p, std)).collect()
    }
    fn imbalance(&self, theta: &[f64]) -> f64 {
        let p = self.p;
        let n2 = |s: &[f64]| dot(s, s);
        2.0 * n2(&theta[2 * p..]) - n2(&theta[..p]) - n2(&theta[p..2 * p])
    }
    fn residual(&self, _active: &[usize], params: &[f64]) -> ModAddResidual {
        ModAddResidual { active: params.chunks(3 * self.p).map(|t| self.feat(t)).collect() }
    }
    fn utility(&self, _i: usize, theta: &[f64], r: &ModAddResidual) -> f64 {
        self.residual_utility(theta, &r.active, None)
    }
    fn utility_grad(&self, _i: usize, theta: &[f64], r: &ModAddResidual, grad: &mut [f64]) -> f64 {
        self.residual_utility(theta, &r.active, Some(grad))
    }
    fn active_loss(&self, _active: &[usize], params: &[f64]) -> f64 {
        self.loss(params)
    }
    fn active_grad(&self, _active: &[usize], params: &[f64], grad: &mut [f64]) -> f64 {
        self.loss_grad(params, grad)
    }
    fn batch_activation_window(&self) -> Option<f64> {
        self.batch_window
    }
}

impl Observe for ModAddProblem {
    /// Output power per frequency, `power_k` for k = 0..=p/2.
    fn observable_names(&self) -> Vec<String> {
        (0..=self.p / 2).map(|k| format!("power_{k}")).collect()
    }
    fn observables(&self, params: &[f64]) -> Vec<f64> {
        output_spectrum(self, params)
    }
}
