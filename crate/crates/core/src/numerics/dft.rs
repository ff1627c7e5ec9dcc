//! Direct O(p²) discrete Fourier transform, `x̂[k] = Σ_a x[a] e^{-2πi k a / p}`.

use nalgebra::Complex;

pub type C64 = Complex<f64>;
pub type CVec = Vec<C64>;

/// `e^{-2πi m / p}` for `m = 0..p`, indexed by `(k·a) mod p` to avoid large arguments.
fn twiddles(p: usize) -> Vec<C64> {
    (0..p)
        .map(|m| {
            let th = -2.0 * std::f64::consts::PI * m as f64 / p as f64;
            C64::new(th.cos(), th.sin())
        })
        .collect()
}

pub fn dft(v: &[f64]) -> CVec {
    let p = v.len();
    let tw = twiddles(p);
    (0..p)
        .map(|k| {
            let mut acc = C64::new(0.0, 0.0);
            for (a, &x) in v.iter().enumerate() {
                acc += tw[(k * a) % p] * x;
            }
            acc
        })
        .collect()
}

pub fn dft_complex(v: &[C64]) -> CVec {
    let p = v.len();
    let tw = twiddles(p);
    (0..p)
        .map(|k| {
            let mut acc = C64::new(0.0, 0.0);
            for (a, &x) in v.iter().enumerate() {
                acc += tw[(k * a) % p] * x;
            }
            acc
        })
        .collect()
}

/// Inverse transform, returning the real part (imaginary residue is dropped).
pub fn idft(c: &[C64]) -> Vec<f64> {
    let p = c.len();
    let tw = twiddles(p);
    (0..p)
        .map(|a| {
            let mut acc = C64::new(0.0, 0.0);
            for (k, &x) in c.iter().enumerate() {
                acc += tw[(k * a) % p].conj() * x;
            }
            acc.re / p as f64
        })
        .collect()
}

/// Largest `|ĉ[k] − conj(ĉ[p−k])|`; zero for the transform of a real vector.
pub fn conjugate_asymmetry(c: &[C64]) -> f64 {
    let p = c.len();
    (0..p).map(|k| (c[k] - c[(p - k) % p].conj()).norm()).fold(0.0, f64::max)
}

/// Unitary-up-to-scale inner product `⟨û, v̂⟩ = Σ û[k] conj(v̂[k])`.
pub fn cdot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
}
