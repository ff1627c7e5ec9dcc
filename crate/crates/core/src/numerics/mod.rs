//! Linear algebra, ODE integration and Fourier transforms shared by every model.

pub mod dft;
pub mod linalg;
pub mod ode;
pub mod rkc;

pub use dft::{cdot, conjugate_asymmetry, dft, dft_complex, idft, CVec, C64};
pub use linalg::{projector, rel_frobenius, spd_inverse, spd_solve, svd, sym_eig, Mat, Vector};
pub use ode::{
    drive, integrate, integrate_until_event, integrate_until_events, Crossing, DriveStats, EventRecord, Flow,
    Method, Projected, StepControl, System, Trajectory,
};
