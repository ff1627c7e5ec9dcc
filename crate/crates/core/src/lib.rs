//! Alternating Gradient Flows (AGF): a two-step approximation of small-initialization
//! gradient flow in two-layer networks, the four model instantiations it is checked
//! on, and a reference gradient-flow trainer.

pub mod compare;
pub mod engine;
pub mod error;
pub mod gf;
pub mod models;
pub mod numerics;
pub mod plateau;
pub mod rng;
pub mod sequence;

pub use engine::{AgfEvent, AgfTrace, EngineConfig, EventKind, ModelContract, NeuronState, Status};
pub use compare::{compare_curve, probe_curve, CompareReport, CompareRow, Tolerances};
pub use error::{AgfError, Result};
pub use gf::{gf_train, GfConfig, GfIntegrator, GfRun, Observe};
pub use numerics::{Mat, Vector};
pub use plateau::{plateau_extract, PlateauParams, PlateauReport};
pub use sequence::{PredictedSequence, PredictedStep};
