//! Core library for the flowplan stack: a desk-scale planner that generates
//! multimodal driving trajectories in a single network evaluation.
//!
//! The pieces, bottom-up:
//!
//! * [`diffkit`] — a small tape-based autodiff engine over dense `f64`
//!   tensors. Reverse mode for training, forward mode (JVP) for the
//!   mean-flow training target, and an explicit `detach` so values can be
//!   used as constants.
//! * [`rng`] — seeded, explicitly-threaded randomness (ChaCha8).
//! * [`synthworld`] — synthetic multimodal driving scenarios: generation,
//!   validation, the JSONL dataset format, and scene featurization.
//! * [`evalkit`] — scoring: drive score, multimodality, mode recall, and
//!   energy distance, plus the convex geometry beneath them.
//! * [`gmnprior`] — the anchored noise prior: per-axis delta normalization
//!   and a k-means-fitted Gaussian mixture with one draw per component.

pub mod arm;
pub mod checkpoint;
pub mod config;
pub mod diffkit;
pub mod evalkit;
pub mod flowbase;
pub mod gmnprior;
pub mod meanflow;
pub mod model;
pub mod rng;
pub mod synthworld;

pub use config::Config;
pub use diffkit::{DualTensor, ParamStore, Tape, Tensor, Var};
pub use model::{ModelKind, PlannerModel};
pub use synthworld::{SceneContext, Scenario, Trajectory};
