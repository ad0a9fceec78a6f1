//! Time-aware neural-ODE heads with self-supervised pre-training for
//! longitudinal progression prediction.
//!
//! The crate provides, bottom up:
//!
//! * [`tensor`] / [`tape`] — a minimal reverse-mode autodiff over dense
//!   arrays, with ODE solves as differentiable nodes;
//! * [`ode`] — fixed-step RK4 and adaptive Dormand-Prince 5(4) integration
//!   in forward and reverse time;
//! * [`adjoint`] — endpoint gradients via the adjoint sensitivity method and
//!   via backprop through the solver, each the other's oracle;
//! * [`model`] — the time-aware head family (NODE and ODE-RNN variants with
//!   RNN/GRU/LSTM cells), encoder, projector, and severity classifier;
//! * [`ssl`] — the two pre-training schemes: SimCLR-style disease
//!   progression alignment with time-interval augmentation, and BYOL-style
//!   temporal evolution/consistency with an EMA target network;
//! * [`cohort`] — a synthetic longitudinal cohort generator with irregular
//!   visit times and derived downstream task splits;
//! * [`metrics`] — binarized-threshold AUC and quadratic-weighted kappa;
//! * [`harness`] — configs, training loops, checkpoints, run records, and
//!   the experiment pipelines behind the CLI.
//!
//! See the crate examples for runnable walkthroughs of each capability.

pub mod adjoint;
pub mod checkpoint;
pub mod cohort;
pub mod config;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ode;
pub mod optim;
pub mod run;
pub mod ssl;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
