//! Leader-following adaptive output synchronization of uncertain nonlinear
//! agents over switching networks.
//!
//! A leader exosystem generates the reference `y0`. Each follower runs an
//! adaptive distributed observer that estimates the leader's state, dynamics
//! matrix and observer gain from neighbor data, and an adaptive sliding
//! controller that cancels its own unknown parameters (and, optionally, a
//! bounded disturbance) using only those estimates.
//!
//! Modules, bottom-up:
//! - [`graph`]: leader-augmented graphs, switching schedules, connectivity checks.
//! - [`exo`]: the leader system, its stability checks and observer gain design.
//! - [`expr`]: the regressor expression language.
//! - [`plant`]: follower dynamics, disturbances and controller-visible models.
//! - [`observer`]: the adaptive distributed observer.
//! - [`control`]: sliding variables, control laws and Lyapunov diagnostics.
//! - [`engine`]: closed-loop simulation, traces and convergence metrics.
//! - [`scenario`]: scenario files and run orchestration.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod engine;
pub mod error;
pub mod exo;
pub mod expr;
pub mod graph;
pub mod observer;
pub mod ode;
pub mod plant;
pub mod scenario;

pub use error::{Error, Result};
