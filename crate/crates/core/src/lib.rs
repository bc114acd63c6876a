//! Reserving engine for multi-state life insurance with stochastic
//! retirement under reduced information.
//!
//! The model is a pure jump process on an extended state space: numbered
//! pre-retirement health states, a mirrored block of retired health states,
//! and an absorbing dead state. The observed chain lumps the retired block
//! into a single pensioner state, which in general destroys the Markov
//! property. The engine computes state-wise prospective reserves under four
//! information regimes (full observed history; retirement date retained;
//! current state only; the production shortcut that drops the just-retired
//! correction) by backward Runge-Kutta integration of the corresponding
//! deterministic systems, and cross-validates every analytic quantity
//! against an independent Monte Carlo jump-process oracle.
//!
//! Entry points:
//! * [`config::ModelConfig`] / [`config::ScenarioConfig`] — the JSON file
//!   formats,
//! * [`distributions::solve_occupation`] / [`distributions::JointLaw`] — the
//!   forward pipeline,
//! * [`thiele`] — the backward reserve solvers and residual checks,
//! * [`mc`] — the simulation oracle,
//! * [`scenario::run_scenario`] — the end-to-end runner behind the CLI.

pub mod config;
pub mod distributions;
pub mod grid;
pub mod kernel;
pub mod mc;
pub mod model;
pub mod numerics;
pub mod rates;
pub mod scenario;
pub mod state;
pub mod thiele;

pub use model::{discount_factor, DiscountCurve, ModelSpec};
pub use state::State;
