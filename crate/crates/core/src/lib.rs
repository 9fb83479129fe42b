//! Probabilistically safe adaptive control with meta-learned Bayesian models.
//!
//! The crate couples three pieces:
//!
//! * a Bayesian linear regression head over a trainable MLP feature map
//!   ([`featurenet`], [`ablr`]) whose weights and prior are meta-trained on
//!   data from related control tasks ([`meta`]);
//! * control-barrier-function constraints whose unknown residual term is
//!   replaced by the model's pessimistic bound `μ − βσ` ([`safety`]), solved as
//!   a small QP every control step ([`qp`]);
//! * a moving-point plant and experiment runner ([`sim`], [`runner`]) with the
//!   robust, Gaussian-process and perfect-knowledge baselines ([`gp`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
pub mod ablr;
pub mod control;
pub mod error;
pub mod featurenet;
pub mod gp;
pub mod meta;
pub mod numerics;
pub mod qp;
pub mod runner;
pub mod safety;
pub mod sim;

pub use error::{Error, Result};
