//! Fitted Q-evaluation for finite-horizon tabular MDPs, with plug-in
//! asymptotic variance, restricted χ² divergences, leading-order error bounds,
//! episode-level bootstrap intervals and Monte-Carlo validation studies.
//!
//! Everything numeric is generic over [`scalar::Real`] (`f32` or `f64`). The
//! aliases at the crate root fix the scalar to `f64`, with `*32` variants for
//! single precision.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod approx;
pub mod bootstrap;
pub mod error;
pub mod experiments;
pub mod fqe;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod mdp;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type TabularMdp = mdp::TabularMdp<f64>;
pub type Policy = mdp::Policy<f64>;
pub type Dataset = mdp::Dataset<f64>;
pub type FeatureMap = approx::FeatureMap<f64>;
pub type ParamVector = approx::ParamVector<f64>;
pub type FqeEstimate = fqe::FqeEstimate<f64>;
pub type WeightVector = fqe::WeightVector<f64>;

pub type TabularMdp32 = mdp::TabularMdp<f32>;
pub type Policy32 = mdp::Policy<f32>;
pub type Dataset32 = mdp::Dataset<f32>;
pub type FeatureMap32 = approx::FeatureMap<f32>;
pub type ParamVector32 = approx::ParamVector<f32>;
pub type FqeEstimate32 = fqe::FqeEstimate<f32>;
pub type WeightVector32 = fqe::WeightVector<f32>;

pub use approx::{Approximator, Family};
