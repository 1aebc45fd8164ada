//! Sparse (Tsallis-entropy) regularized MDPs: exact operators and solvers, consistency
//! witnesses with executable sub-optimality checks, and path consistency learning with
//! constraint-satisfying function approximators on algorithmic tape tasks.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases below fix `f64`.

#![allow(clippy::needless_range_loop)]

pub mod consistency;
pub mod envs;
pub mod error;
pub mod math;
pub mod mdp;
pub mod model;
pub mod oracle;
pub mod pcl;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Mdp = mdp::TabularMdp<f64>;
pub type Policy = mdp::TabularPolicy<f64>;
pub type Distribution = math::PolicyDistribution<f64>;
pub type Witness = consistency::ConsistencyWitness<f64>;
pub type ParamModel = model::Model<f64>;
pub type PclEpisode = pcl::Episode<f64>;
pub type Replay = pcl::ReplayBuffer<f64>;
