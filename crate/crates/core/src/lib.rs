//! Imperfect-digital-twin-assisted DQN training for multi-UAV access
//! networks: a channel and fleet simulator, a from-scratch dense network, a
//! DQN trainer, a gradient-trained selector for the fleet split and twin
//! noise, and the experiment harness that ties them together.

pub mod channel;
pub mod dqn;
pub mod env;
pub mod error;
pub mod fleet;
pub mod harness;
pub mod neural;
pub mod tuner;

pub use error::{Error, Result};
