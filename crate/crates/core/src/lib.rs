//! Cooperative multi-agent Q-learning with value decomposition and
//! latent state inference.
//!
//! The crate trains teams of recurrent Q-agents on Dec-POMDP environments
//! with a shared reward. Joint action-values are assembled either as a
//! linear sum (VDN) or through a monotonic mixing network whose weights are
//! generated by hypernetworks conditioned on a state vector (QMIX). When the
//! true environment state is withheld, the `side` algorithm infers a latent
//! state from the agents' recurrent hidden outputs with a variational graph
//! auto-encoder and a learned latent prior, trained jointly with the TD
//! objective.

pub mod autodiff;
pub mod agents;
pub mod bench;
pub mod commands;
pub mod config;
pub mod envs;
pub mod inference;
pub mod mixing;
pub mod nn;
pub mod training;

pub use autodiff::{AdError, AdResult, Arr, ParameterSet, RmsProp, Value};
