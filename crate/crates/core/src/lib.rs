//! Social learning over weakly-connected networks and the inverse problem of
//! recovering how strongly each sending sub-network influences a receiving
//! agent, using nothing but the receiving agent's stream of beliefs.
//!
//! The crate is organised bottom-up:
//!
//! * [`weakgraph`]: partitions, block-structured combination matrices,
//!   Perron vectors and the closed-form limit of `A^i`.
//! * [`models`]: unit-variance Gaussian likelihood families and the
//!   hypothesis-by-sender divergence matrix they induce.
//! * [`social_learning`]: the Bayesian-update / log-linear-combine recursion
//!   and empirical belief decay rates.
//! * [`topology_inference`]: the augmented linear system, its rank analysis,
//!   and a simplex-constrained least-squares solver.
//! * [`cli`]: config-driven experiment runner behind the `social-topology`
//!   binary.

pub mod cli;
pub mod models;
pub mod social_learning;
pub mod topology_inference;
pub mod weakgraph;

pub use models::{AgentModel, DivergenceMatrix, HypothesisSet, ModelSuite};
pub use social_learning::{BeliefState, Trajectory};
pub use topology_inference::{InverseSystem, TopologyEstimate};
pub use weakgraph::{LimitingProfile, Partition, WeakGraph};
