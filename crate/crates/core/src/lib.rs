//! Neural construction solver for the capacitated vehicle routing problem.
//!
//! A graph encoder restricts each customer's message passing to its `K`
//! most attended neighbours (attention sampling) and fuses edge distances
//! into keys and values. A masked multi-head attention decoder then builds
//! routes node by node, and a REINFORCE trainer with a greedy-rollout
//! baseline fits the parameters.

pub mod baselines;
pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod instances;
pub mod model;
pub mod numkernel;
pub mod trainer;
