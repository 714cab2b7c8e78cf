//! Shared 64-bit oracles for integration tests: an independent f64 forward
//! pass of the full model (for finite-difference gradient checks) and a
//! scalar relevance-propagation reference for small feed-forward networks.

#![allow(dead_code)]

pub mod lrp_oracle;
pub mod ref_forward;
