//! ARGUS: a policy-adaptive advertisement governance engine.
//!
//! The crate is organised around the life cycle of a policy change:
//!
//! * [`policy`] holds versioned policy sets and computes the emerging delta.
//! * [`dataset`] persists ad samples and their label history in an append-only log.
//! * [`gateway`] talks to the agent roles and the policy model (remote or scripted).
//! * [`retrieval`] grounds the umpire in clause text and gold exemplars.
//! * [`debate`] runs the prosecutor / defender / skeptic / umpire dialectic.
//! * [`reward`] turns adjudications into rewards and group-relative advantages.
//! * [`governance`] is the online cascade with sampled human review.
//! * [`eval`] scores predictions and runs the offline ablations.
//!
//! [`pipeline`] wires the offline stages together and [`synth`] generates the
//! planted corpora the pipeline and the evaluation harness run on.

pub mod clock;
pub mod dataset;
pub mod debate;
pub mod eval;
pub mod fixtures;
pub mod gateway;
pub mod governance;
pub mod jsonl;
pub mod pipeline;
pub mod policy;
pub mod retrieval;
pub mod reward;
pub mod synth;
pub mod text;

/// Identifier of a policy dimension, e.g. `"P33"`.
pub type PolicyKey = String;
