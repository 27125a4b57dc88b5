//! Desk-scale laboratory for non-uniform rotary position interpolation:
//! per-dimension rescale factors with a start-token threshold, an
//! evolutionary search over them under a monotonicity constraint, and a
//! progressive extend / fine-tune / recover pipeline around a small
//! trainable decoder-only transformer.

pub mod cli;
pub mod corpus;
pub mod eval;
pub mod pipeline;
pub mod rope;
pub mod search;
pub mod tinyformer;
