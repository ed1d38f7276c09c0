//! Prompt-distribution learning for query-based human-object interaction
//! detection, built small enough to verify every mechanism exactly.

pub mod error;
pub mod numcore;
pub mod textenc;
pub mod promptspace;
pub mod distengine;
pub mod orthoconstraint;
pub mod detector;
pub mod synthworld;
pub mod harness;

pub use error::{Error, Result};
