//! Schedule-robust online class-incremental learning over precomputed
//! embeddings.
//!
//! Stage one streams a dataset once and keeps order-independent
//! statistics ([`online_learner`]) plus a per-class replay buffer
//! ([`replay_buffer`]). Stage two adapts the resulting linear head on the
//! buffer alone ([`adapter`]). [`harness`] ties the stages together.

pub mod adapter;
pub mod checkpoint;
pub mod embed_store;
pub mod error;
pub mod harness;
pub mod online_learner;
pub mod replay_buffer;
pub mod schedule;

pub use error::{Result, ScrollError};
