//! Test-time skill synthesis: retrieve trajectories similar to a target
//! task, distill them into a compact task-specific skill, and hand only
//! that skill to a fixed solver.

pub mod cost;
pub mod embed_text;
pub mod harness;
pub mod pipeline;
pub mod pool;
pub mod profile;
pub mod provider;
pub mod retrieval;
pub mod sampling;
pub mod solve;
pub mod synthesis;
