//! Tree-search mining of step-level critiques for multimodal reasoning,
//! refinement-based filtering, and iterative actor-critic inference.

pub mod exec;
pub mod filter;
pub mod gateway;
pub mod mcts;
pub mod mining;
pub mod objective;
pub mod refine;
pub mod store;
pub mod synthetic;
pub mod types;

pub use types::*;
