//! Turns a structured algorithm document into synthesis-ready C++ through
//! staged understanding, level-by-level coding, reflection and HLS checks.

pub mod coding;
pub mod document;
pub mod error;
pub mod hls;
pub mod level;
pub mod orchestrator;
pub mod patcher;
pub mod provider;
pub mod reflection;
pub mod sandbox;
pub mod session;
pub mod understanding;
pub mod wire;

pub use error::{Error, Result};
pub use level::CodeLevel;
