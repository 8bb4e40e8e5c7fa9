//! Shared/private multi-domain representation learning and
//! tracking-by-detection on synthetic video, in plain Rust.

pub mod engine;
pub mod losses;
pub mod mining;
pub mod model;
pub mod tracker;
pub mod trainer;
pub mod video;
