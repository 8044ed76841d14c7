//! Stackelberg–Nash hierarchical control of clamped fourth-order parabolic equations.

pub mod carleman;
pub mod error;
pub mod expr;
pub mod hum;
pub mod linalg;
pub mod mesh;
pub mod nash;
pub mod operators;
pub mod presets;
pub mod semilinear;

pub use error::{Error, Result};
