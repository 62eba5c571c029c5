//! Minimal reverse-mode differentiation engine over dense matrices, plus the
//! Adam optimizer. Every trainable component in this crate builds its forward
//! pass from these primitives.

mod adam;
mod fd;
mod tape;

pub use adam::{adam_step, AdamState};
pub use fd::finite_difference;
pub use tape::{Bindings, NodeId, Tape};
