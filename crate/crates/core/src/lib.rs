//! Attention-mask schemes for transformer in-context learning on synthetic
//! regression: auto-regressive, prefix, bag-of-examples, and the invariant
//! scheme with duplicated leave-one-out context.

pub mod error;
pub mod gd_equivalence;
pub mod harness;
pub mod layout;
pub mod masks;
pub mod model;
pub mod numerics;
pub mod tasks;

pub use error::{Error, Result};
