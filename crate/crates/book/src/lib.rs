//! The guide in `book/src`, one module per chapter, so that `cargo test`
//! runs every code listing as a doctest.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/rendering.md")]
pub mod rendering {}
#[doc = include_str!("../../../book/src/occupancy.md")]
pub mod occupancy {}
#[doc = include_str!("../../../book/src/gaussian-management.md")]
pub mod gaussian_management {}
#[doc = include_str!("../../../book/src/consistency.md")]
pub mod consistency {}
#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness {}
