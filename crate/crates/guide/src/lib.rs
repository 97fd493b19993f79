//! Compiles the guide in `book/src` so `cargo test` runs its code blocks.
//!
//! mdbook cannot link the workspace crates into its own test runner, so each
//! chapter is attached to an empty module here and rustdoc tests it instead.

#[doc = include_str!("../../../book/src/overview.md")]
pub mod overview {}
#[doc = include_str!("../../../book/src/dynamics.md")]
pub mod dynamics {}
#[doc = include_str!("../../../book/src/qp.md")]
pub mod qp {}
#[doc = include_str!("../../../book/src/safety.md")]
pub mod safety {}
#[doc = include_str!("../../../book/src/sysid.md")]
pub mod sysid {}
#[doc = include_str!("../../../book/src/policy.md")]
pub mod policy {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
