//! Guide chapters, compiled here so `cargo test` runs their snippets.
//!
//! mdbook cannot link the workspace crates when testing a book, so each
//! chapter is attached as the documentation of an empty module instead.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tensors.md")]
pub mod tensors {}

#[doc = include_str!("../../../book/src/attention.md")]
pub mod attention {}

#[doc = include_str!("../../../book/src/fusion.md")]
pub mod fusion {}

#[doc = include_str!("../../../book/src/ctc-metrics.md")]
pub mod ctc_metrics {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
