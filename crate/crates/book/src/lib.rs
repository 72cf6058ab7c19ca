//! Runs every Rust listing in the guide under `book/src` as a doctest.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/cohort.md")]
pub mod cohort {}
#[doc = include_str!("../../../book/src/fusion.md")]
pub mod fusion {}
#[doc = include_str!("../../../book/src/augmentation.md")]
pub mod augmentation {}
#[doc = include_str!("../../../book/src/loss.md")]
pub mod loss {}
#[doc = include_str!("../../../book/src/scoring.md")]
pub mod scoring {}
#[doc = include_str!("../../../book/src/formats.md")]
pub mod formats {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
