//! The guide in `book/`, compiled so its snippets run as doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/mazes.md")]
pub mod mazes {}

#[doc = include_str!("../../../book/src/histograms.md")]
pub mod histograms {}

#[doc = include_str!("../../../book/src/checkpoints.md")]
pub mod checkpoints {}

#[doc = include_str!("../../../book/src/planning.md")]
pub mod planning {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
