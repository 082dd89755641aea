//! The guide in `book/`, compiled so that its snippets run as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/autograd.md")]
pub mod autograd {}

#[doc = include_str!("../../../book/src/geometry.md")]
pub mod geometry {}

#[doc = include_str!("../../../book/src/backbone.md")]
pub mod backbone {}

#[doc = include_str!("../../../book/src/dvae.md")]
pub mod dvae {}

#[doc = include_str!("../../../book/src/distill.md")]
pub mod distill {}

#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
