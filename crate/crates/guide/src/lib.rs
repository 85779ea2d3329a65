//! The chapters of the book, compiled so their snippets run as doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/measures.md")]
pub mod measures {}

#[doc = include_str!("../../../book/src/quadratic-variation.md")]
pub mod quadratic_variation {}

#[doc = include_str!("../../../book/src/integral.md")]
pub mod integral {}

#[doc = include_str!("../../../book/src/spde.md")]
pub mod spde {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
