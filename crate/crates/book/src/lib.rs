//! Compiles every chapter of the guide as doctests, so the snippets in
//! `book/src` cannot drift from the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/hamming.md")]
pub mod hamming {}
#[doc = include_str!("../../../book/src/lhr.md")]
pub mod lhr {}
#[doc = include_str!("../../../book/src/wds.md")]
pub mod wds {}
#[doc = include_str!("../../../book/src/booster.md")]
pub mod booster {}
#[doc = include_str!("../../../book/src/mapping.md")]
pub mod mapping {}
#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
