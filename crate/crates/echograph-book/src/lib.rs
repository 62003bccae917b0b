//! mdbook cannot run a book's code fences as tests, so this crate includes
//! every chapter as a doc comment and lets `cargo test --doc` do the work.
//! One module per chapter keeps failures attributable to their source file.

#[doc = include_str!("../../../book/src/overview.md")]
pub mod overview {}
#[doc = include_str!("../../../book/src/tensors.md")]
pub mod tensors {}
#[doc = include_str!("../../../book/src/layers.md")]
pub mod layers {}
#[doc = include_str!("../../../book/src/synthetic-data.md")]
pub mod synthetic_data {}
#[doc = include_str!("../../../book/src/sampling.md")]
pub mod sampling {}
#[doc = include_str!("../../../book/src/graph.md")]
pub mod graph {}
#[doc = include_str!("../../../book/src/regression.md")]
pub mod regression {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
