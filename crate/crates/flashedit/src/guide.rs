//! Runs every code block in the book as a doc-test, keeping the guide in
//! sync with the library. mdbook itself cannot test blocks that use crate
//! dependencies, so the chapters are included here and `cargo test --doc`
//! does the work.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/scene-world.md")]
pub mod scene_world {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/editing.md")]
pub mod editing {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
