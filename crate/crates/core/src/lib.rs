//! A differentiable register machine with a neural compiler for a small
//! assembly language.

pub mod asm;
pub mod circuits;
pub mod compiler;
pub mod corpus;
pub mod encodings;
pub mod error;
pub mod isa;
pub mod machine;
pub mod nn;
pub mod substrate;
pub mod tasks;

pub use error::{Error, Result};
