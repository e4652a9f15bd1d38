//! Assembly front end: parser, linker, reference interpreter and decompiler.

mod decompile;
mod link;
mod oracle;
mod parse;

pub use decompile::{decompile, Decompiled};
pub use link::{link, machine_listing, Library, Manifest, ManifestEntry};
pub use oracle::{run_oracle, InitState, OracleState, RunStatus};
pub use parse::{
    Operand, ParseError, ParseErrorKind, Parser, SymOp, SymbolicInstruction, SymbolicProgram,
};
