//! Assembly programs shipped with the crate.

use crate::asm::{link, Library, Parser, SymbolicProgram};
use crate::error::Result;

pub struct Source {
    pub name: &'static str,
    pub text: &'static str,
    /// False for fragments that run off their end instead of halting.
    pub halts: bool,
}

macro_rules! source {
    ($name:literal, $halts:expr) => {
        Source {
            name: $name,
            text: include_str!(concat!("../corpus/", $name, ".asm")),
            halts: $halts,
        }
    };
}

pub const SOURCES: &[Source] = &[
    source!("listing", false),
    source!("fib", true),
    source!("sort", true),
    source!("arith", true),
    source!("countdown", true),
    source!("calls", true),
    source!("double", true),
    source!("add_mod", true),
    source!("sub_mod", true),
    source!("mul_mod", true),
    source!("max_mod", true),
    source!("appendix_a", false),
    source!("appendix_b", false),
    source!("appendix_c", false),
];

pub fn source(name: &str) -> Option<&'static Source> {
    SOURCES.iter().find(|s| s.name == name)
}

pub fn parse(name: &str, parser: &Parser) -> Result<SymbolicProgram> {
    let src = source(name)
        .ok_or_else(|| crate::Error::Link(format!("no corpus program `{name}`")))?;
    Ok(parser.parse(name, src.text)?)
}

/// Parses and links the named corpus programs, in order, at word size `n`.
pub fn library(names: &[&str], n: usize) -> Result<Library> {
    let parser = Parser::new(n);
    let programs = names
        .iter()
        .map(|name| parse(name, &parser))
        .collect::<Result<Vec<_>>>()?;
    link(&programs, n)
}

/// The library used by the modular-arithmetic task.
pub const MOD_ARITH: [&str; 4] = ["add_mod", "sub_mod", "mul_mod", "max_mod"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_source_parses_at_32() {
        let parser = Parser::new(32);
        for s in SOURCES {
            parse(s.name, &parser).unwrap();
        }
    }

    #[test]
    fn fib_loop_is_eight_lines() {
        let fib = parse("fib", &Parser::new(16)).unwrap();
        assert_eq!(fib.len(), 9);
        assert_eq!(fib.labels["fib_loop"], 0);
    }

    #[test]
    fn libraries_link() {
        assert_eq!(library(&MOD_ARITH, 16).unwrap().len(), 16);
        let calls = library(&["calls", "double"], 16).unwrap();
        assert!(calls.lint().is_empty());
        assert!(!library(&["listing"], 16).unwrap().lint().is_empty());
    }
}
