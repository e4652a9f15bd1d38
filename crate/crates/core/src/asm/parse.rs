use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::isa::Opcode;

/// A symbolic opcode: a machine opcode or one of the linker macros.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SymOp {
    Machine(Opcode),
    Call,
    Ret,
}

impl SymOp {
    pub fn from_name(name: &str) -> Option<SymOp> {
        match name {
            "call" => Some(SymOp::Call),
            "ret" => Some(SymOp::Ret),
            other => Opcode::from_name(other).map(SymOp::Machine),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SymOp::Machine(op) => op.name(),
            SymOp::Call => "call",
            SymOp::Ret => "ret",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Operand {
    Reg(usize),
    Imm(usize),
    Label(String),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "r{r}"),
            Operand::Imm(v) => write!(f, "{v}"),
            Operand::Label(l) => f.write_str(l),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Reg,
    Imm,
    /// Line number or label.
    Target,
    /// Program name for `call`.
    Name,
}

/// Operand slots for each opcode; the flag marks an optional trailing slot
/// that defaults to the first operand (`inc r2` means `inc r2 r2`).
fn signature(op: SymOp) -> (&'static [Slot], bool) {
    use Slot::*;
    match op {
        SymOp::Machine(op) => match op {
            Opcode::Halt => (&[], false),
            Opcode::Jump => (&[Reg, Target], false),
            Opcode::JumpR => (&[Reg, Reg], false),
            Opcode::Store => (&[Reg], false),
            Opcode::Read | Opcode::Write | Opcode::Copy => (&[Reg, Reg], false),
            Opcode::Set => (&[Imm, Reg], false),
            Opcode::Inc | Opcode::Dec => (&[Reg, Reg], true),
            Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::Max | Opcode::Min => {
                (&[Reg, Reg, Reg], false)
            }
        },
        SymOp::Call => (&[Name], false),
        SymOp::Ret => (&[], false),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolicInstruction {
    pub op: SymOp,
    pub operands: Vec<Operand>,
}

impl fmt::Display for SymbolicInstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.op.name())?;
        for o in &self.operands {
            write!(f, " {o}")?;
        }
        Ok(())
    }
}

/// A parsed assembly program.
#[derive(Clone, Debug)]
pub struct SymbolicProgram {
    pub name: String,
    pub lines: Vec<SymbolicInstruction>,
    pub labels: BTreeMap<String, usize>,
    /// 1-based source line of each instruction.
    pub source_lines: Vec<usize>,
}

impl PartialEq for SymbolicProgram {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.lines == other.lines && self.labels == other.labels
    }
}

impl SymbolicProgram {
    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn calls(&self) -> impl Iterator<Item = &str> {
        self.lines.iter().filter_map(|l| match (&l.op, l.operands.first()) {
            (SymOp::Call, Some(Operand::Label(name))) => Some(name.as_str()),
            _ => None,
        })
    }
}

/// Canonical text: labels on their own lines, instructions indented,
/// registers written `rK`.
impl fmt::Display for SymbolicProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut by_line: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for (name, &line) in &self.labels {
            by_line.entry(line).or_default().push(name);
        }
        for (i, inst) in self.lines.iter().enumerate() {
            for label in by_line.remove(&i).unwrap_or_default() {
                writeln!(f, "{label}:")?;
            }
            writeln!(f, "    {inst}")?;
        }
        for labels in by_line.values() {
            for label in labels {
                writeln!(f, "{label}:")?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseErrorKind {
    UnknownOpcode(String),
    Arity {
        opcode: String,
        expected: String,
        found: usize,
    },
    UndefinedLabel(String),
    DuplicateLabel(String),
    ImmediateRange { value: usize, n: usize },
    RegisterRange { register: usize, registers: usize },
    BadOperand(String),
    BadLabel(String),
    TooLong { lines: usize, n: usize },
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::UnknownOpcode(op) => write!(f, "unknown opcode `{op}`"),
            ParseErrorKind::Arity {
                opcode,
                expected,
                found,
            } => write!(f, "`{opcode}` takes {expected} operand(s), found {found}"),
            ParseErrorKind::UndefinedLabel(l) => write!(f, "undefined label `{l}`"),
            ParseErrorKind::DuplicateLabel(l) => write!(f, "label `{l}` defined twice"),
            ParseErrorKind::ImmediateRange { value, n } => {
                write!(f, "immediate {value} does not fit word size {n}")
            }
            ParseErrorKind::RegisterRange {
                register,
                registers,
            } => write!(f, "register r{register} out of range (machine has {registers})"),
            ParseErrorKind::BadOperand(o) => write!(f, "malformed operand `{o}`"),
            ParseErrorKind::BadLabel(l) => write!(f, "malformed label `{l}`"),
            ParseErrorKind::TooLong { lines, n } => {
                write!(f, "program has {lines} instructions but word size is {n}")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("{program}:{line}:{column}: {kind}")]
pub struct ParseError {
    pub program: String,
    pub line: usize,
    pub column: usize,
    pub kind: ParseErrorKind,
}

/// Assembly parser for a machine with word size `n` and `registers` registers.
#[derive(Clone, Copy, Debug)]
pub struct Parser {
    pub n: usize,
    pub registers: usize,
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Whitespace-separated tokens with their 1-based columns.
fn tokens(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s + 1, &line[s..i]));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s + 1, &line[s..]));
    }
    out
}

impl Parser {
    pub fn new(n: usize) -> Self {
        Parser { n, registers: n }
    }

    pub fn with_registers(mut self, registers: usize) -> Self {
        self.registers = registers;
        self
    }

    pub fn parse(&self, name: &str, text: &str) -> Result<SymbolicProgram, ParseError> {
        let err = |line: usize, column: usize, kind| ParseError {
            program: name.to_string(),
            line,
            column,
            kind,
        };
        let mut lines = Vec::new();
        let mut source_lines = Vec::new();
        let mut labels = BTreeMap::new();
        // (label, line, column, instruction index) for later resolution
        let mut targets: Vec<(String, usize, usize)> = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let code = raw.split('#').next().unwrap_or("");
            let mut toks = tokens(code);
            while let Some(&(col, tok)) = toks.first() {
                let Some(label) = tok.strip_suffix(':') else { break };
                if !is_ident(label) {
                    return Err(err(lineno, col, ParseErrorKind::BadLabel(tok.to_string())));
                }
                if labels.insert(label.to_string(), lines.len()).is_some() {
                    return Err(err(lineno, col, ParseErrorKind::DuplicateLabel(label.to_string())));
                }
                toks.remove(0);
            }
            let Some(&(col, mnemonic)) = toks.first() else { continue };
            let op = SymOp::from_name(mnemonic)
                .ok_or_else(|| err(lineno, col, ParseErrorKind::UnknownOpcode(mnemonic.to_string())))?;
            let (slots, optional_last) = signature(op);
            let args = &toks[1..];
            let min = if optional_last { slots.len() - 1 } else { slots.len() };
            if args.len() < min || args.len() > slots.len() {
                let expected = if optional_last {
                    format!("{min} or {}", slots.len())
                } else {
                    slots.len().to_string()
                };
                return Err(err(
                    lineno,
                    col,
                    ParseErrorKind::Arity {
                        opcode: mnemonic.to_string(),
                        expected,
                        found: args.len(),
                    },
                ));
            }
            let mut operands = Vec::with_capacity(slots.len());
            for (&(acol, text), &slot) in args.iter().zip(slots) {
                let operand = self.operand(text, slot).map_err(|k| err(lineno, acol, k))?;
                if let Operand::Label(l) = &operand {
                    if slot == Slot::Target {
                        targets.push((l.clone(), lineno, acol));
                    }
                }
                operands.push(operand);
            }
            if operands.len() < slots.len() {
                operands.push(operands[0].clone());
            }
            lines.push(SymbolicInstruction { op, operands });
            source_lines.push(lineno);
        }

        for (label, line, column) in targets {
            if !labels.contains_key(&label) {
                return Err(err(line, column, ParseErrorKind::UndefinedLabel(label)));
            }
        }
        if lines.len() > self.n {
            return Err(err(
                1,
                1,
                ParseErrorKind::TooLong {
                    lines: lines.len(),
                    n: self.n,
                },
            ));
        }
        Ok(SymbolicProgram {
            name: name.to_string(),
            lines,
            labels,
            source_lines,
        })
    }

    fn operand(&self, text: &str, slot: Slot) -> Result<Operand, ParseErrorKind> {
        let bad = || ParseErrorKind::BadOperand(text.to_string());
        match slot {
            Slot::Reg => {
                let digits = text.strip_prefix('r').unwrap_or(text);
                let r: usize = digits.parse().map_err(|_| bad())?;
                if r >= self.registers {
                    return Err(ParseErrorKind::RegisterRange {
                        register: r,
                        registers: self.registers,
                    });
                }
                Ok(Operand::Reg(r))
            }
            Slot::Imm | Slot::Target => {
                if let Ok(v) = text.parse::<usize>() {
                    if v >= self.n {
                        return Err(ParseErrorKind::ImmediateRange { value: v, n: self.n });
                    }
                    Ok(Operand::Imm(v))
                } else if slot == Slot::Target && is_ident(text) {
                    Ok(Operand::Label(text.to_string()))
                } else {
                    Err(bad())
                }
            }
            Slot::Name => {
                if is_ident(text) {
                    Ok(Operand::Label(text.to_string()))
                } else {
                    Err(bad())
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LISTING: &str = "inc  2 2
fib_loop:
    write 3 2
    add   1 2 2
    read  3 1
    write 3 2
    inc   3 3
    jump  4 fib_loop
";

    fn kind(text: &str) -> ParseErrorKind {
        Parser::new(16).parse("t", text).unwrap_err().kind
    }

    #[test]
    fn parses_the_example_listing() {
        let p = Parser::new(16).parse("listing", LISTING).unwrap();
        assert_eq!(p.len(), 7);
        assert_eq!(p.labels["fib_loop"], 1);
        assert_eq!(p.source_lines, vec![1, 3, 4, 5, 6, 7, 8]);
        assert_eq!(
            p.lines[6].operands,
            vec![Operand::Reg(4), Operand::Label("fib_loop".into())]
        );
    }

    #[test]
    fn minimal_program() {
        let p = Parser::new(4).parse("h", "halt").unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.lines[0].op, SymOp::Machine(Opcode::Halt));
    }

    #[test]
    fn distinct_diagnostics() {
        assert_eq!(kind("jump 4 nowhere"), ParseErrorKind::UndefinedLabel("nowhere".into()));
        assert_eq!(kind("frob 1 2"), ParseErrorKind::UnknownOpcode("frob".into()));
        assert!(matches!(kind("add 1 2"), ParseErrorKind::Arity { found: 2, .. }));
        assert_eq!(kind("a:\nhalt\na:\nhalt"), ParseErrorKind::DuplicateLabel("a".into()));
        assert_eq!(kind("set 16 r2"), ParseErrorKind::ImmediateRange { value: 16, n: 16 });
        assert!(matches!(kind("copy r99 r2"), ParseErrorKind::RegisterRange { .. }));
        assert_eq!(kind("copy x r2"), ParseErrorKind::BadOperand("x".into()));
    }

    #[test]
    fn diagnostics_carry_positions() {
        let e = Parser::new(16).parse("p", "halt\n  frob 1").unwrap_err();
        assert_eq!((e.line, e.column), (2, 3));
        assert_eq!(e.to_string(), "p:2:3: unknown opcode `frob`");
    }

    #[test]
    fn comments_inline_labels_and_optional_dest() {
        let p = Parser::new(16)
            .parse("p", "# header\nstart: inc r2 # bump\n  jump r0 start\n")
            .unwrap();
        assert_eq!(p.labels["start"], 0);
        assert_eq!(p.lines[0].operands, vec![Operand::Reg(2), Operand::Reg(2)]);
    }

    #[test]
    fn pretty_print_reparses_to_same_program() {
        let p = Parser::new(16).parse("listing", LISTING).unwrap();
        let q = Parser::new(16).parse("listing", &p.to_string()).unwrap();
        assert_eq!(p, q);
    }
}
