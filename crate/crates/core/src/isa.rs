//! Machine instruction set.

use serde::{Deserialize, Serialize};

/// Opcodes executed by the interpreter. `call` and `ret` are assembler
/// macros and never reach the machine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Opcode {
    Halt,
    Jump,
    JumpR,
    Store,
    Read,
    Write,
    Copy,
    Set,
    Inc,
    Dec,
    Add,
    Sub,
    Mul,
    Max,
    Min,
}

impl Opcode {
    /// The default instruction set, in table order.
    pub const ALL: [Opcode; 15] = [
        Opcode::Halt,
        Opcode::Jump,
        Opcode::JumpR,
        Opcode::Store,
        Opcode::Read,
        Opcode::Write,
        Opcode::Copy,
        Opcode::Set,
        Opcode::Inc,
        Opcode::Dec,
        Opcode::Add,
        Opcode::Sub,
        Opcode::Mul,
        Opcode::Max,
        Opcode::Min,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Opcode::Halt => "halt",
            Opcode::Jump => "jump",
            Opcode::JumpR => "jumpr",
            Opcode::Store => "store",
            Opcode::Read => "read",
            Opcode::Write => "write",
            Opcode::Copy => "copy",
            Opcode::Set => "set",
            Opcode::Inc => "inc",
            Opcode::Dec => "dec",
            Opcode::Add => "add",
            Opcode::Sub => "sub",
            Opcode::Mul => "mul",
            Opcode::Max => "max",
            Opcode::Min => "min",
        }
    }

    pub fn from_name(name: &str) -> Option<Opcode> {
        Opcode::ALL.iter().copied().find(|op| op.name() == name)
    }

    pub fn index(self) -> usize {
        Opcode::ALL.iter().position(|&o| o == self).unwrap()
    }

    /// Value the ALU produces for operands `a` and `b` modulo `n`.
    ///
    /// Control-flow and data-movement opcodes pass `a` through; their real
    /// effects live in the interpreter.
    pub fn eval(self, a: usize, b: usize, n: usize) -> usize {
        match self {
            Opcode::Add => (a + b) % n,
            Opcode::Sub => (a + n - b % n) % n,
            Opcode::Mul => (a * b) % n,
            Opcode::Inc => (a + 1) % n,
            Opcode::Dec => (a + n - 1) % n,
            Opcode::Max => a.max(b) % n,
            Opcode::Min => a.min(b) % n,
            Opcode::Halt
            | Opcode::Jump
            | Opcode::JumpR
            | Opcode::Store
            | Opcode::Read
            | Opcode::Write
            | Opcode::Copy
            | Opcode::Set => a % n,
        }
    }

    /// True when the opcode writes a meaningful result to its destination register.
    pub fn has_dest(self) -> bool {
        matches!(
            self,
            Opcode::Store
                | Opcode::Read
                | Opcode::Copy
                | Opcode::Set
                | Opcode::Inc
                | Opcode::Dec
                | Opcode::Add
                | Opcode::Sub
                | Opcode::Mul
                | Opcode::Max
                | Opcode::Min
        )
    }
}

impl std::fmt::Display for Opcode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A fully numeric machine instruction: every operand is an index into
/// value space (`0..n`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instr {
    pub op: Opcode,
    pub a1: usize,
    pub a2: usize,
    pub dst: usize,
}

impl Instr {
    pub fn new(op: Opcode, a1: usize, a2: usize, dst: usize) -> Self {
        Instr { op, a1, a2, dst }
    }
}

/// Register 0 always holds 1 and serves as the unconditional jump flag.
pub const REG_TRUE: usize = 0;
/// Register 1 holds the return address written by `call`.
pub const REG_RA: usize = 1;
