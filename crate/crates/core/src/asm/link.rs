use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::parse::{Operand, Parser, SymOp, SymbolicInstruction, SymbolicProgram};
use crate::error::{Error, Result};
use crate::isa::{Instr, Opcode, REG_RA, REG_TRUE};

/// Linked programs laid out in one line space.
#[derive(Clone, Debug, PartialEq)]
pub struct Library {
    programs: Vec<SymbolicProgram>,
    entry_points: BTreeMap<String, usize>,
    code: Vec<Instr>,
    /// For each machine line: (program index, symbolic line index, produced by a macro).
    origin: Vec<(usize, usize, bool)>,
}

impl Library {
    pub fn programs(&self) -> &[SymbolicProgram] {
        &self.programs
    }

    pub fn entry_points(&self) -> &BTreeMap<String, usize> {
        &self.entry_points
    }

    pub fn entry(&self, name: &str) -> Result<usize> {
        self.entry_points
            .get(name)
            .copied()
            .ok_or_else(|| Error::Link(format!("no program named `{name}`")))
    }

    /// Machine code after macro lowering.
    pub fn code(&self) -> &[Instr] {
        &self.code
    }

    pub fn len(&self) -> usize {
        self.code.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code.is_empty()
    }

    /// Global line range occupied by program `name`.
    pub fn line_range(&self, name: &str) -> Result<std::ops::Range<usize>> {
        let idx = self
            .programs
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::Link(format!("no program named `{name}`")))?;
        let start = self.origin.iter().position(|o| o.0 == idx).unwrap_or(0);
        let end = self.origin.iter().rposition(|o| o.0 == idx).map_or(start, |e| e + 1);
        Ok(start..end)
    }

    /// The lowered code as a label-free symbolic program.
    pub fn machine_program(&self) -> SymbolicProgram {
        machine_listing("library", &self.code)
    }

    /// User-written instructions that overwrite the reserved registers r0 and r1.
    pub fn lint(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        for (line, (instr, &(p, s, from_macro))) in self.code.iter().zip(&self.origin).enumerate() {
            if from_macro || !instr.op.has_dest() {
                continue;
            }
            if instr.dst == REG_TRUE || instr.dst == REG_RA {
                let prog = &self.programs[p];
                warnings.push(format!(
                    "{}:{}: line {line} `{}` writes reserved register r{}",
                    prog.name, prog.source_lines[s], prog.lines[s], instr.dst
                ));
            }
        }
        warnings
    }
}

/// Canonical symbolic form of machine instructions.
pub fn machine_listing(name: &str, code: &[Instr]) -> SymbolicProgram {
    use Operand::{Imm, Reg};
    let lines = code
        .iter()
        .map(|i| {
            let operands = match i.op {
                Opcode::Halt => vec![],
                Opcode::Jump => vec![Reg(i.a1), Imm(i.a2)],
                Opcode::JumpR | Opcode::Write => vec![Reg(i.a1), Reg(i.a2)],
                Opcode::Store => vec![Reg(i.dst)],
                Opcode::Read | Opcode::Copy | Opcode::Inc | Opcode::Dec => vec![Reg(i.a1), Reg(i.dst)],
                Opcode::Set => vec![Imm(i.a1), Reg(i.dst)],
                Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::Max | Opcode::Min => {
                    vec![Reg(i.a1), Reg(i.a2), Reg(i.dst)]
                }
            };
            SymbolicInstruction {
                op: SymOp::Machine(i.op),
                operands,
            }
        })
        .collect();
    SymbolicProgram {
        name: name.to_string(),
        lines,
        labels: BTreeMap::new(),
        source_lines: (1..=code.len()).collect(),
    }
}

fn lowered_len(inst: &SymbolicInstruction) -> usize {
    match inst.op {
        SymOp::Call | SymOp::Ret => 2,
        SymOp::Machine(_) => 1,
    }
}

fn reg(o: &Operand) -> usize {
    match o {
        Operand::Reg(r) | Operand::Imm(r) => *r,
        Operand::Label(_) => unreachable!("parser guarantees register operands"),
    }
}

/// Concatenates programs, resolves labels to global lines and lowers
/// `call f` to `store r1; jump r0 entry(f)` and `ret` to `inc r1 r1; jumpr r0 r1`.
///
/// `store` saves the address of the following line, so the return path
/// increments it once to land after the call's jump.
pub fn link(programs: &[SymbolicProgram], n: usize) -> Result<Library> {
    let mut seen = HashSet::new();
    for p in programs {
        if !seen.insert(p.name.as_str()) {
            return Err(Error::Link(format!("program `{}` defined twice", p.name)));
        }
    }

    // global line of each symbolic instruction, plus each program's end
    let mut starts: Vec<Vec<usize>> = Vec::with_capacity(programs.len());
    let mut entry_points = BTreeMap::new();
    let mut cursor = 0;
    for p in programs {
        entry_points.insert(p.name.clone(), cursor);
        let mut at = Vec::with_capacity(p.len() + 1);
        for inst in &p.lines {
            at.push(cursor);
            cursor += lowered_len(inst);
        }
        at.push(cursor);
        starts.push(at);
    }
    if cursor > n {
        return Err(Error::Link(format!(
            "linked library has {cursor} lines but word size is {n}"
        )));
    }

    let mut code = Vec::with_capacity(cursor);
    let mut origin = Vec::with_capacity(cursor);
    for (pi, p) in programs.iter().enumerate() {
        let target = |o: &Operand| -> Result<usize> {
            match o {
                Operand::Imm(v) => Ok(*v),
                Operand::Label(l) => p
                    .labels
                    .get(l)
                    .map(|&idx| starts[pi][idx])
                    .ok_or_else(|| Error::Link(format!("{}: undefined label `{l}`", p.name))),
                Operand::Reg(r) => Ok(*r),
            }
        };
        for (si, inst) in p.lines.iter().enumerate() {
            let ops = &inst.operands;
            let lowered: Vec<Instr> = match inst.op {
                SymOp::Call => {
                    let callee = match &ops[0] {
                        Operand::Label(name) => name,
                        other => return Err(Error::Link(format!("bad call target {other}"))),
                    };
                    let entry = *entry_points.get(callee).ok_or_else(|| {
                        Error::Link(format!("{}: call to unknown program `{callee}`", p.name))
                    })?;
                    vec![
                        Instr::new(Opcode::Store, 0, 0, REG_RA),
                        Instr::new(Opcode::Jump, REG_TRUE, entry, REG_TRUE),
                    ]
                }
                SymOp::Ret => vec![
                    Instr::new(Opcode::Inc, REG_RA, 0, REG_RA),
                    Instr::new(Opcode::JumpR, REG_TRUE, REG_RA, REG_TRUE),
                ],
                SymOp::Machine(op) => vec![match op {
                    Opcode::Halt => Instr::new(op, 0, 0, 0),
                    Opcode::Jump => Instr::new(op, reg(&ops[0]), target(&ops[1])?, reg(&ops[0])),
                    Opcode::JumpR | Opcode::Write => {
                        Instr::new(op, reg(&ops[0]), reg(&ops[1]), reg(&ops[0]))
                    }
                    Opcode::Store => Instr::new(op, 0, 0, reg(&ops[0])),
                    Opcode::Read | Opcode::Copy | Opcode::Set | Opcode::Inc | Opcode::Dec => {
                        Instr::new(op, reg(&ops[0]), 0, reg(&ops[1]))
                    }
                    Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::Max | Opcode::Min => {
                        Instr::new(op, reg(&ops[0]), reg(&ops[1]), reg(&ops[2]))
                    }
                }],
            };
            let from_macro = lowered.len() > 1;
            for i in lowered {
                code.push(i);
                origin.push((pi, si, from_macro));
            }
        }
    }
    for i in &code {
        if i.op == Opcode::Jump && i.a2 >= n {
            return Err(Error::Link(format!("jump target {} outside word size {n}", i.a2)));
        }
    }

    Ok(Library {
        programs: programs.to_vec(),
        entry_points,
        code,
        origin,
    })
}

/// JSON manifest naming each program and the file holding its source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub programs: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub source: String,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Parses every listed source (relative to the manifest's directory) and links them.
    pub fn link(&self, base: &Path, parser: &Parser) -> Result<Library> {
        let programs = self
            .programs
            .iter()
            .map(|e| {
                let text = std::fs::read_to_string(base.join(&e.source))?;
                Ok(parser.parse(&e.name, &text)?)
            })
            .collect::<Result<Vec<_>>>()?;
        link(&programs, parser.n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(name: &str, text: &str) -> SymbolicProgram {
        Parser::new(16).parse(name, text).unwrap()
    }

    #[test]
    fn single_program_without_calls() {
        let lib = link(&[parse("p", "set 3 r2\nhalt")], 16).unwrap();
        assert_eq!(lib.entry("p").unwrap(), 0);
        assert_eq!(
            lib.code(),
            &[Instr::new(Opcode::Set, 3, 0, 2), Instr::new(Opcode::Halt, 0, 0, 0)]
        );
        assert!(lib.lint().is_empty());
    }

    #[test]
    fn call_lowers_to_store_then_jump() {
        let main = parse("main", "set 2 r2\ncall double\nhalt");
        let double = parse("double", "add r2 r2 r2\nret");
        let lib = link(&[main, double], 16).unwrap();
        let entry = lib.entry("double").unwrap();
        assert_eq!(entry, 4);
        assert_eq!(lib.code()[1], Instr::new(Opcode::Store, 0, 0, REG_RA));
        assert_eq!(lib.code()[2], Instr::new(Opcode::Jump, REG_TRUE, entry, REG_TRUE));
        assert_eq!(lib.code()[5], Instr::new(Opcode::Inc, REG_RA, 0, REG_RA));
        assert_eq!(lib.code()[6], Instr::new(Opcode::JumpR, REG_TRUE, REG_RA, REG_TRUE));
        assert_eq!(lib.line_range("double").unwrap(), 4..7);
        assert!(lib.lint().is_empty());
    }

    #[test]
    fn labels_shift_past_expanded_macros() {
        let main = parse("main", "call f\nloop: jump r0 loop");
        let f = parse("f", "ret");
        let lib = link(&[main, f], 16).unwrap();
        assert_eq!(lib.code()[2], Instr::new(Opcode::Jump, 0, 2, 0));
    }

    #[test]
    fn link_errors() {
        let e = link(&[parse("m", "call sort2")], 16).unwrap_err();
        assert!(e.to_string().contains("sort2"));
        let p = parse("m", "halt");
        assert!(link(&[p.clone(), p], 16).is_err());
        let big = parse("big", &"halt\n".repeat(10));
        assert!(link(&[big.clone(), SymbolicProgram { name: "b2".into(), ..big }], 16).is_err());
    }

    #[test]
    fn lint_flags_reserved_register_writes() {
        let lib = link(&[parse("p", "read r3 r1\nhalt")], 16).unwrap();
        assert_eq!(lib.lint().len(), 1);
    }
}
