//! The differentiable interpreter.
//!
//! Every step fetches a mixture of instructions, runs all of them in
//! superposition and blends their effects by opcode mass. With dirac
//! programs and states this reduces to ordinary execution.

use serde::{Deserialize, Serialize};

use crate::asm::{InitState, RunStatus};
use crate::compiler::{Field, MachineLayout, ProgramMatrix};
use crate::encodings::{decode, AluTable, Word};
use crate::error::{Error, Result};
use crate::isa::Opcode;
use crate::substrate::{concat, mix, Tape, Tensor, Var};

/// Plain machine state: memory `M`, registers `R`, counter `c` and halting mass `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct MachineState {
    pub memory: Tensor,
    pub registers: Tensor,
    pub counter: Tensor,
    pub halted: f64,
}

impl MachineState {
    /// Dirac state holding the given integers.
    pub fn from_init(init: &InitState, layout: &MachineLayout) -> Result<Self> {
        init.validate(layout.n)?;
        if init.registers.len() != layout.registers || init.memory.len() != layout.mem_size {
            return Err(Error::Shape(format!(
                "initial state has {} registers and {} cells; layout wants {} and {}",
                init.registers.len(),
                init.memory.len(),
                layout.registers,
                layout.mem_size
            )));
        }
        let n = layout.n;
        let rows = |vals: &[usize]| {
            let mut t = Tensor::zeros(&[vals.len(), n]);
            for (i, &v) in vals.iter().enumerate() {
                t.data_mut()[i * n + v] = 1.0;
            }
            t
        };
        let mut counter = Tensor::zeros(&[n]);
        counter.data_mut()[init.pc] = 1.0;
        Ok(MachineState {
            memory: rows(&init.memory),
            registers: rows(&init.registers),
            counter,
            halted: 0.0,
        })
    }

    pub fn decoded_memory(&self) -> Vec<usize> {
        (0..self.memory.rows()).map(|i| decode(self.memory.row(i))).collect()
    }

    pub fn decoded_registers(&self) -> Vec<usize> {
        (0..self.registers.rows()).map(|i| decode(self.registers.row(i))).collect()
    }

    pub fn decoded_counter(&self) -> usize {
        decode(self.counter.data())
    }

    /// Largest deviation of any row of `M`, `R` or `c` from summing to one.
    pub fn normalization_error(&self) -> f64 {
        let mut worst = (self.counter.data().iter().sum::<f64>() - 1.0).abs();
        for t in [&self.memory, &self.registers] {
            for i in 0..t.rows() {
                worst = worst.max((t.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
        worst
    }

    /// Largest elementwise difference across all components.
    pub fn max_abs_diff(&self, other: &MachineState) -> f64 {
        self.memory
            .max_abs_diff(&other.memory)
            .max(self.registers.max_abs_diff(&other.registers))
            .max(self.counter.max_abs_diff(&other.counter))
            .max((self.halted - other.halted).abs())
    }

    /// Puts the state on `tape` as constants.
    pub fn constant<'t>(&self, tape: &'t Tape) -> TapeState<'t> {
        TapeState {
            memory: tape.constant(self.memory.clone()),
            registers: tape.constant(self.registers.clone()),
            counter: tape.constant(self.counter.clone()),
            halted: tape.scalar(self.halted),
        }
    }
}

/// Machine state recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeState<'t> {
    pub memory: Var<'t>,
    pub registers: Var<'t>,
    pub counter: Var<'t>,
    pub halted: Var<'t>,
}

impl<'t> TapeState<'t> {
    pub fn value(&self) -> MachineState {
        MachineState {
            memory: self.memory.value(),
            registers: self.registers.value(),
            counter: self.counter.value(),
            halted: self.halted.item(),
        }
    }
}

/// A fetched instruction: opcode distribution plus three operand Words.
#[derive(Clone, Copy, Debug)]
pub struct Instruction<'t> {
    pub op: Var<'t>,
    pub a1: Var<'t>,
    pub a2: Var<'t>,
    pub dst: Var<'t>,
}

/// `c`-weighted mixture of program lines, split into fields.
pub fn fetch<'t>(rho: Var<'t>, c: Var<'t>, layout: &MachineLayout) -> Result<Instruction<'t>> {
    let mixed = c.contract(rho, &[(0, 0)])?;
    let field = |f: Field| {
        let r = layout.field_range(f);
        mixed.slice(0, r.start, r.len())
    };
    Ok(Instruction {
        op: field(Field::Opcode),
        a1: field(Field::Arg1),
        a2: field(Field::Arg2),
        dst: field(Field::Dest),
    })
}

/// `a`-weighted mixture of the rows of `m`.
pub fn read_mem<'t>(m: Var<'t>, a: Var<'t>) -> Result<Var<'t>> {
    a.contract(m, &[(0, 0)])
}

/// `(1 - a) ⊙ R + a ⊗ value`
pub fn write_reg<'t>(r: Var<'t>, a: Var<'t>, value: Var<'t>) -> Result<Var<'t>> {
    let written = a.contract(value, &[])?;
    Ok(r.row_scale(a.complement()).add(written))
}

/// Memory write mixed in with probability `p`.
pub fn write_mem<'t>(m: Var<'t>, a: Var<'t>, value: Var<'t>, p: Var<'t>) -> Result<Var<'t>> {
    let written = write_reg(m, a, value)?;
    mix(p, m, written)
}

/// How long to run and when to stop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Runs the full budget, accumulating halting mass.
    Soft,
    /// Stops once halting mass reaches the threshold.
    Thresholded,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Mode::Soft),
            "thresholded" => Ok(Mode::Thresholded),
            other => Err(Error::Usage(format!(
                "unknown mode `{other}` (expected soft or thresholded)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub max_steps: usize,
    pub mode: Mode,
    pub threshold: f64,
}

impl RunConfig {
    pub fn thresholded(max_steps: usize) -> Self {
        RunConfig {
            max_steps,
            mode: Mode::Thresholded,
            threshold: 0.99,
        }
    }

    pub fn soft(max_steps: usize) -> Self {
        RunConfig {
            max_steps,
            mode: Mode::Soft,
            threshold: 0.99,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::Usage("max_steps must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Usage(format!("threshold {} outside (0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// A run recorded on a tape.
pub struct TapeRun<'t> {
    pub state: TapeState<'t>,
    /// Halting mass gained at each step.
    pub increments: Vec<Var<'t>>,
    /// `Σ Δh_t · M_{t-1} + (1 - h_T) · M_T`
    pub expected_memory: Var<'t>,
    pub steps: usize,
    pub status: RunStatus,
}

/// Which memory a loss reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Halting-weighted expectation over steps.
    #[default]
    Expected,
    /// Memory after the last step.
    Final,
}

impl<'t> TapeRun<'t> {
    pub fn memory(&self, mode: LossMode) -> Var<'t> {
        match mode {
            LossMode::Expected => self.expected_memory,
            LossMode::Final => self.state.memory,
        }
    }
}

/// Mean cross-entropy between memory rows and target Words.
pub fn loss_on_memory<'t>(memory: Var<'t>, targets: &[(usize, Word)]) -> Result<Var<'t>> {
    let shape = memory.shape();
    if targets.is_empty() {
        return Err(Error::Usage("no loss targets".into()));
    }
    let ids: Vec<usize> = targets.iter().map(|t| t.0).collect();
    if let Some(&bad) = ids.iter().find(|&&a| a >= shape[0]) {
        return Err(Error::Range { value: bad, size: shape[0] });
    }
    let mut gold = Vec::with_capacity(targets.len() * shape[1]);
    for (_, w) in targets {
        if w.len() != shape[1] {
            return Err(Error::Shape(format!("target of width {} vs {}", w.len(), shape[1])));
        }
        gold.extend_from_slice(w.probs());
    }
    let gold = memory.tape().constant(Tensor::matrix(targets.len(), shape[1], gold)?);
    let rows = memory.gather_rows(&ids);
    Ok(rows.ln().mul(gold).sum().scale(-1.0 / targets.len() as f64))
}

/// Serializable summary of a run.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub mode: Mode,
    pub status: RunStatus,
    pub steps: usize,
    pub halted: f64,
    pub halting_increments: Vec<f64>,
    pub memory: Vec<usize>,
    pub registers: Vec<usize>,
    pub counter: usize,
    pub expected_memory: Vec<usize>,
    #[serde(skip)]
    pub state: MachineState,
}

/// Interpreter for one layout, holding its ALU table.
#[derive(Clone, Debug)]
pub struct Machine {
    layout: MachineLayout,
    table: AluTable,
    /// Opcode mask excluding the data paths that bypass the table.
    table_mask: Tensor,
    halt_row: Vec<f64>,
}

impl Machine {
    pub fn new(layout: MachineLayout) -> Result<Self> {
        layout.validate()?;
        let table = AluTable::new(&layout.ops, layout.n)?;
        let mut table_mask = Tensor::full(&[layout.num_ops()], 1.0);
        for op in [Opcode::Read, Opcode::Store, Opcode::Set] {
            if let Ok(i) = layout.op_index(op) {
                table_mask.data_mut()[i] = 0.0;
            }
        }
        let mut halt_row = vec![0.0; layout.width()];
        halt_row[layout.op_index(Opcode::Halt)?] = 1.0;
        for f in [Field::Arg1, Field::Arg2, Field::Dest] {
            halt_row[layout.field_range(f).start] = 1.0;
        }
        Ok(Machine {
            layout,
            table,
            table_mask,
            halt_row,
        })
    }

    pub fn layout(&self) -> &MachineLayout {
        &self.layout
    }

    pub fn table(&self) -> &AluTable {
        &self.table
    }

    /// Extends an `L`-line program to `n` lines with halt rows.
    pub fn pad<'t>(&self, rho: Var<'t>) -> Result<Var<'t>> {
        let shape = rho.shape();
        let (n, w) = (self.layout.n, self.layout.width());
        if shape.len() != 2 || shape[1] != w || shape[0] == 0 || shape[0] > n {
            return Err(Error::Shape(format!("program of shape {shape:?} for width {w}, n {n}")));
        }
        if shape[0] == n {
            return Ok(rho);
        }
        let extra = n - shape[0];
        let pad: Vec<f64> = std::iter::repeat_n(&self.halt_row, extra).flatten().copied().collect();
        let pad = rho.tape().constant(Tensor::matrix(extra, w, pad)?);
        Ok(concat(&[rho, pad], 0))
    }

    fn op_mass<'t>(&self, f: Var<'t>, op: Opcode) -> Var<'t> {
        match self.layout.op_index(op) {
            Ok(i) => f.at(i),
            Err(_) => f.tape().scalar(0.0),
        }
    }

    fn operands<'t>(&self, inst: &Instruction<'t>, regs: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let r = self.layout.registers;
        let u = inst.a1.slice(0, 0, r).contract(regs, &[(0, 0)])?;
        let v = inst.a2.slice(0, 0, r).contract(regs, &[(0, 0)])?;
        Ok((u, v))
    }

    /// Table output for a fetched instruction, with operands resolved through `regs`.
    pub fn alu<'t>(&self, inst: &Instruction<'t>, regs: Var<'t>) -> Result<Var<'t>> {
        let (u, v) = self.operands(inst, regs)?;
        Var::lookup(self.table.index(), inst.op, u, v)
    }

    /// One superposed step on a padded `n`-line program. Returns the new
    /// state and the halting mass gained.
    pub fn step<'t>(&self, s: &TapeState<'t>, rho: Var<'t>) -> Result<(TapeState<'t>, Var<'t>)> {
        let layout = &self.layout;
        let tape = rho.tape();
        let inst = fetch(rho, s.counter, layout)?;
        let f = inst.op;
        let (u, v) = self.operands(&inst, s.registers)?;
        let m = |op| self.op_mass(f, op);

        let through_table = f.mul(tape.constant(self.table_mask.clone()));
        let addr = u.slice(0, 0, layout.mem_size);
        let next = s.counter.roll(1);
        let out = Var::lookup(self.table.index(), through_table, u, v)?
            .add(read_mem(s.memory, addr)?.scale_by(m(Opcode::Read)))
            .add(next.scale_by(m(Opcode::Store)))
            .add(inst.a1.scale_by(m(Opcode::Set)));
        let registers = write_reg(s.registers, inst.dst.slice(0, 0, layout.registers), out)?;
        let memory = write_mem(s.memory, addr, v, m(Opcode::Write))?;

        let p = u.at(1);
        let jump = m(Opcode::Jump).mul(p);
        let jumpr = m(Opcode::JumpR).mul(p);
        let counter = next
            .scale_by(jump.add(jumpr).complement())
            .add(inst.a2.scale_by(jump))
            .add(v.scale_by(jumpr));

        let halt = m(Opcode::Halt);
        let gained = s.halted.complement().mul(halt);
        let state = TapeState {
            memory: mix(halt, memory, s.memory)?,
            registers: mix(halt, registers, s.registers)?,
            counter: mix(halt, counter, s.counter)?,
            halted: s.halted.add(gained),
        };
        Ok((state, gained))
    }

    /// Runs on a tape so gradients reach `rho` and `s0`.
    pub fn run_tape<'t>(&self, rho: Var<'t>, s0: TapeState<'t>, config: &RunConfig) -> Result<TapeRun<'t>> {
        config.validate()?;
        let rho = self.pad(rho)?;
        let mut s = s0;
        let mut increments = Vec::new();
        let mut expected: Option<Var<'t>> = None;
        let mut status = RunStatus::Timeout;
        for _ in 0..config.max_steps {
            let (next, gained) = self.step(&s, rho)?;
            let term = s.memory.scale_by(gained);
            expected = Some(match expected {
                Some(e) => e.add(term),
                None => term,
            });
            increments.push(gained);
            s = next;
            let h = s.halted.item();
            if !h.is_finite() {
                return Err(Error::NonFinite("halting mass".into()));
            }
            if h >= config.threshold {
                status = RunStatus::Halted;
                if config.mode == Mode::Thresholded {
                    break;
                }
            }
        }
        let tail = s.memory.scale_by(s.halted.complement());
        let expected_memory = match expected {
            Some(e) => e.add(tail),
            None => tail,
        };
        Ok(TapeRun {
            state: s,
            steps: increments.len(),
            increments,
            expected_memory,
            status,
        })
    }

    /// Runs a compiled program from a plain state and summarizes the result.
    pub fn run(&self, rho: &ProgramMatrix, s0: &MachineState, config: &RunConfig) -> Result<RunReport> {
        if rho.layout() != &self.layout {
            return Err(Error::Shape("program compiled for a different layout".into()));
        }
        let tape = Tape::new();
        let run = self.run_tape(tape.constant(rho.tensor().clone()), s0.constant(&tape), config)?;
        let state = run.state.value();
        let expected = run.expected_memory.value();
        Ok(RunReport {
            mode: config.mode,
            status: run.status,
            steps: run.steps,
            halted: state.halted,
            halting_increments: run.increments.iter().map(|v| v.item()).collect(),
            memory: state.decoded_memory(),
            registers: state.decoded_registers(),
            counter: state.decoded_counter(),
            expected_memory: (0..expected.rows()).map(|i| decode(expected.row(i))).collect(),
            state,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::{link, run_oracle, Parser};
    use crate::compiler::compile;
    use crate::encodings::one_hot;
    use crate::substrate::grad_check;

    fn build(text: &str, n: usize) -> (crate::asm::Library, ProgramMatrix, Machine) {
        let lib = link(&[Parser::new(n).parse("p", text).unwrap()], n).unwrap();
        let layout = MachineLayout::new(n).unwrap();
        let rho = compile(&lib, &layout).unwrap();
        (lib, rho, Machine::new(layout).unwrap())
    }

    #[test]
    fn fetch_mixes_lines() {
        let (_, rho, m) = build("inc r2 r2\nhalt", 8);
        let tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let inst = fetch(m.pad(tape.constant(rho.tensor().clone())).unwrap(), c, m.layout()).unwrap();
        let op = inst.op.to_vec();
        assert_eq!(op[Opcode::Inc.index()], 0.5);
        assert_eq!(op[Opcode::Halt.index()], 0.5);
        assert_eq!(inst.a1.to_vec()[2], 0.5);
    }

    #[test]
    fn memory_primitives() {
        let tape = Tape::new();
        let mem = Tensor::matrix(3, 8, {
            let mut d = vec![0.0; 24];
            d[1] = 1.0;
            d[8 + 3] = 1.0;
            d[16] = 1.0;
            d
        })
        .unwrap();
        let m = tape.constant(mem.clone());
        let a = tape.constant(Tensor::vector(vec![0.5, 0.5, 0.0]));
        let r = read_mem(m, a).unwrap().to_vec();
        assert_eq!((r[1], r[3]), (0.5, 0.5));

        let seven = tape.constant(one_hot(7, 8).unwrap().tensor());
        let a2 = tape.constant(Tensor::vector(vec![0.0, 0.0, 1.0]));
        let kept = write_mem(m, a2, seven, tape.scalar(0.0)).unwrap().value();
        assert_eq!(kept, mem);
        let w = write_mem(m, a2, seven, tape.scalar(1.0)).unwrap().value();
        assert_eq!(w.row(2)[7], 1.0);
        assert_eq!(w.row(0), mem.row(0));
        let a0 = tape.constant(Tensor::vector(vec![1.0, 0.0, 0.0]));
        let half = write_mem(m, a0, seven, tape.scalar(0.5)).unwrap().value();
        assert_eq!((half.row(0)[1], half.row(0)[7]), (0.5, 0.5));
    }

    #[test]
    fn alu_adds_two_and_two_mod_five() {
        let (_, rho, m) = build("add r2 r3 r4", 5);
        let tape = Tape::new();
        let init = InitState::new(5, 5).reg(2, 2).reg(3, 2);
        let s = MachineState::from_init(&init, m.layout()).unwrap().constant(&tape);
        let inst = fetch(m.pad(tape.constant(rho.tensor().clone())).unwrap(), s.counter, m.layout()).unwrap();
        assert_eq!(m.alu(&inst, s.registers).unwrap().to_vec(), one_hot(4, 5).unwrap().into_vec());
    }

    #[test]
    fn single_steps() {
        let (_, rho, m) = build("inc r2 r2\nhalt", 8);
        let init = InitState::new(8, 8).reg(2, 3);
        let s0 = MachineState::from_init(&init, m.layout()).unwrap();
        let one = m.run(&rho, &s0, &RunConfig::soft(1)).unwrap();
        assert_eq!(one.registers[2], 4);
        assert_eq!(one.counter, 1);
        let done = m.run(&rho, &s0, &RunConfig::soft(5)).unwrap();
        assert_eq!(done.halted, 1.0);
        assert_eq!(done.counter, 1);
        assert_eq!(done.halting_increments, vec![0.0, 1.0, 0.0, 0.0, 0.0]);

        let (_, rho, m) = build("jump r0 5", 8);
        let s0 = MachineState::from_init(&InitState::new(8, 8), m.layout()).unwrap();
        assert_eq!(m.run(&rho, &s0, &RunConfig::soft(1)).unwrap().counter, 5);
    }

    #[test]
    fn matches_oracle_on_loop() {
        let text = "set 4 r2\nl: write r2 r2\ndec r2 r2\nmin r2 r0 r3\njump r3 l\nhalt";
        let (lib, rho, m) = build(text, 16);
        let init = InitState::new(16, 16);
        let oracle = run_oracle(lib.code(), 16, &init, 100).unwrap();
        let s0 = MachineState::from_init(&init, m.layout()).unwrap();
        let rep = m.run(&rho, &s0, &RunConfig::thresholded(100)).unwrap();
        assert_eq!(rep.status, RunStatus::Halted);
        assert_eq!(rep.memory, oracle.memory);
        assert_eq!(rep.registers, oracle.registers);
        assert_eq!(rep.steps, oracle.steps);
        assert!(rep.state.normalization_error() < 1e-9);
    }

    #[test]
    fn zero_budget_rejected() {
        let (_, rho, m) = build("halt", 4);
        let s0 = MachineState::from_init(&InitState::new(4, 4), m.layout()).unwrap();
        assert!(m.run(&rho, &s0, &RunConfig::soft(0)).is_err());
    }

    #[test]
    fn loss_closed_forms() {
        let tape = Tape::new();
        let mem = tape.constant(Tensor::full(&[2, 4], 0.25));
        let l = loss_on_memory(mem, &[(1, one_hot(2, 4).unwrap())]).unwrap().item();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!(loss_on_memory(mem, &[(2, one_hot(2, 4).unwrap())]).is_err());
    }

    #[test]
    fn gradient_reaches_initial_registers() {
        let (_, rho, m) = build("add r2 r3 r4\nwrite r0 r4\nhalt", 8);
        let layout = m.layout().clone();
        let init = MachineState::from_init(&InitState::new(8, 8), &layout).unwrap();
        let x = Tensor::matrix(2, 8, (0..16).map(|k| ((k * 7) % 5) as f64 * 0.3).collect()).unwrap();
        let err = grad_check(
            |tape, logits| {
                let s = init.constant(tape);
                let seeds = logits.softmax(1);
                let regs = concat(&[s.registers.slice(0, 0, 2), seeds, s.registers.slice(0, 4, 4)], 0);
                let s = TapeState { registers: regs, ..s };
                let run = m.run_tape(tape.constant(rho.tensor().clone()), s, &RunConfig::soft(4))?;
                loss_on_memory(run.expected_memory, &[(1, one_hot(5, 8).unwrap())])
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
