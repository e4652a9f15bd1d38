use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::isa::{Instr, Opcode, REG_TRUE};

/// Initial integer state for a run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitState {
    pub registers: Vec<usize>,
    pub memory: Vec<usize>,
    pub pc: usize,
}

impl InitState {
    /// All zeros except the constant register r0 = 1.
    pub fn new(registers: usize, mem_size: usize) -> Self {
        let mut regs = vec![0; registers];
        if registers > 0 {
            regs[REG_TRUE] = 1;
        }
        InitState {
            registers: regs,
            memory: vec![0; mem_size],
            pc: 0,
        }
    }

    pub fn reg(mut self, r: usize, value: usize) -> Self {
        self.registers[r] = value;
        self
    }

    pub fn mem(mut self, addr: usize, value: usize) -> Self {
        self.memory[addr] = value;
        self
    }

    pub fn pc(mut self, pc: usize) -> Self {
        self.pc = pc;
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for &v in self.registers.iter().chain(&self.memory).chain(std::iter::once(&self.pc)) {
            if v >= n {
                return Err(Error::Range { value: v, size: n });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Halted,
    Timeout,
    Fault,
}

/// Final state of a discrete run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleState {
    pub registers: Vec<usize>,
    pub memory: Vec<usize>,
    pub pc: usize,
    pub steps: usize,
    pub status: RunStatus,
}

/// Reference interpreter over integers.
///
/// Every non-halt instruction writes its destination register, with all
/// values taken from the state before the step; `halt` counts as a step.
/// Execution faults when the counter leaves the program or an address falls
/// outside memory, and times out after `max_steps`.
pub fn run_oracle(code: &[Instr], n: usize, init: &InitState, max_steps: usize) -> Result<OracleState> {
    init.validate(n)?;
    let mut st = OracleState {
        registers: init.registers.clone(),
        memory: init.memory.clone(),
        pc: init.pc,
        steps: 0,
        status: RunStatus::Timeout,
    };
    let nregs = st.registers.len();
    let reg = |r: usize| -> Result<usize> {
        if r < nregs {
            Ok(r)
        } else {
            Err(Error::Range { value: r, size: nregs })
        }
    };
    while st.steps < max_steps {
        let Some(&i) = code.get(st.pc) else {
            st.status = RunStatus::Fault;
            return Ok(st);
        };
        st.steps += 1;
        if i.op == Opcode::Halt {
            st.status = RunStatus::Halted;
            return Ok(st);
        }
        let u = if i.op == Opcode::Set { 0 } else { st.registers[reg(i.a1)?] };
        let v = if i.op == Opcode::Jump { 0 } else { st.registers[reg(i.a2)?] };
        let next = (st.pc + 1) % n;
        let mut pc = next;
        let value = match i.op {
            Opcode::Read => {
                let Some(&m) = st.memory.get(u) else {
                    st.status = RunStatus::Fault;
                    return Ok(st);
                };
                m
            }
            Opcode::Write => {
                if u >= st.memory.len() {
                    st.status = RunStatus::Fault;
                    return Ok(st);
                }
                st.memory[u] = v;
                u
            }
            Opcode::Store => next,
            Opcode::Set => i.a1 % n,
            Opcode::Jump => {
                if u == 1 {
                    pc = i.a2;
                }
                u
            }
            Opcode::JumpR => {
                if u == 1 {
                    pc = v;
                }
                u
            }
            op => op.eval(u, v, n),
        };
        st.registers[reg(i.dst)?] = value;
        st.pc = pc;
    }
    Ok(st)
}
