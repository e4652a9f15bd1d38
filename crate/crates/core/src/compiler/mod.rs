//! Lowering linked libraries into program matrices.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

mod memorize;

pub use memorize::{generated_program, memorize, symbolic_match, LineGenerator, MemorizeReport};

use crate::asm::Library;
use crate::encodings::{decode, read_string, read_u32};
use crate::error::{Error, Result};
use crate::isa::{Instr, Opcode};
use crate::substrate::{concat, ParameterMask, Tensor, Var};

/// Default logit magnitude for trainable compiled programs.
pub const KAPPA: f64 = 10.0;

const MAGIC: &[u8; 8] = b"DCPROGMX";
const VERSION: u32 = 1;

/// The four per-line fields, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Opcode,
    Arg1,
    Arg2,
    Dest,
}

impl Field {
    pub const ALL: [Field; 4] = [Field::Opcode, Field::Arg1, Field::Arg2, Field::Dest];
}

/// Sizes of the machine a program is compiled for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineLayout {
    pub n: usize,
    pub registers: usize,
    pub mem_size: usize,
    pub ops: Vec<Opcode>,
}

impl MachineLayout {
    /// Word size `n` with `n` registers, `n` memory cells and the full instruction set.
    pub fn new(n: usize) -> Result<Self> {
        Self::with_sizes(n, n, n)
    }

    pub fn with_sizes(n: usize, registers: usize, mem_size: usize) -> Result<Self> {
        let layout = MachineLayout {
            n,
            registers,
            mem_size,
            ops: Opcode::ALL.to_vec(),
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Capacity(format!("word size {} is below 2", self.n)));
        }
        if self.registers < 2 || self.registers > self.n {
            return Err(Error::Capacity(format!(
                "{} registers does not fit 2..={}",
                self.registers, self.n
            )));
        }
        if self.mem_size == 0 || self.mem_size > self.n {
            return Err(Error::Capacity(format!(
                "memory size {} does not fit 1..={}",
                self.mem_size, self.n
            )));
        }
        if self.ops.is_empty() {
            return Err(Error::Capacity("empty instruction set".into()));
        }
        Ok(())
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Columns per line: `|A| + 3n`.
    pub fn width(&self) -> usize {
        self.ops.len() + 3 * self.n
    }

    pub fn field_range(&self, field: Field) -> Range<usize> {
        let a = self.ops.len();
        let n = self.n;
        match field {
            Field::Opcode => 0..a,
            Field::Arg1 => a..a + n,
            Field::Arg2 => a + n..a + 2 * n,
            Field::Dest => a + 2 * n..a + 3 * n,
        }
    }

    pub fn op_index(&self, op: Opcode) -> Result<usize> {
        self.ops
            .iter()
            .position(|&o| o == op)
            .ok_or_else(|| Error::UnknownOpcode(op.name().to_string()))
    }
}

/// Per-line distributions over opcode and operand fields, stored as one
/// `L × (|A| + 3n)` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgramMatrix {
    layout: MachineLayout,
    data: Tensor,
    entry_points: BTreeMap<String, usize>,
}

impl ProgramMatrix {
    /// Wraps a probability matrix after checking every field is a distribution.
    pub fn from_probs(
        layout: MachineLayout,
        data: Tensor,
        entry_points: BTreeMap<String, usize>,
    ) -> Result<Self> {
        layout.validate()?;
        if data.rank() != 2 || data.cols() != layout.width() {
            return Err(Error::Shape(format!(
                "program matrix must be L x {}, got {:?}",
                layout.width(),
                data.shape()
            )));
        }
        if data.rows() == 0 || data.rows() > layout.n {
            return Err(Error::Capacity(format!(
                "{} lines does not fit 1..={}",
                data.rows(),
                layout.n
            )));
        }
        for line in 0..data.rows() {
            for field in Field::ALL {
                let row = &data.row(line)[layout.field_range(field)];
                let s: f64 = row.iter().sum();
                if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-6 {
                    return Err(Error::Domain(format!(
                        "line {line} field {field:?} is not a distribution"
                    )));
                }
            }
        }
        if let Some(&e) = entry_points.values().find(|&&e| e >= data.rows()) {
            return Err(Error::Range { value: e, size: data.rows() });
        }
        Ok(ProgramMatrix {
            layout,
            data,
            entry_points,
        })
    }

    /// Field-wise softmax of a logit matrix.
    pub fn from_logits(
        layout: MachineLayout,
        logits: &Tensor,
        entry_points: BTreeMap<String, usize>,
    ) -> Result<Self> {
        let tape = crate::substrate::Tape::new();
        let probs = field_softmax(tape.constant(logits.clone()), &layout)?.value();
        Self::from_probs(layout, probs, entry_points)
    }

    pub fn layout(&self) -> &MachineLayout {
        &self.layout
    }

    pub fn lines(&self) -> usize {
        self.data.rows()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn entry_points(&self) -> &BTreeMap<String, usize> {
        &self.entry_points
    }

    pub fn entry(&self, name: &str) -> Result<usize> {
        self.entry_points
            .get(name)
            .copied()
            .ok_or_else(|| Error::Link(format!("no entry point `{name}`")))
    }

    pub fn field(&self, line: usize, field: Field) -> &[f64] {
        &self.data.row(line)[self.layout.field_range(field)]
    }

    /// Logits whose field-wise softmax approximates this matrix: `+kappa` on
    /// each field's argmax, `-kappa` elsewhere.
    pub fn logits(&self, kappa: f64) -> Tensor {
        let mut out = Tensor::full(self.data.shape(), -kappa);
        let w = self.layout.width();
        for line in 0..self.lines() {
            for field in Field::ALL {
                let r = self.layout.field_range(field);
                let k = decode(&self.data.row(line)[r.clone()]);
                out.data_mut()[line * w + r.start + k] = kappa;
            }
        }
        out
    }

    /// Argmax instruction of each line.
    pub fn argmax_code(&self) -> Vec<Instr> {
        (0..self.lines())
            .map(|l| {
                let op = self.layout.ops[decode(self.field(l, Field::Opcode))];
                Instr::new(
                    op,
                    decode(self.field(l, Field::Arg1)),
                    decode(self.field(l, Field::Arg2)),
                    decode(self.field(l, Field::Dest)),
                )
            })
            .collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let l = &self.layout;
        w.write_all(MAGIC)?;
        for v in [VERSION, l.n as u32, l.registers as u32, l.mem_size as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(l.ops.len() as u32).to_le_bytes())?;
        for op in &l.ops {
            write_string(w, op.name())?;
        }
        w.write_all(&(self.entry_points.len() as u32).to_le_bytes())?;
        for (name, &e) in &self.entry_points {
            write_string(w, name)?;
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        w.write_all(&(self.lines() as u32).to_le_bytes())?;
        for v in self.data.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a program matrix file".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported program matrix version {version}")));
        }
        let n = read_u32(r)? as usize;
        let registers = read_u32(r)? as usize;
        let mem_size = read_u32(r)? as usize;
        let nops = read_u32(r)? as usize;
        let ops = (0..nops)
            .map(|_| {
                let name = read_string(r)?;
                Opcode::from_name(&name).ok_or(Error::UnknownOpcode(name))
            })
            .collect::<Result<Vec<_>>>()?;
        let layout = MachineLayout {
            n,
            registers,
            mem_size,
            ops,
        };
        layout.validate()?;
        let nentries = read_u32(r)? as usize;
        let mut entry_points = BTreeMap::new();
        for _ in 0..nentries {
            let name = read_string(r)?;
            entry_points.insert(name, read_u32(r)? as usize);
        }
        let lines = read_u32(r)? as usize;
        if lines > n {
            return Err(Error::Format(format!("{lines} lines exceeds word size {n}")));
        }
        let mut data = vec![0.0; lines * layout.width()];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let data = Tensor::matrix(lines, layout.width(), data)?;
        Self::from_probs(layout, data, entry_points)
    }

    /// Per-line argmax and confidence of each field.
    pub fn debug_json(&self) -> serde_json::Value {
        let lines: Vec<serde_json::Value> = (0..self.lines())
            .map(|l| {
                let mut obj = serde_json::Map::new();
                obj.insert("line".into(), l.into());
                for field in Field::ALL {
                    let probs = self.field(l, field);
                    let k = decode(probs);
                    let value: serde_json::Value = if field == Field::Opcode {
                        self.layout.ops[k].name().into()
                    } else {
                        k.into()
                    };
                    let key = serde_json::to_value(field).unwrap();
                    obj.insert(
                        key.as_str().unwrap().to_string(),
                        serde_json::json!({ "value": value, "confidence": probs[k] }),
                    );
                }
                serde_json::Value::Object(obj)
            })
            .collect();
        serde_json::json!({
            "layout": self.layout,
            "entry_points": self.entry_points,
            "lines": lines,
        })
    }
}

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// Softmax applied separately to each field of an `L × width` logit matrix.
pub fn field_softmax<'t>(logits: Var<'t>, layout: &MachineLayout) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] != layout.width() {
        return Err(Error::Shape(format!(
            "expected L x {} logits, got {shape:?}",
            layout.width()
        )));
    }
    let parts: Vec<Var<'t>> = Field::ALL
        .iter()
        .map(|&f| {
            let r = layout.field_range(f);
            logits.slice(1, r.start, r.len()).softmax(1)
        })
        .collect();
    Ok(concat(&parts, 1))
}

/// Turns every instruction of a linked library into dirac rows.
pub fn compile(lib: &Library, layout: &MachineLayout) -> Result<ProgramMatrix> {
    compile_code(lib.code(), lib.entry_points().clone(), layout)
}

pub fn compile_code(
    code: &[Instr],
    entry_points: BTreeMap<String, usize>,
    layout: &MachineLayout,
) -> Result<ProgramMatrix> {
    layout.validate()?;
    if code.is_empty() || code.len() > layout.n {
        return Err(Error::Capacity(format!(
            "{} lines does not fit 1..={}",
            code.len(),
            layout.n
        )));
    }
    let w = layout.width();
    let mut data = vec![0.0; code.len() * w];
    for (l, i) in code.iter().enumerate() {
        let regs = |r: usize| -> Result<usize> {
            if r < layout.registers {
                Ok(r)
            } else {
                Err(Error::Range { value: r, size: layout.registers })
            }
        };
        let vals = |v: usize| -> Result<usize> {
            if v < layout.n {
                Ok(v)
            } else {
                Err(Error::Range { value: v, size: layout.n })
            }
        };
        // a1 is an immediate for set; a2 is a line for jump
        let a1 = if i.op == Opcode::Set { vals(i.a1)? } else { regs(i.a1)? };
        let a2 = if i.op == Opcode::Jump { vals(i.a2)? } else { regs(i.a2)? };
        let dst = regs(i.dst)?;
        let row = &mut data[l * w..(l + 1) * w];
        row[layout.op_index(i.op)?] = 1.0;
        row[layout.field_range(Field::Arg1).start + a1] = 1.0;
        row[layout.field_range(Field::Arg2).start + a2] = 1.0;
        row[layout.field_range(Field::Dest).start + dst] = 1.0;
    }
    ProgramMatrix::from_probs(
        layout.clone(),
        Tensor::matrix(code.len(), w, data)?,
        entry_points,
    )
}

/// Parts of a program matrix to protect from updates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Protect {
    All,
    Program(String),
    Lines(Range<usize>),
    Field { line: usize, field: Field },
}

/// Mask with zeros over protected entries and ones elsewhere.
pub fn freeze_mask(rho: &ProgramMatrix, lib: Option<&Library>, protect: &[Protect]) -> Result<ParameterMask> {
    let (lines, w) = (rho.lines(), rho.layout.width());
    let mut mask = Tensor::full(&[lines, w], 1.0);
    let mut zero = |rows: Range<usize>, cols: Range<usize>| {
        for l in rows {
            mask.data_mut()[l * w + cols.start..l * w + cols.end].fill(0.0);
        }
    };
    for p in protect {
        match p {
            Protect::All => zero(0..lines, 0..w),
            Protect::Program(name) => {
                let lib = lib.ok_or_else(|| {
                    Error::Usage(format!("protecting program `{name}` needs its library"))
                })?;
                let r = lib.line_range(name)?;
                if r.end > lines {
                    return Err(Error::Range { value: r.end, size: lines });
                }
                zero(r, 0..w);
            }
            Protect::Lines(r) => {
                if r.end > lines || r.start > r.end {
                    return Err(Error::Range { value: r.end, size: lines });
                }
                zero(r.clone(), 0..w);
            }
            Protect::Field { line, field } => {
                if *line >= lines {
                    return Err(Error::Range { value: *line, size: lines });
                }
                zero(*line..*line + 1, rho.layout.field_range(*field));
            }
        }
    }
    ParameterMask::new(mask)
}
