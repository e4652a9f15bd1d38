//! Number representations: one-hot [`Word`]s, LSB-first [`BitWord`]s, the
//! conversions between them, and one-hot arithmetic lookup tables.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::isa::Opcode;
use crate::substrate::{concat, LookupIndex, Tape, Tensor, Var};

/// Largest word size accepted for table-backed arithmetic. Larger values
/// should use the bit-level circuits instead.
pub const MAX_TABLE_N: usize = 128;

const WORD_TOL: f64 = 1e-9;

/// A probability distribution over `0..n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Word(Vec<f64>);

impl Word {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Domain("empty word".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(Error::Domain(format!("word entry {p} is not a probability")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > WORD_TOL {
            return Err(Error::Domain(format!("word sums to {total}, not 1")));
        }
        Ok(Word(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Word(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::vector(self.0.clone())
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Dirac distribution at `k` over `0..n`.
pub fn one_hot(k: usize, n: usize) -> Result<Word> {
    if k >= n {
        return Err(Error::Range { value: k, size: n });
    }
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    Ok(Word(v))
}

/// Index of the largest entry; ties resolve to the smallest index.
pub fn decode(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Per-bit probabilities, least-significant bit first.
#[derive(Clone, Debug, PartialEq)]
pub struct BitWord(Vec<f64>);

impl BitWord {
    pub fn new(bits: Vec<f64>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::Domain(format!("bit probability {b} outside [0, 1]")));
        }
        Ok(BitWord(bits))
    }

    /// Exact binary encoding of `value` in `width` bits.
    pub fn from_int(value: u64, width: usize) -> Self {
        BitWord((0..width).map(|i| ((value >> i) & 1) as f64).collect())
    }

    pub fn bits(&self) -> &[f64] {
        &self.0
    }

    pub fn width(&self) -> usize {
        self.0.len()
    }

    /// Integer obtained by rounding each bit at 0.5.
    pub fn to_int(&self) -> u64 {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &b)| b > 0.5)
            .fold(0, |acc, (i, _)| acc | (1 << i))
    }
}

fn bit_table(n: usize, width: usize) -> Result<Tensor> {
    if width >= usize::BITS as usize || n > 1usize << width {
        return Err(Error::Capacity(format!("{n} values do not fit in {width} bits")));
    }
    let mut data = Vec::with_capacity(n * width);
    for k in 0..n {
        data.extend((0..width).map(|i| ((k >> i) & 1) as f64));
    }
    Tensor::matrix(n, width, data)
}

/// Expected bit values under `w`: `bit_i = sum_k w_k * bit_i(k)`.
pub fn unit_to_binary(w: &Word, width: usize) -> Result<BitWord> {
    let table = bit_table(w.len(), width)?;
    let mut bits = vec![0.0; width];
    for (k, &p) in w.probs().iter().enumerate() {
        for (i, b) in bits.iter_mut().enumerate() {
            *b += p * table.row(k)[i];
        }
    }
    Ok(BitWord(bits))
}

/// Distribution over `0..2^b` obtained by flipping an independent coin per bit.
pub fn binary_to_unit(bv: &BitWord) -> Word {
    let mut dist = vec![1.0];
    for &b in bv.bits() {
        let mut next = Vec::with_capacity(dist.len() * 2);
        next.extend(dist.iter().map(|p| p * (1.0 - b)));
        next.extend(dist.iter().map(|p| p * b));
        dist = next;
    }
    Word(dist)
}

/// Differentiable [`unit_to_binary`] on a tape.
pub fn unit_to_binary_var<'t>(w: Var<'t>, width: usize) -> Result<Var<'t>> {
    let n = w.shape()[0];
    let table = w.tape().constant(bit_table(n, width)?);
    w.contract(table, &[(0, 0)])
}

/// Differentiable [`binary_to_unit`] on a tape; `bits` is a vector, LSB first.
pub fn binary_to_unit_var<'t>(bits: Var<'t>) -> Var<'t> {
    let width = bits.shape()[0];
    let tape = bits.tape();
    let mut dist = tape.constant(Tensor::vector(vec![1.0]));
    for i in 0..width {
        let b = bits.at(i);
        let off = dist.scale_by(b.complement());
        let on = dist.scale_by(b);
        dist = concat(&[off, on], 0);
    }
    dist
}

/// One-hot arithmetic table `T[op, i, j, :] = one_hot(op(i, j) mod n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AluTable {
    ops: Vec<Opcode>,
    index: Arc<LookupIndex>,
}

const ALU_MAGIC: &[u8; 8] = b"DCALUTBL";
const ALU_VERSION: u32 = 1;

impl AluTable {
    pub fn new(ops: &[Opcode], n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("word size must be positive".into()));
        }
        if n > MAX_TABLE_N {
            return Err(Error::Capacity(format!(
                "lookup table for n = {n} exceeds the n <= {MAX_TABLE_N} cap; use the circuit backend for wide arithmetic"
            )));
        }
        let mut answers = Vec::with_capacity(ops.len() * n * n);
        for op in ops {
            for i in 0..n {
                for j in 0..n {
                    answers.push(op.eval(i, j, n));
                }
            }
        }
        Ok(AluTable {
            ops: ops.to_vec(),
            index: Arc::new(LookupIndex {
                ops: ops.len(),
                n,
                answers,
            }),
        })
    }

    /// Table for the full machine instruction set.
    pub fn isa(n: usize) -> Result<Self> {
        Self::new(&Opcode::ALL, n)
    }

    pub fn n(&self) -> usize {
        self.index.n
    }

    pub fn ops(&self) -> &[Opcode] {
        &self.ops
    }

    pub fn op_names(&self) -> Vec<&'static str> {
        self.ops.iter().map(|o| o.name()).collect()
    }

    pub fn index(&self) -> &Arc<LookupIndex> {
        &self.index
    }

    pub fn answer(&self, op: usize, i: usize, j: usize) -> usize {
        let n = self.n();
        self.index.answers[(op * n + i) * n + j]
    }

    /// Materialises the dense `|A| x n x n x n` tensor.
    pub fn dense(&self) -> Tensor {
        let n = self.n();
        let mut data = vec![0.0; self.ops.len() * n * n * n];
        for (cell, &ans) in self.index.answers.iter().enumerate() {
            data[cell * n + ans] = 1.0;
        }
        Tensor::new(vec![self.ops.len(), n, n, n], data).unwrap()
    }

    /// Mixture lookup on plain words via the scatter form.
    pub fn lookup(&self, f: &[f64], a: &Word, b: &Word) -> Result<Word> {
        let tape = Tape::new();
        let out = Var::lookup(
            &self.index,
            tape.constant(Tensor::vector(f.to_vec())),
            tape.constant(a.tensor()),
            tape.constant(b.tensor()),
        )?;
        Ok(Word(out.to_vec()))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(ALU_MAGIC)?;
        w.write_all(&ALU_VERSION.to_le_bytes())?;
        w.write_all(&(self.n() as u32).to_le_bytes())?;
        w.write_all(&(self.ops.len() as u32).to_le_bytes())?;
        for op in &self.ops {
            let name = op.name().as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
        }
        for &a in &self.index.answers {
            w.write_all(&(a as u32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != ALU_MAGIC {
            return Err(Error::Format("not an ALU table file".into()));
        }
        let version = read_u32(r)?;
        if version != ALU_VERSION {
            return Err(Error::Format(format!("unsupported ALU table version {version}")));
        }
        let n = read_u32(r)? as usize;
        let count = read_u32(r)? as usize;
        let mut ops = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_string(r)?;
            ops.push(Opcode::from_name(&name).ok_or(Error::UnknownOpcode(name))?);
        }
        let table = AluTable::new(&ops, n)?;
        for &expected in &table.index.answers {
            if read_u32(r)? as usize != expected {
                return Err(Error::Format("table entry disagrees with opcode semantics".into()));
            }
        }
        Ok(table)
    }
}

/// Builds a table from opcode names.
pub fn build_mod_table(ops: &[&str], n: usize) -> Result<AluTable> {
    let ops = ops
        .iter()
        .map(|name| Opcode::from_name(name).ok_or_else(|| Error::UnknownOpcode(name.to_string())))
        .collect::<Result<Vec<_>>>()?;
    AluTable::new(&ops, n)
}

/// `c_k = T_hijk f_h a_i b_j` as three dense contractions.
pub fn table_lookup<'t>(table: &AluTable, f: Var<'t>, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let t = f.tape().constant(table.dense());
    let fa = f.contract(t, &[(0, 0)])?;
    let fab = a.contract(fa, &[(0, 0)])?;
    b.contract(fab, &[(0, 0)])
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 16 {
        return Err(Error::Format(format!("string length {len} too large")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot(2, 5).unwrap().probs(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(one_hot(0, 3).unwrap().probs(), &[1.0, 0.0, 0.0]);
        assert!(matches!(one_hot(5, 5), Err(Error::Range { value: 5, size: 5 })));
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode(&[0.0, 0.0, 1.0, 0.0, 0.0]), 2);
        assert_eq!(decode(&[0.4, 0.6]), 1);
        assert_eq!(decode(&[0.5, 0.5]), 0);
    }

    #[test]
    fn word_validation() {
        assert!(Word::new(vec![0.5, 0.6]).is_err());
        assert!(Word::new(vec![-0.1, 1.1]).is_err());
        assert!(Word::new(vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn unit_to_binary_examples() {
        assert_eq!(unit_to_binary(&one_hot(5, 8).unwrap(), 3).unwrap().bits(), &[1.0, 0.0, 1.0]);
        let w = Word::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(unit_to_binary(&w, 1).unwrap().bits(), &[0.5]);
        assert_eq!(unit_to_binary(&one_hot(0, 16).unwrap(), 4).unwrap().bits(), &[0.0; 4]);
        assert!(matches!(unit_to_binary(&Word::uniform(9), 3), Err(Error::Capacity(_))));
    }

    #[test]
    fn two_bit_closed_form() {
        // b0 = 1, b1 = 0 -> value 1
        let w = binary_to_unit(&BitWord::new(vec![1.0, 0.0]).unwrap());
        assert_eq!(w.probs(), &[0.0, 1.0, 0.0, 0.0]);
        let w = binary_to_unit(&BitWord::new(vec![0.5, 0.5]).unwrap());
        assert_eq!(w.probs(), &[0.25; 4]);
        // [(1-b1)(1-b0), (1-b1)b0, b1(1-b0), b1 b0]
        let (b0, b1) = (0.3, 0.8);
        let w = binary_to_unit(&BitWord::new(vec![b0, b1]).unwrap());
        let expected = [(1.0 - b1) * (1.0 - b0), (1.0 - b1) * b0, b1 * (1.0 - b0), b1 * b0];
        assert_eq!(w.probs(), &expected);
    }

    #[test]
    fn mult_table_mod5_selects_three() {
        let t = build_mod_table(&["mul"], 5).unwrap();
        let out = t.lookup(&[1.0], &one_hot(2, 5).unwrap(), &one_hot(4, 5).unwrap()).unwrap();
        assert_eq!(out, one_hot(3, 5).unwrap());
        let wide = build_mod_table(&["mul"], 9).unwrap();
        let out = wide.lookup(&[1.0], &one_hot(2, 9).unwrap(), &one_hot(4, 9).unwrap()).unwrap();
        assert_eq!(decode(out.probs()), 8);
    }

    #[test]
    fn add_identity_and_unknown_ops() {
        let t = build_mod_table(&["add"], 7).unwrap();
        for k in 0..7 {
            assert_eq!(t.answer(0, 0, k), k);
        }
        assert!(matches!(build_mod_table(&["frobnicate"], 4), Err(Error::UnknownOpcode(_))));
    }

    #[test]
    fn table_capacity_cap() {
        assert!(matches!(AluTable::isa(MAX_TABLE_N + 1), Err(Error::Capacity(_))));
    }

    #[test]
    fn dense_slices_are_one_hot() {
        let t = AluTable::isa(4).unwrap();
        let d = t.dense();
        for cell in d.data().chunks(4) {
            assert_eq!(cell.iter().sum::<f64>(), 1.0);
            assert_eq!(cell.iter().filter(|&&v| v == 1.0).count(), 1);
        }
    }

    #[test]
    fn serialization_round_trip_and_corruption() {
        let t = AluTable::isa(6).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(AluTable::read_from(&mut buf.as_slice()).unwrap(), t);
        let mut bad = buf.clone();
        let last = bad.len() - 4;
        bad[last] ^= 1;
        assert!(AluTable::read_from(&mut bad.as_slice()).is_err());
        assert!(AluTable::read_from(&mut &b"nope"[..]).is_err());
    }
}
