//! Arithmetic circuits built from probabilistic logic gates.
//!
//! Gates act on bit probabilities: `and = ab`, `or = ab + (1-a)b + a(1-b)`,
//! `xor = (1-a)b + a(1-b)`, `not = 1-a`. On {0, 1} inputs they reduce to
//! Boolean logic; on soft inputs they stay inside [0, 1]. Every circuit is
//! written once against the [`Gates`] trait and evaluated either on plain
//! floats or on a [`Tape`] for gradients.

use crate::encodings::BitWord;
use crate::error::{Error, Result};
use crate::substrate::{stack, Tape, Var};

pub trait Gates {
    type Bit: Clone;

    fn constant(&self, v: f64) -> Self::Bit;
    fn and(&self, a: &Self::Bit, b: &Self::Bit) -> Self::Bit;
    fn or(&self, a: &Self::Bit, b: &Self::Bit) -> Self::Bit;
    fn xor(&self, a: &Self::Bit, b: &Self::Bit) -> Self::Bit;
    fn not(&self, a: &Self::Bit) -> Self::Bit;
}

/// Gates over plain `f64` probabilities.
#[derive(Clone, Copy, Debug, Default)]
pub struct Plain;

impl Gates for Plain {
    type Bit = f64;

    fn constant(&self, v: f64) -> f64 {
        v
    }

    fn and(&self, a: &f64, b: &f64) -> f64 {
        gate_and(*a, *b)
    }

    fn or(&self, a: &f64, b: &f64) -> f64 {
        gate_or(*a, *b)
    }

    fn xor(&self, a: &f64, b: &f64) -> f64 {
        gate_xor(*a, *b)
    }

    fn not(&self, a: &f64) -> f64 {
        gate_not(*a)
    }
}

/// Gates recorded on a tape; each bit is a scalar [`Var`].
#[derive(Clone, Copy)]
pub struct OnTape<'t>(pub &'t Tape);

impl<'t> Gates for OnTape<'t> {
    type Bit = Var<'t>;

    fn constant(&self, v: f64) -> Var<'t> {
        self.0.scalar(v)
    }

    fn and(&self, a: &Var<'t>, b: &Var<'t>) -> Var<'t> {
        a.mul(*b)
    }

    fn or(&self, a: &Var<'t>, b: &Var<'t>) -> Var<'t> {
        let both = a.mul(*b);
        let only_b = a.complement().mul(*b);
        let only_a = a.mul(b.complement());
        both.add(only_b).add(only_a)
    }

    fn xor(&self, a: &Var<'t>, b: &Var<'t>) -> Var<'t> {
        a.complement().mul(*b).add(a.mul(b.complement()))
    }

    fn not(&self, a: &Var<'t>) -> Var<'t> {
        a.complement()
    }
}

pub fn gate_and(a: f64, b: f64) -> f64 {
    a * b
}

pub fn gate_or(a: f64, b: f64) -> f64 {
    a * b + (1.0 - a) * b + a * (1.0 - b)
}

pub fn gate_xor(a: f64, b: f64) -> f64 {
    (1.0 - a) * b + a * (1.0 - b)
}

pub fn gate_not(a: f64) -> f64 {
    1.0 - a
}

fn same_width<B>(x: &[B], y: &[B]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "operand widths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

fn full_add<G: Gates>(g: &G, a: &G::Bit, b: &G::Bit, cin: &G::Bit) -> (G::Bit, G::Bit) {
    let axb = g.xor(a, b);
    let sum = g.xor(&axb, cin);
    let carry = g.or(&g.and(a, b), &g.and(cin, &axb));
    (sum, carry)
}

fn add_with_carry<G: Gates>(g: &G, x: &[G::Bit], y: &[G::Bit], carry_in: G::Bit) -> Vec<G::Bit> {
    let mut carry = carry_in;
    let mut out = Vec::with_capacity(x.len() + 1);
    for (a, b) in x.iter().zip(y) {
        let (s, c) = full_add(g, a, b, &carry);
        out.push(s);
        carry = c;
    }
    out.push(carry);
    out
}

/// Ripple-carry adder; the result has one extra bit for the carry-out.
pub fn ripple_add_with<G: Gates>(g: &G, x: &[G::Bit], y: &[G::Bit]) -> Result<Vec<G::Bit>> {
    same_width(x, y)?;
    Ok(add_with_carry(g, x, y, g.constant(0.0)))
}

/// Two's-complement subtraction `x + !y + 1`. Returns the `b`-bit
/// difference (mod 2^b) and a borrow bit that is set when `x < y`.
pub fn ripple_sub_with<G: Gates>(
    g: &G,
    x: &[G::Bit],
    y: &[G::Bit],
) -> Result<(Vec<G::Bit>, G::Bit)> {
    same_width(x, y)?;
    let not_y: Vec<G::Bit> = y.iter().map(|b| g.not(b)).collect();
    let mut sum = add_with_carry(g, x, &not_y, g.constant(1.0));
    let carry = sum.pop().unwrap();
    Ok((sum, g.not(&carry)))
}

/// Shift-and-add multiplier with a `2b`-bit product.
pub fn shift_add_mul_with<G: Gates>(g: &G, x: &[G::Bit], y: &[G::Bit]) -> Result<Vec<G::Bit>> {
    same_width(x, y)?;
    let b = x.len();
    let zero = g.constant(0.0);
    let mut acc = vec![zero.clone(); 2 * b];
    for (i, yi) in y.iter().enumerate() {
        let mut partial = vec![zero.clone(); 2 * b];
        for (j, xj) in x.iter().enumerate() {
            partial[i + j] = g.and(yi, xj);
        }
        acc = add_with_carry(g, &acc, &partial, zero.clone());
        acc.truncate(2 * b);
    }
    Ok(acc)
}

pub struct Division<B> {
    pub quotient: Vec<B>,
    pub remainder: Vec<B>,
    /// Set when the divisor is zero; the quotient then saturates to all ones
    /// and the remainder equals the dividend.
    pub div_by_zero: B,
}

/// Restoring long division.
pub fn long_divide_with<G: Gates>(g: &G, x: &[G::Bit], y: &[G::Bit]) -> Result<Division<G::Bit>> {
    same_width(x, y)?;
    let b = x.len();
    let zero = g.constant(0.0);
    let mut divisor = y.to_vec();
    divisor.push(zero.clone());
    let mut rem = vec![zero.clone(); b + 1];
    let mut quotient = vec![zero.clone(); b];
    for i in (0..b).rev() {
        // rem = (rem << 1) | x_i
        rem.pop();
        rem.insert(0, x[i].clone());
        let (trial, borrow) = ripple_sub_with(g, &rem, &divisor)?;
        let keep = g.not(&borrow);
        rem = trial
            .iter()
            .zip(&rem)
            .map(|(t, r)| g.or(&g.and(&keep, t), &g.and(&borrow, r)))
            .collect();
        quotient[i] = keep;
    }
    rem.truncate(b);
    let mut all_zero = g.constant(1.0);
    for bit in y {
        all_zero = g.and(&all_zero, &g.not(bit));
    }
    Ok(Division {
        quotient,
        remainder: rem,
        div_by_zero: all_zero,
    })
}

fn bitword(bits: Vec<f64>) -> BitWord {
    BitWord::new(bits).expect("gates preserve [0, 1]")
}

pub fn ripple_add(x: &BitWord, y: &BitWord) -> Result<BitWord> {
    Ok(bitword(ripple_add_with(&Plain, x.bits(), y.bits())?))
}

pub fn ripple_sub(x: &BitWord, y: &BitWord) -> Result<(BitWord, f64)> {
    let (d, borrow) = ripple_sub_with(&Plain, x.bits(), y.bits())?;
    Ok((bitword(d), borrow))
}

pub fn shift_add_mul(x: &BitWord, y: &BitWord) -> Result<BitWord> {
    Ok(bitword(shift_add_mul_with(&Plain, x.bits(), y.bits())?))
}

/// Returns `(quotient, remainder, divide-by-zero flag)`.
pub fn long_divide(x: &BitWord, y: &BitWord) -> Result<(BitWord, BitWord, f64)> {
    let d = long_divide_with(&Plain, x.bits(), y.bits())?;
    Ok((bitword(d.quotient), bitword(d.remainder), d.div_by_zero))
}

/// Splits a tape vector into scalar bits.
pub fn unstack<'t>(v: Var<'t>) -> Vec<Var<'t>> {
    (0..v.shape()[0]).map(|i| v.at(i)).collect()
}

/// Stacks scalar bits into a tape vector.
pub fn restack<'t>(bits: &[Var<'t>]) -> Var<'t> {
    stack(bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bw(v: u64, b: usize) -> BitWord {
        BitWord::from_int(v, b)
    }

    #[test]
    fn gate_examples() {
        assert_eq!(gate_xor(1.0, 0.0), 1.0);
        assert_eq!(gate_xor(1.0, 1.0), 0.0);
        assert_eq!(gate_or(0.5, 0.5), 0.75);
        assert!((gate_and(0.3, 0.5) - 0.15).abs() < 1e-15);
        assert_eq!(gate_not(0.25), 0.75);
    }

    #[test]
    fn add_examples() {
        assert_eq!(ripple_add(&bw(5, 4), &bw(3, 4)).unwrap().to_int(), 8);
        assert_eq!(ripple_add(&bw(11, 4), &bw(0, 4)).unwrap().to_int(), 11);
        let s = ripple_add(&bw(15, 4), &bw(1, 4)).unwrap();
        assert_eq!(s.bits(), &[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(ripple_add(&bw(1, 3), &bw(1, 4)).is_err());
    }

    #[test]
    fn sub_examples() {
        let (d, borrow) = ripple_sub(&bw(7, 4), &bw(3, 4)).unwrap();
        assert_eq!((d.to_int(), borrow), (4, 0.0));
        let (d, borrow) = ripple_sub(&bw(9, 4), &bw(9, 4)).unwrap();
        assert_eq!((d.to_int(), borrow), (0, 0.0));
        let (d, borrow) = ripple_sub(&bw(2, 4), &bw(5, 4)).unwrap();
        assert_eq!((d.to_int(), borrow), (13, 1.0));
    }

    #[test]
    fn mul_examples() {
        assert_eq!(shift_add_mul(&bw(3, 4), &bw(5, 4)).unwrap().to_int(), 15);
        assert_eq!(shift_add_mul(&bw(13, 4), &bw(0, 4)).unwrap().to_int(), 0);
        assert_eq!(shift_add_mul(&bw(13, 4), &bw(1, 4)).unwrap().to_int(), 13);
        assert_eq!(shift_add_mul(&bw(3, 4), &bw(5, 4)).unwrap().width(), 8);
    }

    #[test]
    fn div_examples() {
        let (q, r, z) = long_divide(&bw(14, 4), &bw(4, 4)).unwrap();
        assert_eq!((q.to_int(), r.to_int(), z), (3, 2, 0.0));
        let (q, r, _) = long_divide(&bw(11, 4), &bw(1, 4)).unwrap();
        assert_eq!((q.to_int(), r.to_int()), (11, 0));
        let (q, r, _) = long_divide(&bw(0, 4), &bw(6, 4)).unwrap();
        assert_eq!((q.to_int(), r.to_int()), (0, 0));
    }

    #[test]
    fn divide_by_zero_convention() {
        let (q, r, z) = long_divide(&bw(9, 4), &bw(0, 4)).unwrap();
        assert_eq!((q.to_int(), r.to_int(), z), (15, 9, 1.0));
    }

    #[test]
    fn tape_and_plain_agree() {
        let tape = Tape::new();
        let g = OnTape(&tape);
        let x: Vec<_> = [0.2, 0.9, 0.4].iter().map(|&v| tape.scalar(v)).collect();
        let y: Vec<_> = [0.7, 0.1, 0.5].iter().map(|&v| tape.scalar(v)).collect();
        let on_tape: Vec<f64> = ripple_add_with(&g, &x, &y).unwrap().iter().map(|v| v.item()).collect();
        let plain = ripple_add_with(&Plain, &[0.2, 0.9, 0.4], &[0.7, 0.1, 0.5]).unwrap();
        for (a, b) in on_tape.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
