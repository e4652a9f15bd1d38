//! Synthetic vocabulary and templated datasets.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::rng;

/// Largest number the vocabulary can spell.
pub const MAX_NUMBER: usize = 16;

const WORDS: &[&str] = &[
    "<pad>", "add", "sum", "plus", "and", "subtract", "difference", "minus", "multiply", "product",
    "times", "by", "what", "is", "of", "the", "calculate", "fibonacci", "from", "inputs", "to",
    "depth", "recursion", "starting", "with", "compute", "a", "number", "then", "result", "give",
    "me", "please", "find", "value", "max", "maximum", "larger",
];

/// Token ids: the words above, then the numbers `0..MAX_NUMBER`.
pub struct Vocab;

impl Vocab {
    pub fn size() -> usize {
        WORDS.len() + MAX_NUMBER
    }

    pub fn pad() -> usize {
        0
    }

    pub fn word(w: &str) -> usize {
        WORDS
            .iter()
            .position(|&x| x == w)
            .unwrap_or_else(|| panic!("`{w}` is not in the vocabulary"))
    }

    pub fn number(k: usize) -> Result<usize> {
        if k < MAX_NUMBER {
            Ok(WORDS.len() + k)
        } else {
            Err(Error::Capacity(format!("number {k} has no token (max {})", MAX_NUMBER - 1)))
        }
    }

    /// The number a token spells, if any.
    pub fn value(token: usize) -> Option<usize> {
        (WORDS.len()..Vocab::size()).contains(&token).then(|| token - WORDS.len())
    }

    pub fn token(text: &str) -> Result<usize> {
        if let Ok(k) = text.parse::<usize>() {
            return Vocab::number(k);
        }
        WORDS
            .iter()
            .position(|&x| x == text)
            .ok_or_else(|| Error::Domain(format!("`{text}` is not in the vocabulary")))
    }

    pub fn encode(text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(Vocab::token).collect()
    }

    pub fn decode(ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&t| t != Vocab::pad())
            .map(|&t| {
                if t >= WORDS.len() {
                    (t - WORDS.len()).to_string()
                } else {
                    WORDS[t].to_string()
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One templated example. `fields` holds the values a correct parse extracts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInput {
    pub tokens: Vec<usize>,
    pub gold: usize,
    /// Library program the input asks for.
    pub program: usize,
    pub fields: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<TaskInput>,
    pub test: Vec<TaskInput>,
    pub seq_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    ModArith,
    FibDepth { depth: usize },
    PermutationRouting,
}

/// Templates per operation: operation word and glue word. Numbers always
/// sit at positions 1 and 3, so parsing needs no content-dependent routing.
const MOD_TEMPLATES: [[(&str, &str); 4]; 4] = [
    [("add", "and"), ("add", "plus"), ("sum", "and"), ("sum", "plus")],
    [("subtract", "minus"), ("subtract", "and"), ("difference", "minus"), ("difference", "and")],
    [("multiply", "by"), ("multiply", "times"), ("product", "and"), ("product", "times")],
    [("max", "and"), ("maximum", "and"), ("maximum", "of"), ("larger", "and")],
];

const FIB_TEMPLATES: [&str; 3] = [
    "fibonacci from {a} and {b} to depth {d}",
    "fibonacci with {a} and {b} to depth {d}",
    "fibonacci from {a} then {b} recursion depth {d}",
];

/// `(a, b) -> (b, a + b)` applied `depth` times; returns the last sum mod `n`.
pub fn fib_oracle(a: usize, b: usize, depth: usize, n: usize) -> usize {
    let (mut x, mut y) = (a % n, b % n);
    for _ in 0..depth {
        let s = (x + y) % n;
        x = y;
        y = s;
    }
    y
}

/// Slot order used by the routing task: `perm[k]` is the input held by slot `k`
/// (0 = x, 1 = y, 2 = distractor).
pub fn routing_permutation(seed: u64) -> [usize; 3] {
    let mut p = [0, 1, 2];
    p.shuffle(&mut rng(seed ^ 0x5eed));
    p
}

fn split(mut all: Vec<TaskInput>, seed: u64, seq_len: usize) -> Dataset {
    all.shuffle(&mut rng(seed));
    let test_len = (all.len() / 10).max(1).min(all.len().saturating_sub(1));
    let test = all.split_off(all.len() - test_len);
    Dataset {
        train: all,
        test,
        seq_len,
    }
}

/// Builds a deterministic dataset with a 90/10 train/test split.
///
/// `size` caps the number of examples (0 means the full grid).
pub fn make_task(kind: TaskKind, n: usize, size: usize, seed: u64) -> Result<Dataset> {
    if !(2..=MAX_NUMBER).contains(&n) {
        return Err(Error::Capacity(format!(
            "word size {n} outside the vocabulary's range 2..={MAX_NUMBER}"
        )));
    }
    let mut r = rng(seed.wrapping_add(1));
    let mut all = Vec::new();
    let seq_len;
    match kind {
        TaskKind::ModArith => {
            seq_len = 4;
            for (op, templates) in MOD_TEMPLATES.iter().enumerate() {
                for x in 0..n {
                    for y in 0..n {
                        let (w, glue) = templates[r.gen_range(0..templates.len())];
                        let tokens = vec![
                            Vocab::word(w),
                            Vocab::number(x)?,
                            Vocab::word(glue),
                            Vocab::number(y)?,
                        ];
                        let gold = match op {
                            0 => (x + y) % n,
                            1 => (x + n - y) % n,
                            2 => (x * y) % n,
                            _ => x.max(y),
                        };
                        all.push(TaskInput {
                            tokens,
                            gold,
                            program: op,
                            fields: vec![x, y],
                        });
                    }
                }
            }
        }
        TaskKind::FibDepth { depth } => {
            if depth == 0 || depth >= n {
                return Err(Error::Capacity(format!("depth {depth} outside 1..{n}")));
            }
            seq_len = 8;
            for a in 0..n {
                for b in 0..n {
                    let t = FIB_TEMPLATES[r.gen_range(0..FIB_TEMPLATES.len())];
                    let text = t
                        .replace("{a}", &a.to_string())
                        .replace("{b}", &b.to_string())
                        .replace("{d}", &depth.to_string());
                    all.push(TaskInput {
                        tokens: Vocab::encode(&text)?,
                        gold: fib_oracle(a, b, depth, n),
                        program: 0,
                        fields: vec![a, b, depth],
                    });
                }
            }
        }
        TaskKind::PermutationRouting => {
            seq_len = 3;
            let perm = routing_permutation(seed);
            for x in 0..n {
                for y in 0..n - x {
                    for z in 0..n {
                        let vals = [x, y, z];
                        let tokens = perm
                            .iter()
                            .map(|&k| Vocab::number(vals[k]))
                            .collect::<Result<Vec<_>>>()?;
                        all.push(TaskInput {
                            tokens,
                            gold: x + y,
                            program: 0,
                            fields: vec![x, y, z],
                        });
                    }
                }
            }
        }
    }
    if size > 0 && size < all.len() {
        all.shuffle(&mut r);
        all.truncate(size);
    }
    for ex in &mut all {
        ex.tokens.resize(seq_len, Vocab::pad());
    }
    Ok(split(all, seed, seq_len))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_small() {
        assert!((40..=60).contains(&Vocab::size()));
        let ids = Vocab::encode("add 3 and 4").unwrap();
        assert_eq!(Vocab::decode(&ids), "add 3 and 4");
        assert!(Vocab::encode("add 99 and 4").is_err());
    }

    #[test]
    fn mod_arith_gold() {
        let d = make_task(TaskKind::ModArith, 16, 0, 0).unwrap();
        assert_eq!(d.train.len() + d.test.len(), 1024);
        assert_eq!(d.test.len(), 102);
        let add = Vocab::encode("add 3 and 4").unwrap();
        let ex = d.train.iter().chain(&d.test).find(|e| e.tokens == add);
        if let Some(ex) = ex {
            assert_eq!(ex.gold, 7);
        }
        for e in d.train.iter().chain(&d.test) {
            let (x, y) = (e.fields[0], e.fields[1]);
            let want = [(x + y) % 16, (x + 16 - y) % 16, (x * y) % 16, x.max(y)][e.program];
            assert_eq!(e.gold, want);
        }
    }

    #[test]
    fn fib_gold_follows_pairwise_sums() {
        assert_eq!(fib_oracle(6, 2, 3, 100), 18);
        assert_eq!(fib_oracle(6, 2, 3, 16), 2);
        let d = make_task(TaskKind::FibDepth { depth: 3 }, 16, 0, 1).unwrap();
        let ex = d.train.iter().chain(&d.test).find(|e| e.fields[..2] == [6, 2]).unwrap();
        assert_eq!(ex.gold, 2);
    }

    #[test]
    fn routing_uses_fixed_slots() {
        let d = make_task(TaskKind::PermutationRouting, 16, 0, 4).unwrap();
        assert_eq!(d.train.len() + d.test.len(), 2176);
        let perm = routing_permutation(4);
        for e in &d.train {
            for (slot, &k) in perm.iter().enumerate() {
                assert_eq!(e.tokens[slot], Vocab::number(e.fields[k]).unwrap());
            }
            assert_eq!(e.gold, e.fields[0] + e.fields[1]);
        }
    }

    #[test]
    fn deterministic() {
        let a = make_task(TaskKind::ModArith, 16, 100, 9).unwrap();
        let b = make_task(TaskKind::ModArith, 16, 100, 9).unwrap();
        assert_eq!(a, b);
        assert!(make_task(TaskKind::ModArith, 32, 0, 0).is_err());
    }
}
