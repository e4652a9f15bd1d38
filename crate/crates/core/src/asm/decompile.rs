use super::link::machine_listing;
use super::parse::SymbolicProgram;
use crate::compiler::{Field, ProgramMatrix};

/// A program read back from a probability matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Decompiled {
    pub program: SymbolicProgram,
    /// Smallest argmax probability across the four fields of each line.
    pub confidence: Vec<f64>,
    pub uncertain: Vec<bool>,
}

impl Decompiled {
    pub fn all_certain(&self) -> bool {
        !self.uncertain.iter().any(|&u| u)
    }
}

/// Argmax of every field; lines whose confidence falls below `threshold` are flagged.
pub fn decompile(rho: &ProgramMatrix, threshold: f64) -> Decompiled {
    let code = rho.argmax_code();
    let confidence: Vec<f64> = (0..rho.lines())
        .map(|l| {
            Field::ALL
                .iter()
                .map(|&f| rho.field(l, f).iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let uncertain = confidence.iter().map(|&c| c < threshold).collect();
    Decompiled {
        program: machine_listing("decompiled", &code),
        confidence,
        uncertain,
    }
}
