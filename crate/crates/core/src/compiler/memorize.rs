use serde::Serialize;

use super::{field_softmax, Field, ProgramMatrix};
use crate::asm::decompile;
use crate::encodings::decode;
use crate::error::{Error, Result};
use crate::nn::{rng, Dense};
use crate::substrate::{Optimizer, ParamStore, Tape, Tensor, TrainConfig, Var};

/// Two-layer network mapping a one-hot line index to that line's field logits.
pub struct LineGenerator {
    pub store: ParamStore,
    hidden: Dense,
    out: Dense,
    lines: usize,
}

impl LineGenerator {
    pub fn new(lines: usize, hidden: usize, width: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let h = Dense::new(&mut store, "gen.hidden", lines, hidden, &mut r);
        let out = Dense::new(&mut store, "gen.out", hidden, width, &mut r);
        LineGenerator {
            store,
            hidden: h,
            out,
            lines,
        }
    }

    pub fn lines(&self) -> usize {
        self.lines
    }

    pub fn width(&self) -> usize {
        self.out.outputs
    }

    /// Logits for every line, `[lines, width]`.
    pub fn forward<'t>(&self, tape: &'t Tape, params: &[Var<'t>]) -> Var<'t> {
        let mut eye = Tensor::zeros(&[self.lines, self.lines]);
        for i in 0..self.lines {
            eye.data_mut()[i * self.lines + i] = 1.0;
        }
        let h = self.hidden.apply(params, tape.constant(eye)).tanh();
        self.out.apply(params, h)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MemorizeReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub per_line_loss: Vec<f64>,
    pub loss_curve: Vec<f64>,
    /// Decompiled generator output equals the target program.
    pub matched: bool,
    /// Reached the loss tolerance before the epoch budget ran out.
    pub converged: bool,
}

/// Overfits `generator` to emit `target`, using per-field cross-entropy
/// against the target's argmax. Full-batch: one update per epoch.
pub fn memorize(
    target: &ProgramMatrix,
    generator: &mut LineGenerator,
    config: &TrainConfig,
    tolerance: f64,
) -> Result<MemorizeReport> {
    config.validate()?;
    let layout = target.layout().clone();
    if generator.lines() != target.lines() || generator.width() != layout.width() {
        return Err(Error::Shape(format!(
            "generator emits {} x {}, target is {} x {}",
            generator.lines(),
            generator.width(),
            target.lines(),
            layout.width()
        )));
    }
    let lines = target.lines();
    let mut gold = Tensor::zeros(&[lines, layout.width()]);
    for l in 0..lines {
        for f in Field::ALL {
            let r = layout.field_range(f);
            let k = decode(target.field(l, f));
            gold.data_mut()[l * layout.width() + r.start + k] = 1.0;
        }
    }
    let want = target.argmax_code();
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &generator.store);
    let mut curve = Vec::new();
    let mut per_line = vec![0.0; lines];
    let mut matched = false;
    let mut converged = false;

    for _ in 0..config.max_epochs {
        let tape = Tape::new();
        let params = generator.store.attach(&tape);
        let probs = field_softmax(generator.forward(&tape, &params), &layout)?;
        let ce = probs.ln().mul(tape.constant(gold.clone()));
        let line_ce = ce.contract(tape.constant(Tensor::full(&[layout.width()], 1.0)), &[(1, 0)])?;
        let loss = line_ce.sum().scale(-1.0 / (4 * lines) as f64);
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite("memorization loss".into()));
        }
        curve.push(value);
        per_line = line_ce.to_vec().iter().map(|v| -v / 4.0).collect();
        let emitted = ProgramMatrix::from_probs(layout.clone(), probs.value(), Default::default())?;
        matched = emitted.argmax_code() == want;
        if matched && value < tolerance {
            converged = true;
            break;
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = params.iter().map(|&p| grads.wrt(p)).collect();
        opt.step(&mut generator.store, &g)?;
    }
    Ok(MemorizeReport {
        epochs: curve.len(),
        final_loss: *curve.last().unwrap(),
        per_line_loss: per_line,
        loss_curve: curve,
        matched,
        converged,
    })
}

/// Current generator output as a program matrix.
pub fn generated_program(generator: &LineGenerator, target: &ProgramMatrix) -> Result<ProgramMatrix> {
    let tape = Tape::new();
    let params = generator.store.attach(&tape);
    let probs = field_softmax(generator.forward(&tape, &params), target.layout())?;
    ProgramMatrix::from_probs(target.layout().clone(), probs.value(), target.entry_points().clone())
}

/// Symbolic match between a generator's output and the target, via decompilation.
pub fn symbolic_match(generator: &LineGenerator, target: &ProgramMatrix) -> Result<bool> {
    let out = generated_program(generator, target)?;
    Ok(decompile(&out, 0.0).program == decompile(target, 0.0).program)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{compile, MachineLayout};
    use crate::corpus;
    use crate::substrate::OptimizerKind;

    fn config(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.05,
            max_epochs: epochs,
            seed: 0,
            batch_size: 1,
            optimizer: OptimizerKind::adam(),
        }
    }

    #[test]
    fn single_halt_line() {
        let lib = crate::asm::link(&[crate::asm::Parser::new(16).parse("h", "halt").unwrap()], 16).unwrap();
        let target = compile(&lib, &MachineLayout::new(16).unwrap()).unwrap();
        let mut g = LineGenerator::new(1, 16, target.layout().width(), 3);
        let rep = memorize(&target, &mut g, &config(50), 0.05).unwrap();
        assert!(rep.matched, "{rep:?}");
        assert!(symbolic_match(&g, &target).unwrap());
    }

    #[test]
    fn fib_within_budget() {
        let lib = corpus::library(&["fib"], 16).unwrap();
        let target = compile(&lib, &MachineLayout::new(16).unwrap()).unwrap();
        let mut g = LineGenerator::new(target.lines(), 32, target.layout().width(), 0);
        let rep = memorize(&target, &mut g, &config(500), 0.05).unwrap();
        assert!(rep.matched && rep.converged, "{} epochs, loss {}", rep.epochs, rep.final_loss);
        let d = decompile(&generated_program(&g, &target).unwrap(), 1.0);
        assert!(d.confidence.iter().all(|&c| c < 1.0));
    }

    #[test]
    fn shape_mismatch() {
        let lib = corpus::library(&["fib"], 16).unwrap();
        let target = compile(&lib, &MachineLayout::new(16).unwrap()).unwrap();
        let mut g = LineGenerator::new(target.lines(), 8, 10, 0);
        assert!(matches!(memorize(&target, &mut g, &config(5), 0.1), Err(Error::Shape(_))));
    }
}
