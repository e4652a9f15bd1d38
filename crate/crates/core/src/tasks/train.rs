//! End-to-end training of a controller through the machine.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::asm::Library;
use crate::compiler::{compile, field_softmax, freeze_mask, MachineLayout, ProgramMatrix, Protect, KAPPA};
use crate::corpus;
use crate::encodings::{decode, one_hot};
use crate::error::{Error, Result};
use crate::machine::{loss_on_memory, LossMode, Machine, RunConfig, TapeState};
use crate::nn::rng;
use crate::substrate::{concat, Optimizer, ParamId, Tape, Tensor, TrainConfig, Var};

use super::controller::{Controller, ControllerConfig, ControllerOutput};
use super::data::{Dataset, TaskInput, TaskKind};

/// Per-iteration step count of the corpus fib loop.
pub const FIB_STEPS_PER_DEPTH: usize = 8;

/// A compiled, frozen library plus the wiring between controller and machine.
#[derive(Clone, Debug)]
pub struct TaskSetup {
    pub name: String,
    pub lib: Library,
    pub rho: ProgramMatrix,
    pub machine: Machine,
    /// Entry line of each selectable program, in selection order.
    pub entries: Vec<usize>,
    /// Registers set by controller heads.
    pub heads: Vec<usize>,
    /// Registers held at fixed values (besides r0 = 1).
    pub fixed: Vec<(usize, usize)>,
    /// Memory cell holding the answer.
    pub answer: AnswerCell,
    /// Entries whose result is unchanged when the first two heads swap; answer
    /// supervision cannot tell the operand order apart for these.
    pub commutative: Vec<bool>,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerCell {
    Fixed(usize),
    /// Cell `depth - 1`, where depth is the example's last parsed field.
    AfterDepth,
}

impl TaskSetup {
    pub fn mod_arith(n: usize) -> Result<Self> {
        let lib = corpus::library(&corpus::MOD_ARITH, n)?;
        let entries = corpus::MOD_ARITH.iter().map(|p| lib.entry(p)).collect::<Result<_>>()?;
        let mut setup = Self::build("mod_arith", lib, n, entries, vec![2, 3], vec![], AnswerCell::Fixed(0), 6)?;
        setup.commutative = corpus::MOD_ARITH.iter().map(|&p| p != "sub_mod").collect();
        Ok(setup)
    }

    /// Fib loop with the step budget `8 * depth + 2`.
    pub fn fib_depth(n: usize, depth: usize) -> Result<Self> {
        Self::fib_with_budget(n, depth, FIB_STEPS_PER_DEPTH * depth + 2)
    }

    pub fn fib_with_budget(n: usize, depth: usize, steps: usize) -> Result<Self> {
        if steps < FIB_STEPS_PER_DEPTH * depth {
            return Err(Error::Usage(format!(
                "step budget {steps} is below {} for depth {depth}",
                FIB_STEPS_PER_DEPTH * depth
            )));
        }
        let lib = corpus::library(&["fib"], n)?;
        Self::build("fib_depth", lib, n, vec![0], vec![2, 3, 5], vec![(4, 0)], AnswerCell::AfterDepth, steps)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        name: &str,
        lib: Library,
        n: usize,
        entries: Vec<usize>,
        heads: Vec<usize>,
        fixed: Vec<(usize, usize)>,
        answer: AnswerCell,
        steps: usize,
    ) -> Result<Self> {
        let layout = MachineLayout::new(n)?;
        let rho = compile(&lib, &layout)?;
        let entries_len = entries.len();
        Ok(TaskSetup {
            name: name.to_string(),
            machine: Machine::new(layout)?,
            lib,
            rho,
            entries,
            heads,
            fixed,
            answer,
            commutative: vec![false; entries_len],
            steps,
        })
    }

    pub fn answer_cell(&self, ex: &TaskInput) -> usize {
        match self.answer {
            AnswerCell::Fixed(a) => a,
            AnswerCell::AfterDepth => ex.fields.last().copied().unwrap_or(1).saturating_sub(1),
        }
    }

    pub fn for_task(kind: TaskKind, n: usize) -> Result<Self> {
        match kind {
            TaskKind::ModArith => Self::mod_arith(n),
            TaskKind::FibDepth { depth } => Self::fib_depth(n, depth),
            TaskKind::PermutationRouting => Err(Error::Usage(
                "permutation routing runs through run_tables_vs_circuits".into(),
            )),
        }
    }

    /// Initial machine state driven by the controller's outputs.
    pub fn initial_state<'t>(&self, tape: &'t Tape, out: &ControllerOutput<'t>) -> Result<TapeState<'t>> {
        let layout = self.machine.layout();
        let n = layout.n;
        let mut rows = Vec::with_capacity(layout.registers);
        for r in 0..layout.registers {
            let row = if let Some((_, w)) = out.registers.iter().find(|(k, _)| *k == r) {
                *w
            } else {
                let v = if r == 0 {
                    1
                } else {
                    self.fixed.iter().find(|(k, _)| *k == r).map_or(0, |&(_, v)| v)
                };
                tape.constant(one_hot(v, n)?.tensor())
            };
            rows.push(row.reshape(&[1, n]));
        }
        let mut entries = Tensor::zeros(&[self.entries.len(), n]);
        for (i, &e) in self.entries.iter().enumerate() {
            entries.data_mut()[i * n + e] = 1.0;
        }
        let mut memory = Tensor::zeros(&[layout.mem_size, n]);
        for i in 0..layout.mem_size {
            memory.data_mut()[i * n] = 1.0;
        }
        Ok(TapeState {
            memory: tape.constant(memory),
            registers: concat(&rows, 0),
            counter: out.selection.contract(tape.constant(entries), &[(0, 0)])?,
            halted: tape.scalar(0.0),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub controller: ControllerConfig,
    #[serde(default)]
    pub loss: LossMode,
    /// Stop once test accuracy reaches this percentage.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            controller: ControllerConfig::default(),
            loss: LossMode::Expected,
            target_accuracy: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Running accuracy over the epoch's updates.
    pub train_accuracy: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainStatus {
    Completed,
    Diverged,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub task: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub epochs: Vec<EpochMetrics>,
    pub wall_time_secs: f64,
    pub status: TrainStatus,
    /// Frozen library logits unchanged bit for bit.
    pub frozen_intact: bool,
    /// Share of test inputs whose decoded selection and registers equal the parse, in percent.
    pub parse_accuracy: f64,
}

impl ExperimentResult {
    pub fn final_test_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.test_accuracy)
    }

    pub fn best_test_accuracy(&self) -> f64 {
        self.epochs.iter().map(|e| e.test_accuracy).fold(0.0, f64::max)
    }

    /// First epoch (1-based) whose test accuracy reached `threshold`.
    pub fn epochs_to(&self, threshold: f64) -> Option<usize> {
        self.epochs.iter().find(|e| e.test_accuracy >= threshold).map(|e| e.epoch)
    }

    /// `epoch,split,accuracy,loss` rows.
    pub fn csv(&self) -> String {
        let mut s = String::from("epoch,split,accuracy,loss\n");
        for e in &self.epochs {
            s += &format!("{},train,{:.4},{:.6}\n", e.epoch, e.train_accuracy, e.train_loss);
            s += &format!("{},test,{:.4},{:.6}\n", e.epoch, e.test_accuracy, e.test_loss);
        }
        s
    }
}

struct Forward {
    loss: f64,
    correct: bool,
    parsed: bool,
}

/// A controller with the frozen library logits stored alongside its weights.
pub struct Trainee {
    pub controller: Controller,
    pub library: ParamId,
}

impl Trainee {
    pub fn new(setup: &TaskSetup, seq_len: usize, config: &ControllerConfig, seed: u64) -> Result<Self> {
        let mut controller = Controller::new(
            config,
            seq_len,
            setup.entries.len(),
            &setup.heads,
            setup.machine.layout().n,
            seed,
        )?;
        let mask = freeze_mask(&setup.rho, Some(&setup.lib), &[Protect::All])?;
        let library = controller.store.add_masked("library", setup.rho.logits(KAPPA), mask);
        Ok(Trainee { controller, library })
    }

    fn example<'t>(
        &self,
        setup: &TaskSetup,
        tape: &'t Tape,
        params: &[Var<'t>],
        ex: &TaskInput,
        loss_mode: LossMode,
    ) -> Result<(Var<'t>, Forward)> {
        let layout = setup.machine.layout();
        let out = self.controller.forward(tape, params, &ex.tokens)?;
        let s0 = setup.initial_state(tape, &out)?;
        let rho = field_softmax(params[self.library.0], layout)?;
        let run = setup.machine.run_tape(rho, s0, &RunConfig::soft(setup.steps))?;
        let cell = setup.answer_cell(ex);
        let memory = run.memory(loss_mode);
        let loss = loss_on_memory(memory, &[(cell, one_hot(ex.gold, layout.n)?)])?;
        let row = memory.value();
        let correct = decode(row.row(cell)) == ex.gold;
        let sel_ok = decode(&out.selection.to_vec()) == ex.program;
        let got: Vec<usize> = out.registers.iter().map(|(_, w)| decode(&w.to_vec())).collect();
        let in_order = got.iter().zip(&ex.fields).all(|(g, w)| g == w);
        let swapped = setup.commutative.get(ex.program).copied().unwrap_or(false)
            && got.len() >= 2
            && ex.fields.len() >= 2
            && got[0] == ex.fields[1]
            && got[1] == ex.fields[0]
            && got[2..].iter().zip(&ex.fields[2..]).all(|(g, w)| g == w);
        let regs_ok = in_order || swapped;
        let value = loss.item();
        Ok((
            loss,
            Forward {
                loss: value,
                correct,
                parsed: sel_ok && regs_ok,
            },
        ))
    }

    fn evaluate(&self, setup: &TaskSetup, data: &[TaskInput], loss_mode: LossMode) -> Result<(f64, f64, f64)> {
        let (mut loss, mut correct, mut parsed) = (0.0, 0usize, 0usize);
        for ex in data {
            let tape = Tape::new();
            let params = self.controller.store.attach(&tape);
            let (_, f) = self.example(setup, &tape, &params, ex, loss_mode)?;
            loss += f.loss;
            correct += f.correct as usize;
            parsed += f.parsed as usize;
        }
        let k = data.len().max(1) as f64;
        Ok((100.0 * correct as f64 / k, loss / k, 100.0 * parsed as f64 / k))
    }
}

/// Trains a fresh controller on `data`, updating everything except the frozen library.
pub fn train(
    data: &Dataset,
    setup: &TaskSetup,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<ExperimentResult> {
    let (result, _) = train_returning(data, setup, config, options)?;
    Ok(result)
}

/// As [`train`], also returning the trained controller.
pub fn train_returning(
    data: &Dataset,
    setup: &TaskSetup,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<(ExperimentResult, Trainee)> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Usage("empty training set".into()));
    }
    let start = Instant::now();
    let mut trainee = Trainee::new(setup, data.seq_len, &options.controller, config.seed)?;
    let frozen_before = trainee.controller.store.get(trainee.library).value.clone();
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &trainee.controller.store);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut shuffle = rng(config.seed.wrapping_mul(0x9e37_79b9).wrapping_add(7));
    let mut epochs = Vec::new();
    let mut status = TrainStatus::Completed;

    'outer: for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let tape = Tape::new();
            let params = trainee.controller.store.attach(&tape);
            let mut total: Option<Var> = None;
            for &i in batch {
                let (loss, f) = trainee.example(setup, &tape, &params, &data.train[i], options.loss)?;
                loss_sum += f.loss;
                correct += f.correct as usize;
                total = Some(match total {
                    Some(t) => t.add(loss),
                    None => loss,
                });
            }
            let total = total.unwrap().scale(1.0 / batch.len() as f64);
            if !total.item().is_finite() {
                status = TrainStatus::Diverged;
                break 'outer;
            }
            let grads = tape.backward(total)?;
            let g: Vec<Tensor> = params.iter().map(|&p| grads.wrt(p)).collect();
            opt.step(&mut trainee.controller.store, &g)?;
        }
        let (test_accuracy, test_loss, _) = trainee.evaluate(setup, &data.test, options.loss)?;
        let k = data.train.len() as f64;
        epochs.push(EpochMetrics {
            epoch,
            train_accuracy: 100.0 * correct as f64 / k,
            train_loss: loss_sum / k,
            test_accuracy,
            test_loss,
        });
        if let Some(t) = options.target_accuracy {
            if test_accuracy >= t {
                break;
            }
        }
    }
    let (_, _, parse_accuracy) = trainee.evaluate(setup, &data.test, options.loss)?;
    let frozen_after = &trainee.controller.store.get(trainee.library).value;
    let frozen_intact = frozen_before
        .data()
        .iter()
        .zip(frozen_after.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let result = ExperimentResult {
        task: setup.name.clone(),
        seed: config.seed,
        config: serde_json::json!({ "train": config, "options": options, "steps": setup.steps }),
        epochs,
        wall_time_secs: start.elapsed().as_secs_f64(),
        status,
        frozen_intact,
        parse_accuracy,
    };
    Ok((result, trainee))
}
