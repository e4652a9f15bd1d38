//! Seeded experiment drivers: mod-arith tool use, the recursion depth study,
//! tables against circuits, and memorization.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuits::{ripple_add_with, unstack, OnTape, Plain};
use crate::compiler::{compile, memorize, symbolic_match, LineGenerator, MachineLayout, MemorizeReport};
use crate::corpus;
use crate::encodings::{build_mod_table, decode, one_hot, table_lookup, AluTable, BitWord};
use crate::error::{Error, Result};
use crate::nn::rng;
use crate::substrate::{concat, stack, Optimizer, OptimizerKind, ParamStore, Tape, Tensor, TrainConfig, Var};

use super::data::{make_task, routing_permutation, TaskKind};
use super::train::{train, EpochMetrics, ExperimentResult, TaskSetup, TrainOptions, FIB_STEPS_PER_DEPTH};

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    (m, var.sqrt())
}

fn with_seed(config: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..config.clone() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModArithConfig {
    pub n: usize,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    #[serde(default)]
    pub options: TrainOptions,
}

impl Default for ModArithConfig {
    fn default() -> Self {
        ModArithConfig {
            n: 16,
            seeds: vec![0, 1, 2],
            train: TrainConfig {
                learning_rate: 0.01,
                max_epochs: 100,
                seed: 0,
                batch_size: 16,
                optimizer: OptimizerKind::adam(),
            },
            options: TrainOptions {
                target_accuracy: Some(99.0),
                ..TrainOptions::default()
            },
        }
    }
}

/// One training run per seed, in parallel; results in seed order.
pub fn run_mod_arith(config: &ModArithConfig) -> Result<Vec<ExperimentResult>> {
    let setup = TaskSetup::mod_arith(config.n)?;
    config
        .seeds
        .par_iter()
        .map(|&seed| {
            let data = make_task(TaskKind::ModArith, config.n, 0, seed)?;
            train(&data, &setup, &with_seed(&config.train, seed), &config.options)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthStudyConfig {
    pub n: usize,
    pub depths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    #[serde(default)]
    pub options: TrainOptions,
    /// Interpreter steps per depth unit; defaults to the loop length plus slack.
    #[serde(default)]
    pub steps_per_depth: Option<usize>,
}

impl Default for DepthStudyConfig {
    fn default() -> Self {
        DepthStudyConfig {
            n: 16,
            depths: vec![1, 2, 3],
            seeds: vec![0, 1, 2],
            train: TrainConfig {
                learning_rate: 0.01,
                max_epochs: 20,
                seed: 0,
                batch_size: 16,
                optimizer: OptimizerKind::adam(),
            },
            options: TrainOptions::default(),
            steps_per_depth: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DepthRow {
    pub depth: usize,
    pub steps: usize,
    /// Final test accuracy per seed, in percent.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DepthStudy {
    pub rows: Vec<DepthRow>,
    #[serde(skip)]
    pub runs: Vec<ExperimentResult>,
}

impl DepthStudy {
    /// `depth,steps,mean,std,seed_<s>...` with one row per depth.
    pub fn csv(&self, seeds: &[u64]) -> String {
        let mut s = String::from("depth,steps,mean,std");
        for seed in seeds {
            s += &format!(",seed_{seed}");
        }
        s.push('\n');
        for r in &self.rows {
            s += &format!("{},{},{:.4},{:.4}", r.depth, r.steps, r.mean, r.std);
            for a in &r.accuracies {
                s += &format!(",{a:.4}");
            }
            s.push('\n');
        }
        s
    }
}

fn depth_steps(config: &DepthStudyConfig, depth: usize) -> usize {
    match config.steps_per_depth {
        Some(k) => k * depth,
        None => FIB_STEPS_PER_DEPTH * depth + 2,
    }
}

/// Trains the fib controller at each depth for every seed.
pub fn run_depth_study(config: &DepthStudyConfig) -> Result<DepthStudy> {
    if config.depths.is_empty() || config.seeds.is_empty() {
        return Err(Error::Usage("depth study needs at least one depth and one seed".into()));
    }
    let mut setups = Vec::new();
    for &d in &config.depths {
        setups.push(TaskSetup::fib_with_budget(config.n, d, depth_steps(config, d))?);
    }
    let jobs: Vec<(usize, u64)> = (0..config.depths.len())
        .flat_map(|i| config.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let data = make_task(TaskKind::FibDepth { depth: config.depths[i] }, config.n, 0, seed)?;
            train(&data, &setups[i], &with_seed(&config.train, seed), &config.options)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = config
        .depths
        .iter()
        .enumerate()
        .map(|(i, &depth)| {
            let accuracies: Vec<f64> = runs[i * config.seeds.len()..(i + 1) * config.seeds.len()]
                .iter()
                .map(|r| r.final_test_accuracy())
                .collect();
            let (mean, std) = mean_std(&accuracies);
            DepthRow {
                depth,
                steps: setups[i].steps,
                accuracies,
                mean,
                std,
            }
        })
        .collect();
    Ok(DepthStudy { rows, runs })
}

/// ALU behind the routing task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// One-hot Words through an `n`-value addition table.
    Table,
    /// Bit vectors through a ripple-carry adder.
    Circuit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TablesVsCircuitsConfig {
    /// Table size; in-range operands satisfy `x + y < n`.
    pub n: usize,
    /// Circuit operand width.
    pub bits: usize,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Out-of-range pairs drawn from `[n, 2^bits)`.
    pub out_of_range: usize,
}

impl Default for TablesVsCircuitsConfig {
    fn default() -> Self {
        TablesVsCircuitsConfig {
            n: 16,
            bits: 7,
            seeds: vec![0, 1, 2],
            train: TrainConfig {
                learning_rate: 0.1,
                max_epochs: 10,
                seed: 0,
                batch_size: 16,
                optimizer: OptimizerKind::adam(),
            },
            out_of_range: 256,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackendReport {
    pub backend: Backend,
    pub seed: u64,
    /// Accuracies are evaluated on the full split after each epoch.
    pub epochs: Vec<EpochMetrics>,
    /// First epoch with 100% train accuracy.
    pub epochs_to_converge: Option<usize>,
    /// `None` when the backend cannot represent the operands.
    pub out_of_range_accuracy: Option<f64>,
    /// Learned routing weights, one row per operand.
    pub routing: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TablesVsCircuits {
    pub reports: Vec<BackendReport>,
}

impl TablesVsCircuits {
    /// `backend,seed,epoch,split,accuracy,loss` rows.
    pub fn csv(&self) -> String {
        let mut s = String::from("backend,seed,epoch,split,accuracy,loss\n");
        for r in &self.reports {
            let b = match r.backend {
                Backend::Table => "table",
                Backend::Circuit => "circuit",
            };
            for e in &r.epochs {
                s += &format!("{b},{},{},train,{:.4},{:.6}\n", r.seed, e.epoch, e.train_accuracy, e.train_loss);
                s += &format!("{b},{},{},test,{:.4},{:.6}\n", r.seed, e.epoch, e.test_accuracy, e.test_loss);
            }
        }
        s
    }

    pub fn backend(&self, backend: Backend) -> impl Iterator<Item = &BackendReport> {
        self.reports.iter().filter(move |r| r.backend == backend)
    }
}

/// Raw operands of one routing example, in slot order, with the gold sum.
#[derive(Clone, Debug)]
struct Routed {
    slots: [usize; 3],
    gold: usize,
}

fn routed(split: &[super::data::TaskInput], seed: u64) -> Vec<Routed> {
    let perm = routing_permutation(seed);
    split
        .iter()
        .map(|e| Routed {
            slots: [e.fields[perm[0]], e.fields[perm[1]], e.fields[perm[2]]],
            gold: e.gold,
        })
        .collect()
}

fn out_of_range_pairs(n: usize, bits: usize, count: usize, seed: u64) -> Vec<Routed> {
    let mut r = rng(seed ^ 0x00f0_0f00);
    let perm = routing_permutation(seed);
    let top = 1usize << bits;
    (0..count)
        .map(|_| {
            let vals = [r.gen_range(n..top), r.gen_range(n..top), r.gen_range(n..top)];
            Routed {
                slots: [vals[perm[0]], vals[perm[1]], vals[perm[2]]],
                gold: vals[0] + vals[1],
            }
        })
        .collect()
}

const FLOOR: f64 = 1e-9;

struct RoutingModel {
    backend: Backend,
    table: Option<AluTable>,
    n: usize,
    bits: usize,
}

impl RoutingModel {
    /// Loss and predicted value for one example.
    fn forward<'t>(&self, tape: &'t Tape, routing: Var<'t>, ex: &Routed) -> Result<(Var<'t>, usize)> {
        let weights = routing.softmax(1);
        match self.backend {
            Backend::Table => {
                let table = self.table.as_ref().expect("table backend");
                let mut x = Tensor::zeros(&[3, self.n]);
                for (k, &v) in ex.slots.iter().enumerate() {
                    x.data_mut()[k * self.n + v] = 1.0;
                }
                let ops = weights.contract(tape.constant(x), &[(1, 0)])?;
                let a = ops.slice(0, 0, 1).reshape(&[self.n]);
                let b = ops.slice(0, 1, 1).reshape(&[self.n]);
                let f = tape.constant(one_hot(0, 1)?.tensor());
                let out = table_lookup(table, f, a, b)?;
                let p = out.at(ex.gold).affine(1.0 - FLOOR, FLOOR);
                Ok((p.ln().scale(-1.0), decode(&out.to_vec())))
            }
            Backend::Circuit => {
                let mut x = Tensor::zeros(&[3, self.bits]);
                for (k, &v) in ex.slots.iter().enumerate() {
                    let bw = BitWord::from_int(v as u64, self.bits);
                    x.data_mut()[k * self.bits..(k + 1) * self.bits].copy_from_slice(bw.bits());
                }
                let ops = weights.contract(tape.constant(x), &[(1, 0)])?;
                let a = unstack(ops.slice(0, 0, 1).reshape(&[self.bits]));
                let b = unstack(ops.slice(0, 1, 1).reshape(&[self.bits]));
                let sum = stack(&ripple_add_with(&OnTape(tape), &a, &b)?);
                let gold = tape.constant(Tensor::vector(
                    BitWord::from_int(ex.gold as u64, self.bits + 1).bits().to_vec(),
                ));
                let p = sum.affine(1.0 - 2.0 * FLOOR, FLOOR);
                let bce = gold.mul(p.ln()).add(gold.complement().mul(p.complement().ln()));
                let predicted = sum
                    .to_vec()
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b > 0.5)
                    .map(|(i, _)| 1usize << i)
                    .sum();
                Ok((bce.sum().scale(-1.0 / (self.bits + 1) as f64), predicted))
            }
        }
    }

    fn evaluate(&self, store: &ParamStore, data: &[Routed]) -> Result<(f64, f64)> {
        let (mut loss, mut correct) = (0.0, 0usize);
        for ex in data {
            let tape = Tape::new();
            let p = store.attach(&tape);
            let (l, pred) = self.forward(&tape, p[0], ex)?;
            loss += l.item();
            correct += (pred == ex.gold) as usize;
        }
        let k = data.len().max(1) as f64;
        Ok((100.0 * correct as f64 / k, loss / k))
    }
}

fn run_backend(config: &TablesVsCircuitsConfig, backend: Backend, seed: u64) -> Result<BackendReport> {
    let train_config = with_seed(&config.train, seed);
    train_config.validate()?;
    let data = make_task(TaskKind::PermutationRouting, config.n, 0, seed)?;
    let train_set = routed(&data.train, seed);
    let test_set = routed(&data.test, seed);
    let model = RoutingModel {
        backend,
        table: match backend {
            Backend::Table => Some(build_mod_table(&["add"], config.n)?),
            Backend::Circuit => None,
        },
        n: config.n,
        bits: config.bits,
    };
    let mut store = ParamStore::new();
    store.add("routing", crate::nn::uniform(&[2, 3], 0.1, &mut rng(seed)));
    let mut opt = Optimizer::new(train_config.optimizer, train_config.learning_rate, &store);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle = rng(seed.wrapping_add(11));
    let mut epochs = Vec::new();
    for epoch in 1..=train_config.max_epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(train_config.batch_size) {
            let tape = Tape::new();
            let p = store.attach(&tape);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                losses.push(model.forward(&tape, p[0], &train_set[i])?.0.reshape(&[1]));
            }
            let loss = concat(&losses, 0).mean();
            if !loss.item().is_finite() {
                return Err(Error::NonFinite("routing loss".into()));
            }
            let grads = tape.backward(loss)?;
            opt.step(&mut store, &[grads.wrt(p[0])])?;
        }
        let (train_accuracy, train_loss) = model.evaluate(&store, &train_set)?;
        let (test_accuracy, test_loss) = model.evaluate(&store, &test_set)?;
        epochs.push(EpochMetrics {
            epoch,
            train_accuracy,
            train_loss,
            test_accuracy,
            test_loss,
        });
    }
    let out_of_range_accuracy = match backend {
        Backend::Table => None,
        Backend::Circuit => {
            let oor = out_of_range_pairs(config.n, config.bits, config.out_of_range, seed);
            Some(model.evaluate(&store, &oor)?.0)
        }
    };
    let tape = Tape::new();
    let w = store.attach(&tape)[0].softmax(1).value();
    Ok(BackendReport {
        backend,
        seed,
        epochs_to_converge: epochs.iter().find(|e| e.train_accuracy >= 100.0).map(|e| e.epoch),
        epochs,
        out_of_range_accuracy,
        routing: (0..2).map(|r| w.row(r).to_vec()).collect(),
    })
}

/// Trains the routing layer against both backends for every seed.
pub fn run_tables_vs_circuits(config: &TablesVsCircuitsConfig) -> Result<TablesVsCircuits> {
    if config.bits == 0 || config.bits > 16 || (1usize << config.bits) <= config.n {
        return Err(Error::Usage(format!(
            "{} circuit bits cannot hold operands beyond the table size {}",
            config.bits, config.n
        )));
    }
    let jobs: Vec<(Backend, u64)> = [Backend::Table, Backend::Circuit]
        .iter()
        .flat_map(|&b| config.seeds.iter().map(move |&s| (b, s)))
        .collect();
    let reports = jobs
        .par_iter()
        .map(|&(b, s)| run_backend(config, b, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(TablesVsCircuits { reports })
}

/// Both backends on dirac operands: the table's answer and the circuit's decoded sum.
pub fn backend_sums(n: usize, bits: usize, x: usize, y: usize) -> Result<(usize, usize)> {
    let table = build_mod_table(&["add"], n)?;
    let t = table.answer(0, x, y);
    let c = crate::circuits::ripple_add_with(
        &Plain,
        BitWord::from_int(x as u64, bits).bits(),
        BitWord::from_int(y as u64, bits).bits(),
    )?;
    Ok((t, BitWord::new(c)?.to_int() as usize))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorizeConfig {
    pub program: String,
    pub n: usize,
    pub hidden: usize,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub tolerance: f64,
}

impl Default for MemorizeConfig {
    fn default() -> Self {
        MemorizeConfig {
            program: "fib".into(),
            n: 16,
            hidden: 32,
            seeds: vec![0, 1, 2],
            train: TrainConfig {
                learning_rate: 0.05,
                max_epochs: 500,
                seed: 0,
                batch_size: 1,
                optimizer: OptimizerKind::adam(),
            },
            tolerance: 0.05,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MemorizeRun {
    pub seed: u64,
    pub report: MemorizeReport,
    /// Decompiled generator output equals the compiled program.
    pub symbolic_match: bool,
}

/// Memorizes a corpus program with a fresh generator per seed.
pub fn run_memorize(config: &MemorizeConfig) -> Result<Vec<MemorizeRun>> {
    let lib = corpus::library(&[config.program.as_str()], config.n)?;
    let target = compile(&lib, &MachineLayout::new(config.n)?)?;
    config
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut g = LineGenerator::new(target.lines(), config.hidden, target.layout().width(), seed);
            let report = memorize(&target, &mut g, &with_seed(&config.train, seed), config.tolerance)?;
            let symbolic_match = symbolic_match(&g, &target)?;
            Ok(MemorizeRun {
                seed,
                report,
                symbolic_match,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backends_agree_in_range() {
        for x in 0..16 {
            for y in 0..16 - x {
                assert_eq!(backend_sums(16, 7, x, y).unwrap(), (x + y, x + y));
            }
        }
    }

    #[test]
    fn depth_budget_precondition() {
        let cfg = DepthStudyConfig {
            depths: vec![2],
            seeds: vec![0],
            steps_per_depth: Some(4),
            ..Default::default()
        };
        assert!(matches!(run_depth_study(&cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn csv_has_one_row_per_depth() {
        let cfg = DepthStudyConfig {
            depths: vec![1],
            seeds: vec![0],
            train: TrainConfig {
                max_epochs: 1,
                ..DepthStudyConfig::default().train
            },
            ..Default::default()
        };
        let study = run_depth_study(&cfg).unwrap();
        assert_eq!(study.rows.len(), 1);
        assert_eq!(study.rows[0].accuracies.len(), 1);
        assert_eq!(study.csv(&cfg.seeds).lines().count(), 2);
    }
}
