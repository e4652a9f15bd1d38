use diffcomp::substrate::{OptimizerKind, TrainConfig};
use diffcomp::tasks::{
    make_task, run_tables_vs_circuits, train, Backend, TablesVsCircuitsConfig, TaskKind, TaskSetup, TrainOptions,
};

fn short(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        max_epochs: epochs,
        seed,
        batch_size: 16,
        optimizer: OptimizerKind::adam(),
    }
}

#[test]
fn same_seed_same_metrics() {
    let data = make_task(TaskKind::ModArith, 16, 160, 3).unwrap();
    let setup = TaskSetup::mod_arith(16).unwrap();
    let a = train(&data, &setup, &short(2, 3), &TrainOptions::default()).unwrap();
    let b = train(&data, &setup, &short(2, 3), &TrainOptions::default()).unwrap();
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.csv(), b.csv());
    assert!(a.frozen_intact && b.frozen_intact);
    for e in &a.epochs {
        assert!((0.0..=100.0).contains(&e.train_accuracy));
        assert!((0.0..=100.0).contains(&e.test_accuracy));
    }
}

#[test]
fn different_seeds_diverge() {
    let data = make_task(TaskKind::ModArith, 16, 160, 3).unwrap();
    let setup = TaskSetup::mod_arith(16).unwrap();
    let a = train(&data, &setup, &short(1, 1), &TrainOptions::default()).unwrap();
    let b = train(&data, &setup, &short(1, 2), &TrainOptions::default()).unwrap();
    assert_ne!(a.epochs[0].train_loss, b.epochs[0].train_loss);
}

#[test]
fn fib_depth_keeps_library_frozen() {
    let data = make_task(TaskKind::FibDepth { depth: 1 }, 16, 64, 0).unwrap();
    let setup = TaskSetup::fib_depth(16, 1).unwrap();
    let r = train(&data, &setup, &short(1, 0), &TrainOptions::default()).unwrap();
    assert!(r.frozen_intact);
    assert_eq!(r.epochs.len(), 1);
}

#[test]
fn circuit_backend_generalizes_beyond_table() {
    let cfg = TablesVsCircuitsConfig {
        seeds: vec![5],
        train: TrainConfig { max_epochs: 2, ..TablesVsCircuitsConfig::default().train },
        out_of_range: 64,
        ..Default::default()
    };
    let out = run_tables_vs_circuits(&cfg).unwrap();
    let table = out.backend(Backend::Table).next().unwrap();
    let circuit = out.backend(Backend::Circuit).next().unwrap();
    assert_eq!(table.out_of_range_accuracy, None);
    assert!(circuit.out_of_range_accuracy.unwrap() > 50.0);
    assert!(out.csv().lines().count() > 1);
}
