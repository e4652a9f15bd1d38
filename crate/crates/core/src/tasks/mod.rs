//! Parsing and selection experiments: controllers trained through the machine.

pub mod controller;
pub mod data;
pub mod experiments;
pub mod train;

pub use controller::{Controller, ControllerConfig, ControllerOutput, HeadKind};
pub use data::{fib_oracle, make_task, Dataset, TaskInput, TaskKind, Vocab};
pub use experiments::{
    backend_sums, run_depth_study, run_memorize, run_mod_arith, run_tables_vs_circuits, Backend, BackendReport,
    DepthRow, DepthStudy, DepthStudyConfig, MemorizeConfig, MemorizeRun, ModArithConfig, TablesVsCircuits,
    TablesVsCircuitsConfig,
};
pub use train::{
    train, train_returning, AnswerCell, EpochMetrics, ExperimentResult, TaskSetup, TrainOptions, TrainStatus,
    Trainee, FIB_STEPS_PER_DEPTH,
};
