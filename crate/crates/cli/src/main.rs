use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser as ClapParser, Subcommand, ValueEnum};
use serde::Serialize;

use diffcomp::asm::{decompile, link, run_oracle, InitState, Manifest, Parser, RunStatus};
use diffcomp::compiler::{compile, MachineLayout, ProgramMatrix};
use diffcomp::machine::{Machine, MachineState, Mode, RunConfig};
use diffcomp::substrate::TrainConfig;
use diffcomp::tasks::{
    make_task, run_depth_study, run_memorize, run_mod_arith, run_tables_vs_circuits, train, DepthStudyConfig,
    MemorizeConfig, ModArithConfig, TablesVsCircuitsConfig, TaskKind, TaskSetup, TrainOptions, TrainStatus,
};
use diffcomp::Error;

const OUT_ENV: &str = "DIFFCOMP_OUT";

#[derive(ClapParser)]
#[command(name = "diffcomp", version, about = "Compile, run and train programs on a differentiable register machine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Copy)]
struct LayoutArgs {
    /// Word size: values, addresses and program lines range over 0..n.
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long)]
    registers: Option<usize>,
    #[arg(long)]
    mem: Option<usize>,
}

impl LayoutArgs {
    fn layout(&self) -> diffcomp::Result<MachineLayout> {
        MachineLayout::with_sizes(self.n, self.registers.unwrap_or(self.n), self.mem.unwrap_or(self.n))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse, link and compile assembly into a program matrix.
    Compile {
        /// Assembly files; each file's stem names its program.
        sources: Vec<PathBuf>,
        /// JSON manifest listing programs, linked before any loose sources.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        layout: LayoutArgs,
        /// Output artifact; a debug JSON dump is written next to it.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Execute a compiled program and print a JSON report.
    Run {
        program: PathBuf,
        /// Entry point name; defaults to line 0.
        #[arg(long)]
        entry: Option<String>,
        /// Register assignment `rK=V`, repeatable.
        #[arg(long = "reg", value_parser = parse_assignment)]
        registers: Vec<(usize, usize)>,
        /// Memory assignment `ADDR=V`, repeatable.
        #[arg(long = "mem", value_parser = parse_assignment)]
        memory: Vec<(usize, usize)>,
        #[arg(long, default_value = "thresholded")]
        mode: Mode,
        /// Counter threshold in thresholded mode.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 256)]
        steps: usize,
        /// Run the integer reference interpreter on the argmax program instead.
        #[arg(long)]
        oracle: bool,
    },
    /// Read a program matrix back as assembly.
    Decompile {
        program: PathBuf,
        /// Lines whose weakest field falls below this are flagged.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        json: bool,
    },
    /// Train one controller on a task.
    Train {
        #[arg(long, value_enum)]
        task: TrainTask,
        /// Recursion depth for fib_depth.
        #[arg(long, default_value_t = 1)]
        depth: usize,
        /// JSON with `train` (TrainConfig) and `options` (TrainOptions) objects.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, env = OUT_ENV, default_value = "results")]
        out: PathBuf,
    },
    /// Reproduce an experiment across seeds.
    Experiment {
        #[arg(value_enum)]
        name: ExperimentName,
        /// JSON config for the experiment; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run a single seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = OUT_ENV, default_value = "results")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum TrainTask {
    ModArith,
    FibDepth,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ExperimentName {
    ModArith,
    FibDepth,
    TablesVsCircuits,
    Memorize,
}

impl ExperimentName {
    fn as_str(self) -> &'static str {
        match self {
            ExperimentName::ModArith => "mod_arith",
            ExperimentName::FibDepth => "fib_depth",
            ExperimentName::TablesVsCircuits => "tables_vs_circuits",
            ExperimentName::Memorize => "memorize",
        }
    }
}

fn parse_assignment(s: &str) -> Result<(usize, usize), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    let k = k.trim().trim_start_matches('r');
    let key = k.parse().map_err(|_| format!("bad index `{k}`"))?;
    let value = v.trim().parse().map_err(|_| format!("bad value `{v}`"))?;
    Ok((key, value))
}

/// Failure with its exit code.
enum Failure {
    Input(String),
    Runtime(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) => Failure::Runtime(e.to_string()),
            Error::Io(ref io) if io.kind() != std::io::ErrorKind::NotFound => Failure::Internal(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::from(Error::Io(e))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Compile {
            sources,
            manifest,
            layout,
            out,
        } => cmd_compile(&sources, manifest.as_deref(), layout, &out),
        Command::Run {
            program,
            entry,
            registers,
            memory,
            mode,
            threshold,
            steps,
            oracle,
        } => cmd_run(&program, entry.as_deref(), &registers, &memory, mode, threshold, steps, oracle),
        Command::Decompile { program, threshold, json } => cmd_decompile(&program, threshold, json),
        Command::Train {
            task,
            depth,
            config,
            seed,
            epochs,
            n,
            out,
        } => cmd_train(task, depth, config.as_deref(), seed, epochs, n, &out),
        Command::Experiment { name, config, seed, out } => cmd_experiment(name, config.as_deref(), seed, &out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn cmd_compile(sources: &[PathBuf], manifest: Option<&Path>, layout: LayoutArgs, out: &Path) -> CliResult {
    let layout = layout.layout()?;
    let parser = Parser::new(layout.n).with_registers(layout.registers);
    let mut programs = Vec::new();
    if let Some(m) = manifest {
        let manifest = Manifest::load(m)?;
        let base = m.parent().unwrap_or(Path::new("."));
        for e in &manifest.programs {
            let text = fs::read_to_string(base.join(&e.source))?;
            programs.push(parser.parse(&e.name, &text).map_err(Error::from)?);
        }
    }
    for path in sources {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Failure::Input(format!("{} has no usable file name", path.display())))?;
        let text = fs::read_to_string(path)?;
        programs.push(parser.parse(name, &text).map_err(Error::from)?);
    }
    if programs.is_empty() {
        return Err(Failure::Input("nothing to compile".into()));
    }
    let lib = link(&programs, layout.n)?;
    for warning in lib.lint() {
        eprintln!("warning: {warning}");
    }
    let rho = compile(&lib, &layout)?;
    fs::write(out, rho.to_bytes())?;
    write_json(&out.with_extension("json"), &rho.debug_json())?;
    Ok(())
}

fn load_program(path: &Path) -> Result<ProgramMatrix, Failure> {
    let bytes = fs::read(path)?;
    Ok(ProgramMatrix::read_from(&mut bytes.as_slice())?)
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    path: &Path,
    entry: Option<&str>,
    registers: &[(usize, usize)],
    memory: &[(usize, usize)],
    mode: Mode,
    threshold: Option<f64>,
    steps: usize,
    oracle: bool,
) -> CliResult {
    let rho = load_program(path)?;
    let layout = rho.layout().clone();
    let pc = entry.map(|e| rho.entry(e)).transpose()?.unwrap_or(0);
    let mut init = InitState::new(layout.registers, layout.mem_size).pc(pc);
    for &(r, v) in registers {
        if r >= layout.registers {
            return Err(Error::Range { value: r, size: layout.registers }.into());
        }
        init = init.reg(r, v);
    }
    for &(a, v) in memory {
        if a >= layout.mem_size {
            return Err(Error::Range { value: a, size: layout.mem_size }.into());
        }
        init = init.mem(a, v);
    }
    let status = if oracle {
        let state = run_oracle(&rho.argmax_code(), layout.n, &init, steps)?;
        println!("{}", serde_json::to_string_pretty(&state)?);
        state.status
    } else {
        let machine = Machine::new(layout.clone())?;
        let mut config = match mode {
            Mode::Soft => RunConfig::soft(steps),
            Mode::Thresholded => RunConfig::thresholded(steps),
        };
        if let Some(t) = threshold {
            config.threshold = t;
        }
        let s0 = MachineState::from_init(&init, &layout)?;
        let report = machine.run(&rho, &s0, &config)?;
        println!("{}", serde_json::to_string_pretty(&report)?);
        report.status
    };
    match status {
        RunStatus::Halted => Ok(()),
        RunStatus::Timeout => Err(Failure::Runtime(format!("no halt within {steps} steps"))),
        RunStatus::Fault => Err(Failure::Runtime("execution fault".into())),
    }
}

fn cmd_decompile(path: &Path, threshold: f64, json: bool) -> CliResult {
    let rho = load_program(path)?;
    let d = decompile(&rho, threshold);
    if json {
        let value = serde_json::json!({
            "listing": d.program.to_string(),
            "confidence": d.confidence,
            "uncertain": d.uncertain,
        });
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        print!("{}", d.program);
        for (line, c) in d.confidence.iter().enumerate() {
            if d.uncertain[line] {
                eprintln!("line {line}: confidence {c:.4} below {threshold}");
            }
        }
    }
    Ok(())
}

fn read_config<T: serde::de::DeserializeOwned>(path: Option<&Path>) -> Result<Option<T>, Failure> {
    match path {
        Some(p) => Ok(Some(serde_json::from_str(&fs::read_to_string(p)?)?)),
        None => Ok(None),
    }
}

#[derive(Serialize, serde::Deserialize)]
struct TrainFile {
    train: TrainConfig,
    #[serde(default)]
    options: TrainOptions,
}

fn cmd_train(
    task: TrainTask,
    depth: usize,
    config: Option<&Path>,
    seed: Option<u64>,
    epochs: Option<usize>,
    n: usize,
    out: &Path,
) -> CliResult {
    let (kind, defaults) = match task {
        TrainTask::ModArith => {
            let d = ModArithConfig::default();
            (TaskKind::ModArith, TrainFile { train: d.train, options: d.options })
        }
        TrainTask::FibDepth => {
            let d = DepthStudyConfig::default();
            (TaskKind::FibDepth { depth }, TrainFile { train: d.train, options: d.options })
        }
    };
    let mut file = read_config::<TrainFile>(config)?.unwrap_or(defaults);
    if let Some(s) = seed {
        file.train.seed = s;
    }
    if let Some(e) = epochs {
        file.train.max_epochs = e;
    }
    let setup = TaskSetup::for_task(kind, n)?;
    let data = make_task(kind, n, 0, file.train.seed)?;
    let result = train(&data, &setup, &file.train, &file.options)?;
    let dir = out.join(format!("train_{}", setup.name));
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("config.json"), &file)?;
    fs::write(dir.join("metrics.csv"), result.csv())?;
    write_json(&dir.join("summary.json"), &result)?;
    println!(
        "{}: final test accuracy {:.2}% after {} epochs",
        setup.name,
        result.final_test_accuracy(),
        result.epochs.len()
    );
    if result.status == TrainStatus::Diverged {
        return Err(Failure::Runtime("training diverged".into()));
    }
    Ok(())
}

fn cmd_experiment(name: ExperimentName, config: Option<&Path>, seed: Option<u64>, out: &Path) -> CliResult {
    let dir = out.join(name.as_str());
    fs::create_dir_all(&dir)?;
    let seeds = seed.map(|s| vec![s]);
    match name {
        ExperimentName::ModArith => {
            let mut cfg = read_config::<ModArithConfig>(config)?.unwrap_or_default();
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            write_json(&dir.join("config.json"), &cfg)?;
            let runs = run_mod_arith(&cfg)?;
            for r in &runs {
                fs::write(dir.join(format!("metrics_seed{}.csv", r.seed)), r.csv())?;
                println!(
                    "seed {}: test accuracy {:.2}% after {} epochs, parse {:.2}%",
                    r.seed,
                    r.final_test_accuracy(),
                    r.epochs.len(),
                    r.parse_accuracy
                );
            }
            write_json(&dir.join("summary.json"), &runs)?;
            if runs.iter().any(|r| r.status == TrainStatus::Diverged) {
                return Err(Failure::Runtime("a run diverged".into()));
            }
        }
        ExperimentName::FibDepth => {
            let mut cfg = read_config::<DepthStudyConfig>(config)?.unwrap_or_default();
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            write_json(&dir.join("config.json"), &cfg)?;
            let study = run_depth_study(&cfg)?;
            let csv = study.csv(&cfg.seeds);
            fs::write(dir.join("depth.csv"), &csv)?;
            for (i, r) in study.runs.iter().enumerate() {
                let depth = cfg.depths[i / cfg.seeds.len()];
                fs::write(dir.join(format!("metrics_depth{depth}_seed{}.csv", r.seed)), r.csv())?;
            }
            write_json(&dir.join("summary.json"), &study)?;
            print!("{csv}");
        }
        ExperimentName::TablesVsCircuits => {
            let mut cfg = read_config::<TablesVsCircuitsConfig>(config)?.unwrap_or_default();
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            write_json(&dir.join("config.json"), &cfg)?;
            let report = run_tables_vs_circuits(&cfg)?;
            fs::write(dir.join("series.csv"), report.csv())?;
            write_json(&dir.join("summary.json"), &report)?;
            for r in &report.reports {
                println!(
                    "{:?} seed {}: converged at epoch {:?}, out-of-range accuracy {:?}",
                    r.backend, r.seed, r.epochs_to_converge, r.out_of_range_accuracy
                );
            }
        }
        ExperimentName::Memorize => {
            let mut cfg = read_config::<MemorizeConfig>(config)?.unwrap_or_default();
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            write_json(&dir.join("config.json"), &cfg)?;
            let runs = run_memorize(&cfg)?;
            let mut csv = String::from("seed,epoch,loss\n");
            for r in &runs {
                for (i, l) in r.report.loss_curve.iter().enumerate() {
                    csv += &format!("{},{},{:.8}\n", r.seed, i + 1, l);
                }
                println!(
                    "seed {}: {} epochs, loss {:.5}, symbolic match {}",
                    r.seed, r.report.epochs, r.report.final_loss, r.symbolic_match
                );
            }
            fs::write(dir.join("loss.csv"), csv)?;
            write_json(&dir.join("summary.json"), &runs)?;
        }
    }
    Ok(())
}
