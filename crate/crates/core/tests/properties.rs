use diffcomp::asm::{decompile, machine_listing, run_oracle, InitState, Parser, RunStatus};
use diffcomp::circuits::{gate_and, gate_not, gate_or, gate_xor, ripple_add, shift_add_mul};
use diffcomp::compiler::{compile, compile_code, Field, MachineLayout, ProgramMatrix};
use diffcomp::corpus;
use diffcomp::encodings::{binary_to_unit, table_lookup, AluTable, BitWord};
use diffcomp::isa::{Instr, Opcode};
use diffcomp::machine::{fetch, Machine, MachineState, RunConfig};
use diffcomp::substrate::{masked_sgd_step, mix, ParameterMask, Tape, Tensor};
use proptest::prelude::*;

const N: usize = 8;

fn instr(n: usize, lines: usize) -> impl Strategy<Value = Instr> {
    (0..Opcode::ALL.len(), 0..n, 0..n, 0..n).prop_map(move |(op, a1, a2, dst)| {
        let op = Opcode::ALL[op];
        let a2 = if op == Opcode::Jump { a2 % lines } else { a2 };
        Instr::new(op, a1, a2, dst)
    })
}

fn code(n: usize) -> impl Strategy<Value = Vec<Instr>> {
    (1..=n).prop_flat_map(move |len| prop::collection::vec(instr(n, len), len))
}

fn init_state(n: usize) -> impl Strategy<Value = InitState> {
    (prop::collection::vec(0..n, n), prop::collection::vec(0..n, n), 0..n).prop_map(|(registers, memory, pc)| {
        InitState { registers, memory, pc }
    })
}

fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, len).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn soft_program(n: usize, lines: usize) -> impl Strategy<Value = ProgramMatrix> {
    let layout = MachineLayout::new(n).unwrap();
    let width = layout.width();
    prop::collection::vec(-3.0f64..3.0, lines * width).prop_map(move |logits| {
        let t = Tensor::matrix(lines, width, logits).unwrap();
        ProgramMatrix::from_logits(layout.clone(), &t, Default::default()).unwrap()
    })
}

fn row_sums_ok(t: &Tensor, tol: f64) -> bool {
    (0..t.rows()).all(|i| {
        let r = t.row(i);
        r.iter().all(|&p| p >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() <= tol
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(x in prop::collection::vec(-50.0f64..50.0, 12)) {
        let tape = Tape::new();
        let v = tape.constant(Tensor::matrix(3, 4, x).unwrap());
        prop_assert!(row_sums_ok(&v.softmax(1).value(), 1e-12));
    }

    #[test]
    fn mix_stays_on_the_simplex(p in 0.0f64..1.0, a in simplex(6), b in simplex(6)) {
        let tape = Tape::new();
        let out = mix(tape.scalar(p), tape.constant(Tensor::vector(a)), tape.constant(Tensor::vector(b))).unwrap();
        let out = out.value().reshape(vec![1, 6]).unwrap();
        prop_assert!(row_sums_ok(&out, 1e-12));
    }

    #[test]
    fn zero_mask_freezes_bit_for_bit(
        theta in prop::collection::vec(-5.0f64..5.0, 10),
        grads in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 10), 1..20),
    ) {
        let start = Tensor::vector(theta);
        let mask = ParameterMask::zeros(&[10]);
        let mut cur = start.clone();
        for g in grads {
            cur = masked_sgd_step(&cur, Some(&Tensor::vector(g)), &mask, 0.5).unwrap();
        }
        prop_assert_eq!(cur.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        start.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn lookup_preserves_words(f in simplex(15), a in simplex(N), b in simplex(N)) {
        let table = AluTable::isa(N).unwrap();
        let tape = Tape::new();
        let c = table_lookup(
            &table,
            tape.constant(Tensor::vector(f)),
            tape.constant(Tensor::vector(a)),
            tape.constant(Tensor::vector(b)),
        ).unwrap();
        prop_assert!(row_sums_ok(&c.value().reshape(vec![1, N]).unwrap(), 1e-9));
    }

    #[test]
    fn bits_decode_to_words(bits in prop::collection::vec(0.0f64..=1.0, 1..7)) {
        let w = binary_to_unit(&BitWord::new(bits).unwrap());
        prop_assert!(w.probs().iter().all(|&p| p >= 0.0));
        prop_assert!((w.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gates_stay_in_unit_interval(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        for v in [gate_and(a, b), gate_or(a, b), gate_xor(a, b), gate_not(a)] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn soft_circuits_stay_in_unit_interval(
        x in prop::collection::vec(0.0f64..=1.0, 4),
        y in prop::collection::vec(0.0f64..=1.0, 4),
    ) {
        let (x, y) = (BitWord::new(x).unwrap(), BitWord::new(y).unwrap());
        // constructing the result BitWord checks the range
        ripple_add(&x, &y).unwrap();
        shift_add_mul(&x, &y).unwrap();
    }

    #[test]
    fn oracle_is_total(code in code(N), init in init_state(N), budget in 1usize..64) {
        let out = run_oracle(&code, N, &init, budget).unwrap();
        prop_assert!(out.steps <= budget);
        if out.status == RunStatus::Timeout {
            prop_assert_eq!(out.steps, budget);
        }
        prop_assert!(out.registers.iter().chain(&out.memory).all(|&v| v < N));
    }

    #[test]
    fn print_then_parse_is_identity(code in code(N)) {
        let text = machine_listing("p", &code).to_string();
        let parsed = Parser::new(N).parse("p", &text).unwrap();
        prop_assert_eq!(parsed.to_string(), text);
    }

    #[test]
    fn decompile_inverts_compile(code in code(N)) {
        let layout = MachineLayout::new(N).unwrap();
        let rho = compile_code(&code, Default::default(), &layout).unwrap();
        for l in 0..rho.lines() {
            for f in Field::ALL {
                let row = rho.field(l, f);
                prop_assert!(row.iter().all(|&p| p == 0.0 || p == 1.0));
                prop_assert_eq!(row.iter().sum::<f64>(), 1.0);
            }
        }
        let back = decompile(&rho, 0.5);
        prop_assert_eq!(back.program.to_string(), machine_listing("p", &code).to_string());
        prop_assert!(back.all_certain());
    }

    #[test]
    fn fetch_yields_distributions(rho in soft_program(N, 5), c in simplex(N)) {
        let m = Machine::new(rho.layout().clone()).unwrap();
        let tape = Tape::new();
        let padded = m.pad(tape.constant(rho.tensor().clone())).unwrap();
        let inst = fetch(padded, tape.constant(Tensor::vector(c)), m.layout()).unwrap();
        for f in [inst.op, inst.a1, inst.a2, inst.dst] {
            let len = f.shape()[0];
            prop_assert!(row_sums_ok(&f.value().reshape(vec![1, len]).unwrap(), 1e-9));
        }
    }

    #[test]
    fn soft_runs_preserve_distributions(rho in soft_program(N, 6), init in init_state(N), steps in 1usize..12) {
        let m = Machine::new(rho.layout().clone()).unwrap();
        let mut s = MachineState::from_init(&init, m.layout()).unwrap();
        let tape = Tape::new();
        let padded = m.pad(tape.constant(rho.tensor().clone())).unwrap();
        let mut total = 0.0;
        for _ in 0..steps {
            let (next, gained) = m.step(&s.constant(&tape), padded).unwrap();
            let next = next.value();
            prop_assert!(next.normalization_error() < 1e-6);
            prop_assert!(next.halted >= s.halted - 1e-15 && next.halted <= 1.0 + 1e-12);
            total += gained.item();
            s = next;
        }
        prop_assert!((total - s.halted).abs() < 1e-9);
        let report = m.run(&rho, &MachineState::from_init(&init, m.layout()).unwrap(), &RunConfig::soft(steps)).unwrap();
        prop_assert!((report.halting_increments.iter().sum::<f64>() - report.halted).abs() < 1e-9);
    }

    #[test]
    fn step_is_affine_in_memory(
        rho in soft_program(N, 4),
        init in init_state(N),
        other in prop::collection::vec(0..N, N),
        alpha in 0.0f64..1.0,
    ) {
        let m = Machine::new(rho.layout().clone()).unwrap();
        let a = MachineState::from_init(&init, m.layout()).unwrap();
        let b = MachineState::from_init(&InitState { memory: other, ..init.clone() }, m.layout()).unwrap();
        let mut blend = a.clone();
        for (o, (x, y)) in blend.memory.data_mut().iter_mut().zip(a.memory.data().iter().zip(b.memory.data())) {
            *o = alpha * x + (1.0 - alpha) * y;
        }
        let tape = Tape::new();
        let padded = m.pad(tape.constant(rho.tensor().clone())).unwrap();
        let step = |s: &MachineState| m.step(&s.constant(&tape), padded).unwrap().0.value();
        let (sa, sb, sm) = (step(&a), step(&b), step(&blend));
        for (got, (x, y)) in [
            (&sm.memory, (&sa.memory, &sb.memory)),
            (&sm.registers, (&sa.registers, &sb.registers)),
            (&sm.counter, (&sa.counter, &sb.counter)),
        ] {
            for (g, (p, q)) in got.data().iter().zip(x.data().iter().zip(y.data())) {
                prop_assert!((g - (alpha * p + (1.0 - alpha) * q)).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn halting_corpus_programs_match_the_oracle(a in 0..16usize, b in 0..16usize, k in 1..5usize) {
        let lib = corpus::library(&["fib"], 16).unwrap();
        let layout = MachineLayout::new(16).unwrap();
        let rho = compile(&lib, &layout).unwrap();
        let init = InitState::new(16, 16).reg(2, a).reg(3, b).reg(4, 2).reg(5, k);
        let oracle = run_oracle(lib.code(), 16, &init, 64).unwrap();
        let m = Machine::new(layout.clone()).unwrap();
        let rep = m.run(&rho, &MachineState::from_init(&init, &layout).unwrap(), &RunConfig::thresholded(64)).unwrap();
        prop_assert_eq!(rep.memory, oracle.memory);
        prop_assert_eq!(rep.steps, oracle.steps);
    }

    #[test]
    fn corpus_round_trips_through_the_parser(idx in 0..corpus::SOURCES.len()) {
        let parser = Parser::new(32);
        let p = corpus::parse(corpus::SOURCES[idx].name, &parser).unwrap();
        let again = parser.parse(&p.name, &p.to_string()).unwrap();
        prop_assert_eq!(again.to_string(), p.to_string());
    }
}
