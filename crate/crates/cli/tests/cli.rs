use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const FIB: &str = "fib:\n    add r2 r3 r6\n    copy r3 r2\n    copy r6 r3\n    write r4 r3\n    inc r4 r4\n    dec r5 r5\n    min r5 r0 r7\n    jump r7 fib\n    halt\n";

fn diffcomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffcomp"))
        .args(args)
        .env_remove("DIFFCOMP_OUT")
        .output()
        .unwrap()
}

fn compiled(dir: &Path) -> String {
    let src = dir.join("fib.asm");
    fs::write(&src, FIB).unwrap();
    let out = dir.join("fib.pm");
    let o = diffcomp(&["compile", src.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.to_str().unwrap().to_string()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn compile_writes_program_and_debug_dump() {
    let dir = TempDir::new().unwrap();
    let pm = compiled(dir.path());
    assert!(Path::new(&pm).exists());
    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("fib.json")).unwrap()).unwrap();
    assert!(dump.is_object());
    let first = fs::read(&pm).unwrap();
    compiled(dir.path());
    assert_eq!(fs::read(&pm).unwrap(), first);
}

#[test]
fn machine_and_oracle_agree() {
    let dir = TempDir::new().unwrap();
    let pm = compiled(dir.path());
    let args = ["run", &pm, "--reg", "r2=1", "--reg", "r3=1", "--reg", "r5=5"];
    let machine = diffcomp(&args);
    assert!(machine.status.success());
    let mut with_oracle = args.to_vec();
    with_oracle.push("--oracle");
    let oracle = diffcomp(&with_oracle);
    assert!(oracle.status.success());
    let (m, o) = (json(&machine), json(&oracle));
    assert_eq!(m["memory"], o["memory"]);
    assert_eq!(m["steps"], o["steps"]);
    let mem: Vec<u64> = serde_json::from_value(m["memory"].clone()).unwrap();
    assert_eq!(&mem[..5], &[2, 3, 5, 8, 13]);
}

#[test]
fn timeout_exits_three() {
    let dir = TempDir::new().unwrap();
    let pm = compiled(dir.path());
    let o = diffcomp(&["run", &pm, "--reg", "r5=6", "--steps", "5"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn input_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.asm");
    fs::write(&bad, "frobnicate r1 r2\n").unwrap();
    let o = diffcomp(&["compile", bad.to_str().unwrap(), "-o", dir.path().join("x.pm").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad:1"));
    assert_eq!(diffcomp(&["run", "/nonexistent.pm"]).status.code(), Some(2));
    assert_eq!(diffcomp(&["experiment", "nope"]).status.code(), Some(2));
}

#[test]
fn decompile_prints_the_listing() {
    let dir = TempDir::new().unwrap();
    let pm = compiled(dir.path());
    let o = diffcomp(&["decompile", &pm]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().filter(|l| !l.trim().is_empty()).count(), 9);
    assert!(text.contains("add r2 r3 r6"));
    let j = json(&diffcomp(&["decompile", &pm, "--json"]));
    assert!(j["uncertain"].as_array().unwrap().iter().all(|u| u == false));
}

#[test]
fn experiment_outputs_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    let run = || {
        let o = diffcomp(&["experiment", "tables_vs_circuits", "--seed", "1", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(dir.path().join("tables_vs_circuits/series.csv")).unwrap()
    };
    let first = run();
    assert!(first.starts_with("backend,seed,epoch,split,accuracy,loss"));
    assert_eq!(run(), first);
    assert!(dir.path().join("tables_vs_circuits/config.json").exists());
    assert!(dir.path().join("tables_vs_circuits/summary.json").exists());
}

#[test]
fn train_honours_the_output_env() {
    let dir = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_diffcomp"))
        .args(["train", "--task", "mod_arith", "--epochs", "1", "--seed", "2"])
        .env("DIFFCOMP_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sub = fs::read_dir(dir.path()).unwrap().next().unwrap().unwrap().path();
    let csv = fs::read_to_string(sub.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(sub.join("summary.json").exists());
}
