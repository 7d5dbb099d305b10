//! Shared by the CLI and acceptance test targets: running the binary and
//! comparing command outputs with committed golden files.
//!
//! Set `SEASIGHT_BLESS=1` to rewrite the goldens from the current build.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_seasight"))
}

pub fn tests_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests")
}

pub fn fixture(name: &str) -> PathBuf {
    tests_dir().join("fixtures").join(name)
}

pub fn golden(name: &str) -> PathBuf {
    tests_dir().join("golden").join(name)
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn seasight")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// One command whose files (and stdout) must match goldens byte for byte.
pub struct GoldenCase {
    pub name: &'static str,
    pub args: Vec<String>,
    /// `(file written into the scratch dir, golden file name)`.
    pub outputs: Vec<(&'static str, &'static str)>,
}

pub fn golden_cases() -> Vec<GoldenCase> {
    let f = |n: &str| fixture(n).display().to_string();
    let g = |n: &str| golden(n).display().to_string();
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    vec![
        GoldenCase {
            name: "synth",
            args: [
                s(&["synth", "--clear"]),
                vec![f("clear.ppm"), "--depth".into(), f("depth.pgm")],
                s(&["--beta", "0.6,0.4,0.35", "--bg", "0.65,0.8,0.85", "--out", "{out}/hazy.ppm"]),
            ]
            .concat(),
            outputs: vec![("hazy.ppm", "hazy.ppm")],
        },
        GoldenCase {
            name: "dehaze",
            args: [
                s(&["dehaze", "--in"]),
                vec![g("hazy.ppm")],
                s(&["--patch", "7", "--omega", "0.95", "--out", "{out}/dehazed.ppm", "--save-t", "{out}/t.pgm"]),
            ]
            .concat(),
            outputs: vec![("dehazed.ppm", "dehazed.ppm"), ("t.pgm", "dehazed_t.pgm")],
        },
        GoldenCase {
            name: "warp",
            args: [
                s(&["warp", "--in"]),
                vec![f("shape.pgm")],
                s(&["--theta", "0.9,0.1,0.05,-0.05,1.0,0.0,0.25,-0.2", "--out", "{out}/warped.pgm"]),
            ]
            .concat(),
            outputs: vec![("warped.pgm", "warped.pgm")],
        },
    ]
}

fn bless() -> bool {
    std::env::var_os("SEASIGHT_BLESS").is_some_and(|v| v == "1")
}

/// Run every golden case; the error names each mismatching file.
pub fn check_goldens() -> Result<(), String> {
    let mut failures = Vec::new();
    for case in golden_cases() {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let out_dir = dir.path().display().to_string();
        let args: Vec<String> = case.args.iter().map(|a| a.replace("{out}", &out_dir)).collect();
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = run(&refs);
        if !o.status.success() {
            failures.push(format!("{}: exit {:?}: {}", case.name, o.status.code(), stderr(&o)));
            continue;
        }
        let mut files: Vec<(Vec<u8>, PathBuf)> = case
            .outputs
            .iter()
            .map(|(produced, gold)| (std::fs::read(dir.path().join(produced)).unwrap_or_default(), golden(gold)))
            .collect();
        files.push((o.stdout.clone(), golden(&format!("{}.stdout", case.name))));
        for (bytes, gold) in files {
            if bless() {
                std::fs::write(&gold, &bytes).map_err(|e| e.to_string())?;
            } else if std::fs::read(&gold).ok().as_deref() != Some(&bytes[..]) {
                failures.push(format!("{}: output differs from {}", case.name, gold.display()));
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(failures.join("\n"))
    }
}

/// `(arguments, expected exit code)` covering every row of the exit-code
/// table. `{out}` is replaced by a scratch directory.
pub fn exit_code_cases() -> Vec<(Vec<String>, i32)> {
    let f = |n: &str| fixture(n).display().to_string();
    let owned = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    vec![
        (owned(&["warp", "--in", &f("shape.pgm"), "--theta", "1,0,0,0,1,0,0,0", "--out", "{out}/w.pgm"]), 0),
        (owned(&["synth", "--clear", &f("clear.ppm"), "--beta", "1,1,1", "--bg", "1,1,1", "--out", "{out}/x.ppm"]), 2),
        (owned(&["dehaze", "--in", &f("clear.ppm"), "--omega", "1.2", "--out", "{out}/x.ppm"]), 2),
        (owned(&["no-such-command"]), 2),
        (owned(&["warp", "--in", &f("shape.pgm"), "--theta", "1,0,0,0,1,0,-2,0", "--out", "{out}/w.pgm"]), 3),
        (owned(&["synth", "--clear", &f("clear.ppm"), "--depth", &f("shape.pgm"), "--beta", "1,1,1", "--bg", "1,1,1", "--out", "{out}/x.ppm"]), 4),
        (owned(&["warp", "--in", &f("missing.pgm"), "--theta", "1,0,0,0,1,0,0,0", "--out", "{out}/w.pgm"]), 4),
        (owned(&["warp", "--in", &f("shape.pgm"), "--theta", "1,0,0,0,1,0,0,0", "--out", "/nonexistent-dir/w.pgm"]), 4),
    ]
}

pub fn check_exit_codes() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out_dir = dir.path().display().to_string();
    let mut failures = Vec::new();
    for (args, want) in exit_code_cases() {
        let args: Vec<String> = args.iter().map(|a| a.replace("{out}", &out_dir)).collect();
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = run(&refs);
        if o.status.code() != Some(want) {
            failures.push(format!("{refs:?}: exit {:?}, want {want}", o.status.code()));
        }
        if want == 3 && !stderr(&o).contains("singular transform") {
            failures.push(format!("{refs:?}: stderr lacks \"singular transform\""));
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(failures.join("\n"))
    }
}
