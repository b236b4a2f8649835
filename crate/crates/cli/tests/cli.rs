use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use duosparse_core::io::{self, read_matrix, write_matrix, Dtype};
use duosparse_core::sparsity::magnitude_prune_columns;
use duosparse_core::{calibrate_stack, Method, PruneConfig};
use serde_json::Value;
use tempfile::TempDir;

fn duosparse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duosparse"))
        .args(args)
        .env_remove("DUOSPARSE_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = duosparse(args);
    assert!(
        out.status.success(),
        "duosparse {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is a JSON report")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn stack(&self, name: &str, dims: &str, extra: &[&str]) -> PathBuf {
        let p = self.path(name);
        let mut args = vec!["gen-stack", "--dims", dims, "--seed", "3", "--out"];
        let ps = s(&p);
        args.push(&ps);
        args.extend_from_slice(extra);
        ok(&args);
        p
    }

    fn data(&self, name: &str, k: usize, m: usize, seed: u64) -> PathBuf {
        let p = self.path(name);
        ok(&[
            "gen-data",
            "--k",
            &k.to_string(),
            "--m",
            &m.to_string(),
            "--seed",
            &seed.to_string(),
            "--out",
            &s(&p),
        ]);
        p
    }
}

#[test]
fn gen_data_is_readable_and_reproducible() {
    let f = Fixture::new();
    let a = f.data("a.dspm", 16, 64, 1);
    let b = f.data("b.dspm", 16, 64, 1);
    let (m, header) = io::read_matrix_with_header(&a).unwrap();
    assert_eq!((header.rows, header.cols), (16, 64));
    assert_eq!(m.shape(), (16, 64));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let r = f.path("r.dspm");
    ok(&["gen-data", "--k", "8", "--m", "32", "--dist", "relu-normal", "--out", &s(&r)]);
    assert!(read_matrix(&r).unwrap().data().iter().all(|v| *v >= 0.0));
}

#[test]
fn zero_sparsity_keeps_weights_byte_identical() {
    let f = Fixture::new();
    for dtype in ["f64", "f32"] {
        let stack = f.stack(&format!("in_{dtype}.json"), "16,12,8", &["--dtype", dtype]);
        let out = f.path(&format!("out_{dtype}.json"));
        ok(&[
            "calibrate", "--stack", &s(&stack), "--samples", "64", "--pw", "0", "--px", "0", "--out", &s(&out),
        ]);
        for i in 0..2 {
            let before = std::fs::read(f.path(&format!("in_{dtype}.layer{i}.dspm"))).unwrap();
            let after = std::fs::read(f.path(&format!("out_{dtype}.layer{i}.dspm"))).unwrap();
            assert_eq!(before, after, "{dtype} layer {i}");
        }
    }
}

#[test]
fn dense_activations_make_methods_agree() {
    let f = Fixture::new();
    let stack = f.stack("in.json", "24,16", &[]);
    let calib = f.data("x.dspm", 24, 96, 5);
    for method in ["duogpt", "sparsegpt"] {
        let out = f.path(&format!("{method}.json"));
        ok(&[
            "calibrate", "--stack", &s(&stack), "--calib", &s(&calib), "--method", method, "--pw", "0.5", "--px", "0",
            "--block-size", "8", "--out", &s(&out),
        ]);
    }
    for suffix in ["layer0.mask.dspm", "layer0.dspm"] {
        let a = std::fs::read(f.path(&format!("duogpt.{suffix}"))).unwrap();
        let b = std::fs::read(f.path(&format!("sparsegpt.{suffix}"))).unwrap();
        assert_eq!(a, b, "{suffix}");
    }
}

#[test]
fn report_matches_library_recomputation() {
    let f = Fixture::new();
    let stack = f.stack("in.json", "32,32,16", &[]);
    let calib = f.data("x.dspm", 32, 128, 9);
    let out = f.path("out.json");
    let run = ok(&[
        "--json", "calibrate", "--stack", &s(&stack), "--calib", &s(&calib), "--pw", "0.5", "--px", "0.5",
        "--block-size", "32", "--seed", "4", "--out", &s(&out),
    ]);
    let report = json(&run);
    assert_eq!(report["command"], "calibrate");
    assert_eq!(report["formatVersion"], 1);
    assert_eq!(report["seed"], 4);
    assert_eq!(report["config"]["blockSize"], 32);

    let loaded = io::load_stack(&stack).unwrap();
    let x0 = read_matrix(&calib).unwrap();
    let cfg = PruneConfig {
        block_size: 32,
        seed: 4,
        ..PruneConfig::default()
    };
    let lib = calibrate_stack(&loaded.stack, &x0, &cfg).unwrap();
    let layers = report["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    for (l, r) in layers.iter().zip(&lib.reports) {
        assert_eq!(l["reconstructionError"].as_f64().unwrap(), r.reconstruction_error);
        assert_eq!(l["blockSparsityExact"], true);
    }

    // sparsity audit is recomputable from the mask files
    let pruned = io::load_stack(&out).unwrap();
    for (audit, mask) in report["sparsityAudit"].as_array().unwrap().iter().zip(&pruned.masks) {
        let mask = mask.as_ref().expect("calibrated stacks carry masks");
        assert_eq!(audit["weightSparsity"].as_f64().unwrap(), mask.sparsity());
    }
    assert_eq!(pruned.stack, lib.stack);
}

#[test]
fn calibrate_report_file_and_human_output() {
    let f = Fixture::new();
    let stack = f.stack("in.json", "16,8", &[]);
    let report = f.path("report.json");
    let run = ok(&[
        "calibrate", "--stack", &s(&stack), "--samples", "32", "--pw", "0.5", "--px", "0.5", "--method", "wanda",
        "--act-order", "false", "--out", &s(&f.path("o.json")), "--report", &s(&report),
    ]);
    let text = String::from_utf8(run.stdout).unwrap();
    assert!(text.contains("layer 0"));
    let v: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["config"]["method"], "wanda");
    assert_eq!(v["config"]["actOrder"], false);
}

fn oracle_inputs(f: &Fixture, k: usize, equal_streams: bool) -> (PathBuf, PathBuf, PathBuf) {
    let stack = f.stack(&format!("w{k}.json"), &format!("{k},4"), &[]);
    let weights = f.path(&format!("w{k}.layer0.dspm"));
    assert!(stack.exists());
    let dense = f.data(&format!("dense{k}.dspm"), k, 2 * k + 8, 21);
    let (sparse, _) = magnitude_prune_columns(&read_matrix(&dense).unwrap(), 0.5).unwrap();
    let sparse_path = f.path(&format!("sparse{k}.dspm"));
    write_matrix(&sparse, &sparse_path, Dtype::F64).unwrap();
    let dense_path = if equal_streams { sparse_path.clone() } else { dense };
    (weights, sparse_path, dense_path)
}

#[test]
fn oracle_diff_zero_gap_and_seeded_instance() {
    let f = Fixture::new();
    let (w, xs, _) = oracle_inputs(&f, 8, true);
    let v = json(&ok(&[
        "--json", "oracle-diff", "--weights", &s(&w), "--calib-sparse", &s(&xs), "--calib-dense", &s(&xs), "--pw", "0.5",
    ]));
    assert!(v["maxScoreRelDev"].as_f64().unwrap() < 1e-12);
    assert_eq!(v["withinTolerance"], true);

    let (w, xs, xd) = oracle_inputs(&f, 8, false);
    let v = json(&ok(&[
        "--json", "oracle-diff", "--weights", &s(&w), "--calib-sparse", &s(&xs), "--calib-dense", &s(&xd), "--pw", "0.5",
        "--rows", "4",
    ]));
    assert!(v["maxScoreRelDev"].as_f64().unwrap() <= 1e-7);
    assert!(v["maxCompensationDev"].as_f64().unwrap() <= 1e-6);
    assert!(v["comparedSteps"].as_u64().unwrap() > 0);
}

#[test]
fn oracle_diff_rejects_large_layers() {
    let f = Fixture::new();
    let (w, xs, xd) = oracle_inputs(&f, 64, false);
    let out = duosparse(&[
        "oracle-diff", "--weights", &s(&w), "--calib-sparse", &s(&xs), "--calib-dense", &s(&xd), "--pw", "0.5",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exact-oracle limit"));
}

#[test]
fn simulate_dense_stack_loads_everything() {
    let f = Fixture::new();
    let stack = f.stack("dense.json", "32,16", &[]);
    let x = f.data("x.dspm", 32, 20, 2);
    for mode in [&[][..], &["--worst-case"][..]] {
        let mut args = vec!["--json", "simulate", "--stack"];
        let (ss, xs) = (s(&stack), s(&x));
        args.extend_from_slice(&[&ss, "--input", &xs, "--px", "0"]);
        args.extend_from_slice(mode);
        let v = json(&ok(&args));
        assert_eq!(v["fraction"].as_f64().unwrap(), 1.0);
        assert_eq!(v["measuredFraction"].as_f64().unwrap(), 1.0);
        assert_eq!(v["weightsLoaded"], v["macs"]);
    }
}

#[test]
fn simulate_random_half_mask_expectation() {
    let f = Fixture::new();
    let stack = f.stack("rand.json", "512,256", &["--random-sparsity", "0.5"]);
    let x = f.data("x.dspm", 512, 4, 2);
    let v = json(&ok(&["--json", "simulate", "--stack", &s(&stack), "--input", &s(&x), "--px", "0.5"]));
    let frac = v["fraction"].as_f64().unwrap();
    assert!((frac - 0.25).abs() <= 0.01, "{frac}");
}

#[test]
fn simulate_calibrated_stack_worst_case() {
    let f = Fixture::new();
    let stack = f.stack("in.json", "128,128,128", &[]);
    let out = f.path("pruned.json");
    ok(&[
        "calibrate", "--stack", &s(&stack), "--pw", "0.5", "--px", "0.5", "--method", &Method::DuoGpt.to_string(),
        "--out", &s(&out),
    ]);
    let x = f.data("x.dspm", 128, 16, 8);
    let v = json(&ok(&[
        "--json", "simulate", "--stack", &s(&out), "--input", &s(&x), "--px", "0.5", "--worst-case",
    ]));
    for layer in v["layers"].as_array().unwrap() {
        let frac = layer["fraction"].as_f64().unwrap();
        assert!(frac <= 0.30, "{frac}");
        assert!(layer["measuredFraction"].as_f64().unwrap() <= 0.5 + 1e-12);
    }
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    assert_eq!(duosparse(&["--help"]).status.code(), Some(0));
    assert_eq!(duosparse(&["--version"]).status.code(), Some(0));
    assert_eq!(duosparse(&["calibrate", "--bogus"]).status.code(), Some(1));
    assert_eq!(duosparse(&[]).status.code(), Some(1));

    let missing = s(&f.path("missing.json"));
    let out = duosparse(&["calibrate", "--stack", &missing, "--pw", "0.5", "--px", "0.5", "--out", &missing]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());

    let stack = f.stack("in.json", "8,4", &[]);
    let out = duosparse(&["calibrate", "--stack", &s(&stack), "--pw", "1.5", "--px", "0.5", "--out", &missing]);
    assert_eq!(out.status.code(), Some(1));

    let bad = f.path("bad.dspm");
    std::fs::write(&bad, b"NOPE0000000000000000").unwrap();
    let out = duosparse(&["simulate", "--stack", &s(&stack), "--input", &s(&bad), "--px", "0.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));
}

#[test]
fn thread_cap_from_environment() {
    let f = Fixture::new();
    let stack = f.stack("in.json", "16,8", &[]);
    let run = |threads: Option<&str>, name: &str| {
        let out = f.path(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_duosparse"));
        cmd.args(["calibrate", "--stack", &s(&stack), "--samples", "32", "--pw", "0.5", "--px", "0.5", "--out", &s(&out)]);
        match threads {
            Some(t) => cmd.env("DUOSPARSE_THREADS", t),
            None => cmd.env_remove("DUOSPARSE_THREADS"),
        };
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(f.path(&name.replace(".json", ".layer0.dspm"))).unwrap()
    };
    assert_eq!(run(Some("1"), "one.json"), run(None, "all.json"));
    assert_eq!(duosparse(&["--threads", "0", "gen-data", "--k", "2", "--m", "2", "--out", "x"]).status.code(), Some(1));
}
