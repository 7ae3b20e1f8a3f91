use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tightpack::prune::{subword_prune, SubwordFormat};
use tightpack::tensorio::{load_matrix, save_matrix, MatrixFormat, WeightMatrix};

fn tightpack(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tightpack"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Deterministic pseudo-random sparse matrix without pulling in an RNG.
fn sparse(rows: usize, cols: usize, keep_one_in: u64, salt: u64) -> WeightMatrix {
    let mut state = 0x9E37_79B9_7F4A_7C15u64 ^ salt;
    let values = (0..rows * cols)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            if state.is_multiple_of(keep_one_in) {
                ((state >> 8) % 255) as i8 | 1
            } else {
                0
            }
        })
        .collect();
    WeightMatrix::new(rows, cols, values, 0.05).unwrap()
}

fn write(dir: &Path, name: &str, m: &WeightMatrix) -> PathBuf {
    let path = dir.join(name);
    save_matrix(m, &path, MatrixFormat::from_path(&path)).unwrap();
    path
}

const QUICK: [&str; 8] = ["--t-init", "50", "--t-end", "1", "--cooling", "0.05", "--iters", "10"];

#[test]
fn prune_rate_hits_target_density() {
    let dir = tempfile::tempdir().unwrap();
    let dense = WeightMatrix::new(30, 50, (0..1500).map(|i| (i % 127 + 1) as i8).collect(), 0.1).unwrap();
    write(dir.path(), "dense.tcm", &dense);
    let out = tightpack(&["prune", "dense.tcm", "sparse.tcm", "--rate", "0.933"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = load_matrix(dir.path().join("sparse.tcm"), MatrixFormat::Tcm).unwrap();
    assert!((m.stats().density - 0.067).abs() <= 1.0 / 1500.0, "{}", m.stats().density);
}

#[test]
fn prune_rate_zero_keeps_payload() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "m.tcm", &sparse(20, 20, 3, 1));
    assert_eq!(code(&tightpack(&["prune", "m.tcm", "same.tcm", "--rate", "0"], dir.path())), 0);
    assert_eq!(
        fs::read(dir.path().join("m.tcm")).unwrap(),
        fs::read(dir.path().join("same.tcm")).unwrap()
    );
}

#[test]
fn prune_validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "m.csv", &sparse(8, 8, 2, 2));
    let out = tightpack(&["prune", "m.csv", "o.csv", "--rate", "1.5"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("rate"));
    assert!(!dir.path().join("o.csv").exists());
    let both = tightpack(&["prune", "m.csv", "o.csv", "--rate", "0.5", "--schedule", "20", "0.5"], dir.path());
    assert_eq!(code(&both), 2);
    assert_eq!(code(&tightpack(&["prune", "m.csv", "o.csv", "--schedule", "1", "0.5"], dir.path())), 2);
    assert_eq!(code(&tightpack(&["prune", "m.csv", "o.csv", "--schedule", "20", "0.5"], dir.path())), 0);
}

#[test]
fn quantize_then_render() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("w.csv"), "0.5,-1.0,0\n0,0.25,2.0\n").unwrap();
    assert_eq!(code(&tightpack(&["quantize", "w.csv", "q.tcm"], dir.path())), 0);
    let q = load_matrix(dir.path().join("q.tcm"), MatrixFormat::Tcm).unwrap();
    assert_eq!(q.values(), &[32, -64, 0, 0, 16, 127]);
    assert_eq!(code(&tightpack(&["render", "q.tcm", "q.pgm"], dir.path())), 0);
    let pgm = fs::read(dir.path().join("q.pgm")).unwrap();
    assert_eq!(pgm, b"P5\n3 2\n255\n\xff\xff\x00\x00\xff\xff");
}

#[test]
fn compress_is_deterministic_and_parallel_safe() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a.tcm", &sparse(40, 48, 8, 3));
    write(dir.path(), "b.csv", &sparse(24, 30, 5, 4));
    let run = |out: &str, jobs: &str| {
        let mut args = vec!["compress", "a.tcm", "b.csv", "-o", out, "--seed", "9", "--trace", "--jobs", jobs];
        args.extend(["--rows", "8", "--cols", "8", "--group", "8"]);
        args.extend(QUICK);
        let o = tightpack(&args, dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let first = run("one", "1");
    let second = run("two", "3");
    assert_eq!(first, second);
    assert!(first.starts_with("a: ") && first.contains("\nb: "));
    for name in ["a.packed.json", "a.report.json", "a.trace.jsonl", "b.packed.json", "b.report.json"] {
        assert_eq!(
            fs::read(dir.path().join("one").join(name)).unwrap(),
            fs::read(dir.path().join("two").join(name)).unwrap(),
            "{name}"
        );
    }
    let report = json(dir.path().join("one/a.report.json"));
    assert_eq!(report["schema"], "tightpack-report/1");
    assert_eq!(report["anneal"]["seed"], 9);
    assert!(report["compression_rate"].as_f64() >= report["baseline"]["compression_rate"].as_f64());
}

#[test]
fn duplicate_input_names_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("x")).unwrap();
    write(dir.path(), "m.tcm", &sparse(4, 4, 2, 5));
    write(dir.path(), "x/m.tcm", &sparse(4, 4, 2, 6));
    let out = tightpack(&["compress", "m.tcm", "x/m.tcm", "--no-anneal"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn subword_merging_reports_density_above_one() {
    let dir = tempfile::tempdir().unwrap();
    let m = WeightMatrix::from_rows(&[vec![5, 96, 3, 64], vec![80, 7, 48, 2]]).unwrap();
    // already subword-pruned: every weight is exactly an L or an H value
    let sw = subword_prune(&m, SubwordFormat::from_label(4, 4).unwrap(), 0.3).unwrap();
    assert_eq!(sw.reconstructed(), m.clone().with_name(""));
    write(dir.path(), "m.tcm", &m);
    let args = [
        "compress", "m.tcm", "--mode", "subword", "--format", "4,4", "--rows", "2", "--cols", "4",
        "--group", "4", "--no-anneal",
    ];
    let out = tightpack(&args, dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(dir.path().join("m.report.json"));
    assert!(report["density"].as_f64().unwrap() > 1.0, "{report}");
    assert_eq!(report["format"], "{4,4}");
    assert_eq!(report["subword_stats"].as_array().unwrap().len(), 3);
    assert!(report["anneal"].is_null());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "m.tcm", &sparse(16, 16, 4, 7));
    fs::write(
        dir.path().join("run.cfg"),
        "# small array\nrows = 8\ncols = 8\ngroup = 4\nseed = 5\nt_init = 20\nt_end = 1\ncooling = 0.1\n",
    )
    .unwrap();
    let out = tightpack(&["compress", "m.tcm", "--config", "run.cfg", "--rows", "4"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(dir.path().join("m.report.json"));
    assert_eq!(report["geometry"]["array_rows"], 4);
    assert_eq!(report["geometry"]["array_cols"], 8);
    assert_eq!(report["geometry"]["group_max"], 4);
    assert_eq!(report["anneal"]["seed"], 5);

    fs::write(dir.path().join("bad.cfg"), "colour = blue\n").unwrap();
    assert_eq!(code(&tightpack(&["compress", "m.tcm", "--config", "bad.cfg"], dir.path())), 2);
    assert_eq!(code(&tightpack(&["compress", "m.tcm", "--group", "17"], dir.path())), 2);
}

#[test]
fn simulate_checks_and_matches_compress_report() {
    let dir = tempfile::tempdir().unwrap();
    let m = sparse(40, 70, 6, 8);
    write(dir.path(), "w.tcm", &m);
    write(dir.path(), "x.csv", &sparse(70, 5, 1, 9));
    let mut args = vec!["compress", "w.tcm", "--rows", "16", "--cols", "16", "--group", "8"];
    args.extend(QUICK);
    assert_eq!(code(&tightpack(&args, dir.path())), 0);

    let sim = ["simulate", "--packed", "w.packed.json", "--inputs", "x.csv", "-o", "sim", "--check"];
    let out = tightpack(&sim, dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cycles = json(dir.path().join("sim/cycles.json"));
    let report = json(dir.path().join("w.report.json"));
    assert_eq!(cycles["tile_count"], report["tile_count"]);
    assert_eq!(cycles["schema"], "tightpack-report/1");
    let csv = fs::read_to_string(dir.path().join("sim/layers.csv")).unwrap();
    assert!(csv.starts_with("layer,cycles\nw,"));
    let outputs = fs::read_to_string(dir.path().join("sim/w.out.csv")).unwrap();
    assert_eq!(outputs.lines().count(), 40);

    let with_ref = [&sim[..], &["--reference", "w.tcm"]].concat();
    assert_eq!(code(&tightpack(&with_ref, dir.path())), 0);

    // corrupt one stored weight: the simulation still runs but disagrees
    // with the original matrix
    let text = fs::read_to_string(dir.path().join("w.packed.json")).unwrap();
    let at = text.find("\"value\": ").unwrap() + "\"value\": ".len();
    let end = at + text[at..].find(|c: char| c != '-' && !c.is_ascii_digit()).unwrap();
    let v: i32 = text[at..end].parse().unwrap();
    let tampered = format!("{}{}{}", &text[..at], if v == 1 { 2 } else { 1 }, &text[end..]);
    fs::write(dir.path().join("bad.packed.json"), tampered).unwrap();
    let bad = [
        "simulate", "--packed", "bad.packed.json", "--inputs", "x.csv", "-o", "sim2", "--check",
        "--reference", "w.tcm",
    ];
    let out = tightpack(&bad, dir.path());
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("verification failed"));
}

#[test]
fn simulate_missing_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = tightpack(&["simulate", "--packed", "nope.json", "--inputs", "x.csv"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}

#[test]
fn render_packed_json() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "m.tcm", &sparse(16, 20, 4, 10));
    let args = ["compress", "m.tcm", "--rows", "8", "--cols", "8", "--group", "4", "--no-anneal"];
    assert_eq!(code(&tightpack(&args, dir.path())), 0);
    assert_eq!(code(&tightpack(&["render", "m.packed.json", "p.pgm"], dir.path())), 0);
    let report = json(dir.path().join("m.report.json"));
    let widths: Vec<u64> = report["section_widths"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    let header = format!("P5\n{} 17\n255\n", widths.iter().max().unwrap());
    assert!(fs::read(dir.path().join("p.pgm")).unwrap().starts_with(header.as_bytes()));
}

#[test]
fn large_fixture_beats_greedy() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "big.tcm", &sparse(512, 512, 15, 11));
    let mut args = vec!["compress", "big.tcm", "--seed", "1"];
    args.extend(["--t-init", "100", "--t-end", "1", "--cooling", "0.05", "--iters", "15"]);
    let out = tightpack(&args, dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(dir.path().join("big.report.json"));
    let rate = report["compression_rate"].as_f64().unwrap();
    let greedy = report["baseline"]["compression_rate"].as_f64().unwrap();
    assert!(rate >= greedy, "{rate} < {greedy}");
}
