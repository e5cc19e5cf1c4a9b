use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures/golden")
        .join(name)
}

fn sre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sre"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn replayed_run_and_report_match_frozen_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let out = sre(&["run", "--config", path(&golden("run.toml")), "--out", path(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = sre(&["report", "--run", path(&run)]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("SRE_SR_HSC"));
    for f in ["results.jsonl", "metrics.csv"] {
        assert_eq!(
            fs::read(run.join(f)).unwrap(),
            fs::read(golden("expected").join(f)).unwrap(),
            "{f}"
        );
    }

    // a second invocation finds everything done
    let out = sre(&["run", "--config", path(&golden("run.toml")), "--out", path(&run)]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("completed 0, resumed 24"));
}

#[test]
fn bad_configuration_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("o");
    let config = golden("run.toml");
    let base = ["run", "--config", path(&config), "--out", path(&out_dir)];
    let out = sre(&[&base[..], &["--methods", "SE,NOPE"]].concat());
    assert_eq!(code(&out), 2);
    let out = sre(&[&base[..], &["--tau-min", "0.99"]].concat());
    assert_eq!(code(&out), 2);
    let out = sre(&["run", "--world", path(&golden("world.json"))]);
    assert_eq!(code(&out), 2, "missing dataset");
}

#[test]
fn malformed_dataset_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.jsonl");
    fs::write(
        &bad,
        "{\"id\": \"a\", \"question\": \"Q?\", \"references\": []}\nnot json\n",
    )
    .unwrap();
    let out = sre(&[
        "ingest",
        "--dataset",
        path(&bad),
        "--out",
        path(&tmp.path().join("q.jsonl")),
    ]);
    assert_eq!(code(&out), 3);
    let out = sre(&[
        "run",
        "--dataset",
        path(&bad),
        "--world",
        path(&golden("world.json")),
        "--out",
        path(&tmp.path().join("o")),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn fixture_misses_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = sre(&[
        "run",
        "--config",
        path(&golden("run.toml")),
        "--fixtures",
        path(&empty),
        "--sample-size",
        "2",
        "--out",
        path(&tmp.path().join("o")),
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ingest_subsamples_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.jsonl");
    let b = tmp.path().join("b.jsonl");
    let dataset = golden("dataset.jsonl");
    for p in [&a, &b] {
        let args = [
            "ingest",
            "--dataset",
            path(&dataset),
            "--sample-size",
            "5",
            "--seed",
            "7",
        ];
        let out = sre(&[&args[..], &["--out", path(p)]].concat());
        assert_eq!(code(&out), 0);
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert_eq!(text, fs::read_to_string(&b).unwrap());
}

#[test]
fn sweep_writes_one_row_per_grid_point() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("sweep");
    let out = sre(&[
        "sweep",
        "--dataset",
        path(&golden("dataset.jsonl")),
        "--world",
        path(&golden("world.json")),
        "--sample-size",
        "6",
        "--grid-k",
        "2,4",
        "--grid-delta",
        "0.05,0.1",
        "--out",
        path(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("method,N,K,T,"));
    assert!(lines[1].starts_with("SRE_SR_HSC,3,2,0.8,"));
    assert!(out_dir.join("point-3").join("results.jsonl").exists());
}
