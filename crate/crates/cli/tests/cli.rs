use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tpm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpm"))
        .current_dir(dir)
        .env_remove("TPM_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = tpm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn scene(dir: &Path, name: &str, seed: &str, extra: &[&str]) {
    let f = format!("{name}.tpfg");
    let m = format!("{name}.tpmk");
    let mut args = vec!["synth", "--grid-h", "24", "--grid-w", "24", "--seed", seed, "--out-features", &f, "--out-mask", &m];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

const SEGMENT: &[&str] = &[
    "segment",
    "--support-features",
    "s.tpfg",
    "--support-mask",
    "s.tpmk",
    "--query-features",
    "s.tpfg",
    "--query-mask",
    "s.tpmk",
    "--prior-source",
    "ocp",
    "--out-mask",
    "o.tpmk",
    "--out-prob",
    "o.csv",
    "--out-report",
    "r.json",
];

#[test]
fn seeded_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        scene(dir, "s", "5", &[]);
        ok(dir, SEGMENT);
        ok(dir, &["records", "--synthetic", "4", "--grid-h", "16", "--grid-w", "16", "--out", "rec.csv"]);
        ok(dir, &["fit-linest", "--records", "rec.csv", "--out", "lin.json"]);
        ok(dir, &["sweep", "--features", "s.tpfg", "--mask", "s.tpmk", "--steps", "11", "--out", "sw.csv"]);
    }
    for file in ["s.tpfg", "s.tpmk", "o.tpmk", "o.csv", "r.json", "rec.csv", "lin.json", "sw.csv"] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
            "{file} differs"
        );
    }
    assert_eq!(fs::read_to_string(a.path().join("sw.csv")).unwrap().lines().count(), 12);
}

#[test]
fn self_segmentation_scores_well() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d, "s", "3", &["--sigma-fg", "0.05"]);
    ok(d, SEGMENT);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert!(report["mean_dice"].as_f64().unwrap() > 0.8, "{report}");
    let out = ok(d, &["eval", "--pred", "o.tpmk", "--truth", "s.tpmk", "--prob", "o.csv"]);
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(eval["dice"], report["dice"]);
    assert_eq!(eval["ce"], report["ce"]);
}

#[test]
fn multiclass_needs_mc_mode() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d, "s", "9", &["--classes", "2"]);
    let mut args = SEGMENT.to_vec();
    let out = tpm(d, &args);
    assert_eq!(out.status.code(), Some(2));
    args.extend_from_slice(&["--mode", "mc"]);
    ok(d, &args);
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d, "s", "1", &[]);
    fs::write(d.join("bad.tpfg"), b"XXXX0000000000000000").unwrap();
    let cases: &[&[&str]] = &[
        &["sweep", "--features", "bad.tpfg", "--mask", "s.tpmk", "--out", "x.csv"],
        &["segment", "--support-features", "s.tpfg", "--support-mask", "s.tpmk", "--query-features", "s.tpfg", "--prior-source", "ocp", "--out-mask", "o.tpmk"],
        &["segment", "--support-features", "s.tpfg", "--support-mask", "s.tpmk", "--query-features", "s.tpfg", "--prior-source", "avgest", "--out-mask", "o.tpmk"],
        &["synth", "--fg-fraction", "1.5", "--out-features", "a", "--out-mask", "b"],
        &["synth", "--bogus"],
        &["fit-linest", "--records", "s.tpfg", "--out", "m.json"],
    ];
    for args in cases {
        assert_eq!(tpm(d, args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d, "s", "1", &[]);
    let cases: &[&[&str]] = &[
        &["eval", "--pred", "missing.tpmk", "--truth", "s.tpmk"],
        &["synth", "--out-features", "no/such/dir/f.tpfg", "--out-mask", "m.tpmk"],
        &["sweep", "--features", "s.tpfg", "--mask", "s.tpmk", "--out", "no/such/dir/x.csv"],
    ];
    for args in cases {
        assert_eq!(tpm(d, args).status.code(), Some(3), "{args:?}");
    }
}

#[test]
fn thread_cap() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d, "s", "2", &[]);
    let run = |threads: &str, out: &str| {
        Command::new(env!("CARGO_BIN_EXE_tpm"))
            .current_dir(d)
            .env("TPM_THREADS", threads)
            .args(["sweep", "--features", "s.tpfg", "--mask", "s.tpmk", "--steps", "21", "--out", out])
            .output()
            .unwrap()
    };
    assert!(run("1", "one.csv").status.success());
    assert!(run("3", "three.csv").status.success());
    assert_eq!(fs::read(d.join("one.csv")).unwrap(), fs::read(d.join("three.csv")).unwrap());
    for bad in ["0", "many"] {
        assert_eq!(run(bad, "x.csv").status.code(), Some(2));
    }
}
