use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn diffcam(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffcam"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn corpus(dir: &Path, range: &str, variants: bool) -> PathBuf {
    let mut args = vec!["synth", "--out-dir", "corpus", "--seed-range", range];
    if variants {
        args.push("--variants");
    }
    let o = diffcam(&args, dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("corpus/manifest.jsonl")
}

#[test]
fn synth_then_run() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "0..6", false);
    let o = diffcam(
        &[
            "run",
            "--manifest",
            "corpus/manifest.jsonl",
            "--out-dir",
            "out",
            "--workers",
            "2",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("(6 samples)"));
    let out = dir.path().join("out");
    for f in [
        "metrics.json",
        "summary.csv",
        "feasibility.json",
        "cam_s0005.npy",
        "refined_s0005.npy",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn staged_commands() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "0..4", false);
    let m = "corpus/manifest.jsonl";
    assert_eq!(
        code(&diffcam(
            &["attribute", "--manifest", m, "--out-dir", "a"],
            dir.path()
        )),
        0
    );
    assert!(dir.path().join("a/cam_s0003.npy").exists());
    assert_eq!(
        code(&diffcam(
            &[
                "refine",
                "--manifest",
                m,
                "--out-dir",
                "r",
                "--modules",
                "akd,cba"
            ],
            dir.path()
        )),
        0
    );
    let prov = fs::read_to_string(dir.path().join("r/provenance.json")).unwrap();
    assert!(prov.contains("\"akd_kernel\"") && !prov.contains("\"dacg\""));

    let o = diffcam(
        &["eval", "--manifest", m, "--maps-dir", "r", "--out-dir", "e"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("over 4 samples"));
    let o = diffcam(
        &[
            "eval",
            "--manifest",
            m,
            "--maps-dir",
            "a",
            "--prefix",
            "cam",
            "--out-dir",
            "e2",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let o = diffcam(
        &[
            "eval",
            "--manifest",
            m,
            "--maps-dir",
            "a",
            "--out-dir",
            "e3",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn sample_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "0..3", false);
    fs::write(
        dir.path().join("corpus/samples/s0001/gradients.npy"),
        b"junk",
    )
    .unwrap();
    let o = diffcam(
        &[
            "run",
            "--manifest",
            "corpus/manifest.jsonl",
            "--out-dir",
            "out",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("1 sample(s) failed"));
    let metrics = fs::read_to_string(dir.path().join("out/metrics.json")).unwrap();
    assert_eq!(metrics.matches("\"error\"").count(), 1);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "0..1", false);
    let m = "corpus/manifest.jsonl";
    fs::write(dir.path().join("bad.toml"), "[dacg]\ndelta = 1\n").unwrap();
    assert_eq!(
        code(&diffcam(
            &["run", "--manifest", m, "--config", "bad.toml"],
            dir.path()
        )),
        2
    );
    assert_eq!(
        code(&diffcam(
            &["run", "--manifest", m, "--config", "missing.toml"],
            dir.path()
        )),
        2
    );
    assert_eq!(
        code(&diffcam(
            &["run", "--manifest", m, "--modules", "akd,median"],
            dir.path()
        )),
        2
    );
    assert_eq!(
        code(&diffcam(
            &["run", "--manifest", m, "--workers", "0"],
            dir.path()
        )),
        2
    );
    assert_eq!(
        code(&diffcam(&["run", "--manifest", "nope.jsonl"], dir.path())),
        2
    );
    assert_eq!(
        code(&diffcam(&["synth", "--seed-range", "5..2"], dir.path())),
        2
    );
    assert_eq!(
        code(&diffcam(
            &[
                "sweep",
                "--manifest",
                m,
                "--param",
                "dacg.nope",
                "--values",
                "1"
            ],
            dir.path()
        )),
        2
    );
}

#[test]
fn sweep_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "0..8", false);
    let o = diffcam(
        &[
            "sweep",
            "--manifest",
            "corpus/manifest.jsonl",
            "--out-dir",
            "sw",
            "--param",
            "dacg.delta_sigma",
            "--values",
            "0.18,0.22,0.26",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("dacg.delta_sigma,0.18,8,"));
    let summary = fs::read_to_string(dir.path().join("sw/summary.csv")).unwrap();
    assert!(summary.contains("dacg.delta_sigma=0.26"));
}

#[test]
fn variants_and_timing() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "0..3", true);
    let m = "corpus/manifest.jsonl";
    let o = diffcam(&["variants", "--manifest", m, "--out-dir", "v"], dir.path());
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(dir.path().join("v/variants.csv")).unwrap();
    let labels: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        labels,
        ["concise", "original", "verbose", "repeated", "monotone"]
    );

    let o = diffcam(&["time", "--manifest", m, "--out-dir", "t"], dir.path());
    assert_eq!(code(&o), 0);
    let timing = fs::read_to_string(dir.path().join("t/timing.csv")).unwrap();
    for stage in [
        "attribution_io",
        "akd",
        "dacg",
        "cba",
        "sicd",
        "metrics",
        "total_post_processing",
    ] {
        assert!(
            timing.lines().any(|l| l.starts_with(&format!("{stage},"))),
            "{stage}"
        );
    }

    let o = diffcam(
        &["check-steps", "--manifest", m, "--out-dir", "c"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("12/396 steps valid"));
}

#[test]
fn variants_need_labels() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "0..2", false);
    let o = diffcam(
        &[
            "variants",
            "--manifest",
            "corpus/manifest.jsonl",
            "--out-dir",
            "v",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("variant"));
}

#[test]
fn render_png() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "0..1", false);
    assert_eq!(
        code(&diffcam(
            &[
                "run",
                "--manifest",
                "corpus/manifest.jsonl",
                "--out-dir",
                "out"
            ],
            dir.path()
        )),
        0
    );
    let o = diffcam(
        &[
            "render",
            "--map",
            "out/refined_s0000.npy",
            "--out",
            "gray.png",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let masks: Vec<String> = fs::read_dir(dir.path().join("corpus/samples/s0000/masks"))
        .unwrap()
        .map(|e| e.unwrap().path().display().to_string())
        .collect();
    let o = diffcam(
        &[
            "render",
            "--map",
            "out/refined_s0000.npy",
            "--out",
            "overlay.png",
            "--masks",
            &masks.join(","),
            "--opacity",
            "0.6",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = diffcam(
        &[
            "render",
            "--map",
            "out/refined_s0000.npy",
            "--out",
            "big.png",
            "--size",
            "44x48",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    for f in ["gray.png", "overlay.png", "big.png"] {
        let bytes = fs::read(dir.path().join(f)).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
}
