use std::path::Path;
use std::process::Command;

fn cli(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_shadowcert"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_and_missing_inputs_exit_with_two() {
    assert_eq!(cli(&["no-such-command"]).0, 2);
    assert_eq!(
        cli(&[
            "certify",
            "--model",
            "/nonexistent/m.snet",
            "--data",
            "/nonexistent/d.dset",
            "--out",
            "/tmp"
        ])
        .0,
        2
    );
    assert_eq!(
        cli(&[
            "train",
            "--data",
            "/nonexistent.dset",
            "--model",
            "/tmp/x.snet",
            "--lr",
            "abc"
        ])
        .0,
        2
    );
}

#[test]
fn small_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let (code, err) = cli(&[
        "--seed",
        "3",
        "gen-data",
        "--classes",
        "3",
        "--per-class",
        "6",
        "--test-per-class",
        "2",
        "--width",
        "5",
        "--height",
        "5",
        "--out",
        p(&data),
    ]);
    assert_eq!(code, 0, "{err}");
    for f in ["train.dset", "test.dset", "tiny.dset"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let model = d.join("m.snet");
    let (code, err) = cli(&[
        "train",
        "--data",
        p(&data.join("train.dset")),
        "--model",
        p(&model),
        "--mode",
        "ibp",
        "--epochs",
        "3",
    ]);
    assert_eq!(code, 0, "{err}");
    let out = d.join("out");
    let test = data.join("test.dset");
    let (code, err) = cli(&[
        "certify",
        "--model",
        p(&model),
        "--data",
        p(&test),
        "--out",
        p(&out),
        "--target",
        "ibp",
    ]);
    assert_eq!(code, 0, "{err}");
    let (code, err) = cli(&[
        "attack",
        "--model",
        p(&model),
        "--model",
        p(&model),
        "--data",
        p(&test),
        "--out",
        p(&out),
        "--target",
        "ibp",
        "--images",
        "2",
        "--steps",
        "3",
        "--prefix",
        "ibp",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.join("ibp_family.csv").exists());
    let (code, err) = cli(&["report-verify", "--out", p(&out)]);
    assert_eq!(code, 0, "{err}");

    // A corrupted summary is a verification failure, not an input error.
    let summary = out.join("ibp_m0_summary.csv");
    let text = std::fs::read_to_string(&summary)
        .unwrap()
        .replace(",shadow,2,", ",shadow,7,");
    std::fs::write(&summary, text).unwrap();
    assert_eq!(cli(&["report-verify", "--out", p(&out)]).0, 3);
}
