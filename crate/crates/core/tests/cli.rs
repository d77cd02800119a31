use std::path::Path;
use std::process::{Command, Output};

use ctd::train::StepLog;

fn ctd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn audit_prints_verdicts_and_sap_delta() {
    let o = ctd(&["audit"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.matches("PASS CTD-").count(), 3, "{text}");
    assert!(text.contains("SAP removal delta"));
    let csv = ctd(&["audit", "--variant", "M", "--csv"]);
    assert!(stdout(&csv).starts_with("== CTD-M"));
}

#[test]
fn gen_train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let o = ctd(&[
        "--seed",
        "5",
        "gen-data",
        "--out",
        p(&data),
        "--count",
        "6",
        "--size",
        "64",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read_to_string(data.join("manifest.txt"))
            .unwrap()
            .lines()
            .count(),
        6
    );

    let o = ctd(&[
        "--preset",
        "desk",
        "--threads",
        "1",
        "train",
        "--variant",
        "S",
        "--steps",
        "3",
        "--dataset",
        p(&data),
        "--out",
        p(&run),
        "--set",
        "resolution=64",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    let steps: Vec<StepLog> = log.lines().map(|l| StepLog::parse(l).unwrap()).collect();
    assert_eq!(steps.len(), 3);
    for (i, s) in steps.iter().enumerate() {
        assert_eq!(s.step, i);
        assert!((s.lr - ctd::train::lr_schedule(i, 3, 0.1, 0.05)).abs() < 1e-15);
    }

    let ckpt = run.join("model.ckpt");
    let csv = dir.path().join("report.csv");
    let o = ctd(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--csv",
        p(&csv),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ctd::metrics::MetricsReport::from_csv(&std::fs::read_to_string(&csv).unwrap()).is_ok());

    let pred = dir.path().join("pred");
    let image = data.join("images/000000.png");
    let o = ctd(&[
        "infer",
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&pred),
        p(&image),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(pred.join("saliency/000000.png").exists());
    assert!(pred.join("boundary/000000.png").exists());

    let missing = dir.path().join("nope.png");
    let o = ctd(&[
        "infer",
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&pred),
        p(&image),
        p(&missing),
    ]);
    assert!(!o.status.success());
    assert!(pred.join("saliency/000000.png").exists());
}

#[test]
fn eval_of_ground_truth_predictions_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(ctd(&[
        "gen-data",
        "--out",
        p(&data),
        "--count",
        "3",
        "--size",
        "64"
    ])
    .status
    .success());
    let o = ctd(&[
        "eval",
        "--predictions",
        p(&data.join("masks")),
        "--data",
        p(&data),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("MAE            0.000000"), "{text}");
    assert!(text.contains("mF_beta        1.000000"), "{text}");
    assert!(text.contains("E_m            1.000000"), "{text}");
}

#[test]
fn bad_inputs_fail_with_nonzero_exit() {
    assert!(!ctd(&["train", "--set", "bogus=1"]).status.success());
    assert!(!ctd(&["audit", "--variant", "XL"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    assert!(!ctd(&[
        "eval",
        "--checkpoint",
        p(&dir.path().join("none.ckpt")),
        "--data",
        p(dir.path())
    ])
    .status
    .success());
}

#[test]
fn grad_check_passes() {
    let o = ctd(&["grad-check"]);
    assert!(o.status.success());
    assert!(!stdout(&o).contains("FAIL"));
}
