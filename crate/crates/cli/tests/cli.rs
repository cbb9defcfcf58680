use spline_conformal::conformal::{ScoreKind, Scorer};
use spline_conformal::data::{load_csv, Split};
use spline_conformal::model::{validation_loss, Checkpoint, ModelKind};
use splinecp::{
    bundle_for, cmd_calibrate, cmd_evaluate, cmd_synth, cmd_train, CalibrateArgs, CliError,
    DataArgs, EvaluateArgs, ModelArgs, SynthArgs, TrainArgs, TrainingArgs,
};
use std::path::{Path, PathBuf};
use std::process::Command;

fn synth(dir: &Path, count: usize, seed: u64) -> PathBuf {
    cmd_synth(&SynthArgs {
        count,
        seed,
        out: dir.to_path_buf(),
    })
    .unwrap()
}

fn model(kind: ModelKind) -> ModelArgs {
    ModelArgs {
        model: kind,
        degree: 1,
        knots: 31,
        bins: 21,
        min_spacing: 1e-3,
    }
}

fn training(max_batches: usize) -> TrainingArgs {
    TrainingArgs {
        lr: 5e-3,
        seed: 0,
        max_batches,
        batch_size: 512,
        patience: 125,
        weight_decay: 1e-4,
    }
}

fn data(path: &Path) -> DataArgs {
    DataArgs {
        data: path.to_path_buf(),
        target_col: "y".into(),
    }
}

fn train(data_path: &Path, kind: ModelKind, max_batches: usize, out: &Path) -> Checkpoint {
    cmd_train(&TrainArgs {
        data: data(data_path),
        model: model(kind),
        training: training(max_batches),
        out: out.to_path_buf(),
    })
    .unwrap()
}

fn calibrate(
    ck: &Path,
    data_path: &Path,
    alphas: Vec<f64>,
    out: &Path,
) -> splinecp::CalibrationFile {
    cmd_calibrate(&CalibrateArgs {
        checkpoint: ck.to_path_buf(),
        data: data(data_path),
        model: None,
        alphas,
        out: out.to_path_buf(),
    })
    .unwrap()
}

fn evaluate(dir: &Path, data_path: &Path, split: Split, out: &Path) -> splinecp::ReportFile {
    cmd_evaluate(&EvaluateArgs {
        checkpoint: dir.join("checkpoint.json"),
        calibration: dir.join("calibration.json"),
        data: data(data_path),
        split,
        bisection_steps: 24,
        out: out.to_path_buf(),
    })
    .unwrap()
}

#[test]
fn synth_writes_rows_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(&dir.path().join("a"), 2000, 0);
    let b = synth(&dir.path().join("b"), 2000, 0);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 2001);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(dir.path().join("a/config.json").exists());

    let two = load_csv(&synth(&dir.path().join("c"), 2, 0), "y").unwrap();
    assert_eq!(two.x, vec![0.0, 1.0]);
    assert!(matches!(
        cmd_synth(&SynthArgs {
            count: 1,
            seed: 0,
            out: dir.path().join("d")
        }),
        Err(CliError::Config(_))
    ));
}

#[test]
fn train_calibrate_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let csv = synth(dir.path(), 2000, 0);
    let run = dir.path().join("nd");
    train(&csv, ModelKind::SpiceNd, 50_000, &run);

    // reload reproduces the stored validation loss
    let ck = Checkpoint::load(&run.join("checkpoint.json")).unwrap();
    let raw = load_csv(&csv, "y").unwrap();
    let bundle = bundle_for(&ck, &raw).unwrap();
    let val = validation_loss(ck.spline().unwrap(), &ck.config, &bundle).unwrap();
    assert!((val - ck.best_val_loss).abs() < 1e-9);
    assert!(run.join("train_log.csv").exists());

    // the 181st of 200 calibration scores
    let file = calibrate(&run.join("checkpoint.json"), &csv, vec![0.1, 0.5], &run);
    let cal = bundle.split(Split::Cal);
    assert_eq!(cal.len(), 200);
    let mut scores = Scorer::Nd(ck.spline().unwrap())
        .scores(&cal.x, &cal.y)
        .unwrap()
        .scores;
    scores.sort_by(f64::total_cmp);
    assert_eq!(file.results[0].q_hat, scores[180]);
    assert_eq!(file.results[0].n_cal, 200);
    assert_eq!(file.results[0].kind, ScoreKind::Nd);
    assert!(file.results[1].q_hat <= file.results[0].q_hat);

    // single alpha for evaluation
    calibrate(&run.join("checkpoint.json"), &csv, vec![0.1], &run);
    let first = evaluate(&run, &csv, Split::Test, &run.join("eval1"));
    let second = evaluate(&run, &csv, Split::Test, &run.join("eval2"));
    for name in [
        "report.json",
        "report.csv",
        "sets.jsonl",
        "size_histogram.csv",
    ] {
        let a = std::fs::read(run.join("eval1").join(name)).unwrap();
        let b = std::fs::read(run.join("eval2").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    let report = &first.reports[0];
    assert_eq!(report.samples, 400);
    assert!(
        (0.85..=0.95).contains(&report.coverage),
        "{}",
        report.coverage
    );
    assert_eq!(first.reports, second.reports);

    let calval = evaluate(&run, &csv, Split::CalVal, &run.join("eval3"));
    assert_eq!(calval.reports[0].samples, 200);
    assert_ne!(calval.reports, first.reports);
    assert!(calval.reports[0].coverage > 0.0 && calval.reports[0].mean_size > 0.0);

    let sets = std::fs::read_to_string(run.join("eval1/sets.jsonl")).unwrap();
    assert_eq!(sets.lines().count(), 400);
    let first_line: serde_json::Value = serde_json::from_str(sets.lines().next().unwrap()).unwrap();
    assert_eq!(first_line["kind"], "nd");
}

#[test]
fn spline_checkpoint_calibrates_with_hpd_scores() {
    let dir = tempfile::tempdir().unwrap();
    let csv = synth(dir.path(), 600, 1);
    let run = dir.path().join("run");
    train(&csv, ModelKind::SpiceNd, 200, &run);
    let file = cmd_calibrate(&CalibrateArgs {
        checkpoint: run.join("checkpoint.json"),
        data: data(&csv),
        model: Some(ModelKind::SpiceHpd),
        alphas: vec![0.2],
        out: run.clone(),
    })
    .unwrap();
    assert_eq!(file.results[0].kind, ScoreKind::Hpd);
    let report = evaluate(&run, &csv, Split::Test, &run.join("eval"));
    assert_eq!(report.model, ModelKind::SpiceHpd);

    let err = cmd_calibrate(&CalibrateArgs {
        checkpoint: run.join("checkpoint.json"),
        data: data(&csv),
        model: Some(ModelKind::Hist),
        alphas: vec![0.2],
        out: run.clone(),
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn hist_probabilities_sum_to_one_after_reload() {
    let dir = tempfile::tempdir().unwrap();
    let csv = synth(dir.path(), 600, 2);
    let run = dir.path().join("hist");
    train(&csv, ModelKind::Hist, 300, &run);
    let ck = Checkpoint::load(&run.join("checkpoint.json")).unwrap();
    let bundle = bundle_for(&ck, &load_csv(&csv, "y").unwrap()).unwrap();
    let probs = ck
        .hist()
        .unwrap()
        .probabilities(&bundle.split(Split::Test).x)
        .unwrap();
    assert_eq!(probs[0].len(), 21);
    for p in probs {
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn tiny_calibration_split_gives_infinite_quantile() {
    let dir = tempfile::tempdir().unwrap();
    let csv = synth(dir.path(), 50, 3);
    let run = dir.path().join("run");
    train(&csv, ModelKind::SpiceNd, 50, &run);
    let file = calibrate(&run.join("checkpoint.json"), &csv, vec![0.01], &run);
    assert_eq!(file.results[0].n_cal, 5);
    assert_eq!(file.results[0].q_hat, f64::INFINITY);
    let text = std::fs::read_to_string(run.join("calibration.json")).unwrap();
    assert!(text.contains("\"+inf\""), "{text}");
    let report = evaluate(&run, &csv, Split::Test, &run.join("eval"));
    assert_eq!(report.reports[0].coverage, 1.0);
}

#[test]
fn invalid_knots_fail_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let csv = synth(dir.path(), 100, 0);
    let err = cmd_train(&TrainArgs {
        data: data(&csv),
        model: ModelArgs {
            knots: 1,
            ..model(ModelKind::SpiceNd)
        },
        training: training(10),
        out: dir.path().join("run"),
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(!dir.path().join("run/checkpoint.json").exists());
}

fn binary(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_splinecp"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();
    let (code, _) = binary(&["synth", "--count", "100", "--out", &p("d")]);
    assert_eq!(code, 0);
    let csv = p("d/data.csv");

    let (code, err) = binary(&["train", "--data", &csv, "--knots", "1", "--out", &p("r")]);
    assert_eq!(code, 2, "{err}");
    let (code, err) = binary(&["train", "--data", &p("missing.csv"), "--out", &p("r")]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("missing.csv"));

    std::fs::write(dir.path().join("bad.csv"), "x,y\n1,2\nabc,3\n").unwrap();
    let (code, err) = binary(&["train", "--data", &p("bad.csv"), "--out", &p("r")]);
    assert_eq!(code, 4, "{err}");

    std::fs::write(dir.path().join("ck.json"), "{\"format\": \"nope\"}").unwrap();
    let (code, err) = binary(&[
        "calibrate",
        "--checkpoint",
        &p("ck.json"),
        "--data",
        &csv,
        "--out",
        &p("c"),
    ]);
    assert_eq!(code, 6, "{err}");

    let (code, _) = binary(&[
        "train",
        "--data",
        &csv,
        "--max-batches",
        "20",
        "--out",
        &p("r"),
    ]);
    assert_eq!(code, 0);
    let (code, err) = binary(&[
        "calibrate",
        "--checkpoint",
        &p("r/checkpoint.json"),
        "--data",
        &csv,
        "--alpha",
        "1.5",
        "--out",
        &p("c"),
    ]);
    assert_eq!(code, 2, "{err}");
}
