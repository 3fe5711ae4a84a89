//! CLI-level checks: exit codes, determinism/idempotency of outputs, help
//! text, the pixel-dump format and the seed environment override.

use std::path::Path;
use std::sync::Mutex;

use mitoclass::cli::{run_cli_io, SEED_ENV_VAR};

/// Guards the two tests whose behavior depends on the process environment
/// (one sets MITOCLASS_SEED, one must observe it unset).
static ENV_LOCK: Mutex<()> = Mutex::new(());

fn run(args: &[&str]) -> (i32, String, String) {
    let argv: Vec<String> = std::iter::once("mitoclass".to_string())
        .chain(args.iter().map(|s| s.to_string()))
        .collect();
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run_cli_io(&argv, &mut out, &mut err);
    (
        code,
        String::from_utf8_lossy(&out).into_owned(),
        String::from_utf8_lossy(&err).into_owned(),
    )
}

fn synth_small(dir: &Path, n: usize, seed: u64) -> String {
    let out = dir.join("data");
    let (code, _, err) = run(&[
        "synth",
        "--n",
        &n.to_string(),
        "--amf-rate",
        "0.25",
        "--hard-rate",
        "0.2",
        "--n-domains",
        "2",
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "synth failed: {err}");
    out.join("manifest.csv").to_str().unwrap().to_string()
}

#[test]
fn synth_writes_manifest_pngs_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path(), 12, 5);
    assert!(Path::new(&manifest).exists());
    let truth = dir.path().join("data").join("truth.csv");
    let truth_text = std::fs::read_to_string(&truth).unwrap();
    assert!(truth_text.starts_with("patch_id,true_class,planted_hard\n"));
    assert_eq!(truth_text.lines().count(), 13);
    assert!(dir.path().join("data/images/syn000000.png").exists());

    // byte-identical on re-run into a second directory
    let dir2 = tempfile::tempdir().unwrap();
    let manifest2 = synth_small(dir2.path(), 12, 5);
    assert_eq!(
        std::fs::read(&manifest).unwrap(),
        std::fs::read(&manifest2).unwrap()
    );
    assert_eq!(
        std::fs::read(dir.path().join("data/images/syn000003.png")).unwrap(),
        std::fs::read(dir2.path().join("data/images/syn000003.png")).unwrap()
    );
    assert_eq!(
        std::fs::read(truth).unwrap(),
        std::fs::read(dir2.path().join("data/truth.csv")).unwrap()
    );
}

#[test]
fn split_is_idempotent_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path(), 20, 7);
    let f1 = dir.path().join("folds1.csv");
    let f2 = dir.path().join("folds2.csv");
    for f in [&f1, &f2] {
        let (code, _, err) = run(&[
            "split",
            "--manifest",
            &manifest,
            "--k",
            "4",
            "--seed",
            "3",
            "--out",
            f.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{err}");
    }
    assert_eq!(std::fs::read(&f1).unwrap(), std::fs::read(&f2).unwrap());
    let text = std::fs::read_to_string(&f1).unwrap();
    assert!(text.starts_with("# k=4 seed=3\npatch_id,fold\n"));
}

#[test]
fn out_of_range_fold_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path(), 20, 9);
    let (code, _, err) = run(&[
        "train",
        "--manifest",
        &manifest,
        "--fold",
        "9",
        "--k",
        "5",
        "--seed",
        "1",
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("fold 9"), "stderr should name the bad fold: {err}");
}

#[test]
fn unknown_input_mode_is_a_usage_error_and_missing_manifest_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path(), 12, 11);
    let (code, _, err) = run(&[
        "train",
        "--manifest",
        &manifest,
        "--fold",
        "0",
        "--k",
        "3",
        "--seed",
        "1",
        "--input-mode",
        "sepia",
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(code, 1, "{err}");
    assert!(err.contains("sepia"));

    let (code, _, _) = run(&[
        "split",
        "--manifest",
        "/nonexistent/manifest.csv",
        "--k",
        "3",
        "--seed",
        "1",
        "--out",
        dir.path().join("f.csv").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for sub in [
        vec!["--help"],
        vec!["synth", "--help"],
        vec!["split", "--help"],
        vec!["train", "--help"],
        vec!["cv", "--help"],
        vec!["eval", "--help"],
        vec!["hpo", "--help"],
        vec!["report", "--help"],
        vec!["pixels", "--help"],
        vec!["pixels", "dump", "--help"],
    ] {
        let (code, out, _) = run(&sub);
        assert_eq!(code, 0, "{sub:?}");
        assert!(out.contains("Usage"), "{sub:?} help should document usage");
    }
    // every train flag appears in the help text
    let (_, out, _) = run(&["train", "--help"]);
    for flag in [
        "--manifest",
        "--folds",
        "--fold",
        "--out",
        "--seed",
        "--lr0",
        "--batch-size",
        "--max-epochs",
        "--patience",
        "--theta",
        "--alpha",
        "--gamma",
        "--dropout",
        "--input-mode",
        "--hardness-mode",
        "--resize-to",
        "--config",
    ] {
        assert!(out.contains(flag), "train help lacks {flag}");
    }
}

#[test]
fn pixels_dump_writes_the_sixteen_byte_header_format() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path(), 6, 13);
    let out = dir.path().join("tensor.bin");
    let args = [
        "pixels",
        "dump",
        "--manifest",
        &manifest,
        "--patch-id",
        "syn000002",
        "--mode",
        "rgb",
        "--seed",
        "4",
        "--resize-to",
        "32",
        "--out",
        out.to_str().unwrap(),
    ];
    let (code, _, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    let bytes = std::fs::read(&out).unwrap();
    assert_eq!(&bytes[0..4], b"MPIX");
    let dim = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    assert_eq!((dim(4), dim(8), dim(12)), (32, 32, 3));
    assert_eq!(bytes.len(), 16 + 32 * 32 * 3 * 4);

    // idempotent
    let first = bytes;
    let (code, _, _) = run(&args);
    assert_eq!(code, 0);
    assert_eq!(std::fs::read(&out).unwrap(), first);

    // six channels under rgb_hed
    let out6 = dir.path().join("tensor6.bin");
    let (code, _, err) = run(&[
        "pixels",
        "dump",
        "--manifest",
        &manifest,
        "--patch-id",
        "syn000002",
        "--mode",
        "rgb_hed",
        "--seed",
        "4",
        "--resize-to",
        "32",
        "--augment",
        "--out",
        out6.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let bytes = std::fs::read(&out6).unwrap();
    let dim = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    assert_eq!(dim(12), 6);
}

#[test]
fn seed_env_var_overrides_default_but_not_flags() {
    // the one test that sets the environment; everything else passes --seed
    // explicitly or holds the same lock
    let _guard = ENV_LOCK.lock().unwrap();
    let dir = tempfile::tempdir().unwrap();
    std::env::set_var(SEED_ENV_VAR, "5");
    let out_env = dir.path().join("env");
    let (code, _, err) = run(&[
        "synth", "--n", "6", "--amf-rate", "0.25", "--hard-rate", "0.2", "--n-domains", "2",
        "--out", out_env.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");

    let out_flag = dir.path().join("flag");
    let (code, _, _) = run(&[
        "synth", "--n", "6", "--amf-rate", "0.25", "--hard-rate", "0.2", "--n-domains", "2",
        "--seed", "5", "--out", out_flag.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert_eq!(
        std::fs::read(out_env.join("manifest.csv")).unwrap(),
        std::fs::read(out_flag.join("manifest.csv")).unwrap(),
        "env seed 5 must behave like --seed 5"
    );

    // an explicit flag wins over the environment
    let out_override = dir.path().join("override");
    let (code, _, _) = run(&[
        "synth", "--n", "6", "--amf-rate", "0.25", "--hard-rate", "0.2", "--n-domains", "2",
        "--seed", "6", "--out", out_override.to_str().unwrap(),
    ]);
    std::env::remove_var(SEED_ENV_VAR);
    assert_eq!(code, 0);
    assert_ne!(
        std::fs::read(out_override.join("manifest.csv")).unwrap(),
        std::fs::read(out_flag.join("manifest.csv")).unwrap()
    );

    // malformed env value is a usage error
    std::env::set_var(SEED_ENV_VAR, "not-a-number");
    let (code, _, err) = run(&[
        "synth", "--n", "6", "--amf-rate", "0.25", "--hard-rate", "0.2", "--n-domains", "2",
        "--out", dir.path().join("bad").to_str().unwrap(),
    ]);
    std::env::remove_var(SEED_ENV_VAR);
    assert_eq!(code, 1);
    assert!(err.contains(SEED_ENV_VAR));
}

#[test]
fn train_eval_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path(), 24, 17);
    let folds = dir.path().join("folds.csv");
    let (code, _, err) = run(&[
        "split", "--manifest", &manifest, "--k", "3", "--seed", "2", "--out",
        folds.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");

    let run_dir = dir.path().join("run");
    let (code, _, err) = run(&[
        "train",
        "--manifest",
        &manifest,
        "--folds",
        folds.to_str().unwrap(),
        "--fold",
        "0",
        "--seed",
        "3",
        "--max-epochs",
        "2",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    for artifact in ["config.json", "history.csv", "best.ckpt", "report.json", "predictions.csv"] {
        assert!(run_dir.join(artifact).exists(), "missing {artifact}");
    }

    // eval the checkpoint on the same validation slice
    let eval_dir = dir.path().join("evald");
    let (code, _, err) = run(&[
        "eval",
        "--checkpoint",
        run_dir.join("best.ckpt").to_str().unwrap(),
        "--manifest",
        &manifest,
        "--folds",
        folds.to_str().unwrap(),
        "--fold",
        "0",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    // identical slice and params: identical predictions
    assert_eq!(
        std::fs::read(run_dir.join("predictions.csv")).unwrap(),
        std::fs::read(eval_dir.join("predictions.csv")).unwrap()
    );

    // eval on the full manifest
    let eval_all = dir.path().join("eval_all");
    let (code, _, err) = run(&[
        "eval",
        "--checkpoint",
        run_dir.join("best.ckpt").to_str().unwrap(),
        "--manifest",
        &manifest,
        "--out",
        eval_all.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let preds = std::fs::read_to_string(eval_all.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 25); // header + all 24 patches
}

#[test]
fn cv_hpo_and_report_emit_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path(), 20, 19);

    let cv_dir = dir.path().join("cv");
    let (code, _, err) = run(&[
        "cv",
        "--manifest",
        &manifest,
        "--k",
        "2",
        "--seed",
        "5",
        "--max-epochs",
        "2",
        "--out",
        cv_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    for artifact in [
        "config.json",
        "folds.csv",
        "cv_report.json",
        "cv_report.csv",
        "fold_0/best.ckpt",
        "fold_1/report.json",
    ] {
        assert!(cv_dir.join(artifact).exists(), "missing {artifact}");
    }

    let report_dir = dir.path().join("summary");
    let (code, _, err) = run(&[
        "report",
        "--cv-dir",
        cv_dir.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let summary = std::fs::read_to_string(report_dir.join("summary.json")).unwrap();
    assert!(summary.contains("balanced_accuracy"));
    assert!(summary.contains("\u{b1}"), "formatted mean (±std) strings present");

    let hpo_dir = dir.path().join("hpo");
    let (code, _, err) = run(&[
        "hpo",
        "--manifest",
        &manifest,
        "--k",
        "2",
        "--seed",
        "7",
        "--trials",
        "2",
        "--max-epochs",
        "1",
        "--out",
        hpo_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let trials = std::fs::read_to_string(hpo_dir.join("trials.csv")).unwrap();
    assert!(trials.starts_with("trial_id,alpha,gamma,lr,dropout,ba_fold0,ba_fold1,mean_ba,status"));
    assert_eq!(trials.lines().count(), 3);
    assert!(hpo_dir.join("best.json").exists());

    let (code, _, err) = run(&[
        "report",
        "--trials",
        hpo_dir.join("trials.csv").to_str().unwrap(),
        "--out",
        dir.path().join("tsum").to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(dir.path().join("tsum/trials_summary.json").exists());
}

#[test]
fn config_file_feeds_defaults_and_flags_override() {
    // the file-provided seed is only visible when MITOCLASS_SEED is unset
    let _guard = ENV_LOCK.lock().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path(), 16, 23);
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        r#"{"seed": 11, "max_epochs": 2, "alpha": 0.3, "k": 2}"#,
    )
    .unwrap();

    let run_dir = dir.path().join("run");
    let (code, _, err) = run(&[
        "train",
        "--manifest",
        &manifest,
        "--fold",
        "0",
        "--config",
        cfg_path.to_str().unwrap(),
        "--max-epochs",
        "1", // flag overrides the file's 2
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let written: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("config.json")).unwrap())
            .unwrap();
    assert_eq!(written["train"]["max_epochs"], 1);
    assert_eq!(written["train"]["seed"], 11);
    assert_eq!(written["train"]["focal"]["alpha"], 0.3);

    // malformed config file is a usage error
    std::fs::write(&cfg_path, r#"{"max_epochs": "many"}"#).unwrap();
    let (code, _, _) = run(&[
        "train",
        "--manifest",
        &manifest,
        "--fold",
        "0",
        "--k",
        "2",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
}
