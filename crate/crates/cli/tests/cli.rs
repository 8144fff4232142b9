use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn microfp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_microfp"))
        .args(args)
        .env("MICROFP_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = microfp(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn missing_manifest_fails_naming_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = microfp(&[
        "evaluate",
        "--manifest",
        p(&dir.path().join("nope.csv")),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("manifest stage"), "{err}");

    let out = microfp(&["extract", "--method", "sift", "--manifest", p(&dir.path().join("nope.csv")), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest stage"));
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    assert_eq!(microfp(&["evaluate", "--bogus"]).status.code(), Some(1));
    assert_eq!(microfp(&[]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "manifest = m.csv\nfavourite_colour = blue\n").unwrap();
    let out = microfp(&["evaluate", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("favourite_colour"));
    assert!(microfp(&["--help"]).status.success());
}

#[test]
fn evaluate_is_repeatable_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", p(&data), "--per-class", "5", "--side", "64", "--seed", "3"]);
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "manifest = data/manifest.csv\nout = out\nfolds = 5\ndescriptor = sift\nk = 5\nkmeans_n_init = 3\nmethods = svm,kmeans\n",
    )
    .unwrap();
    let stdout = ok(&["evaluate", "--config", p(&cfg)]);
    assert!(stdout.contains("svm"), "{stdout}");
    let out = dir.path().join("out");
    let first = fs::read(out.join("results.csv")).unwrap();
    let header = String::from_utf8_lossy(&first).lines().next().unwrap().to_string();
    assert_eq!(header, "recipe,method,p,mean_acc,std_acc,seed,dict_per_fold,pca_per_fold,ssl_score");
    assert!(out.join("config.txt").exists());
    assert!(out.join("svm/confusion_4.csv").exists());
    ok(&["evaluate", "--config", p(&cfg)]);
    assert_eq!(fs::read(out.join("results.csv")).unwrap(), first);

    // overrides land in the echo and change the recorded protocol
    ok(&["evaluate", "--config", p(&cfg), "--dict-per-fold", "--set", "methods=svm", "--out", p(&dir.path().join("strict"))]);
    let strict = fs::read_to_string(dir.path().join("strict/results.csv")).unwrap();
    assert!(strict.lines().nth(1).unwrap().contains(",true,false,"), "{strict}");
    let echo = fs::read_to_string(dir.path().join("strict/config.txt")).unwrap();
    assert!(echo.contains("dict_per_fold = true"));
}

#[test]
fn subcommands_compose() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    ok(&["synth", "--out", p(&d("data")), "--per-class", "4", "--side", "48"]);
    let manifest = d("data/manifest.csv");
    ok(&["extract", "--method", "patch", "--patch-side", "8", "--stride", "8", "--manifest", p(&manifest), "--out", p(&d("feat"))]);
    assert_eq!(fs::read_dir(d("feat")).unwrap().count(), 8);
    ok(&["cluster", "--features", p(&d("feat")), "--k", "4", "--seed", "1", "--out", p(&d("dict.mfp1"))]);
    let bytes = fs::read(d("dict.mfp1")).unwrap();
    assert_eq!(&bytes[..4], b"MFP1");
    assert_eq!(&bytes[5..5 + bytes[4] as usize], b"centres:patch");
    ok(&[
        "fingerprint", "--dict", p(&d("dict.mfp1")), "--features", p(&d("feat")), "--order", "1", "--vlad", "--manifest",
        p(&manifest), "--out", p(&d("stack.mfp1")),
    ]);
    assert!(d("stack.mfp1.json").exists());
    let stdout = ok(&[
        "classify", "--stack", p(&d("stack.mfp1")), "--manifest", p(&manifest), "--method", "rf", "--trees", "25",
        "--folds", "2", "--out", p(&d("cls")), "--model", p(&d("model.mfp1")),
    ]);
    assert!(stdout.contains("patch H1v,4 rf"), "{stdout}");
    ok(&[
        "classify", "--stack", p(&d("stack.mfp1")), "--manifest", p(&manifest), "--apply", p(&d("model.mfp1")), "--out",
        p(&d("pred")),
    ]);
    let pred = fs::read_to_string(d("pred/predictions.csv")).unwrap();
    assert_eq!(pred.lines().count(), 9);

    ok(&[
        "fingerprint", "--features", p(&d("feat")), "--multiscale", "3,5", "--out", p(&d("ms.mfp1")),
    ]);
    let side: serde_json::Value = serde_json::from_slice(&fs::read(d("ms.mfp1.json")).unwrap()).unwrap();
    assert_eq!(side["ids"].as_array().unwrap().len(), 8);
    assert_eq!(side["recipe"]["parts"].as_array().unwrap().len(), 2);
}
