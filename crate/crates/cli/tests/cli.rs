//! End-to-end runs of the `drgrade` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_drgrade"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn drgrade")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "drgrade {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Small synthetic run: 18 images at 32x32, three merged classes, a
/// 2-stage net on 16x16 inputs.
fn tiny_config(out_dir: &Path, augment: bool) -> String {
    format!(
        r#"seed = 11
epochs = 2
out_dir = "{}"

[dataset]
source = "synthetic"
per_class = [6, 0, 6, 0, 6]
image_size = 32
class_merge = "three"
split = [0.5, 0.25, 0.25]

[preprocess]
size = 16
clahe_tiles = [2, 2]
gamma = 1.1

[augment]
enabled = {augment}

[model]
head_dim = 8

[[model.stage]]
channels = 4
stride = 2
se = true
se_reduction = 2

[[model.stage]]
channels = 8
stride = 2
se = false
se_reduction = 1

[optimizer]
batch_size = 4
mixup_alpha = 0.2
"#,
        out_dir.display()
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn train_tiny(dir: &Path, tag: &str) -> (PathBuf, PathBuf) {
    let out = dir.join(tag);
    let cfg = write_config(dir, &format!("{tag}.toml"), &tiny_config(&out, true));
    run_ok(&["train", "--config", cfg.to_str().unwrap()]);
    (cfg, out)
}

#[test]
fn init_config_materializes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    run_ok(&["init-config", "--out", path.to_str().unwrap()]);
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.contains("epochs = 100"), "{text}");
    assert!(text.contains("size = 224"), "{text}");
    assert!(text.contains("split = [0.7, 0.15, 0.15]"), "{text}");
    assert!(text.contains("gamma = 2.0"), "{text}");
    assert!(text.contains("label_smoothing = 0.1"), "{text}");
    assert!(text.contains("factor = 0.5"), "{text}");
    assert!(text.contains("patience = 5"), "{text}");
}

#[test]
fn train_writes_history_manifest_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out) = train_tiny(dir.path(), "run");
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,train_loss,val_loss,train_acc,val_acc,lr"
    );
    assert_eq!(lines.count(), 2, "{history}");
    assert!(out.join("final.ckpt").is_file());
    assert!(out.join("best.ckpt").is_file());
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed=11"), "{manifest}");
    assert!(manifest.contains("config_sha256="), "{manifest}");
    assert!(manifest.contains("dataset_fingerprint="), "{manifest}");
}

#[test]
fn train_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out_a) = train_tiny(dir.path(), "a");
    let (_, out_b) = train_tiny(dir.path(), "b");
    assert_eq!(
        fs::read(out_a.join("history.csv")).unwrap(),
        fs::read(out_b.join("history.csv")).unwrap()
    );
    assert_eq!(
        fs::read(out_a.join("final.ckpt")).unwrap(),
        fs::read(out_b.join("final.ckpt")).unwrap()
    );
    // Manifests differ only in the configured output directory hash.
    let strip = |p: &Path| {
        fs::read_to_string(p.join("manifest.txt"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("config_sha256="))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&out_a), strip(&out_b));
}

#[test]
fn seed_override_changes_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "run.toml", &tiny_config(&out, true));
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--epochs", "1"]);
    let first = fs::read_to_string(out.join("manifest.txt")).unwrap();
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--epochs", "1", "--seed", "99"]);
    let second = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(first.contains("seed=11"));
    assert!(second.contains("seed=99"));
    assert_ne!(first, second);
}

#[test]
fn missing_dataset_path_exits_2_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.toml",
        "[dataset]\nsource = \"csv\"\ncsv = \"/no/such/labels.csv\"\nimages = \"/no/such/dir\"\n",
    );
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("dataset.csv"), "{stderr}");
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "typo.toml", "epochz = 5\n");
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}

#[test]
fn evaluate_writes_reports_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = train_tiny(dir.path(), "run");
    let ckpt = out.join("final.ckpt");
    let args = [
        "evaluate",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--split",
        "test",
    ];
    let first = run_ok(&args);
    let stdout = String::from_utf8_lossy(&first.stdout);
    assert!(stdout.contains("Accuracy"), "{stdout}");
    let eval_dir = out.join("eval-test");
    let report = fs::read(eval_dir.join("report.txt")).unwrap();
    let confusion = fs::read(eval_dir.join("confusion.csv")).unwrap();
    let roc = fs::read(eval_dir.join("roc.csv")).unwrap();
    let ckpt_bytes = fs::read(&ckpt).unwrap();

    run_ok(&args);
    assert_eq!(fs::read(eval_dir.join("report.txt")).unwrap(), report);
    assert_eq!(fs::read(eval_dir.join("confusion.csv")).unwrap(), confusion);
    assert_eq!(fs::read(eval_dir.join("roc.csv")).unwrap(), roc);
    assert_eq!(fs::read(&ckpt).unwrap(), ckpt_bytes, "evaluate must not touch the checkpoint");
}

#[test]
fn evaluate_rejects_class_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out) = train_tiny(dir.path(), "run");
    // Same dataset, but without the three-class merge: K=3 checkpoint vs 5.
    let five = tiny_config(&dir.path().join("five"), true).replace("\"three\"", "\"five\"");
    let cfg5 = write_config(dir.path(), "five.toml", &five);
    let res = run(&[
        "evaluate",
        "--config",
        cfg5.to_str().unwrap(),
        "--checkpoint",
        out.join("final.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("classes"));
}

fn synth_tiny(dir: &Path, tag: &str) -> PathBuf {
    let cfg = write_config(
        dir,
        &format!("{tag}.toml"),
        "[dataset]\nper_class = [10, 10, 10, 10, 10]\nimage_size = 32\n",
    );
    let out = dir.join(tag);
    run_ok(&["synth", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    out
}

#[test]
fn synth_writes_aptos_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth_tiny(dir.path(), "data");
    let images: Vec<_> = fs::read_dir(out.join("images")).unwrap().collect();
    assert_eq!(images.len(), 50);
    let csv = fs::read_to_string(out.join("labels.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
    assert!(csv.starts_with("id_code,diagnosis\n"));
}

#[test]
fn synth_regeneration_matches_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth_tiny(dir.path(), "a");
    let b = synth_tiny(dir.path(), "b");
    assert_eq!(
        fs::read(a.join("labels.csv")).unwrap(),
        fs::read(b.join("labels.csv")).unwrap()
    );
    let mut names: Vec<String> = fs::read_dir(a.join("images"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    for name in names {
        assert_eq!(
            fs::read(a.join("images").join(&name)).unwrap(),
            fs::read(b.join("images").join(&name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn synthesized_csv_loads_as_a_dataset_source() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_tiny(dir.path(), "data");
    let out = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        "csv.toml",
        &format!(
            r#"seed = 5
epochs = 0
out_dir = "{}"

[dataset]
source = "csv"
csv = "{}"
images = "{}"

[preprocess]
size = 16
clahe_tiles = [2, 2]

[model]
head_dim = 8

[[model.stage]]
channels = 4
stride = 2
se = false
se_reduction = 1
"#,
            out.display(),
            data.join("labels.csv").display(),
            data.join("images").display()
        ),
    );
    run_ok(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(out.join("final.ckpt").is_file());
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1, "{history}");
}

#[test]
fn explain_writes_artifacts_and_classes_differ() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out) = train_tiny(dir.path(), "run");
    let data = synth_tiny(dir.path(), "data");
    // A grade-4 image has the most planted lesions.
    let image = data.join("images").join("synth0000g4.ppm");
    assert!(image.is_file());
    let ckpt = out.join("final.ckpt");

    let explain_dir = dir.path().join("explain");
    let res = run_ok(&[
        "explain",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        explain_dir.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("probs:"), "{stdout}");
    assert!(explain_dir.join("overlay.ppm").is_file());
    assert!(explain_dir.join("membership.txt").is_file());
    // 16x16 input through two stride-2 stages: 4x4 target layer.
    let heatmap = fs::read_to_string(explain_dir.join("heatmap.csv")).unwrap();
    let rows: Vec<&str> = heatmap.lines().collect();
    assert_eq!(rows.len(), 4, "{heatmap}");
    assert!(rows.iter().all(|r| r.split(',').count() == 4), "{heatmap}");

    let class_dir = |c: &str| {
        let d = dir.path().join(format!("explain{c}"));
        run_ok(&[
            "explain",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--image",
            image.to_str().unwrap(),
            "--class",
            c,
            "--out",
            d.to_str().unwrap(),
        ]);
        fs::read_to_string(d.join("heatmap.csv")).unwrap()
    };
    assert_ne!(class_dir("0"), class_dir("2"));
}

#[test]
fn explain_rejects_unsupported_format() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out) = train_tiny(dir.path(), "run");
    let bogus = dir.path().join("scan.tiff");
    fs::write(&bogus, b"II*\0").unwrap();
    let res = run(&[
        "explain",
        "--checkpoint",
        out.join("final.ckpt").to_str().unwrap(),
        "--image",
        bogus.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("unsupported image format"));
}

#[test]
fn preview_emits_five_stages_and_augment_off_freezes_stage5() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_tiny(dir.path(), "data");
    let image = data.join("images").join("synth0000g0.ppm");
    let cfg_on = write_config(dir.path(), "on.toml", &tiny_config(&dir.path().join("r"), true));
    let cfg_off = write_config(dir.path(), "off.toml", &tiny_config(&dir.path().join("r"), false));

    let on = dir.path().join("on");
    run_ok(&[
        "preview",
        "--config",
        cfg_on.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        on.to_str().unwrap(),
    ]);
    let files: Vec<String> = {
        let mut v: Vec<String> = fs::read_dir(&on)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        v.sort();
        v
    };
    assert_eq!(
        files,
        vec![
            "stage1_crop.ppm",
            "stage2_resize.ppm",
            "stage3_clahe.ppm",
            "stage4_gamma.ppm",
            "stage5_augment.ppm"
        ]
    );
    assert_ne!(
        fs::read(on.join("stage3_clahe.ppm")).unwrap(),
        fs::read(on.join("stage2_resize.ppm")).unwrap(),
        "CLAHE must change a non-constant image"
    );

    let off = dir.path().join("off");
    run_ok(&[
        "preview",
        "--config",
        cfg_off.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        off.to_str().unwrap(),
    ]);
    assert_eq!(
        fs::read(off.join("stage4_gamma.ppm")).unwrap(),
        fs::read(off.join("stage5_augment.ppm")).unwrap()
    );
}

#[test]
fn emit_svg_writes_curve_plots() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "run.toml", &tiny_config(&out, true));
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--emit-svg"]);
    let loss = fs::read_to_string(out.join("history_loss.svg")).unwrap();
    let acc = fs::read_to_string(out.join("history_accuracy.svg")).unwrap();
    assert!(loss.starts_with("<svg") && loss.contains("polyline"));
    assert!(acc.contains("accuracy"));
}

#[test]
fn verify_grads_passes_on_the_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "run.toml", &tiny_config(&out, true));
    let res = run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "1",
        "--verify-grads",
    ]);
    assert!(String::from_utf8_lossy(&res.stdout).contains("gradient check"));
}

#[test]
fn verify_command_reports_all_checks_ok() {
    let res = run_ok(&["verify", "--seed", "3"]);
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("full_model"), "{stdout}");
    assert!(stdout.contains("auc_vs_pairwise"), "{stdout}");
    assert!(stdout.contains("0 failed"), "{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");
}
