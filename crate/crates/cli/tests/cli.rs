use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fss")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, seed: &str) -> Output {
    fss(&["synth", "--seed", seed, "--set", "image_size=32", "--set", "synth_classes=8", "--set", "synth_per_class=3", "--output", dir.to_str().unwrap()])
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "images", "masks"] {
        let mut entries: Vec<_> = fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
        entries.sort();
        for p in entries {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn patterns_lists_seven_with_fields() {
    let o = fss(&["patterns"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0], "image\timage-only\timage");
    assert_eq!(lines[6], "text\tclass-aware-group\tclass_name");
    assert!(lines.contains(&"class_box\tclass-aware-group\timage,box,class_name"));
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(synth(&a, "7").status.success());
    assert!(synth(&b, "7").status.success());
    assert!(synth(&c, "8").status.success());
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
    assert_eq!(fs::read_to_string(a.join("manifest.tsv")).unwrap().lines().count(), 24);
}

#[test]
fn refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    assert!(synth(&out, "1").status.success());
    let again = synth(&out, "2");
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("--force"));
    let forced = fss(&["synth", "--seed", "2", "--set", "image_size=32", "--set", "synth_classes=8", "--set", "synth_per_class=3", "--force", "--output", out.to_str().unwrap()]);
    assert!(forced.status.success(), "{}", stderr(&forced));
}

#[test]
fn usage_and_validation_exit_codes() {
    assert_eq!(fss(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(fss(&["eval", "--k", "many"]).status.code(), Some(2));
    let bad = fss(&["eval", "--set", "predictor=oracle", "--pattern", "points"]);
    assert_eq!(bad.status.code(), Some(1));
    assert_eq!(stderr(&bad).lines().count(), 1, "{}", stderr(&bad));
    let fold = fss(&["eval", "--fold", "9"]);
    assert_eq!(fold.status.code(), Some(1));
    assert!(stderr(&fold).contains("fold 9"));
    let unknown = fss(&["synth", "--set", "colour=red"]);
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn oracle_eval_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    assert!(synth(&ds, "3").status.success());
    let metrics = dir.path().join("m.csv");
    let o = fss(&[
        "eval",
        "--set",
        "predictor=oracle",
        "--set",
        "image_size=32",
        "--set",
        "eval_episodes=20",
        "--dataset",
        ds.join("manifest.tsv").to_str().unwrap(),
        "--output",
        metrics.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 7);
    let table = fs::read_to_string(metrics).unwrap();
    assert!(table.starts_with("fold,pattern,K,class_id,iou\n"));
    for row in table.lines().skip(1) {
        assert!(row.ends_with(",1.0000"), "{row}");
    }
}

#[test]
fn config_file_sits_below_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let out = dir.path().join("ds");
    fs::write(&cfg, format!("# dataset\nimage_size=16\nsynth_classes=4\nsynth_per_class=2\nseed=1\noutput={}\n", out.display())).unwrap();
    let o = fss(&["synth", "--config", cfg.to_str().unwrap(), "--set", "synth_classes=8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("16 records in 8 classes"));
    let img = fs::read(out.join("images/00000.png")).unwrap();
    // PNG IHDR width and height
    assert_eq!(&img[16..24], &[0, 0, 0, 16, 0, 0, 0, 16]);
}

#[test]
fn train_eval_predict_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let run = dir.path().join("run");
    let s = fss(&["synth", "--seed", "4", "--set", "image_size=64", "--set", "synth_classes=8", "--set", "synth_per_class=4", "--output", ds.to_str().unwrap()]);
    assert!(s.status.success());
    let manifest = ds.join("manifest.tsv");
    let t = fss(&[
        "train",
        "--seed",
        "4",
        "--dataset",
        manifest.to_str().unwrap(),
        "--set",
        "image_size=64",
        "--set",
        "max_steps=3",
        "--set",
        "batch_size=2",
        "--set",
        "pattern_group=class-aware-group",
        "--set",
        "val_episodes=2",
        "--output",
        run.to_str().unwrap(),
    ]);
    assert!(t.status.success(), "{}", stderr(&t));
    let ckpt = run.join("last.ckpt");
    assert!(ckpt.exists() && run.join("config.txt").exists());

    let e = fss(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", manifest.to_str().unwrap(), "--set", "eval_episodes=4"]);
    assert!(e.status.success(), "{}", stderr(&e));
    let text = stdout(&e);
    for p in ["class_image", "class_mask", "class_box", "text"] {
        assert!(text.contains(&format!("pattern {p} K=1")), "{text}");
    }

    let mask = dir.path().join("pred.png");
    let overlay = dir.path().join("overlay.png");
    let p = fss(&[
        "predict",
        "--pattern",
        "class_box",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--query",
        ds.join("images/00000.png").to_str().unwrap(),
        "--support-image",
        ds.join("images/00001.png").to_str().unwrap(),
        "--box",
        "8,8,40,40",
        "--class-name",
        "red circle",
        "--overlay",
        overlay.to_str().unwrap(),
        "--output",
        mask.to_str().unwrap(),
    ]);
    assert!(p.status.success(), "{}", stderr(&p));
    assert!(mask.exists() && overlay.exists());

    let missing = fss(&["predict", "--pattern", "mask", "--checkpoint", ckpt.to_str().unwrap(), "--query", ds.join("images/00000.png").to_str().unwrap(), "--output", dir.path().join("x.png").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("requires a support image"), "{}", stderr(&missing));
}
