use std::path::Path;
use std::process::{Command, Output};

fn ravnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ravnet"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ravnet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_lists_commands_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let o = ravnet(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for cmd in [
        "synth",
        "preprocess",
        "train",
        "eval",
        "predict",
        "gradcheck",
    ] {
        assert!(text.contains(cmd), "missing {cmd} in\n{text}");
    }
    let o = ravnet(&["train", "--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for flag in [
        "--manifest",
        "--val-manifest",
        "--config",
        "--out",
        "--lr",
        "--batch-size",
        "--max-epochs",
        "--early-stop-loss",
        "--loss",
        "--encoder",
        "--decoder",
        "--attention",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["synth", "--count", "2"],
        &[
            "synth",
            "--count",
            "2",
            "--size",
            "16",
            "--out-dir",
            "x",
            "--colour",
            "red",
        ],
        &["gradcheck", "--module", "optics"],
        &[
            "train",
            "--manifest",
            "m.csv",
            "--out",
            "x",
            "--loss",
            "hinge",
        ],
    ] {
        let o = ravnet(args, dir.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn bad_config_exits_1_and_missing_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    ravnet(
        &["synth", "--count", "3", "--size", "16", "--out-dir", "d"],
        dir.path(),
    );
    std::fs::write(dir.path().join("c.cfg"), "momentum = 0.9\n").unwrap();
    let o = ravnet(
        &[
            "train",
            "--manifest",
            "d/manifest.csv",
            "--config",
            "c.cfg",
            "--out",
            "m.ckpt",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("momentum"));

    let o = ravnet(
        &[
            "eval",
            "--checkpoint",
            "absent.ckpt",
            "--manifest",
            "d/manifest.csv",
            "--report",
            "r.csv",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let o = ravnet(
        &[
            "eval",
            "--checkpoint",
            "junk.ckpt",
            "--manifest",
            "d/manifest.csv",
            "--report",
            "r.csv",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("r.csv").exists());
}

#[test]
fn synth_writes_pairs_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "synth",
        "--count",
        "5",
        "--size",
        "24",
        "--seed",
        "9",
        "--out-dir",
        "d",
    ];
    let o = ravnet(&args, dir.path());
    assert_eq!(o.status.code(), Some(0));
    let d = dir.path().join("d");
    let mut names: Vec<_> = std::fs::read_dir(&d)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 11);
    assert_eq!(names.iter().filter(|n| n.ends_with(".husl")).count(), 5);
    assert_eq!(names.iter().filter(|n| n.ends_with(".msk")).count(), 5);

    let snapshot: Vec<Vec<u8>> = names
        .iter()
        .map(|n| std::fs::read(d.join(n)).unwrap())
        .collect();
    assert_eq!(ravnet(&args, dir.path()).status.code(), Some(0));
    for (n, before) in names.iter().zip(&snapshot) {
        assert_eq!(&std::fs::read(d.join(n)).unwrap(), before, "{n} changed");
    }
}

#[test]
fn gradcheck_tensor_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ravnet(
        &["gradcheck", "--module", "tensor", "--seed", "1"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("matmul"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn pipeline_trains_evaluates_and_predicts() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let o = ravnet(args, dir.path());
        assert_eq!(
            o.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        o
    };
    run(&[
        "synth",
        "--count",
        "8",
        "--size",
        "16",
        "--seed",
        "4",
        "--out-dir",
        "d",
    ]);
    run(&[
        "preprocess",
        "--manifest",
        "d/manifest.csv",
        "--out-dir",
        "p",
        "--split-seed",
        "2",
    ]);
    for f in ["train.csv", "val.csv", "test.csv", "phantom_0000.png"] {
        assert!(dir.path().join("p").join(f).exists(), "{f}");
    }

    std::fs::write(
        dir.path().join("run.cfg"),
        "levels = 2\nbase_channels = 4\nmax_epochs = 9\nlr = 1e-3\n",
    )
    .unwrap();
    let train = [
        "train",
        "--manifest",
        "p/train.csv",
        "--val-manifest",
        "p/val.csv",
        "--config",
        "run.cfg",
        "--max-epochs",
        "2",
        "--out",
        "m.ckpt",
    ];
    let o = run(&train);
    assert!(stdout(&o).contains("trained 2 epochs"));
    let history = std::fs::read_to_string(dir.path().join("m.ckpt.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(dir.path().join("m.ckpt.last").exists());

    let ckpt = std::fs::read(dir.path().join("m.ckpt")).unwrap();
    run(&train);
    assert_eq!(std::fs::read(dir.path().join("m.ckpt")).unwrap(), ckpt);

    let o = run(&[
        "eval",
        "--checkpoint",
        "m.ckpt",
        "--manifest",
        "p/test.csv",
        "--report",
        "r.csv",
    ]);
    let text = stdout(&o);
    for key in ["accuracy=", "precision=", "dsc=", "jsc="] {
        assert!(text.contains(key));
    }
    let report = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert!(report.starts_with("sample_id,accuracy,precision,dsc,jsc"));

    run(&[
        "predict",
        "--checkpoint",
        "m.ckpt",
        "--image",
        "d/phantom_0000.husl",
        "--out",
        "mask.png",
    ]);
    let img = image::open(dir.path().join("mask.png")).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (16, 16));
    assert!(img.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
}
