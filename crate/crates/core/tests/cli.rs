use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.count=4",
    "data.test_count=2",
    "data.size=16",
    "data.patch=16",
    "data.stride=16",
    "bayes.channels=4",
    "bayes.iterations=5",
    "bayes.batch=2",
    "encoder.pretrain_iterations=3",
    "encoder.batch=2",
    "diffusion.T=5",
    "diffusion.iterations=5",
    "diffusion.batch=2",
    "eval.steps=4",
];

fn buff(dir: &Path, stage: &str, extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_buff"));
    cmd.arg(stage)
        .arg(format!("paths.work_dir={}", dir.display()))
        .args(TINY)
        .args(extra)
        .env_remove("BUFF_SEED")
        .env("RUST_LOG", "warn");
    cmd.output().unwrap()
}

fn ok(dir: &Path, stage: &str) {
    let out = buff(dir, stage, &[]);
    assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "run.log") {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn selfcheck_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), "selfcheck");
}

#[test]
fn list_keys_prints_defaults() {
    let out = Command::new(env!("CARGO_BIN_EXE_buff")).arg("--list-keys").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("refine.k=10\t"));
    assert!(text.contains("diffusion.lr=0.0002\t"));
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = buff(dir.path(), "selfcheck", &["refine.delta1=abc"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("refine.delta1"), "{}", stderr(&out));

    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "refine.k=10\nbogus.key=1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_buff"))
        .args(["selfcheck", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let msg = stderr(&out);
    assert!(msg.contains("bogus.key") && msg.contains("line 2"), "{msg}");
}

#[test]
fn missing_prerequisites_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = buff(dir.path(), "make-masks", &[]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("bayes.ckpt"), "{}", stderr(&out));

    ok(dir.path(), "train-bayes");
    let out = buff(dir.path(), "train-diff", &[]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("masks.bin"), "{}", stderr(&out));

    ok(dir.path(), "make-masks");
    ok(dir.path(), "train-diff");
    fs::remove_file(dir.path().join("checkpoints/diffusion.ckpt")).unwrap();
    let out = buff(dir.path(), "infer", &[]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("checkpoints/diffusion.ckpt"), "{}", stderr(&out));
}

#[test]
fn staged_pipeline_is_reproducible_and_eval_is_read_only() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for stage in ["train-bayes", "make-masks", "train-diff", "infer"] {
        ok(root, stage);
    }
    let masks = fs::read(root.join("masks/masks.bin")).unwrap();
    ok(root, "make-masks");
    assert_eq!(fs::read(root.join("masks/masks.bin")).unwrap(), masks);

    let before = snapshot(root);
    ok(root, "eval");
    let after = snapshot(root);
    for (path, bytes) in &before {
        assert_eq!(after.get(path), Some(bytes), "eval changed {}", path.display());
    }
    let csv = fs::read_to_string(root.join("outputs/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "image_id,psnr_db,ssim,ause");
    assert_eq!(lines.len(), 3);
    assert!(root.join("outputs/sr_0001.pgm").is_file());
    assert!(!root.join(".buff.lock").exists());

    let other = tempfile::tempdir().unwrap();
    ok(other.path(), "all");
    assert_eq!(snapshot(other.path()), snapshot(root));
}

#[test]
fn seed_env_var_selects_the_dataset() {
    let run = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        let out = Command::new(env!("CARGO_BIN_EXE_buff"))
            .arg("train-bayes")
            .arg(format!("paths.work_dir={}", dir.path().display()))
            .args(TINY)
            .env("BUFF_SEED", seed)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        fs::read(dir.path().join("dataset/train_hr.bin")).unwrap()
    };
    let a = run("5");
    assert_eq!(a, run("5"));
    assert_ne!(a, run("6"));
}

#[test]
fn lock_file_blocks_a_second_stage() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".buff.lock"), "1\n").unwrap();
    let out = buff(dir.path(), "train-bayes", &[]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("locked"), "{}", stderr(&out));
    assert!(!dir.path().join("dataset").exists());
}
