use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mmalign"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("MMALIGN_THREADS").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_small(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("data{n}_{seed}"));
    ok(&[
        "gen",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--set",
        "spec.grid_size=4",
        "--set",
        "spec.tokens=12",
        "--out",
        p(&out),
    ]);
    out
}

fn pretrain_small(data: &Path, out: &Path, loss: &str) -> String {
    ok(&[
        "pretrain", "--data", p(data), "--out", p(out), "--loss", loss, "--d", "8", "--batch", "8", "--epochs", "3",
        "--warmup", "1", "--lr", "1e-3",
    ])
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_small(dir.path(), 20, 7);
    let b = dir.path().join("again");
    ok(&[
        "gen", "--n", "20", "--seed", "7", "--set", "spec.grid_size=4", "--set", "spec.tokens=12", "--out", p(&b),
    ]);
    assert_eq!(
        fs::read(a.join("materials.jsonl")).unwrap(),
        fs::read(b.join("materials.jsonl")).unwrap()
    );
    assert_eq!(fs::read_to_string(a.join("materials.jsonl")).unwrap().lines().count(), 20);
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("command = gen"));
    assert!(manifest.contains("spec.grid_size = 4"));
}

#[test]
fn gen_rejects_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["gen", "--n", "0", "--out", p(dir.path())]), 2);
}

#[test]
fn config_file_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.cfg");
    fs::write(&cfg, "# small\nn = 5\nseed = 3\nspec.grid_size = 4\nspec.tokens = 8\n").unwrap();
    let out = dir.path().join("d");
    ok(&["gen", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(fs::read_to_string(out.join("materials.jsonl")).unwrap().lines().count(), 5);
    ok(&["gen", "--config", p(&cfg), "--n", "6", "--out", p(&out)]);
    assert_eq!(fs::read_to_string(out.join("materials.jsonl")).unwrap().lines().count(), 6);
    assert_eq!(code(&["gen", "--set", "bogus=1", "--out", p(&out)]), 2);
    assert_eq!(code(&["gen", "--config", p(&dir.path().join("missing.cfg")), "--out", p(&out)]), 3);
}

#[test]
fn pretrain_validation_and_io_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), 12, 1);
    let out = dir.path().join("run");
    assert_eq!(
        code(&["pretrain", "--data", p(&data), "--out", p(&out), "--loss", "tensorclip", "--batch", "1"]),
        2
    );
    assert_eq!(code(&["pretrain", "--data", p(&data), "--out", p(&out), "--loss", "nope"]), 2);
    let missing = dir.path().join("nowhere");
    assert_eq!(
        code(&["pretrain", "--data", p(&missing), "--out", p(&out), "--preset", "paper-pretrain"]),
        3
    );
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    for line in [
        "batch_size = 360",
        "epochs = 500",
        "peak_lr = 0.0001",
        "weight_decay = 0.0005",
        "warmup_epochs = 10",
    ] {
        assert!(manifest.contains(line), "{line} missing from manifest");
    }
}

#[test]
fn pretrain_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), 24, 2);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let stdout = pretrain_small(&data, &a, "anchored");
    assert!(stdout.contains("final loss"));
    pretrain_small(&data, &b, "anchored");
    for f in ["checkpoint.mmck", "metrics.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,loss,lr,top1_retrieval\n"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn eval_screen_export_project() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), 40, 3);
    let run_dir = dir.path().join("run");
    pretrain_small(&data, &run_dir, "clip_dos");
    let ckpt = run_dir.join("checkpoint.mmck");

    let ev = dir.path().join("eval");
    ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--split", "test", "--k", "1,2", "--out", p(&ev)]);
    let csv = fs::read_to_string(ev.join("retrieval.csv")).unwrap();
    assert!(csv.starts_with("pair,k,accuracy\n"));
    assert!(csv.contains("crystal->dos,2,"));
    assert_eq!(
        code(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--k", "0", "--out", p(&ev)]),
        2
    );

    let sc = dir.path().join("screen");
    let index = dir.path().join("lib.mmix");
    ok(&[
        "screen", "--ckpt", p(&ckpt), "--library", p(&data), "--targets", p(&data), "--n", "1,5,10", "--save-index",
        p(&index), "--out", p(&sc),
    ]);
    assert_eq!(&fs::read(&index).unwrap()[..4], b"MMIX");
    let mut rdr = csv_rows(&sc.join("screening.csv"));
    let header = rdr.remove(0);
    assert_eq!(header, "target_id,n,best_candidate,best_mae,nearest_id,nearest_similarity");
    assert_eq!(rdr.len(), 4 * 3);
    for t in rdr.chunks(3) {
        let maes: Vec<f64> = t.iter().map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
        assert!(maes.windows(2).all(|w| w[1] <= w[0]), "{maes:?}");
    }
    assert_eq!(
        code(&["screen", "--ckpt", p(&ckpt), "--library", p(&data), "--targets", p(&data), "--n", "1000", "--out", p(&sc)]),
        2
    );

    let ex = dir.path().join("export");
    ok(&["export", "--ckpt", p(&ckpt), "--data", p(&data), "--sample", "10", "--seed", "4", "--out", p(&ex)]);
    let table = ex.join("embeddings.csv");
    let rows = csv_rows(&table);
    assert_eq!(rows.len(), 11);
    assert!(rows[0].starts_with("id,formation_energy,gap,e0,"));
    assert_eq!(
        code(&["export", "--ckpt", p(&ckpt), "--data", p(&data), "--sample", "41", "--out", p(&ex)]),
        2
    );

    let pr = dir.path().join("proj");
    ok(&["project", "--table", p(&table), "--out", p(&pr)]);
    let proj = csv_rows(&pr.join("projection.csv"));
    assert_eq!(proj[0], "id,x,y");
    assert_eq!(proj.len(), 11);
}

#[test]
fn finetune_scratch_and_pretrained() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), 30, 5);
    let run_dir = dir.path().join("run");
    pretrain_small(&data, &run_dir, "clip_dos");
    let common = ["--data", p(&data), "--property", "gap", "--epochs", "4", "--batch", "8"];
    let scratch = dir.path().join("ft0");
    let mut args = vec!["finetune", "--from-scratch", "--d", "8", "--out", p(&scratch)];
    args.extend(common);
    ok(&args);
    let ckpt = run_dir.join("checkpoint.mmck");
    let pre = dir.path().join("ft1");
    let mut args = vec!["finetune", "--ckpt", p(&ckpt), "--sweep", "1e-3,1e-4", "--out", p(&pre)];
    args.extend(common);
    let stdout = ok(&args);
    assert!(stdout.contains("test MAE"));
    let report = fs::read_to_string(pre.join("finetune.csv")).unwrap();
    assert!(report.starts_with("property,init,seed,best_lr,best_epoch,best_val_mae,test_mae\ngap,pretrained,"));
    assert_eq!(csv_rows(&pre.join("val_history.csv")).len(), 1 + 2 * 4);
    let mut args = vec!["finetune", "--from-scratch", "--out", p(&pre), "--data", p(&data), "--property", "bulk"];
    args.extend(["--epochs", "4"]);
    assert_eq!(code(&args), 2);
}

#[test]
fn thread_env_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["gen", "--n", "2", "--out", p(dir.path())])
        .env("MMALIGN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args(["gen", "--n", "2", "--set", "spec.grid_size=4", "--out", p(dir.path())])
        .env("MMALIGN_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
}

fn csv_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}
