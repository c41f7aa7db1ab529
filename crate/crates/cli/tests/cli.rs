use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nmrpm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmrpm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn generate(dir: &Path, name: &str, items: usize, size: usize, seed: u64) -> String {
    let out = dir.join(name);
    let o = nmrpm(&[
        "generate",
        "--config",
        "center",
        "--items",
        &items.to_string(),
        "--panel-size",
        &size.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.to_str().unwrap().to_string()
}

#[test]
fn generate_is_reproducible_and_certified() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "a.mrpm", 50, 32, 7);
    let b = generate(dir.path(), "b.mrpm", 50, 32, 7);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(dir.path().join("a.meta").exists());
    assert!(dir.path().join("a.manifest.json").exists());
    let o = nmrpm(&[
        "generate",
        "--items",
        "20",
        "--config",
        "shipped",
        "--threads",
        "3",
        "--out",
        &format!("{}/c.mrpm", dir.path().display()),
    ]);
    assert!(stdout(&o).contains("oracle pass rate 100.0"), "{}", stdout(&o));
}

#[test]
fn zero_items_gives_header_only_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = generate(dir.path(), "empty.mrpm", 0, 32, 1);
    assert_eq!(fs::metadata(path).unwrap().len(), 20);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = format!("{}/x.mrpm", dir.path().display());
    let o = nmrpm(&["generate", "--config", "spiral", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("center") && err.contains("up_down"), "{err}");

    assert_eq!(nmrpm(&["verify", "--suite", "everything"]).status.code(), Some(2));

    let data = generate(dir.path(), "small.mrpm", 10, 16, 1);
    let o = nmrpm(&[
        "train",
        "--data",
        &data,
        "--out-dir",
        &format!("{}/run", dir.path().display()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("16") && err.contains("32"), "{err}");
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "d.mrpm", 20, 32, 3);
    let run = |name: &str, epochs: &str| {
        let out = dir.path().join(name);
        let o = nmrpm(&[
            "train",
            "--data",
            &data,
            "--epochs",
            epochs,
            "--seed",
            "2",
            "--batch-items",
            "4",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };

    let untrained = run("zero", "0");
    let csv = fs::read_to_string(untrained.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
    assert!(csv.lines().nth(1).unwrap().starts_with("0,val,"));
    assert!(untrained.join("checkpoint.nmck").exists() && untrained.join("manifest.json").exists());

    let a = run("a", "2");
    let b = run("b", "2");
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("checkpoint.nmck")).unwrap(),
        fs::read(b.join("checkpoint.nmck")).unwrap()
    );

    let ckpt = a.join("checkpoint.nmck");
    let eval = |out: &str| {
        nmrpm(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            &data,
            "--out-dir",
            out,
        ])
    };
    let (e1, e2) = (
        format!("{}/e1", dir.path().display()),
        format!("{}/e2", dir.path().display()),
    );
    let (o1, o2) = (eval(&e1), eval(&e2));
    assert!(o1.status.success());
    assert_eq!(stdout(&o1), stdout(&o2));
    assert!(stdout(&o1).contains("Avg. Acc.") && stdout(&o1).contains("Center"));
    let report = fs::read_to_string(format!("{e1}/eval.csv")).unwrap();
    assert_eq!(report.lines().next().unwrap(), "items,accuracy,average,center");
    assert_eq!(report, fs::read_to_string(format!("{e2}/eval.csv")).unwrap());

    let paper = generate(dir.path(), "p.mrpm", 5, 160, 1);
    assert_eq!(
        nmrpm(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", &paper])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn verify_shapes_passes() {
    let o = nmrpm(&["verify", "--suite", "shapes"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out
        .lines()
        .filter(|l| l.starts_with("check=shapes."))
        .all(|l| l.contains("status=pass")));
    assert!(out.contains("summary checks=11 failed=0"), "{out}");
}
