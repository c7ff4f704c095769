use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const TINY_CONFIG: &str = "\
num_classes=3
channels=4,6,6
global_dim=8
keypoints=4,2
dlfs_channels=8,8
batch_size=6
epochs=2
lr=0.003
seed=3
";

fn dlfs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlfs"))
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

fn gen_tiny(dir: &Path) -> PathBuf {
    let o = dlfs(&[
        "gen-data", "--out", p(dir), "--classes", "3", "--seed", "5", "--train", "15", "--test", "6",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(stdout(&o).trim())
}

fn tree_hash(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, Sha256::digest(fs::read(&path).unwrap()).to_vec()));
            }
        }
    }
    out.sort();
    out
}

/// Generates a tiny dataset and trains on it; returns (dataset dir, run dir).
fn trained(root: &Path, ablate: &[&str]) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    if !data.exists() {
        gen_tiny(&data);
    }
    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let run = root.join(format!("run{}", ablate.join("_")));
    let mut args = vec!["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)];
    for a in ablate {
        args.extend(["--ablate", a]);
    }
    let o = dlfs(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    (data, run)
}

fn csv_rows(run: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(run.join("metrics.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn missing_out_is_a_usage_error() {
    let o = dlfs(&["gen-data", "--classes", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(dlfs(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(dlfs(&["gradcheck", "--seeds", "many"]).status.code(), Some(2));
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen_tiny(&tmp.path().join("a"));
    gen_tiny(&tmp.path().join("b"));
    let text = fs::read_to_string(&a).unwrap();
    assert!(text.contains("num_classes=3"));
    assert!(text.contains("count_val=3"));
    assert_eq!(tree_hash(&tmp.path().join("a")), tree_hash(&tmp.path().join("b")));
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, run) = trained(tmp.path(), &[]);
    for f in ["best.ckpt", "last.ckpt", "metrics.csv", "run.cfg"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let first = fs::read(run.join("metrics.csv")).unwrap();
    let best = fs::read(run.join("best.ckpt")).unwrap();
    let (_, again) = trained(tmp.path(), &[]);
    assert_eq!(fs::read(again.join("metrics.csv")).unwrap(), first);
    assert_eq!(fs::read(again.join("best.ckpt")).unwrap(), best);
    assert_eq!(csv_rows(&run).len(), 2);
}

#[test]
fn ablating_local_zeroes_local_losses() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, run) = trained(tmp.path(), &["local"]);
    for row in csv_rows(&run) {
        assert_eq!(row[4].parse::<f64>().unwrap(), 0.0);
        assert_eq!(row[5].parse::<f64>().unwrap(), 0.0);
    }
    let cfg = fs::read_to_string(run.join("run.cfg")).unwrap();
    assert!(cfg.contains("use_local=false"));
}

#[test]
fn bad_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_tiny(&tmp.path().join("data"));
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "colour=blue\n").unwrap();
    let out = tmp.path().join("run");
    let o = dlfs(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = dlfs(&["train", "--data", p(&data), "--out", p(&out), "--ablate", "everything"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_matches_logged_val_and_dumped_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = trained(tmp.path(), &[]);
    let preds = tmp.path().join("preds.tsv");
    let o = dlfs(&[
        "eval",
        "--checkpoint",
        p(&run.join("best.ckpt")),
        "--data",
        p(&data),
        "--split",
        "val",
        "--predictions",
        p(&preds),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mca: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("mean_class_accuracy "))
        .unwrap()
        .parse()
        .unwrap();

    // the best checkpoint is the first epoch reaching the best val_mca
    let logged = csv_rows(&run)
        .iter()
        .map(|r| r[7].parse::<f64>().unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    assert!((mca - logged).abs() < 1e-6, "{mca} vs {logged}");

    // recompute mean-class accuracy from the dumped predictions
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    for line in fs::read_to_string(&preds).unwrap().lines() {
        let f: Vec<usize> = line.split('\t').map(|v| v.parse().unwrap()).collect();
        totals[f[1]] += 1;
        hits[f[1]] += (f[1] == f[2]) as usize;
    }
    let recomputed = (0..3)
        .filter(|&c| totals[c] > 0)
        .map(|c| hits[c] as f64 / totals[c] as f64)
        .sum::<f64>()
        / totals.iter().filter(|&&t| t > 0).count() as f64;
    assert!((mca - recomputed).abs() < 1e-6);

    let missing = dlfs(&["eval", "--checkpoint", p(&run.join("nope.ckpt")), "--data", p(&data)]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn gradcheck_reports_one_line_per_check() {
    let o = dlfs(&["gradcheck", "--seeds", "0"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).is_empty());
    let o = dlfs(&["gradcheck", "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), dlfs::gradcheck::suite_components().len());
    assert!(lines.iter().all(|l| l.starts_with("PASS")));
}

#[test]
fn viz_writes_images() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = trained(tmp.path(), &[]);
    let manifest = fs::read_to_string(data.join("manifest.txt")).unwrap();
    let line = manifest.lines().find(|l| l.starts_with("test\t")).unwrap();
    let fields: Vec<&str> = line.split('\t').collect();
    let (rgb, d) = (data.join(fields[3]), data.join(fields[4]));
    let out = tmp.path().join("viz");
    let ck = run.join("best.ckpt");
    for (mode, file, magic, len) in [
        ("corr", "corr.pgm", "P5\n32 32\n255\n", 32 * 32),
        ("keypoints", "keypoints.ppm", "P6\n32 32\n255\n", 3 * 32 * 32),
    ] {
        let o = dlfs(&["viz", "--checkpoint", p(&ck), "--sample", p(&rgb), p(&d), "--out", p(&out), "--mode", mode]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let bytes = fs::read(out.join(file)).unwrap();
        assert_eq!(&bytes[..magic.len()], magic.as_bytes());
        assert_eq!(bytes.len(), magic.len() + len);
    }
    let o = dlfs(&[
        "viz", "--checkpoint", p(&ck), "--sample", p(&rgb), p(&tmp.path().join("none.dten")), "--out", p(&out), "--mode", "corr",
    ]);
    assert_eq!(o.status.code(), Some(1));
}
