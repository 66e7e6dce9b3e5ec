use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rws::data::{load_checkpoint, save_checkpoint, Checkpoint};
use rws::layers::SbnLayer;
use rws::numerics::sigmoid;
use rws::oracle::{exact_log_marginal, EnumerationBudget};
use rws::training::OptimizerState;
use rws::{GenerativeModel, InferenceModel, Layer, RngStream, TrainConfig};
use tempfile::TempDir;

fn rws(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rws"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rws(args);
    assert!(
        out.status.success(),
        "rws {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn bars_config(dir: &Path, arch: &str, n_valid: usize, extra_train: &str) -> PathBuf {
    let text = format!(
        r#"arch = "{arch}"
valid_k = 50

[data.bars]
side = 3
n_train = 400
n_valid = {n_valid}
seed = 7

[train]
k_train = 5
learning_rate = 0.01
momentum = 0.9
batch_size = 25
q_update_mode = "both"
lr_decay_per_epoch = 1.0
epochs = 30
seed = 3
{extra_train}
"#
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

/// Every file under `dir`, relative path → bytes.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn train_writes_one_metrics_row_per_epoch_and_improves() {
    let tmp = TempDir::new().unwrap();
    let cfg = bars_config(tmp.path(), "SBN/SBN 4-8", 0, "");
    let out = tmp.path().join("out");
    ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
    let rows = csv_rows(&out.join("metrics.csv"));
    assert_eq!(rows.len(), 30);
    assert!(rows.iter().all(|r| r[1] == "train"));
    let first: f64 = rows[0][2].parse().unwrap();
    let last: f64 = rows[29][2].parse().unwrap();
    assert!(last > first, "train LL went from {first} to {last}");
    for e in [0, 1, 30] {
        assert!(out
            .join(format!("checkpoints/epoch-{e:04}/manifest.json"))
            .exists());
    }
    assert!(out.join("checkpoints/best/manifest.json").exists());
    assert_eq!(
        load_checkpoint(out.join("checkpoints/epoch-0030"))
            .unwrap()
            .epoch,
        30
    );
}

#[test]
fn train_with_validation_keeps_best_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let cfg = bars_config(tmp.path(), "SBN/SBN 4-8", 200, "");
    let out = tmp.path().join("out");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--epochs",
        "6",
    ]);
    let rows = csv_rows(&out.join("metrics.csv"));
    assert_eq!(rows.len(), 12);
    let valid: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r[1] == "valid")
        .map(|r| (r[0].parse().unwrap(), r[2].parse().unwrap()))
        .collect();
    assert_eq!(valid.len(), 6);
    let best_epoch = valid.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
    let best = fs::read(out.join("checkpoints/best/manifest.json")).unwrap();
    let at =
        fs::read(out.join(format!("checkpoints/epoch-{best_epoch:04}/manifest.json"))).unwrap();
    assert_eq!(best, at);
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let cfg = bars_config(tmp.path(), "SBN/SBN 4-8", 0, "");
    let out = tmp.path().join("out");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--epochs",
        "0",
    ]);
    let dirs: Vec<String> = fs::read_dir(out.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(dirs, vec!["epoch-0000".to_string()]);
    assert!(csv_rows(&out.join("metrics.csv")).is_empty());
}

#[test]
fn invalid_configs_are_rejected_before_any_output() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let bad_arch = bars_config(tmp.path(), "SBN/SBN 4-x", 0, "");
    let r = rws(&["train", "--config", s(&bad_arch), "--out", s(&out)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("width"));
    assert!(!out.exists());

    let unknown = bars_config(tmp.path(), "SBN/SBN 4-8", 0, "warmup = 3");
    let r = rws(&["train", "--config", s(&unknown), "--out", s(&out)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("warmup"));
    assert!(!out.exists());

    let cfg = bars_config(tmp.path(), "SBN/SBN 4-8", 0, "");
    let r = rws(&["train", "--config", s(&cfg), "--out", s(&out), "--k", "0"]);
    assert!(!r.status.success());
    assert!(!out.exists());
}

#[test]
fn training_is_bit_reproducible_and_independent_of_workers() {
    let tmp = TempDir::new().unwrap();
    let cfg = bars_config(tmp.path(), "SBN/AR-SBN 3-6", 100, "");
    let run = |name: &str, workers: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "--workers",
            workers,
            "train",
            "--config",
            s(&cfg),
            "--out",
            s(&out),
            "--epochs",
            "4",
        ]);
        snapshot(&out)
    };
    let a = run("a", "1");
    let b = run("b", "1");
    let c = run("c", "3");
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = bars_config(tmp.path(), "SBN/SBN 4-8", 100, "");
    let full = tmp.path().join("full");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&full),
        "--epochs",
        "6",
    ]);
    let split = tmp.path().join("split");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&split),
        "--epochs",
        "3",
    ]);
    let resume = split.join("checkpoints/epoch-0003");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&split),
        "--epochs",
        "6",
        "--resume",
        s(&resume),
    ]);
    // checkpoints from before the resume carry the shorter run's config
    let after = |dir: &Path| {
        snapshot(dir)
            .into_iter()
            .filter(|(p, _)| {
                let p = p.to_str().unwrap();
                p == "metrics.csv"
                    || ["epoch-0004", "epoch-0005", "epoch-0006"]
                        .iter()
                        .any(|e| p.contains(e))
            })
            .collect::<Vec<_>>()
    };
    let (a, b) = (after(&full), after(&split));
    assert!(a
        .iter()
        .any(|(p, _)| p.ends_with("epoch-0006/manifest.json")));
    assert_eq!(a, b);
}

/// A tiny trained-ish pair: SBN/SBN 2-3 on 2×2 bars.
fn tiny_checkpoint(tmp: &Path) -> (PathBuf, PathBuf) {
    let bars = tmp.join("bars.amat");
    ok(&[
        "make-bars",
        "--side",
        "2",
        "--n",
        "60",
        "--seed",
        "1",
        "--out",
        s(&bars),
    ]);
    let cfg = tmp.join("tiny.toml");
    fs::write(
        &cfg,
        format!(
            r#"arch = "SBN/SBN 2-3"
[data]
train = "{}"
[train]
k_train = 5
learning_rate = 0.05
momentum = 0.5
batch_size = 10
q_update_mode = "both"
lr_decay_per_epoch = 1.0
epochs = 5
seed = 2
"#,
            s(&bars)
        ),
    )
    .unwrap();
    let out = tmp.join("tiny");
    ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
    (out.join("checkpoints/epoch-0005"), bars)
}

fn field(report: &str, key: &str) -> f64 {
    let start = report.find(&format!("{key}=")).unwrap() + key.len() + 1;
    report[start..]
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn eval_with_exact_posterior_matches_enumeration() {
    let tmp = TempDir::new().unwrap();
    let (ckpt, bars) = tiny_checkpoint(tmp.path());
    let report = ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&bars),
        "--k",
        "10",
        "--proposal",
        "exact",
    ]);
    let p = load_checkpoint(&ckpt).unwrap().p;
    let data = rws::data::load_amat(&bars, rws::data::Split::Test).unwrap();
    let b = EnumerationBudget::default();
    let truth = data
        .rows()
        .map(|x| exact_log_marginal(&p, x, &b).unwrap())
        .sum::<f64>()
        / data.len() as f64;
    assert!(
        (field(&report, "mean_ll") - truth).abs() < 1e-6,
        "{report} vs {truth}"
    );
}

#[test]
fn eval_is_reproducible_and_brackets_its_estimate() {
    let tmp = TempDir::new().unwrap();
    let (ckpt, bars) = tiny_checkpoint(tmp.path());
    let args = [
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&bars),
        "--k",
        "200",
        "--seed",
        "4",
    ];
    let a = ok(&args);
    assert_eq!(a, ok(&args));
    let (m, n) = (field(&a, "mean_ll"), field(&a, "n"));
    assert_eq!(n, 60.0);
    let ci = &a[a.find('[').unwrap() + 1..a.find(']').unwrap()];
    let (lo, hi) = ci.split_once(", ").unwrap();
    let (lo, hi): (f64, f64) = (lo.parse().unwrap(), hi.parse().unwrap());
    assert!(lo < m && m < hi, "{a}");

    let mismatch = tmp.path().join("wide.amat");
    fs::write(&mismatch, "0 1 0 1 1\n").unwrap();
    let r = rws(&["eval", "--checkpoint", s(&ckpt), "--data", s(&mismatch)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("visible units"));
}

/// A pair whose visible probabilities do not depend on the latent state.
fn fixed_visible_checkpoint(dir: &Path, visible: usize, bias: Vec<f64>) -> PathBuf {
    let top = Layer::Sbn(SbnLayer::from_params(0, 2, vec![], vec![0.3, -0.2]).unwrap());
    let bottom =
        Layer::Sbn(SbnLayer::from_params(2, visible, vec![0.0; 2 * visible], bias).unwrap());
    let p = GenerativeModel::new(vec![top, bottom]).unwrap();
    let q = InferenceModel::new(visible, vec![Layer::Sbn(SbnLayer::zeros(visible, 2))]).unwrap();
    let ckpt = Checkpoint {
        optimizer: OptimizerState::zeros(&p, &q),
        p,
        q,
        config: TrainConfig::default(),
        rng: RngStream::new(0, 1).state(),
        epoch: 0,
    };
    let path = dir.join("fixed");
    save_checkpoint(&path, &ckpt).unwrap();
    path
}

fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        let end = pos
            + bytes[pos..]
                .iter()
                .position(|b| b.is_ascii_whitespace())
                .unwrap();
        fields.push(String::from_utf8(bytes[pos..end].to_vec()).unwrap());
        pos = end + 1;
    }
    assert_eq!(fields[0], "P5");
    assert_eq!(fields[3], "255");
    (
        fields[1].parse().unwrap(),
        fields[2].parse().unwrap(),
        bytes[pos..].to_vec(),
    )
}

#[test]
fn sample_writes_probabilities_not_bits() {
    let tmp = TempDir::new().unwrap();
    let bias: Vec<f64> = (0..6).map(|i| -1.5 + 0.6 * i as f64).collect();
    let ckpt = fixed_visible_checkpoint(tmp.path(), 6, bias.clone());

    let one = tmp.path().join("one.pgm");
    ok(&[
        "sample",
        "--checkpoint",
        s(&ckpt),
        "--n",
        "1",
        "--dims",
        "2x3",
        "--out",
        s(&one),
    ]);
    let (w, h, px) = read_pgm(&one);
    assert_eq!((w, h), (3, 2));
    let expect: Vec<u8> = bias
        .iter()
        .map(|&b| (255.0 * sigmoid(b)).round() as u8)
        .collect();
    assert_eq!(px, expect);

    let grid = tmp.path().join("grid.pgm");
    ok(&[
        "sample",
        "--checkpoint",
        s(&ckpt),
        "--n",
        "4",
        "--dims",
        "2x3",
        "--out",
        s(&grid),
    ]);
    let (w, h, px) = read_pgm(&grid);
    assert_eq!((w, h), (7, 5));
    for (y0, x0) in [(0, 0), (0, 4), (3, 0), (3, 4)] {
        for y in 0..2 {
            assert_eq!(
                &px[(y0 + y) * w + x0..(y0 + y) * w + x0 + 3],
                &expect[y * 3..y * 3 + 3]
            );
        }
    }

    let r = rws(&["sample", "--checkpoint", s(&ckpt), "--out", s(&grid)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("--dims"));
}

#[test]
fn saturated_model_samples_identical_tiles_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (ckpt, _) = tiny_checkpoint(tmp.path());
    let a = tmp.path().join("a.pgm");
    let b = tmp.path().join("b.pgm");
    ok(&[
        "sample",
        "--checkpoint",
        s(&ckpt),
        "--n",
        "9",
        "--out",
        s(&a),
        "--seed",
        "5",
    ]);
    ok(&[
        "sample",
        "--checkpoint",
        s(&ckpt),
        "--n",
        "9",
        "--out",
        s(&b),
        "--seed",
        "5",
    ]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let sat = fixed_visible_checkpoint(tmp.path(), 4, vec![40.0, -40.0, -40.0, 40.0]);
    ok(&[
        "sample",
        "--checkpoint",
        s(&sat),
        "--n",
        "9",
        "--out",
        s(&a),
    ]);
    let (w, h, px) = read_pgm(&a);
    assert_eq!((w, h), (8, 8));
    for t in 0..9 {
        let (y0, x0) = (t / 3 * 3, t % 3 * 3);
        assert_eq!([px[y0 * w + x0], px[y0 * w + x0 + 1]], [255, 0]);
        assert_eq!([px[(y0 + 1) * w + x0], px[(y0 + 1) * w + x0 + 1]], [0, 255]);
    }
}

#[test]
fn analyze_modes_write_their_reports() {
    let tmp = TempDir::new().unwrap();
    let (ckpt, bars) = tiny_checkpoint(tmp.path());
    let base = [
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&bars),
        "--datapoints",
        "5",
        "--resamples",
        "50",
    ];
    let run = |mode: &str, extra: &[&str], name: &str| {
        let out = tmp.path().join(name);
        let mut args = vec!["analyze", "--mode", mode, "--out", s(&out)];
        args.extend_from_slice(&base);
        args.extend_from_slice(extra);
        ok(&args);
        fs::read_to_string(&out).unwrap()
    };
    let sizes = ["--reference-k", "40", "--sizes", "1,5,40"];

    let g = run("grad-bias", &sizes, "g.csv");
    assert!(g.starts_with("size,bias_l2,std,n_resamples\n"));
    assert_eq!(g, run("grad-bias", &sizes, "g2.csv"));

    // every replicate is the reference itself at s = reference_k
    let ident = run("ll-bias", &[&sizes[..], &["--identity"]].concat(), "i.csv");
    let last: Vec<f64> = ident
        .lines()
        .last()
        .unwrap()
        .split(',')
        .map(|c| c.parse().unwrap())
        .collect();
    assert_eq!(&last[..3], &[40.0, 0.0, 0.0]);

    // an exact-posterior proposal has no log-likelihood bias at any size
    let exact = run(
        "ll-bias",
        &[&sizes[..], &["--proposal", "exact"]].concat(),
        "e.csv",
    );
    for line in exact.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(cols[1].abs() < 1e-12 && cols[2] < 1e-12, "{line}");
    }

    let curve = run("ll-vs-k", &["--sizes", "1,4,16"], "k.csv");
    assert!(curve.starts_with("k,mean_ll,se\n"));
    assert_eq!(curve.lines().count(), 4);
}

#[test]
fn analyze_surfaces_enumeration_budget_violations() {
    let tmp = TempDir::new().unwrap();
    let bars = tmp.path().join("bars.amat");
    ok(&["make-bars", "--side", "3", "--n", "10", "--out", s(&bars)]);
    let top = Layer::Sbn(SbnLayer::zeros(0, 20));
    let bottom = Layer::Sbn(SbnLayer::zeros(20, 9));
    let p = GenerativeModel::new(vec![top, bottom]).unwrap();
    let q = InferenceModel::new(9, vec![Layer::Sbn(SbnLayer::zeros(9, 20))]).unwrap();
    let ckpt = Checkpoint {
        optimizer: OptimizerState::zeros(&p, &q),
        p,
        q,
        config: TrainConfig::default(),
        rng: RngStream::new(0, 1).state(),
        epoch: 0,
    };
    let dir = tmp.path().join("wide");
    save_checkpoint(&dir, &ckpt).unwrap();
    let r = rws(&[
        "analyze",
        "--checkpoint",
        s(&dir),
        "--data",
        s(&bars),
        "--mode",
        "ll-bias",
        "--proposal",
        "exact",
        "--out",
        s(&tmp.path().join("x.csv")),
    ]);
    assert!(!r.status.success());
    assert!(
        String::from_utf8_lossy(&r.stderr).contains("budget"),
        "{}",
        String::from_utf8_lossy(&r.stderr)
    );
}

#[test]
fn make_bars_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a.amat");
    let b = tmp.path().join("b.amat");
    ok(&["make-bars", "--n", "50", "--seed", "9", "--out", s(&a)]);
    ok(&["make-bars", "--n", "50", "--seed", "9", "--out", s(&b)]);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 50);
    assert!(text.lines().all(|l| l.split_whitespace().count() == 9));
}
