use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use silora::cli::{run, BUNDLE_FILE, CHECKPOINT_FILE, LOSS_FILE, RUN_RECORD_FILE};
use silora::config::RunConfig;
use silora::report::EvalReport;

fn args(parts: &[&str]) -> Vec<String> {
    std::iter::once("silora")
        .chain(parts.iter().copied())
        .map(String::from)
        .collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Content hashes of every file under `root`, keyed by relative path.
fn tree_hashes(root: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    hex::encode(Sha256::digest(bytes)),
                );
            }
        }
    }
    out
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
}

fn fixture(extra: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    assert_eq!(
        run(args(&[
            "synth",
            "--n",
            "10",
            "--size",
            "16",
            "--seed",
            "3",
            "--out",
            p(&data)
        ])),
        0
    );
    let config = root.join("run.toml");
    std::fs::write(
        &config,
        format!(
            "seed = 1\n[train]\nepochs = 2\nlr = 0.001\n[data]\nroot = \"{}\"\nimage_size = 16\n{extra}",
            data.display()
        ),
    )
    .unwrap();
    Fixture {
        _dir: dir,
        root,
        data,
        config,
    }
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let f = fixture("");
    let before = tree_hashes(&f.data);
    let (a, b) = (f.root.join("a"), f.root.join("b"));
    assert_eq!(run(args(&["train", "--config", p(&f.config), "--out", p(&a)])), 0);
    assert_eq!(
        run(args(&["--json", "train", "--config", p(&f.config), "--out", p(&b)])),
        0
    );
    for name in [BUNDLE_FILE, CHECKPOINT_FILE, LOSS_FILE, RUN_RECORD_FILE] {
        assert!(a.join(name).is_file(), "{name}");
    }
    assert_eq!(
        std::fs::read(a.join(CHECKPOINT_FILE)).unwrap(),
        std::fs::read(b.join(CHECKPOINT_FILE)).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join(LOSS_FILE)).unwrap(),
        std::fs::read(b.join(LOSS_FILE)).unwrap()
    );
    let loss = std::fs::read_to_string(a.join(LOSS_FILE)).unwrap();
    assert_eq!(loss.lines().next(), Some("epoch,step,loss"));
    assert_eq!(loss.lines().count(), 3);
    assert_eq!(tree_hashes(&f.data), before);

    let record: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join(RUN_RECORD_FILE)).unwrap()).unwrap();
    assert_eq!(record["seed"], 1);
    let snapshot: RunConfig = serde_json::from_value(record["config"].clone()).unwrap();
    assert_eq!(snapshot.train.epochs, 2);

    let c = f.root.join("c");
    assert_eq!(
        run(args(&[
            "train",
            "--config",
            p(&f.config),
            "--seed",
            "2",
            "--out",
            p(&c)
        ])),
        0
    );
    assert_ne!(
        std::fs::read(a.join(CHECKPOINT_FILE)).unwrap(),
        std::fs::read(c.join(CHECKPOINT_FILE)).unwrap()
    );
}

#[test]
fn intermediate_checkpoints() {
    let f = fixture("[lora]\nbogus = 1\n");
    // An unknown key is a config error.
    assert_eq!(
        run(args(&[
            "train",
            "--config",
            p(&f.config),
            "--out",
            p(&f.root.join("x"))
        ])),
        2
    );
    let cfg = f.root.join("every.toml");
    std::fs::write(
        &cfg,
        format!(
            "[train]\nepochs = 3\ncheckpoint_every = 1\n[data]\nroot = \"{}\"\nimage_size = 16\n",
            f.data.display()
        ),
    )
    .unwrap();
    let out = f.root.join("every");
    assert_eq!(run(args(&["train", "--config", p(&cfg), "--out", p(&out)])), 0);
    assert!(out.join("checkpoint-epoch001.silora").is_file());
    assert!(out.join("checkpoint-epoch002.silora").is_file());
    assert!(!out.join("checkpoint-epoch003.silora").exists());
}

#[test]
fn config_errors_exit_2_and_name_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlr = -1\nbatch_size = 0\n").unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(args(&["train", "--config", p(&cfg), "--out", p(&out)])), 2);
    let err = RunConfig::from_file(&cfg).unwrap_err().to_string();
    for key in ["data.root", "train.lr", "train.batch_size"] {
        assert!(err.contains(key), "{err}");
    }
    assert_eq!(run(args(&["train", "--out", p(&out)])), 2);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[data]\nroot = \"/nonexistent/silora\"\n").unwrap();
    assert_eq!(
        run(args(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("o"))])),
        3
    );
}

#[test]
fn eval_predict_and_plot() {
    let f = fixture("");
    let run_dir = f.root.join("run");
    assert_eq!(run(args(&["train", "--config", p(&f.config), "--out", p(&run_dir)])), 0);
    let ckpt = run_dir.join(CHECKPOINT_FILE);
    let eval_dir = f.root.join("eval");
    assert_eq!(
        run(args(&[
            "eval",
            "--checkpoint",
            p(&ckpt),
            "--data",
            p(&f.data),
            "--out",
            p(&eval_dir),
            "--name",
            "base"
        ])),
        0
    );
    let base = eval_dir.join("base.json");
    assert_eq!(
        run(args(&[
            "eval",
            "--checkpoint",
            p(&ckpt),
            "--data",
            p(&f.data),
            "--baseline",
            p(&base),
            "--out",
            p(&eval_dir),
        ])),
        0
    );
    let rep = EvalReport::load_json(&eval_dir.join("report.json")).unwrap();
    let opts = silora::data::LoadOptions {
        image_size: 16,
        tolerate_gray: false,
    };
    let test = silora::data::load_dataset(&f.data, "test", opts).unwrap();
    assert_eq!(rep.per_image.len(), test.len());
    assert_eq!(
        rep.aggregate.relative_f1.map(silora::metrics::two_decimals),
        Some(100.0)
    );
    assert_eq!(
        rep.aggregate.relative_miou.map(silora::metrics::two_decimals),
        Some(100.0)
    );
    let table = std::fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    assert!(table.lines().nth(1).unwrap().ends_with("100.00,100.00"), "{table}");
    assert!(eval_dir.join("report_boxplot.csv").is_file());

    let image = std::fs::read_dir(f.data.join("images"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let mask = f.root.join("pred").join("m.png");
    assert_eq!(
        run(args(&[
            "predict",
            "--checkpoint",
            p(&ckpt),
            "--image",
            p(&image),
            "--out",
            p(&mask)
        ])),
        0
    );
    let grey = image::open(&mask).unwrap().to_luma8();
    assert_eq!(grey.dimensions(), (16, 16));
    assert!(grey.pixels().all(|px| px.0[0] == 0 || px.0[0] == 255));

    let figs = f.root.join("figs");
    assert_eq!(
        run(args(&[
            "plot",
            p(&eval_dir.join("report_boxplot.csv")),
            "--out",
            p(&figs)
        ])),
        0
    );
    let svgs: Vec<_> = std::fs::read_dir(&figs).unwrap().collect();
    assert_eq!(svgs.len(), silora::metrics::Metric::ALL.len());
    assert_eq!(
        run(args(&["plot", p(&eval_dir.join("report.csv")), "--out", p(&figs)])),
        3
    );
}

#[test]
fn eval_against_another_bundle_fails() {
    let f = fixture("");
    let run_dir = f.root.join("run");
    assert_eq!(run(args(&["train", "--config", p(&f.config), "--out", p(&run_dir)])), 0);
    let other_cfg = f.root.join("other.toml");
    std::fs::write(
        &other_cfg,
        format!(
            "[backbone]\nseed = 9\n[train]\nepochs = 1\n[data]\nroot = \"{}\"\nimage_size = 16\n",
            f.data.display()
        ),
    )
    .unwrap();
    let other = f.root.join("other");
    assert_eq!(run(args(&["train", "--config", p(&other_cfg), "--out", p(&other)])), 0);
    let code = run(args(&[
        "eval",
        "--checkpoint",
        p(&run_dir.join(CHECKPOINT_FILE)),
        "--bundle",
        p(&other.join(BUNDLE_FILE)),
        "--data",
        p(&f.data),
        "--out",
        p(&f.root.join("e")),
    ]));
    assert_eq!(code, 3);
}

#[test]
fn ablation_table_has_four_rows_in_order() {
    let f = fixture("");
    let out = f.root.join("abl");
    assert_eq!(run(args(&["ablate", "--config", p(&f.config), "--out", p(&out)])), 0);
    let text = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "mixup,latent_noise,f1,relative_f1,miou,relative_miou,data_order_hash"
    );
    assert_eq!(lines.len(), 5);
    let flags: Vec<(&str, &str)> = lines[1..]
        .iter()
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[0], c[1])
        })
        .collect();
    assert_eq!(flags, [("No", "No"), ("No", "Yes"), ("Yes", "No"), ("Yes", "Yes")]);
    let first: Vec<&str> = lines[1].split(',').collect();
    assert_eq!((first[3], first[5]), ("100.00", "100.00"));
    let hashes: Vec<&str> = lines[1..].iter().map(|l| l.rsplit(',').next().unwrap()).collect();
    assert!(hashes.iter().all(|h| *h == hashes[0] && h.len() == 64));

    let figs = f.root.join("figs");
    assert_eq!(run(args(&["plot", p(&out.join("ablation.csv")), "--out", p(&figs)])), 0);
    assert_eq!(std::fs::read_dir(&figs).unwrap().count(), 1);
}
