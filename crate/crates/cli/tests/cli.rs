use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use agcn::data::{save_dataset, Splits};
use agcn::{build_graph, Dataset, Matrix, Rng};
use serde_json::Value;

fn agcn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_agcn"))
}

fn run(args: &[&str]) -> Output {
    agcn().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Three planted communities of 20 nodes with noisy one-hot features.
fn write_toy(dir: &Path) {
    let n = 60;
    let mut rng = Rng::new(11);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if i / 20 == j / 20 { 0.25 } else { 0.01 };
            if rng.uniform() < p {
                edges.push((i, j, 1.0));
            }
        }
    }
    let mut x = Matrix::zeros(n, 6);
    for i in 0..n {
        x.set(i, i / 20, 1.0);
        x.set(i, 3 + rng.below(3), 1.0);
    }
    let labels = (0..n).map(|i| Some(i / 20)).collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for i in 0..n {
        match i % 20 {
            0 | 1 => train.push(i),
            2..=5 => val.push(i),
            _ => test.push(i),
        }
    }
    let ds = Dataset::new(
        "toy",
        build_graph(n, &edges).unwrap(),
        x,
        labels,
        Splits { train, val, test },
        3,
    )
    .unwrap();
    save_dataset(&ds, dir).unwrap();
}

struct Fixture {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let data = root.join("toy");
        write_toy(&data);
        Self { _tmp: tmp, data, root }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn data(&self) -> &str {
        self.data.to_str().unwrap()
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const QUICK: [&str; 6] = ["--runs", "2", "--epochs", "40", "--patience", "10"];

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["train", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    let fx = Fixture::new();
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["train"])), 1);
    assert_eq!(code(&run(&["train", "--dataset", fx.data(), "--bogus"])), 1);
    assert_eq!(code(&run(&["train", "--dataset", fx.data(), "--model", "gat"])), 1);
    for bad in [
        ["--dropout", "1.5"],
        ["--beta", "-1"],
        ["--beta-grid", "1:0:2"],
        ["--layers", "1"],
        ["--lr", "0"],
        ["--train-fraction", "2"],
    ] {
        let out = run(&["train", "--dataset", fx.data(), bad[0], bad[1]]);
        assert_eq!(code(&out), 1, "{bad:?}");
    }
}

#[test]
fn data_errors_exit_two() {
    let fx = Fixture::new();
    let missing = fx.root.join("nowhere");
    assert_eq!(code(&run(&["train", "--dataset", missing.to_str().unwrap()])), 2);

    let features = fx.data.join("features.bin");
    let bytes = fs::read(&features).unwrap();
    fs::write(&features, &bytes[..bytes.len() - 4]).unwrap();
    let out = run(&["train", "--dataset", fx.data(), "--out", fx.out("r").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("features.bin"));
}

#[test]
fn divergence_exits_three() {
    let fx = Fixture::new();
    let out = run(&[
        "train",
        "--dataset",
        fx.data(),
        "--lr",
        "1e300",
        "--runs",
        "1",
        "--out",
        fx.out("r").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_writes_reports_and_replays_exactly() {
    let fx = Fixture::new();
    let out_dir = fx.out("train");
    let mut args = vec!["train", "--dataset", fx.data(), "--out", out_dir.to_str().unwrap()];
    args.extend(QUICK);
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("test accuracy"));

    let report = read_json(&out_dir.join("train.json"));
    assert_eq!(report["config"]["command"], "train");
    assert_eq!(report["config"]["row_normalize"], true);
    assert_eq!(report["config"]["model"]["kind"], "agcn");
    assert_eq!(report["config"]["model"]["diffusion_mode"], "input-once");
    assert_eq!(report["config"]["model"]["layer_dims"], serde_json::json!([6, 16, 3]));
    let runs = report["per_run"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0]["seed"], 42);
    assert_eq!(runs[1]["seed"], 43);
    for r in runs {
        let history = out_dir.join(r["history_file"].as_str().unwrap());
        let text = fs::read_to_string(history).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_loss,val_accuracy,phi0,phi1,trace0,trace1\n"));
        assert_eq!(text.lines().count() - 1, r["stop_epoch"].as_u64().unwrap() as usize);
    }
    let csv = fs::read_to_string(out_dir.join("train.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let mean = runs.iter().map(|r| r["test_accuracy"].as_f64().unwrap()).sum::<f64>() / 2.0;
    assert!((report["mean"].as_f64().unwrap() - mean).abs() < 1e-12);

    let replay_dir = fx.out("replay");
    let out = run(&[
        "train",
        "--replay",
        out_dir.join("train.json").to_str().unwrap(),
        "--out",
        replay_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for file in [
        "train.json",
        "train.csv",
        "train_history_seed42.csv",
        "train_history_seed43.csv",
    ] {
        assert_eq!(
            fs::read(out_dir.join(file)).unwrap(),
            fs::read(replay_dir.join(file)).unwrap(),
            "{file}"
        );
    }

    // replaying under another command is a usage error
    let out = run(&["grid-search", "--replay", out_dir.join("train.json").to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gcn_defaults_to_per_layer() {
    let fx = Fixture::new();
    let out_dir = fx.out("gcn");
    let mut args = vec![
        "train",
        "--dataset",
        fx.data(),
        "--model",
        "gcn",
        "--out",
        out_dir.to_str().unwrap(),
    ];
    args.extend([
        "--runs",
        "1",
        "--epochs",
        "5",
        "--layers",
        "3",
        "--hidden",
        "8",
        "--row-normalize",
        "off",
    ]);
    assert_eq!(code(&run(&args)), 0);
    let report = read_json(&out_dir.join("train.json"));
    assert_eq!(report["config"]["model"]["diffusion_mode"], "per-layer");
    assert_eq!(report["config"]["model"]["layer_dims"], serde_json::json!([6, 8, 8, 3]));
    assert_eq!(report["config"]["row_normalize"], false);
}

#[test]
fn resampled_splits_are_recorded() {
    let fx = Fixture::new();
    let out_dir = fx.out("rs");
    let mut args = vec![
        "train",
        "--dataset",
        fx.data(),
        "--train-fraction",
        "0.1",
        "--val-size",
        "10",
        "--test-size",
        "20",
        "--out",
        out_dir.to_str().unwrap(),
    ];
    args.extend(QUICK);
    assert_eq!(code(&run(&args)), 0);
    let report = read_json(&out_dir.join("train.json"));
    let rs = &report["config"]["train"]["resample"];
    assert_eq!(rs["train_fraction"], 0.1);
    assert_eq!(rs["sizes"]["val"], 10);
    assert_eq!(rs["sizes"]["test"], 20);
}

#[test]
fn grid_search_reports_curve() {
    let fx = Fixture::new();
    let out_dir = fx.out("grid");
    let mut args = vec![
        "grid-search",
        "--dataset",
        fx.data(),
        "--beta-grid",
        "0,1",
        "--out",
        out_dir.to_str().unwrap(),
    ];
    args.extend(QUICK);
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&out_dir.join("grid.json"));
    assert_eq!(report["points"].as_array().unwrap().len(), 2);
    assert_eq!(report["best_beta"], 1.0);
    assert_eq!(report["points"][0]["input_phi"], 0.0);
    let csv = fs::read_to_string(out_dir.join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let best = read_json(&out_dir.join("grid_best.json"));
    assert_eq!(best["config"]["model"]["beta"], 1.0);
}

#[test]
fn depth_study_rows() {
    let fx = Fixture::new();
    let out_dir = fx.out("depth");
    let mut args = vec![
        "depth-study",
        "--dataset",
        fx.data(),
        "--depths",
        "2,3",
        "--out",
        out_dir.to_str().unwrap(),
    ];
    args.extend(QUICK);
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("depth.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("2,agcn,"));
    assert!(lines[4].starts_with("3,gcn,"));
    let report = read_json(&out_dir.join("depth.json"));
    assert_eq!(report["config"]["depths"], serde_json::json!([2, 3]));

    let bad = run(&["depth-study", "--dataset", fx.data(), "--depths", "1,2"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn augment_eval_runs_every_method() {
    let fx = Fixture::new();
    for method in ["co", "self", "union", "intersection"] {
        let out_dir = fx.out(method);
        let mut args = vec![
            "augment-eval",
            "--dataset",
            fx.data(),
            "--augment",
            method,
            "--out",
            out_dir.to_str().unwrap(),
        ];
        args.extend(QUICK);
        let out = run(&args);
        assert_eq!(code(&out), 0, "{method}: {}", String::from_utf8_lossy(&out.stderr));
        let report = read_json(&out_dir.join("augment.json"));
        // 6 training nodes over 3 classes
        assert_eq!(report["config"]["augment"]["additions_per_class"], 4);
        assert_eq!(report["config"]["augment"]["walk_lambda"], 1.0);
    }
    let out = run(&[
        "augment-eval",
        "--dataset",
        fx.data(),
        "--augment",
        "co",
        "--walk-lambda",
        "0",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn knn_build_collinear_points() {
    let fx = Fixture::new();
    let features = fx.root.join("pts.bin");
    let values: [f32; 3] = [0.0, 1.0, 3.0];
    fs::write(
        &features,
        values.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>(),
    )
    .unwrap();
    let labels = fx.root.join("labels.tsv");
    fs::write(&labels, "0\t0\n1\t0\n2\t1\n").unwrap();
    let out_dir = fx.out("pts");
    let out = run(&[
        "knn-build",
        "--features",
        features.to_str().unwrap(),
        "--n",
        "3",
        "--f",
        "1",
        "--k",
        "1",
        "--labels",
        labels.to_str().unwrap(),
        "--train-fraction",
        "0.5",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read_to_string(out_dir.join("edges.tsv")).unwrap(),
        "0\t1\t1\n1\t2\t1\n"
    );
    let meta = read_json(&out_dir.join("meta.json"));
    assert_eq!(meta["name"], "pts");
    assert_eq!(meta["num_classes"], 2);
    agcn::data::load_dataset(&out_dir).unwrap();

    let short = run(&[
        "knn-build",
        "--features",
        features.to_str().unwrap(),
        "--n",
        "4",
        "--f",
        "1",
        "--k",
        "1",
        "--labels",
        labels.to_str().unwrap(),
        "--out",
        fx.out("bad").to_str().unwrap(),
    ]);
    assert_eq!(code(&short), 2);
}

#[test]
fn anova_on_hand_fixture() {
    let fx = Fixture::new();
    let mut inputs = Vec::new();
    for (name, vals) in [("gcn", "1\n2\n3\n"), ("gat", "2\n3\n4\n"), ("agcn", "3\n4\n5\n")] {
        let p = fx.root.join(format!("{name}.txt"));
        fs::write(&p, vals).unwrap();
        inputs.push(p);
    }
    let out_dir = fx.out("anova");
    let mut args = vec!["anova", "--out", out_dir.to_str().unwrap(), "--inputs"];
    args.extend(inputs.iter().map(|p| p.to_str().unwrap()));
    let out = run(&args);
    // values outside [0, 1] are not accuracies
    assert_eq!(code(&out), 2);

    for (p, vals) in inputs
        .iter()
        .zip(["0.1\n0.2\n0.3\n", "0.2\n0.3\n0.4\n", "0.3\n0.4\n0.5\n"])
    {
        fs::write(p, vals).unwrap();
    }
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&out_dir.join("anova.json"));
    assert!((report["f"].as_f64().unwrap() - 3.0).abs() < 1e-9);
    assert!((report["p"].as_f64().unwrap() - 0.125).abs() < 1e-9);
    assert_eq!(report["groups"][2]["method"], "agcn");
    assert!(stdout(&out).starts_with("F(2, 6) = "));
}

#[test]
fn anova_reads_train_reports() {
    let fx = Fixture::new();
    let mut csvs = Vec::new();
    for model in ["gcn", "agcn"] {
        let out_dir = fx.out(model);
        let mut args = vec![
            "train",
            "--dataset",
            fx.data(),
            "--model",
            model,
            "--out",
            out_dir.to_str().unwrap(),
        ];
        args.extend(["--runs", "3", "--epochs", "20"]);
        assert_eq!(code(&run(&args)), 0);
        let dst = fx.root.join(format!("{model}.csv"));
        fs::copy(out_dir.join("train.csv"), &dst).unwrap();
        csvs.push(dst);
    }
    let out = run(&[
        "anova",
        "--out",
        fx.out("a").to_str().unwrap(),
        "--inputs",
        csvs[0].to_str().unwrap(),
        csvs[1].to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&fx.out("a").join("anova.json"));
    assert_eq!(report["groups"][0]["n"], 3);
    assert_eq!(report["df_between"], 1);
}

#[test]
fn export_embeddings_writes_first_layer() {
    let fx = Fixture::new();
    let out_dir = fx.out("emb");
    let out = run(&[
        "export-embeddings",
        "--dataset",
        fx.data(),
        "--hidden",
        "4",
        "--epochs",
        "10",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("embeddings.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "node,d0,d1,d2,d3");
    assert_eq!(lines.len(), 61);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 5));
    let report = read_json(&out_dir.join("embeddings.json"));
    assert_eq!(report["seed"], 42);
}
