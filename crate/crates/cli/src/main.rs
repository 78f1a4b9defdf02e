mod args;
mod config;
mod report;

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use agcn::augment::{augment_eval, AugmentError};
use agcn::data::{read_features_bin, save_dataset, subsample_split, DataError, SplitSizes, Splits};
use agcn::evalstats::{mean_std, one_way_anova, AccuracySample};
use agcn::linalg::LinalgError;
use agcn::model::{forward, ModelError};
use agcn::trainer::{depth_study, grid_search_beta, run_dataset, train, train_runs, TrainError};
use agcn::{knn_graph, Dataset, NormalizedGraph, Rng};
use anyhow::{Context, Result};
use clap::Parser;
use serde::Serialize;

use args::{AnovaArgs, AugmentArgs, Cli, Command, DepthArgs, ExperimentArgs, KnnArgs};
use config::{resolve, resolve_augment, ExperimentConfig};
use report::{write_json, write_runs, Csv};

/// Invalid flag values detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Config(_) => EXIT_USAGE,
        ModelError::Linalg(LinalgError::NonFinite(_)) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Config(_) => EXIT_USAGE,
        TrainError::Diverged { .. } => EXIT_NUMERIC,
        TrainError::AtBeta { source, .. } => train_code(source),
        TrainError::Model(m) => model_code(m),
        TrainError::Stats(_) | TrainError::Data(_) => EXIT_DATA,
    }
}

fn augment_code(e: &AugmentError) -> u8 {
    match e {
        AugmentError::Config(_) => EXIT_USAGE,
        AugmentError::NoConvergence { .. } => EXIT_NUMERIC,
        AugmentError::BaseMismatch => EXIT_DATA,
        AugmentError::Train(t) => train_code(t),
    }
}

/// Exit status for a failed command.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return train_code(e);
        }
        if let Some(e) = cause.downcast_ref::<AugmentError>() {
            return augment_code(e);
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return model_code(e);
        }
        if cause.downcast_ref::<DataError>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(&a),
        Command::GridSearch(a) => cmd_grid(&a),
        Command::DepthStudy(a) => cmd_depth(&a),
        Command::AugmentEval(a) => cmd_augment(&a),
        Command::KnnBuild(a) => cmd_knn(&a),
        Command::Anova(a) => cmd_anova(&a),
        Command::ExportEmbeddings(a) => cmd_embeddings(&a),
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

fn cmd_train(args: &ExperimentArgs) -> Result<()> {
    let cfg = resolve("train", args)?;
    let data = cfg.load_data()?;
    log::info!("training {} runs on {}", cfg.train.runs, data.name);
    let rep = train_runs(&data, &cfg.model, &cfg.train)?;
    let path = write_runs(&args.out, "train", &cfg, &rep)?;
    println!(
        "test accuracy {} ± {} over {} runs; report {}",
        pct(rep.mean_test_accuracy),
        pct(rep.std_test_accuracy),
        rep.runs.len(),
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct GridReport<'a> {
    config: &'a ExperimentConfig,
    points: &'a [agcn::trainer::GridPoint],
    best_beta: f64,
    best_report: String,
    mean: f64,
    std: f64,
}

fn cmd_grid(args: &ExperimentArgs) -> Result<()> {
    let cfg = resolve("grid-search", args)?;
    let data = cfg.load_data()?;
    let rep = grid_search_beta(&data, &cfg.model, &cfg.train)?;
    let best_cfg = ExperimentConfig {
        command: "train".into(),
        model: agcn::ModelConfig {
            beta: rep.best_beta,
            ..cfg.model.clone()
        },
        ..cfg.clone()
    };
    let best_path = write_runs(&args.out, "grid_best", &best_cfg, &rep.best)?;

    let mut csv = Csv::new(&[
        "beta",
        "mean_val_accuracy",
        "mean_test_accuracy",
        "std_test_accuracy",
        "input_phi",
    ]);
    for p in &rep.points {
        csv.row([
            p.beta.to_string(),
            p.mean_val_accuracy.to_string(),
            p.mean_test_accuracy.to_string(),
            p.std_test_accuracy.to_string(),
            p.input_phi.to_string(),
        ]);
    }
    csv.write(&args.out.join("grid.csv"))?;
    let json = args.out.join("grid.json");
    write_json(
        &json,
        &GridReport {
            config: &cfg,
            points: &rep.points,
            best_beta: rep.best_beta,
            best_report: best_path.file_name().unwrap().to_string_lossy().into_owned(),
            mean: rep.best.mean_test_accuracy,
            std: rep.best.std_test_accuracy,
        },
    )?;
    println!(
        "best beta {} (mean validation accuracy {}), test accuracy {} ± {}; report {}",
        rep.best_beta,
        pct(rep.best.mean_val_accuracy),
        pct(rep.best.mean_test_accuracy),
        pct(rep.best.std_test_accuracy),
        json.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct DepthReport<'a> {
    config: &'a ExperimentConfig,
    rows: &'a [agcn::trainer::DepthRow],
}

fn cmd_depth(args: &DepthArgs) -> Result<()> {
    let mut cfg = resolve("depth-study", &args.common)?;
    if cfg.depths.is_none() {
        if args.depths.is_empty() || args.depths.iter().any(|&d| d < 2) {
            return Err(UsageError("--depths values must be at least 2".into()).into());
        }
        cfg.depths = Some(args.depths.clone());
    }
    let data = cfg.load_data()?;
    let depths = cfg.depths.clone().unwrap_or_default();
    let rows = depth_study(&data, &depths, &cfg.model, &cfg.train)?;

    let mut csv = Csv::new(&[
        "depth",
        "model",
        "mean_test_accuracy",
        "std_test_accuracy",
        "accuracies",
    ]);
    for r in &rows {
        let accs: Vec<String> = r.accuracies.iter().map(f64::to_string).collect();
        let kind = serde_json::to_value(r.kind)?;
        csv.row([
            r.depth.to_string(),
            kind.as_str().unwrap_or_default().to_string(),
            r.mean_test_accuracy.to_string(),
            r.std_test_accuracy.to_string(),
            accs.join(";"),
        ]);
        println!(
            "depth {} {:?}: {} ± {}",
            r.depth,
            r.kind,
            pct(r.mean_test_accuracy),
            pct(r.std_test_accuracy)
        );
    }
    csv.write(&args.common.out.join("depth.csv"))?;
    write_json(
        &args.common.out.join("depth.json"),
        &DepthReport {
            config: &cfg,
            rows: &rows,
        },
    )?;
    Ok(())
}

fn cmd_augment(args: &AugmentArgs) -> Result<()> {
    let mut cfg = resolve("augment-eval", &args.common)?;
    let data = cfg.load_data()?;
    resolve_augment(args, &data, &mut cfg)?;
    let plan = cfg.augment.expect("resolved above");
    let rep = augment_eval(&data, &plan, &cfg.model, &cfg.train)?;
    let path = write_runs(&args.common.out, "augment", &cfg, &rep)?;
    println!(
        "{:?} (+{} per class): test accuracy {} ± {} over {} runs; report {}",
        plan.method,
        plan.additions_per_class,
        pct(rep.mean_test_accuracy),
        pct(rep.std_test_accuracy),
        rep.runs.len(),
        path.display()
    );
    Ok(())
}

fn read_labels(path: &Path, n: usize) -> Result<Vec<Option<usize>>> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut labels = vec![None; n];
    let mut prev = None;
    for (k, line) in text.lines().enumerate() {
        let parse_err = |msg: String| DataError::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            msg,
        };
        let mut fields = line.split('\t');
        let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err("expected node<TAB>class".into()).into());
        };
        let node: usize = a.parse().map_err(|_| parse_err(format!("bad node '{a}'")))?;
        let class: usize = b.parse().map_err(|_| parse_err(format!("bad class '{b}'")))?;
        if node >= n {
            return Err(parse_err(format!("node {node} outside 0..{n}")).into());
        }
        if prev.is_some_and(|p| p >= node) {
            return Err(parse_err("nodes must be strictly increasing".into()).into());
        }
        prev = Some(node);
        labels[node] = Some(class);
    }
    Ok(labels)
}

fn cmd_knn(args: &KnnArgs) -> Result<()> {
    if args.n == 0 || args.f == 0 || args.k == 0 || args.k >= args.n {
        return Err(UsageError("need n >= 2, f >= 1 and 1 <= k < n".into()).into());
    }
    if !(args.train_fraction > 0.0 && args.train_fraction <= 1.0) {
        return Err(UsageError("--train-fraction must lie in (0, 1]".into()).into());
    }
    let features = read_features_bin(&args.features, args.n, args.f)?;
    let labels = read_labels(&args.labels, args.n)?;
    let num_classes = labels.iter().flatten().max().map_or(0, |c| c + 1);
    let graph = knn_graph(&features, args.k).map_err(|source| DataError::Graph {
        path: args.features.clone(),
        source,
    })?;
    let name = args.name.clone().unwrap_or_else(|| {
        args.out
            .file_name()
            .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
    });
    let ds = Dataset::new(name, graph, features, labels, Splits::default(), num_classes)?;
    let sizes = SplitSizes {
        val: args.val_size,
        test: args.test_size,
    };
    let (ds, warnings) = subsample_split(&ds, args.train_fraction, &mut Rng::new(args.seed), sizes)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    save_dataset(&ds, &args.out)?;
    println!(
        "{}: {} nodes, {} edges, {} classes; split {}/{}/{}",
        args.out.display(),
        ds.num_nodes(),
        ds.graph.num_edges(),
        ds.num_classes,
        ds.splits.train.len(),
        ds.splits.val.len(),
        ds.splits.test.len()
    );
    Ok(())
}

/// Accuracies from a report CSV (`test_accuracy` column) or one value per line.
fn read_accuracies(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
    let column = match lines.peek() {
        Some(first) if first.parse::<f64>().is_err() => {
            let header: Vec<&str> = first.split(',').map(str::trim).collect();
            let col = header
                .iter()
                .position(|h| *h == "test_accuracy")
                .ok_or_else(|| DataError::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    msg: "no test_accuracy column".into(),
                })?;
            lines.next();
            Some(col)
        }
        _ => None,
    };
    let offset = if column.is_some() { 2 } else { 1 };
    lines
        .enumerate()
        .map(|(k, line)| {
            let field = match column {
                Some(c) => line.split(',').nth(c).unwrap_or(""),
                None => line,
            };
            field.trim().parse::<f64>().map_err(|_| {
                DataError::Parse {
                    path: path.to_path_buf(),
                    line: k + offset,
                    msg: format!("bad accuracy '{}'", field.trim()),
                }
                .into()
            })
        })
        .collect()
}

#[derive(Serialize)]
struct GroupSummary {
    method: String,
    n: usize,
    mean: f64,
    std: f64,
}

#[derive(Serialize)]
struct AnovaReport {
    groups: Vec<GroupSummary>,
    f: f64,
    p: f64,
    df_between: usize,
    df_within: usize,
    ss_between: f64,
    ss_within: f64,
}

fn cmd_anova(args: &AnovaArgs) -> Result<()> {
    let mut samples = Vec::new();
    for path in &args.inputs {
        let method = path
            .file_stem()
            .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        samples.push(AccuracySample::new(method, read_accuracies(path)?));
    }
    let r = one_way_anova(&samples).map_err(|e| DataError::Invariant(e.to_string()))?;
    let groups: Vec<GroupSummary> = samples
        .iter()
        .map(|s| {
            let (mean, std) = mean_std(&s.accuracies);
            GroupSummary {
                method: s.method.clone(),
                n: s.accuracies.len(),
                mean,
                std,
            }
        })
        .collect();
    let mut csv = Csv::new(&["method", "n", "mean", "std"]);
    for g in &groups {
        csv.row([g.method.clone(), g.n.to_string(), g.mean.to_string(), g.std.to_string()]);
    }
    csv.write(&args.out.join("anova.csv"))?;
    write_json(
        &args.out.join("anova.json"),
        &AnovaReport {
            groups,
            f: r.f,
            p: r.p,
            df_between: r.df_between,
            df_within: r.df_within,
            ss_between: r.ss_between,
            ss_within: r.ss_within,
        },
    )?;
    println!("F({}, {}) = {} p = {}", r.df_between, r.df_within, r.f, r.p);
    Ok(())
}

#[derive(Serialize)]
struct EmbeddingReport<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    test_accuracy: f64,
    embeddings_file: &'a str,
}

fn cmd_embeddings(args: &ExperimentArgs) -> Result<()> {
    let cfg = resolve("export-embeddings", args)?;
    let data = run_dataset(&cfg.load_data()?, &cfg.train, 0)?;
    let seed = cfg.train.run_seed(0);
    let (state, rep) = train(&data, &cfg.model, &cfg.train, seed)?;
    let ng = NormalizedGraph::new(data.graph.clone());
    let (_, cache) = forward(&state, &ng, &data.features, None, false).map_err(TrainError::from)?;
    let h = cache.first_hidden().context("model has no hidden layer")?;

    let mut header = vec!["node".to_string()];
    header.extend((0..h.cols()).map(|d| format!("d{d}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&header);
    for (i, row) in h.row_iter().enumerate() {
        csv.row(std::iter::once(i.to_string()).chain(row.iter().map(f64::to_string)));
    }
    let file = "embeddings.csv";
    csv.write(&args.out.join(file))?;
    write_json(
        &args.out.join("embeddings.json"),
        &EmbeddingReport {
            config: &cfg,
            seed,
            test_accuracy: rep.test_accuracy,
            embeddings_file: file,
        },
    )?;
    println!(
        "{} x {} first-layer activations written to {} (test accuracy {})",
        h.rows(),
        h.cols(),
        args.out.join(file).display(),
        pct(rep.test_accuracy)
    );
    Ok(())
}
