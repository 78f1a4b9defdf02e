use std::fs;
use std::path::{Path, PathBuf};

use agcn::augment::{default_additions, AugmentMethod, AugmentPlan};
use agcn::data::{load_dataset, row_normalize, Dataset, SplitSizes};
use agcn::trainer::{default_beta_grid, ResampleSplits, TrainConfig};
use agcn::{DiffusionMode, ModelConfig, ModelKind};
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::args::{AugmentArg, AugmentArgs, DataArgs, DiffusionArg, ExperimentArgs, ModelArg, SplitMode};
use crate::UsageError;

/// Everything needed to reproduce a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub command: String,
    pub dataset: PathBuf,
    pub row_normalize: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depths: Option<Vec<usize>>,
}

impl ExperimentConfig {
    pub fn load_data(&self) -> Result<Dataset> {
        let ds = load_dataset(&self.dataset)?;
        if self.row_normalize {
            let x = row_normalize(&ds.features);
            Ok(ds.with_features(x)?)
        } else {
            Ok(ds)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Citation,
    Image,
}

impl Family {
    fn of(name: &str) -> Self {
        match name.to_ascii_lowercase().as_str() {
            "mnist" | "cifar10" | "cifar-10" => Family::Image,
            _ => Family::Citation,
        }
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Parses `a,b,c` or `start:step:stop` (inclusive).
pub fn parse_beta_grid(text: &str) -> Result<Vec<f64>> {
    if text == "0:0.1:5" {
        return Ok(default_beta_grid());
    }
    let bad = || usage(format!("invalid --beta-grid '{text}'"));
    let grid: Vec<f64> = if let [start, step, stop] = text.split(':').collect::<Vec<_>>()[..] {
        let (start, step, stop): (f64, f64, f64) = (
            start.trim().parse().map_err(|_| bad())?,
            step.trim().parse().map_err(|_| bad())?,
            stop.trim().parse().map_err(|_| bad())?,
        );
        if !(step > 0.0 && stop >= start) {
            return Err(bad());
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize;
        (0..=count)
            .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
            .collect()
    } else {
        text.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if grid.is_empty() || grid.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
        return Err(bad());
    }
    Ok(grid)
}

/// Reads the `config` object of a report written by this tool.
pub fn read_replay(path: &Path, command: &str) -> Result<ExperimentConfig> {
    #[derive(Deserialize)]
    struct Envelope {
        config: ExperimentConfig,
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let env: Envelope =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: not a replayable report: {e}", path.display())))?;
    if env.config.command != command {
        return Err(usage(format!(
            "{} was produced by '{}', not '{command}'",
            path.display(),
            env.config.command
        )));
    }
    Ok(env.config)
}

fn check_flags(args: &ExperimentArgs) -> Result<()> {
    let m = &args.model;
    if !(m.beta.is_finite() && m.beta >= 0.0) {
        return Err(usage("--beta must be finite and >= 0"));
    }
    if m.hidden == 0 {
        return Err(usage("--hidden must be at least 1"));
    }
    if m.layers < 2 {
        return Err(usage("--layers must be at least 2"));
    }
    if !(0.0..1.0).contains(&m.dropout) {
        return Err(usage("--dropout must lie in [0, 1)"));
    }
    if !(m.weight_decay.is_finite() && m.weight_decay >= 0.0) {
        return Err(usage("--weight-decay must be finite and >= 0"));
    }
    let t = &args.train;
    if !(t.lr.is_finite() && t.lr > 0.0) {
        return Err(usage("--lr must be positive"));
    }
    if t.patience == 0 || t.runs == 0 {
        return Err(usage("--patience and --runs must be at least 1"));
    }
    if let Some(f) = args.data.train_fraction {
        if !(f > 0.0 && f <= 1.0) {
            return Err(usage("--train-fraction must lie in (0, 1]"));
        }
    }
    Ok(())
}

fn resample(data: &DataArgs, family: Family) -> Result<Option<ResampleSplits>> {
    let mode = match (data.splits, data.train_fraction) {
        (Some(SplitMode::Fixed), Some(_)) => return Err(usage("--train-fraction requires --splits resample")),
        (Some(m), _) => m,
        (None, Some(_)) => SplitMode::Resample,
        (None, None) if family == Family::Image => SplitMode::Resample,
        (None, None) => SplitMode::Fixed,
    };
    if mode == SplitMode::Fixed {
        return Ok(None);
    }
    let (fraction, val, test) = match family {
        Family::Image => (0.3, 1000, 6000),
        Family::Citation => (0.052, SplitSizes::default().val, SplitSizes::default().test),
    };
    Ok(Some(ResampleSplits {
        train_fraction: data.train_fraction.unwrap_or(fraction),
        sizes: SplitSizes {
            val: data.val_size.unwrap_or(val),
            test: data.test_size.unwrap_or(test),
        },
    }))
}

/// Resolves flags against the dataset's metadata.
pub fn resolve(command: &str, args: &ExperimentArgs) -> Result<ExperimentConfig> {
    if let Some(path) = &args.replay {
        return read_replay(path, command);
    }
    check_flags(args)?;
    let dataset = args.dataset.clone().expect("clap enforces --dataset");
    let meta_path = dataset.join("meta.json");
    let meta: agcn::data::Meta =
        serde_json::from_str(
            &fs::read_to_string(&meta_path).map_err(|source| agcn::data::DataError::Io {
                path: meta_path.clone(),
                source,
            })?,
        )
        .map_err(|source| agcn::data::DataError::Json {
            path: meta_path.clone(),
            source,
        })?;
    let family = Family::of(&meta.name);

    let m = &args.model;
    let kind = match m.model {
        ModelArg::Gcn => ModelKind::Gcn,
        ModelArg::Agcn => ModelKind::Agcn,
    };
    let defaults = ModelConfig::two_layer(kind, meta.num_features, meta.num_classes);
    let mut layer_dims = vec![meta.num_features];
    layer_dims.extend(std::iter::repeat_n(m.hidden, m.layers - 1));
    layer_dims.push(meta.num_classes);
    let model = ModelConfig {
        kind,
        layer_dims,
        beta: m.beta,
        diffusion_mode: match m.diffusion {
            Some(DiffusionArg::InputOnce) => DiffusionMode::InputOnce,
            Some(DiffusionArg::PerLayer) => DiffusionMode::PerLayer,
            None => defaults.diffusion_mode,
        },
        dropout_rate: m.dropout,
        weight_decay: m.weight_decay,
        trace_normalize: m.trace_normalize.is_on(),
    };

    let t = &args.train;
    let train = TrainConfig {
        learning_rate: t.lr,
        max_epochs: t.epochs,
        patience: t.patience,
        runs: t.runs,
        seed: t.seed,
        beta_grid: parse_beta_grid(&t.beta_grid)?,
        resample: resample(&args.data, family)?,
    };

    Ok(ExperimentConfig {
        command: command.to_string(),
        dataset,
        row_normalize: args
            .data
            .row_normalize
            .map_or(family == Family::Citation, |t| t.is_on()),
        model,
        train,
        augment: None,
        depths: None,
    })
}

pub fn resolve_augment(args: &AugmentArgs, data: &Dataset, cfg: &mut ExperimentConfig) -> Result<()> {
    if cfg.augment.is_some() {
        return Ok(());
    }
    if !(args.walk_lambda.is_finite() && args.walk_lambda > 0.0) {
        return Err(usage("--walk-lambda must be positive"));
    }
    let method = match args.augment.expect("clap enforces --augment") {
        AugmentArg::Co => AugmentMethod::CoTraining,
        AugmentArg::SelfTraining => AugmentMethod::SelfTraining,
        AugmentArg::Union => AugmentMethod::Union,
        AugmentArg::Intersection => AugmentMethod::Intersection,
    };
    let train_len = match cfg.train.resample {
        Some(rs) => (rs.train_fraction * data.num_nodes() as f64).round() as usize,
        None => data.splits.train.len(),
    };
    let additions_per_class = match args.additions_per_class {
        Some(0) => return Err(usage("--additions-per-class must be at least 1")),
        Some(k) => k,
        None => default_additions(train_len, data.num_classes),
    };
    cfg.augment = Some(AugmentPlan {
        method,
        additions_per_class,
        walk_lambda: args.walk_lambda,
    });
    Ok(())
}
