//! Full-batch training with Adam and validation-loss early stopping.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{subsample_split, DataError, Dataset, SplitSizes};
use crate::evalstats::{accuracy, mean_std, StatsError};
use crate::graph::NormalizedGraph;
use crate::linalg::{Matrix, Rng};
use crate::model::{
    backward, cross_entropy, forward_prepared, objective, DiffusionMode, ModelConfig, ModelError, ModelInput,
    ModelKind, ModelState,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("beta = {beta}: {source}")]
    AtBeta {
        beta: f64,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// `{0, 0.1, …, 5.0}`.
pub fn default_beta_grid() -> Vec<f64> {
    (0..=50).map(|i| i as f64 / 10.0).collect()
}

/// Draw a fresh stratified split for every run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampleSplits {
    pub train_fraction: f64,
    pub sizes: SplitSizes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub runs: usize,
    pub seed: u64,
    pub beta_grid: Vec<f64>,
    /// `None` keeps the dataset's own split and varies only initialization.
    pub resample: Option<ResampleSplits>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            max_epochs: 200,
            patience: 10,
            runs: 10,
            seed: 42,
            beta_grid: default_beta_grid(),
            resample: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be at least 1".into()));
        }
        if self.runs == 0 {
            return Err(TrainError::Config("runs must be at least 1".into()));
        }
        if self.beta_grid.is_empty() {
            return Err(TrainError::Config("beta grid is empty".into()));
        }
        if self.beta_grid.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(TrainError::Config("beta grid values must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl AdamState {
    pub fn new(weights: &[Matrix]) -> Self {
        let zeros: Vec<Matrix> = weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, weights: &mut [Matrix], grads: &[Matrix], lr: f64) -> Result<()> {
        let shapes_ok = weights.len() == self.m.len()
            && grads.len() == weights.len()
            && weights
                .iter()
                .zip(grads)
                .zip(&self.m)
                .all(|((w, g), m)| w.shape() == g.shape() && w.shape() == m.shape());
        if !shapes_ok {
            return Err(TrainError::Config(
                "Adam: weight/gradient shapes do not match state".into(),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for ((w, g), (m, v)) in weights
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let w = w.as_mut_slice();
            let m = m.as_mut_slice();
            let v = v.as_mut_slice();
            for (k, &gk) in g.as_slice().iter().enumerate() {
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                w[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Gate value per layer at evaluation time.
    pub phi: Vec<f64>,
    /// Smoothness trace per layer at evaluation time.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub beta: f64,
    pub history: Vec<EpochRecord>,
    /// Epoch whose weights were kept (0 = initial weights).
    pub best_epoch: usize,
    /// Last epoch that ran.
    pub stop_epoch: usize,
    pub best_val_loss: f64,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
}

/// Precomputed per-dataset inputs shared by every run on it.
pub struct TrainContext<'a> {
    pub data: &'a Dataset,
    pub graph: NormalizedGraph,
}

impl<'a> TrainContext<'a> {
    pub fn new(data: &'a Dataset) -> Self {
        Self {
            data,
            graph: NormalizedGraph::new(data.graph.clone()),
        }
    }
}

struct Evaluation {
    val_loss: f64,
    val_acc: f64,
    phi: Vec<f64>,
    trace: Vec<f64>,
    probs: Matrix,
}

/// Trains one model from `seed` and returns the best-validation-loss weights.
pub fn train(
    data: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelState, RunReport)> {
    train_in(&TrainContext::new(data), data, model_cfg, train_cfg, seed)
}

/// Like [`train`], reusing the normalized graph in `ctx`. `data` must share
/// the graph of `ctx.data` but may carry different splits or pseudo-labels.
pub fn train_in(
    ctx: &TrainContext<'_>,
    data: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelState, RunReport)> {
    train_cfg.validate()?;
    let ng = &ctx.graph;
    let train_t = data.train_targets();
    let val_t = data.val_targets();
    let test_t = data.test_targets();
    if train_t.is_empty() || val_t.is_empty() || test_t.is_empty() {
        return Err(TrainError::Config(
            "train, validation and test splits must be nonempty".into(),
        ));
    }

    let mut rng = Rng::new(seed);
    let mut state = ModelState::init(model_cfg.clone(), &mut rng)?;
    let input = ModelInput::new(model_cfg, ng, &data.features)?;
    let mut adam = AdamState::new(&state.weights);

    let evaluate = |state: &ModelState| -> Result<Evaluation> {
        let (probs, cache) = forward_prepared(state, ng, &input, None, false)?;
        Ok(Evaluation {
            val_loss: cross_entropy(&probs, &val_t)?,
            val_acc: accuracy(&probs, &val_t)?,
            phi: cache.phis(),
            trace: cache.traces(),
            probs,
        })
    };

    let init = evaluate(&state)?;
    let mut best_state = state.clone();
    let mut best_val_loss = init.val_loss;
    let mut best_val_acc = init.val_acc;
    let mut best_epoch = 0;
    let mut improved_once = false;
    let mut since_best = 0;
    let mut history = Vec::new();

    for epoch in 1..=train_cfg.max_epochs {
        let (probs, cache) = forward_prepared(&state, ng, &input, Some(&mut rng), true)?;
        let train_loss = objective(&state, &probs, &train_t)?;
        if !train_loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                loss: train_loss,
            });
        }
        let grads = backward(&state, ng, &input, &cache, &train_t).map_err(|e| match e {
            ModelError::Linalg(_) => TrainError::Diverged {
                epoch,
                loss: train_loss,
            },
            other => other.into(),
        })?;
        adam.step(&mut state.weights, &grads, train_cfg.learning_rate)?;

        let Evaluation {
            val_loss,
            val_acc,
            phi,
            trace,
            ..
        } = match evaluate(&state) {
            Err(TrainError::Model(ModelError::Linalg(_))) => {
                return Err(TrainError::Diverged { epoch, loss: f64::NAN });
            }
            other => other?,
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy: val_acc,
            phi,
            trace,
        });

        if !improved_once || val_loss < best_val_loss {
            improved_once = true;
            best_val_loss = val_loss;
            best_val_acc = val_acc;
            best_epoch = epoch;
            best_state = state.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= train_cfg.patience {
                break;
            }
        }
    }

    let test_accuracy = accuracy(&evaluate(&best_state)?.probs, &test_t)?;
    let report = RunReport {
        seed,
        beta: model_cfg.beta,
        stop_epoch: history.last().map_or(0, |r| r.epoch),
        history,
        best_epoch,
        best_val_loss,
        best_val_accuracy: best_val_acc,
        test_accuracy,
    };
    Ok((best_state, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiRunReport {
    pub runs: Vec<RunReport>,
    pub mean_test_accuracy: f64,
    pub std_test_accuracy: f64,
    pub mean_val_accuracy: f64,
}

impl MultiRunReport {
    pub fn from_runs(runs: Vec<RunReport>) -> Self {
        let test: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
        let val: Vec<f64> = runs.iter().map(|r| r.best_val_accuracy).collect();
        let (mean_test_accuracy, std_test_accuracy) = mean_std(&test);
        Self {
            runs,
            mean_test_accuracy,
            std_test_accuracy,
            mean_val_accuracy: mean_std(&val).0,
        }
    }

    pub fn test_accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.test_accuracy).collect()
    }
}

/// Dataset used by run `run`: the fixed split, or a resampled one.
pub fn run_dataset(data: &Dataset, train_cfg: &TrainConfig, run: usize) -> Result<Dataset> {
    match train_cfg.resample {
        None => Ok(data.clone()),
        Some(rs) => {
            // separate stream from weight initialization
            let mut rng = Rng::new(train_cfg.run_seed(run) ^ 0x9e37_79b9_7f4a_7c15);
            let (ds, _) = subsample_split(data, rs.train_fraction, &mut rng, rs.sizes)?;
            Ok(ds.with_pseudo_labels(data.pseudo_labels.clone())?)
        }
    }
}

/// `train_cfg.runs` independent runs with seeds `seed + r`, in parallel.
pub fn train_runs(data: &Dataset, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<MultiRunReport> {
    train_runs_in(&TrainContext::new(data), model_cfg, train_cfg)
}

pub fn train_runs_in(
    ctx: &TrainContext<'_>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<MultiRunReport> {
    train_cfg.validate()?;
    let runs = (0..train_cfg.runs)
        .into_par_iter()
        .map(|r| {
            let ds = run_dataset(ctx.data, train_cfg, r)?;
            train_in(ctx, &ds, model_cfg, train_cfg, train_cfg.run_seed(r)).map(|(_, rep)| rep)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiRunReport::from_runs(runs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub beta: f64,
    pub mean_val_accuracy: f64,
    pub mean_test_accuracy: f64,
    pub std_test_accuracy: f64,
    /// Gate on the input features (identical across runs for a fixed split).
    pub input_phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchReport {
    pub points: Vec<GridPoint>,
    pub best_beta: f64,
    pub best: MultiRunReport,
}

/// Trains at every β in the grid and keeps the one with the highest mean
/// validation accuracy (ties to the smaller β).
pub fn grid_search_beta(data: &Dataset, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<GridSearchReport> {
    train_cfg.validate()?;
    let ctx = TrainContext::new(data);
    let results = train_cfg
        .beta_grid
        .par_iter()
        .map(|&beta| {
            let cfg = ModelConfig {
                beta,
                ..model_cfg.clone()
            };
            let wrap = |e: TrainError| TrainError::AtBeta {
                beta,
                source: Box::new(e),
            };
            let input_phi = ModelInput::new(&cfg, &ctx.graph, &data.features)
                .map_err(|e| wrap(e.into()))?
                .phi();
            let rep = train_runs_in(&ctx, &cfg, train_cfg).map_err(wrap)?;
            Ok((beta, input_phi, rep))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut best_idx = 0;
    for (k, (beta, _, rep)) in results.iter().enumerate() {
        let (best_beta, _, best) = &results[best_idx];
        if rep.mean_val_accuracy > best.mean_val_accuracy
            || (rep.mean_val_accuracy == best.mean_val_accuracy && beta < best_beta)
        {
            best_idx = k;
        }
    }
    let points = results
        .iter()
        .map(|(beta, input_phi, rep)| GridPoint {
            beta: *beta,
            mean_val_accuracy: rep.mean_val_accuracy,
            mean_test_accuracy: rep.mean_test_accuracy,
            std_test_accuracy: rep.std_test_accuracy,
            input_phi: *input_phi,
        })
        .collect();
    let (best_beta, _, best) = results.into_iter().nth(best_idx).expect("grid is nonempty");
    Ok(GridSearchReport {
        points,
        best_beta,
        best,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    /// Number of weight matrices.
    pub depth: usize,
    pub kind: ModelKind,
    pub mean_test_accuracy: f64,
    pub std_test_accuracy: f64,
    pub accuracies: Vec<f64>,
}

/// Trains per-layer AGCN and GCN at each depth and reports test accuracy.
///
/// `agcn_template` supplies β, dropout, weight decay and trace normalization;
/// layer widths are `[F, 16, …, 16, C]`.
pub fn depth_study(
    data: &Dataset,
    depths: &[usize],
    agcn_template: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<Vec<DepthRow>> {
    if let Some(&d) = depths.iter().find(|&&d| d < 2) {
        return Err(TrainError::Config(format!("depth {d} is below the minimum of 2")));
    }
    let ctx = TrainContext::new(data);
    let mut rows = Vec::new();
    for &depth in depths {
        for kind in [ModelKind::Agcn, ModelKind::Gcn] {
            let base = ModelConfig::deep(kind, data.num_features(), data.num_classes, depth);
            let cfg = ModelConfig {
                kind,
                layer_dims: base.layer_dims,
                diffusion_mode: DiffusionMode::PerLayer,
                ..agcn_template.clone()
            };
            let rep = train_runs_in(&ctx, &cfg, train_cfg)?;
            rows.push(DepthRow {
                depth,
                kind,
                mean_test_accuracy: rep.mean_test_accuracy,
                std_test_accuracy: rep.std_test_accuracy,
                accuracies: rep.test_accuracies(),
            });
        }
    }
    Ok(rows)
}
