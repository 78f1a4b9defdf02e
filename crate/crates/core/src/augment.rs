//! Training-set expansion for low label rates.
//!
//! Co-training ranks unlabeled nodes with a partially absorbing random walk,
//! realized as the regularized Laplacian system `(λI + L̃) P = λ Y`; each class
//! column is solved with conjugate gradients. Self-training ranks them by the
//! softmax output of a model trained on the original labels.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::graph::NormalizedGraph;
use crate::linalg::{CsrMatrix, Matrix};
use crate::model::{forward_prepared, ModelConfig, ModelInput};
use crate::trainer::{run_dataset, train_in, MultiRunReport, TrainConfig, TrainContext, TrainError};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augmentation setting: {0}")]
    Config(String),
    #[error("conjugate gradients did not converge for class {class} after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence {
        class: usize,
        iterations: usize,
        residual: f64,
    },
    #[error("label sets were built from different base training sets")]
    BaseMismatch,
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceSource {
    RandomWalk,
    Model,
}

#[derive(Debug, Clone)]
pub struct ConfidenceTable {
    pub scores: Matrix,
    pub source: ConfidenceSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentMethod {
    CoTraining,
    SelfTraining,
    Union,
    Intersection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub method: AugmentMethod,
    pub additions_per_class: usize,
    pub walk_lambda: f64,
}

/// Additions per class that roughly triple a training set of `train_len` nodes.
pub fn default_additions(train_len: usize, num_classes: usize) -> usize {
    (2 * train_len).div_ceil(num_classes.max(1)).max(1)
}

pub const CG_TOLERANCE: f64 = 1e-8;

/// Default absorption strength `λ` of the random walk.
pub const DEFAULT_WALK_LAMBDA: f64 = 1.0;

/// Solves `(λI + L) x = b` by conjugate gradients to `‖r‖/‖b‖ ≤ tol`.
fn cg_solve(
    laplacian: &CsrMatrix,
    lambda: f64,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> std::result::Result<Vec<f64>, (usize, f64)> {
    let n = b.len();
    let apply = |x: &[f64], out: &mut [f64]| {
        laplacian.mul_vec(x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o += lambda * xi;
        }
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let b_norm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    for _ in 0..max_iter {
        if rr.sqrt() / b_norm <= tol {
            return Ok(x);
        }
        apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
        rr = rr_next;
    }
    let res = rr.sqrt() / b_norm;
    if res <= tol {
        Ok(x)
    } else {
        Err((max_iter, res))
    }
}

/// Random-walk confidence of every node for every class.
pub fn parw_confidence(
    ng: &NormalizedGraph,
    targets: &[(usize, usize)],
    num_classes: usize,
    lambda: f64,
) -> Result<ConfidenceTable> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(AugmentError::Config(format!(
            "walk lambda must be positive, got {lambda}"
        )));
    }
    if targets.is_empty() {
        return Err(AugmentError::Config("no labeled nodes to propagate from".into()));
    }
    let n = ng.num_nodes();
    if let Some(&(i, c)) = targets.iter().find(|&&(i, c)| i >= n || c >= num_classes) {
        return Err(AugmentError::Config(format!("target ({i}, {c}) out of range")));
    }
    let max_iter = 10 * n;
    let columns = (0..num_classes)
        .into_par_iter()
        .map(|c| {
            let mut b = vec![0.0; n];
            for &(i, label) in targets {
                if label == c {
                    b[i] = lambda;
                }
            }
            cg_solve(ng.laplacian(), lambda, &b, CG_TOLERANCE, max_iter).map_err(|(iterations, residual)| {
                AugmentError::NoConvergence {
                    class: c,
                    iterations,
                    residual,
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut scores = Matrix::zeros(n, num_classes);
    for (c, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            // CG leaves tiny negative round-off on far-away nodes
            scores.set(i, c, v.max(0.0));
        }
    }
    Ok(ConfidenceTable {
        scores,
        source: ConfidenceSource::RandomWalk,
    })
}

/// Softmax probabilities as confidences.
pub fn model_confidence(probs: &Matrix) -> ConfidenceTable {
    ConfidenceTable {
        scores: probs.clone(),
        source: ConfidenceSource::Model,
    }
}

/// Original training labels plus pseudo-labeled additions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    pub base: BTreeMap<usize, usize>,
    pub added: BTreeMap<usize, usize>,
}

impl LabelSet {
    pub fn from_targets(targets: &[(usize, usize)]) -> Self {
        Self {
            base: targets.iter().copied().collect(),
            added: BTreeMap::new(),
        }
    }

    pub fn nodes(&self) -> BTreeSet<usize> {
        self.base.keys().chain(self.added.keys()).copied().collect()
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.added.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Expansion {
    pub set: LabelSet,
    pub warnings: Vec<String>,
}

/// Adds the `additions_per_class` most confident unlabeled nodes of each class.
///
/// Ties in confidence go to the smaller node index; a node selected for
/// several classes keeps the one it is most confident in (ties to the smaller
/// class index). Original labels are never changed.
pub fn expand_labels(conf: &ConfidenceTable, base: &[(usize, usize)], additions_per_class: usize) -> Result<Expansion> {
    if additions_per_class == 0 {
        return Err(AugmentError::Config("additions_per_class must be at least 1".into()));
    }
    let scores = &conf.scores;
    let mut set = LabelSet::from_targets(base);
    let mut warnings = Vec::new();

    let unlabeled: Vec<usize> = (0..scores.rows()).filter(|i| !set.base.contains_key(i)).collect();
    if unlabeled.is_empty() {
        warnings.push("every node is already labeled; nothing to add".to_string());
    } else if unlabeled.len() < additions_per_class {
        warnings.push(format!(
            "only {} unlabeled nodes available, fewer than the {additions_per_class} requested per class",
            unlabeled.len()
        ));
    }

    let mut won: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for c in 0..scores.cols() {
        let mut ranked = unlabeled.clone();
        ranked.sort_by(|&a, &b| scores.get(b, c).total_cmp(&scores.get(a, c)).then(a.cmp(&b)));
        for &i in ranked.iter().take(additions_per_class) {
            won.entry(i).or_default().push(c);
        }
    }
    for (i, classes) in won {
        let mut best = classes[0];
        for &c in &classes[1..] {
            if scores.get(i, c) > scores.get(i, best) {
                best = c;
            }
        }
        set.added.insert(i, best);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(Expansion { set, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    Union,
    Intersection,
}

/// Merges a co-training set `co` with a self-training set `st`. On label
/// conflicts the union keeps the co-training label and the intersection
/// drops the node.
pub fn combine(co: &LabelSet, st: &LabelSet, mode: CombineMode) -> Result<LabelSet> {
    if co.base != st.base {
        return Err(AugmentError::BaseMismatch);
    }
    let added = match mode {
        CombineMode::Union => {
            let mut out = st.added.clone();
            out.extend(co.added.iter().map(|(&i, &c)| (i, c)));
            out
        }
        CombineMode::Intersection => co
            .added
            .iter()
            .filter(|(i, c)| st.added.get(i) == Some(c))
            .map(|(&i, &c)| (i, c))
            .collect(),
    };
    Ok(LabelSet {
        base: co.base.clone(),
        added,
    })
}

/// Expands the training set of `data` according to `plan`. Self-training
/// trains a model with `seed` on the original labels first.
pub fn augment_dataset(
    ctx: &TrainContext<'_>,
    data: &Dataset,
    plan: &AugmentPlan,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(Dataset, Vec<String>)> {
    let base = data.train_targets();
    let co = || -> Result<Expansion> {
        let conf = parw_confidence(&ctx.graph, &base, data.num_classes, plan.walk_lambda)?;
        expand_labels(&conf, &base, plan.additions_per_class)
    };
    let st = || -> Result<Expansion> {
        let (state, _) = train_in(ctx, data, model_cfg, train_cfg, seed)?;
        let input = ModelInput::new(model_cfg, &ctx.graph, &data.features).map_err(TrainError::from)?;
        let (probs, _) = forward_prepared(&state, &ctx.graph, &input, None, false).map_err(TrainError::from)?;
        expand_labels(&model_confidence(&probs), &base, plan.additions_per_class)
    };
    let (set, warnings) = match plan.method {
        AugmentMethod::CoTraining => {
            let e = co()?;
            (e.set, e.warnings)
        }
        AugmentMethod::SelfTraining => {
            let e = st()?;
            (e.set, e.warnings)
        }
        AugmentMethod::Union | AugmentMethod::Intersection => {
            let (a, b) = (co()?, st()?);
            let mode = if plan.method == AugmentMethod::Union {
                CombineMode::Union
            } else {
                CombineMode::Intersection
            };
            let mut w = a.warnings;
            w.extend(b.warnings);
            (combine(&a.set, &b.set, mode)?, w)
        }
    };
    let mut pseudo = data.pseudo_labels.clone();
    pseudo.extend(set.added);
    let out = data.clone().with_pseudo_labels(pseudo).map_err(TrainError::from)?;
    Ok((out, warnings))
}

/// Multi-run evaluation of a model trained on an augmented label set.
pub fn augment_eval(
    data: &Dataset,
    plan: &AugmentPlan,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<MultiRunReport> {
    train_cfg.validate()?;
    let ctx = TrainContext::new(data);
    let runs = (0..train_cfg.runs)
        .into_par_iter()
        .map(|r| {
            let seed = train_cfg.run_seed(r);
            let ds = run_dataset(data, train_cfg, r)?;
            let (aug, _) = augment_dataset(&ctx, &ds, plan, model_cfg, train_cfg, seed)?;
            let (_, rep) = train_in(&ctx, &aug, model_cfg, train_cfg, seed)?;
            Ok(rep)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiRunReport::from_runs(runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, normalize};

    #[test]
    fn parw_single_node() {
        let ng = normalize(&build_graph(1, &[]).unwrap());
        let conf = parw_confidence(&ng, &[(0, 0)], 3, 1.0).unwrap();
        assert_eq!(conf.scores.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(conf.source, ConfidenceSource::RandomWalk);
    }

    #[test]
    fn parw_two_nodes_hand_solve() {
        let ng = normalize(&build_graph(2, &[(0, 1, 1.0)]).unwrap());
        let conf = parw_confidence(&ng, &[(0, 0)], 2, 1.0).unwrap();
        assert!((conf.scores.get(0, 0) - 2.0 / 3.0).abs() < 1e-10);
        assert!((conf.scores.get(1, 0) - 1.0 / 3.0).abs() < 1e-10);
        assert_eq!(conf.scores.get(0, 1), 0.0);
    }

    #[test]
    fn parw_large_lambda_is_pure_absorption() {
        let ng = normalize(&build_graph(4, &[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)]).unwrap());
        let conf = parw_confidence(&ng, &[(0, 0), (3, 1)], 2, 1e9).unwrap();
        let want = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 1.0]]);
        assert!(conf.scores.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn parw_rejects_bad_input() {
        let ng = normalize(&build_graph(2, &[(0, 1, 1.0)]).unwrap());
        assert!(parw_confidence(&ng, &[(0, 0)], 2, 0.0).is_err());
        assert!(parw_confidence(&ng, &[], 2, 1.0).is_err());
        assert!(parw_confidence(&ng, &[(0, 5)], 2, 1.0).is_err());
    }

    #[test]
    fn cg_reports_non_convergence() {
        let ng = normalize(&build_graph(3, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap());
        let err = cg_solve(ng.laplacian(), 1e-3, &[1.0, 0.0, 0.0], 1e-30, 1).unwrap_err();
        assert_eq!(err.0, 1);
    }

    fn table(rows: &[[f64; 2]]) -> ConfidenceTable {
        model_confidence(&Matrix::from_rows(rows))
    }

    #[test]
    fn expand_picks_most_confident() {
        let conf = table(&[[0.9, 0.0], [0.2, 0.0], [0.5, 0.0]]);
        let e = expand_labels(&conf, &[], 1).unwrap();
        assert_eq!(e.set.added.get(&0), Some(&0));
        assert!(!e.set.added.contains_key(&2));
    }

    #[test]
    fn expand_tie_rules() {
        // nodes 1 and 2 tie for class 0 -> node 1; node 1 also wins class 1
        // but prefers class 0
        let conf = table(&[[9.0, 9.0], [0.6, 0.5], [0.6, 0.1]]);
        let e = expand_labels(&conf, &[(0, 1)], 1).unwrap();
        assert_eq!(e.set.added, BTreeMap::from([(1, 0)]));
        assert_eq!(e.set.base, BTreeMap::from([(0, 1)]));
    }

    #[test]
    fn expand_with_everything_labeled() {
        let conf = table(&[[1.0, 0.0], [0.0, 1.0]]);
        let e = expand_labels(&conf, &[(0, 0), (1, 1)], 2).unwrap();
        assert!(e.set.added.is_empty());
        assert_eq!(e.warnings.len(), 1);
        assert!(expand_labels(&conf, &[], 0).is_err());
    }

    #[test]
    fn expand_with_too_few_unlabeled() {
        let conf = table(&[[1.0, 0.0], [0.0, 1.0], [0.3, 0.7]]);
        let e = expand_labels(&conf, &[(0, 0), (1, 1)], 2).unwrap();
        assert_eq!(e.set.added, BTreeMap::from([(2, 1)]));
        assert_eq!(e.warnings.len(), 1);
    }

    fn set(base: &[(usize, usize)], added: &[(usize, usize)]) -> LabelSet {
        LabelSet {
            base: base.iter().copied().collect(),
            added: added.iter().copied().collect(),
        }
    }

    #[test]
    fn combine_rules() {
        let a = set(&[(0, 0)], &[(3, 1), (4, 0)]);
        for mode in [CombineMode::Union, CombineMode::Intersection] {
            assert_eq!(combine(&a, &a, mode).unwrap(), a);
        }

        let b = set(&[(0, 0)], &[(5, 1)]);
        assert_eq!(
            combine(&a, &b, CombineMode::Union).unwrap(),
            set(&[(0, 0)], &[(3, 1), (4, 0), (5, 1)])
        );
        assert_eq!(combine(&a, &b, CombineMode::Intersection).unwrap(), set(&[(0, 0)], &[]));

        let c = set(&[(0, 0)], &[(3, 0)]);
        assert_eq!(combine(&a, &c, CombineMode::Union).unwrap().added.get(&3), Some(&1));
        assert!(!combine(&a, &c, CombineMode::Intersection)
            .unwrap()
            .added
            .contains_key(&3));

        let other_base = set(&[(1, 0)], &[]);
        assert!(matches!(
            combine(&a, &other_base, CombineMode::Union),
            Err(AugmentError::BaseMismatch)
        ));
    }

    #[test]
    fn default_additions_triples_training_set() {
        assert_eq!(default_additions(140, 7), 40);
        assert_eq!(default_additions(14, 7), 4);
        assert_eq!(default_additions(1, 7), 1);
    }
}
