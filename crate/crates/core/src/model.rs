//! GCN and anisotropic GCN forward/backward passes.
//!
//! The anisotropic layer scales the usual normalized-adjacency diffusion by a
//! scalar gate `φ = 1 − exp(−β t²)`, where `t = tr(Hᵀ L̃ H)` measures how much
//! the layer input disagrees across edges. Two placements are supported:
//!
//! * [`DiffusionMode::InputOnce`]: diffuse the raw features once and run an
//!   MLP on the result.
//! * [`DiffusionMode::PerLayer`]: diffuse the input of every layer, in which
//!   case `φ` depends on the weights and contributes its own gradient term.
//!
//! Gradients are derived by hand; see `backward`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, NormalizedGraph};
use crate::linalg::{glorot_init, matmul, matmul_nt, matmul_tn, softmax_rows, spmm, LinalgError, Matrix, Rng};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("expected input with {expected} columns, got {got}")]
    InputWidth { expected: usize, got: usize },
    #[error("dropout is enabled in training mode but no rng was supplied")]
    MissingRng,
    #[error("empty loss mask")]
    EmptyMask,
    #[error("label {label} of node {node} is outside 0..{classes}")]
    LabelOutOfRange { node: usize, label: usize, classes: usize },
    #[error("node {node} outside 0..{n}")]
    NodeOutOfRange { node: usize, n: usize },
    #[error("forward cache does not match the model or graph")]
    StaleCache,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Plain normalized-adjacency diffusion (gate fixed at 1).
    Gcn,
    /// Diffusion gated by the smoothness-trace nonlinearity.
    Agcn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiffusionMode {
    InputOnce,
    PerLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// `[F, F1, ..., C]`.
    pub layer_dims: Vec<usize>,
    pub beta: f64,
    pub diffusion_mode: DiffusionMode,
    pub dropout_rate: f64,
    /// L2 penalty `weight_decay · ½‖W⁽⁰⁾‖²` on the first layer.
    pub weight_decay: f64,
    /// Divide the smoothness trace by `n · F` before gating.
    pub trace_normalize: bool,
}

impl ModelConfig {
    /// Two-layer model with hidden width 16, dropout 0.5 and weight decay 5e-4.
    pub fn two_layer(kind: ModelKind, num_features: usize, num_classes: usize) -> Self {
        Self::deep(kind, num_features, num_classes, 2)
    }

    /// `depth` weight matrices with hidden width 16.
    pub fn deep(kind: ModelKind, num_features: usize, num_classes: usize, depth: usize) -> Self {
        let mut layer_dims = vec![num_features];
        layer_dims.extend(std::iter::repeat_n(16, depth.saturating_sub(1)));
        layer_dims.push(num_classes);
        Self {
            kind,
            layer_dims,
            beta: 1.0,
            diffusion_mode: match kind {
                ModelKind::Gcn => DiffusionMode::PerLayer,
                ModelKind::Agcn => DiffusionMode::InputOnce,
            },
            dropout_rate: 0.5,
            weight_decay: 5e-4,
            trace_normalize: false,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len().saturating_sub(1)
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(ModelError::Config("layer_dims needs at least two entries".into()));
        }
        if self.layer_dims.contains(&0) {
            return Err(ModelError::Config("layer widths must be positive".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(ModelError::Config(format!(
                "beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(ModelError::Config("weight decay must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub weights: Vec<Matrix>,
    pub config: ModelConfig,
}

impl ModelState {
    /// Glorot-initialized weights for every layer.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let weights = config
            .layer_dims
            .windows(2)
            .map(|w| glorot_init(rng, w[0], w[1]))
            .collect();
        Ok(Self { weights, config })
    }

    pub fn from_weights(config: ModelConfig, weights: Vec<Matrix>) -> Result<Self> {
        config.validate()?;
        let ok = weights.len() == config.num_layers()
            && weights
                .iter()
                .zip(config.layer_dims.windows(2))
                .all(|(w, d)| w.shape() == (d[0], d[1]) && w.is_finite());
        if !ok {
            return Err(ModelError::Config("weight shapes do not chain with layer_dims".into()));
        }
        Ok(Self { weights, config })
    }
}

/// `φ = 1 − exp(−β t²)`.
#[inline]
pub fn anisotropy_factor(t: f64, beta: f64) -> f64 {
    -(-beta * t * t).exp_m1()
}

/// Anisotropic diffusion `G = φ · Â · H` together with `φ` and the trace `t`.
pub fn aniso_diffuse(ng: &NormalizedGraph, h: &Matrix, beta: f64) -> Result<(Matrix, f64, f64)> {
    let t = ng.smoothness_trace(h)?;
    let phi = anisotropy_factor(t, beta);
    let g = spmm(ng.sym_norm(), h)?.scale(phi);
    Ok((g, phi, t))
}

/// Per-edge aggregation coefficient `α_ij = φ · Ãᵢⱼ / √(d̃ᵢ d̃ⱼ)`.
pub fn aggregation_weight(ng: &NormalizedGraph, phi: f64, i: usize, j: usize) -> Result<f64> {
    let n = ng.num_nodes();
    for node in [i, j] {
        if node >= n {
            return Err(ModelError::NodeOutOfRange { node, n });
        }
    }
    let d = ng.degree();
    Ok(phi * ng.self_looped().get(i, j) / (d[i] * d[j]).sqrt())
}

/// The constant first-layer input `φ⁽⁰⁾ Â X`.
///
/// `X` never depends on the weights, so its diffusion is computed once per
/// dataset rather than once per epoch.
#[derive(Debug, Clone)]
pub struct ModelInput {
    diffused: Matrix,
    phi: f64,
    trace: f64,
}

impl ModelInput {
    pub fn new(config: &ModelConfig, ng: &NormalizedGraph, x: &Matrix) -> Result<Self> {
        config.validate()?;
        if x.cols() != config.layer_dims[0] {
            return Err(ModelError::InputWidth {
                expected: config.layer_dims[0],
                got: x.cols(),
            });
        }
        let trace = ng.smoothness_trace(x)?;
        let phi = gate(config, trace, ng.num_nodes(), x.cols());
        let mut diffused = spmm(ng.sym_norm(), x)?;
        if phi != 1.0 {
            diffused.scale_in_place(phi);
        }
        Ok(Self { diffused, phi, trace })
    }

    pub fn diffused(&self) -> &Matrix {
        &self.diffused
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn trace(&self) -> f64 {
        self.trace
    }
}

fn trace_scale(config: &ModelConfig, n: usize, width: usize) -> f64 {
    if config.trace_normalize {
        (n * width) as f64
    } else {
        1.0
    }
}

fn gate(config: &ModelConfig, trace: f64, n: usize, width: usize) -> f64 {
    match config.kind {
        ModelKind::Gcn => 1.0,
        ModelKind::Agcn => anisotropy_factor(trace / trace_scale(config, n, width), config.beta),
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    /// `Â · H⁽ˡ⁾` for diffused hidden layers (PerLayer mode, ℓ ≥ 1).
    propagated: Option<Matrix>,
    /// Layer input after diffusion, before dropout. `None` for layer 0, whose
    /// input lives in [`ModelInput`].
    input: Option<Matrix>,
    /// Dropout keep mask; `None` when dropout is inactive.
    mask: Option<Vec<bool>>,
    /// Input after dropout, only stored when a mask was applied.
    dropped: Option<Matrix>,
    pre_activation: Matrix,
    phi: f64,
    trace: f64,
}

/// Intermediate values of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    /// Post-ReLU activations `H⁽¹⁾ … H⁽ᴸ⁻¹⁾`.
    hidden: Vec<Matrix>,
    probs: Matrix,
    keep_scale: f64,
    num_nodes: usize,
    dims: Vec<usize>,
}

impl ForwardCache {
    pub fn probabilities(&self) -> &Matrix {
        &self.probs
    }

    /// Gate value applied at each layer (1 for plain layers in InputOnce mode).
    pub fn phis(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.phi).collect()
    }

    /// Smoothness trace of each layer's input (0 where no diffusion happens).
    pub fn traces(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.trace).collect()
    }

    /// Activations after the first hidden layer.
    pub fn first_hidden(&self) -> Option<&Matrix> {
        self.hidden.first()
    }

    pub fn hidden(&self) -> &[Matrix] {
        &self.hidden
    }

    /// `Z⁽ˡ⁾` before the activation of layer `layer`.
    pub fn pre_activation(&self, layer: usize) -> &Matrix {
        &self.layers[layer].pre_activation
    }
}

fn apply_dropout(input: &Matrix, rate: f64, rng: &mut Rng) -> (Vec<bool>, Matrix) {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mut mask = Vec::with_capacity(input.as_slice().len());
    let mut out = input.clone();
    for v in out.as_mut_slice() {
        let kept = rng.uniform() < keep;
        mask.push(kept);
        *v = if kept { *v * scale } else { 0.0 };
    }
    (mask, out)
}

/// Forward pass from raw features.
pub fn forward(
    state: &ModelState,
    ng: &NormalizedGraph,
    x: &Matrix,
    rng: Option<&mut Rng>,
    training: bool,
) -> Result<(Matrix, ForwardCache)> {
    let input = ModelInput::new(&state.config, ng, x)?;
    forward_prepared(state, ng, &input, rng, training)
}

/// Forward pass reusing a precomputed first-layer diffusion.
pub fn forward_prepared(
    state: &ModelState,
    ng: &NormalizedGraph,
    input: &ModelInput,
    mut rng: Option<&mut Rng>,
    training: bool,
) -> Result<(Matrix, ForwardCache)> {
    let cfg = &state.config;
    let n = ng.num_nodes();
    if input.diffused.rows() != n || input.diffused.cols() != cfg.layer_dims[0] {
        return Err(ModelError::InputWidth {
            expected: cfg.layer_dims[0],
            got: input.diffused.cols(),
        });
    }
    let use_dropout = training && cfg.dropout_rate > 0.0;
    if use_dropout && rng.is_none() {
        return Err(ModelError::MissingRng);
    }

    let num_layers = state.weights.len();
    let mut layers = Vec::with_capacity(num_layers);
    let mut hidden: Vec<Matrix> = Vec::with_capacity(num_layers.saturating_sub(1));
    let mut probs = Matrix::zeros(0, 0);

    for (l, w) in state.weights.iter().enumerate() {
        let (propagated, layer_input, phi, trace) = if l == 0 {
            (None, None, input.phi, input.trace)
        } else {
            let h = &hidden[l - 1];
            match cfg.diffusion_mode {
                DiffusionMode::InputOnce => (None, Some(h.clone()), 1.0, 0.0),
                DiffusionMode::PerLayer => {
                    let trace = ng.smoothness_trace(h)?;
                    let phi = gate(cfg, trace, n, h.cols());
                    let prop = spmm(ng.sym_norm(), h)?;
                    let g = if phi == 1.0 { prop.clone() } else { prop.scale(phi) };
                    (Some(prop), Some(g), phi, trace)
                }
            }
        };

        let source = layer_input.as_ref().unwrap_or(&input.diffused);
        let (mask, dropped) = if use_dropout {
            let r = rng.as_deref_mut().expect("checked above");
            let (m, d) = apply_dropout(source, cfg.dropout_rate, r);
            (Some(m), Some(d))
        } else {
            (None, None)
        };
        let z = matmul(dropped.as_ref().unwrap_or(source), w)?;

        if l + 1 == num_layers {
            probs = softmax_rows(&z);
        } else {
            hidden.push(z.map(|v| v.max(0.0)));
        }
        layers.push(LayerCache {
            propagated,
            input: layer_input,
            mask,
            dropped,
            pre_activation: z,
            phi,
            trace,
        });
    }
    probs.ensure_finite("forward")?;

    let cache = ForwardCache {
        layers,
        hidden,
        probs: probs.clone(),
        keep_scale: 1.0 / (1.0 - cfg.dropout_rate),
        num_nodes: n,
        dims: cfg.layer_dims.clone(),
    };
    Ok((probs, cache))
}

fn check_targets(num_nodes: usize, num_classes: usize, targets: &[(usize, usize)]) -> Result<()> {
    if targets.is_empty() {
        return Err(ModelError::EmptyMask);
    }
    for &(node, label) in targets {
        if node >= num_nodes {
            return Err(ModelError::NodeOutOfRange { node, n: num_nodes });
        }
        if label >= num_classes {
            return Err(ModelError::LabelOutOfRange {
                node,
                label,
                classes: num_classes,
            });
        }
    }
    Ok(())
}

/// Summed cross-entropy `−Σ log Ŷ[i, yᵢ]` over `(node, label)` targets.
pub fn cross_entropy(probs: &Matrix, targets: &[(usize, usize)]) -> Result<f64> {
    check_targets(probs.rows(), probs.cols(), targets)?;
    Ok(targets
        .iter()
        .map(|&(i, c)| -probs.get(i, c).max(PROB_FLOOR).ln())
        .sum())
}

/// Training objective: cross-entropy plus the first-layer L2 penalty.
pub fn objective(state: &ModelState, probs: &Matrix, targets: &[(usize, usize)]) -> Result<f64> {
    let ce = cross_entropy(probs, targets)?;
    Ok(ce + 0.5 * state.config.weight_decay * state.weights[0].frobenius_sq())
}

#[derive(Debug, Clone, Copy)]
pub struct BackwardOptions {
    /// Propagate through the dependence of `φ` on the layer input. Only
    /// switched off to demonstrate that the term is needed.
    pub phi_path: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self { phi_path: true }
    }
}

/// Gradients of [`objective`] with respect to every weight matrix.
pub fn backward(
    state: &ModelState,
    ng: &NormalizedGraph,
    input: &ModelInput,
    cache: &ForwardCache,
    targets: &[(usize, usize)],
) -> Result<Vec<Matrix>> {
    backward_with(state, ng, input, cache, targets, BackwardOptions::default())
}

pub fn backward_with(
    state: &ModelState,
    ng: &NormalizedGraph,
    input: &ModelInput,
    cache: &ForwardCache,
    targets: &[(usize, usize)],
    opts: BackwardOptions,
) -> Result<Vec<Matrix>> {
    let cfg = &state.config;
    let n = ng.num_nodes();
    if cache.num_nodes != n || cache.dims != cfg.layer_dims || cache.layers.len() != state.weights.len() {
        return Err(ModelError::StaleCache);
    }
    check_targets(n, cfg.num_classes(), targets)?;

    // d(−log softmax)/dz = Ŷ − Y on labeled rows
    let mut dz = Matrix::zeros(n, cfg.num_classes());
    for &(i, c) in targets {
        let row = dz.row_mut(i);
        for (d, &p) in row.iter_mut().zip(cache.probs.row(i)) {
            *d += p;
        }
        row[c] -= 1.0;
    }

    let mut grads: Vec<Matrix> = Vec::with_capacity(state.weights.len());
    for l in (0..state.weights.len()).rev() {
        let layer = &cache.layers[l];
        let source = layer.input.as_ref().unwrap_or(&input.diffused);
        let used = layer.dropped.as_ref().unwrap_or(source);
        let mut dw = matmul_tn(used, &dz)?;
        if l == 0 {
            if cfg.weight_decay > 0.0 {
                dw.axpy(cfg.weight_decay, &state.weights[0])?;
            }
            grads.push(dw);
            break;
        }
        grads.push(dw);

        // gradient w.r.t. the (post-diffusion, pre-dropout) layer input
        let mut d_in = matmul_nt(&dz, &state.weights[l])?;
        if let Some(mask) = &layer.mask {
            for (v, &kept) in d_in.as_mut_slice().iter_mut().zip(mask) {
                *v = if kept { *v * cache.keep_scale } else { 0.0 };
            }
        }

        let d_h = match (&layer.propagated, cfg.diffusion_mode) {
            (Some(prop), DiffusionMode::PerLayer) => {
                // G = φ Â H; Â is symmetric so Âᵀ = Â
                let mut d_h = spmm(ng.sym_norm(), &d_in)?;
                if layer.phi != 1.0 {
                    d_h.scale_in_place(layer.phi);
                }
                if opts.phi_path && cfg.kind == ModelKind::Agcn {
                    let h = &cache.hidden[l - 1];
                    let c = trace_scale(cfg, n, h.cols());
                    let s = layer.trace / c;
                    // dφ/ds = 2βs·e^(−βs²), ds/dH = 2 L̃ H / c
                    let dphi_ds = 2.0 * cfg.beta * s * (-cfg.beta * s * s).exp();
                    if dphi_ds != 0.0 {
                        let upstream = d_in.dot(prop)?;
                        let dt_dh = ng.smoothness_trace_gradient(h)?;
                        d_h.axpy(upstream * dphi_ds / c, &dt_dh)?;
                    }
                }
                d_h
            }
            _ => d_in,
        };

        // ReLU of the previous layer
        let prev_z = &cache.layers[l - 1].pre_activation;
        dz = d_h;
        for (d, &z) in dz.as_mut_slice().iter_mut().zip(prev_z.as_slice()) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }
    }
    grads.reverse();
    for g in &grads {
        g.ensure_finite("backward")?;
    }
    Ok(grads)
}
