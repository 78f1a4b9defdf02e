//! Independent oracles and synthetic fixtures shared by the integration tests.
//!
//! Nothing here calls into the code path it is used to check: traces are
//! evaluated from a dense Laplacian built straight from the edge list,
//! gradients by central differences, linear systems by Gaussian elimination
//! and tail probabilities by adaptive Simpson quadrature.

#![allow(dead_code, clippy::needless_range_loop, clippy::too_many_arguments)]

use agcn::data::{Dataset, Splits};
use agcn::graph::build_graph;
use agcn::graph::normalize;
use agcn::linalg::{Matrix, Rng};
use agcn::model::{
    backward_with, forward, forward_prepared, objective, BackwardOptions, DiffusionMode, ModelConfig, ModelInput,
    ModelKind, ModelState,
};
use agcn::NormalizedGraph;

pub fn random_edges(rng: &mut Rng, n: usize, p: f64) -> Vec<(usize, usize, f64)> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.uniform() < p {
                edges.push((i, j, rng.uniform_range(0.2, 2.0)));
            }
        }
    }
    edges
}

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.uniform_range(-scale, scale)).collect(),
    )
    .unwrap()
}

/// Dense `D̃ − Ã` straight from an edge list.
pub fn dense_laplacian(n: usize, edges: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; n]; n];
    for &(i, j, w) in edges {
        a[i][j] += w;
        a[j][i] += w;
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            l[i][j] = if i == j { deg[i] - a[i][j] } else { -a[i][j] };
        }
    }
    l
}

/// `tr(Hᵀ L H)` by explicit products.
pub fn dense_trace(l: &[Vec<f64>], h: &Matrix) -> f64 {
    let n = l.len();
    let mut total = 0.0;
    for c in 0..h.cols() {
        for i in 0..n {
            let mut lh = 0.0;
            for j in 0..n {
                lh += l[i][j] * h.get(j, c);
            }
            total += h.get(i, c) * lh;
        }
    }
    total
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Objective of a dropout-free forward pass.
pub fn eval_objective(state: &ModelState, ng: &NormalizedGraph, input: &ModelInput, targets: &[(usize, usize)]) -> f64 {
    let (probs, _) = forward_prepared(state, ng, input, None, false).unwrap();
    objective(state, &probs, targets).unwrap()
}

/// Central-difference gradient of the objective w.r.t. every weight.
pub fn finite_difference_grads(
    state: &ModelState,
    ng: &NormalizedGraph,
    input: &ModelInput,
    targets: &[(usize, usize)],
    step: f64,
) -> Vec<Matrix> {
    let mut probe = state.clone();
    let mut out = Vec::new();
    for l in 0..state.weights.len() {
        let (r, c) = state.weights[l].shape();
        let mut g = Matrix::zeros(r, c);
        for k in 0..r * c {
            let orig = probe.weights[l].as_slice()[k];
            probe.weights[l].as_mut_slice()[k] = orig + step;
            let up = eval_objective(&probe, ng, input, targets);
            probe.weights[l].as_mut_slice()[k] = orig - step;
            let down = eval_objective(&probe, ng, input, targets);
            probe.weights[l].as_mut_slice()[k] = orig;
            g.as_mut_slice()[k] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference for tiny gradients.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff = a.sub(b).unwrap().frobenius_sq().sqrt();
    let scale = a.frobenius_sq().sqrt().max(b.frobenius_sq().sqrt());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

pub fn agcn_config(dims: Vec<usize>, mode: DiffusionMode, beta: f64, wd: f64) -> ModelConfig {
    ModelConfig {
        kind: ModelKind::Agcn,
        layer_dims: dims,
        beta,
        diffusion_mode: mode,
        dropout_rate: 0.0,
        weight_decay: wd,
        trace_normalize: false,
    }
}

pub struct GradInstance {
    pub state: ModelState,
    pub ng: NormalizedGraph,
    pub input: ModelInput,
    pub targets: Vec<(usize, usize)>,
}

const KINK_MARGIN: f64 = 1e-3;
const GATE_RANGE: (f64, f64) = (1e-2, 1.0 - 1e-6);

/// Random instance with n ≤ 10 whose hidden layers are neither dead nor
/// perfectly smooth, whose pre-activations stay clear of zero and whose
/// hidden-layer gates are neither vanishing nor saturated.
pub fn grad_instance(rng: &mut Rng, mode: DiffusionMode) -> GradInstance {
    loop {
        let inst = draw_instance(rng, mode);
        let (_, cache) = forward_prepared(&inst.state, &inst.ng, &inst.input, None, false).unwrap();
        let alive = cache.hidden().iter().all(|h| h.as_slice().iter().any(|&v| v > 0.0));
        // keep ReLU kinks out of reach of the finite-difference step
        let smooth =
            (0..cache.hidden().len()).all(|l| cache.pre_activation(l).as_slice().iter().all(|z| z.abs() > KINK_MARGIN));
        let gates_live = mode == DiffusionMode::InputOnce
            || cache.phis()[1..]
                .iter()
                .all(|&p| (GATE_RANGE.0..=GATE_RANGE.1).contains(&p));
        if alive && smooth && gates_live {
            return inst;
        }
    }
}

/// In PerLayer mode β is tuned so the first hidden layer's gate sits in its
/// sensitive range (β t² ≈ 1).
fn draw_instance(rng: &mut Rng, mode: DiffusionMode) -> GradInstance {
    let n = 4 + rng.below(7);
    let mut edges = random_edges(rng, n, 0.4);
    if edges.is_empty() {
        edges.push((0, 1, 1.0));
    }
    let ng = normalize(&build_graph(n, &edges).unwrap());
    let dims = if rng.uniform() < 0.5 {
        vec![3, 4, 2]
    } else {
        vec![3, 5, 4, 2]
    };
    let x = random_matrix(rng, n, 3, 1.0);
    let mut cfg = agcn_config(dims, mode, 0.5, 0.01);
    let mut state = ModelState::init(cfg.clone(), rng).unwrap();
    for w in &mut state.weights {
        w.scale_in_place(2.0);
    }
    if mode == DiffusionMode::PerLayer {
        for _ in 0..30 {
            let (_, cache) = forward(&state, &ng, &x, None, false).unwrap();
            let t = cache.traces()[1];
            if t > 0.0 {
                cfg.beta = 1.0 / (t * t);
                state.config.beta = cfg.beta;
            }
        }
    }
    let input = ModelInput::new(&state.config, &ng, &x).unwrap();
    let mut targets = Vec::new();
    for i in 0..n {
        if rng.uniform() < 0.7 {
            targets.push((i, rng.below(2)));
        }
    }
    if targets.is_empty() {
        targets.push((0, 1));
    }
    GradInstance {
        state,
        ng,
        input,
        targets,
    }
}

pub fn max_layer_error(inst: &GradInstance, opts: BackwardOptions) -> f64 {
    let (_, cache) = forward_prepared(&inst.state, &inst.ng, &inst.input, None, false).unwrap();
    let analytic = backward_with(&inst.state, &inst.ng, &inst.input, &cache, &inst.targets, opts).unwrap();
    let numeric = finite_difference_grads(&inst.state, &inst.ng, &inst.input, &inst.targets, 1e-5);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        return left + right + (left + right - whole) / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`, seeded with 64 panels
/// so narrow peaks are not missed by the first coarse estimate.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    const PANELS: usize = 64;
    let h = (b - a) / PANELS as f64;
    (0..PANELS)
        .map(|k| {
            let (lo, hi) = (
                a + k as f64 * h,
                if k + 1 == PANELS { b } else { a + (k + 1) as f64 * h },
            );
            let (fa, fb) = (f(lo), f(hi));
            let fm = f(0.5 * (lo + hi));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            simpson(f, lo, hi, fa, fm, fb, whole, tol / PANELS as f64, 40)
        })
        .sum()
}

/// `P(F > f)` for F(d1, d2) by integrating the F density, written in the
/// beta variable `t = d1 f / (d1 f + d2)` with `t = u²` to remove the
/// endpoint singularity when `d1 = 1`. Requires `d2 ≥ 2`.
pub fn f_tail_by_quadrature(f: f64, d1: f64, d2: f64) -> f64 {
    let (a, b) = (d1 / 2.0, d2 / 2.0);
    let kernel = |u: f64| {
        let t = u * u;
        2.0 * u.powf(2.0 * a - 1.0) * (1.0 - t).powf(b - 1.0)
    };
    let x = d1 * f / (d1 * f + d2);
    let total = integrate(&kernel, 0.0, 1.0, 1e-13);
    let upper = integrate(&kernel, x.sqrt(), 1.0, 1e-13);
    upper / total
}

/// Two 5-node cliques joined by the edge 4–5; one-hot node-id features; the
/// clique is the label.
pub fn two_cliques() -> Dataset {
    let mut edges = Vec::new();
    for base in [0, 5] {
        for i in 0..5 {
            for j in i + 1..5 {
                edges.push((base + i, base + j, 1.0));
            }
        }
    }
    edges.push((4, 5, 1.0));
    let g = build_graph(10, &edges).unwrap();
    let labels = (0..10).map(|i| Some(i / 5)).collect();
    let splits = Splits {
        train: vec![0, 9],
        val: vec![1, 8],
        test: vec![2, 3, 4, 5, 6, 7],
    };
    Dataset::new("two-cliques", g, Matrix::identity(10), labels, splits, 2).unwrap()
}

/// Stochastic block model with noisy sparse bag-of-words style features.
///
/// Each class owns a block of `words_per_class` feature columns; a node
/// switches on `active` words, each drawn from its class block with
/// probability `signal` and uniformly otherwise. Rows are 1-normalized.
/// Splits: `train_per_class` nodes per class, then 500 validation and the
/// rest (up to 1000) test.
pub struct SbmSpec {
    pub n: usize,
    pub classes: usize,
    pub avg_degree_in: f64,
    pub avg_degree_out: f64,
    pub words_per_class: usize,
    pub active: usize,
    pub signal: f64,
    pub train_per_class: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SbmSpec {
    fn default() -> Self {
        Self {
            n: 600,
            classes: 3,
            avg_degree_in: 4.0,
            avg_degree_out: 1.0,
            words_per_class: 20,
            active: 6,
            signal: 0.5,
            train_per_class: 10,
            val: 150,
            test: 300,
            seed: 1,
        }
    }
}

pub fn sbm_dataset(spec: &SbmSpec) -> Dataset {
    let mut rng = Rng::new(spec.seed);
    let n = spec.n;
    let labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    let per_class = n as f64 / spec.classes as f64;
    let p_in = spec.avg_degree_in / per_class;
    let p_out = spec.avg_degree_out / (n as f64 - per_class);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] { p_in } else { p_out };
            if rng.uniform() < p {
                edges.push((i, j, 1.0));
            }
        }
    }
    let f = spec.words_per_class * spec.classes;
    let mut x = Matrix::zeros(n, f);
    for i in 0..n {
        for _ in 0..spec.active {
            let col = if rng.uniform() < spec.signal {
                labels[i] * spec.words_per_class + rng.below(spec.words_per_class)
            } else {
                rng.below(f)
            };
            x.set(i, col, 1.0);
        }
    }
    let x = agcn::data::row_normalize(&x);

    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut counts = vec![0; spec.classes];
    let mut train = Vec::new();
    let mut rest = Vec::new();
    for &i in &order {
        if counts[labels[i]] < spec.train_per_class {
            counts[labels[i]] += 1;
            train.push(i);
        } else {
            rest.push(i);
        }
    }
    let mut val = rest[..spec.val].to_vec();
    let mut test = rest[spec.val..(spec.val + spec.test).min(rest.len())].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    let g = build_graph(n, &edges).unwrap();
    Dataset::new(
        "sbm",
        g,
        x,
        labels.into_iter().map(Some).collect(),
        Splits { train, val, test },
        spec.classes,
    )
    .unwrap()
}
