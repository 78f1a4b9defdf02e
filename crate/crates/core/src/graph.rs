//! Undirected weighted graphs and the normalized operators built from them.

use thiserror::Error;

use crate::linalg::{spmm, CsrMatrix, LinalgError, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("edge ({i}, {j}) references a node outside 0..{n}")]
    IndexOutOfRange { i: usize, j: usize, n: usize },
    #[error("self-loop on node {0} in input edge list")]
    SelfLoop(usize),
    #[error("duplicate edge between {0} and {1}")]
    DuplicateEdge(usize, usize),
    #[error("edge ({i}, {j}) has non-positive or non-finite weight {w}")]
    NonPositiveWeight { i: usize, j: usize, w: f64 },
    #[error("graph must have at least one node")]
    Empty,
    #[error("k = {k} needs more than k points, got {n}")]
    TooFewPoints { k: usize, n: usize },
    #[error("k must be positive")]
    ZeroK,
    #[error("non-finite feature at row {0}")]
    NonFiniteFeature(usize),
    #[error("expected {expected} rows, got {got}")]
    RowMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Symmetric, self-loop-free weighted graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    adjacency: CsrMatrix,
}

/// Builds a graph from undirected edges, each listed once.
pub fn build_graph(n: usize, edges: &[(usize, usize, f64)]) -> Result<Graph> {
    if n == 0 {
        return Err(GraphError::Empty);
    }
    let mut seen = std::collections::HashSet::with_capacity(edges.len());
    let mut trip = Vec::with_capacity(edges.len() * 2);
    for &(i, j, w) in edges {
        if i >= n || j >= n {
            return Err(GraphError::IndexOutOfRange { i, j, n });
        }
        if i == j {
            return Err(GraphError::SelfLoop(i));
        }
        if !(w > 0.0 && w.is_finite()) {
            return Err(GraphError::NonPositiveWeight { i, j, w });
        }
        if !seen.insert((i.min(j), i.max(j))) {
            return Err(GraphError::DuplicateEdge(i.min(j), i.max(j)));
        }
        trip.push((i, j, w));
        trip.push((j, i, w));
    }
    Ok(Graph {
        n,
        adjacency: CsrMatrix::from_triplets(n, n, &trip),
    })
}

impl Graph {
    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.n
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    /// Undirected edges `(i, j, w)` with `i < j`, sorted lexicographically.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        self.adjacency.iter().filter(|&(i, j, _)| i < j).collect()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        self.adjacency.row(i).0
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        assert_eq!(perm.len(), self.n);
        let edges: Vec<_> = self
            .edges()
            .into_iter()
            .map(|(i, j, w)| (perm[i], perm[j], w))
            .collect();
        build_graph(self.n, &edges).expect("permutation of a valid graph is valid")
    }

    /// Connected component id for every node, numbered by smallest member.
    pub fn components(&self) -> Vec<usize> {
        let mut comp = vec![usize::MAX; self.n];
        let mut next = 0;
        for start in 0..self.n {
            if comp[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            comp[start] = next;
            while let Some(u) = stack.pop() {
                for &v in self.neighbors(u) {
                    if comp[v] == usize::MAX {
                        comp[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        comp
    }
}

/// A graph together with Ã = A + I, its degrees, Â = D̃^-1/2 Ã D̃^-1/2 and L̃ = D̃ − Ã.
#[derive(Debug, Clone)]
pub struct NormalizedGraph {
    base: Graph,
    self_looped: CsrMatrix,
    degree: Vec<f64>,
    sym_norm: CsrMatrix,
    laplacian: CsrMatrix,
}

pub fn normalize(g: &Graph) -> NormalizedGraph {
    NormalizedGraph::new(g.clone())
}

impl NormalizedGraph {
    pub fn new(base: Graph) -> Self {
        let n = base.n;
        let mut looped = Vec::with_capacity(base.adjacency.nnz() + n);
        for (i, j, w) in base.adjacency.iter() {
            looped.push((i, j, w));
        }
        for i in 0..n {
            looped.push((i, i, 1.0));
        }
        let self_looped = CsrMatrix::from_triplets(n, n, &looped);
        let degree = self_looped.row_sums();
        let sym: Vec<_> = self_looped
            .iter()
            .map(|(i, j, w)| (i, j, w / (degree[i] * degree[j]).sqrt()))
            .collect();
        let sym_norm = CsrMatrix::from_triplets(n, n, &sym);

        // L̃ = D̃ − Ã: the +1 self-loop cancels one unit of degree on the diagonal
        let lap: Vec<_> = self_looped
            .iter()
            .map(|(i, j, w)| if i == j { (i, j, degree[i] - w) } else { (i, j, -w) })
            .collect();
        let laplacian = CsrMatrix::from_triplets(n, n, &lap);

        Self {
            base,
            self_looped,
            degree,
            sym_norm,
            laplacian,
        }
    }

    pub fn base(&self) -> &Graph {
        &self.base
    }

    pub fn num_nodes(&self) -> usize {
        self.base.n
    }

    pub fn self_looped(&self) -> &CsrMatrix {
        &self.self_looped
    }

    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    pub fn sym_norm(&self) -> &CsrMatrix {
        &self.sym_norm
    }

    pub fn laplacian(&self) -> &CsrMatrix {
        &self.laplacian
    }

    fn check_rows(&self, h: &Matrix) -> Result<()> {
        if h.rows() != self.base.n {
            return Err(GraphError::RowMismatch {
                expected: self.base.n,
                got: h.rows(),
            });
        }
        Ok(())
    }

    /// tr(Hᵀ L̃ H) evaluated as ½ Σᵢⱼ Ãᵢⱼ ‖hᵢ − hⱼ‖² over stored edges.
    pub fn smoothness_trace(&self, h: &Matrix) -> Result<f64> {
        self.check_rows(h)?;
        let adj = &self.base.adjacency;
        let mut total = 0.0;
        for i in 0..self.base.n {
            let (cols, vals) = adj.row(i);
            let hi = h.row(i);
            for (&j, &w) in cols.iter().zip(vals) {
                // each undirected pair appears twice; take it once at full weight
                if j <= i {
                    continue;
                }
                let d2: f64 = hi.iter().zip(h.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                total += w * d2;
            }
        }
        Ok(total)
    }

    /// ∂ tr(Hᵀ L̃ H) / ∂H = 2 L̃ H.
    pub fn smoothness_trace_gradient(&self, h: &Matrix) -> Result<Matrix> {
        self.check_rows(h)?;
        let mut g = spmm(&self.laplacian, h)?;
        g.scale_in_place(2.0);
        Ok(g)
    }
}

/// Symmetrized k-nearest-neighbor graph under Euclidean distance, unit weights.
///
/// Each node links to its `k` closest other nodes (distance ties go to the
/// smaller index); the directed relation is then made undirected by union.
pub fn knn_graph(x: &Matrix, k: usize) -> Result<Graph> {
    use rayon::prelude::*;

    let n = x.rows();
    if k == 0 {
        return Err(GraphError::ZeroK);
    }
    if k >= n {
        return Err(GraphError::TooFewPoints { k, n });
    }
    if let Some(bad) = (0..n).find(|&i| x.row(i).iter().any(|v| !v.is_finite())) {
        return Err(GraphError::NonFiniteFeature(bad));
    }

    let lists: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let d2: f64 = xi.iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d2, j)
                })
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            cand.select_nth_unstable_by(k - 1, cmp);
            let mut top: Vec<_> = cand[..k].to_vec();
            top.sort_by(cmp);
            top.into_iter().map(|(_, j)| j).collect()
        })
        .collect();

    let mut pairs = std::collections::BTreeSet::new();
    for (i, list) in lists.iter().enumerate() {
        for &j in list {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    let edges: Vec<_> = pairs.into_iter().map(|(i, j)| (i, j, 1.0)).collect();
    build_graph(n, &edges)
}
