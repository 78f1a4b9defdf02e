//! On-disk dataset directories, feature preprocessing and split sampling.
//!
//! A dataset directory holds five files:
//!
//! ```text
//! meta.json     {"name", "num_nodes", "num_features", "num_classes"}
//! edges.tsv     src<TAB>dst<TAB>weight, 0-indexed, src < dst, sorted
//! features.bin  little-endian f32, row-major, num_nodes × num_features
//! labels.tsv    node<TAB>class for every labeled node, sorted by node
//! splits.json   {"train": [...], "val": [...], "test": [...]}, each ascending
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{build_graph, Graph, GraphError};
use crate::linalg::{Matrix, Rng};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: missing required file", .0.display())]
    Missing(PathBuf),
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{}: expected {expected} bytes, found {found}", path.display())]
    SizeMismatch { path: PathBuf, expected: u64, found: u64 },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}: {source}", path.display())]
    Graph {
        path: PathBuf,
        #[source]
        source: GraphError,
    },
    #[error("invalid dataset: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub name: String,
    pub num_nodes: usize,
    pub num_features: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub graph: Graph,
    pub features: Matrix,
    /// `None` for unlabeled nodes.
    pub labels: Vec<Option<usize>>,
    pub splits: Splits,
    pub num_classes: usize,
    /// Extra training targets from label-set expansion. These may overlap the
    /// validation and test splits; evaluation always uses `labels`.
    pub pseudo_labels: BTreeMap<usize, usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        graph: Graph,
        features: Matrix,
        labels: Vec<Option<usize>>,
        splits: Splits,
        num_classes: usize,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            graph,
            features,
            labels,
            splits,
            num_classes,
            pseudo_labels: BTreeMap::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn meta(&self) -> Meta {
        Meta {
            name: self.name.clone(),
            num_nodes: self.num_nodes(),
            num_features: self.num_features(),
            num_classes: self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        let bad = |msg: String| Err(DataError::Invariant(msg));
        if self.features.rows() != n {
            return bad(format!("{} feature rows for {n} nodes", self.features.rows()));
        }
        if !self.features.is_finite() {
            return bad("non-finite feature value".into());
        }
        if self.labels.len() != n {
            return bad(format!("{} labels for {n} nodes", self.labels.len()));
        }
        if let Some((i, c)) = self
            .labels
            .iter()
            .enumerate()
            .find_map(|(i, l)| l.filter(|&c| c >= self.num_classes).map(|c| (i, c)))
        {
            return bad(format!("node {i} has class {c} outside 0..{}", self.num_classes));
        }
        let mut seen = BTreeSet::new();
        for (name, idx) in [
            ("train", &self.splits.train),
            ("val", &self.splits.val),
            ("test", &self.splits.test),
        ] {
            for &i in idx {
                if i >= n {
                    return bad(format!("{name} split index {i} outside 0..{n}"));
                }
                if !seen.insert(i) {
                    return bad(format!("node {i} appears twice across splits"));
                }
                if self.labels[i].is_none() {
                    return bad(format!("{name} split node {i} has no label"));
                }
            }
        }
        for (&i, &c) in &self.pseudo_labels {
            if i >= n || c >= self.num_classes {
                return bad(format!("pseudo-label ({i}, {c}) out of range"));
            }
        }
        Ok(())
    }

    fn targets(&self, idx: &[usize]) -> Vec<(usize, usize)> {
        idx.iter()
            .map(|&i| (i, self.labels[i].expect("split nodes are labeled")))
            .collect()
    }

    /// Training `(node, label)` pairs: the train split plus any pseudo-labels
    /// on nodes outside it, sorted by node.
    pub fn train_targets(&self) -> Vec<(usize, usize)> {
        let mut t = self.targets(&self.splits.train);
        let train: BTreeSet<usize> = self.splits.train.iter().copied().collect();
        t.extend(
            self.pseudo_labels
                .iter()
                .filter(|(i, _)| !train.contains(i))
                .map(|(&i, &c)| (i, c)),
        );
        t.sort_unstable();
        t
    }

    pub fn val_targets(&self) -> Vec<(usize, usize)> {
        self.targets(&self.splits.val)
    }

    pub fn test_targets(&self) -> Vec<(usize, usize)> {
        self.targets(&self.splits.test)
    }

    pub fn with_pseudo_labels(mut self, pseudo: BTreeMap<usize, usize>) -> Result<Self> {
        self.pseudo_labels = pseudo;
        self.validate()?;
        Ok(self)
    }

    pub fn with_features(mut self, features: Matrix) -> Result<Self> {
        self.features = features;
        self.validate()?;
        Ok(self)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::Missing(path.to_path_buf())
        } else {
            DataError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    String::from_utf8(bytes).map_err(|e| DataError::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: format!("not UTF-8: {e}"),
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a headerless little-endian f32 matrix.
pub fn read_features_bin(path: &Path, rows: usize, cols: usize) -> Result<Matrix> {
    let bytes = read_file(path)?;
    let expected = (rows * cols * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(DataError::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("non-finite value at byte offset {}", pos * 4),
        });
    }
    Ok(Matrix::from_vec(rows, cols, data).expect("length checked"))
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, field: Option<&str>, what: &str) -> Result<T> {
    let raw = field.ok_or_else(|| DataError::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("missing {what}"),
    })?;
    raw.parse().map_err(|_| DataError::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("bad {what} '{raw}'"),
    })
}

fn read_edges(path: &Path, n: usize) -> Result<Graph> {
    let text = read_text(path)?;
    let mut edges = Vec::new();
    let mut prev: Option<(usize, usize)> = None;
    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let i: usize = parse_field(path, lineno, parts.next(), "source")?;
        let j: usize = parse_field(path, lineno, parts.next(), "target")?;
        let w: f64 = parse_field(path, lineno, parts.next(), "weight")?;
        if parts.next().is_some() {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: "expected three tab-separated fields".into(),
            });
        }
        if i >= j {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("edge ({i}, {j}) must have src < dst"),
            });
        }
        if prev.is_some_and(|p| p >= (i, j)) {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: "edges are not sorted".into(),
            });
        }
        prev = Some((i, j));
        edges.push((i, j, w));
    }
    build_graph(n, &edges).map_err(|source| DataError::Graph {
        path: path.to_path_buf(),
        source,
    })
}

fn read_labels(path: &Path, n: usize, num_classes: usize) -> Result<Vec<Option<usize>>> {
    let text = read_text(path)?;
    let mut labels = vec![None; n];
    let mut prev: Option<usize> = None;
    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let node: usize = parse_field(path, lineno, parts.next(), "node")?;
        let class: usize = parse_field(path, lineno, parts.next(), "class")?;
        let err = |msg: String| DataError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        if node >= n {
            return Err(err(format!("node {node} outside 0..{n}")));
        }
        if class >= num_classes {
            return Err(err(format!("class {class} outside 0..{num_classes}")));
        }
        if prev.is_some_and(|p| p >= node) {
            return Err(err("labels are not sorted by node".into()));
        }
        prev = Some(node);
        labels[node] = Some(class);
    }
    Ok(labels)
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta: Meta = read_json(&dir.join("meta.json"))?;
    let graph = read_edges(&dir.join("edges.tsv"), meta.num_nodes)?;
    let features = read_features_bin(&dir.join("features.bin"), meta.num_nodes, meta.num_features)?;
    let labels = read_labels(&dir.join("labels.tsv"), meta.num_nodes, meta.num_classes)?;
    let splits_path = dir.join("splits.json");
    let splits: Splits = read_json(&splits_path)?;
    for (name, idx) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        if idx.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::Parse {
                path: splits_path.clone(),
                line: 0,
                msg: format!("{name} indices are not strictly ascending"),
            });
        }
    }
    Dataset::new(meta.name, graph, features, labels, splits, meta.num_classes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

pub fn write_features_bin(path: &Path, features: &Matrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(features.as_slice().len() * 4);
    for &v in features.as_slice() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(path, &bytes)
}

/// Writes `ds` as a dataset directory. Features are narrowed to f32 and
/// pseudo-labels are not persisted.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;

    let mut meta = serde_json::to_string_pretty(&ds.meta()).expect("meta serializes");
    meta.push('\n');
    write_file(&dir.join("meta.json"), meta.as_bytes())?;

    let mut edges = String::new();
    for (i, j, w) in ds.graph.edges() {
        edges.push_str(&format!("{i}\t{j}\t{w}\n"));
    }
    write_file(&dir.join("edges.tsv"), edges.as_bytes())?;

    write_features_bin(&dir.join("features.bin"), &ds.features)?;

    let mut labels = String::new();
    for (i, l) in ds.labels.iter().enumerate() {
        if let Some(c) = l {
            labels.push_str(&format!("{i}\t{c}\n"));
        }
    }
    write_file(&dir.join("labels.tsv"), labels.as_bytes())?;

    let mut splits = ds.splits.clone();
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    let mut text = serde_json::to_string(&splits).expect("splits serialize");
    text.push('\n');
    write_file(&dir.join("splits.json"), text.as_bytes())
}

/// Divides each nonzero row by its 1-norm.
pub fn row_normalize(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm: f64 = row.iter().map(|v| v.abs()).sum();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// `|train| / n`.
pub fn label_rate(ds: &Dataset) -> f64 {
    ds.splits.train.len() as f64 / ds.num_nodes() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { val: 500, test: 1000 }
    }
}

/// Draws a fresh class-stratified train split of `round(fraction · n)` nodes
/// and resamples validation and test sets from the remaining labeled nodes.
///
/// Returns the new dataset and any warnings (classes left out of the
/// training set, shrunken validation or test sets).
pub fn subsample_split(
    ds: &Dataset,
    train_fraction: f64,
    rng: &mut Rng,
    sizes: SplitSizes,
) -> Result<(Dataset, Vec<String>)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(DataError::Invariant(format!(
            "train fraction must lie in (0, 1], got {train_fraction}"
        )));
    }
    let mut warnings = Vec::new();
    let mut pool: Vec<usize> = (0..ds.num_nodes()).filter(|&i| ds.labels[i].is_some()).collect();
    rng.shuffle(&mut pool);

    let target = ((train_fraction * ds.num_nodes() as f64).round() as usize).clamp(1, pool.len().max(1));

    // one node per class first (in shuffled order), then fill from the pool
    let mut chosen = BTreeSet::new();
    let mut covered = vec![false; ds.num_classes];
    for &i in &pool {
        if chosen.len() == target {
            break;
        }
        let c = ds.labels[i].unwrap();
        if !covered[c] {
            covered[c] = true;
            chosen.insert(i);
        }
    }
    let missing = covered.iter().filter(|&&c| !c).count();
    if missing > 0 {
        let msg = format!("{missing} class(es) absent from the {target}-node training split");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    for &i in &pool {
        if chosen.len() >= target {
            break;
        }
        chosen.insert(i);
    }

    let rest: Vec<usize> = pool.iter().copied().filter(|i| !chosen.contains(i)).collect();
    let val_len = sizes.val.min(rest.len());
    let test_len = sizes.test.min(rest.len() - val_len);
    if val_len < sizes.val || test_len < sizes.test {
        let msg = format!(
            "only {} labeled nodes left; validation/test shrunk to {val_len}/{test_len}",
            rest.len()
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let mut val = rest[..val_len].to_vec();
    let mut test = rest[val_len..val_len + test_len].to_vec();
    val.sort_unstable();
    test.sort_unstable();

    let mut out = ds.clone();
    out.splits = Splits {
        train: chosen.into_iter().collect(),
        val,
        test,
    };
    out.pseudo_labels.clear();
    out.validate()?;
    Ok((out, warnings))
}
