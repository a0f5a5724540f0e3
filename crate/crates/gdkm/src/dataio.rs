//! Dataset ingestion, preprocessing and persistence.
//!
//! On-disk dataset format (one directory per dataset):
//!
//! - `features.csv`  — P rows of comma-separated reals
//! - `edges.txt`     — one `u v` pair per line, 0-indexed, undirected
//! - `labels.csv`    — one integer per node, or `graph_id,label` rows for
//!   graph-level tasks
//! - `splits.json`   — `{"train":[..],"val":[..],"test":[..]}` or a list of
//!   such folds
//! - `graph_id.csv`  — optional; one graph id per node row (its presence
//!   switches the dataset to a graph-classification task)
//!
//! Kernels persist in a binary container: magic `GDKM`, u32 version, u32
//! rows, u32 cols, little-endian f64 payload, trailing FNV-1a checksum.

use crate::graphops::{rng_for, EdgeList, RngPurpose};
use crate::numerics::Mat;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}:{line}: parse error: {message}")]
    ParseError {
        file: String,
        line: usize,
        message: String,
    },
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("io error on {path}: {source}")]
    IoError {
        path: String,
        source: std::io::Error,
    },
    #[error("checksum mismatch in {0}")]
    ChecksumMismatch(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::IoError {
        path: path.display().to_string(),
        source,
    }
}

/// Node- or graph-level classification task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Node,
    Graph,
}

/// Train/validation/test index sets over task units.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Splits {
    Single(Split),
    Folds(Vec<Split>),
}

impl Splits {
    pub fn folds(&self) -> Vec<&Split> {
        match self {
            Splits::Single(s) => vec![s],
            Splits::Folds(f) => f.iter().collect(),
        }
    }

    pub fn primary(&self) -> &Split {
        match self {
            Splits::Single(s) => s,
            Splits::Folds(f) => &f[0],
        }
    }
}

/// A loaded graph dataset: features, labels, edges, splits.
#[derive(Debug, Clone)]
pub struct GraphDataset {
    pub name: String,
    pub task: Task,
    /// P x nu0 feature matrix (node-level even for graph tasks).
    pub features: Mat,
    /// Unit-level labels: one per node, or one per graph.
    pub labels: Vec<usize>,
    pub edges: EdgeList,
    /// Node -> graph assignment for graph tasks.
    pub graph_ids: Option<Vec<usize>>,
    pub splits: Splits,
    pub num_classes: usize,
}

impl GraphDataset {
    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn num_units(&self) -> usize {
        self.labels.len()
    }

    pub fn num_graphs(&self) -> Option<usize> {
        self.graph_ids
            .as_ref()
            .map(|g| g.iter().max().map_or(0, |m| m + 1))
    }

    fn validate(&self) -> Result<()> {
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(DataError::SchemaError(
                "features contain non-finite values".into(),
            ));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(DataError::SchemaError(format!(
                "label {bad} outside 0..{}",
                self.num_classes
            )));
        }
        let units = self.num_units();
        for split in self.splits.folds() {
            let mut seen = vec![false; units];
            for (name, idx) in [
                ("train", &split.train),
                ("val", &split.val),
                ("test", &split.test),
            ] {
                for &i in idx {
                    if i >= units {
                        return Err(DataError::SchemaError(format!(
                            "{name} split index {i} outside 0..{units}"
                        )));
                    }
                    if seen[i] {
                        return Err(DataError::SchemaError(format!(
                            "unit {i} appears in more than one split"
                        )));
                    }
                    seen[i] = true;
                }
            }
        }
        if let Some(ids) = &self.graph_ids {
            if ids.len() != self.num_nodes() {
                return Err(DataError::SchemaError(format!(
                    "graph_id has {} rows for {} nodes",
                    ids.len(),
                    self.num_nodes()
                )));
            }
        }
        Ok(())
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let content = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(content.lines().map(|s| s.to_string()).collect())
}

fn parse_features(path: &Path) -> Result<Mat> {
    let lines = read_lines(path)?;
    let rows: Vec<&String> = lines.iter().filter(|l| !l.trim().is_empty()).collect();
    if rows.is_empty() {
        return Err(DataError::SchemaError(format!(
            "{} is empty",
            path.display()
        )));
    }
    let cols = rows[0].split(',').count();
    let mut m = Mat::zeros((rows.len(), cols));
    for (i, line) in rows.iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(DataError::ParseError {
                file: path.display().to_string(),
                line: i + 1,
                message: format!("expected {cols} fields, found {}", fields.len()),
            });
        }
        for (j, f) in fields.iter().enumerate() {
            m[[i, j]] = f.trim().parse::<f64>().map_err(|e| DataError::ParseError {
                file: path.display().to_string(),
                line: i + 1,
                message: format!("field {}: {e}", j + 1),
            })?;
        }
    }
    Ok(m)
}

fn parse_edges(path: &Path, num_nodes: usize) -> Result<EdgeList> {
    let lines = read_lines(path)?;
    let mut pairs = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let mut it = t.split_whitespace();
        let parse = |s: Option<&str>, what: &str| -> Result<usize> {
            s.ok_or_else(|| DataError::ParseError {
                file: path.display().to_string(),
                line: i + 1,
                message: format!("missing {what}"),
            })?
            .parse::<usize>()
            .map_err(|e| DataError::ParseError {
                file: path.display().to_string(),
                line: i + 1,
                message: format!("{what}: {e}"),
            })
        };
        let u = parse(it.next(), "source node")?;
        let v = parse(it.next(), "target node")?;
        if u >= num_nodes || v >= num_nodes {
            return Err(DataError::SchemaError(format!(
                "{}:{}: edge ({u},{v}) references a node outside 0..{num_nodes}",
                path.display(),
                i + 1
            )));
        }
        pairs.push((u, v));
    }
    EdgeList::new(&pairs, num_nodes)
        .map_err(|e| DataError::SchemaError(format!("{}: {e}", path.display())))
}

fn parse_node_labels(path: &Path, num_nodes: usize) -> Result<Vec<usize>> {
    let lines = read_lines(path)?;
    let rows: Vec<&String> = lines.iter().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != num_nodes {
        return Err(DataError::SchemaError(format!(
            "{} has {} labels for {} nodes",
            path.display(),
            rows.len(),
            num_nodes
        )));
    }
    rows.iter()
        .enumerate()
        .map(|(i, line)| {
            line.trim()
                .parse::<usize>()
                .map_err(|e| DataError::ParseError {
                    file: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

fn parse_graph_labels(path: &Path) -> Result<BTreeMap<usize, usize>> {
    let lines = read_lines(path)?;
    let mut map = BTreeMap::new();
    for (i, line) in lines.iter().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let mut it = t.split(',');
        let parse = |s: Option<&str>, what: &str| -> Result<usize> {
            s.ok_or_else(|| DataError::ParseError {
                file: path.display().to_string(),
                line: i + 1,
                message: format!("missing {what}"),
            })?
            .trim()
            .parse::<usize>()
            .map_err(|e| DataError::ParseError {
                file: path.display().to_string(),
                line: i + 1,
                message: format!("{what}: {e}"),
            })
        };
        let g = parse(it.next(), "graph id")?;
        let l = parse(it.next(), "label")?;
        map.insert(g, l);
    }
    Ok(map)
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum SplitsJson {
    Single(Split),
    Folds(Vec<Split>),
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<GraphDataset> {
    let need = |name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        if !p.exists() {
            return Err(DataError::SchemaError(format!(
                "missing required file {}",
                p.display()
            )));
        }
        Ok(p)
    };
    let features = parse_features(&need("features.csv")?)?;
    let num_nodes = features.nrows();
    let edges = parse_edges(&need("edges.txt")?, num_nodes)?;
    let graph_id_path = dir.join("graph_id.csv");
    let (task, graph_ids) = if graph_id_path.exists() {
        let ids = parse_node_labels(&graph_id_path, num_nodes)?;
        (Task::Graph, Some(ids))
    } else {
        (Task::Node, None)
    };
    let labels = match (&task, &graph_ids) {
        (Task::Node, _) => parse_node_labels(&need("labels.csv")?, num_nodes)?,
        (Task::Graph, Some(ids)) => {
            let map = parse_graph_labels(&need("labels.csv")?)?;
            let num_graphs = ids.iter().max().map_or(0, |m| m + 1);
            let mut labels = Vec::with_capacity(num_graphs);
            for g in 0..num_graphs {
                match map.get(&g) {
                    Some(&l) => labels.push(l),
                    None => {
                        return Err(DataError::SchemaError(format!(
                            "labels.csv has no label for graph {g}"
                        )))
                    }
                }
            }
            labels
        }
        _ => unreachable!(),
    };
    let splits_path = need("splits.json")?;
    let raw = std::fs::read_to_string(&splits_path).map_err(io_err(&splits_path))?;
    let splits = match serde_json::from_str::<SplitsJson>(&raw) {
        Ok(SplitsJson::Single(s)) => Splits::Single(s),
        Ok(SplitsJson::Folds(f)) => Splits::Folds(f),
        Err(e) => {
            return Err(DataError::SchemaError(format!(
                "{}: {e}",
                splits_path.display()
            )))
        }
    };
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let ds = GraphDataset {
        name: dir
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "dataset".into()),
        task,
        features,
        labels,
        edges,
        graph_ids,
        splits,
        num_classes,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes a dataset directory in the documented format.
pub fn save_dataset(dir: &Path, ds: &GraphDataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut feat = String::new();
    for i in 0..ds.features.nrows() {
        let row: Vec<String> = (0..ds.features.ncols())
            .map(|j| format!("{}", ds.features[[i, j]]))
            .collect();
        feat.push_str(&row.join(","));
        feat.push('\n');
    }
    std::fs::write(dir.join("features.csv"), feat).map_err(io_err(dir))?;
    let mut edges = String::new();
    for &(u, v) in ds.edges.edges() {
        edges.push_str(&format!("{u} {v}\n"));
    }
    std::fs::write(dir.join("edges.txt"), edges).map_err(io_err(dir))?;
    let mut labels = String::new();
    match ds.task {
        Task::Node => {
            for &l in &ds.labels {
                labels.push_str(&format!("{l}\n"));
            }
        }
        Task::Graph => {
            for (g, &l) in ds.labels.iter().enumerate() {
                labels.push_str(&format!("{g},{l}\n"));
            }
            let ids = ds.graph_ids.as_ref().expect("graph task carries graph ids");
            let mut gid = String::new();
            for &g in ids {
                gid.push_str(&format!("{g}\n"));
            }
            std::fs::write(dir.join("graph_id.csv"), gid).map_err(io_err(dir))?;
        }
    }
    std::fs::write(dir.join("labels.csv"), labels).map_err(io_err(dir))?;
    let splits_json = match &ds.splits {
        Splits::Single(s) => serde_json::to_string_pretty(s).unwrap(),
        Splits::Folds(f) => serde_json::to_string_pretty(f).unwrap(),
    };
    std::fs::write(dir.join("splits.json"), splits_json).map_err(io_err(dir))?;
    Ok(())
}

/// Feature preprocessing rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureScaling {
    /// Divide each row by its sum of squares (the default).
    SumSquares,
    /// Divide each row by its Euclidean norm (bounds kernel entries in [-1,1]).
    Norm,
    None,
}

/// Scales feature rows: `x_il' = x_il / sum_m x_im^2` (all-zero rows are
/// left unchanged). The `Norm` alternative divides by the root instead.
pub fn scale_features(x: &Mat, rule: FeatureScaling) -> Mat {
    let mut out = x.clone();
    if rule == FeatureScaling::None {
        return out;
    }
    for i in 0..x.nrows() {
        let ss: f64 = (0..x.ncols()).map(|j| x[[i, j]] * x[[i, j]]).sum();
        if ss == 0.0 {
            continue;
        }
        let denom = match rule {
            FeatureScaling::SumSquares => ss,
            FeatureScaling::Norm => ss.sqrt(),
            FeatureScaling::None => unreachable!(),
        };
        for j in 0..x.ncols() {
            out[[i, j]] /= denom;
        }
    }
    out
}

const KERNEL_MAGIC: &[u8; 4] = b"GDKM";
const KERNEL_VERSION: u32 = 1;

/// Writes a matrix to the binary kernel container (bit-exact round trip).
pub fn save_kernel(path: &Path, k: &Mat) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * k.len());
    buf.extend_from_slice(KERNEL_MAGIC);
    buf.extend_from_slice(&KERNEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(k.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(k.ncols() as u32).to_le_bytes());
    for v in k.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let checksum = crate::dkm::checkpoint_fnv1a(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    std::fs::File::create(path)
        .map_err(io_err(path))?
        .write_all(&buf)
        .map_err(io_err(path))?;
    Ok(())
}

/// Reads a matrix from the binary kernel container, verifying the checksum
/// and the header dimensions against the payload length.
pub fn load_kernel(path: &Path) -> Result<Mat> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    if bytes.len() < 24 {
        return Err(DataError::ChecksumMismatch(path.display().to_string()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if crate::dkm::checkpoint_fnv1a(body) != stored {
        return Err(DataError::ChecksumMismatch(path.display().to_string()));
    }
    if &body[0..4] != KERNEL_MAGIC {
        return Err(DataError::SchemaError(format!(
            "{}: bad kernel magic",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != KERNEL_VERSION {
        return Err(DataError::SchemaError(format!(
            "{}: unsupported kernel version {version}",
            path.display()
        )));
    }
    let rows = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    let expected = 16 + 8 * rows * cols;
    if body.len() != expected {
        return Err(DataError::SchemaError(format!(
            "{}: header says {rows}x{cols} but payload has {} bytes",
            path.display(),
            body.len() - 16
        )));
    }
    let mut m = Mat::zeros((rows, cols));
    for (i, v) in m.iter_mut().enumerate() {
        let off = 16 + 8 * i;
        *v = f64::from_le_bytes(body[off..off + 8].try_into().unwrap());
    }
    Ok(m)
}

/// Stratified train/val/test split over unit labels with the given
/// fractions; the remainder goes to test.
pub fn stratified_split(labels: &[usize], train_frac: f64, val_frac: f64, seed: u64) -> Split {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = rng_for(seed, RngPurpose::Splits);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = ((n as f64) * train_frac).round() as usize;
        let n_val = ((n as f64) * val_frac).round() as usize;
        for (k, &i) in idx.iter().enumerate() {
            if k < n_train {
                split.train.push(i);
            } else if k < n_train + n_val {
                split.val.push(i);
            } else {
                split.test.push(i);
            }
        }
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}

/// Stratified k-fold cross-validation splits at the unit (graph) level.
/// Each fold uses one part as test, the next as validation, the rest as
/// training.
pub fn stratified_cv_splits(labels: &[usize], k: usize, seed: u64) -> Vec<Split> {
    assert!(k >= 2);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = rng_for(seed, RngPurpose::Splits);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        for (j, &i) in idx.iter().enumerate() {
            parts[j % k].push(i);
        }
    }
    (0..k)
        .map(|f| {
            let mut split = Split {
                train: Vec::new(),
                val: parts[(f + 1) % k].clone(),
                test: parts[f].clone(),
            };
            for (j, part) in parts.iter().enumerate() {
                if j != f && j != (f + 1) % k {
                    split.train.extend_from_slice(part);
                }
            }
            split.train.sort_unstable();
            split.val.sort_unstable();
            split.test.sort_unstable();
            split
        })
        .collect()
}

/// Synthetic heterophilous dataset: Erdős–Rényi structure (uninformative
/// edges) with labels determined by well-separated Gaussian feature
/// clusters. Representation learning is required to undo the graph mixing.
pub fn make_heterophilous_dataset(
    n: usize,
    p_edge: f64,
    num_classes: usize,
    feature_dim: usize,
    separation: f64,
    seed: u64,
) -> GraphDataset {
    let edges = crate::graphops::erdos_renyi(n, p_edge, seed);
    let mut label_rng = rng_for(seed, RngPurpose::Labels);
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut label_rng);
    let features = gaussian_mixture_features(&labels, num_classes, feature_dim, separation, seed);
    let splits = Splits::Single(stratified_split(&labels, 0.3, 0.3, seed));
    let num_classes = num_classes.max(1);
    GraphDataset {
        name: format!("synthetic-heterophilous-n{n}-seed{seed}"),
        task: Task::Node,
        features,
        labels,
        edges,
        graph_ids: None,
        splits,
        num_classes,
    }
}

/// Synthetic homophilous dataset: planted partition whose communities are
/// the labels (informative edges), with weakly informative features.
#[allow(clippy::too_many_arguments)]
pub fn make_homophilous_dataset(
    n: usize,
    p_in: f64,
    p_out: f64,
    num_classes: usize,
    feature_dim: usize,
    separation: f64,
    seed: u64,
) -> GraphDataset {
    let mut label_rng = rng_for(seed, RngPurpose::Labels);
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut label_rng);
    let mut graph_rng = rng_for(seed, RngPurpose::GraphGeneration);
    let mut pairs = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            if graph_rng.random::<f64>() < p {
                pairs.push((u, v));
            }
        }
    }
    let edges = EdgeList::new(&pairs, n).expect("generated edges are in range");
    let features = gaussian_mixture_features(&labels, num_classes, feature_dim, separation, seed);
    let splits = Splits::Single(stratified_split(&labels, 0.3, 0.3, seed));
    GraphDataset {
        name: format!("synthetic-homophilous-n{n}-seed{seed}"),
        task: Task::Node,
        features,
        labels,
        edges,
        graph_ids: None,
        splits,
        num_classes,
    }
}

/// Builds a graph-classification dataset from individual graphs: stacks
/// them block-diagonally and attaches stratified cross-validation folds
/// over graph labels (10 folds is the house default).
pub fn dataset_from_graphs(
    name: &str,
    graphs: &[(EdgeList, Mat, usize)],
    folds: usize,
    seed: u64,
) -> Result<GraphDataset> {
    let batch =
        crate::graphops::batch_graphs(graphs).map_err(|e| DataError::SchemaError(e.to_string()))?;
    let mut graph_ids = vec![0usize; batch.total_nodes()];
    for (g, &(lo, hi)) in batch.graph_offsets.iter().enumerate() {
        graph_ids[lo..hi].fill(g);
    }
    let labels = batch.graph_labels.clone();
    let splits = Splits::Folds(stratified_cv_splits(&labels, folds, seed));
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let ds = GraphDataset {
        name: name.to_string(),
        task: Task::Graph,
        features: batch.features.clone(),
        labels,
        edges: batch.edges.clone(),
        graph_ids: Some(graph_ids),
        splits,
        num_classes,
    };
    ds.validate()?;
    Ok(ds)
}

fn gaussian_mixture_features(
    labels: &[usize],
    num_classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Mat {
    let mut rng = rng_for(seed, RngPurpose::Features);
    let n = labels.len();
    let mut x = Mat::zeros((n, dim));
    // class means on scaled one-hot directions
    for (i, &l) in labels.iter().enumerate() {
        for j in 0..dim {
            let mean = if j == l % dim.max(1) { separation } else { 0.0 };
            x[[i, j]] = mean + standard_normal(&mut rng);
        }
        let _ = num_classes;
    }
    x
}

/// One standard-normal draw by Box-Muller.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
