//! Graph samples, datasets, adjacency normalization, and node features.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::Tensor;

/// One classification sample: an undirected simple graph with node
/// features and a class label.
#[derive(Debug, Clone)]
pub struct Graph {
    adjacency: Tensor,
    features: Tensor,
    label: usize,
}

impl Graph {
    /// Validates the structural invariants: square symmetric `{0,1}`
    /// adjacency with a zero diagonal, and one feature row per node.
    pub fn new(adjacency: Tensor, features: Tensor, label: usize) -> Result<Self> {
        let n = adjacency.rows();
        if adjacency.cols() != n {
            return Err(Error::Contract(format!(
                "adjacency must be square, got {}x{}",
                n,
                adjacency.cols()
            )));
        }
        for i in 0..n {
            if adjacency.get(i, i) != 0.0 {
                return Err(Error::Contract(format!(
                    "adjacency has a nonzero diagonal at node {i}"
                )));
            }
            for j in 0..n {
                let v = adjacency.get(i, j);
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Contract(format!(
                        "adjacency entry ({i},{j}) = {v} is not 0 or 1"
                    )));
                }
                if (adjacency.get(i, j) - adjacency.get(j, i)).abs() != 0.0 {
                    return Err(Error::Contract(format!(
                        "adjacency is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        if features.rows() != n {
            return Err(Error::Contract(format!(
                "feature rows {} do not match node count {n}",
                features.rows()
            )));
        }
        Ok(Graph {
            adjacency,
            features,
            label,
        })
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn degree(&self, node: usize) -> usize {
        (0..self.node_count())
            .filter(|&j| self.adjacency.get(node, j) == 1.0)
            .count()
    }

    /// Relabel nodes: node `i` of the result is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.node_count();
        if perm.len() != n {
            return Err(Error::Contract("permutation length mismatch".into()));
        }
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || seen[p] {
                return Err(Error::Contract("not a permutation".into()));
            }
            seen[p] = true;
        }
        let mut adj = Tensor::zeros(n, n);
        let mut feats = Tensor::zeros(n, self.features.cols());
        for i in 0..n {
            for j in 0..n {
                adj.set(i, j, self.adjacency.get(perm[i], perm[j]));
            }
            for c in 0..self.features.cols() {
                feats.set(i, c, self.features.get(perm[i], c));
            }
        }
        Graph::new(adj, feats, self.label)
    }
}

/// A named collection of graphs with a consistent feature space and
/// contiguous class indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Original dataset label -> contiguous class index.
    pub label_map: BTreeMap<i64, usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.graphs.iter().map(Graph::label).collect()
    }

    pub fn max_nodes(&self) -> usize {
        self.graphs.iter().map(Graph::node_count).max().unwrap_or(0)
    }

    pub fn mean_nodes(&self) -> f64 {
        if self.graphs.is_empty() {
            return 0.0;
        }
        let total: usize = self.graphs.iter().map(Graph::node_count).sum();
        total as f64 / self.graphs.len() as f64
    }

    /// Count of the most frequent class divided by the dataset size.
    pub fn majority_baseline(&self) -> f64 {
        let mut counts = vec![0usize; self.num_classes];
        for g in &self.graphs {
            counts[g.label()] += 1;
        }
        counts.into_iter().max().unwrap_or(0) as f64 / self.len().max(1) as f64
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for g in &self.graphs {
            counts[g.label()] += 1;
        }
        counts
    }
}

/// The column-stochastic propagation operator `(A + I) D^-1`, where `D` is
/// the diagonal degree matrix of `A + I`.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency(Tensor);

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &Tensor {
        &self.0
    }

    pub fn node_count(&self) -> usize {
        self.0.rows()
    }
}

/// Normalize a symmetric zero-diagonal binary adjacency matrix by adding
/// self-connections and dividing each column by its degree sum.
pub fn normalize_adjacency(a: &Tensor) -> Result<NormalizedAdjacency> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Contract(format!(
            "adjacency must be square, got {}x{}",
            n,
            a.cols()
        )));
    }
    for i in 0..n {
        if a.get(i, i) != 0.0 {
            return Err(Error::Contract(format!(
                "adjacency has a nonzero diagonal at node {i}"
            )));
        }
        for j in (i + 1)..n {
            if a.get(i, j) != a.get(j, i) {
                return Err(Error::Contract(format!(
                    "adjacency is not symmetric at ({i},{j})"
                )));
            }
        }
        for j in 0..n {
            let v = a.get(i, j);
            if v != 0.0 && v != 1.0 {
                return Err(Error::Contract(format!(
                    "adjacency entry ({i},{j}) = {v} is not 0 or 1"
                )));
            }
        }
    }
    // Column j of A + I sums to deg(j) + 1, so dividing by it makes the
    // matrix column-stochastic; the self-connection keeps isolated nodes
    // well-defined.
    let mut out = Tensor::zeros(n, n);
    for j in 0..n {
        let degree_with_self: f64 =
            1.0 + (0..n).map(|i| a.get(i, j)).sum::<f64>();
        for i in 0..n {
            let tilde = a.get(i, j) + if i == j { 1.0 } else { 0.0 };
            if tilde != 0.0 {
                out.set(i, j, tilde / degree_with_self);
            }
        }
    }
    Ok(NormalizedAdjacency(out))
}

/// How node feature matrices are constructed from raw dataset content.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureScheme {
    /// One-hot over the dataset-global node label alphabet.
    OneHot,
    /// One-hot over node degree, capped with an overflow bucket.
    Degree { cap: usize },
}

pub const DEFAULT_DEGREE_CAP: usize = 25;

/// Build per-graph feature matrices.
///
/// `node_labels` holds each graph's raw node labels (required for
/// [`FeatureScheme::OneHot`]); `degrees` holds each graph's node degrees.
/// Returns the feature matrices and the shared feature dimension.
pub fn build_features(
    node_labels: Option<&[Vec<i64>]>,
    degrees: &[Vec<usize>],
    scheme: FeatureScheme,
) -> Result<(Vec<Tensor>, usize)> {
    match scheme {
        FeatureScheme::OneHot => {
            let labels = node_labels.ok_or_else(|| {
                Error::Config(
                    "one-hot features requested but the dataset has no node labels".into(),
                )
            })?;
            let mut alphabet: BTreeMap<i64, usize> = BTreeMap::new();
            for graph_labels in labels {
                for &l in graph_labels {
                    let next = alphabet.len();
                    alphabet.entry(l).or_insert(next);
                }
            }
            let dim = alphabet.len();
            let mats = labels
                .iter()
                .map(|graph_labels| {
                    let mut x = Tensor::zeros(graph_labels.len(), dim);
                    for (i, l) in graph_labels.iter().enumerate() {
                        x.set(i, alphabet[l], 1.0);
                    }
                    x
                })
                .collect();
            Ok((mats, dim))
        }
        FeatureScheme::Degree { cap } => {
            if cap == 0 {
                return Err(Error::Config("degree cap must be at least 1".into()));
            }
            let max_degree = degrees
                .iter()
                .flat_map(|d| d.iter().copied())
                .max()
                .unwrap_or(0);
            // Buckets 0..=min(max_degree, cap); the last bucket absorbs
            // any degree above the cap.
            let top = max_degree.min(cap);
            let dim = top + 1;
            let mats = degrees
                .iter()
                .map(|graph_degrees| {
                    let mut x = Tensor::zeros(graph_degrees.len(), dim);
                    for (i, &d) in graph_degrees.iter().enumerate() {
                        x.set(i, d.min(top), 1.0);
                    }
                    x
                })
                .collect();
            Ok((mats, dim))
        }
    }
}
