//! Graph and dataset data model, adjacency normalization, and
//! cross-validation fold construction.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seeds;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One undirected graph: deduplicated `u < v` edges, an `n x d` node feature
/// matrix, optional per-node class labels and an optional graph class label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    node_features: Tensor,
    node_labels: Option<Vec<usize>>,
    graph_label: Option<usize>,
}

impl Graph {
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        node_features: Tensor,
        node_labels: Option<Vec<usize>>,
        graph_label: Option<usize>,
    ) -> Result<Self> {
        if node_features.rows() != num_nodes {
            return Err(Error::Argument(format!(
                "feature matrix has {} rows for {} nodes",
                node_features.rows(),
                num_nodes
            )));
        }
        if let Some(labels) = &node_labels {
            if labels.len() != num_nodes {
                return Err(Error::Argument(format!(
                    "{} node labels for {} nodes",
                    labels.len(),
                    num_nodes
                )));
            }
        }
        let mut canonical = Vec::with_capacity(edges.len());
        let mut seen = BTreeSet::new();
        for (u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Argument(format!(
                    "edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            if u == v {
                return Err(Error::Argument(format!("self-loop at node {u}")));
            }
            let e = (u.min(v), u.max(v));
            if !seen.insert(e) {
                return Err(Error::Argument(format!("duplicate edge ({}, {})", e.0, e.1)));
            }
            canonical.push(e);
        }
        canonical.sort_unstable();
        Ok(Graph {
            num_nodes,
            edges: canonical,
            node_features,
            node_labels,
            graph_label,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Canonical `u < v` edge list, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_features(&self) -> &Tensor {
        &self.node_features
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    pub fn node_labels(&self) -> Option<&[usize]> {
        self.node_labels.as_deref()
    }

    pub fn graph_label(&self) -> Option<usize> {
        self.graph_label
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        let e = (u.min(v), u.max(v));
        self.edges.binary_search(&e).is_ok()
    }

    /// Same graph with a different edge set (used for link-prediction
    /// instances where held-out edges are removed).
    pub fn with_edges(&self, edges: Vec<(usize, usize)>) -> Result<Graph> {
        Graph::new(
            self.num_nodes,
            edges,
            self.node_features.clone(),
            self.node_labels.clone(),
            self.graph_label,
        )
    }

    /// All `u < v` node pairs that are not edges.
    pub fn non_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for u in 0..self.num_nodes {
            for v in u + 1..self.num_nodes {
                if !self.has_edge(u, v) {
                    out.push((u, v));
                }
            }
        }
        out
    }
}

/// Symmetric self-loop normalization `D^{-1/2} (A + I) D^{-1/2}` as a dense
/// matrix; rows of isolated nodes reduce to the unit self entry.
pub fn normalized_adjacency(graph: &Graph) -> Tensor {
    let n = graph.num_nodes();
    let mut degree = vec![1.0f64; n]; // self-loop counts once
    for &(u, v) in graph.edges() {
        degree[u] += 1.0;
        degree[v] += 1.0;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut out = Tensor::zeros(n, n);
    for (i, w) in inv_sqrt.iter().enumerate() {
        out.set(i, i, w * w);
    }
    for &(u, v) in graph.edges() {
        let w = inv_sqrt[u] * inv_sqrt[v];
        out.set(u, v, w);
        out.set(v, u, w);
    }
    out
}

/// A named collection of graphs sharing a feature dimension and label spaces.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphDataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub num_graph_classes: usize,
    pub num_node_classes: usize,
    pub feature_dim: usize,
}

impl GraphDataset {
    pub fn new(name: impl Into<String>, graphs: Vec<Graph>) -> Result<Self> {
        let name = name.into();
        let feature_dim = graphs.first().map_or(0, |g| g.feature_dim());
        let mut num_graph_classes = 0;
        let mut num_node_classes = 0;
        for (idx, g) in graphs.iter().enumerate() {
            if g.feature_dim() != feature_dim {
                return Err(Error::Integrity(format!(
                    "graph {idx} has feature dim {} but the dataset uses {feature_dim}",
                    g.feature_dim()
                )));
            }
            if let Some(label) = g.graph_label() {
                num_graph_classes = num_graph_classes.max(label + 1);
            }
            if let Some(labels) = g.node_labels() {
                for &l in labels {
                    num_node_classes = num_node_classes.max(l + 1);
                }
            }
        }
        Ok(GraphDataset {
            name,
            graphs,
            num_graph_classes,
            num_node_classes,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn has_node_labels(&self) -> bool {
        self.num_node_classes > 0
    }

    pub fn has_graph_labels(&self) -> bool {
        self.num_graph_classes > 0
    }
}

/// Train/validation/test graph indices for one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

/// Builds `k` folds with a 70/10/20 train/val/test split per fold.
///
/// The dataset order is shuffled once (stratified by graph label), then fold
/// `i` takes a cyclically rotated window: the test block starts at
/// `i * floor(n/k)` and spans `floor(0.2 n)` graphs, the validation block the
/// following `floor(0.1 n)`, and the remainder trains. The k window starts
/// partition the shuffled sequence; once the test windows are at least as
/// wide as the stride (k >= 5, and always at the default k = 10) every graph
/// appears in at least one test set.
pub fn make_folds(dataset: &GraphDataset, k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    make_folds_opts(dataset, k, seed, true)
}

/// [`make_folds`] with stratification switchable.
pub fn make_folds_opts(
    dataset: &GraphDataset,
    k: usize,
    seed: u64,
    stratify: bool,
) -> Result<Vec<FoldSplit>> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::Argument("cannot fold an empty dataset".into()));
    }
    if k < 2 {
        return Err(Error::Argument(format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(Error::Argument(format!("{k} folds but only {n} graphs")));
    }

    let mut rng = seeds::rng_for(seed, &[0x0f01d5]);
    let order = if stratify && dataset.has_graph_labels() {
        stratified_order(dataset, &mut rng)
    } else {
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        ids
    };

    let test_len = ((n as f64) * 0.2).floor() as usize;
    let val_len = ((n as f64) * 0.1).floor() as usize;
    let test_len = test_len.max(1);
    let val_len = val_len.max(1);
    if test_len + val_len >= n {
        return Err(Error::Argument(format!(
            "dataset of {n} graphs too small for a 70/10/20 split"
        )));
    }
    let stride = n / k;

    let mut folds = Vec::with_capacity(k);
    for fold_index in 0..k {
        let start = fold_index * stride;
        let take = |offset: usize, len: usize| -> Vec<usize> {
            (0..len).map(|j| order[(start + offset + j) % n]).collect()
        };
        let mut test_ids = take(0, test_len);
        let mut val_ids = take(test_len, val_len);
        let mut train_ids = take(test_len + val_len, n - test_len - val_len);
        test_ids.sort_unstable();
        val_ids.sort_unstable();
        train_ids.sort_unstable();
        folds.push(FoldSplit {
            fold_index,
            train_ids,
            val_ids,
            test_ids,
        });
    }
    Ok(folds)
}

/// Interleaves graph ids so each label appears evenly along the sequence,
/// keeping rotated windows close to the dataset's class balance.
fn stratified_order(dataset: &GraphDataset, rng: &mut impl Rng) -> Vec<usize> {
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_graph_classes + 1];
    for (idx, g) in dataset.graphs.iter().enumerate() {
        let slot = g.graph_label().map_or(dataset.num_graph_classes, |l| l);
        by_label[slot].push(idx);
    }
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(dataset.len());
    for ids in by_label.iter_mut() {
        if ids.is_empty() {
            continue;
        }
        ids.shuffle(rng);
        let offset: f64 = rng.gen_range(0.0..1.0);
        let count = ids.len() as f64;
        for (j, &id) in ids.iter().enumerate() {
            keyed.push(((j as f64 + offset) / count, id));
        }
    }
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, id)| id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_graph(n: usize, edges: &[(usize, usize)], label: usize) -> Graph {
        Graph::new(
            n,
            edges.to_vec(),
            Tensor::filled(n, 2, 1.0),
            None,
            Some(label),
        )
        .unwrap()
    }

    #[test]
    fn two_node_edge_normalization() {
        let g = toy_graph(2, &[(0, 1)], 0);
        let a = normalized_adjacency(&g);
        for i in 0..2 {
            for j in 0..2 {
                assert!((a.get(i, j) - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn isolated_node_normalization_is_identity() {
        let g = toy_graph(1, &[], 0);
        let a = normalized_adjacency(&g);
        assert!((a.get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn triangle_normalization_is_one_third() {
        let g = toy_graph(3, &[(0, 1), (1, 2), (0, 2)], 0);
        let a = normalized_adjacency(&g);
        for i in 0..3 {
            for j in 0..3 {
                assert!((a.get(i, j) - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalized_adjacency_is_symmetric_nonnegative() {
        let g = toy_graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)], 0);
        let a = normalized_adjacency(&g);
        for i in 0..5 {
            for j in 0..5 {
                assert!(a.get(i, j) >= 0.0);
                assert!((a.get(i, j) - a.get(j, i)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn graph_rejects_self_loops_and_duplicates() {
        let feats = Tensor::filled(3, 1, 0.0);
        assert!(Graph::new(3, vec![(1, 1)], feats.clone(), None, None).is_err());
        assert!(Graph::new(3, vec![(0, 1), (1, 0)], feats.clone(), None, None).is_err());
        assert!(Graph::new(3, vec![(0, 5)], feats, None, None).is_err());
    }

    fn dataset_of(n: usize) -> GraphDataset {
        let graphs = (0..n).map(|i| toy_graph(3, &[(0, 1)], i % 2)).collect();
        GraphDataset::new("toy", graphs).unwrap()
    }

    #[test]
    fn fold_sizes_600_by_10() {
        let ds = dataset_of(600);
        let folds = make_folds(&ds, 10, 7).unwrap();
        assert_eq!(folds.len(), 10);
        for f in &folds {
            assert_eq!(f.test_ids.len(), 120);
            assert_eq!(f.val_ids.len(), 60);
            assert_eq!(f.train_ids.len(), 420);
        }
    }

    #[test]
    fn fold_sizes_10_by_2() {
        let ds = dataset_of(10);
        let folds = make_folds(&ds, 2, 7).unwrap();
        for f in &folds {
            assert_eq!(f.test_ids.len(), 2);
            assert_eq!(f.val_ids.len(), 1);
            assert_eq!(f.train_ids.len(), 7);
        }
    }

    #[test]
    fn folds_are_deterministic_and_partition_each_fold() {
        let ds = dataset_of(60);
        let a = make_folds(&ds, 5, 42).unwrap();
        let b = make_folds(&ds, 5, 42).unwrap();
        assert_eq!(a, b);
        for f in &a {
            let mut all: Vec<usize> = f
                .train_ids
                .iter()
                .chain(&f.val_ids)
                .chain(&f.test_ids)
                .copied()
                .collect();
            all.sort_unstable();
            assert_eq!(all, (0..60).collect::<Vec<_>>());
        }
        // every graph is tested somewhere
        let mut covered = BTreeSet::new();
        for f in &a {
            covered.extend(f.test_ids.iter().copied());
        }
        assert_eq!(covered.len(), 60);
    }

    #[test]
    fn too_many_folds_is_argument_error() {
        let ds = dataset_of(5);
        assert!(make_folds(&ds, 6, 0).is_err());
        assert!(make_folds(&ds, 1, 0).is_err());
    }

    #[test]
    fn stratified_folds_balance_labels() {
        let ds = dataset_of(100); // 50/50 labels
        let folds = make_folds(&ds, 5, 3).unwrap();
        for f in &folds {
            let ones = f
                .test_ids
                .iter()
                .filter(|&&i| ds.graphs[i].graph_label() == Some(1))
                .count();
            let frac = ones as f64 / f.test_ids.len() as f64;
            assert!((frac - 0.5).abs() < 0.15, "test label fraction {frac}");
        }
    }
}
