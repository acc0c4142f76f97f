//! TUDataset text-format parsing and (for fixtures and round-trip tests)
//! writing.
//!
//! A dataset directory `DIR` holding dataset `NAME` contains:
//!
//! * `NAME_A.txt` — one edge per line, `i, j`, 1-indexed global node ids;
//!   undirected edges are listed in both directions
//! * `NAME_graph_indicator.txt` — per node line, the 1-indexed graph id
//! * `NAME_graph_labels.txt` — one integer label per graph
//! * `NAME_node_labels.txt` — optional, one integer label per node
//! * `NAME_node_attributes.txt` — optional, comma-separated reals per node

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::graph::{Graph, GraphDataset};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Where node features come from when a dataset carries both attributes and
/// node labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FeatureMode {
    /// Attributes when present, else one-hot node labels, else a constant 1.
    #[default]
    AttributesElseLabels,
    /// Attributes concatenated with one-hot node labels (when both exist).
    ConcatAttributesAndLabels,
}

/// Parses `DIR/NAME_*.txt` with the default feature source.
pub fn parse_tudataset(directory: &Path, name: &str) -> Result<GraphDataset> {
    parse_tudataset_with(directory, name, FeatureMode::default())
}

pub fn parse_tudataset_with(
    directory: &Path,
    name: &str,
    mode: FeatureMode,
) -> Result<GraphDataset> {
    let file = |suffix: &str| directory.join(format!("{name}_{suffix}.txt"));
    let mandatory = ["A", "graph_indicator", "graph_labels"];
    for suffix in mandatory {
        if !file(suffix).exists() {
            return Err(Error::Format(format!(
                "missing mandatory file {}",
                file(suffix).display()
            )));
        }
    }

    // graph_indicator: node -> graph id, defines per-graph node ranges
    let indicator = read_lines(&file("graph_indicator"))?;
    let mut graph_of_node = Vec::with_capacity(indicator.len());
    for (lineno, line) in &indicator {
        let gid: usize = parse_token(line, "graph_indicator", *lineno)?;
        if gid == 0 {
            return Err(Error::Parse {
                file: "graph_indicator".into(),
                line: *lineno,
                msg: "graph ids are 1-indexed".into(),
            });
        }
        graph_of_node.push(gid - 1);
    }
    let num_graphs = graph_of_node.iter().max().map_or(0, |m| m + 1);
    if num_graphs == 0 {
        return Err(Error::Format("dataset has no graphs".into()));
    }

    // local node index within its graph; nodes are numbered in file order
    let mut local_index = Vec::with_capacity(graph_of_node.len());
    let mut graph_sizes = vec![0usize; num_graphs];
    for &g in &graph_of_node {
        local_index.push(graph_sizes[g]);
        graph_sizes[g] += 1;
    }

    // edges, converted to per-graph 0-indexed pairs; the file lists both
    // directions of each undirected edge, duplicates are collapsed
    let mut edge_sets: Vec<BTreeMap<(usize, usize), ()>> =
        vec![BTreeMap::new(); num_graphs];
    for (lineno, line) in &read_lines(&file("A"))? {
        let (a, b) = parse_pair(line, "A", *lineno)?;
        if a == 0 || b == 0 || a > graph_of_node.len() || b > graph_of_node.len() {
            return Err(Error::Integrity(format!(
                "edge ({a}, {b}) on line {lineno} of the A file references a missing node"
            )));
        }
        let (u, v) = (a - 1, b - 1);
        if graph_of_node[u] != graph_of_node[v] {
            return Err(Error::Integrity(format!(
                "edge ({a}, {b}) on line {lineno} crosses graphs {} and {}",
                graph_of_node[u] + 1,
                graph_of_node[v] + 1
            )));
        }
        if u == v {
            continue; // self-loops are dropped like duplicates
        }
        let g = graph_of_node[u];
        let (lu, lv) = (local_index[u], local_index[v]);
        edge_sets[g].insert((lu.min(lv), lu.max(lv)), ());
    }

    // graph labels, remapped to a dense 0-based range
    let raw_graph_labels: Vec<i64> = read_lines(&file("graph_labels"))?
        .iter()
        .map(|(lineno, line)| parse_token::<i64>(line, "graph_labels", *lineno))
        .collect::<Result<_>>()?;
    if raw_graph_labels.len() != num_graphs {
        return Err(Error::Integrity(format!(
            "{} graph labels for {} graphs",
            raw_graph_labels.len(),
            num_graphs
        )));
    }
    let graph_labels = densify(&raw_graph_labels);

    // optional node labels
    let node_labels: Option<Vec<usize>> = if file("node_labels").exists() {
        let raw: Vec<i64> = read_lines(&file("node_labels"))?
            .iter()
            .map(|(lineno, line)| parse_token::<i64>(line, "node_labels", *lineno))
            .collect::<Result<_>>()?;
        if raw.len() != graph_of_node.len() {
            return Err(Error::Integrity(format!(
                "{} node labels for {} nodes",
                raw.len(),
                graph_of_node.len()
            )));
        }
        Some(densify(&raw))
    } else {
        None
    };

    // optional node attributes
    let attributes: Option<Vec<Vec<f64>>> = if file("node_attributes").exists() {
        let mut rows = Vec::new();
        for (lineno, line) in &read_lines(&file("node_attributes"))? {
            let row: Vec<f64> = line
                .split(',')
                .map(|tok| parse_token::<f64>(tok, "node_attributes", *lineno))
                .collect::<Result<_>>()?;
            rows.push(row);
        }
        if rows.len() != graph_of_node.len() {
            return Err(Error::Integrity(format!(
                "{} attribute rows for {} nodes",
                rows.len(),
                graph_of_node.len()
            )));
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Format("ragged node attribute rows".into()));
        }
        Some(rows)
    } else {
        None
    };

    let num_node_classes = node_labels
        .as_ref()
        .map_or(0, |l| l.iter().max().map_or(0, |m| m + 1));

    // assemble per-graph feature rows
    let use_labels_onehot = match (mode, &attributes) {
        (FeatureMode::AttributesElseLabels, Some(_)) => false,
        (FeatureMode::AttributesElseLabels, None) => node_labels.is_some(),
        (FeatureMode::ConcatAttributesAndLabels, _) => node_labels.is_some(),
    };
    let attr_dim = attributes.as_ref().map_or(0, |a| a[0].len());
    let onehot_dim = if use_labels_onehot { num_node_classes } else { 0 };
    let feature_dim = (attr_dim + onehot_dim).max(1);

    let mut feature_rows: Vec<Vec<Vec<f64>>> =
        graph_sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    let mut label_rows: Vec<Vec<usize>> =
        graph_sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    for node in 0..graph_of_node.len() {
        let mut row = Vec::with_capacity(feature_dim);
        if let Some(attrs) = &attributes {
            row.extend_from_slice(&attrs[node]);
        }
        if use_labels_onehot {
            let mut onehot = vec![0.0; onehot_dim];
            onehot[node_labels.as_ref().unwrap()[node]] = 1.0;
            row.extend_from_slice(&onehot);
        }
        if row.is_empty() {
            row.push(1.0);
        }
        let g = graph_of_node[node];
        feature_rows[g].push(row);
        if let Some(labels) = &node_labels {
            label_rows[g].push(labels[node]);
        }
    }

    let mut graphs = Vec::with_capacity(num_graphs);
    for g in 0..num_graphs {
        let features = Tensor::from_rows(&feature_rows[g])?;
        let features = if graph_sizes[g] == 0 {
            Tensor::zeros(0, feature_dim)
        } else {
            features
        };
        graphs.push(Graph::new(
            graph_sizes[g],
            edge_sets[g].keys().copied().collect(),
            features,
            node_labels.as_ref().map(|_| label_rows[g].clone()),
            Some(graph_labels[g]),
        )?);
    }

    GraphDataset::new(name, graphs)
}

/// Writes a dataset back out in TUDataset format (fixture generation and the
/// parse/serialize round-trip property).
pub fn write_tudataset(dataset: &GraphDataset, directory: &Path) -> Result<()> {
    fs::create_dir_all(directory)?;
    let name = &dataset.name;
    let file = |suffix: &str| directory.join(format!("{name}_{suffix}.txt"));

    let mut a_lines = String::new();
    let mut indicator = String::new();
    let mut graph_labels = String::new();
    let mut node_labels = String::new();
    let mut attributes = String::new();
    let has_node_labels = dataset.graphs.iter().all(|g| g.node_labels().is_some())
        && dataset.has_node_labels();

    let mut offset = 1usize; // global ids are 1-indexed
    for (gidx, g) in dataset.graphs.iter().enumerate() {
        for &(u, v) in g.edges() {
            // both directions, like the published datasets
            a_lines.push_str(&format!("{}, {}\n", offset + u, offset + v));
            a_lines.push_str(&format!("{}, {}\n", offset + v, offset + u));
        }
        for local in 0..g.num_nodes() {
            indicator.push_str(&format!("{}\n", gidx + 1));
            if has_node_labels {
                node_labels.push_str(&format!("{}\n", g.node_labels().unwrap()[local]));
            }
            let row: Vec<String> = g
                .node_features()
                .row(local)
                .iter()
                .map(|v| format!("{v:?}"))
                .collect();
            attributes.push_str(&row.join(", "));
            attributes.push('\n');
        }
        graph_labels.push_str(&format!("{}\n", g.graph_label().unwrap_or(0)));
        offset += g.num_nodes();
    }

    fs::write(file("A"), a_lines)?;
    fs::write(file("graph_indicator"), indicator)?;
    fs::write(file("graph_labels"), graph_labels)?;
    if has_node_labels {
        fs::write(file("node_labels"), node_labels)?;
    }
    fs::write(file("node_attributes"), attributes)?;
    Ok(())
}

/// Non-empty trimmed lines with their 1-based line numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let content = fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    Ok(content
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

fn parse_token<T: std::str::FromStr>(token: &str, file: &str, line: usize) -> Result<T> {
    token.trim().parse().map_err(|_| Error::Parse {
        file: file.into(),
        line,
        msg: format!("cannot parse token {token:?}"),
    })
}

fn parse_pair(line: &str, file: &str, lineno: usize) -> Result<(usize, usize)> {
    let mut parts = line.split(',');
    let a = parts.next().ok_or_else(|| Error::Parse {
        file: file.into(),
        line: lineno,
        msg: "expected \"i, j\"".into(),
    })?;
    let b = parts.next().ok_or_else(|| Error::Parse {
        file: file.into(),
        line: lineno,
        msg: "expected \"i, j\"".into(),
    })?;
    if parts.next().is_some() {
        return Err(Error::Parse {
            file: file.into(),
            line: lineno,
            msg: "more than two fields on edge line".into(),
        });
    }
    Ok((
        parse_token(a, file, lineno)?,
        parse_token(b, file, lineno)?,
    ))
}

/// Remaps arbitrary integer labels onto 0..k in sorted order.
fn densify(raw: &[i64]) -> Vec<usize> {
    let mut distinct: Vec<i64> = raw.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    raw.iter()
        .map(|v| distinct.binary_search(v).unwrap())
        .collect()
}
