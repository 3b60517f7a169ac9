//! Loader for TU-format graph classification datasets.
//!
//! The layout is plain text, one directory per dataset:
//!
//! * `NAME_A.txt` — one edge per line, `"i, j"`, 1-based global node ids;
//! * `NAME_graph_indicator.txt` — line `t` holds the 1-based graph id of
//!   global node `t`;
//! * `NAME_graph_labels.txt` — line `g` holds graph `g`'s integer label;
//! * `NAME_node_labels.txt` — optional; line `t` holds node `t`'s label.
//!
//! Whitespace around commas and a blank trailing line are tolerated.
//! Edge lists may name each undirected edge once or twice; edges are
//! symmetrized and deduplicated, and self-loops are dropped. Node labels,
//! when present, become one-hot features over the dataset-global alphabet;
//! otherwise degree one-hot features are used. Graph labels are remapped
//! to contiguous class indices in ascending order of the original label.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::{build_features, Dataset, FeatureScheme, Graph, DEFAULT_DEGREE_CAP};
use crate::Tensor;

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
    while lines.last().is_some_and(String::is_empty) {
        lines.pop();
    }
    Ok(lines)
}

fn parse_int(token: &str, file: &Path, line: usize) -> Result<i64> {
    token.trim().parse::<i64>().map_err(|_| Error::Parse {
        file: file.to_path_buf(),
        line,
        message: format!("expected an integer, got {token:?}"),
    })
}

/// Resolve the directory that actually holds `NAME_A.txt`: either the
/// given directory or a `NAME/` subdirectory of it.
fn resolve_root(directory: &Path, name: &str) -> PathBuf {
    let nested = directory.join(name);
    if !directory.join(format!("{name}_A.txt")).exists()
        && nested.join(format!("{name}_A.txt")).exists()
    {
        nested
    } else {
        directory.to_path_buf()
    }
}

/// Load a TU-format dataset from `directory` (or `directory/NAME`).
pub fn load_tu_dataset(directory: &Path, name: &str) -> Result<Dataset> {
    let root = resolve_root(directory, name);
    let a_path = root.join(format!("{name}_A.txt"));
    let indicator_path = root.join(format!("{name}_graph_indicator.txt"));
    let graph_labels_path = root.join(format!("{name}_graph_labels.txt"));
    let node_labels_path = root.join(format!("{name}_node_labels.txt"));

    // Graph membership of each global node (1-based file ids -> 0-based).
    let indicator_lines = read_lines(&indicator_path)?;
    let graph_label_lines = read_lines(&graph_labels_path)?;
    let num_graphs = graph_label_lines.len();
    let num_nodes = indicator_lines.len();

    let mut node_graph = Vec::with_capacity(num_nodes);
    for (idx, line) in indicator_lines.iter().enumerate() {
        let gid = parse_int(line, &indicator_path, idx + 1)?;
        if gid < 1 || gid as usize > num_graphs {
            return Err(Error::Format {
                file: indicator_path.clone(),
                line: idx + 1,
                message: format!("graph id {gid} out of range 1..={num_graphs}"),
            });
        }
        node_graph.push(gid as usize - 1);
    }

    // Local index of each global node within its graph, in ascending
    // global order.
    let mut graph_sizes = vec![0usize; num_graphs];
    let mut local_index = Vec::with_capacity(num_nodes);
    for &g in &node_graph {
        local_index.push(graph_sizes[g]);
        graph_sizes[g] += 1;
    }

    // Edges, validated to stay within one graph.
    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    let a_lines = read_lines(&a_path)?;
    for (idx, line) in a_lines.iter().enumerate() {
        if line.is_empty() {
            return Err(Error::Parse {
                file: a_path.clone(),
                line: idx + 1,
                message: "blank line inside edge list".into(),
            });
        }
        let mut parts = line.split(',');
        let (i_tok, j_tok) = match (parts.next(), parts.next(), parts.next()) {
            (Some(i), Some(j), None) => (i, j),
            _ => {
                return Err(Error::Parse {
                    file: a_path.clone(),
                    line: idx + 1,
                    message: format!("expected \"i, j\", got {line:?}"),
                })
            }
        };
        let i = parse_int(i_tok, &a_path, idx + 1)?;
        let j = parse_int(j_tok, &a_path, idx + 1)?;
        for v in [i, j] {
            if v < 1 || v as usize > num_nodes {
                return Err(Error::Format {
                    file: a_path.clone(),
                    line: idx + 1,
                    message: format!("node id {v} out of range 1..={num_nodes}"),
                });
            }
        }
        let (i, j) = (i as usize - 1, j as usize - 1);
        if node_graph[i] != node_graph[j] {
            return Err(Error::Format {
                file: a_path.clone(),
                line: idx + 1,
                message: format!(
                    "edge ({}, {}) joins nodes of graphs {} and {}",
                    i + 1,
                    j + 1,
                    node_graph[i] + 1,
                    node_graph[j] + 1
                ),
            });
        }
        if i != j {
            edges[node_graph[i]].push((local_index[i], local_index[j]));
        }
    }

    // Optional node labels, grouped per graph.
    let node_labels: Option<Vec<Vec<i64>>> = if node_labels_path.exists() {
        let lines = read_lines(&node_labels_path)?;
        if lines.len() != num_nodes {
            return Err(Error::Format {
                file: node_labels_path.clone(),
                line: lines.len(),
                message: format!(
                    "expected {num_nodes} node labels, found {}",
                    lines.len()
                ),
            });
        }
        let mut per_graph: Vec<Vec<i64>> = vec![Vec::new(); num_graphs];
        for (idx, line) in lines.iter().enumerate() {
            let label = parse_int(line, &node_labels_path, idx + 1)?;
            per_graph[node_graph[idx]].push(label);
        }
        Some(per_graph)
    } else {
        None
    };

    // Adjacency matrices; writing into the dense matrix symmetrizes and
    // deduplicates in one step.
    let mut adjacencies: Vec<Tensor> = graph_sizes
        .iter()
        .map(|&n| Tensor::zeros(n, n))
        .collect();
    for (g, graph_edges) in edges.iter().enumerate() {
        for &(i, j) in graph_edges {
            adjacencies[g].set(i, j, 1.0);
            adjacencies[g].set(j, i, 1.0);
        }
    }

    let degrees: Vec<Vec<usize>> = adjacencies
        .iter()
        .map(|a| {
            (0..a.rows())
                .map(|i| (0..a.cols()).filter(|&j| a.get(i, j) == 1.0).count())
                .collect()
        })
        .collect();

    let scheme = if node_labels.is_some() {
        FeatureScheme::OneHot
    } else {
        FeatureScheme::Degree {
            cap: DEFAULT_DEGREE_CAP,
        }
    };
    let (features, feature_dim) = build_features(node_labels.as_deref(), &degrees, scheme)?;

    // Graph labels, remapped to contiguous indices by ascending original
    // value.
    let mut raw_labels = Vec::with_capacity(num_graphs);
    for (idx, line) in graph_label_lines.iter().enumerate() {
        raw_labels.push(parse_int(line, &graph_labels_path, idx + 1)?);
    }
    let mut label_map: BTreeMap<i64, usize> = BTreeMap::new();
    for &l in &raw_labels {
        label_map.insert(l, 0);
    }
    for (next, (_, slot)) in label_map.iter_mut().enumerate() {
        *slot = next;
    }
    let num_classes = label_map.len();

    let graphs = adjacencies
        .into_iter()
        .zip(features)
        .zip(&raw_labels)
        .map(|((adj, x), raw)| Graph::new(adj, x, label_map[raw]))
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        name: name.to_string(),
        graphs,
        num_classes,
        feature_dim,
        label_map,
    })
}
