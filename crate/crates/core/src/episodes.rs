//! Multi-task episode construction.
//!
//! A batch of graphs is divided into one pool per task; each pool is split
//! into a support side (the episode's "training set") and a target side (its
//! "validation set"):
//!
//! * graph classification — a 60/40 graph split
//! * node classification — per graph, 30% of the nodes (round-robin across
//!   classes) are labelled in the support instance, the complement in the
//!   target instance
//! * link prediction — per graph, 20% of the edges are removed and become the
//!   target positives; the kept edges are the support positives; negatives
//!   are sampled among non-edges and split 80/20

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::Graph;
use crate::model::{Task, TaskSet, TaskWeights};
use crate::{Error, Result};

/// Graph-classification instance: the label lives on the graph itself.
#[derive(Clone, Debug)]
pub struct GcInstance {
    pub graph: Arc<Graph>,
}

/// Node-classification instance: loss is evaluated on `labelled_nodes` only.
/// A support/target pair shares the graph and carries complementary sets.
#[derive(Clone, Debug)]
pub struct NcInstance {
    pub graph: Arc<Graph>,
    pub labelled_nodes: Vec<usize>,
}

/// Link-prediction instance: `graph` holds the training edges only; the
/// support side scores the kept edges as positives, the target side the
/// removed ones. Negatives are non-edges of the original graph.
#[derive(Clone, Debug)]
pub struct LpInstance {
    pub graph: Arc<Graph>,
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

/// One side (support or target) of an episode.
#[derive(Clone, Debug, Default)]
pub struct TaskPools {
    pub gc: Vec<GcInstance>,
    pub nc: Vec<NcInstance>,
    pub lp: Vec<LpInstance>,
}

impl TaskPools {
    pub fn is_pool_empty(&self, task: Task) -> bool {
        match task {
            Task::Gc => self.gc.is_empty(),
            Task::Nc => self.nc.is_empty(),
            Task::Lp => self.lp.is_empty(),
        }
    }
}

/// A multi-task episode: per-task support/target pools over disjoint graph
/// subsets of the batch, plus the loss balancing weights.
#[derive(Clone, Debug)]
pub struct MultiTaskEpisode {
    pub support: TaskPools,
    pub target: TaskPools,
    pub weights: TaskWeights,
    pub warnings: Vec<String>,
}

impl MultiTaskEpisode {
    /// Structured text dump (debug aid and invariant-test input).
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "episode weights={},{},{}",
            self.weights.gc, self.weights.nc, self.weights.lp
        );
        for (side, pools) in [("support", &self.support), ("target", &self.target)] {
            for inst in &pools.gc {
                let _ = writeln!(
                    out,
                    "gc {side} nodes={} label={:?}",
                    inst.graph.num_nodes(),
                    inst.graph.graph_label()
                );
            }
            for inst in &pools.nc {
                let _ = writeln!(
                    out,
                    "nc {side} nodes={} labelled={}",
                    inst.graph.num_nodes(),
                    join_ids(&inst.labelled_nodes)
                );
            }
            for inst in &pools.lp {
                let _ = writeln!(
                    out,
                    "lp {side} nodes={} train_edges={} positives={} negatives={}",
                    inst.graph.num_nodes(),
                    join_pairs(inst.graph.edges()),
                    join_pairs(&inst.positives),
                    join_pairs(&inst.negatives)
                );
            }
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning {w}");
        }
        out
    }
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn join_pairs(pairs: &[(usize, usize)]) -> String {
    pairs
        .iter()
        .map(|(u, v)| format!("{u}-{v}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Builds one episode from a batch. Deterministic given batch order and rng
/// state. The batch is partitioned among the active tasks (all of it to one
/// pool for single-task episodes); remainders go to the earlier pools in
/// GC, NC, LP order.
pub fn build_episode(
    batch: &[Graph],
    tasks: TaskSet,
    weights: TaskWeights,
    rng: &mut ChaCha8Rng,
) -> Result<MultiTaskEpisode> {
    if tasks.is_empty() {
        return Err(Error::Argument("episode needs at least one task".into()));
    }
    if batch.is_empty() || batch.len() < tasks.len() {
        return Err(Error::Argument(format!(
            "batch of {} graphs is too small for a {}-task episode",
            batch.len(),
            tasks.len()
        )));
    }

    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.shuffle(rng);

    // equal-as-possible pools in task order, remainder to the earlier pools
    let active: Vec<Task> = tasks.iter().collect();
    let base = order.len() / active.len();
    let remainder = order.len() % active.len();
    let mut pools: Vec<(Task, Vec<usize>)> = Vec::new();
    let mut cursor = 0;
    for (i, task) in active.iter().enumerate() {
        let size = base + usize::from(i < remainder);
        pools.push((*task, order[cursor..cursor + size].to_vec()));
        cursor += size;
    }

    let mut episode = MultiTaskEpisode {
        support: TaskPools::default(),
        target: TaskPools::default(),
        weights,
        warnings: Vec::new(),
    };

    for (task, ids) in pools {
        match task {
            Task::Gc => build_gc_pool(batch, &ids, &mut episode, rng)?,
            Task::Nc => build_nc_pool(batch, &ids, &mut episode, rng)?,
            Task::Lp => build_lp_pool(batch, &ids, &mut episode, rng)?,
        }
    }
    Ok(episode)
}

fn build_gc_pool(
    batch: &[Graph],
    ids: &[usize],
    episode: &mut MultiTaskEpisode,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(rng);
    // 60/40 support/target split
    let support_len = ((shuffled.len() as f64) * 0.6).round() as usize;
    let support_len = support_len.clamp(1.min(shuffled.len()), shuffled.len());
    for (i, &gid) in shuffled.iter().enumerate() {
        let graph = &batch[gid];
        if graph.graph_label().is_none() {
            return Err(Error::Argument(
                "graph without a graph label in the GC pool".into(),
            ));
        }
        let inst = GcInstance {
            graph: Arc::new(graph.clone()),
        };
        if i < support_len {
            episode.support.gc.push(inst);
        } else {
            episode.target.gc.push(inst);
        }
    }
    Ok(())
}

fn build_nc_pool(
    batch: &[Graph],
    ids: &[usize],
    episode: &mut MultiTaskEpisode,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for &gid in ids {
        let graph = &batch[gid];
        let labels = graph.node_labels().ok_or_else(|| {
            Error::Argument("graph without node labels in the NC pool".into())
        })?;
        let n = graph.num_nodes();
        if n == 0 {
            episode.warnings.push("nc: skipped zero-node graph".into());
            continue;
        }
        // 30% of nodes labelled in the support instance, at least one
        let quota = ((n as f64) * 0.3).round().max(1.0) as usize;
        let mut nodes_by_class: Vec<Vec<usize>> = Vec::new();
        for (node, &class) in labels.iter().enumerate() {
            if nodes_by_class.len() <= class {
                nodes_by_class.resize(class + 1, Vec::new());
            }
            nodes_by_class[class].push(node);
        }
        let (support_nodes, warning) = per_class_round_robin(&nodes_by_class, quota, rng);
        if let Some(w) = warning {
            episode.warnings.push(format!("nc: {w}"));
        }
        let support_set: BTreeSet<usize> = support_nodes.iter().copied().collect();
        let target_nodes: Vec<usize> = (0..n).filter(|i| !support_set.contains(i)).collect();
        let shared = Arc::new(graph.clone());
        episode.support.nc.push(NcInstance {
            graph: Arc::clone(&shared),
            labelled_nodes: support_nodes,
        });
        episode.target.nc.push(NcInstance {
            graph: shared,
            labelled_nodes: target_nodes,
        });
    }
    Ok(())
}

fn build_lp_pool(
    batch: &[Graph],
    ids: &[usize],
    episode: &mut MultiTaskEpisode,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for &gid in ids {
        let graph = &batch[gid];
        let num_edges = graph.num_edges();
        if num_edges < 2 {
            episode.warnings.push(format!(
                "lp: skipped graph with {num_edges} edge(s)"
            ));
            continue;
        }
        // remove 20% of the edges (at least one) as target positives
        let removed_count = (((num_edges as f64) * 0.2).floor() as usize).max(1);
        let mut edges = graph.edges().to_vec();
        edges.shuffle(rng);
        let removed: Vec<(usize, usize)> = edges[..removed_count].to_vec();
        let kept: Vec<(usize, usize)> = edges[removed_count..].to_vec();

        // negatives: as many as the original edges, capped by availability
        let negatives = sample_negative_edges(graph, num_edges, rng);
        let support_neg_len = ((negatives.len() as f64) * 0.8).round() as usize;
        let (support_neg, target_neg) = negatives.split_at(support_neg_len.min(negatives.len()));

        let reduced = Arc::new(graph.with_edges(kept.clone())?);
        episode.support.lp.push(LpInstance {
            graph: Arc::clone(&reduced),
            positives: kept,
            negatives: support_neg.to_vec(),
        });
        episode.target.lp.push(LpInstance {
            graph: reduced,
            positives: removed,
            negatives: target_neg.to_vec(),
        });
    }
    Ok(())
}

/// Visits the classes in a random cyclic order, sampling one node per visit
/// without replacement (skipping exhausted classes) until `quota` nodes are
/// selected. Returns the selection and an optional capping warning.
pub fn per_class_round_robin(
    nodes_by_class: &[Vec<usize>],
    quota: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Option<String>) {
    let total: usize = nodes_by_class.iter().map(|c| c.len()).sum();
    let mut warning = None;
    let capped = if quota > total {
        warning = Some(format!("quota {quota} capped at {total} available nodes"));
        total
    } else {
        quota
    };

    let mut remaining: Vec<Vec<usize>> = nodes_by_class
        .iter()
        .map(|nodes| {
            let mut n = nodes.clone();
            n.shuffle(rng);
            n
        })
        .collect();
    let mut class_order: Vec<usize> = (0..remaining.len()).collect();
    class_order.shuffle(rng);

    let mut selected = Vec::with_capacity(capped);
    while selected.len() < capped {
        let mut progressed = false;
        for &class in &class_order {
            if selected.len() == capped {
                break;
            }
            if let Some(node) = remaining[class].pop() {
                selected.push(node);
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    selected.sort_unstable();
    (selected, warning)
}

/// Uniform sample (without replacement) of `count` node pairs `u < v` that
/// are not edges of `graph`; returns fewer when not enough non-edges exist.
pub fn sample_negative_edges(
    graph: &Graph,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let mut candidates = graph.non_edges();
    let take = count.min(candidates.len());
    // partial Fisher-Yates: uniform without replacement
    for i in 0..take {
        let j = rng.gen_range(i..candidates.len());
        candidates.swap(i, j);
    }
    candidates.truncate(take);
    candidates
}
