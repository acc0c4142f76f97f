//! Loss objectives over instance pools.
//!
//! A [`PoolObjective`] turns episode pools into an [`Objective`]: the loss is
//! `sum_t lambda_t * mean_i L_t(instance_i)`. Instances are independent given
//! the parameters, so their losses and gradients are evaluated in parallel
//! and combined in a fixed order, keeping results bit-deterministic.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradientMap, Objective, ParamSet, Tape};
use crate::episodes::{GcInstance, LpInstance, NcInstance, TaskPools};
use crate::exec;
use crate::graph::Graph;
use crate::model::{
    gc_loss_var, lp_loss_var, nc_loss_var, BoundParams, ModelConfig, Task, TaskSet, TaskWeights,
};
use crate::{Error, Result};

enum Item<'a> {
    Gc(&'a GcInstance),
    Nc(&'a NcInstance),
    Lp(&'a LpInstance),
}

/// Weighted multi-task loss over the pools of one episode side.
pub struct PoolObjective<'a> {
    pools: &'a TaskPools,
    tasks: TaskSet,
    weights: TaskWeights,
    cfg: &'a ModelConfig,
}

/// Loss breakdown of one evaluation.
#[derive(Clone, Debug)]
pub struct PoolEvaluation {
    pub total: f64,
    pub per_task: Vec<(Task, f64)>,
    pub grads: Option<GradientMap>,
}

impl<'a> PoolObjective<'a> {
    pub fn new(
        pools: &'a TaskPools,
        tasks: TaskSet,
        weights: TaskWeights,
        cfg: &'a ModelConfig,
    ) -> Self {
        PoolObjective {
            pools,
            tasks,
            weights,
            cfg,
        }
    }

    /// Unweighted single-task view of a pool (used by the per-task inner
    /// loops, where balancing happens outside).
    pub fn single(pools: &'a TaskPools, task: Task, cfg: &'a ModelConfig) -> Self {
        PoolObjective {
            pools,
            tasks: TaskSet::single(task),
            weights: TaskWeights::default(),
            cfg,
        }
    }

    fn items(&self, task: Task) -> Vec<Item<'a>> {
        match task {
            Task::Gc => self.pools.gc.iter().map(Item::Gc).collect(),
            // NC target instances can have an empty complement on tiny
            // graphs; those contribute nothing
            Task::Nc => self
                .pools
                .nc
                .iter()
                .filter(|i| !i.labelled_nodes.is_empty())
                .map(Item::Nc)
                .collect(),
            Task::Lp => self
                .pools
                .lp
                .iter()
                .filter(|i| !i.positives.is_empty() || !i.negatives.is_empty())
                .map(Item::Lp)
                .collect(),
        }
    }

    pub fn evaluate(&self, params: &ParamSet, with_grad: bool) -> Result<PoolEvaluation> {
        let mut total = 0.0;
        let mut per_task = Vec::new();
        let mut grads = with_grad.then(GradientMap::new);

        for task in self.tasks.iter() {
            let items = self.items(task);
            if items.is_empty() {
                continue;
            }
            let weight = self.weights.get(task);
            let cfg = self.cfg;
            let results: Vec<Result<(f64, Option<GradientMap>)>> =
                exec::par_map(&items, |item| {
                    let tape = Tape::new();
                    let bound = BoundParams::bind(&tape, params)?;
                    let loss = match item {
                        Item::Gc(inst) => gc_loss_var(&tape, &bound, cfg, &inst.graph)?,
                        Item::Nc(inst) => {
                            nc_loss_var(&tape, &bound, cfg, &inst.graph, &inst.labelled_nodes)?
                        }
                        Item::Lp(inst) => lp_loss_var(
                            &tape,
                            &bound,
                            cfg,
                            &inst.graph,
                            &inst.positives,
                            &inst.negatives,
                        )?,
                    };
                    let value = tape.scalar_value(loss)?;
                    let grad = if with_grad {
                        Some(tape.backward(loss, &bound.pairs())?)
                    } else {
                        None
                    };
                    Ok((value, grad))
                });

            // combine in input order for determinism
            let inv = 1.0 / items.len() as f64;
            let mut task_loss = 0.0;
            for result in results {
                let (value, grad) = result?;
                task_loss += value * inv;
                if let (Some(acc), Some(g)) = (grads.as_mut(), grad) {
                    acc.add_scaled(&g, weight * inv)?;
                }
            }
            per_task.push((task, task_loss));
            total += weight * task_loss;
        }
        Ok(PoolEvaluation {
            total,
            per_task,
            grads,
        })
    }
}

impl Objective for PoolObjective<'_> {
    fn loss(&self, params: &ParamSet) -> Result<f64> {
        Ok(self.evaluate(params, false)?.total)
    }

    fn loss_and_grad(&self, params: &ParamSet) -> Result<(f64, GradientMap)> {
        let eval = self.evaluate(params, true)?;
        Ok((eval.total, eval.grads.expect("grads requested")))
    }
}

/// Builds "classical" pools from a batch: every configured task is performed
/// on every graph. NC labels all nodes; GC uses the graph label; LP reuses
/// the episode edge protocol on each graph (keep 80% of the edges in the
/// encoded graph, score them as positives against an 80% share of sampled
/// negatives). Graphs unusable for a task are skipped with a warning.
pub fn classical_pools(
    batch: &[Graph],
    tasks: TaskSet,
    rng: &mut ChaCha8Rng,
) -> Result<(TaskPools, Vec<String>)> {
    use crate::episodes::sample_negative_edges;
    use rand::seq::SliceRandom;
    use std::sync::Arc;

    let mut pools = TaskPools::default();
    let mut warnings = Vec::new();
    for graph in batch {
        if tasks.contains(Task::Gc) {
            if graph.graph_label().is_some() {
                pools.gc.push(GcInstance {
                    graph: Arc::new(graph.clone()),
                });
            } else {
                warnings.push("gc: skipped graph without label".into());
            }
        }
        if tasks.contains(Task::Nc) {
            match graph.node_labels() {
                Some(_) if graph.num_nodes() > 0 => pools.nc.push(NcInstance {
                    graph: Arc::new(graph.clone()),
                    labelled_nodes: (0..graph.num_nodes()).collect(),
                }),
                _ => {
                    return Err(Error::Argument(
                        "node classification requires node labels".into(),
                    ))
                }
            }
        }
        if tasks.contains(Task::Lp) {
            let num_edges = graph.num_edges();
            if num_edges < 2 {
                warnings.push(format!("lp: skipped graph with {num_edges} edge(s)"));
                continue;
            }
            let removed_count = (((num_edges as f64) * 0.2).floor() as usize).max(1);
            let mut edges = graph.edges().to_vec();
            edges.shuffle(rng);
            let kept: Vec<(usize, usize)> = edges[removed_count..].to_vec();
            let negatives = sample_negative_edges(graph, num_edges, rng);
            let support_neg_len =
                (((negatives.len() as f64) * 0.8).round() as usize).min(negatives.len());
            pools.lp.push(LpInstance {
                graph: Arc::new(graph.with_edges(kept.clone())?),
                positives: kept,
                negatives: negatives[..support_neg_len].to_vec(),
            });
        }
    }
    Ok((pools, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::build_episode;
    use crate::seeds;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn toy_graphs(count: usize) -> Vec<Graph> {
        (0..count)
            .map(|i| {
                let mut rng = seeds::rng(i as u64 + 50);
                let n = 8;
                let mut edges = Vec::new();
                for u in 0..n {
                    for v in u + 1..n {
                        if rng.gen_bool(0.45) {
                            edges.push((u, v));
                        }
                    }
                }
                Graph::new(
                    n,
                    edges,
                    Tensor::glorot_uniform(n, 3, &mut rng),
                    Some((0..n).map(|j| j % 2).collect()),
                    Some(i % 2),
                )
                .unwrap()
            })
            .collect()
    }

    fn toy_cfg() -> ModelConfig {
        ModelConfig::new(3, 2, 2).with_hidden_dim(8).with_num_layers(2)
    }

    #[test]
    fn episode_loss_matches_weighted_recomputation() {
        let graphs = toy_graphs(9);
        let cfg = toy_cfg();
        let params = cfg.init_params(3);
        let weights = TaskWeights {
            gc: 1.0,
            nc: 0.5,
            lp: 2.0,
        };
        let ep = build_episode(&graphs, TaskSet::all(), weights, &mut seeds::rng(8)).unwrap();
        let obj = PoolObjective::new(&ep.target, TaskSet::all(), weights, &cfg);
        let eval = obj.evaluate(&params, false).unwrap();
        let recomputed: f64 = eval
            .per_task
            .iter()
            .map(|(task, loss)| weights.get(*task) * loss)
            .sum();
        assert!((eval.total - recomputed).abs() < 1e-12);
    }

    #[test]
    fn pool_gradient_matches_finite_differences() {
        let graphs = toy_graphs(4);
        let cfg = toy_cfg();
        let params = cfg.init_params(5);
        let mut rng = seeds::rng(9);
        let (pools, _) = classical_pools(&graphs, TaskSet::all(), &mut rng).unwrap();
        let obj = PoolObjective::new(&pools, TaskSet::all(), TaskWeights::default(), &cfg);
        let (_, analytic) = obj.loss_and_grad(&params).unwrap();
        let numeric = crate::fdcheck::fd_gradient(
            &|p: &ParamSet| obj.loss(p),
            &params,
            1e-5,
        )
        .unwrap();
        let err = crate::fdcheck::grad_rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn single_task_pool_ignores_other_heads() {
        let graphs = toy_graphs(5);
        let cfg = toy_cfg();
        let params = cfg.init_params(7);
        let mut rng = seeds::rng(11);
        let (pools, _) = classical_pools(&graphs, TaskSet::all(), &mut rng).unwrap();
        let obj = PoolObjective::single(&pools, Task::Gc, &cfg);
        let (_, grads) = obj.loss_and_grad(&params).unwrap();
        for id in cfg.head_ids(Task::Nc).into_iter().chain(cfg.head_ids(Task::Lp)) {
            assert!(
                grads.get(id).is_none_or(|g| g.max_abs() == 0.0),
                "head {id:?} should get zero gradient"
            );
        }
        for id in cfg.encoder_ids() {
            assert!(grads.get(id).is_some_and(|g| g.max_abs() > 0.0));
        }
    }

    #[test]
    fn nc_without_labels_is_argument_error() {
        let g = Graph::new(3, vec![(0, 1)], Tensor::filled(3, 3, 1.0), None, Some(0)).unwrap();
        let mut rng = seeds::rng(1);
        assert!(matches!(
            classical_pools(&[g], TaskSet::single(Task::Nc), &mut rng),
            Err(Error::Argument(_))
        ));
    }
}
