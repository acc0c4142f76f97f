//! Training strategies.
//!
//! Six ways to fit the same architecture:
//!
//! * `ClassicalSingleTask` / `ClassicalMultiTask` — every configured task on
//!   every batch graph, one Adam step on the weighted loss sum
//! * `TraditionalMeta` — MAML-style: one adaptation over the combined
//!   multi-task loss on a shared support set, outer update from the shared
//!   target set
//! * `FineTune` — classical multi-task on all three tasks, then classical
//!   multi-task on the configured pair
//! * `ISame` / `ESame` — the single-task-adaptation procedure: per task, the
//!   inner loop adapts a parameter subset on that task's support pool and the
//!   outer loss accumulates the adapted parameters' target-pool loss. iSAME
//!   adapts backbone plus the task head; eSAME adapts the head only.
//!
//! The outer update always goes through Adam; the meta-gradient is either
//! first-order (target gradient at the adapted parameters) or second-order
//! (chain rule through adaptation, Hessian-vector products via
//! [`hessian_vector_product`]).

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::adam::{Adam, AdamConfig};
use crate::autodiff::{
    hessian_vector_product, GradientMap, Objective, ParamId, ParamSet,
};
use crate::episodes::{build_episode, MultiTaskEpisode};
use crate::graph::{FoldSplit, Graph, GraphDataset};
use crate::model::{ModelConfig, Task, TaskSet, TaskWeights};
use crate::objective::{classical_pools, PoolObjective};
use crate::seeds;
use crate::{Error, Result};

const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrategyKind {
    ClassicalSingleTask,
    ClassicalMultiTask,
    TraditionalMeta,
    FineTune,
    ISame,
    ESame,
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::ClassicalSingleTask => "classical-st",
            StrategyKind::ClassicalMultiTask => "classical-mt",
            StrategyKind::TraditionalMeta => "trad-meta",
            StrategyKind::FineTune => "finetune",
            StrategyKind::ISame => "isame",
            StrategyKind::ESame => "esame",
        }
    }

    pub fn parse(s: &str) -> Result<StrategyKind> {
        match s.trim().to_ascii_lowercase().as_str() {
            "classical-st" => Ok(StrategyKind::ClassicalSingleTask),
            "classical-mt" => Ok(StrategyKind::ClassicalMultiTask),
            "trad-meta" => Ok(StrategyKind::TraditionalMeta),
            "finetune" => Ok(StrategyKind::FineTune),
            "isame" => Ok(StrategyKind::ISame),
            "esame" => Ok(StrategyKind::ESame),
            other => Err(Error::Argument(format!("unknown strategy {other:?}"))),
        }
    }

    pub fn is_episodic(&self) -> bool {
        matches!(
            self,
            StrategyKind::TraditionalMeta | StrategyKind::ISame | StrategyKind::ESame
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetaGradMode {
    FirstOrder,
    SecondOrder,
}

impl MetaGradMode {
    pub fn parse(s: &str) -> Result<MetaGradMode> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fo" | "first-order" => Ok(MetaGradMode::FirstOrder),
            "so" | "second-order" => Ok(MetaGradMode::SecondOrder),
            other => Err(Error::Argument(format!("unknown meta-grad mode {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MetaGradMode::FirstOrder => "fo",
            MetaGradMode::SecondOrder => "so",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopConfig {
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Validate every this many epochs.
    pub eval_every: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        EarlyStopConfig {
            patience: 50,
            eval_every: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub strategy: StrategyKind,
    pub tasks: TaskSet,
    pub inner_lr: f64,
    pub adam: AdamConfig,
    pub inner_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: TaskWeights,
    pub meta_grad: MetaGradMode,
    pub early_stop: EarlyStopConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults: inner lr 0.01, Adam(1e-3), one inner step, batch 30, unit
    /// task weights, first-order meta-gradients; epoch budget per strategy
    /// (1000 classical single-task, 5000 classical multi-task and fine-tune
    /// phases, 5000/15000 for single/multi-task meta strategies).
    pub fn new(strategy: StrategyKind, tasks: TaskSet) -> Self {
        TrainConfig {
            strategy,
            tasks,
            inner_lr: 0.01,
            adam: AdamConfig::default(),
            inner_steps: 1,
            epochs: default_epochs(strategy, tasks),
            batch_size: 30,
            weights: TaskWeights::default(),
            meta_grad: MetaGradMode::FirstOrder,
            early_stop: EarlyStopConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self, dataset: &GraphDataset) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Argument("no tasks configured".into()));
        }
        if self.inner_lr <= 0.0 || self.adam.lr <= 0.0 {
            return Err(Error::Argument("learning rates must be positive".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::Argument("inner_steps must be at least 1".into()));
        }
        if self.strategy == StrategyKind::ClassicalSingleTask && self.tasks.len() != 1 {
            return Err(Error::Argument(
                "classical-st trains exactly one task".into(),
            ));
        }
        if self.strategy == StrategyKind::FineTune && self.tasks.len() != 2 {
            return Err(Error::Argument(
                "finetune requires exactly 2 finetune tasks".into(),
            ));
        }
        let needs_nc = self.tasks.contains(Task::Nc) || self.strategy == StrategyKind::FineTune;
        if needs_nc && !dataset.has_node_labels() {
            return Err(Error::Argument(format!(
                "dataset {} has no node labels but NC is required",
                dataset.name
            )));
        }
        let needs_gc = self.tasks.contains(Task::Gc) || self.strategy == StrategyKind::FineTune;
        if needs_gc && !dataset.has_graph_labels() {
            return Err(Error::Argument(format!(
                "dataset {} has no graph labels but GC is required",
                dataset.name
            )));
        }
        Ok(())
    }
}

pub fn default_epochs(strategy: StrategyKind, tasks: TaskSet) -> usize {
    let multi = tasks.len() > 1;
    match strategy {
        StrategyKind::ClassicalSingleTask => 1000,
        StrategyKind::ClassicalMultiTask | StrategyKind::FineTune => 5000,
        StrategyKind::TraditionalMeta | StrategyKind::ISame | StrategyKind::ESame => {
            if multi {
                15000
            } else {
                5000
            }
        }
    }
}

/// Result of one inner-loop adaptation.
#[derive(Clone, Debug)]
pub struct AdaptResult {
    /// Final adapted parameters.
    pub params: ParamSet,
    /// All iterates theta'(0) .. theta'(t); needed by the second-order
    /// meta-gradient.
    pub iterates: Vec<ParamSet>,
    /// Support loss before each step.
    pub losses: Vec<f64>,
    /// Gradient infinity norm at each step.
    pub grad_norms: Vec<f64>,
}

/// `steps` plain gradient-descent updates of the `adaptable` subset on the
/// support objective; every other parameter is carried over bit-identically.
pub fn adapt(
    params: &ParamSet,
    adaptable: &BTreeSet<ParamId>,
    support: &dyn Objective,
    lr: f64,
    steps: usize,
) -> Result<AdaptResult> {
    let mut current = params.clone();
    let mut iterates = vec![current.clone()];
    let mut losses = Vec::with_capacity(steps);
    let mut grad_norms = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, grads) = support.loss_and_grad(&current)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "NaN support loss at adaptation step {step} (grad norm {:.3e})",
                grads.inf_norm()
            )));
        }
        losses.push(loss);
        grad_norms.push(grads.inf_norm());
        current.add_scaled(&grads, -lr, Some(adaptable))?;
        iterates.push(current.clone());
    }
    Ok(AdaptResult {
        params: current,
        iterates,
        losses,
        grad_norms,
    })
}

/// Meta-gradient of the target loss with respect to the initial parameters.
#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub target_loss: f64,
    pub grad: GradientMap,
    pub adapted: ParamSet,
}

/// Differentiates `L_target(adapt(theta))` with respect to `theta`.
///
/// First-order mode returns the target gradient evaluated at the adapted
/// parameters. Second-order mode applies the adaptation chain rule: with one
/// step and every parameter adaptable the result is
/// `(I - lr * H_support) * grad L_target(theta')`; multi-step and masked
/// variants multiply through one `I - lr * H(theta'(s)) * mask` factor per
/// step, each realised as a Hessian-vector product.
pub fn meta_gradient(
    params: &ParamSet,
    adaptable: &BTreeSet<ParamId>,
    support: &dyn Objective,
    target: &dyn Objective,
    lr: f64,
    steps: usize,
    mode: MetaGradMode,
) -> Result<MetaGradient> {
    let adapt_result = adapt(params, adaptable, support, lr, steps)?;
    let (target_loss, target_grad) = target.loss_and_grad(&adapt_result.params)?;
    if !target_loss.is_finite() {
        return Err(Error::Numeric("NaN target loss after adaptation".into()));
    }
    let grad = match mode {
        MetaGradMode::FirstOrder => target_grad,
        MetaGradMode::SecondOrder => {
            let mut v = target_grad;
            for s in (0..steps).rev() {
                let masked = v.restricted(adaptable);
                let hv = hessian_vector_product(support, &adapt_result.iterates[s], &masked)?;
                v.add_scaled(&hv, -lr)?;
            }
            v
        }
    };
    Ok(MetaGradient {
        target_loss,
        grad,
        adapted: adapt_result.params,
    })
}

/// Which parameters the inner loop may touch for a task.
pub fn adaptable_ids(strategy: StrategyKind, cfg: &ModelConfig, task: Task) -> BTreeSet<ParamId> {
    let mut ids = BTreeSet::new();
    match strategy {
        StrategyKind::ISame => {
            ids.extend(cfg.encoder_ids());
            ids.extend(cfg.head_ids(task));
        }
        StrategyKind::ESame => {
            ids.extend(cfg.head_ids(task));
        }
        _ => {
            ids.extend(cfg.all_ids());
        }
    }
    ids
}

/// Outcome of one parameter update step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: f64,
    pub per_task: Vec<(Task, f64)>,
    pub warnings: Vec<String>,
    /// Adapted parameters per task (episodic strategies only).
    pub adapted: Vec<(Task, ParamSet)>,
}

/// One outer step of the single-task-adaptation procedure: per configured
/// task, adapt on the support pool, accumulate the weighted target loss and
/// meta-gradient, then one Adam step on the sum.
pub fn same_outer_step(
    params: &mut ParamSet,
    episode: &MultiTaskEpisode,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    adam: &mut Adam,
) -> Result<StepOutcome> {
    let mut outer_loss = 0.0;
    let mut total_grad = GradientMap::new();
    let mut per_task = Vec::new();
    let mut warnings = episode.warnings.clone();
    let mut adapted = Vec::new();

    for task in cfg.tasks.iter() {
        if episode.support.is_pool_empty(task) || episode.target.is_pool_empty(task) {
            warnings.push(format!("{task}: empty pool, task skipped this episode"));
            continue;
        }
        let support = PoolObjective::single(&episode.support, task, model_cfg);
        let target = PoolObjective::single(&episode.target, task, model_cfg);
        let subset = adaptable_ids(cfg.strategy, model_cfg, task);
        let mg = meta_gradient(
            params,
            &subset,
            &support,
            &target,
            cfg.inner_lr,
            cfg.inner_steps,
            cfg.meta_grad,
        )?;
        let weight = episode.weights.get(task);
        outer_loss += weight * mg.target_loss;
        total_grad.add_scaled(&mg.grad, weight)?;
        per_task.push((task, mg.target_loss));
        adapted.push((task, mg.adapted));
    }

    if per_task.is_empty() {
        warnings.push("episode contributed no task; parameters unchanged".into());
    } else {
        adam.step(params, &total_grad)?;
    }
    Ok(StepOutcome {
        loss: outer_loss,
        per_task,
        warnings,
        adapted,
    })
}

/// One classical step: all configured tasks on all batch graphs, single Adam
/// update on the weighted loss sum.
pub fn classical_mt_step(
    params: &mut ParamSet,
    batch: &[Graph],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    adam: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let (pools, warnings) = classical_pools(batch, cfg.tasks, rng)?;
    let objective = PoolObjective::new(&pools, cfg.tasks, cfg.weights, model_cfg);
    let eval = objective.evaluate(params, true)?;
    adam.step(params, &eval.grads.expect("grads requested"))?;
    Ok(StepOutcome {
        loss: eval.total,
        per_task: eval.per_task,
        warnings,
        adapted: Vec::new(),
    })
}

/// One traditional meta-learning step: the batch is split 60/40 into shared
/// support/target graph sets, *all* tasks are performed on both sides, a
/// single adaptation runs on the combined support loss and the outer update
/// uses the combined target loss.
pub fn traditional_meta_step(
    params: &mut ParamSet,
    batch: &[Graph],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    adam: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.shuffle(rng);
    let support_len = ((order.len() as f64) * 0.6).round().max(1.0) as usize;
    let support_len = support_len.min(order.len().saturating_sub(1)).max(1);
    let support_graphs: Vec<Graph> = order[..support_len].iter().map(|&i| batch[i].clone()).collect();
    let target_graphs: Vec<Graph> = order[support_len..].iter().map(|&i| batch[i].clone()).collect();
    if target_graphs.is_empty() {
        return Err(Error::Argument(
            "batch too small for a support/target split".into(),
        ));
    }

    let (support_pools, mut warnings) = classical_pools(&support_graphs, cfg.tasks, rng)?;
    let (target_pools, w2) = classical_pools(&target_graphs, cfg.tasks, rng)?;
    warnings.extend(w2);

    let support = PoolObjective::new(&support_pools, cfg.tasks, cfg.weights, model_cfg);
    let target = PoolObjective::new(&target_pools, cfg.tasks, cfg.weights, model_cfg);
    let subset: BTreeSet<ParamId> = model_cfg.all_ids().into_iter().collect();
    let mg = meta_gradient(
        params,
        &subset,
        &support,
        &target,
        cfg.inner_lr,
        cfg.inner_steps,
        cfg.meta_grad,
    )?;
    adam.step(params, &mg.grad)?;
    let per_task = target.evaluate(&mg.adapted, false)?.per_task;
    Ok(StepOutcome {
        loss: mg.target_loss,
        per_task,
        warnings,
        adapted: vec![],
    })
}

/// One point of the training curve, recorded at every validation.
#[derive(Clone, Debug)]
pub struct CurvePoint {
    pub phase: usize,
    pub epoch: usize,
    pub train_losses: Vec<(Task, f64)>,
    pub val_metric: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation parameters (falls back to the final parameters when
    /// training ended before the first validation).
    pub params: ParamSet,
    pub curve: Vec<CurvePoint>,
    pub best_val: f64,
    pub warnings: Vec<String>,
}

/// Early-stopping controller: strictly-better metrics reset the patience
/// counter.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    evals_since_improve: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            evals_since_improve: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Returns (improved, should_stop).
    pub fn observe(&mut self, metric: f64) -> (bool, bool) {
        let improved = metric < self.best;
        if improved {
            self.best = metric;
            self.evals_since_improve = 0;
        } else {
            self.evals_since_improve += 1;
        }
        (improved, self.evals_since_improve >= self.patience)
    }
}

/// Full training loop on one fold: epochs over shuffled training batches,
/// periodic validation with best-parameter tracking and early stopping.
/// Deterministic for a fixed `(config, seed, fold)`.
pub fn train(
    dataset: &GraphDataset,
    fold: &FoldSplit,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate(dataset)?;
    if cfg.strategy == StrategyKind::FineTune {
        let mut pretrain_cfg = cfg.clone();
        pretrain_cfg.strategy = StrategyKind::ClassicalMultiTask;
        pretrain_cfg.tasks = TaskSet::all();
        let phase1 = train_phase(dataset, fold, model_cfg, &pretrain_cfg, None, 0)?;

        let mut finetune_cfg = cfg.clone();
        finetune_cfg.strategy = StrategyKind::ClassicalMultiTask;
        let mut phase2 = train_phase(
            dataset,
            fold,
            model_cfg,
            &finetune_cfg,
            Some(phase1.params),
            1,
        )?;
        let mut curve = phase1.curve;
        let boundary = curve.last().map_or(0, |p| p.epoch + 1);
        curve.extend(phase2.curve);
        phase2.curve = curve;
        phase2
            .warnings
            .push(format!("finetune phase boundary after epoch {boundary}"));
        phase2.warnings.extend(phase1.warnings);
        Ok(phase2)
    } else {
        train_phase(dataset, fold, model_cfg, cfg, None, 0)
    }
}

/// The parameters a run of [`train`] starts from for a given fold.
pub fn initial_params(model_cfg: &ModelConfig, cfg: &TrainConfig, fold: &FoldSplit) -> ParamSet {
    model_cfg.init_params(seeds::derive(cfg.seed, &[fold.fold_index as u64, 0x1217]))
}

fn train_phase(
    dataset: &GraphDataset,
    fold: &FoldSplit,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    init: Option<ParamSet>,
    phase: usize,
) -> Result<TrainOutcome> {
    let fold_tag = fold.fold_index as u64;
    let inherited = init.is_some();
    let mut params = init.unwrap_or_else(|| initial_params(model_cfg, cfg, fold));
    let mut adam = Adam::new(cfg.adam);
    let mut stopper = EarlyStopper::new(cfg.early_stop.patience);
    let mut best_params: Option<ParamSet> = None;
    let mut curve = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    let start = Instant::now();

    // a later phase inherits parameters; validate them up front so early
    // stopping can fall back to the inherited state if tuning only hurts
    if inherited {
        let val = validation_metric(dataset, fold, model_cfg, cfg, &params)?;
        stopper.observe(val);
        best_params = Some(params.clone());
    }

    let min_batch = if cfg.strategy.is_episodic() {
        cfg.tasks.len().max(2)
    } else {
        1
    };

    for epoch in 0..cfg.epochs {
        let mut order = fold.train_ids.clone();
        order.shuffle(&mut seeds::rng_for(
            cfg.seed,
            &[phase as u64, fold_tag, epoch as u64, 0x5f],
        ));

        let mut sums: Vec<(Task, f64, usize)> = Vec::new();
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < min_batch {
                continue;
            }
            let batch: Vec<Graph> = chunk.iter().map(|&i| dataset.graphs[i].clone()).collect();
            let mut rng = seeds::rng_for(
                cfg.seed,
                &[phase as u64, fold_tag, epoch as u64, batch_idx as u64, 0xba],
            );
            let outcome = match cfg.strategy {
                StrategyKind::ClassicalSingleTask | StrategyKind::ClassicalMultiTask => {
                    classical_mt_step(&mut params, &batch, model_cfg, cfg, &mut adam, &mut rng)?
                }
                StrategyKind::TraditionalMeta => traditional_meta_step(
                    &mut params,
                    &batch,
                    model_cfg,
                    cfg,
                    &mut adam,
                    &mut rng,
                )?,
                StrategyKind::ISame | StrategyKind::ESame => {
                    let episode = build_episode(&batch, cfg.tasks, cfg.weights, &mut rng)?;
                    same_outer_step(&mut params, &episode, model_cfg, cfg, &mut adam)?
                }
                StrategyKind::FineTune => unreachable!("fine-tune dispatches to phases"),
            };
            if !outcome.loss.is_finite() || outcome.loss > DIVERGENCE_LIMIT {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch} batch {batch_idx}: loss {}",
                    outcome.loss
                )));
            }
            for (task, loss) in outcome.per_task {
                match sums.iter_mut().find(|(t, _, _)| *t == task) {
                    Some((_, sum, count)) => {
                        *sum += loss;
                        *count += 1;
                    }
                    None => sums.push((task, loss, 1)),
                }
            }
        }

        let last_epoch = epoch + 1 == cfg.epochs;
        if (epoch + 1) % cfg.early_stop.eval_every == 0 || last_epoch {
            let val = validation_metric(dataset, fold, model_cfg, cfg, &params)?;
            let (improved, stop) = stopper.observe(val);
            if improved {
                best_params = Some(params.clone());
            }
            curve.push(CurvePoint {
                phase,
                epoch,
                train_losses: sums
                    .iter()
                    .map(|(t, sum, count)| (*t, sum / (*count).max(1) as f64))
                    .collect(),
                val_metric: val,
                wall_time_s: start.elapsed().as_secs_f64(),
            });
            if stop {
                warnings.push(format!(
                    "early stop at epoch {epoch} (no improvement for {} evaluations)",
                    cfg.early_stop.patience
                ));
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best_params.unwrap_or(params),
        best_val: stopper.best(),
        curve,
        warnings,
    })
}

/// Early-stopping metric: sum of per-task losses on the validation graphs
/// under the classical protocol, with a fold-fixed seed so successive
/// evaluations see the same pools.
pub fn validation_metric(
    dataset: &GraphDataset,
    fold: &FoldSplit,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    params: &ParamSet,
) -> Result<f64> {
    let val_graphs: Vec<Graph> = fold
        .val_ids
        .iter()
        .map(|&i| dataset.graphs[i].clone())
        .collect();
    let mut rng = seeds::rng_for(cfg.seed, &[fold.fold_index as u64, 0x7a1]);
    let (pools, _) = classical_pools(&val_graphs, cfg.tasks, &mut rng)?;
    // unit weights: the early-stop metric is the plain sum of task losses
    let objective = PoolObjective::new(&pools, cfg.tasks, TaskWeights::default(), model_cfg);
    Ok(objective.evaluate(params, false)?.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamId;
    use crate::tensor::Tensor;
    use rand::Rng;

    /// L(theta) = 0.5 ||theta - c||^2
    struct QuadraticToward {
        c: Vec<f64>,
    }

    impl Objective for QuadraticToward {
        fn loss(&self, params: &ParamSet) -> crate::Result<f64> {
            let t = params.get(ParamId(0)).unwrap();
            Ok(0.5
                * t.data()
                    .iter()
                    .zip(&self.c)
                    .map(|(t, c)| (t - c) * (t - c))
                    .sum::<f64>())
        }

        fn loss_and_grad(&self, params: &ParamSet) -> crate::Result<(f64, GradientMap)> {
            let t = params.get(ParamId(0)).unwrap();
            let grad: Vec<f64> = t.data().iter().zip(&self.c).map(|(t, c)| t - c).collect();
            let mut grads = GradientMap::new();
            grads.insert(ParamId(0), Tensor::from_vec(1, grad.len(), grad)?);
            Ok((self.loss(params)?, grads))
        }
    }

    /// L_S = 0.5 theta' diag(a) theta
    struct DiagQuadratic {
        a: Vec<f64>,
    }

    impl Objective for DiagQuadratic {
        fn loss(&self, params: &ParamSet) -> crate::Result<f64> {
            let t = params.get(ParamId(0)).unwrap();
            Ok(0.5
                * t.data()
                    .iter()
                    .zip(&self.a)
                    .map(|(t, a)| a * t * t)
                    .sum::<f64>())
        }

        fn loss_and_grad(&self, params: &ParamSet) -> crate::Result<(f64, GradientMap)> {
            let t = params.get(ParamId(0)).unwrap();
            let grad: Vec<f64> = t.data().iter().zip(&self.a).map(|(t, a)| a * t).collect();
            let mut grads = GradientMap::new();
            grads.insert(ParamId(0), Tensor::from_vec(1, grad.len(), grad)?);
            Ok((self.loss(params)?, grads))
        }
    }

    /// L_T = b' theta
    struct LinearTarget {
        b: Vec<f64>,
    }

    impl Objective for LinearTarget {
        fn loss(&self, params: &ParamSet) -> crate::Result<f64> {
            let t = params.get(ParamId(0)).unwrap();
            Ok(t.data().iter().zip(&self.b).map(|(t, b)| t * b).sum())
        }

        fn loss_and_grad(&self, params: &ParamSet) -> crate::Result<(f64, GradientMap)> {
            let mut grads = GradientMap::new();
            grads.insert(ParamId(0), Tensor::from_vec(1, self.b.len(), self.b.clone())?);
            Ok((self.loss(params)?, grads))
        }
    }

    fn theta(values: &[f64]) -> ParamSet {
        ParamSet::new(vec![(
            ParamId(0),
            Tensor::from_vec(1, values.len(), values.to_vec()).unwrap(),
        )])
    }

    fn all_ids() -> BTreeSet<ParamId> {
        [ParamId(0)].into_iter().collect()
    }

    #[test]
    fn adapt_one_step_closed_form() {
        // theta' = theta - alpha (theta - c)
        let obj = QuadraticToward { c: vec![1.0, -2.0] };
        let start = theta(&[3.0, 4.0]);
        let result = adapt(&start, &all_ids(), &obj, 0.1, 1).unwrap();
        let got = result.params.get(ParamId(0)).unwrap();
        assert!((got.get(0, 0) - (3.0 - 0.1 * 2.0)).abs() < 1e-12);
        assert!((got.get(0, 1) - (4.0 - 0.1 * 6.0)).abs() < 1e-12);
        assert_eq!(result.iterates.len(), 2);
    }

    #[test]
    fn adapt_leaves_non_adaptable_entries_bit_identical() {
        let obj = QuadraticToward {
            c: vec![0.0, 0.0, 0.0],
        };
        let start = ParamSet::new(vec![
            (ParamId(0), Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap()),
            (ParamId(1), Tensor::from_vec(1, 2, vec![0.5, -0.5]).unwrap()),
        ]);
        let subset: BTreeSet<ParamId> = [ParamId(0)].into_iter().collect();
        let result = adapt(&start, &subset, &obj, 0.05, 3).unwrap();
        assert_eq!(
            result.params.get(ParamId(1)).unwrap(),
            start.get(ParamId(1)).unwrap()
        );
        assert_ne!(
            result.params.get(ParamId(0)).unwrap(),
            start.get(ParamId(0)).unwrap()
        );
    }

    #[test]
    fn second_order_meta_gradient_matches_analytic_quadratic() {
        // L_S = 0.5 theta' A theta, A = diag(2, 4); L_T = b' theta, b = (1, 1)
        // one step, alpha = 0.1: meta-grad = (I - alpha A) b = (0.8, 0.6)
        let support = DiagQuadratic { a: vec![2.0, 4.0] };
        let target = LinearTarget { b: vec![1.0, 1.0] };
        let start = theta(&[0.7, -0.3]);
        let mg = meta_gradient(
            &start,
            &all_ids(),
            &support,
            &target,
            0.1,
            1,
            MetaGradMode::SecondOrder,
        )
        .unwrap();
        let g = mg.grad.get(ParamId(0)).unwrap();
        assert!((g.get(0, 0) - 0.8).abs() < 1e-6, "{}", g.get(0, 0));
        assert!((g.get(0, 1) - 0.6).abs() < 1e-6, "{}", g.get(0, 1));
    }

    #[test]
    fn first_order_meta_gradient_is_target_gradient() {
        let support = DiagQuadratic { a: vec![2.0, 4.0] };
        let target = LinearTarget { b: vec![1.0, 1.0] };
        let start = theta(&[0.7, -0.3]);
        let mg = meta_gradient(
            &start,
            &all_ids(),
            &support,
            &target,
            0.1,
            1,
            MetaGradMode::FirstOrder,
        )
        .unwrap();
        let g = mg.grad.get(ParamId(0)).unwrap();
        assert_eq!(g.get(0, 0), 1.0);
        assert_eq!(g.get(0, 1), 1.0);
    }

    #[test]
    fn early_stopper_triggers_on_monotone_worsening() {
        let mut stopper = EarlyStopper::new(3);
        assert_eq!(stopper.observe(1.0), (true, false));
        assert_eq!(stopper.observe(0.8), (true, false));
        // worsens from here on
        assert_eq!(stopper.observe(0.9), (false, false));
        assert_eq!(stopper.observe(1.1), (false, false));
        assert_eq!(stopper.observe(1.2), (false, true));
        assert!((stopper.best() - 0.8).abs() < 1e-12);
    }

    // --- fixture-based strategy tests ---

    fn fixture_dataset(count: usize) -> GraphDataset {
        let graphs: Vec<Graph> = (0..count)
            .map(|i| {
                let mut rng = seeds::rng(i as u64 + 900);
                let n = 8 + i % 4;
                let mut edges = Vec::new();
                for u in 0..n {
                    for v in u + 1..n {
                        if rng.gen_bool(0.4) {
                            edges.push((u, v));
                        }
                    }
                }
                let labels: Vec<usize> = (0..n).map(|j| j % 2).collect();
                let mut feats = Tensor::glorot_uniform(n, 4, &mut rng);
                for (j, &l) in labels.iter().enumerate() {
                    feats.set(j, 0, l as f64 + 0.1 * feats.get(j, 0));
                }
                Graph::new(n, edges, feats, Some(labels), Some(i % 2)).unwrap()
            })
            .collect();
        GraphDataset::new("fixture", graphs).unwrap()
    }

    fn small_cfg(ds: &GraphDataset) -> ModelConfig {
        ModelConfig::for_dataset(ds)
            .with_hidden_dim(8)
            .with_num_layers(2)
    }

    #[test]
    fn esame_never_touches_encoder_in_inner_loop() {
        let ds = fixture_dataset(12);
        let model_cfg = small_cfg(&ds);
        let mut cfg = TrainConfig::new(StrategyKind::ESame, TaskSet::all());
        cfg.seed = 5;
        let mut params = model_cfg.init_params(5);
        let mut adam = Adam::new(cfg.adam);
        let episode = build_episode(
            &ds.graphs,
            cfg.tasks,
            cfg.weights,
            &mut seeds::rng(17),
        )
        .unwrap();
        let before = params.clone();
        let outcome =
            same_outer_step(&mut params, &episode, &model_cfg, &cfg, &mut adam).unwrap();
        for (_, adapted) in &outcome.adapted {
            for id in model_cfg.encoder_ids() {
                assert_eq!(
                    adapted.get(id).unwrap(),
                    before.get(id).unwrap(),
                    "encoder must be bit-identical inside the eSAME inner loop"
                );
            }
        }
        // but the outer Adam step does move the encoder
        assert_ne!(
            params.get(model_cfg.encoder_ids()[0]).unwrap(),
            before.get(model_cfg.encoder_ids()[0]).unwrap()
        );
    }

    #[test]
    fn outer_loss_matches_independent_recomputation() {
        let ds = fixture_dataset(12);
        let model_cfg = small_cfg(&ds);
        let mut cfg = TrainConfig::new(StrategyKind::ISame, TaskSet::all());
        cfg.seed = 6;
        let mut params = model_cfg.init_params(6);
        let snapshot = params.clone();
        let mut adam = Adam::new(cfg.adam);
        let episode =
            build_episode(&ds.graphs, cfg.tasks, cfg.weights, &mut seeds::rng(19)).unwrap();
        let outcome =
            same_outer_step(&mut params, &episode, &model_cfg, &cfg, &mut adam).unwrap();

        // recompute: adapt per task from the snapshot, evaluate target pools
        let mut expected = 0.0;
        for task in cfg.tasks.iter() {
            let support = PoolObjective::single(&episode.support, task, &model_cfg);
            let target = PoolObjective::single(&episode.target, task, &model_cfg);
            let subset = adaptable_ids(cfg.strategy, &model_cfg, task);
            let adapted = adapt(&snapshot, &subset, &support, cfg.inner_lr, 1).unwrap();
            expected += episode.weights.get(task) * target.loss(&adapted.params).unwrap();
        }
        assert!(
            (outcome.loss - expected).abs() < 1e-10,
            "{} vs {expected}",
            outcome.loss
        );
    }

    #[test]
    fn adaptation_decreases_support_loss_on_fixture() {
        let ds = fixture_dataset(9);
        let model_cfg = small_cfg(&ds);
        let params = model_cfg.init_params(8);
        let episode =
            build_episode(&ds.graphs, TaskSet::all(), TaskWeights::default(), &mut seeds::rng(23))
                .unwrap();
        for task in TaskSet::all().iter() {
            let support = PoolObjective::single(&episode.support, task, &model_cfg);
            let subset = adaptable_ids(StrategyKind::ISame, &model_cfg, task);
            let before = support.loss(&params).unwrap();
            let adapted = adapt(&params, &subset, &support, 0.01, 1).unwrap();
            let after = support.loss(&adapted.params).unwrap();
            assert!(
                after < before,
                "{task}: support loss should drop ({before} -> {after})"
            );
        }
    }

    #[test]
    fn classical_single_task_equals_multi_with_one_task() {
        let ds = fixture_dataset(8);
        let model_cfg = small_cfg(&ds);
        let tasks = TaskSet::single(Task::Gc);
        let mut cfg_st = TrainConfig::new(StrategyKind::ClassicalSingleTask, tasks);
        cfg_st.seed = 4;
        let cfg_mt = TrainConfig {
            strategy: StrategyKind::ClassicalMultiTask,
            ..cfg_st.clone()
        };

        let mut params_a = model_cfg.init_params(9);
        let mut params_b = params_a.clone();
        let mut adam_a = Adam::new(cfg_st.adam);
        let mut adam_b = Adam::new(cfg_mt.adam);
        let out_a = classical_mt_step(
            &mut params_a,
            &ds.graphs,
            &model_cfg,
            &cfg_st,
            &mut adam_a,
            &mut seeds::rng(31),
        )
        .unwrap();
        let out_b = classical_mt_step(
            &mut params_b,
            &ds.graphs,
            &model_cfg,
            &cfg_mt,
            &mut adam_b,
            &mut seeds::rng(31),
        )
        .unwrap();
        assert_eq!(out_a.loss, out_b.loss);
        assert_eq!(params_a, params_b);
    }

    #[test]
    fn classical_loss_decreases_over_steps() {
        let ds = fixture_dataset(10);
        let model_cfg = small_cfg(&ds);
        let mut cfg = TrainConfig::new(StrategyKind::ClassicalMultiTask, TaskSet::all());
        cfg.adam = AdamConfig::with_lr(5e-3);
        let mut params = model_cfg.init_params(10);
        let mut adam = Adam::new(cfg.adam);
        let mut first = None;
        let mut last = 0.0;
        for step in 0..100 {
            let outcome = classical_mt_step(
                &mut params,
                &ds.graphs,
                &model_cfg,
                &cfg,
                &mut adam,
                &mut seeds::rng_for(77, &[step]),
            )
            .unwrap();
            first.get_or_insert(outcome.loss);
            last = outcome.loss;
        }
        let first = first.unwrap();
        assert!(
            last < first * 0.9,
            "loss should drop by 10% over 100 steps: {first} -> {last}"
        );
    }

    #[test]
    fn trad_meta_trajectory_differs_from_same() {
        let ds = fixture_dataset(12);
        let model_cfg = small_cfg(&ds);
        let mut cfg = TrainConfig::new(StrategyKind::TraditionalMeta, TaskSet::all());
        cfg.seed = 3;
        let mut params_trad = model_cfg.init_params(12);
        let mut params_same = params_trad.clone();
        let mut adam_a = Adam::new(cfg.adam);
        let mut adam_b = Adam::new(cfg.adam);

        traditional_meta_step(
            &mut params_trad,
            &ds.graphs,
            &model_cfg,
            &cfg,
            &mut adam_a,
            &mut seeds::rng(41),
        )
        .unwrap();

        let episode =
            build_episode(&ds.graphs, cfg.tasks, cfg.weights, &mut seeds::rng(41)).unwrap();
        let same_cfg = TrainConfig {
            strategy: StrategyKind::ISame,
            ..cfg
        };
        same_outer_step(&mut params_same, &episode, &model_cfg, &same_cfg, &mut adam_b).unwrap();
        assert_ne!(params_trad, params_same);
    }

    #[test]
    fn train_smoke_run_is_deterministic() {
        let ds = fixture_dataset(16);
        let model_cfg = small_cfg(&ds);
        let folds = crate::graph::make_folds(&ds, 2, 1).unwrap();
        let mut cfg = TrainConfig::new(StrategyKind::ESame, TaskSet::single(Task::Nc));
        cfg.epochs = 4;
        cfg.batch_size = 8;
        cfg.early_stop.eval_every = 2;
        cfg.seed = 99;
        let a = train(&ds, &folds[0], &model_cfg, &cfg).unwrap();
        let b = train(&ds, &folds[0], &model_cfg, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert!(!a.curve.is_empty());
        assert_eq!(a.best_val, b.best_val);
    }

    #[test]
    fn finetune_requires_two_tasks_and_pretrains_all_three() {
        let ds = fixture_dataset(16);
        let model_cfg = small_cfg(&ds);
        let mut bad = TrainConfig::new(StrategyKind::FineTune, TaskSet::all());
        bad.epochs = 1;
        assert!(train(&ds, &crate::graph::make_folds(&ds, 2, 1).unwrap()[0], &model_cfg, &bad).is_err());

        let mut cfg = TrainConfig::new(
            StrategyKind::FineTune,
            TaskSet::new(&[Task::Gc, Task::Nc]),
        );
        cfg.epochs = 2;
        cfg.batch_size = 8;
        cfg.early_stop.eval_every = 1;
        cfg.seed = 7;
        let folds = crate::graph::make_folds(&ds, 2, 1).unwrap();
        let outcome = train(&ds, &folds[0], &model_cfg, &cfg).unwrap();
        // both phases leave curve points and the boundary is logged
        assert!(outcome.curve.iter().any(|p| p.phase == 0));
        assert!(outcome.curve.iter().any(|p| p.phase == 1));
        assert!(outcome
            .warnings
            .iter()
            .any(|w| w.contains("phase boundary")));
    }

    #[test]
    fn finetune_phase2_does_not_worsen_pair_validation() {
        let ds = fixture_dataset(16);
        let model_cfg = small_cfg(&ds);
        let folds = crate::graph::make_folds(&ds, 2, 1).unwrap();
        let pair = TaskSet::new(&[Task::Gc, Task::Nc]);

        // a standalone classical run with the same seeds reproduces the
        // fine-tune pretraining phase exactly
        let mut phase1_cfg = TrainConfig::new(StrategyKind::ClassicalMultiTask, TaskSet::all());
        phase1_cfg.epochs = 10;
        phase1_cfg.adam = AdamConfig::with_lr(5e-3);
        phase1_cfg.batch_size = 8;
        phase1_cfg.early_stop.eval_every = 1;
        phase1_cfg.seed = 33;
        let phase1 = train(&ds, &folds[0], &model_cfg, &phase1_cfg).unwrap();

        let mut ft_cfg = TrainConfig::new(StrategyKind::FineTune, pair);
        ft_cfg.adam = AdamConfig::with_lr(5e-3);
        ft_cfg.epochs = 10;
        ft_cfg.batch_size = 8;
        ft_cfg.early_stop.eval_every = 1;
        ft_cfg.seed = 33;
        let finetuned = train(&ds, &folds[0], &model_cfg, &ft_cfg).unwrap();

        let pair_cfg = TrainConfig {
            tasks: pair,
            ..phase1_cfg
        };
        let val_phase1 =
            validation_metric(&ds, &folds[0], &model_cfg, &pair_cfg, &phase1.params).unwrap();
        let val_finetuned =
            validation_metric(&ds, &folds[0], &model_cfg, &pair_cfg, &finetuned.params).unwrap();
        assert!(
            val_finetuned <= val_phase1 + 1e-9,
            "fine-tuning worsened pair validation: {val_phase1} -> {val_finetuned}"
        );
    }

    #[test]
    fn best_params_snapshot_is_argmin_of_curve() {
        let ds = fixture_dataset(16);
        let model_cfg = small_cfg(&ds);
        let folds = crate::graph::make_folds(&ds, 2, 1).unwrap();
        let mut cfg = TrainConfig::new(StrategyKind::ClassicalMultiTask, TaskSet::all());
        cfg.epochs = 6;
        cfg.batch_size = 8;
        cfg.early_stop.eval_every = 1;
        cfg.seed = 13;
        let outcome = train(&ds, &folds[0], &model_cfg, &cfg).unwrap();
        let curve_min = outcome
            .curve
            .iter()
            .map(|p| p.val_metric)
            .fold(f64::INFINITY, f64::min);
        assert!((outcome.best_val - curve_min).abs() < 1e-12);
        // best params reproduce the best validation metric
        let revalidated =
            validation_metric(&ds, &folds[0], &model_cfg, &cfg, &outcome.params).unwrap();
        assert!((revalidated - outcome.best_val).abs() < 1e-12);
    }
}
