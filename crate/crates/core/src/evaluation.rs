//! Frozen-encoder evaluation: embedding extraction, linear/neural probes,
//! task metrics, head-based (end-to-end) evaluation, and the transfer
//! experiment harness.
//!
//! The protocol mirrors the training conventions: probes train on the fold's
//! training graphs and report on its test graphs; link-prediction features
//! come from graphs with held-out edges removed, scored on those held-out
//! edges against an equal number of sampled non-edges.

use rand::seq::SliceRandom;

use crate::adam::{Adam, AdamConfig};
use crate::autodiff::{GradientMap, ParamId, ParamSet, Tape};
use crate::episodes::sample_negative_edges;
use crate::exec;
use crate::graph::{FoldSplit, Graph, GraphDataset};
use crate::model::{encode, gc_forward, lp_forward, nc_forward, BoundParams, ModelConfig, Task};
use crate::report::MetricRow;
use crate::seeds;
use crate::tensor::Tensor;
use crate::training::{train, EarlyStopper, TrainConfig, TrainOutcome};
use crate::{Error, Result};

/// Node embeddings for a list of graphs, with provenance.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    pub embeddings: Vec<Tensor>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Default)]
pub struct Provenance {
    pub strategy: String,
    pub trained_tasks: String,
    pub fold: usize,
    pub seed: u64,
}

/// Encodes every graph with the frozen encoder (heads untouched).
pub fn embed_dataset(
    cfg: &ModelConfig,
    params: &ParamSet,
    graphs: &[Graph],
    provenance: Provenance,
) -> Result<EmbeddingSet> {
    let embeddings = exec::try_par_map(graphs, |g| encode(cfg, params, g))?;
    Ok(EmbeddingSet {
        embeddings,
        provenance,
    })
}

/// One probe example addressing rows of an [`EmbeddingSet`].
#[derive(Clone, Debug)]
pub enum ProbeInstance {
    /// Mean of a graph's node embeddings -> graph label.
    Graph { graph: usize, label: usize },
    /// A node's embedding row -> node label.
    Node {
        graph: usize,
        node: usize,
        label: usize,
    },
    /// Concatenated embeddings of a node pair -> edge/non-edge.
    Pair {
        graph: usize,
        pair: (usize, usize),
        label: bool,
    },
}

#[derive(Clone, Debug)]
pub struct ProbeData {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

/// Assembles the feature matrix for a homogeneous instance list: GC features
/// are mean-pooled embeddings, NC features the raw rows, LP features the
/// `[h_u ; h_v]` concatenation (canonical u < v order).
pub fn probe_features(set: &EmbeddingSet, instances: &[ProbeInstance]) -> Result<ProbeData> {
    if instances.is_empty() {
        return Err(Error::Argument("no probe instances".into()));
    }
    let dim = set
        .embeddings
        .first()
        .map(Tensor::cols)
        .ok_or_else(|| Error::Argument("empty embedding set".into()))?;
    let width = match instances[0] {
        ProbeInstance::Pair { .. } => 2 * dim,
        _ => dim,
    };
    let mut features = Tensor::zeros(instances.len(), width);
    let mut labels = Vec::with_capacity(instances.len());
    for (row, inst) in instances.iter().enumerate() {
        match inst {
            ProbeInstance::Graph { graph, label } => {
                let pooled = set.embeddings[*graph].mean_rows()?;
                features.row_mut(row).copy_from_slice(pooled.row(0));
                labels.push(*label);
            }
            ProbeInstance::Node { graph, node, label } => {
                features
                    .row_mut(row)
                    .copy_from_slice(set.embeddings[*graph].row(*node));
                labels.push(*label);
            }
            ProbeInstance::Pair { graph, pair, label } => {
                let emb = &set.embeddings[*graph];
                let (u, v) = (pair.0.min(pair.1), pair.0.max(pair.1));
                if v >= emb.rows() {
                    return Err(Error::Argument(format!(
                        "pair ({u}, {v}) out of range for {} nodes",
                        emb.rows()
                    )));
                }
                features.row_mut(row)[..dim].copy_from_slice(emb.row(u));
                features.row_mut(row)[dim..].copy_from_slice(emb.row(v));
                labels.push(usize::from(*label));
            }
        }
    }
    Ok(ProbeData { features, labels })
}

// ---------------------------------------------------------------------------
// linear probe
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct ProbeTrainConfig {
    pub l2: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig {
            l2: 1e-3,
            max_iter: 4000,
            grad_tol: 1e-5,
        }
    }
}

/// Multinomial logistic regression trained by deterministic full-batch
/// accelerated gradient descent (the "linear classifier" of the evaluation
/// protocol).
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    pub weights: Tensor, // d x C
    pub bias: Tensor,    // 1 x C
    pub num_classes: usize,
    /// Set when the training labels contained a single class; the classifier
    /// then constantly predicts it.
    pub degenerate: Option<usize>,
}

impl LinearClassifier {
    pub fn predict_proba(&self, features: &Tensor) -> Result<Tensor> {
        let mut logits = features.matmul(&self.weights)?;
        for i in 0..logits.rows() {
            for (l, b) in logits.row_mut(i).iter_mut().zip(self.bias.row(0)) {
                *l += b;
            }
        }
        Ok(logits.softmax_rows())
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        if let Some(class) = self.degenerate {
            return Ok(vec![class; features.rows()]);
        }
        Ok(self.predict_proba(features)?.argmax_rows())
    }

    /// Probability of class 1 (binary probes).
    pub fn scores(&self, features: &Tensor) -> Result<Vec<f64>> {
        if let Some(class) = self.degenerate {
            return Ok(vec![class as f64; features.rows()]);
        }
        let proba = self.predict_proba(features)?;
        Ok((0..proba.rows()).map(|i| proba.get(i, 1)).collect())
    }
}

fn spectral_norm_sq(features: &Tensor) -> f64 {
    // power iteration on X'X, deterministic start
    let d = features.cols();
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..50 {
        // u = X v; w = X' u
        let mut w = vec![0.0; d];
        for i in 0..features.rows() {
            let row = features.row(i);
            let u: f64 = row.iter().zip(&v).map(|(x, v)| x * v).sum();
            for (w_j, x_j) in w.iter_mut().zip(row) {
                *w_j += u * x_j;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        for (v_j, w_j) in v.iter_mut().zip(&w) {
            *v_j = w_j / norm;
        }
    }
    lambda
}

/// Trains the linear probe to `grad_tol` (infinity norm) or `max_iter`.
/// Deterministic given the data order.
pub fn train_linear_probe(
    features: &Tensor,
    labels: &[usize],
    cfg: ProbeTrainConfig,
) -> Result<LinearClassifier> {
    if features.rows() != labels.len() {
        return Err(Error::Argument(format!(
            "{} feature rows but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Argument("cannot train a probe on no data".into()));
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    let distinct = {
        let mut seen = vec![false; num_classes];
        for &l in labels {
            seen[l] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Ok(LinearClassifier {
            weights: Tensor::zeros(features.cols(), num_classes.max(2)),
            bias: Tensor::zeros(1, num_classes.max(2)),
            num_classes: num_classes.max(2),
            degenerate: Some(labels[0]),
        });
    }

    let n = features.rows();
    let d = features.cols();
    let inv_n = 1.0 / n as f64;
    // smoothness bound of the softmax cross-entropy plus ridge term
    let lipschitz = 0.5 * (spectral_norm_sq(features) + 1.0) * inv_n + cfg.l2;
    let step = 1.0 / lipschitz;
    let kappa = (lipschitz / cfg.l2).max(1.0);
    let momentum = (kappa.sqrt() - 1.0) / (kappa.sqrt() + 1.0);

    let mut w = Tensor::zeros(d, num_classes);
    let mut b = Tensor::zeros(1, num_classes);
    let mut w_prev = w.clone();
    let mut b_prev = b.clone();

    let grad_at = |w: &Tensor, b: &Tensor| -> Result<(Tensor, Tensor)> {
        let mut logits = features.matmul(w)?;
        for i in 0..n {
            for (l, bias) in logits.row_mut(i).iter_mut().zip(b.row(0)) {
                *l += bias;
            }
        }
        let probs = logits.softmax_rows();
        // residual = (P - Y) / n
        let mut residual = probs;
        for (i, &label) in labels.iter().enumerate() {
            let row = residual.row_mut(i);
            row[label] -= 1.0;
            for v in row.iter_mut() {
                *v *= inv_n;
            }
        }
        let mut grad_w = features.transpose().matmul(&residual)?;
        grad_w.add_scaled(w, cfg.l2)?;
        let mut grad_b = Tensor::zeros(1, num_classes);
        for i in 0..n {
            for (g, r) in grad_b.row_mut(0).iter_mut().zip(residual.row(i)) {
                *g += r;
            }
        }
        Ok((grad_w, grad_b))
    };

    for iter in 0..cfg.max_iter {
        // Nesterov extrapolation
        let mut y_w = w.clone();
        y_w.add_scaled(&w, momentum)?;
        y_w.add_scaled(&w_prev, -momentum)?;
        let mut y_b = b.clone();
        y_b.add_scaled(&b, momentum)?;
        y_b.add_scaled(&b_prev, -momentum)?;

        let (grad_w, grad_b) = grad_at(&y_w, &y_b)?;
        w_prev = w;
        b_prev = b;
        w = y_w;
        w.add_scaled(&grad_w, -step)?;
        b = y_b;
        b.add_scaled(&grad_b, -step)?;

        if iter % 10 == 9 || grad_w.max_abs().max(grad_b.max_abs()) < cfg.grad_tol {
            let (gw, gb) = grad_at(&w, &b)?;
            if gw.max_abs().max(gb.max_abs()) < cfg.grad_tol {
                break;
            }
        }
    }

    Ok(LinearClassifier {
        weights: w,
        bias: b,
        num_classes,
        degenerate: None,
    })
}

// ---------------------------------------------------------------------------
// neural probe (one hidden layer, used by the transfer experiments)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct NeuralProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for NeuralProbeConfig {
    fn default() -> Self {
        NeuralProbeConfig {
            hidden: 256,
            epochs: 300,
            patience: 20,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// One-hidden-layer ReLU classifier trained with Adam and early stopping on
/// a held-out 10% of the probe data.
#[derive(Clone, Debug)]
pub struct NeuralProbe {
    params: ParamSet,
    degenerate: Option<usize>,
}

const NP_W1: ParamId = ParamId(0);
const NP_B1: ParamId = ParamId(1);
const NP_W2: ParamId = ParamId(2);
const NP_B2: ParamId = ParamId(3);

fn neural_logits(params: &ParamSet, features: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, params)?;
    let x = tape.leaf(features)?;
    let h = tape.relu(tape.add_row(tape.matmul(x, bound.var(NP_W1))?, bound.var(NP_B1))?)?;
    let logits = tape.add_row(tape.matmul(h, bound.var(NP_W2))?, bound.var(NP_B2))?;
    Ok(tape.value(logits))
}

fn neural_loss_and_grad(
    params: &ParamSet,
    features: &Tensor,
    labels: &[usize],
) -> Result<(f64, GradientMap)> {
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, params)?;
    let x = tape.leaf(features)?;
    let h = tape.relu(tape.add_row(tape.matmul(x, bound.var(NP_W1))?, bound.var(NP_B1))?)?;
    let logits = tape.add_row(tape.matmul(h, bound.var(NP_W2))?, bound.var(NP_B2))?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let value = tape.scalar_value(loss)?;
    let grads = tape.backward(loss, &bound.pairs())?;
    Ok((value, grads))
}

pub fn train_neural_probe(
    features: &Tensor,
    labels: &[usize],
    cfg: NeuralProbeConfig,
) -> Result<NeuralProbe> {
    if features.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Argument("bad probe training data".into()));
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    if labels.iter().all(|&l| l == labels[0]) {
        return Ok(NeuralProbe {
            params: ParamSet::empty(),
            degenerate: Some(labels[0]),
        });
    }

    // 10% validation split for early stopping
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut seeds::rng_for(cfg.seed, &[0x9e0]));
    let val_len = (labels.len() / 10).max(1);
    let (val_idx, train_idx) = order.split_at(val_len);
    let gather = |idx: &[usize]| -> (Tensor, Vec<usize>) {
        let mut f = Tensor::zeros(idx.len(), features.cols());
        let mut l = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            f.row_mut(row).copy_from_slice(features.row(i));
            l.push(labels[i]);
        }
        (f, l)
    };
    let (train_x, train_y) = gather(train_idx);
    let (val_x, val_y) = gather(val_idx);

    let mut rng = seeds::rng_for(cfg.seed, &[0x9e1]);
    let d = features.cols();
    let mut params = ParamSet::new(vec![
        (NP_W1, Tensor::glorot_uniform(d, cfg.hidden, &mut rng)),
        (NP_B1, Tensor::zeros(1, cfg.hidden)),
        (NP_W2, Tensor::glorot_uniform(cfg.hidden, num_classes, &mut rng)),
        (NP_B2, Tensor::zeros(1, num_classes)),
    ]);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = params.clone();

    for _epoch in 0..cfg.epochs {
        let (_, grads) = neural_loss_and_grad(&params, &train_x, &train_y)?;
        adam.step(&mut params, &grads)?;
        let val_logits = neural_logits(&params, &val_x)?;
        let tape = Tape::new();
        let logits_var = tape.leaf(&val_logits)?;
        let val_loss = tape.scalar_value(tape.softmax_cross_entropy(logits_var, &val_y)?)?;
        let (improved, stop) = stopper.observe(val_loss);
        if improved {
            best = params.clone();
        }
        if stop {
            break;
        }
    }

    Ok(NeuralProbe {
        params: best,
        degenerate: None,
    })
}

impl NeuralProbe {
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        if let Some(class) = self.degenerate {
            return Ok(vec![class; features.rows()]);
        }
        Ok(neural_logits(&self.params, features)?.argmax_rows())
    }

    pub fn scores(&self, features: &Tensor) -> Result<Vec<f64>> {
        if let Some(class) = self.degenerate {
            return Ok(vec![class as f64; features.rows()]);
        }
        let probs = neural_logits(&self.params, features)?.softmax_rows();
        Ok((0..probs.rows()).map(|i| probs.get(i, 1)).collect())
    }
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / predictions.len() as f64
}

/// ROC AUC via the Mann-Whitney rank statistic; tied scores get midranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Argument("scores/labels length mismatch".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Argument(
            "roc auc needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let np = positives as f64;
    let nn = negatives as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

// ---------------------------------------------------------------------------
// task evaluation protocols
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    Linear,
    Neural,
}

impl ProbeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Neural => "neural",
        }
    }

    pub fn parse(s: &str) -> Result<ProbeKind> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(ProbeKind::Linear),
            "neural" => Ok(ProbeKind::Neural),
            other => Err(Error::Argument(format!("unknown probe kind {other:?}"))),
        }
    }
}

/// How a trained model is scored on a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// End-to-end: the model's own head predicts.
    Head,
    /// Frozen encoder, probe trained on embeddings.
    Probe(ProbeKind),
}

impl EvalMode {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMode::Head => "head",
            EvalMode::Probe(kind) => kind.name(),
        }
    }
}

pub fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Nc | Task::Gc => "accuracy",
        Task::Lp => "roc_auc",
    }
}

/// Per-graph link-prediction evaluation split: edges removed from the
/// encoded graph become positives, matched by an equal number of sampled
/// non-edges (u < v order).
struct LpEvalInstance {
    reduced: Graph,
    pairs: Vec<((usize, usize), bool)>,
}

fn lp_eval_instances(graphs: &[Graph], seed: u64) -> Vec<(usize, LpEvalInstance)> {
    let mut out = Vec::new();
    for (idx, graph) in graphs.iter().enumerate() {
        let num_edges = graph.num_edges();
        if num_edges < 2 {
            continue;
        }
        let mut rng = seeds::rng_for(seed, &[idx as u64, 0x1b]);
        let removed_count = (((num_edges as f64) * 0.2).floor() as usize).max(1);
        let mut edges = graph.edges().to_vec();
        edges.shuffle(&mut rng);
        let removed: Vec<(usize, usize)> = edges[..removed_count].to_vec();
        let kept: Vec<(usize, usize)> = edges[removed_count..].to_vec();
        let negatives = sample_negative_edges(graph, removed.len(), &mut rng);
        let reduced = graph.with_edges(kept).expect("kept edges are valid");
        let mut pairs: Vec<((usize, usize), bool)> =
            removed.into_iter().map(|p| (p, true)).collect();
        pairs.extend(negatives.into_iter().map(|p| (p, false)));
        out.push((idx, LpEvalInstance { reduced, pairs }));
    }
    out
}

/// Probe data for one task over a set of graphs. LP ignores `set` and
/// re-encodes reduced graphs internally.
fn task_probe_data(
    task: Task,
    cfg: &ModelConfig,
    params: &ParamSet,
    graphs: &[Graph],
    set: &EmbeddingSet,
    seed: u64,
) -> Result<ProbeData> {
    match task {
        Task::Gc => {
            let instances: Vec<ProbeInstance> = graphs
                .iter()
                .enumerate()
                .filter_map(|(i, g)| {
                    g.graph_label()
                        .map(|label| ProbeInstance::Graph { graph: i, label })
                })
                .collect();
            probe_features(set, &instances)
        }
        Task::Nc => {
            let mut instances = Vec::new();
            for (i, g) in graphs.iter().enumerate() {
                let labels = g.node_labels().ok_or_else(|| {
                    Error::Argument("node probe needs node labels".into())
                })?;
                for (node, &label) in labels.iter().enumerate() {
                    instances.push(ProbeInstance::Node {
                        graph: i,
                        node,
                        label,
                    });
                }
            }
            probe_features(set, &instances)
        }
        Task::Lp => {
            let splits = lp_eval_instances(graphs, seed);
            let reduced: Vec<Graph> = splits.iter().map(|(_, s)| s.reduced.clone()).collect();
            let embeddings = embed_dataset(cfg, params, &reduced, set.provenance.clone())?;
            let mut instances = Vec::new();
            for (pos, (_, split)) in splits.iter().enumerate() {
                for &(pair, label) in &split.pairs {
                    instances.push(ProbeInstance::Pair {
                        graph: pos,
                        pair,
                        label,
                    });
                }
            }
            probe_features(&embeddings, &instances)
        }
    }
}

/// Trains a probe on the fold's training graphs and scores it on the test
/// graphs. Returns the metric as a percentage.
#[allow(clippy::too_many_arguments)]
pub fn probe_metric(
    task: Task,
    cfg: &ModelConfig,
    params: &ParamSet,
    dataset: &GraphDataset,
    fold: &FoldSplit,
    kind: ProbeKind,
    seed: u64,
    provenance: &Provenance,
) -> Result<f64> {
    let train_graphs: Vec<Graph> = fold.train_ids.iter().map(|&i| dataset.graphs[i].clone()).collect();
    let test_graphs: Vec<Graph> = fold.test_ids.iter().map(|&i| dataset.graphs[i].clone()).collect();

    let train_set = embed_dataset(cfg, params, &train_graphs, provenance.clone())?;
    let test_set = embed_dataset(cfg, params, &test_graphs, provenance.clone())?;

    let train_data = task_probe_data(
        task,
        cfg,
        params,
        &train_graphs,
        &train_set,
        seeds::derive(seed, &[fold.fold_index as u64, 0x11]),
    )?;
    let test_data = task_probe_data(
        task,
        cfg,
        params,
        &test_graphs,
        &test_set,
        seeds::derive(seed, &[fold.fold_index as u64, 0x12]),
    )?;

    score_probe(task, kind, seed, &train_data, &test_data)
}

/// Training-row budget for the neural probe; full-batch Adam on more data
/// than this costs minutes without moving the metric.
const NEURAL_PROBE_MAX_ROWS: usize = 2000;

fn subsample_probe_data(data: &ProbeData, max_rows: usize, seed: u64) -> ProbeData {
    if data.features.rows() <= max_rows {
        return data.clone();
    }
    let mut order: Vec<usize> = (0..data.features.rows()).collect();
    order.shuffle(&mut seeds::rng_for(seed, &[0x5ab]));
    order.truncate(max_rows);
    order.sort_unstable();
    let mut features = Tensor::zeros(max_rows, data.features.cols());
    let mut labels = Vec::with_capacity(max_rows);
    for (row, &i) in order.iter().enumerate() {
        features.row_mut(row).copy_from_slice(data.features.row(i));
        labels.push(data.labels[i]);
    }
    ProbeData { features, labels }
}

fn score_probe(
    task: Task,
    kind: ProbeKind,
    seed: u64,
    train_data: &ProbeData,
    test_data: &ProbeData,
) -> Result<f64> {
    let capped;
    let train_data = if kind == ProbeKind::Neural {
        capped = subsample_probe_data(train_data, NEURAL_PROBE_MAX_ROWS, seed);
        &capped
    } else {
        train_data
    };
    let value = match (task, kind) {
        (Task::Lp, ProbeKind::Linear) => {
            let probe =
                train_linear_probe(&train_data.features, &train_data.labels, ProbeTrainConfig::default())?;
            let scores = probe.scores(&test_data.features)?;
            let labels: Vec<bool> = test_data.labels.iter().map(|&l| l == 1).collect();
            roc_auc(&scores, &labels)?
        }
        (Task::Lp, ProbeKind::Neural) => {
            let probe = train_neural_probe(
                &train_data.features,
                &train_data.labels,
                NeuralProbeConfig {
                    seed,
                    ..NeuralProbeConfig::default()
                },
            )?;
            let scores = probe.scores(&test_data.features)?;
            let labels: Vec<bool> = test_data.labels.iter().map(|&l| l == 1).collect();
            roc_auc(&scores, &labels)?
        }
        (_, ProbeKind::Linear) => {
            let probe =
                train_linear_probe(&train_data.features, &train_data.labels, ProbeTrainConfig::default())?;
            accuracy(&probe.predict(&test_data.features)?, &test_data.labels)
        }
        (_, ProbeKind::Neural) => {
            let probe = train_neural_probe(
                &train_data.features,
                &train_data.labels,
                NeuralProbeConfig {
                    seed,
                    ..NeuralProbeConfig::default()
                },
            )?;
            accuracy(&probe.predict(&test_data.features)?, &test_data.labels)
        }
    };
    Ok(100.0 * value)
}

/// End-to-end metric of the model's own head on the fold's test graphs.
pub fn head_metric(
    task: Task,
    cfg: &ModelConfig,
    params: &ParamSet,
    dataset: &GraphDataset,
    fold: &FoldSplit,
    seed: u64,
) -> Result<f64> {
    let test_graphs: Vec<Graph> = fold.test_ids.iter().map(|&i| dataset.graphs[i].clone()).collect();
    let value = match task {
        Task::Gc => {
            let mut preds = Vec::new();
            let mut labels = Vec::new();
            for g in &test_graphs {
                let Some(label) = g.graph_label() else { continue };
                let emb = encode(cfg, params, g)?;
                let probs = gc_forward(cfg, params, &emb)?;
                preds.push(probs.argmax_rows()[0]);
                labels.push(label);
            }
            accuracy(&preds, &labels)
        }
        Task::Nc => {
            let mut preds = Vec::new();
            let mut labels = Vec::new();
            for g in &test_graphs {
                let Some(node_labels) = g.node_labels() else { continue };
                let emb = encode(cfg, params, g)?;
                let probs = nc_forward(cfg, params, &emb)?;
                preds.extend(probs.argmax_rows());
                labels.extend_from_slice(node_labels);
            }
            accuracy(&preds, &labels)
        }
        Task::Lp => {
            let splits = lp_eval_instances(
                &test_graphs,
                seeds::derive(seed, &[fold.fold_index as u64, 0x12]),
            );
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for (_, split) in &splits {
                let emb = encode(cfg, params, &split.reduced)?;
                let pairs: Vec<(usize, usize)> = split.pairs.iter().map(|(p, _)| *p).collect();
                scores.extend(lp_forward(cfg, params, &emb, &pairs)?);
                labels.extend(split.pairs.iter().map(|(_, l)| *l));
            }
            roc_auc(&scores, &labels)?
        }
    };
    Ok(100.0 * value)
}

// ---------------------------------------------------------------------------
// experiment harness
// ---------------------------------------------------------------------------

/// Trains `train_cfg` on each fold and scores `eval_tasks` under `mode`.
/// `experiment` tags the rows ("main", "transfer", ...). Folds run in
/// parallel; row order is deterministic.
pub fn evaluate_strategy(
    dataset: &GraphDataset,
    folds: &[FoldSplit],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_tasks: &[Task],
    mode: EvalMode,
    experiment: &str,
) -> Result<Vec<MetricRow>> {
    let outcomes: Vec<Result<(usize, TrainOutcome)>> = exec::par_map(folds, |fold| {
        let outcome = train(dataset, fold, model_cfg, train_cfg)?;
        Ok((fold.fold_index, outcome))
    });
    let mut rows = Vec::new();
    for (fold, result) in folds.iter().zip(outcomes) {
        let (fold_index, outcome) = result?;
        rows.extend(score_params(
            dataset,
            fold,
            model_cfg,
            train_cfg,
            &outcome.params,
            eval_tasks,
            mode,
            experiment,
            fold_index,
        )?);
    }
    Ok(rows)
}

/// Scores already-trained parameters on one fold.
#[allow(clippy::too_many_arguments)]
pub fn score_params(
    dataset: &GraphDataset,
    fold: &FoldSplit,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    params: &ParamSet,
    eval_tasks: &[Task],
    mode: EvalMode,
    experiment: &str,
    fold_index: usize,
) -> Result<Vec<MetricRow>> {
    let provenance = Provenance {
        strategy: train_cfg.strategy.name().to_string(),
        trained_tasks: train_cfg.tasks.label(),
        fold: fold_index,
        seed: train_cfg.seed,
    };
    let mut rows = Vec::new();
    for &task in eval_tasks {
        let value = match mode {
            EvalMode::Head => head_metric(
                task,
                model_cfg,
                params,
                dataset,
                fold,
                train_cfg.seed,
            )?,
            EvalMode::Probe(kind) => probe_metric(
                task,
                model_cfg,
                params,
                dataset,
                fold,
                kind,
                train_cfg.seed,
                &provenance,
            )?,
        };
        rows.push(MetricRow {
            dataset: dataset.name.clone(),
            strategy: train_cfg.strategy.name().to_string(),
            trained_tasks: train_cfg.tasks.label(),
            eval_task: task.name().to_string(),
            probe: mode.name().to_string(),
            experiment: experiment.to_string(),
            fold: fold_index,
            metric: metric_name(task).to_string(),
            value,
        });
    }
    Ok(rows)
}

/// Transfer experiment: train a source model, freeze its encoder, and probe
/// a task it never saw. Rows are tagged `experiment = "transfer"`.
pub fn transfer_experiment(
    dataset: &GraphDataset,
    folds: &[FoldSplit],
    model_cfg: &ModelConfig,
    source_cfg: &TrainConfig,
    eval_task: Task,
    probe: ProbeKind,
) -> Result<Vec<MetricRow>> {
    evaluate_strategy(
        dataset,
        folds,
        model_cfg,
        source_cfg,
        &[eval_task],
        EvalMode::Probe(probe),
        "transfer",
    )
}
