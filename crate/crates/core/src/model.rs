//! The encoder-decoder model: a GCN backbone producing node embeddings and
//! three task heads (node classification, graph classification, link
//! prediction).
//!
//! Parameters are partitioned into four id groups — backbone plus one group
//! per head — because the meta-learning strategies adapt different subsets in
//! the inner loop. All forward passes run on an autodiff [`Tape`] so the same
//! code serves prediction and differentiation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::graph::{normalized_adjacency, Graph};
use crate::seeds;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// The three downstream tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    Gc,
    Nc,
    Lp,
}

impl Task {
    /// Canonical task order used everywhere an episode iterates tasks.
    pub const ALL: [Task; 3] = [Task::Gc, Task::Nc, Task::Lp];

    pub fn name(&self) -> &'static str {
        match self {
            Task::Gc => "gc",
            Task::Nc => "nc",
            Task::Lp => "lp",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gc" => Ok(Task::Gc),
            "nc" => Ok(Task::Nc),
            "lp" => Ok(Task::Lp),
            other => Err(Error::Argument(format!("unknown task {other:?}"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A subset of the three tasks, iterated in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSet {
    gc: bool,
    nc: bool,
    lp: bool,
}

impl TaskSet {
    pub fn new(tasks: &[Task]) -> TaskSet {
        let mut set = TaskSet {
            gc: false,
            nc: false,
            lp: false,
        };
        for t in tasks {
            match t {
                Task::Gc => set.gc = true,
                Task::Nc => set.nc = true,
                Task::Lp => set.lp = true,
            }
        }
        set
    }

    pub fn all() -> TaskSet {
        TaskSet {
            gc: true,
            nc: true,
            lp: true,
        }
    }

    pub fn single(task: Task) -> TaskSet {
        TaskSet::new(&[task])
    }

    pub fn contains(&self, task: Task) -> bool {
        match task {
            Task::Gc => self.gc,
            Task::Nc => self.nc,
            Task::Lp => self.lp,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Task> + '_ {
        Task::ALL.into_iter().filter(|t| self.contains(*t))
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Plus-separated names, e.g. `gc+nc` (comma-safe for CSV columns).
    pub fn label(&self) -> String {
        self.iter().map(|t| t.name()).collect::<Vec<_>>().join("+")
    }

    /// Accepts `gc,nc` and `gc+nc`.
    pub fn parse(s: &str) -> Result<TaskSet> {
        let tasks: Vec<Task> = s
            .split([',', '+'])
            .filter(|p| !p.trim().is_empty())
            .map(Task::parse)
            .collect::<Result<_>>()?;
        if tasks.is_empty() {
            return Err(Error::Argument("empty task set".into()));
        }
        Ok(TaskSet::new(&tasks))
    }
}

/// Balancing coefficients for the multi-task loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskWeights {
    pub gc: f64,
    pub nc: f64,
    pub lp: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        TaskWeights {
            gc: 1.0,
            nc: 1.0,
            lp: 1.0,
        }
    }
}

impl TaskWeights {
    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::Gc => self.gc,
            Task::Nc => self.nc,
            Task::Lp => self.lp,
        }
    }
}

/// Architecture hyperparameters; dims default to the 3-layer, 256-dim setup.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_node_classes: usize,
    pub num_graph_classes: usize,
    /// Unit-normalize embeddings between GCN layers.
    pub normalize_between: bool,
    /// Unit-normalize the final embeddings as well.
    pub normalize_final: bool,
}

impl ModelConfig {
    pub fn new(feature_dim: usize, num_node_classes: usize, num_graph_classes: usize) -> Self {
        ModelConfig {
            feature_dim,
            hidden_dim: 256,
            num_layers: 3,
            num_node_classes,
            num_graph_classes,
            normalize_between: true,
            normalize_final: true,
        }
    }

    pub fn for_dataset(ds: &crate::graph::GraphDataset) -> Self {
        ModelConfig::new(ds.feature_dim, ds.num_node_classes, ds.num_graph_classes)
    }

    pub fn with_hidden_dim(mut self, dim: usize) -> Self {
        self.hidden_dim = dim;
        self
    }

    pub fn with_num_layers(mut self, layers: usize) -> Self {
        self.num_layers = layers;
        self
    }

    fn node_classes(&self) -> usize {
        self.num_node_classes.max(1)
    }

    fn graph_classes(&self) -> usize {
        self.num_graph_classes.max(1)
    }

    /// Parameter names in id order: backbone first, then nc, gc, lp heads.
    pub fn param_names(&self) -> Vec<(ParamId, String)> {
        let mut names = Vec::new();
        for l in 0..self.num_layers {
            names.push(format!("enc.w{l}"));
            names.push(format!("enc.b{l}"));
        }
        for n in ["nc.w", "nc.b", "gc.w0", "gc.b0", "gc.w1", "gc.b1", "lp.w0", "lp.b0", "lp.w1", "lp.b1"] {
            names.push(n.to_string());
        }
        names
            .into_iter()
            .enumerate()
            .map(|(i, n)| (ParamId(i as u32), n))
            .collect()
    }

    fn shape_of(&self, name: &str) -> (usize, usize) {
        let h = self.hidden_dim;
        if let Some(layer) = name.strip_prefix("enc.w") {
            let l: usize = layer.parse().unwrap();
            let input = if l == 0 { self.feature_dim } else { h };
            return (input, h);
        }
        if name.starts_with("enc.b") {
            return (1, h);
        }
        match name {
            "nc.w" => (h, self.node_classes()),
            "nc.b" => (1, self.node_classes()),
            "gc.w0" => (h, h),
            "gc.b0" => (1, h),
            "gc.w1" => (h, self.graph_classes()),
            "gc.b1" => (1, self.graph_classes()),
            "lp.w0" => (h, h),
            "lp.b0" => (1, h),
            "lp.w1" => (2 * h, 1),
            "lp.b1" => (1, 1),
            other => panic!("unknown parameter {other}"),
        }
    }

    /// Fresh parameters: Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = seeds::rng_for(seed, &[0x1417]);
        let items = self
            .param_names()
            .into_iter()
            .map(|(id, name)| {
                let (rows, cols) = self.shape_of(&name);
                let tensor = if name.contains(".b") {
                    Tensor::zeros(rows, cols)
                } else {
                    Tensor::glorot_uniform(rows, cols, &mut rng)
                };
                (id, tensor)
            })
            .collect();
        ParamSet::new(items)
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        (0..2 * self.num_layers as u32).map(ParamId).collect()
    }

    pub fn head_ids(&self, task: Task) -> Vec<ParamId> {
        let base = 2 * self.num_layers as u32;
        let range = match task {
            Task::Nc => 0..2,
            Task::Gc => 2..6,
            Task::Lp => 6..10,
        };
        range.map(|o| ParamId(base + o)).collect()
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        (0..2 * self.num_layers as u32 + 10).map(ParamId).collect()
    }

    fn id_of(&self, name: &str) -> ParamId {
        self.param_names()
            .into_iter()
            .find(|(_, n)| n == name)
            .map(|(id, _)| id)
            .unwrap()
    }
}

/// Parameter tensors bound as leaves on one tape.
pub struct BoundParams {
    vars: BTreeMap<ParamId, Var>,
}

impl BoundParams {
    pub fn bind(tape: &Tape, params: &ParamSet) -> Result<BoundParams> {
        let mut vars = BTreeMap::new();
        for (id, tensor) in params.iter() {
            vars.insert(id, tape.leaf(tensor)?);
        }
        Ok(BoundParams { vars })
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[&id]
    }

    /// (id, var) pairs for [`Tape::backward`].
    pub fn pairs(&self) -> Vec<(ParamId, Var)> {
        self.vars.iter().map(|(id, v)| (*id, *v)).collect()
    }
}

fn linear(tape: &Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    tape.add_row(tape.matmul(x, w)?, b)
}

/// GCN forward pass on a tape: per layer `H <- ReLU(A_hat H W + b)`, plus an
/// identity residual whenever input and output widths match, with row
/// unit-normalization between layers (and optionally after the last).
pub fn encode_var(tape: &Tape, bound: &BoundParams, cfg: &ModelConfig, graph: &Graph) -> Result<Var> {
    if graph.feature_dim() != cfg.feature_dim {
        return Err(Error::Argument(format!(
            "graph feature dim {} does not match model input dim {}",
            graph.feature_dim(),
            cfg.feature_dim
        )));
    }
    let ahat = tape.leaf(&normalized_adjacency(graph))?;
    let mut h = tape.leaf(graph.node_features())?;
    for l in 0..cfg.num_layers {
        let w = bound.var(ParamId(2 * l as u32));
        let b = bound.var(ParamId(2 * l as u32 + 1));
        let mut z = tape.relu(linear(tape, tape.matmul(ahat, h)?, w, b)?)?;
        if h.cols() == z.cols() {
            z = tape.add(z, h)?;
        }
        let last = l + 1 == cfg.num_layers;
        if (!last && cfg.normalize_between) || (last && cfg.normalize_final) {
            z = tape.row_unit_normalize(z)?;
        }
        h = z;
    }
    Ok(h)
}

/// Node embeddings as plain values.
pub fn encode(cfg: &ModelConfig, params: &ParamSet, graph: &Graph) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, params)?;
    let h = encode_var(&tape, &bound, cfg, graph)?;
    Ok(tape.value(h))
}

/// Class probabilities per node, rows summing to 1.
pub fn nc_forward(cfg: &ModelConfig, params: &ParamSet, embeddings: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, params)?;
    let emb = tape.leaf(embeddings)?;
    let logits = linear(&tape, emb, bound.var(cfg.id_of("nc.w")), bound.var(cfg.id_of("nc.b")))?;
    Ok(tape.value(logits).softmax_rows())
}

/// Mean cross-entropy over the labelled node subset.
pub fn nc_loss_var(
    tape: &Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    graph: &Graph,
    labelled: &[usize],
) -> Result<Var> {
    if labelled.is_empty() {
        return Err(Error::Argument("node classification with empty labelled set".into()));
    }
    let labels = graph
        .node_labels()
        .ok_or_else(|| Error::Argument("graph has no node labels".into()))?;
    let emb = encode_var(tape, bound, cfg, graph)?;
    let picked = tape.gather_rows(emb, labelled)?;
    let logits = linear(tape, picked, bound.var(cfg.id_of("nc.w")), bound.var(cfg.id_of("nc.b")))?;
    let classes: Vec<usize> = labelled.iter().map(|&i| labels[i]).collect();
    tape.softmax_cross_entropy(logits, &classes)
}

/// Graph class probabilities, 1 x C.
pub fn gc_forward(cfg: &ModelConfig, params: &ParamSet, embeddings: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, params)?;
    let emb = tape.leaf(embeddings)?;
    let logits = gc_logits(&tape, &bound, cfg, emb)?;
    Ok(tape.value(logits).softmax_rows())
}

fn gc_logits(tape: &Tape, bound: &BoundParams, cfg: &ModelConfig, emb: Var) -> Result<Var> {
    if emb.rows() == 0 {
        return Err(Error::Argument("graph classification on a zero-node graph".into()));
    }
    let t = tape.relu(linear(tape, emb, bound.var(cfg.id_of("gc.w0")), bound.var(cfg.id_of("gc.b0")))?)?;
    let pooled = tape.mean_rows(t)?;
    linear(tape, pooled, bound.var(cfg.id_of("gc.w1")), bound.var(cfg.id_of("gc.b1")))
}

/// Cross-entropy of the graph label.
pub fn gc_loss_var(
    tape: &Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    graph: &Graph,
) -> Result<Var> {
    let label = graph
        .graph_label()
        .ok_or_else(|| Error::Argument("graph has no graph label".into()))?;
    let emb = encode_var(tape, bound, cfg, graph)?;
    let logits = gc_logits(tape, bound, cfg, emb)?;
    tape.softmax_cross_entropy(logits, &[label])
}

/// Link probability per node pair.
pub fn lp_forward(
    cfg: &ModelConfig,
    params: &ParamSet,
    embeddings: &Tensor,
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, params)?;
    let emb = tape.leaf(embeddings)?;
    let logits = lp_logits(&tape, &bound, cfg, emb, pairs)?;
    let values = tape.value(logits);
    Ok((0..pairs.len())
        .map(|i| 1.0 / (1.0 + (-values.get(i, 0)).exp()))
        .collect())
}

fn lp_logits(
    tape: &Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    emb: Var,
    pairs: &[(usize, usize)],
) -> Result<Var> {
    let t = tape.relu(linear(tape, emb, bound.var(cfg.id_of("lp.w0")), bound.var(cfg.id_of("lp.b0")))?)?;
    let us: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let vs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let features = tape.concat_rows(tape.gather_rows(t, &us)?, tape.gather_rows(t, &vs)?)?;
    linear(tape, features, bound.var(cfg.id_of("lp.w1")), bound.var(cfg.id_of("lp.b1")))
}

/// Mean binary cross-entropy with positives labelled 1 and negatives 0.
pub fn lp_loss_var(
    tape: &Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    graph: &Graph,
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
) -> Result<Var> {
    if positives.is_empty() && negatives.is_empty() {
        return Err(Error::Argument("link prediction with no candidate pairs".into()));
    }
    let emb = encode_var(tape, bound, cfg, graph)?;
    let pairs: Vec<(usize, usize)> = positives.iter().chain(negatives).copied().collect();
    let logits = lp_logits(tape, bound, cfg, emb, &pairs)?;
    let targets: Vec<f64> = std::iter::repeat_n(1.0, positives.len())
        .chain(std::iter::repeat_n(0.0, negatives.len()))
        .collect();
    tape.sigmoid_bce(logits, &targets)
}

/// Writes a checkpoint: versioned text header, `key=value` metadata, then one
/// `tensor <name> <rows> <cols>` block per parameter with row-major values
/// (shortest round-trip float formatting, so reloads are bit-exact).
pub fn save_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    params: &ParamSet,
    extra_meta: &[(String, String)],
) -> Result<()> {
    let mut out = String::from("same-checkpoint v1\n");
    let mut meta = vec![
        ("feature_dim".to_string(), cfg.feature_dim.to_string()),
        ("hidden_dim".to_string(), cfg.hidden_dim.to_string()),
        ("num_layers".to_string(), cfg.num_layers.to_string()),
        ("num_node_classes".to_string(), cfg.num_node_classes.to_string()),
        ("num_graph_classes".to_string(), cfg.num_graph_classes.to_string()),
        ("normalize_between".to_string(), (cfg.normalize_between as u8).to_string()),
        ("normalize_final".to_string(), (cfg.normalize_final as u8).to_string()),
    ];
    meta.extend(extra_meta.iter().cloned());
    for (k, v) in &meta {
        out.push_str(&format!("meta {k}={v}\n"));
    }
    for (id, name) in cfg.param_names() {
        let tensor = params
            .get(id)
            .ok_or_else(|| Error::Argument(format!("missing parameter {name}")))?;
        out.push_str(&format!("tensor {name} {} {}\n", tensor.rows(), tensor.cols()));
        for i in 0..tensor.rows() {
            let row: Vec<String> = tensor.row(i).iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    out.push_str("end\n");
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamSet, BTreeMap<String, String>)> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| Error::Integrity(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Integrity("empty checkpoint".into()))?;
    if header.trim() != "same-checkpoint v1" {
        return Err(Error::Integrity(format!(
            "unsupported checkpoint header {header:?}"
        )));
    }

    let mut meta = BTreeMap::new();
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut ended = false;
    while let Some((lineno, line)) = lines.next() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "end" {
            ended = true;
            break;
        }
        if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest.split_once('=').ok_or_else(|| Error::Integrity(format!(
                "malformed meta line {}",
                lineno + 1
            )))?;
            meta.insert(k.to_string(), v.to_string());
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Integrity(format!(
                    "malformed tensor header on line {}",
                    lineno + 1
                )));
            }
            let name = parts[0].to_string();
            let rows: usize = parts[1]
                .parse()
                .map_err(|_| Error::Integrity("bad tensor rows".into()))?;
            let cols: usize = parts[2]
                .parse()
                .map_err(|_| Error::Integrity("bad tensor cols".into()))?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (lineno, row_line) = lines
                    .next()
                    .ok_or_else(|| Error::Integrity("truncated tensor block".into()))?;
                for tok in row_line.split_whitespace() {
                    data.push(tok.parse::<f64>().map_err(|_| {
                        Error::Integrity(format!("bad float on line {}", lineno + 1))
                    })?);
                }
            }
            tensors.insert(name, Tensor::from_vec(rows, cols, data)?);
        } else {
            return Err(Error::Integrity(format!(
                "unexpected checkpoint line {}",
                lineno + 1
            )));
        }
    }
    if !ended {
        return Err(Error::Integrity("checkpoint missing end marker".into()));
    }

    let get = |key: &str| -> Result<usize> {
        meta.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Integrity(format!("checkpoint missing meta {key}")))
    };
    let cfg = ModelConfig {
        feature_dim: get("feature_dim")?,
        hidden_dim: get("hidden_dim")?,
        num_layers: get("num_layers")?,
        num_node_classes: get("num_node_classes")?,
        num_graph_classes: get("num_graph_classes")?,
        normalize_between: get("normalize_between")? != 0,
        normalize_final: get("normalize_final")? != 0,
    };
    let mut items = Vec::new();
    for (id, name) in cfg.param_names() {
        let tensor = tensors
            .remove(&name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint missing tensor {name}")))?;
        if tensor.shape() != cfg.shape_of(&name) {
            return Err(Error::Integrity(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                tensor.shape(),
                cfg.shape_of(&name)
            )));
        }
        items.push((id, tensor));
    }
    Ok((cfg, ParamSet::new(items), meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn toy_cfg() -> ModelConfig {
        ModelConfig::new(3, 2, 2)
            .with_hidden_dim(8)
            .with_num_layers(2)
    }

    fn toy_graph(seed: u64, n: usize) -> Graph {
        let mut rng = seeds::rng(seed);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.gen_bool(0.4) {
                    edges.push((u, v));
                }
            }
        }
        let features = Tensor::glorot_uniform(n, 3, &mut rng);
        let labels = (0..n).map(|_| rng.gen_range(0..2)).collect();
        Graph::new(n, edges, features, Some(labels), Some(seed as usize % 2)).unwrap()
    }

    #[test]
    fn encode_shape_and_unit_norm() {
        let cfg = toy_cfg();
        let params = cfg.init_params(5);
        let g = toy_graph(1, 7);
        let emb = encode(&cfg, &params, &g).unwrap();
        assert_eq!(emb.shape(), (7, 8));
        for i in 0..7 {
            let norm: f64 = emb.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "row {i} norm {norm}");
        }
    }

    #[test]
    fn one_node_identity_weights_hand_forward() {
        // dim-4 toy config, identity weights, zero biases: each layer maps
        // x -> normalize(relu(x) + x); x = (1, 2, 2, 0) converges to
        // (1/3, 2/3, 2/3, 0) after the first layer.
        let cfg = ModelConfig::new(4, 1, 1).with_hidden_dim(4).with_num_layers(3);
        let mut items = Vec::new();
        for (id, name) in cfg.param_names() {
            let (rows, cols) = cfg.shape_of(&name);
            let mut t = Tensor::zeros(rows, cols);
            if name.contains(".w") && rows == cols {
                for i in 0..rows {
                    t.set(i, i, 1.0);
                }
            }
            items.push((id, t));
        }
        let params = ParamSet::new(items);
        let g = Graph::new(
            1,
            vec![],
            Tensor::from_rows(&[vec![1.0, 2.0, 2.0, 0.0]]).unwrap(),
            None,
            Some(0),
        )
        .unwrap();
        let emb = encode(&cfg, &params, &g).unwrap();
        let expected = [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 0.0];
        for (got, want) in emb.row(0).iter().zip(expected) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    fn permuted(graph: &Graph, perm: &[usize]) -> Graph {
        // perm[old] = new position
        let n = graph.num_nodes();
        let mut features = Tensor::zeros(n, graph.feature_dim());
        for (old, &new) in perm.iter().enumerate() {
            features
                .row_mut(new)
                .copy_from_slice(graph.node_features().row(old));
        }
        let edges = graph
            .edges()
            .iter()
            .map(|&(u, v)| (perm[u], perm[v]))
            .collect();
        let labels = graph.node_labels().map(|ls| {
            let mut out = vec![0; n];
            for (old, &l) in ls.iter().enumerate() {
                out[perm[old]] = l;
            }
            out
        });
        Graph::new(n, edges, features, labels, graph.graph_label()).unwrap()
    }

    #[test]
    fn encode_is_permutation_equivariant() {
        let cfg = toy_cfg();
        let params = cfg.init_params(7);
        let g = toy_graph(3, 9);
        let mut perm: Vec<usize> = (0..9).collect();
        perm.shuffle(&mut seeds::rng(4));
        let pg = permuted(&g, &perm);

        let emb = encode(&cfg, &params, &g).unwrap();
        let pemb = encode(&cfg, &params, &pg).unwrap();
        for (old, &new) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!(
                    (emb.get(old, j) - pemb.get(new, j)).abs() < 1e-8,
                    "node {old} dim {j}"
                );
            }
        }
    }

    #[test]
    fn gc_output_permutation_invariant() {
        let cfg = toy_cfg();
        let params = cfg.init_params(9);
        let g = toy_graph(5, 8);
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut seeds::rng(6));
        let pg = permuted(&g, &perm);
        let probs = gc_forward(&cfg, &params, &encode(&cfg, &params, &g).unwrap()).unwrap();
        let pprobs = gc_forward(&cfg, &params, &encode(&cfg, &params, &pg).unwrap()).unwrap();
        for j in 0..probs.cols() {
            assert!((probs.get(0, j) - pprobs.get(0, j)).abs() < 1e-9);
        }
    }

    #[test]
    fn nc_rows_sum_to_one_and_uniform_loss_is_ln_c() {
        let cfg = toy_cfg();
        // zero weights -> uniform logits
        let mut items = Vec::new();
        for (id, name) in cfg.param_names() {
            let (rows, cols) = cfg.shape_of(&name);
            items.push((id, Tensor::zeros(rows, cols)));
        }
        let params = ParamSet::new(items);
        let g = toy_graph(8, 5);
        let emb = encode(&cfg, &params, &g).unwrap();
        let probs = nc_forward(&cfg, &params, &emb).unwrap();
        for i in 0..probs.rows() {
            let sum: f64 = probs.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }

        let tape = Tape::new();
        let bound = BoundParams::bind(&tape, &params).unwrap();
        let loss = nc_loss_var(&tape, &bound, &cfg, &g, &[0, 1, 2]).unwrap();
        assert!((tape.scalar_value(loss).unwrap() - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lp_zero_final_weights_score_half_and_bce_ln2() {
        let cfg = toy_cfg();
        let mut params = cfg.init_params(11);
        for name in ["lp.w1", "lp.b1"] {
            let id = cfg.id_of(name);
            let t = params.get_mut(id).unwrap();
            let (r, c) = t.shape();
            *t = Tensor::zeros(r, c);
        }
        let g = toy_graph(9, 6);
        let emb = encode(&cfg, &params, &g).unwrap();
        let probs = lp_forward(&cfg, &params, &emb, &[(0, 1), (2, 3)]).unwrap();
        for p in &probs {
            assert!((p - 0.5).abs() < 1e-12);
        }

        let tape = Tape::new();
        let bound = BoundParams::bind(&tape, &params).unwrap();
        let loss = lp_loss_var(&tape, &bound, &cfg, &g, &[(0, 1)], &[(0, 2)]).unwrap();
        assert!((tape.scalar_value(loss).unwrap() - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lp_probabilities_are_in_unit_interval() {
        let cfg = toy_cfg();
        let params = cfg.init_params(13);
        let g = toy_graph(10, 6);
        let emb = encode(&cfg, &params, &g).unwrap();
        let probs = lp_forward(&cfg, &params, &emb, &[(0, 5), (1, 4), (2, 3)]).unwrap();
        for p in probs {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn empty_labelled_set_is_argument_error() {
        let cfg = toy_cfg();
        let params = cfg.init_params(1);
        let g = toy_graph(2, 4);
        let tape = Tape::new();
        let bound = BoundParams::bind(&tape, &params).unwrap();
        assert!(matches!(
            nc_loss_var(&tape, &bound, &cfg, &g, &[]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn zero_node_graph_gc_is_argument_error() {
        let cfg = toy_cfg();
        let params = cfg.init_params(1);
        let g = Graph::new(0, vec![], Tensor::zeros(0, 3), None, Some(0)).unwrap();
        let tape = Tape::new();
        let bound = BoundParams::bind(&tape, &params).unwrap();
        assert!(matches!(
            gc_loss_var(&tape, &bound, &cfg, &g),
            Err(Error::Argument(_))
        ));
    }

    /// End-to-end gradient checks of each task loss against finite
    /// differences on a small random model.
    #[test]
    fn task_loss_gradients_match_finite_differences() {
        let cfg = toy_cfg();
        let params = cfg.init_params(21);
        let g = toy_graph(31, 6);

        type LossFn = Box<dyn Fn(&ParamSet) -> crate::Result<f64>>;
        let make: Vec<(&str, LossFn)> = vec![
            (
                "nc",
                Box::new({
                    let (cfg, g) = (cfg.clone(), g.clone());
                    move |p: &ParamSet| {
                        let tape = Tape::new();
                        let bound = BoundParams::bind(&tape, p)?;
                        let loss = nc_loss_var(&tape, &bound, &cfg, &g, &[0, 2, 4])?;
                        tape.scalar_value(loss)
                    }
                }),
            ),
            (
                "gc",
                Box::new({
                    let (cfg, g) = (cfg.clone(), g.clone());
                    move |p: &ParamSet| {
                        let tape = Tape::new();
                        let bound = BoundParams::bind(&tape, p)?;
                        let loss = gc_loss_var(&tape, &bound, &cfg, &g)?;
                        tape.scalar_value(loss)
                    }
                }),
            ),
            (
                "lp",
                Box::new({
                    let (cfg, g) = (cfg.clone(), g.clone());
                    move |p: &ParamSet| {
                        let tape = Tape::new();
                        let bound = BoundParams::bind(&tape, p)?;
                        let loss =
                            lp_loss_var(&tape, &bound, &cfg, &g, &[(0, 1), (2, 3)], &[(0, 5)])?;
                        tape.scalar_value(loss)
                    }
                }),
            ),
        ];

        for (name, loss_fn) in &make {
            let analytic = {
                let tape = Tape::new();
                let bound = BoundParams::bind(&tape, &params).unwrap();
                let loss = match *name {
                    "nc" => nc_loss_var(&tape, &bound, &cfg, &g, &[0, 2, 4]).unwrap(),
                    "gc" => gc_loss_var(&tape, &bound, &cfg, &g).unwrap(),
                    _ => lp_loss_var(&tape, &bound, &cfg, &g, &[(0, 1), (2, 3)], &[(0, 5)])
                        .unwrap(),
                };
                tape.backward(loss, &bound.pairs()).unwrap()
            };
            let numeric = crate::fdcheck::fd_gradient(loss_fn, &params, 1e-5).unwrap();
            let err = crate::fdcheck::grad_rel_err(&analytic, &numeric);
            assert!(err < 1e-6, "{name} gradient relative error {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = toy_cfg();
        let params = cfg.init_params(77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.txt");
        save_checkpoint(
            &path,
            &cfg,
            &params,
            &[("strategy".into(), "esame".into()), ("seed".into(), "77".into())],
        )
        .unwrap();
        let (cfg2, params2, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(params, params2);
        assert_eq!(meta.get("strategy").map(String::as_str), Some("esame"));
    }

    #[test]
    fn corrupt_checkpoint_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "not a checkpoint\n").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
    }
}
