//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied during a forward pass; calling
//! [`Tape::backward`] on a scalar loss replays the recording once in reverse
//! and accumulates exact analytic gradients for a requested set of
//! parameters. Parameters are identified across tapes by [`ParamId`], so a
//! model can be evaluated functionally: bind the current parameter tensors as
//! leaves, run forward, differentiate, throw the tape away.
//!
//! Second-order information for the meta-gradient is obtained as a
//! Hessian-vector product, computed by a central difference of two gradient
//! evaluations ([`hessian_vector_product`]).

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Stable identifier of one parameter tensor, shared across tapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub u32);

/// An ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    items: Vec<(ParamId, Tensor)>,
}

impl ParamSet {
    pub fn new(mut items: Vec<(ParamId, Tensor)>) -> Self {
        items.sort_by_key(|(id, _)| *id);
        for pair in items.windows(2) {
            assert!(pair[0].0 != pair[1].0, "duplicate ParamId {:?}", pair[0].0);
        }
        ParamSet { items }
    }

    pub fn empty() -> Self {
        ParamSet { items: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.items
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|idx| &self.items[idx].1)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.items
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|idx| &mut self.items[idx].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.items.iter().map(|(id, t)| (*id, t))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.items.iter().map(|(id, _)| *id).collect()
    }

    /// Total number of scalar entries across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.items.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn inf_norm(&self) -> f64 {
        self.items
            .iter()
            .fold(0.0, |m, (_, t)| m.max(t.max_abs()))
    }

    /// In-place `theta[id] += scale * grads[id]` for every id in `subset`
    /// (or for every id present in `grads` when `subset` is `None`).
    pub fn add_scaled(
        &mut self,
        grads: &GradientMap,
        scale: f64,
        subset: Option<&BTreeSet<ParamId>>,
    ) -> Result<()> {
        for (id, tensor) in self.items.iter_mut() {
            if let Some(sub) = subset {
                if !sub.contains(id) {
                    continue;
                }
            }
            if let Some(g) = grads.get(*id) {
                tensor.add_scaled(g, scale)?;
            }
        }
        Ok(())
    }

    /// Returns `theta + eps * v`, leaving entries without a direction untouched.
    pub fn perturbed(&self, v: &GradientMap, eps: f64) -> Result<ParamSet> {
        let mut out = self.clone();
        out.add_scaled(v, eps, None)?;
        Ok(out)
    }
}

/// Gradient (or any tangent direction) per parameter; ids absent from the map
/// are zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradientMap {
    pub fn new() -> Self {
        GradientMap::default()
    }

    pub fn zeros_for(params: &ParamSet) -> Self {
        let grads = params
            .iter()
            .map(|(id, t)| (id, Tensor::zeros(t.rows(), t.cols())))
            .collect();
        GradientMap { grads }
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(id, t)| (*id, t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += scale * other`, inserting scaled copies for new ids.
    pub fn add_scaled(&mut self, other: &GradientMap, scale: f64) -> Result<()> {
        for (id, g) in other.iter() {
            match self.grads.get_mut(&id) {
                Some(t) => t.add_scaled(g, scale)?,
                None => {
                    let mut t = g.clone();
                    t.scale_in_place(scale);
                    self.grads.insert(id, t);
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.grads.values_mut() {
            t.scale_in_place(s);
        }
    }

    /// Keeps only the ids in `subset` (missing ids stay zero by convention).
    pub fn restricted(&self, subset: &BTreeSet<ParamId>) -> GradientMap {
        GradientMap {
            grads: self
                .grads
                .iter()
                .filter(|(id, _)| subset.contains(id))
                .map(|(id, t)| (*id, t.clone()))
                .collect(),
        }
    }

    pub fn inf_norm(&self) -> f64 {
        self.grads.values().fold(0.0, |m, t| m.max(t.max_abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(|t| t.is_finite())
    }
}

/// Anything that can report a scalar loss and its gradient for a parameter
/// set. Training strategies and the Hessian-vector product are written
/// against this trait so they can be exercised on closed-form toy objectives.
pub trait Objective: Sync {
    fn loss(&self, params: &ParamSet) -> Result<f64>;
    fn loss_and_grad(&self, params: &ParamSet) -> Result<(f64, GradientMap)>;
}

/// Handle to one value recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    RowUnitNormalize(usize),
    MeanRows(usize),
    ConcatRows(usize, usize),
    GatherRows(usize, Vec<usize>),
    SumAll(usize),
    SoftmaxCrossEntropy(usize, Vec<usize>),
    SigmoidBce(usize, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitives in creation order; creation order is the topological
/// order used by the reverse sweep.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

const NORMALIZE_EPS: f64 = 1e-12;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        if !v.is_scalar() {
            return Err(Error::Argument(format!(
                "expected scalar, got {}x{}",
                v.rows, v.cols
            )));
        }
        Ok(self.nodes.borrow()[v.id].value.get(0, 0))
    }

    fn push(&self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite value produced by {what}")));
        }
        let (rows, cols) = value.shape();
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, op });
        Ok(Var { id, rows, cols })
    }

    /// Registers a constant or parameter tensor as a leaf.
    pub fn leaf(&self, value: &Tensor) -> Result<Var> {
        self.push(value.clone(), Op::Leaf, "leaf")
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(Error::Argument(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.id].value.matmul(&nodes[b.id].value)?
        };
        self.push(value, Op::MatMul(a.id, b.id), "matmul")
    }

    /// Elementwise sum of two same-shape values.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(Error::Argument(format!(
                "add shape mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let mut v = nodes[a.id].value.clone();
            v.add_scaled(&nodes[b.id].value, 1.0)?;
            v
        };
        self.push(value, Op::Add(a.id, b.id), "add")
    }

    /// Adds a 1 x cols row vector to every row of `a` (bias broadcast).
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        if row.rows != 1 || row.cols != a.cols {
            return Err(Error::Argument(format!(
                "add_row expects 1x{} bias, got {}x{}",
                a.cols, row.rows, row.cols
            )));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let mut v = nodes[a.id].value.clone();
            let bias = nodes[row.id].value.row(0).to_vec();
            for i in 0..v.rows() {
                for (x, b) in v.row_mut(i).iter_mut().zip(&bias) {
                    *x += b;
                }
            }
            v
        };
        self.push(value, Op::AddRow(a.id, row.id), "add_row")
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let value = self.nodes.borrow()[a.id].value.map(|v| v * c);
        self.push(value, Op::Scale(a.id, c), "scale")
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let value = self.nodes.borrow()[a.id].value.map(|v| v.max(0.0));
        self.push(value, Op::Relu(a.id), "relu")
    }

    /// Scales every row to unit L2 norm; zero rows are guarded by adding
    /// `1e-12` to the norm, so they stay zero instead of dividing by zero.
    pub fn row_unit_normalize(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            let mut out = x.clone();
            for i in 0..out.rows() {
                let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                let denom = norm + NORMALIZE_EPS;
                for v in out.row_mut(i) {
                    *v /= denom;
                }
            }
            out
        };
        self.push(value, Op::RowUnitNormalize(a.id), "row_unit_normalize")
    }

    /// Column means: n x c -> 1 x c.
    pub fn mean_rows(&self, a: Var) -> Result<Var> {
        if a.rows == 0 {
            return Err(Error::Argument("mean_rows over zero rows".into()));
        }
        let value = self.nodes.borrow()[a.id].value.mean_rows()?;
        self.push(value, Op::MeanRows(a.id), "mean_rows")
    }

    /// Concatenates each row of `a` with the corresponding row of `b`:
    /// n x ca, n x cb -> n x (ca + cb).
    pub fn concat_rows(&self, a: Var, b: Var) -> Result<Var> {
        if a.rows != b.rows {
            return Err(Error::Argument(format!(
                "concat_rows row-count mismatch: {} vs {}",
                a.rows, b.rows
            )));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.id].value, &nodes[b.id].value);
            let mut data = Vec::with_capacity(a.rows * (a.cols + b.cols));
            for i in 0..a.rows {
                data.extend_from_slice(ta.row(i));
                data.extend_from_slice(tb.row(i));
            }
            Tensor::from_vec(a.rows, a.cols + b.cols, data)?
        };
        self.push(value, Op::ConcatRows(a.id, b.id), "concat_rows")
    }

    /// Selects rows of `a` by index (duplicates allowed).
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= a.rows) {
            return Err(Error::Argument(format!(
                "gather_rows index {bad} out of range for {} rows",
                a.rows
            )));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.id].value;
            let mut data = Vec::with_capacity(indices.len() * a.cols);
            for &i in indices {
                data.extend_from_slice(t.row(i));
            }
            Tensor::from_vec(indices.len(), a.cols, data)?
        };
        self.push(value, Op::GatherRows(a.id, indices.to_vec()), "gather_rows")
    }

    /// Sum of all entries as a 1x1 scalar.
    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let s = self.nodes.borrow()[a.id].value.sum();
        self.push(
            Tensor::from_vec(1, 1, vec![s])?,
            Op::SumAll(a.id),
            "sum_all",
        )
    }

    /// Mean softmax cross-entropy of `logits` (k x C) against integer class
    /// targets (len k).
    pub fn softmax_cross_entropy(&self, logits: Var, classes: &[usize]) -> Result<Var> {
        if classes.len() != logits.rows {
            return Err(Error::Argument(format!(
                "softmax_cross_entropy: {} logit rows but {} targets",
                logits.rows,
                classes.len()
            )));
        }
        if logits.rows == 0 {
            return Err(Error::Argument("softmax_cross_entropy over zero examples".into()));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= logits.cols) {
            return Err(Error::Argument(format!(
                "class index {bad} out of range for {} classes",
                logits.cols
            )));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[logits.id].value;
            let mut total = 0.0;
            for (i, &class) in classes.iter().enumerate() {
                let row = t.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let logsumexp = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += logsumexp - row[class];
            }
            Tensor::from_vec(1, 1, vec![total / classes.len() as f64])?
        };
        self.push(
            value,
            Op::SoftmaxCrossEntropy(logits.id, classes.to_vec()),
            "softmax_cross_entropy",
        )
    }

    /// Mean binary cross-entropy of `logits` (k x 1) against 0/1 targets,
    /// computed in the numerically stable logit form.
    pub fn sigmoid_bce(&self, logits: Var, targets: &[f64]) -> Result<Var> {
        if logits.cols != 1 {
            return Err(Error::Argument(format!(
                "sigmoid_bce expects k x 1 logits, got {}x{}",
                logits.rows, logits.cols
            )));
        }
        if targets.len() != logits.rows {
            return Err(Error::Argument(format!(
                "sigmoid_bce: {} logit rows but {} targets",
                logits.rows,
                targets.len()
            )));
        }
        if logits.rows == 0 {
            return Err(Error::Argument("sigmoid_bce over zero examples".into()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[logits.id].value;
            let mut total = 0.0;
            for (i, &target) in targets.iter().enumerate() {
                let z = t.get(i, 0);
                total += z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
            }
            Tensor::from_vec(1, 1, vec![total / targets.len() as f64])?
        };
        self.push(
            value,
            Op::SigmoidBce(logits.id, targets.to_vec()),
            "sigmoid_bce",
        )
    }

    /// Reverse sweep from a scalar loss. Returns d loss / d p for every
    /// requested parameter; parameters the loss does not depend on get zero
    /// gradients.
    pub fn backward(&self, loss: Var, params: &[(ParamId, Var)]) -> Result<GradientMap> {
        if !loss.is_scalar() {
            return Err(Error::Argument(format!(
                "backward requires a scalar loss, got {}x{}",
                loss.rows, loss.cols
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::from_vec(1, 1, vec![1.0])?);

        for id in (0..=loss.id).rev() {
            let grad = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(grad); // keep for parameter lookup
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ta = &nodes[*a].value;
                    let tb = &nodes[*b].value;
                    // dA[i,k] = sum_j G[i,j] B[k,j]
                    let mut da = Tensor::zeros(ta.rows(), ta.cols());
                    for i in 0..ta.rows() {
                        let g_row = grad.row(i);
                        let da_row = da.row_mut(i);
                        for (k, slot) in da_row.iter_mut().enumerate() {
                            let b_row = tb.row(k);
                            *slot = g_row.iter().zip(b_row).map(|(g, b)| g * b).sum();
                        }
                    }
                    // dB[k,j] += A[i,k] G[i,j]
                    let mut db = Tensor::zeros(tb.rows(), tb.cols());
                    for i in 0..ta.rows() {
                        let a_row = ta.row(i);
                        let g_row = grad.row(i);
                        for (k, &a_ik) in a_row.iter().enumerate() {
                            if a_ik == 0.0 {
                                continue;
                            }
                            for (slot, &g) in db.row_mut(k).iter_mut().zip(g_row) {
                                *slot += a_ik * g;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, grad.clone())?;
                    accumulate(&mut grads, *b, grad)?;
                }
                Op::AddRow(a, row) => {
                    let mut drow = Tensor::zeros(1, grad.cols());
                    for i in 0..grad.rows() {
                        for (slot, &g) in drow.row_mut(0).iter_mut().zip(grad.row(i)) {
                            *slot += g;
                        }
                    }
                    accumulate(&mut grads, *a, grad)?;
                    accumulate(&mut grads, *row, drow)?;
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, grad.map(|v| v * c))?;
                }
                Op::Relu(a) => {
                    let input = &nodes[*a].value;
                    let mut da = grad;
                    for (g, &x) in da.data_mut().iter_mut().zip(input.data()) {
                        if x <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::RowUnitNormalize(a) => {
                    let input = &nodes[*a].value;
                    let mut da = Tensor::zeros(input.rows(), input.cols());
                    for i in 0..input.rows() {
                        let x = input.row(i);
                        let g = grad.row(i);
                        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let denom = norm + NORMALIZE_EPS;
                        let dot: f64 = g.iter().zip(x).map(|(g, x)| g * x).sum();
                        let da_row = da.row_mut(i);
                        if norm > 0.0 {
                            let coef = dot / (norm * denom * denom);
                            for ((slot, &gi), &xi) in da_row.iter_mut().zip(g).zip(x) {
                                *slot = gi / denom - coef * xi;
                            }
                        } else {
                            for (slot, &gi) in da_row.iter_mut().zip(g) {
                                *slot = gi / denom;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::MeanRows(a) => {
                    let n = nodes[*a].value.rows();
                    let mut da = Tensor::zeros(n, grad.cols());
                    let inv = 1.0 / n as f64;
                    for i in 0..n {
                        for (slot, &g) in da.row_mut(i).iter_mut().zip(grad.row(0)) {
                            *slot = g * inv;
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::ConcatRows(a, b) => {
                    let ca = nodes[*a].value.cols();
                    let cb = nodes[*b].value.cols();
                    let rows = grad.rows();
                    let mut da = Tensor::zeros(rows, ca);
                    let mut db = Tensor::zeros(rows, cb);
                    for i in 0..rows {
                        let g = grad.row(i);
                        da.row_mut(i).copy_from_slice(&g[..ca]);
                        db.row_mut(i).copy_from_slice(&g[ca..]);
                    }
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::GatherRows(a, indices) => {
                    let src = &nodes[*a].value;
                    let mut da = Tensor::zeros(src.rows(), src.cols());
                    for (k, &i) in indices.iter().enumerate() {
                        for (slot, &g) in da.row_mut(i).iter_mut().zip(grad.row(k)) {
                            *slot += g;
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::SumAll(a) => {
                    let src = &nodes[*a].value;
                    let g = grad.get(0, 0);
                    accumulate(&mut grads, *a, Tensor::filled(src.rows(), src.cols(), g))?;
                }
                Op::SoftmaxCrossEntropy(a, classes) => {
                    let logits = &nodes[*a].value;
                    let g = grad.get(0, 0) / classes.len() as f64;
                    let probs = logits.softmax_rows();
                    let mut da = probs;
                    for (i, &class) in classes.iter().enumerate() {
                        let row = da.row_mut(i);
                        row[class] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= g;
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::SigmoidBce(a, targets) => {
                    let logits = &nodes[*a].value;
                    let g = grad.get(0, 0) / targets.len() as f64;
                    let mut da = Tensor::zeros(logits.rows(), 1);
                    for (i, &target) in targets.iter().enumerate() {
                        let z = logits.get(i, 0);
                        let sigma = 1.0 / (1.0 + (-z).exp());
                        da.set(i, 0, (sigma - target) * g);
                    }
                    accumulate(&mut grads, *a, da)?;
                }
            }
        }

        let mut out = GradientMap::new();
        for &(pid, var) in params {
            let grad = grads[var.id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(var.rows, var.cols));
            out.insert(pid, grad);
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) -> Result<()> {
    match &mut grads[id] {
        Some(g) => g.add_scaled(&delta, 1.0),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

/// Hessian-vector product `H(theta) * v` of an objective's loss, computed as
/// a central difference of gradients:
/// `(grad L(theta + eps v) - grad L(theta - eps v)) / (2 eps)` with
/// `eps = 1e-4 * (1 + max|theta|)`.
pub fn hessian_vector_product(
    obj: &dyn Objective,
    params: &ParamSet,
    v: &GradientMap,
) -> Result<GradientMap> {
    let eps = 1e-4 * (1.0 + params.inf_norm());
    let plus = params.perturbed(v, eps)?;
    let minus = params.perturbed(v, -eps)?;
    let (_, grad_plus) = obj.loss_and_grad(&plus)?;
    let (_, grad_minus) = obj.loss_and_grad(&minus)?;
    let mut hv = grad_plus;
    hv.add_scaled(&grad_minus, -1.0)?;
    hv.scale(1.0 / (2.0 * eps));
    if !hv.is_finite() {
        return Err(Error::Numeric("hessian-vector product overflowed".into()));
    }
    Ok(hv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck;

    fn param(id: u32, t: Tensor) -> (ParamId, Tensor) {
        (ParamId(id), t)
    }

    #[test]
    fn relu_forward() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_rows(&[vec![-1.0, 2.0]]).unwrap()).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap());
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_2() {
        let tape = Tape::new();
        let logits = tape.leaf(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!((tape.scalar_value(loss).unwrap() - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let p = Tensor::from_rows(&[vec![3.0, -1.0, 2.0]]).unwrap();
        let v = tape.leaf(&p).unwrap();
        let loss = tape.sum_all(v).unwrap();
        let grads = tape.backward(loss, &[(ParamId(0), v)]).unwrap();
        assert_eq!(
            grads.get(ParamId(0)).unwrap(),
            &Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap()
        );
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let tape = Tape::new();
        let used = tape.leaf(&Tensor::filled(1, 2, 1.0)).unwrap();
        let unused = tape.leaf(&Tensor::filled(2, 2, 5.0)).unwrap();
        let loss = tape.sum_all(used).unwrap();
        let grads = tape
            .backward(loss, &[(ParamId(0), used), (ParamId(1), unused)])
            .unwrap();
        assert_eq!(grads.get(ParamId(1)).unwrap(), &Tensor::zeros(2, 2));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let v = tape.leaf(&Tensor::zeros(2, 2)).unwrap();
        assert!(matches!(tape.backward(v, &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn non_finite_forward_is_numeric_error() {
        let tape = Tape::new();
        let v = tape.leaf(&Tensor::filled(1, 1, 1e308)).unwrap();
        assert!(matches!(tape.add(v, v), Err(Error::Numeric(_))));
        assert!(matches!(tape.scale(v, 10.0), Err(Error::Numeric(_))));
    }

    /// Composite loss exercising every primitive, checked against central
    /// finite differences of the loss.
    fn composite_loss(params: &ParamSet) -> crate::Result<f64> {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_rows(&[
            vec![0.3, -0.7, 0.2],
            vec![1.1, 0.4, -0.5],
            vec![-0.2, 0.8, 0.6],
            vec![0.5, -0.1, 0.9],
        ])?)?;
        let w = tape.leaf(params.get(ParamId(0)).unwrap())?;
        let b = tape.leaf(params.get(ParamId(1)).unwrap())?;
        let u = tape.leaf(params.get(ParamId(2)).unwrap())?;
        let c = tape.leaf(params.get(ParamId(3)).unwrap())?;

        let h = tape.relu(tape.add_row(tape.matmul(x, w)?, b)?)?;
        let h = tape.row_unit_normalize(h)?;
        let picked = tape.gather_rows(h, &[0, 2, 3])?;
        let paired = tape.concat_rows(picked, tape.gather_rows(h, &[1, 1, 0])?)?;
        let logit_mat = tape.matmul(paired, u)?;
        let bce = tape.sigmoid_bce(logit_mat, &[1.0, 0.0, 1.0])?;

        let pooled = tape.mean_rows(h)?;
        let class_logits = tape.matmul(pooled, c)?;
        let ce = tape.softmax_cross_entropy(class_logits, &[1])?;

        let total = tape.add(tape.scale(bce, 0.7)?, tape.scale(ce, 0.3)?)?;
        tape.scalar_value(total)
    }

    fn composite_grad(params: &ParamSet) -> crate::Result<GradientMap> {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_rows(&[
            vec![0.3, -0.7, 0.2],
            vec![1.1, 0.4, -0.5],
            vec![-0.2, 0.8, 0.6],
            vec![0.5, -0.1, 0.9],
        ])?)?;
        let w = tape.leaf(params.get(ParamId(0)).unwrap())?;
        let b = tape.leaf(params.get(ParamId(1)).unwrap())?;
        let u = tape.leaf(params.get(ParamId(2)).unwrap())?;
        let c = tape.leaf(params.get(ParamId(3)).unwrap())?;

        let h = tape.relu(tape.add_row(tape.matmul(x, w)?, b)?)?;
        let h = tape.row_unit_normalize(h)?;
        let picked = tape.gather_rows(h, &[0, 2, 3])?;
        let paired = tape.concat_rows(picked, tape.gather_rows(h, &[1, 1, 0])?)?;
        let logit_mat = tape.matmul(paired, u)?;
        let bce = tape.sigmoid_bce(logit_mat, &[1.0, 0.0, 1.0])?;

        let pooled = tape.mean_rows(h)?;
        let class_logits = tape.matmul(pooled, c)?;
        let ce = tape.softmax_cross_entropy(class_logits, &[1])?;

        let total = tape.add(tape.scale(bce, 0.7)?, tape.scale(ce, 0.3)?)?;
        tape.backward(
            total,
            &[(ParamId(0), w), (ParamId(1), b), (ParamId(2), u), (ParamId(3), c)],
        )
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = crate::seeds::rng(11);
        let params = ParamSet::new(vec![
            param(0, Tensor::glorot_uniform(3, 4, &mut rng)),
            param(1, Tensor::glorot_uniform(1, 4, &mut rng)),
            param(2, Tensor::glorot_uniform(8, 1, &mut rng)),
            param(3, Tensor::glorot_uniform(4, 2, &mut rng)),
        ]);
        let analytic = composite_grad(&params).unwrap();
        let numeric = fdcheck::fd_gradient(&composite_loss, &params, 1e-5).unwrap();
        let err = fdcheck::grad_rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "relative error {err}");
    }

    struct QuadraticObjective {
        a_diag: Vec<f64>,
    }

    impl Objective for QuadraticObjective {
        fn loss(&self, params: &ParamSet) -> crate::Result<f64> {
            let theta = params.get(ParamId(0)).unwrap();
            Ok(0.5
                * theta
                    .data()
                    .iter()
                    .zip(&self.a_diag)
                    .map(|(t, a)| a * t * t)
                    .sum::<f64>())
        }

        fn loss_and_grad(&self, params: &ParamSet) -> crate::Result<(f64, GradientMap)> {
            let theta = params.get(ParamId(0)).unwrap();
            let grad_data: Vec<f64> = theta
                .data()
                .iter()
                .zip(&self.a_diag)
                .map(|(t, a)| a * t)
                .collect();
            let mut grads = GradientMap::new();
            grads.insert(
                ParamId(0),
                Tensor::from_vec(1, grad_data.len(), grad_data)?,
            );
            Ok((self.loss(params)?, grads))
        }
    }

    #[test]
    fn hvp_on_diagonal_quadratic() {
        // L = 0.5 theta' A theta with A = diag(2, 4); H v = (2, 4) for v = (1, 1)
        let obj = QuadraticObjective {
            a_diag: vec![2.0, 4.0],
        };
        let params = ParamSet::new(vec![param(0, Tensor::from_rows(&[vec![0.3, -0.8]]).unwrap())]);
        let mut v = GradientMap::new();
        v.insert(ParamId(0), Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
        let hv = hessian_vector_product(&obj, &params, &v).unwrap();
        let got = hv.get(ParamId(0)).unwrap();
        assert!((got.get(0, 0) - 2.0).abs() < 1e-6);
        assert!((got.get(0, 1) - 4.0).abs() < 1e-6);
    }

    struct LinearObjective;

    impl Objective for LinearObjective {
        fn loss(&self, params: &ParamSet) -> crate::Result<f64> {
            Ok(params.get(ParamId(0)).unwrap().sum())
        }

        fn loss_and_grad(&self, params: &ParamSet) -> crate::Result<(f64, GradientMap)> {
            let theta = params.get(ParamId(0)).unwrap();
            let mut grads = GradientMap::new();
            grads.insert(ParamId(0), Tensor::filled(theta.rows(), theta.cols(), 1.0));
            Ok((self.loss(params)?, grads))
        }
    }

    #[test]
    fn hvp_of_linear_loss_is_zero() {
        let params = ParamSet::new(vec![param(0, Tensor::from_rows(&[vec![5.0, -3.0]]).unwrap())]);
        let mut v = GradientMap::new();
        v.insert(ParamId(0), Tensor::from_rows(&[vec![0.7, 1.3]]).unwrap());
        let hv = hessian_vector_product(&LinearObjective, &params, &v).unwrap();
        assert!(hv.inf_norm() < 1e-9);
    }

    struct CompositeObjective;

    impl Objective for CompositeObjective {
        fn loss(&self, params: &ParamSet) -> crate::Result<f64> {
            composite_loss(params)
        }

        fn loss_and_grad(&self, params: &ParamSet) -> crate::Result<(f64, GradientMap)> {
            Ok((composite_loss(params)?, composite_grad(params)?))
        }
    }

    #[test]
    fn hvp_matches_dense_finite_difference_hessian() {
        let mut rng = crate::seeds::rng(23);
        // 3*4 + 4 + 8 + 8 = 32 params, small enough for a dense Hessian oracle
        let params = ParamSet::new(vec![
            param(0, Tensor::glorot_uniform(3, 4, &mut rng)),
            param(1, Tensor::glorot_uniform(1, 4, &mut rng)),
            param(2, Tensor::glorot_uniform(8, 1, &mut rng)),
            param(3, Tensor::glorot_uniform(4, 2, &mut rng)),
        ]);
        let mut v = GradientMap::new();
        for (id, t) in params.iter() {
            v.insert(id, Tensor::glorot_uniform(t.rows(), t.cols(), &mut rng));
        }
        let hv = hessian_vector_product(&CompositeObjective, &params, &v).unwrap();
        let hv_oracle =
            fdcheck::fd_hessian_times_vector(&composite_loss, &params, &v, 1e-4).unwrap();
        let err = fdcheck::grad_rel_err(&hv, &hv_oracle);
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn gather_rows_out_of_range_is_argument_error() {
        let tape = Tape::new();
        let v = tape.leaf(&Tensor::zeros(2, 2)).unwrap();
        assert!(matches!(
            tape.gather_rows(v, &[0, 2]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let tape = Tape::new();
            let x = tape
                .leaf(&Tensor::from_rows(&[vec![0.5, -1.5], vec![2.0, 0.25]]).unwrap())
                .unwrap();
            let y = tape.row_unit_normalize(tape.relu(x).unwrap()).unwrap();
            tape.value(y)
        };
        assert_eq!(run(), run());
    }
}
