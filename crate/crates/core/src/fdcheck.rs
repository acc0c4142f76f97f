//! Finite-difference oracles for gradient and Hessian checks.
//!
//! Everything here differentiates a loss *numerically*, using only forward
//! evaluations, so it stays independent of the tape's backward pass and can
//! serve as the reference in tests.

use crate::autodiff::{GradientMap, ParamId, ParamSet};
use crate::tensor::Tensor;
use crate::Result;

/// Central-difference gradient of `loss` at `params`, one entry at a time.
/// The step is scaled per entry: `eps * (1 + |theta_i|)`.
pub fn fd_gradient<F>(loss: &F, params: &ParamSet, eps: f64) -> Result<GradientMap>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    let mut out = GradientMap::new();
    for (id, tensor) in params.iter() {
        let mut grad = Tensor::zeros(tensor.rows(), tensor.cols());
        for idx in 0..tensor.len() {
            let step = eps * (1.0 + tensor.data()[idx].abs());
            let mut plus = params.clone();
            plus.get_mut(id).unwrap().data_mut()[idx] += step;
            let mut minus = params.clone();
            minus.get_mut(id).unwrap().data_mut()[idx] -= step;
            grad.data_mut()[idx] = (loss(&plus)? - loss(&minus)?) / (2.0 * step);
        }
        out.insert(id, grad);
    }
    Ok(out)
}

/// Dense finite-difference Hessian times a direction `v`, via second-order
/// central differences of the loss. Quadratic cost in the parameter count;
/// meant for toy models only.
pub fn fd_hessian_times_vector<F>(
    loss: &F,
    params: &ParamSet,
    v: &GradientMap,
    eps: f64,
) -> Result<GradientMap>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    let layout = flatten_layout(params);
    let n = layout.total;
    let theta = flatten(params, &layout);
    let dir = flatten_map(v, &layout);

    // H[i][j] = (L(+i+j) - L(+i-j) - L(-i+j) + L(-i-j)) / (4 eps^2)
    let mut hv = vec![0.0; n];
    for i in 0..n {
        let mut row_dot = 0.0;
        for (j, &vj) in dir.iter().enumerate() {
            if vj == 0.0 {
                continue;
            }
            let probe = |si: f64, sj: f64| -> Result<f64> {
                let mut t = theta.clone();
                t[i] += si * eps;
                t[j] += sj * eps;
                loss(&unflatten(params, &layout, &t))
            };
            let h_ij = (probe(1.0, 1.0)? - probe(1.0, -1.0)? - probe(-1.0, 1.0)?
                + probe(-1.0, -1.0)?)
                / (4.0 * eps * eps);
            row_dot += h_ij * vj;
        }
        hv[i] = row_dot;
    }
    Ok(unflatten_map(&layout, &hv))
}

/// Global relative error between two gradient maps:
/// `||a - b||_2 / (||b||_2 + 1e-12)`.
pub fn grad_rel_err(a: &GradientMap, b: &GradientMap) -> f64 {
    let mut diff_sq = 0.0;
    let mut ref_sq = 0.0;
    for (id, gb) in b.iter() {
        let ga = a.get(id);
        for (idx, &vb) in gb.data().iter().enumerate() {
            let va = ga.map_or(0.0, |t| t.data()[idx]);
            diff_sq += (va - vb) * (va - vb);
            ref_sq += vb * vb;
        }
    }
    diff_sq.sqrt() / (ref_sq.sqrt() + 1e-12)
}

struct FlatLayout {
    ids: Vec<(ParamId, usize, usize, usize)>, // id, offset, rows, cols
    total: usize,
}

fn flatten_layout(params: &ParamSet) -> FlatLayout {
    let mut ids = Vec::new();
    let mut offset = 0;
    for (id, t) in params.iter() {
        ids.push((id, offset, t.rows(), t.cols()));
        offset += t.len();
    }
    FlatLayout { ids, total: offset }
}

fn flatten(params: &ParamSet, layout: &FlatLayout) -> Vec<f64> {
    let mut out = vec![0.0; layout.total];
    for (id, offset, _, _) in &layout.ids {
        let t = params.get(*id).unwrap();
        out[*offset..*offset + t.len()].copy_from_slice(t.data());
    }
    out
}

fn unflatten(params: &ParamSet, layout: &FlatLayout, flat: &[f64]) -> ParamSet {
    let mut out = params.clone();
    for (id, offset, _, _) in &layout.ids {
        let t = out.get_mut(*id).unwrap();
        let len = t.len();
        t.data_mut().copy_from_slice(&flat[*offset..*offset + len]);
    }
    out
}

fn flatten_map(map: &GradientMap, layout: &FlatLayout) -> Vec<f64> {
    let mut out = vec![0.0; layout.total];
    for (id, offset, _, _) in &layout.ids {
        if let Some(t) = map.get(*id) {
            out[*offset..*offset + t.len()].copy_from_slice(t.data());
        }
    }
    out
}

fn unflatten_map(layout: &FlatLayout, flat: &[f64]) -> GradientMap {
    let mut out = GradientMap::new();
    for (id, offset, rows, cols) in &layout.ids {
        let data = flat[*offset..*offset + rows * cols].to_vec();
        out.insert(*id, Tensor::from_vec(*rows, *cols, data).unwrap());
    }
    out
}
