//! Central finite-difference verification of tape gradients (64-bit).
//!
//! The numeric side only ever calls the forward closure, so it stays
//! independent of every backward rule it checks.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Norm below which a gradient tensor counts as zero.
pub const NORM_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Finite-difference step.
    pub step: f64,
    /// Check at most this many coordinates per tensor (evenly strided).
    pub max_coords_per_tensor: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            max_coords_per_tensor: usize::MAX,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    /// Largest `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over tensors,
    /// restricted to the checked coordinates.
    pub max_rel_error: f64,
    /// Name (or index) of the tensor attaining `max_rel_error`.
    pub worst: String,
    pub coords_checked: usize,
}

struct Accum {
    max_rel: f64,
    worst: String,
    coords: usize,
}

impl Accum {
    fn record(&mut self, name: String, analytic: &[f64], numeric: &[f64]) {
        let diff: f64 = analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        // gradients that vanish analytically (e.g. key biases under softmax)
        // leave only rounding noise, so norms are floored
        let denom = na.max(nn).max(NORM_FLOOR);
        let rel = diff / denom;
        if self.worst.is_empty() || rel > self.max_rel {
            self.max_rel = rel;
            self.worst = name;
        }
        self.coords += analytic.len();
    }

    fn finish(self) -> GradReport {
        GradReport {
            max_rel_error: self.max_rel,
            worst: self.worst,
            coords_checked: self.coords,
        }
    }
}

fn coords(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let stride = len.div_ceil(max);
    (0..len).step_by(stride).collect()
}

/// Checks the gradient of `f(inputs)` with respect to each input tensor.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, cfg: &GradCheck) -> Result<GradReport>
where
    F: for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Result<Var<'a, f64>>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .wrt(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or(vec![0.0; t.len()])
            })
            .collect()
    };
    let mut acc = Accum {
        max_rel: 0.0,
        worst: String::new(),
        coords: 0,
    };
    let mut work = inputs.to_vec();
    for (ti, tensor) in inputs.iter().enumerate() {
        let picked = coords(tensor.len(), cfg.max_coords_per_tensor);
        let mut numeric = Vec::with_capacity(picked.len());
        for &c in &picked {
            let orig = tensor.data()[c];
            work[ti].data_mut()[c] = orig + cfg.step;
            let plus = eval(&work)?;
            work[ti].data_mut()[c] = orig - cfg.step;
            let minus = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            numeric.push((plus - minus) / (2.0 * cfg.step));
        }
        let an: Vec<f64> = picked.iter().map(|&c| analytic[ti][c]).collect();
        acc.record(format!("input{ti}"), &an, &numeric);
    }
    Ok(acc.finish())
}

/// Checks the gradient of `f(store)` with respect to every parameter.
pub fn check_param_gradients<F>(
    store: &ParamStore<f64>,
    f: F,
    cfg: &GradCheck,
) -> Result<GradReport>
where
    F: for<'a> Fn(&'a Tape<f64>, &ParamStore<f64>) -> Result<Var<'a, f64>>,
{
    let analytic = {
        let tape = Tape::new();
        let loss = f(&tape, store)?;
        let grads = tape.backward(loss)?;
        let mut scratch = store.clone();
        scratch.zero_grads();
        grads.accumulate_into(&mut scratch);
        scratch
    };
    let mut acc = Accum {
        max_rel: 0.0,
        worst: String::new(),
        coords: 0,
    };
    let mut work = store.clone();
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        Ok(f(&tape, s)?.item())
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let len = store.value(id).len();
        let picked = coords(len, cfg.max_coords_per_tensor);
        let mut numeric = Vec::with_capacity(picked.len());
        for &c in &picked {
            let orig = store.value(id).data()[c];
            work.get_mut(id).value.data_mut()[c] = orig + cfg.step;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[c] = orig - cfg.step;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[c] = orig;
            numeric.push((plus - minus) / (2.0 * cfg.step));
        }
        let an: Vec<f64> = picked
            .iter()
            .map(|&c| analytic.get(id).grad.data()[c])
            .collect();
        acc.record(store.get(id).name.clone(), &an, &numeric);
    }
    Ok(acc.finish())
}
